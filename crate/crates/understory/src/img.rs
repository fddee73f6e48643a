//! Linear-RGB image buffer with sRGB PNG encode/decode and a float sidecar
//! format ("CNPF") that preserves linear values for metric computation.

use std::io::{Read, Write};
use std::path::Path;

use crate::error::{Error, Result};

/// Image stored as linear RGB rows, top to bottom.
#[derive(Debug, Clone, PartialEq)]
pub struct ImageBuf {
    pub width: u32,
    pub height: u32,
    /// Row-major pixels, `height * width` entries.
    pub data: Vec<[f32; 3]>,
}

impl ImageBuf {
    pub fn new(width: u32, height: u32) -> Self {
        ImageBuf {
            width,
            height,
            data: vec![[0.0; 3]; (width * height) as usize],
        }
    }

    pub fn filled(width: u32, height: u32, color: [f32; 3]) -> Self {
        ImageBuf {
            width,
            height,
            data: vec![color; (width * height) as usize],
        }
    }

    #[inline]
    pub fn get(&self, x: u32, y: u32) -> [f32; 3] {
        self.data[(y * self.width + x) as usize]
    }

    #[inline]
    pub fn set(&mut self, x: u32, y: u32, c: [f32; 3]) {
        self.data[(y * self.width + x) as usize] = c;
    }

    /// Rec. 709 luminance of the linear values.
    pub fn luminance(&self) -> Vec<f32> {
        self.data
            .iter()
            .map(|c| 0.2126 * c[0] + 0.7152 * c[1] + 0.0722 * c[2])
            .collect()
    }

    pub fn mean_abs_diff(&self, other: &ImageBuf) -> f64 {
        assert_eq!(self.data.len(), other.data.len());
        let mut acc = 0.0f64;
        for (a, b) in self.data.iter().zip(&other.data) {
            for ch in 0..3 {
                acc += (a[ch] as f64 - b[ch] as f64).abs();
            }
        }
        acc / (self.data.len() * 3) as f64
    }

    /// Encode to 8-bit sRGB PNG.
    pub fn save_png(&self, path: &Path) -> Result<()> {
        let mut buf = image::RgbImage::new(self.width, self.height);
        for y in 0..self.height {
            for x in 0..self.width {
                let c = self.get(x, y);
                buf.put_pixel(
                    x,
                    y,
                    image::Rgb([
                        linear_to_srgb_u8(c[0]),
                        linear_to_srgb_u8(c[1]),
                        linear_to_srgb_u8(c[2]),
                    ]),
                );
            }
        }
        buf.save(path)?;
        Ok(())
    }

    /// Decode an 8-bit sRGB PNG to linear values.
    pub fn load_png(path: &Path) -> Result<Self> {
        let img = image::open(path)
            .map_err(|e| Error::io(format!("{}: {e}", path.display())))?
            .to_rgb8();
        let (width, height) = img.dimensions();
        let mut out = ImageBuf::new(width, height);
        for y in 0..height {
            for x in 0..width {
                let p = img.get_pixel(x, y).0;
                out.set(
                    x,
                    y,
                    [
                        srgb_u8_to_linear(p[0]),
                        srgb_u8_to_linear(p[1]),
                        srgb_u8_to_linear(p[2]),
                    ],
                );
            }
        }
        Ok(out)
    }

    /// Write the linear float sidecar: magic "CNPF", width u32, height u32,
    /// then f32 RGB little-endian, row-major.
    pub fn save_float(&self, path: &Path) -> Result<()> {
        let mut f = std::fs::File::create(path)?;
        f.write_all(b"CNPF")?;
        f.write_all(&self.width.to_le_bytes())?;
        f.write_all(&self.height.to_le_bytes())?;
        let mut bytes = Vec::with_capacity(self.data.len() * 12);
        for p in &self.data {
            for ch in 0..3 {
                bytes.extend_from_slice(&p[ch].to_le_bytes());
            }
        }
        f.write_all(&bytes)?;
        Ok(())
    }

    pub fn load_float(path: &Path) -> Result<Self> {
        let mut f = std::fs::File::open(path)
            .map_err(|e| Error::io(format!("{}: {e}", path.display())))?;
        let mut magic = [0u8; 4];
        f.read_exact(&mut magic)?;
        if &magic != b"CNPF" {
            return Err(Error::io(format!("{}: not a CNPF file", path.display())));
        }
        let mut u = [0u8; 4];
        f.read_exact(&mut u)?;
        let width = u32::from_le_bytes(u);
        f.read_exact(&mut u)?;
        let height = u32::from_le_bytes(u);
        let n = (width as usize) * (height as usize);
        let mut bytes = vec![0u8; n * 12];
        f.read_exact(&mut bytes)?;
        let mut data = Vec::with_capacity(n);
        for i in 0..n {
            let mut px = [0.0f32; 3];
            for ch in 0..3 {
                let off = (i * 3 + ch) * 4;
                px[ch] = f32::from_le_bytes(bytes[off..off + 4].try_into().unwrap());
            }
            data.push(px);
        }
        Ok(ImageBuf {
            width,
            height,
            data,
        })
    }
}

/// Standard sRGB transfer function, linear -> encoded, both in [0,1].
pub fn linear_to_srgb(v: f32) -> f32 {
    let v = v.clamp(0.0, 1.0);
    if v <= 0.003_130_8 {
        12.92 * v
    } else {
        1.055 * v.powf(1.0 / 2.4) - 0.055
    }
}

/// Inverse sRGB transfer function, encoded -> linear.
pub fn srgb_to_linear(v: f32) -> f32 {
    let v = v.clamp(0.0, 1.0);
    if v <= 0.040_45 {
        v / 12.92
    } else {
        ((v + 0.055) / 1.055).powf(2.4)
    }
}

pub fn linear_to_srgb_u8(v: f32) -> u8 {
    (linear_to_srgb(v) * 255.0).round() as u8
}

pub fn srgb_u8_to_linear(v: u8) -> f32 {
    srgb_to_linear(v as f32 / 255.0)
}

/// Save a binary mask as an 8-bit PNG with values 0 or 255.
pub fn save_mask_png(mask: &[bool], width: u32, height: u32, path: &Path) -> Result<()> {
    let mut buf = image::GrayImage::new(width, height);
    for y in 0..height {
        for x in 0..width {
            let v = if mask[(y * width + x) as usize] { 255 } else { 0 };
            buf.put_pixel(x, y, image::Luma([v]));
        }
    }
    buf.save(path)?;
    Ok(())
}

pub fn load_mask_png(path: &Path) -> Result<(Vec<bool>, u32, u32)> {
    let img = image::open(path)
        .map_err(|e| Error::io(format!("{}: {e}", path.display())))?
        .to_luma8();
    let (w, h) = img.dimensions();
    let mask = img.pixels().map(|p| p.0[0] >= 128).collect();
    Ok((mask, w, h))
}
