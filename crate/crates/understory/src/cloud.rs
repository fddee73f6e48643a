//! Point cloud container with ASCII PLY serialization.

use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use crate::error::{Error, Result};
use crate::geometry::Vec3;

#[derive(Debug, Clone, PartialEq)]
pub struct CloudPoint {
    pub position: Vec3,
    /// Linear RGB in [0,1].
    pub color: [f64; 3],
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct PointCloud {
    pub points: Vec<CloudPoint>,
}

impl PointCloud {
    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    /// Write ASCII PLY: element `vertex` with `x y z` floats and
    /// `red green blue` uchar.
    pub fn save_ply(&self, path: &Path) -> Result<()> {
        let f = std::fs::File::create(path)
            .map_err(|e| Error::io(format!("{}: {e}", path.display())))?;
        let mut w = BufWriter::new(f);
        writeln!(w, "ply")?;
        writeln!(w, "format ascii 1.0")?;
        writeln!(w, "element vertex {}", self.points.len())?;
        writeln!(w, "property float x")?;
        writeln!(w, "property float y")?;
        writeln!(w, "property float z")?;
        writeln!(w, "property uchar red")?;
        writeln!(w, "property uchar green")?;
        writeln!(w, "property uchar blue")?;
        writeln!(w, "end_header")?;
        for p in &self.points {
            let c = p.color.map(|v| (v.clamp(0.0, 1.0) * 255.0).round() as u8);
            writeln!(
                w,
                "{} {} {} {} {} {}",
                p.position.x as f32, p.position.y as f32, p.position.z as f32, c[0], c[1], c[2]
            )?;
        }
        Ok(())
    }

    pub fn load_ply(path: &Path) -> Result<Self> {
        let f = std::fs::File::open(path)
            .map_err(|e| Error::io(format!("{}: {e}", path.display())))?;
        let mut lines = BufReader::new(f).lines();
        let mut n_vertices = None;
        loop {
            let line = lines
                .next()
                .ok_or_else(|| Error::io("truncated ply header"))??;
            let line = line.trim().to_string();
            if let Some(rest) = line.strip_prefix("element vertex ") {
                n_vertices = Some(
                    rest.trim()
                        .parse::<usize>()
                        .map_err(|e| Error::io(format!("bad vertex count: {e}")))?,
                );
            }
            if line == "end_header" {
                break;
            }
        }
        let n = n_vertices.ok_or_else(|| Error::io("ply header missing vertex element"))?;
        let mut points = Vec::with_capacity(n);
        for _ in 0..n {
            let line = lines.next().ok_or_else(|| Error::io("truncated ply body"))??;
            let mut it = line.split_whitespace();
            let mut next_f = || -> Result<f64> {
                it.next()
                    .ok_or_else(|| Error::io("short ply vertex line"))?
                    .parse::<f64>()
                    .map_err(|e| Error::io(format!("bad ply number: {e}")))
            };
            let x = next_f()?;
            let y = next_f()?;
            let z = next_f()?;
            let r = next_f()?;
            let g = next_f()?;
            let b = next_f()?;
            points.push(CloudPoint {
                position: Vec3::new(x, y, z),
                color: [r / 255.0, g / 255.0, b / 255.0],
            });
        }
        Ok(PointCloud { points })
    }
}
