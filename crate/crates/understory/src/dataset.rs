//! On-disk dataset layout: posed images plus terrain and scene metadata.
//!
//! A dataset directory contains:
//!
//! ```text
//! cameras.json   array of camera records (intrinsics + 4x4 row-major pose)
//! images/*.png   8-bit sRGB captures
//! images/*.cnpf  optional float sidecars with exact linear RGB
//! seg/*.png      optional visibility masks (255 = not canopy)
//! dtm.json       terrain raster
//! scene.json     optional generating scene (synthetic datasets only)
//! ```
//!
//! Float sidecars exist because 8-bit quantization destroys the signal in
//! deliberately underexposed captures; loading prefers the sidecar when
//! present.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{Camera, Dtm, Pose};
use crate::img::ImageBuf;
use crate::scene::{AnalyticScene, Capture};

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CameraRecord {
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
    pub width: u32,
    pub height: u32,
    /// Camera-to-world transform, 16 row-major entries.
    pub pose: [f64; 16],
    /// Image path relative to the dataset root.
    pub image: String,
}

impl CameraRecord {
    pub fn from_camera(camera: &Camera, image: String) -> CameraRecord {
        CameraRecord {
            fx: camera.fx,
            fy: camera.fy,
            cx: camera.cx,
            cy: camera.cy,
            width: camera.width,
            height: camera.height,
            pose: camera.pose.to_matrix4(),
            image,
        }
    }

    pub fn to_camera(&self) -> Result<Camera> {
        Camera::new(
            self.fx,
            self.fy,
            self.cx,
            self.cy,
            self.width,
            self.height,
            Pose::from_matrix4(&self.pose)?,
        )
    }
}

/// One posed view loaded in memory.
#[derive(Debug, Clone)]
pub struct DatasetView {
    pub name: String,
    pub camera: Camera,
    pub image: ImageBuf,
    /// Per-pixel visibility supervision; true = not canopy.
    pub segmentation: Option<Vec<bool>>,
}

#[derive(Debug, Clone)]
pub struct Dataset {
    pub views: Vec<DatasetView>,
    pub dtm: Dtm,
    /// Present for synthetic datasets; carries the exact generating scene.
    pub scene: Option<AnalyticScene>,
}

fn view_stem(name: &str) -> String {
    Path::new(name)
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_else(|| name.to_owned())
}

impl Dataset {
    pub fn from_capture(capture: Capture, scene: Option<AnalyticScene>) -> Dataset {
        let views = capture
            .views
            .into_iter()
            .map(|v| DatasetView {
                name: v.name,
                camera: v.camera,
                image: v.image,
                segmentation: Some(v.segmentation),
            })
            .collect();
        Dataset {
            views,
            dtm: capture.dtm,
            scene,
        }
    }

    /// Write the dataset directory, creating it if needed. With
    /// `float_sidecars` each PNG gets an exact linear-RGB companion file.
    pub fn save(&self, dir: &Path, float_sidecars: bool) -> Result<()> {
        fs::create_dir_all(dir.join("images"))?;
        let any_seg = self.views.iter().any(|v| v.segmentation.is_some());
        if any_seg {
            fs::create_dir_all(dir.join("seg"))?;
        }
        let mut records = Vec::with_capacity(self.views.len());
        for view in &self.views {
            let rel = format!("images/{}.png", view.name);
            view.image.save_png(&dir.join(&rel))?;
            if float_sidecars {
                view.image
                    .save_float(&dir.join(format!("images/{}.cnpf", view.name)))?;
            }
            if let Some(seg) = &view.segmentation {
                crate::img::save_mask_png(
                    seg,
                    view.image.width,
                    view.image.height,
                    &dir.join(format!("seg/{}.png", view.name)),
                )?;
            }
            records.push(CameraRecord::from_camera(&view.camera, rel));
        }
        write_json_atomic(&dir.join("cameras.json"), &records)?;
        write_json_atomic(&dir.join("dtm.json"), &self.dtm)?;
        if let Some(scene) = &self.scene {
            write_json_atomic(&dir.join("scene.json"), scene)?;
        }
        Ok(())
    }

    pub fn load(dir: &Path) -> Result<Dataset> {
        let records: Vec<CameraRecord> = read_json(&dir.join("cameras.json"))?;
        let dtm: Dtm = read_json(&dir.join("dtm.json"))?;
        let scene_path = dir.join("scene.json");
        let scene = if scene_path.exists() {
            Some(read_json(&scene_path)?)
        } else {
            None
        };
        let mut views = Vec::with_capacity(records.len());
        for rec in &records {
            let camera = rec.to_camera()?;
            let name = view_stem(&rec.image);
            let png_path = dir.join(&rec.image);
            let sidecar = png_path.with_extension("cnpf");
            let image = if sidecar.exists() {
                ImageBuf::load_float(&sidecar)?
            } else {
                ImageBuf::load_png(&png_path)?
            };
            if image.width != rec.width || image.height != rec.height {
                return Err(Error::input(format!(
                    "{}: image is {}x{} but the camera record says {}x{}",
                    rec.image, image.width, image.height, rec.width, rec.height
                )));
            }
            let seg_path = dir.join(format!("seg/{name}.png"));
            let segmentation = if seg_path.exists() {
                let (mask, w, h) = crate::img::load_mask_png(&seg_path)?;
                if w != rec.width || h != rec.height {
                    return Err(Error::input(format!(
                        "seg/{name}.png: mask is {w}x{h} but the image is {}x{}",
                        rec.width, rec.height
                    )));
                }
                Some(mask)
            } else {
                None
            };
            views.push(DatasetView {
                name,
                camera,
                image,
                segmentation,
            });
        }
        Ok(Dataset { views, dtm, scene })
    }
}

/// Serialize to a temp file in the same directory, then rename into place.
pub fn write_json_atomic<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let dir = path.parent().unwrap_or_else(|| Path::new("."));
    fs::create_dir_all(dir)?;
    let tmp: PathBuf = dir.join(format!(
        ".{}.tmp",
        path.file_name().map(|s| s.to_string_lossy()).unwrap_or_default()
    ));
    let json = serde_json::to_string_pretty(value)?;
    fs::write(&tmp, json)?;
    fs::rename(&tmp, path)?;
    Ok(())
}

pub fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T> {
    let text = fs::read_to_string(path)
        .map_err(|e| Error::io(format!("{}: {e}", path.display())))?;
    serde_json::from_str(&text).map_err(|e| Error::io(format!("{}: {e}", path.display())))
}
