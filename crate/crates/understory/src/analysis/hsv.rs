//! HSV box segmentation and point-cloud filters.

use serde::{Deserialize, Serialize};

use crate::cloud::PointCloud;
use crate::error::{Error, Result};
use crate::geometry::Dtm;
use crate::img::ImageBuf;

/// Box region in HSV space; pixels inside it are flagged as canopy.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct HsvBox {
    /// Seed color in HSV, each component in [0,1]; hue is circular.
    pub seed: [f64; 3],
    /// Half-widths (hue, saturation, value).
    pub half_width: [f64; 3],
}

impl HsvBox {
    /// Default half-widths: narrow hue keeps gray trunks, wide
    /// saturation/value tolerates shading variation on foliage.
    pub const DEFAULT_HALF_WIDTH: [f64; 3] = [0.08, 0.35, 0.45];

    pub fn new(seed: [f64; 3], half_width: [f64; 3]) -> Result<HsvBox> {
        for v in seed.iter().chain(half_width.iter()) {
            if !(0.0..=1.0).contains(v) {
                return Err(Error::input("HSV components must be in [0,1]"));
            }
        }
        Ok(HsvBox { seed, half_width })
    }

    pub fn around_rgb(rgb: [f64; 3]) -> Result<HsvBox> {
        HsvBox::new(rgb_to_hsv(rgb), Self::DEFAULT_HALF_WIDTH)
    }

    pub fn contains_hsv(&self, hsv: [f64; 3]) -> bool {
        let dh = circular_distance(hsv[0], self.seed[0]);
        dh <= self.half_width[0]
            && (hsv[1] - self.seed[1]).abs() <= self.half_width[1]
            && (hsv[2] - self.seed[2]).abs() <= self.half_width[2]
    }

    pub fn contains_rgb(&self, rgb: [f64; 3]) -> bool {
        self.contains_hsv(rgb_to_hsv(rgb))
    }
}

fn circular_distance(a: f64, b: f64) -> f64 {
    let d = (a - b).abs() % 1.0;
    d.min(1.0 - d)
}

/// Standard hexcone conversion; hue in [0,1), gray pixels get hue 0 and
/// saturation 0.
pub fn rgb_to_hsv(rgb: [f64; 3]) -> [f64; 3] {
    let [r, g, b] = rgb;
    let max = r.max(g).max(b);
    let min = r.min(g).min(b);
    let delta = max - min;
    let v = max;
    let s = if max > 0.0 { delta / max } else { 0.0 };
    let h = if delta <= 0.0 {
        0.0
    } else if max == r {
        (((g - b) / delta).rem_euclid(6.0)) / 6.0
    } else if max == g {
        ((b - r) / delta + 2.0) / 6.0
    } else {
        ((r - g) / delta + 4.0) / 6.0
    };
    [h, s, v]
}

/// Per-pixel mask: true (keep) where the pixel is NOT in the HSV box.
pub fn hsv_box_segment(image: &ImageBuf, hsv_box: &HsvBox) -> Vec<bool> {
    image
        .data
        .iter()
        .map(|p| !hsv_box.contains_rgb([p[0] as f64, p[1] as f64, p[2] as f64]))
        .collect()
}

/// Drop points whose color falls in the HSV box; order-preserving.
pub fn remove_foliage_points(cloud: &PointCloud, hsv_box: &HsvBox) -> PointCloud {
    PointCloud {
        points: cloud
            .points
            .iter()
            .filter(|p| !hsv_box.contains_rgb(p.color))
            .cloned()
            .collect(),
    }
}

/// Keep points whose height above the local terrain lies within
/// [z_low_offset, z_high_offset].
pub fn crop_points(
    cloud: &PointCloud,
    dtm: &Dtm,
    z_low_offset: f64,
    z_high_offset: f64,
) -> Result<PointCloud> {
    if !(z_low_offset < z_high_offset) {
        return Err(Error::input("crop_points offsets must satisfy low < high"));
    }
    Ok(PointCloud {
        points: cloud
            .points
            .iter()
            .filter(|p| {
                let ground = dtm.height_at(p.position.x, p.position.y).height;
                p.position.z >= ground + z_low_offset && p.position.z <= ground + z_high_offset
            })
            .cloned()
            .collect(),
    })
}
