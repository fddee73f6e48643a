//! Cameras, rays and the digital terrain model.
//!
//! World frame is z-up, units are meters. Pixel coordinates follow the
//! pixel-center convention: the integer pixel `p` samples the continuous
//! image plane at `p + 0.5`.

use nalgebra::{Matrix3, Vector3};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub type Vec3 = Vector3<f64>;

/// Rigid camera-to-world transform.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Pose {
    pub rotation: Matrix3<f64>,
    pub translation: Vec3,
}

impl Pose {
    pub fn identity() -> Self {
        Pose {
            rotation: Matrix3::identity(),
            translation: Vec3::zeros(),
        }
    }

    /// Nadir pose: camera at `center` looking straight down (-z), with the
    /// camera x axis along world +x.
    pub fn nadir(center: Vec3) -> Self {
        // Camera frame: x right, y down, z forward. Forward = world -z.
        let rotation = Matrix3::new(
            1.0, 0.0, 0.0, //
            0.0, -1.0, 0.0, //
            0.0, 0.0, -1.0,
        );
        Pose {
            rotation,
            translation: center,
        }
    }

    pub fn to_matrix4(&self) -> [f64; 16] {
        let r = &self.rotation;
        let t = &self.translation;
        [
            r[(0, 0)],
            r[(0, 1)],
            r[(0, 2)],
            t.x,
            r[(1, 0)],
            r[(1, 1)],
            r[(1, 2)],
            t.y,
            r[(2, 0)],
            r[(2, 1)],
            r[(2, 2)],
            t.z,
            0.0,
            0.0,
            0.0,
            1.0,
        ]
    }

    pub fn from_matrix4(m: &[f64; 16]) -> Result<Self> {
        if m[12] != 0.0 || m[13] != 0.0 || m[14] != 0.0 || m[15] != 1.0 {
            return Err(Error::input("pose matrix last row must be [0,0,0,1]"));
        }
        let rotation = Matrix3::new(m[0], m[1], m[2], m[4], m[5], m[6], m[8], m[9], m[10]);
        let translation = Vec3::new(m[3], m[7], m[11]);
        Ok(Pose {
            rotation,
            translation,
        })
    }
}

/// Pinhole camera with a rigid camera-to-world pose.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Camera {
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
    pub width: u32,
    pub height: u32,
    pub pose: Pose,
}

impl Camera {
    pub fn new(
        fx: f64,
        fy: f64,
        cx: f64,
        cy: f64,
        width: u32,
        height: u32,
        pose: Pose,
    ) -> Result<Self> {
        if !(fx > 0.0 && fy > 0.0) {
            return Err(Error::input(format!("focal lengths must be positive: fx={fx}, fy={fy}")));
        }
        if !(cx > 0.0 && cx < width as f64 && cy > 0.0 && cy < height as f64) {
            return Err(Error::input(format!(
                "principal point ({cx},{cy}) outside {width}x{height} image"
            )));
        }
        let r = pose.rotation;
        let orth = (r.transpose() * r - Matrix3::identity()).abs().max();
        if orth >= 1e-9 {
            return Err(Error::input(format!(
                "rotation is not orthonormal (max deviation {orth:.3e})"
            )));
        }
        if r.determinant() < 0.0 {
            return Err(Error::input("rotation has negative determinant"));
        }
        Ok(Camera {
            fx,
            fy,
            cx,
            cy,
            width,
            height,
            pose,
        })
    }

    /// Camera center in the world frame.
    pub fn center(&self) -> Vec3 {
        self.pose.translation
    }

    /// World-space unit direction of the optical axis.
    pub fn optical_axis(&self) -> Vec3 {
        self.pose.rotation * Vec3::new(0.0, 0.0, 1.0)
    }

    /// Back-project the pixel `(px, py)` into a world-space ray.
    ///
    /// `(px, py)` is a continuous pixel coordinate; the integer pixel `p`
    /// samples at `p + 0.5`.
    pub fn ray_for_pixel(&self, px: f64, py: f64) -> Result<Ray> {
        if !(px >= 0.0 && px < self.width as f64 && py >= 0.0 && py < self.height as f64) {
            return Err(Error::input(format!(
                "pixel ({px},{py}) outside {}x{} image",
                self.width, self.height
            )));
        }
        let dir_cam = Vec3::new(
            (px + 0.5 - self.cx) / self.fx,
            (py + 0.5 - self.cy) / self.fy,
            1.0,
        );
        let dir = (self.pose.rotation * dir_cam).normalize();
        Ray::new(self.center(), dir, 0.0, f64::INFINITY)
    }

    /// Project a world point to continuous pixel coordinates.
    ///
    /// Returns `None` for points behind the camera.
    pub fn project(&self, p: Vec3) -> Option<(f64, f64)> {
        let cam = self.pose.rotation.transpose() * (p - self.pose.translation);
        if cam.z <= 0.0 {
            return None;
        }
        let px = self.fx * cam.x / cam.z + self.cx - 0.5;
        let py = self.fy * cam.y / cam.z + self.cy - 0.5;
        Some((px, py))
    }
}

/// Parametric ray `r(t) = o + t*d` with integration bounds.
#[derive(Debug, Clone, PartialEq)]
pub struct Ray {
    pub origin: Vec3,
    pub direction: Vec3,
    pub t_near: f64,
    pub t_far: f64,
}

impl Ray {
    pub fn new(origin: Vec3, direction: Vec3, t_near: f64, t_far: f64) -> Result<Self> {
        if (direction.norm() - 1.0).abs() > 1e-9 {
            return Err(Error::input(format!(
                "ray direction must be unit length, got |d|={}",
                direction.norm()
            )));
        }
        if !(t_near >= 0.0 && t_near < t_far) {
            return Err(Error::input(format!(
                "ray bounds must satisfy 0 <= t_near < t_far, got [{t_near}, {t_far}]"
            )));
        }
        Ok(Ray {
            origin,
            direction,
            t_near,
            t_far,
        })
    }

    pub fn at(&self, t: f64) -> Vec3 {
        self.origin + t * self.direction
    }
}

/// Bilinear height sample; `clamped` flags a query outside the raster footprint.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct HeightSample {
    pub height: f64,
    pub clamped: bool,
}

/// Digital terrain model: a row-major raster of terrain heights (z values).
///
/// Node `(row, col)` sits at world `(origin.x + col*cell_size,
/// origin.y + row*cell_size)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Dtm {
    pub origin: [f64; 2],
    pub cell_size: f64,
    pub rows: usize,
    pub cols: usize,
    pub heights: Vec<f64>,
}

impl Dtm {
    pub fn new(
        origin: [f64; 2],
        cell_size: f64,
        rows: usize,
        cols: usize,
        heights: Vec<f64>,
    ) -> Result<Self> {
        if cell_size <= 0.0 {
            return Err(Error::input("dtm cell_size must be positive"));
        }
        if rows < 2 || cols < 2 {
            return Err(Error::input("dtm needs at least a 2x2 raster"));
        }
        if heights.len() != rows * cols {
            return Err(Error::input(format!(
                "dtm raster length {} != rows*cols = {}",
                heights.len(),
                rows * cols
            )));
        }
        if heights.iter().any(|h| !h.is_finite()) {
            return Err(Error::input("dtm heights must be finite"));
        }
        Ok(Dtm {
            origin,
            cell_size,
            rows,
            cols,
            heights,
        })
    }

    /// Constant-height raster covering `[origin, origin + extent]`.
    pub fn flat(origin: [f64; 2], extent: f64, cell_size: f64, height: f64) -> Result<Self> {
        let n = (extent / cell_size).ceil() as usize + 1;
        Dtm::new(origin, cell_size, n, n, vec![height; n * n])
    }

    pub fn node(&self, row: usize, col: usize) -> f64 {
        self.heights[row * self.cols + col]
    }

    pub fn min_height(&self) -> f64 {
        self.heights.iter().cloned().fold(f64::INFINITY, f64::min)
    }

    pub fn max_height(&self) -> f64 {
        self.heights.iter().cloned().fold(f64::NEG_INFINITY, f64::max)
    }

    /// Raster footprint as `(min_x, min_y, max_x, max_y)`.
    pub fn footprint(&self) -> (f64, f64, f64, f64) {
        (
            self.origin[0],
            self.origin[1],
            self.origin[0] + (self.cols - 1) as f64 * self.cell_size,
            self.origin[1] + (self.rows - 1) as f64 * self.cell_size,
        )
    }

    /// Bilinear interpolation of the four surrounding nodes. Queries outside
    /// the footprint clamp to the edge and flag `clamped`.
    pub fn height_at(&self, x: f64, y: f64) -> HeightSample {
        let gx = (x - self.origin[0]) / self.cell_size;
        let gy = (y - self.origin[1]) / self.cell_size;
        let max_x = (self.cols - 1) as f64;
        let max_y = (self.rows - 1) as f64;
        let clamped = gx < 0.0 || gy < 0.0 || gx > max_x || gy > max_y;
        let gx = gx.clamp(0.0, max_x);
        let gy = gy.clamp(0.0, max_y);
        let c0 = (gx.floor() as usize).min(self.cols - 2);
        let r0 = (gy.floor() as usize).min(self.rows - 2);
        let fx = gx - c0 as f64;
        let fy = gy - r0 as f64;
        let h00 = self.node(r0, c0);
        let h01 = self.node(r0, c0 + 1);
        let h10 = self.node(r0 + 1, c0);
        let h11 = self.node(r0 + 1, c0 + 1);
        let height = h00 * (1.0 - fx) * (1.0 - fy)
            + h01 * fx * (1.0 - fy)
            + h10 * (1.0 - fx) * fy
            + h11 * fx * fy;
        HeightSample { height, clamped }
    }
}

/// First parameter `t_g` at which the ray drops to `dtm_height + margin`,
/// found by marching at steps of at most `cell_size / 2` and refining by
/// bisection to `1e-4 * cell_size` along the ray.
///
/// Returns `ray.t_far` when no crossing exists in `[t_near, t_far]` (the
/// degenerate crop renders background).
pub fn ray_ground_entry(ray: &Ray, dtm: &Dtm, margin: f64) -> f64 {
    let above = |t: f64| -> f64 {
        let p = ray.at(t);
        p.z - dtm.height_at(p.x, p.y).height - margin
    };

    // Marching past the point where the ray altitude falls below the raster
    // minimum is pointless; use that to bound infinite rays.
    let mut t_stop = ray.t_far;
    if !t_stop.is_finite() {
        let floor = dtm.min_height() + margin.min(0.0) - 1.0;
        if ray.direction.z < 0.0 {
            t_stop = (floor - ray.origin.z) / ray.direction.z;
        } else {
            // Ray never descends; it can only start below the surface.
            t_stop = ray.t_near + 1.0;
        }
    }
    if t_stop <= ray.t_near {
        return ray.t_far;
    }

    let step = (dtm.cell_size / 2.0).min((t_stop - ray.t_near).max(1e-12));
    let mut t_prev = ray.t_near;
    let mut f_prev = above(t_prev);
    if f_prev <= 0.0 {
        // The ray starts at or below the margin surface; there is no descent
        // through it, so the crop is degenerate and renders background.
        return ray.t_far;
    }
    let mut t = t_prev;
    while t < t_stop {
        t = (t + step).min(t_stop);
        let f = above(t);
        if f <= 0.0 {
            // Bisect [t_prev, t].
            let (mut lo, mut hi) = (t_prev, t);
            let tol = 1e-4 * dtm.cell_size;
            while hi - lo > tol {
                let mid = 0.5 * (lo + hi);
                if above(mid) <= 0.0 {
                    hi = mid;
                } else {
                    lo = mid;
                }
            }
            return hi;
        }
        t_prev = t;
        f_prev = f;
    }
    let _ = f_prev;
    ray.t_far
}
