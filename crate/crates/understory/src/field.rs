//! Dense optimizable voxel grid over the scene bounds.
//!
//! Each grid node stores five unconstrained raw parameters: density
//! `sigma_raw`, color `c_raw` (three channels) and a visibility channel
//! `v_raw`. Queries trilinearly interpolate the raw parameters and then apply
//! activations: softplus for density, sigmoid for color and visibility, so
//! every interpolated sample is in a valid range regardless of the raw
//! values.

use std::io::{Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::cloud::{CloudPoint, PointCloud};
use crate::error::{Error, Result};
use crate::geometry::Vec3;

/// Parameter channels per voxel: sigma, r, g, b, visibility.
pub const CHANNELS: usize = 5;

const CHECKPOINT_MAGIC: &[u8; 4] = b"CNPL";
const CHECKPOINT_VERSION: u32 = 1;

/// Axis-aligned box, meters.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Aabb {
    pub min: [f64; 3],
    pub max: [f64; 3],
}

impl Aabb {
    pub fn new(min: [f64; 3], max: [f64; 3]) -> Result<Self> {
        for a in 0..3 {
            if !(max[a] > min[a]) {
                return Err(Error::input(format!(
                    "box extent must be positive on every axis, got min={min:?} max={max:?}"
                )));
            }
        }
        Ok(Aabb { min, max })
    }

    pub fn extent(&self) -> [f64; 3] {
        [
            self.max[0] - self.min[0],
            self.max[1] - self.min[1],
            self.max[2] - self.min[2],
        ]
    }

    pub fn contains(&self, p: Vec3) -> bool {
        (0..3).all(|a| p[a] >= self.min[a] && p[a] <= self.max[a])
    }

    /// Intersection of `o + t*d` with the box, clipped to `[t0, t1]`.
    pub fn clip_ray(&self, o: Vec3, d: Vec3, t0: f64, t1: f64) -> Option<(f64, f64)> {
        let mut lo = t0;
        let mut hi = t1;
        for a in 0..3 {
            if d[a].abs() < 1e-15 {
                if o[a] < self.min[a] || o[a] > self.max[a] {
                    return None;
                }
                continue;
            }
            let inv = 1.0 / d[a];
            let (mut ta, mut tb) = ((self.min[a] - o[a]) * inv, (self.max[a] - o[a]) * inv);
            if ta > tb {
                std::mem::swap(&mut ta, &mut tb);
            }
            lo = lo.max(ta);
            hi = hi.min(tb);
            if lo >= hi {
                return None;
            }
        }
        Some((lo, hi))
    }
}

/// Raw-parameter initial values for a freshly created field.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct FieldInit {
    pub sigma_raw: f32,
    pub color_raw: f32,
    pub v_raw: f32,
}

impl Default for FieldInit {
    fn default() -> Self {
        // softplus(-2) ~ 0.127 density; visibility saturated at ~1 so
        // masking is a no-op until supervised.
        FieldInit {
            sigma_raw: -2.0,
            color_raw: 0.0,
            v_raw: 10.0,
        }
    }
}

/// Activated field values at a point.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FieldSample {
    /// Density, 1/meter.
    pub sigma: f64,
    /// Linear RGB in (0,1).
    pub color: [f64; 3],
    /// Visibility in (0,1).
    pub visibility: f64,
}

impl FieldSample {
    /// Value returned for points outside the field bounds.
    pub const EMPTY: FieldSample = FieldSample {
        sigma: 0.0,
        color: [0.5, 0.5, 0.5],
        visibility: 1.0,
    };
}

/// Gradient of a [`FieldSample`] w.r.t. the raw parameters of the eight
/// surrounding grid nodes.
///
/// Interpolation happens in raw space, so the derivative w.r.t. one node's
/// raw value factors into the node's trilinear weight times the activation
/// derivative at the interpolated raw value (shared by all eight nodes).
#[derive(Debug, Clone)]
pub struct SampleGrad {
    /// `(voxel linear index, trilinear weight)` for the eight corners.
    pub corners: [(usize, f64); 8],
    /// d sigma / d sigma_raw at the interpolated raw value.
    pub dsigma: f64,
    /// d color[ch] / d c_raw[ch] at the interpolated raw value.
    pub dcolor: [f64; 3],
    /// d visibility / d v_raw at the interpolated raw value.
    pub dvis: f64,
}

/// Numerically stable softplus.
#[inline]
pub fn softplus(x: f64) -> f64 {
    if x > 30.0 {
        x
    } else if x < -30.0 {
        x.exp()
    } else {
        x.exp().ln_1p()
    }
}

#[inline]
pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

#[inline]
pub fn sigmoid_deriv(x: f64) -> f64 {
    let s = sigmoid(x);
    s * (1.0 - s)
}

/// The optimizable radiance field: a dense voxel grid of raw parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct VoxelField {
    pub bounds: Aabb,
    pub resolution: [usize; 3],
    /// Raw parameters, x-fastest, channel-interleaved:
    /// `((z*ny + y)*nx + x) * 5 + channel`.
    pub params: Vec<f32>,
}

impl VoxelField {
    pub fn new(bounds: Aabb, resolution: [usize; 3], init: FieldInit) -> Result<Self> {
        if resolution.iter().any(|&n| n < 2) {
            return Err(Error::input(format!(
                "field resolution must be >= 2 per axis, got {resolution:?}"
            )));
        }
        let n_voxels = resolution[0] * resolution[1] * resolution[2];
        let mut params = vec![0.0f32; n_voxels * CHANNELS];
        for v in 0..n_voxels {
            params[v * CHANNELS] = init.sigma_raw;
            params[v * CHANNELS + 1] = init.color_raw;
            params[v * CHANNELS + 2] = init.color_raw;
            params[v * CHANNELS + 3] = init.color_raw;
            params[v * CHANNELS + 4] = init.v_raw;
        }
        Ok(VoxelField {
            bounds,
            resolution,
            params,
        })
    }

    pub fn n_voxels(&self) -> usize {
        self.resolution[0] * self.resolution[1] * self.resolution[2]
    }

    pub fn n_params(&self) -> usize {
        self.params.len()
    }

    #[inline]
    pub fn voxel_index(&self, i: usize, j: usize, k: usize) -> usize {
        (k * self.resolution[1] + j) * self.resolution[0] + i
    }

    /// World position of grid node `(i, j, k)`.
    pub fn node_pos(&self, i: usize, j: usize, k: usize) -> Vec3 {
        let e = self.bounds.extent();
        Vec3::new(
            self.bounds.min[0] + e[0] * i as f64 / (self.resolution[0] - 1) as f64,
            self.bounds.min[1] + e[1] * j as f64 / (self.resolution[1] - 1) as f64,
            self.bounds.min[2] + e[2] * k as f64 / (self.resolution[2] - 1) as f64,
        )
    }

    /// Trilinear cell lookup: corner indices and weights for a point inside
    /// the bounds.
    fn cell(&self, x: Vec3) -> ([(usize, f64); 8], [f64; 3]) {
        let e = self.bounds.extent();
        let mut idx = [0usize; 3];
        let mut frac = [0f64; 3];
        for a in 0..3 {
            let g = (x[a] - self.bounds.min[a]) / e[a] * (self.resolution[a] - 1) as f64;
            let g = g.clamp(0.0, (self.resolution[a] - 1) as f64);
            let i0 = (g.floor() as usize).min(self.resolution[a] - 2);
            idx[a] = i0;
            frac[a] = g - i0 as f64;
        }
        let (fx, fy, fz) = (frac[0], frac[1], frac[2]);
        let mut corners = [(0usize, 0f64); 8];
        let mut c = 0;
        for dz in 0..2 {
            for dy in 0..2 {
                for dx in 0..2 {
                    let w = (if dx == 0 { 1.0 - fx } else { fx })
                        * (if dy == 0 { 1.0 - fy } else { fy })
                        * (if dz == 0 { 1.0 - fz } else { fz });
                    corners[c] = (
                        self.voxel_index(idx[0] + dx, idx[1] + dy, idx[2] + dz),
                        w,
                    );
                    c += 1;
                }
            }
        }
        (corners, frac)
    }

    /// Interpolated raw channel values at `x` (must be inside bounds).
    fn raw_at(&self, corners: &[(usize, f64); 8]) -> [f64; CHANNELS] {
        let mut raw = [0f64; CHANNELS];
        for &(v, w) in corners {
            let base = v * CHANNELS;
            for ch in 0..CHANNELS {
                raw[ch] += w * self.params[base + ch] as f64;
            }
        }
        raw
    }

    /// Activated sample at a world point. Points outside the bounds return
    /// empty space (sigma 0, neutral gray, visibility 1).
    pub fn sample(&self, x: Vec3) -> FieldSample {
        if !self.bounds.contains(x) {
            return FieldSample::EMPTY;
        }
        let (corners, _) = self.cell(x);
        let raw = self.raw_at(&corners);
        FieldSample {
            sigma: softplus(raw[0]),
            color: [sigmoid(raw[1]), sigmoid(raw[2]), sigmoid(raw[3])],
            visibility: sigmoid(raw[4]),
        }
    }

    /// Sample plus the sparse gradient w.r.t. the surrounding raw
    /// parameters. Returns `None` outside the bounds.
    pub fn sample_with_grad(&self, x: Vec3) -> Option<(FieldSample, SampleGrad)> {
        if !self.bounds.contains(x) {
            return None;
        }
        let (corners, _) = self.cell(x);
        let raw = self.raw_at(&corners);
        let sample = FieldSample {
            sigma: softplus(raw[0]),
            color: [sigmoid(raw[1]), sigmoid(raw[2]), sigmoid(raw[3])],
            visibility: sigmoid(raw[4]),
        };
        let grad = SampleGrad {
            corners,
            dsigma: sigmoid(raw[0]), // softplus' = sigmoid
            dcolor: [
                sigmoid_deriv(raw[1]),
                sigmoid_deriv(raw[2]),
                sigmoid_deriv(raw[3]),
            ],
            dvis: sigmoid_deriv(raw[4]),
        };
        Some((sample, grad))
    }

    /// Sparse map from raw-parameter index to the derivative of the
    /// corresponding [`FieldSample`] channel. Empty outside the bounds.
    ///
    /// Key is the flat parameter index `voxel*5 + channel`; the value is the
    /// derivative of the activated channel w.r.t. that raw parameter.
    pub fn param_grad(&self, x: Vec3) -> Vec<(usize, f64)> {
        let Some((_, g)) = self.sample_with_grad(x) else {
            return Vec::new();
        };
        let mut out = Vec::with_capacity(8 * CHANNELS);
        for &(v, w) in &g.corners {
            let base = v * CHANNELS;
            out.push((base, w * g.dsigma));
            for ch in 0..3 {
                out.push((base + 1 + ch, w * g.dcolor[ch]));
            }
            out.push((base + 4, w * g.dvis));
        }
        out
    }

    /// Sample the density over the grid nodes (subsampled by `stride`) and
    /// keep points whose density reaches `sigma_threshold`.
    pub fn export_points(&self, sigma_threshold: f64, stride: usize) -> Result<PointCloud> {
        if !(sigma_threshold > 0.0) {
            return Err(Error::input("sigma_threshold must be positive"));
        }
        if stride < 1 {
            return Err(Error::input("stride must be >= 1"));
        }
        let mut points = Vec::new();
        for k in (0..self.resolution[2]).step_by(stride) {
            for j in (0..self.resolution[1]).step_by(stride) {
                for i in (0..self.resolution[0]).step_by(stride) {
                    let base = self.voxel_index(i, j, k) * CHANNELS;
                    let sigma = softplus(self.params[base] as f64);
                    if sigma >= sigma_threshold {
                        let color = [
                            sigmoid(self.params[base + 1] as f64),
                            sigmoid(self.params[base + 2] as f64),
                            sigmoid(self.params[base + 3] as f64),
                        ];
                        points.push(CloudPoint {
                            position: self.node_pos(i, j, k),
                            color,
                        });
                    }
                }
            }
        }
        Ok(PointCloud { points })
    }

    /// Write the checkpoint: magic "CNPL", version, bounds, resolution, then
    /// the raw f32 parameters little-endian in x-fastest channel-interleaved
    /// order.
    pub fn save(&self, path: &Path) -> Result<()> {
        let mut f = std::fs::File::create(path)
            .map_err(|e| Error::io(format!("{}: {e}", path.display())))?;
        f.write_all(CHECKPOINT_MAGIC)?;
        f.write_all(&CHECKPOINT_VERSION.to_le_bytes())?;
        for v in self.bounds.min.iter().chain(self.bounds.max.iter()) {
            f.write_all(&v.to_le_bytes())?;
        }
        for &n in &self.resolution {
            f.write_all(&(n as u32).to_le_bytes())?;
        }
        let mut bytes = Vec::with_capacity(self.params.len() * 4);
        for p in &self.params {
            bytes.extend_from_slice(&p.to_le_bytes());
        }
        f.write_all(&bytes)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let mut f = std::fs::File::open(path)
            .map_err(|e| Error::io(format!("{}: {e}", path.display())))?;
        let mut magic = [0u8; 4];
        f.read_exact(&mut magic)?;
        if &magic != CHECKPOINT_MAGIC {
            return Err(Error::io(format!("{}: not a field checkpoint", path.display())));
        }
        let mut u4 = [0u8; 4];
        f.read_exact(&mut u4)?;
        let version = u32::from_le_bytes(u4);
        if version != CHECKPOINT_VERSION {
            return Err(Error::io(format!("unsupported checkpoint version {version}")));
        }
        let mut u8b = [0u8; 8];
        let mut b = [0f64; 6];
        for v in b.iter_mut() {
            f.read_exact(&mut u8b)?;
            *v = f64::from_le_bytes(u8b);
        }
        let bounds = Aabb::new([b[0], b[1], b[2]], [b[3], b[4], b[5]])?;
        let mut resolution = [0usize; 3];
        for r in resolution.iter_mut() {
            f.read_exact(&mut u4)?;
            *r = u32::from_le_bytes(u4) as usize;
        }
        let n = resolution[0] * resolution[1] * resolution[2] * CHANNELS;
        let mut bytes = vec![0u8; n * 4];
        f.read_exact(&mut bytes)?;
        let params = bytes
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
            .collect();
        Ok(VoxelField {
            bounds,
            resolution,
            params,
        })
    }
}
