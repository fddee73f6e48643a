//! Procedural synthetic forest with a closed-form layered renderer.
//!
//! The scene is built from analytically intersectable primitives: a
//! heightfield terrain with a value-noise albedo texture, opaque vertical
//! stem cylinders, translucent canopy ellipsoids and flat colored target
//! rectangles on the ground. Because every primitive has a closed-form ray
//! intersection, the renderer composites exact per-pixel colors and serves
//! as the ground-truth oracle for the quantitative tests, including the
//! exact canopy-free image (render with the canopy layer off).

use rand::prelude::*;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::field::{Aabb, FieldInit, VoxelField, CHANNELS};
use crate::geometry::{ray_ground_entry, Camera, Dtm, Pose, Ray, Vec3};
use crate::img::ImageBuf;

// ---------------------------------------------------------------------------
// Value noise
// ---------------------------------------------------------------------------

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

fn lattice(seed: u64, ix: i64, iy: i64) -> f64 {
    let h = splitmix64(seed ^ (ix as u64).wrapping_mul(0x8538_4DF8_1F0E_92D5)
        ^ (iy as u64).wrapping_mul(0xC2B2_AE3D_27D4_EB4F));
    (h >> 11) as f64 / (1u64 << 53) as f64
}

fn smoothstep(t: f64) -> f64 {
    t * t * (3.0 - 2.0 * t)
}

/// Seeded 2D value noise in [0,1], three octaves.
pub fn value_noise(seed: u64, x: f64, y: f64) -> f64 {
    let mut amp = 0.5;
    let mut freq = 1.0;
    let mut acc = 0.0;
    let mut norm = 0.0;
    for octave in 0..3u64 {
        let (fx, fy) = (x * freq, y * freq);
        let (ix, iy) = (fx.floor() as i64, fy.floor() as i64);
        let (tx, ty) = (smoothstep(fx - ix as f64), smoothstep(fy - iy as f64));
        let s = seed.wrapping_add(octave.wrapping_mul(0x9E37_79B9));
        let v00 = lattice(s, ix, iy);
        let v10 = lattice(s, ix + 1, iy);
        let v01 = lattice(s, ix, iy + 1);
        let v11 = lattice(s, ix + 1, iy + 1);
        let v = v00 * (1.0 - tx) * (1.0 - ty)
            + v10 * tx * (1.0 - ty)
            + v01 * (1.0 - tx) * ty
            + v11 * tx * ty;
        acc += amp * v;
        norm += amp;
        amp *= 0.5;
        freq *= 2.0;
    }
    acc / norm
}

// ---------------------------------------------------------------------------
// Scene description
// ---------------------------------------------------------------------------

/// Procedural ground albedo: value noise blending two colors.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroundTexture {
    pub seed: u64,
    /// Feature size in meters.
    pub scale: f64,
    pub color_a: [f64; 3],
    pub color_b: [f64; 3],
}

impl GroundTexture {
    pub fn albedo(&self, x: f64, y: f64) -> [f64; 3] {
        let t = value_noise(self.seed, x / self.scale, y / self.scale);
        [
            self.color_a[0] * (1.0 - t) + self.color_b[0] * t,
            self.color_a[1] * (1.0 - t) + self.color_b[1] * t,
            self.color_a[2] * (1.0 - t) + self.color_b[2] * t,
        ]
    }
}

/// Opaque vertical stem cylinder standing on the terrain.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Stem {
    pub base: [f64; 2],
    pub height: f64,
    pub radius: f64,
    pub albedo: [f64; 3],
}

/// Translucent canopy ellipsoid.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CanopyBlob {
    pub center: [f64; 3],
    pub radii: [f64; 3],
    pub albedo: [f64; 3],
    /// Fractional occlusion in (0,1).
    pub opacity: f64,
}

/// Flat colored rectangle lying on the ground (stand-in for persons/objects).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TargetRect {
    pub center: [f64; 2],
    pub half_extents: [f64; 2],
    pub albedo: [f64; 3],
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AnalyticScene {
    pub terrain: Dtm,
    pub ground: GroundTexture,
    pub stems: Vec<Stem>,
    pub canopy: Vec<CanopyBlob>,
    pub targets: Vec<TargetRect>,
    pub background: [f64; 3],
}

/// Which primitive layers participate in an oracle render.
#[derive(Debug, Clone, Copy)]
pub struct Layers {
    pub canopy: bool,
    pub stems: bool,
    pub targets: bool,
}

impl Layers {
    pub const ALL: Layers = Layers {
        canopy: true,
        stems: true,
        targets: true,
    };
    pub const GROUND_TRUTH: Layers = Layers {
        canopy: false,
        stems: true,
        targets: true,
    };
    pub const NONE: Layers = Layers {
        canopy: false,
        stems: false,
        targets: false,
    };
}

impl AnalyticScene {
    pub fn validate(&self) -> Result<()> {
        let (min_x, min_y, max_x, max_y) = self.terrain.footprint();
        for s in &self.stems {
            if !(s.height > 0.0 && s.radius > 0.0) {
                return Err(Error::input("stem height and radius must be positive"));
            }
            if s.base[0] < min_x || s.base[0] > max_x || s.base[1] < min_y || s.base[1] > max_y {
                return Err(Error::input("stem outside terrain footprint"));
            }
        }
        for b in &self.canopy {
            if !(b.opacity > 0.0 && b.opacity < 1.0) {
                return Err(Error::input("blob opacity must be in (0,1)"));
            }
            if b.center[0] < min_x
                || b.center[0] > max_x
                || b.center[1] < min_y
                || b.center[1] > max_y
            {
                return Err(Error::input("canopy blob outside terrain footprint"));
            }
        }
        Ok(())
    }

    /// Height of the tallest scene element.
    pub fn top_height(&self) -> f64 {
        let mut top = self.terrain.max_height();
        for s in &self.stems {
            let base_z = self.terrain.height_at(s.base[0], s.base[1]).height;
            top = top.max(base_z + s.height);
        }
        for b in &self.canopy {
            top = top.max(b.center[2] + b.radii[2]);
        }
        top
    }

    /// Axis-aligned box enclosing the scene with a small margin, suitable as
    /// voxel-field bounds.
    pub fn bounds(&self) -> Aabb {
        let (min_x, min_y, max_x, max_y) = self.terrain.footprint();
        let z_lo = self.terrain.min_height() - 1.0;
        let z_hi = self.top_height() + 0.5;
        Aabb::new([min_x, min_y, z_lo], [max_x, max_y, z_hi]).expect("non-degenerate scene")
    }
}

// ---------------------------------------------------------------------------
// Forest generation
// ---------------------------------------------------------------------------

fn default_targets() -> usize {
    2
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ForestParams {
    pub seed: u64,
    /// Side length of the square terrain footprint, meters.
    pub extent: f64,
    pub n_stems: usize,
    /// Canopy radius multiplier; 0 disables the canopy entirely.
    pub canopy_density: f64,
    pub blob_opacity_range: (f64, f64),
    /// Flat ground targets; stand-ins for persons/objects.
    #[serde(default = "default_targets")]
    pub n_targets: usize,
}

impl Default for ForestParams {
    fn default() -> Self {
        ForestParams {
            seed: 7,
            extent: 20.0,
            n_stems: 12,
            canopy_density: 1.0,
            blob_opacity_range: (0.35, 0.8),
            n_targets: 2,
        }
    }
}

const STEM_RADIUS_RANGE: (f64, f64) = (0.2, 0.35);

/// Deterministically generate a forest scene: value-noise terrain, stems
/// placed by Poisson-disk dart throwing (minimum separation four times the
/// maximum stem radius), 3-8 canopy blobs crowning each stem.
pub fn generate_forest(params: &ForestParams) -> Result<AnalyticScene> {
    if !(params.extent > 0.0) {
        return Err(Error::input("forest extent must be positive"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(params.seed);
    let extent = params.extent;

    // Terrain: gentle value-noise heightfield.
    let cell = (extent / 40.0).max(0.25);
    let n = (extent / cell).ceil() as usize + 1;
    let mut heights = Vec::with_capacity(n * n);
    let terrain_seed = rng.gen::<u64>();
    for r in 0..n {
        for c in 0..n {
            let (x, y) = (c as f64 * cell, r as f64 * cell);
            heights.push(0.8 * value_noise(terrain_seed, x / 6.0, y / 6.0));
        }
    }
    let terrain = Dtm::new([0.0, 0.0], cell, n, n, heights)?;

    let ground = GroundTexture {
        seed: rng.gen(),
        scale: 1.6,
        color_a: [0.30, 0.22, 0.12], // soil
        color_b: [0.55, 0.50, 0.30], // dry grass
    };

    // Poisson-disk stem placement.
    let min_sep = 4.0 * STEM_RADIUS_RANGE.1;
    let margin = min_sep.min(extent / 4.0);
    let mut stems: Vec<Stem> = Vec::new();
    let max_attempts = 300 * params.n_stems.max(1);
    let mut attempts = 0;
    while stems.len() < params.n_stems {
        if attempts >= max_attempts {
            return Err(Error::input(format!(
                "could not place {} stems in a {extent} m extent; at most {} fit with \
                 {min_sep:.2} m separation",
                params.n_stems,
                stems.len()
            )));
        }
        attempts += 1;
        let base = [
            rng.gen_range(margin..extent - margin),
            rng.gen_range(margin..extent - margin),
        ];
        if stems.iter().any(|s| {
            let dx = s.base[0] - base[0];
            let dy = s.base[1] - base[1];
            (dx * dx + dy * dy).sqrt() < min_sep
        }) {
            continue;
        }
        stems.push(Stem {
            base,
            height: rng.gen_range(5.0..7.0),
            radius: rng.gen_range(STEM_RADIUS_RANGE.0..STEM_RADIUS_RANGE.1),
            albedo: [0.36, 0.33, 0.30], // gray-brown bark
        });
    }

    // Canopy: 3-8 blobs crowning each stem.
    let mut canopy = Vec::new();
    if params.canopy_density > 0.0 {
        let (op_lo, op_hi) = params.blob_opacity_range;
        if !(op_lo > 0.0 && op_hi < 1.0 && op_lo <= op_hi) {
            return Err(Error::input("blob_opacity_range must satisfy 0 < lo <= hi < 1"));
        }
        for stem in &stems {
            let base_z = terrain.height_at(stem.base[0], stem.base[1]).height;
            let crown_z = base_z + stem.height;
            let n_blobs = rng.gen_range(3..=8);
            for _ in 0..n_blobs {
                let r = params.canopy_density * rng.gen_range(0.9..1.8);
                let center = [
                    (stem.base[0] + rng.gen_range(-1.2..1.2)).clamp(0.0, extent),
                    (stem.base[1] + rng.gen_range(-1.2..1.2)).clamp(0.0, extent),
                    crown_z + rng.gen_range(0.0..1.5),
                ];
                let g = rng.gen_range(0.35..0.55);
                canopy.push(CanopyBlob {
                    center,
                    radii: [r, r * rng.gen_range(0.8..1.2), r * rng.gen_range(0.5..0.8)],
                    albedo: [0.10, g, 0.08],
                    opacity: rng.gen_range(op_lo..=op_hi),
                });
            }
        }
    }

    // Bright flat targets on the ground.
    let mut targets = Vec::new();
    for i in 0..params.n_targets {
        let center = [
            rng.gen_range(extent * 0.15..extent * 0.85),
            rng.gen_range(extent * 0.15..extent * 0.85),
        ];
        targets.push(TargetRect {
            center,
            half_extents: [rng.gen_range(0.4..0.8), rng.gen_range(0.25..0.5)],
            albedo: if i % 2 == 0 {
                [0.85, 0.15, 0.10]
            } else {
                [0.15, 0.25, 0.85]
            },
        });
    }

    let scene = AnalyticScene {
        terrain,
        ground,
        stems,
        canopy,
        targets,
        background: [0.02, 0.02, 0.03],
    };
    scene.validate()?;
    Ok(scene)
}

// ---------------------------------------------------------------------------
// Oracle rendering
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Copy, PartialEq)]
enum HitKind {
    Terrain,
    Stem,
    Target,
    Canopy,
}

#[derive(Debug, Clone, Copy)]
struct Hit {
    t: f64,
    alpha: f64,
    color: [f64; 3],
    kind: HitKind,
}

fn intersect_terrain(scene: &AnalyticScene, ray: &Ray) -> Option<Hit> {
    let t = ray_ground_entry(ray, &scene.terrain, 0.0);
    if t >= ray.t_far {
        return None;
    }
    let p = ray.at(t);
    // The raster clamps heights at its edges; a clamped hit lies outside the
    // footprint and is open sky, not terrain.
    if scene.terrain.height_at(p.x, p.y).clamped {
        return None;
    }
    Some(Hit {
        t,
        alpha: 1.0,
        color: scene.ground.albedo(p.x, p.y),
        kind: HitKind::Terrain,
    })
}

fn intersect_stem(scene: &AnalyticScene, stem: &Stem, ray: &Ray) -> Option<Hit> {
    let base_z = scene.terrain.height_at(stem.base[0], stem.base[1]).height;
    let top_z = base_z + stem.height;
    let (ox, oy) = (ray.origin.x - stem.base[0], ray.origin.y - stem.base[1]);
    let (dx, dy) = (ray.direction.x, ray.direction.y);
    let a = dx * dx + dy * dy;
    let r2 = stem.radius * stem.radius;
    let mut best: Option<f64> = None;

    if a > 1e-12 {
        let b = ox * dx + oy * dy;
        let c = ox * ox + oy * oy - r2;
        let disc = b * b - a * c;
        if disc >= 0.0 {
            let sq = disc.sqrt();
            for t in [(-b - sq) / a, (-b + sq) / a] {
                if t > ray.t_near && t < ray.t_far {
                    let z = ray.origin.z + t * ray.direction.z;
                    if z >= base_z && z <= top_z {
                        best = Some(best.map_or(t, |p: f64| p.min(t)));
                    }
                }
            }
        }
    }
    // Top cap.
    if ray.direction.z.abs() > 1e-12 {
        let t = (top_z - ray.origin.z) / ray.direction.z;
        if t > ray.t_near && t < ray.t_far {
            let px = ray.origin.x + t * ray.direction.x - stem.base[0];
            let py = ray.origin.y + t * ray.direction.y - stem.base[1];
            if px * px + py * py <= r2 {
                best = Some(best.map_or(t, |p: f64| p.min(t)));
            }
        }
    }
    best.map(|t| Hit {
        t,
        alpha: 1.0,
        color: stem.albedo,
        kind: HitKind::Stem,
    })
}

fn intersect_target(scene: &AnalyticScene, rect: &TargetRect, ray: &Ray) -> Option<Hit> {
    // Targets float 5 cm above the local terrain so they shade it.
    let z = scene.terrain.height_at(rect.center[0], rect.center[1]).height + 0.05;
    if ray.direction.z.abs() < 1e-12 {
        return None;
    }
    let t = (z - ray.origin.z) / ray.direction.z;
    if t <= ray.t_near || t >= ray.t_far {
        return None;
    }
    let px = ray.origin.x + t * ray.direction.x - rect.center[0];
    let py = ray.origin.y + t * ray.direction.y - rect.center[1];
    if px.abs() <= rect.half_extents[0] && py.abs() <= rect.half_extents[1] {
        Some(Hit {
            t,
            alpha: 1.0,
            color: rect.albedo,
            kind: HitKind::Target,
        })
    } else {
        None
    }
}

fn intersect_blob(blob: &CanopyBlob, ray: &Ray) -> Option<f64> {
    // Scale to the unit sphere.
    let o = Vec3::new(
        (ray.origin.x - blob.center[0]) / blob.radii[0],
        (ray.origin.y - blob.center[1]) / blob.radii[1],
        (ray.origin.z - blob.center[2]) / blob.radii[2],
    );
    let d = Vec3::new(
        ray.direction.x / blob.radii[0],
        ray.direction.y / blob.radii[1],
        ray.direction.z / blob.radii[2],
    );
    let a = d.dot(&d);
    let b = o.dot(&d);
    let c = o.dot(&o) - 1.0;
    let disc = b * b - a * c;
    if disc < 0.0 {
        return None;
    }
    let sq = disc.sqrt();
    let t0 = (-b - sq) / a;
    let t1 = (-b + sq) / a;
    if t0 > ray.t_near && t0 < ray.t_far {
        Some(t0)
    } else if t1 > ray.t_near && t1 < ray.t_far {
        // Origin inside the blob: count the exit crossing.
        Some(ray.t_near)
    } else {
        None
    }
}

fn ray_hits(scene: &AnalyticScene, ray: &Ray, layers: Layers) -> Vec<Hit> {
    let mut hits = Vec::new();
    if let Some(h) = intersect_terrain(scene, ray) {
        hits.push(h);
    }
    if layers.stems {
        for stem in &scene.stems {
            if let Some(h) = intersect_stem(scene, stem, ray) {
                hits.push(h);
            }
        }
    }
    if layers.targets {
        for rect in &scene.targets {
            if let Some(h) = intersect_target(scene, rect, ray) {
                hits.push(h);
            }
        }
    }
    if layers.canopy {
        for blob in &scene.canopy {
            if let Some(t) = intersect_blob(blob, ray) {
                hits.push(Hit {
                    t,
                    alpha: blob.opacity,
                    color: blob.albedo,
                    kind: HitKind::Canopy,
                });
            }
        }
    }
    hits.sort_by(|a, b| a.t.partial_cmp(&b.t).unwrap());
    hits
}

fn composite(scene: &AnalyticScene, hits: &[Hit]) -> [f64; 3] {
    let mut color = [0.0f64; 3];
    let mut trans = 1.0f64;
    for h in hits {
        let w = trans * h.alpha;
        for ch in 0..3 {
            color[ch] += w * h.color[ch];
        }
        trans *= 1.0 - h.alpha;
        if trans < 1e-9 {
            break;
        }
    }
    for ch in 0..3 {
        color[ch] += trans * scene.background[ch];
    }
    color
}

/// Exact per-pixel color of the scene as seen from `camera`, compositing
/// depth-sorted primitive intersections front to back.
pub fn oracle_render(scene: &AnalyticScene, camera: &Camera, layers: Layers) -> Result<ImageBuf> {
    let terrain_top = scene.terrain.max_height();
    if camera.center().z <= terrain_top {
        return Err(Error::input("camera must be above the terrain"));
    }
    let width = camera.width;
    let height = camera.height;
    let rows: Result<Vec<Vec<[f32; 3]>>> = (0..height)
        .into_par_iter()
        .map(|y| {
            let mut row = Vec::with_capacity(width as usize);
            for x in 0..width {
                let ray = camera.ray_for_pixel(x as f64, y as f64)?;
                let hits = ray_hits(scene, &ray, layers);
                row.push(composite(scene, &hits).map(|v| v as f32));
            }
            Ok(row)
        })
        .collect();
    let rows = rows?;
    let mut img = ImageBuf::new(width, height);
    for (y, row) in rows.into_iter().enumerate() {
        for (x, c) in row.into_iter().enumerate() {
            img.set(x as u32, y as u32, c);
        }
    }
    Ok(img)
}

/// Per-pixel mask: true where the front-most surface along the pixel ray is
/// NOT a canopy blob (ground / stem / target / background are "visible").
pub fn segmentation_map(scene: &AnalyticScene, camera: &Camera) -> Result<Vec<bool>> {
    let width = camera.width;
    let height = camera.height;
    let rows: Result<Vec<Vec<bool>>> = (0..height)
        .into_par_iter()
        .map(|y| {
            let mut row = Vec::with_capacity(width as usize);
            for x in 0..width {
                let ray = camera.ray_for_pixel(x as f64, y as f64)?;
                let hits = ray_hits(scene, &ray, Layers::ALL);
                row.push(hits.first().map_or(true, |h| h.kind != HitKind::Canopy));
            }
            Ok(row)
        })
        .collect();
    Ok(rows?.into_iter().flatten().collect())
}

// ---------------------------------------------------------------------------
// Capture simulation
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CaptureConfig {
    pub n_x: usize,
    pub n_y: usize,
    /// Grid spacing in meters.
    pub spacing: f64,
    /// Camera altitude, absolute z in meters.
    pub altitude: f64,
    pub width: u32,
    pub height: u32,
    /// Ground sample distance target, meters per pixel; fixes the focal
    /// length as altitude-above-ground / gsd.
    pub gsd_target: f64,
    /// Linear exposure gain applied to the rendered images.
    pub exposure_gain: f64,
    /// Additive Gaussian noise std in linear RGB.
    pub noise_sigma: f64,
}

impl Default for CaptureConfig {
    fn default() -> Self {
        CaptureConfig {
            n_x: 6,
            n_y: 6,
            spacing: 2.8,
            altitude: 25.0,
            width: 80,
            height: 80,
            gsd_target: 0.18,
            exposure_gain: 1.0,
            noise_sigma: 0.0,
        }
    }
}

/// One posed view with its noisy image and exact segmentation map.
#[derive(Debug, Clone)]
pub struct CaptureView {
    pub name: String,
    pub camera: Camera,
    pub image: ImageBuf,
    pub segmentation: Vec<bool>,
}

/// A simulated capture: cameras, images, segmentation maps and the terrain.
#[derive(Debug, Clone)]
pub struct Capture {
    pub views: Vec<CaptureView>,
    pub dtm: Dtm,
}

/// Build the camera grid for a capture without rendering.
pub fn capture_cameras(scene: &AnalyticScene, cfg: &CaptureConfig) -> Result<Vec<Camera>> {
    if cfg.n_x < 1 || cfg.n_y < 1 {
        return Err(Error::input("capture grid must be at least 1x1"));
    }
    if !(cfg.gsd_target > 0.0) {
        return Err(Error::input("gsd_target must be positive"));
    }
    if cfg.altitude <= scene.top_height() {
        return Err(Error::input(format!(
            "capture altitude {} must be above the scene top {}",
            cfg.altitude,
            scene.top_height()
        )));
    }
    let (min_x, min_y, max_x, max_y) = scene.terrain.footprint();
    let (cx, cy) = ((min_x + max_x) / 2.0, (min_y + max_y) / 2.0);
    let mean_ground = (scene.terrain.min_height() + scene.terrain.max_height()) / 2.0;
    let focal = (cfg.altitude - mean_ground) / cfg.gsd_target;
    let mut cameras = Vec::with_capacity(cfg.n_x * cfg.n_y);
    for gy in 0..cfg.n_y {
        for gx in 0..cfg.n_x {
            let px = cx + (gx as f64 - (cfg.n_x - 1) as f64 / 2.0) * cfg.spacing;
            let py = cy + (gy as f64 - (cfg.n_y - 1) as f64 / 2.0) * cfg.spacing;
            cameras.push(Camera::new(
                focal,
                focal,
                cfg.width as f64 / 2.0,
                cfg.height as f64 / 2.0,
                cfg.width,
                cfg.height,
                Pose::nadir(Vec3::new(px, py, cfg.altitude)),
            )?);
        }
    }
    Ok(cameras)
}

/// Render every grid camera with all layers on, apply exposure gain then
/// additive Gaussian noise then clamp to [0,1], and attach the exact
/// segmentation maps and terrain raster.
pub fn generate_capture(scene: &AnalyticScene, cfg: &CaptureConfig, seed: u64) -> Result<Capture> {
    let cameras = capture_cameras(scene, cfg)?;
    let mut views = Vec::with_capacity(cameras.len());
    for (i, camera) in cameras.into_iter().enumerate() {
        let mut image = oracle_render(scene, &camera, Layers::ALL)?;
        let mut rng = ChaCha8Rng::seed_from_u64(splitmix64(seed ^ (i as u64)));
        for p in image.data.iter_mut() {
            for ch in 0..3 {
                let mut v = p[ch] as f64 * cfg.exposure_gain;
                if cfg.noise_sigma > 0.0 {
                    // Box-Muller; two uniforms per channel keeps it simple.
                    let u1: f64 = rng.gen_range(1e-12..1.0);
                    let u2: f64 = rng.gen();
                    let z = (-2.0 * u1.ln()).sqrt() * (2.0 * std::f64::consts::PI * u2).cos();
                    v += cfg.noise_sigma * z;
                }
                p[ch] = v.clamp(0.0, 1.0) as f32;
            }
        }
        let segmentation = segmentation_map(scene, &camera)?;
        views.push(CaptureView {
            name: format!("view_{i:03}"),
            camera,
            image,
            segmentation,
        });
    }
    Ok(Capture {
        views,
        dtm: scene.terrain.clone(),
    })
}

// ---------------------------------------------------------------------------
// Voxelization (scene -> field ground truth)
// ---------------------------------------------------------------------------

fn logit(c: f64) -> f64 {
    let c = c.clamp(1e-4, 1.0 - 1e-4);
    (c / (1.0 - c)).ln()
}

fn inv_softplus(s: f64) -> f64 {
    if s > 30.0 {
        s
    } else {
        (s.exp() - 1.0).max(1e-12).ln()
    }
}

/// Convert the analytic scene into an equivalent voxel field: solid density
/// below the terrain surface and inside stems, canopy blobs as homogeneous
/// absorbing volumes, visibility 0 inside the canopy and 1 elsewhere.
///
/// Used as the quadrature cross-check and as a deterministic source for the
/// stem-counting pipeline.
pub fn voxelize(scene: &AnalyticScene, resolution: [usize; 3]) -> Result<VoxelField> {
    let bounds = scene.bounds();
    let mut field = VoxelField::new(bounds, resolution, FieldInit::default())?;
    let solid_raw = inv_softplus(400.0) as f32;
    let empty_raw = -30.0f32;
    let nx = resolution[0];
    let ny = resolution[1];
    let nz = resolution[2];

    let params = &mut field.params;
    let chunk = nx * ny * CHANNELS;
    params
        .par_chunks_mut(chunk)
        .enumerate()
        .for_each(|(k, slab)| {
            for j in 0..ny {
                for i in 0..nx {
                    let e = [
                        bounds.max[0] - bounds.min[0],
                        bounds.max[1] - bounds.min[1],
                        bounds.max[2] - bounds.min[2],
                    ];
                    let x = bounds.min[0] + e[0] * i as f64 / (nx - 1) as f64;
                    let y = bounds.min[1] + e[1] * j as f64 / (ny - 1) as f64;
                    let z = bounds.min[2] + e[2] * k as f64 / (nz - 1) as f64;
                    let base = (j * nx + i) * CHANNELS;

                    let ground_z = scene.terrain.height_at(x, y).height;
                    let mut sigma_raw = empty_raw;
                    let mut color = scene.ground.albedo(x, y);
                    let mut visible = true;

                    if z <= ground_z {
                        sigma_raw = solid_raw;
                    } else {
                        for s in &scene.stems {
                            let dx = x - s.base[0];
                            let dy = y - s.base[1];
                            let base_z = scene.terrain.height_at(s.base[0], s.base[1]).height;
                            if dx * dx + dy * dy <= s.radius * s.radius
                                && z >= base_z
                                && z <= base_z + s.height
                            {
                                sigma_raw = solid_raw;
                                color = s.albedo;
                                break;
                            }
                        }
                        if sigma_raw == empty_raw {
                            for b in &scene.canopy {
                                let u = (x - b.center[0]) / b.radii[0];
                                let v = (y - b.center[1]) / b.radii[1];
                                let w = (z - b.center[2]) / b.radii[2];
                                if u * u + v * v + w * w <= 1.0 {
                                    // Homogeneous absorber whose typical chord
                                    // reproduces the blob opacity.
                                    let chord = 4.0 / 3.0 * b.radii[2];
                                    let sigma = -(1.0 - b.opacity).ln() / chord;
                                    sigma_raw = inv_softplus(sigma) as f32;
                                    color = b.albedo;
                                    visible = false;
                                    break;
                                }
                            }
                        }
                    }

                    slab[base] = sigma_raw;
                    for ch in 0..3 {
                        slab[base + 1 + ch] = logit(color[ch]) as f32;
                    }
                    slab[base + 4] = if visible { 10.0 } else { -10.0 };
                }
            }
        });
    Ok(field)
}
