//! Training loop: photometric losses, ray batching and a lazy Adam
//! optimizer over the voxel parameters.
//!
//! Two photometric losses are available. The plain L1 loss treats all
//! intensity levels equally; the relative loss divides each residual by a
//! detached copy of the predicted intensity plus a small epsilon, which
//! boosts the learning signal in dark regions without the divisor feeding
//! back into the gradient. Visibility channels are supervised with a
//! binary cross-entropy against the per-pixel segmentation maps.

use std::fs::File;
use std::io::Write as _;
use std::path::Path;
use std::time::Instant;

use rand::prelude::*;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::dataset::Dataset;
use crate::error::{Error, Result};
use crate::field::VoxelField;
use crate::render::{
    backprop_ray, pixel_seed, render_ray_forward, RayWorkspace, RenderBounds, RenderConfig,
    RenderMode,
};

// ---------------------------------------------------------------------------
// Losses
// ---------------------------------------------------------------------------

/// Per-pixel L1 loss summed over channels. Returns (loss, d loss / d pred);
/// the subgradient at exact ties is 0.
pub fn loss_l1(pred: [f64; 3], target: [f64; 3]) -> (f64, [f64; 3]) {
    let mut loss = 0.0;
    let mut grad = [0.0; 3];
    for ch in 0..3 {
        let d = pred[ch] - target[ch];
        loss += d.abs();
        grad[ch] = if d > 0.0 {
            1.0
        } else if d < 0.0 {
            -1.0
        } else {
            0.0
        };
    }
    (loss, grad)
}

/// Relative squared loss for low-light supervision: each channel residual is
/// divided by a detached copy of the prediction plus `epsilon`, so the
/// divisor carries no gradient.
pub fn loss_raw(pred: [f64; 3], target: [f64; 3], epsilon: f64) -> (f64, [f64; 3]) {
    let mut loss = 0.0;
    let mut grad = [0.0; 3];
    for ch in 0..3 {
        let denom = pred[ch] + epsilon; // detached
        let r = (pred[ch] - target[ch]) / denom;
        loss += r * r;
        grad[ch] = 2.0 * (pred[ch] - target[ch]) / (denom * denom);
    }
    (loss, grad)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum LossKind {
    #[serde(rename = "l1")]
    L1,
    #[serde(rename = "raw")]
    Raw,
    /// Sum of both losses with unit weight.
    #[serde(rename = "l1+raw")]
    L1Raw,
}

impl LossKind {
    pub fn evaluate(self, pred: [f64; 3], target: [f64; 3], epsilon: f64) -> (f64, [f64; 3]) {
        match self {
            LossKind::L1 => loss_l1(pred, target),
            LossKind::Raw => loss_raw(pred, target, epsilon),
            LossKind::L1Raw => {
                let (la, ga) = loss_l1(pred, target);
                let (lb, gb) = loss_raw(pred, target, epsilon);
                (la + lb, [ga[0] + gb[0], ga[1] + gb[1], ga[2] + gb[2]])
            }
        }
    }
}

// ---------------------------------------------------------------------------
// Configuration and batching
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub steps: usize,
    pub batch_size: usize,
    /// Quadrature samples per ray.
    pub n_samples: usize,
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub loss: LossKind,
    /// Epsilon of the relative loss divisor.
    pub epsilon: f64,
    /// Weight of the visibility cross-entropy term; 0 disables it.
    pub visibility_loss_weight: f64,
    /// Background color assumed during training renders.
    pub background: [f64; 3],
    pub seed: u64,
    /// Save a checkpoint every this many steps; 0 disables checkpoints.
    pub checkpoint_every: usize,
    /// Append a log row every this many steps (the last step always logs).
    pub log_every: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            steps: 5000,
            batch_size: 8192,
            n_samples: 96,
            learning_rate: 1e-2,
            beta1: 0.9,
            beta2: 0.99,
            loss: LossKind::L1,
            epsilon: 1e-3,
            visibility_loss_weight: 0.1,
            background: [0.0; 3],
            seed: 0,
            checkpoint_every: 0,
            log_every: 100,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 || self.n_samples == 0 {
            return Err(Error::input("batch_size and n_samples must be positive"));
        }
        if !(self.learning_rate > 0.0) {
            return Err(Error::input("learning_rate must be positive"));
        }
        if !(self.epsilon > 0.0) {
            return Err(Error::input("epsilon must be positive"));
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) {
            return Err(Error::input("Adam betas must be in [0,1)"));
        }
        Ok(())
    }
}

/// One training ray: a pixel of a dataset view.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct RaySample {
    pub view: usize,
    pub x: u32,
    pub y: u32,
}

/// Draw `batch_size` pixels uniformly with replacement across all views.
pub fn sample_ray_batch(dataset: &Dataset, batch_size: usize, rng: &mut impl Rng) -> Vec<RaySample> {
    let mut batch = Vec::with_capacity(batch_size);
    for _ in 0..batch_size {
        let view = rng.gen_range(0..dataset.views.len());
        let cam = &dataset.views[view].camera;
        batch.push(RaySample {
            view,
            x: rng.gen_range(0..cam.width),
            y: rng.gen_range(0..cam.height),
        });
    }
    batch
}

/// Every pixel of every view in a fixed order, for exhaustive passes over
/// small datasets.
pub fn exhaustive_rays(dataset: &Dataset) -> Vec<RaySample> {
    let mut rays = Vec::new();
    for (view, v) in dataset.views.iter().enumerate() {
        for y in 0..v.camera.height {
            for x in 0..v.camera.width {
                rays.push(RaySample { view, x, y });
            }
        }
    }
    rays
}

// ---------------------------------------------------------------------------
// Trainer
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Copy)]
pub struct StepStats {
    /// Mean photometric + visibility loss per ray in the batch.
    pub loss: f64,
    /// L2 norm of the batch gradient.
    pub grad_norm: f64,
    /// Parameters with a nonzero gradient this step.
    pub touched: usize,
}

pub struct Trainer {
    pub field: VoxelField,
    pub cfg: TrainConfig,
    adam_m: Vec<f32>,
    adam_v: Vec<f32>,
    adam_t: u64,
}

const BCE_CLAMP: f64 = 1e-6;

impl Trainer {
    pub fn new(field: VoxelField, cfg: TrainConfig) -> Result<Trainer> {
        cfg.validate()?;
        let n = field.params.len();
        Ok(Trainer {
            field,
            cfg,
            adam_m: vec![0.0; n],
            adam_v: vec![0.0; n],
            adam_t: 0,
        })
    }

    /// Forward + backward over one ray batch, then a lazy Adam update that
    /// only touches parameters with nonzero gradient.
    pub fn train_step(&mut self, dataset: &Dataset, batch: &[RaySample], step: u64) -> Result<StepStats> {
        let grad_scale = 1.0 / batch.len() as f64;
        let n_params = self.field.params.len();
        let n_threads = rayon::current_num_threads().max(1);
        let chunk_len = batch.len().div_ceil(2 * n_threads).max(1);

        let (grad, loss_sum) = batch
            .par_chunks(chunk_len)
            .map(|chunk| -> Result<(Vec<f64>, f64)> {
                let mut grad = vec![0.0f64; n_params];
                let mut loss_sum = 0.0;
                let mut ws = RayWorkspace::default();
                for ray_sample in chunk {
                    loss_sum += self.accumulate_ray(dataset, ray_sample, step, grad_scale, &mut ws, &mut grad)?;
                }
                Ok((grad, loss_sum))
            })
            .try_reduce(
                || (vec![0.0f64; n_params], 0.0),
                |(mut ga, la), (gb, lb)| {
                    for (a, b) in ga.iter_mut().zip(&gb) {
                        *a += b;
                    }
                    Ok((ga, la + lb))
                },
            )?;

        // Lazy Adam with a shared step count; untouched parameters keep
        // their moments undecayed.
        self.adam_t += 1;
        let bc1 = 1.0 - self.cfg.beta1.powi(self.adam_t as i32);
        let bc2 = 1.0 - self.cfg.beta2.powi(self.adam_t as i32);
        let (b1, b2) = (self.cfg.beta1, self.cfg.beta2);
        let lr = self.cfg.learning_rate;
        let mut grad_sq = 0.0;
        let mut touched = 0usize;
        for (idx, &g) in grad.iter().enumerate() {
            if g == 0.0 {
                continue;
            }
            touched += 1;
            grad_sq += g * g;
            let m = b1 * self.adam_m[idx] as f64 + (1.0 - b1) * g;
            let v = b2 * self.adam_v[idx] as f64 + (1.0 - b2) * g * g;
            self.adam_m[idx] = m as f32;
            self.adam_v[idx] = v as f32;
            let update = lr * (m / bc1) / ((v / bc2).sqrt() + 1e-8);
            self.field.params[idx] -= update as f32;
        }
        Ok(StepStats {
            loss: loss_sum / batch.len() as f64,
            grad_norm: grad_sq.sqrt(),
            touched,
        })
    }

    fn accumulate_ray(
        &self,
        dataset: &Dataset,
        s: &RaySample,
        step: u64,
        grad_scale: f64,
        ws: &mut RayWorkspace,
        grad: &mut [f64],
    ) -> Result<f64> {
        let view = &dataset.views[s.view];
        let ray = view.camera.ray_for_pixel(s.x as f64, s.y as f64)?;
        let Some((t1, t2)) =
            self.field
                .bounds
                .clip_ray(ray.origin, ray.direction, ray.t_near, ray.t_far)
        else {
            return Ok(0.0);
        };
        let bounds = RenderBounds::new(t1, t2, RenderMode::Full)?;
        let cfg = RenderConfig {
            n_samples: self.cfg.n_samples,
            jitter: true,
            background: self.cfg.background,
        };
        let seed = pixel_seed(self.cfg.seed ^ step.wrapping_mul(0xA076_1D64_78BD_642F), s.x, s.y)
            ^ (s.view as u64).wrapping_mul(0xE703_7ED1_A0B4_28DB);
        let out = render_ray_forward(&self.field, &ray, &bounds, &cfg, seed, ws)?;
        if !out.color.iter().all(|v| v.is_finite()) {
            return Err(Error::numerical(format!(
                "non-finite color at view {} pixel ({}, {}); aborting",
                view.name, s.x, s.y
            )));
        }

        let target = view.image.get(s.x, s.y).map(|v| v as f64);
        let (mut loss, color_grad) = self.cfg.loss.evaluate(out.color, target, self.cfg.epsilon);
        let upstream_color = color_grad.map(|g| g * grad_scale);

        // Binary cross-entropy on the rendered visibility against the
        // segmentation map, when both are available.
        let mut upstream_vis = 0.0;
        if self.cfg.visibility_loss_weight > 0.0 {
            if let Some(seg) = &view.segmentation {
                let y = if seg[(s.y * view.camera.width + s.x) as usize] {
                    1.0
                } else {
                    0.0
                };
                let v = out.visibility.clamp(BCE_CLAMP, 1.0 - BCE_CLAMP);
                let w = self.cfg.visibility_loss_weight;
                loss += w * -(y * v.ln() + (1.0 - y) * (1.0 - v).ln());
                upstream_vis = w * (-(y / v) + (1.0 - y) / (1.0 - v)) * grad_scale;
            }
        }

        backprop_ray(&bounds, &cfg, ws, upstream_color, upstream_vis, |idx, g| {
            grad[idx] += g;
        });
        Ok(loss)
    }
}

// ---------------------------------------------------------------------------
// Fit driver
// ---------------------------------------------------------------------------

/// Run the full training loop: sample a fresh batch each step, update the
/// field, optionally write checkpoints and a CSV log
/// (`step,loss,grad_norm,elapsed_s`) under `out_dir`.
pub fn fit(
    field: VoxelField,
    dataset: &Dataset,
    cfg: &TrainConfig,
    out_dir: Option<&Path>,
) -> Result<(VoxelField, Vec<StepStats>)> {
    if dataset.views.is_empty() {
        return Err(Error::input("cannot train on an empty dataset"));
    }
    let mut log = match out_dir {
        Some(dir) => {
            std::fs::create_dir_all(dir)?;
            let mut f = File::create(dir.join("train_log.csv"))?;
            writeln!(f, "step,loss,grad_norm,elapsed_s")?;
            Some(f)
        }
        None => None,
    };
    let cfg = cfg.clone();
    let steps = cfg.steps;
    let checkpoint_every = cfg.checkpoint_every;
    let log_every = cfg.log_every.max(1);
    let mut trainer = Trainer::new(field, cfg)?;
    let mut rng = ChaCha8Rng::seed_from_u64(trainer.cfg.seed);
    let start = Instant::now();
    let mut history = Vec::with_capacity(steps);
    for step in 0..steps {
        let batch = sample_ray_batch(dataset, trainer.cfg.batch_size, &mut rng);
        let stats = trainer.train_step(dataset, &batch, step as u64)?;
        if !stats.loss.is_finite() {
            return Err(Error::numerical(format!(
                "non-finite loss at step {step}; aborting"
            )));
        }
        if let Some(f) = log.as_mut() {
            if step % log_every == 0 || step + 1 == steps {
                writeln!(
                    f,
                    "{step},{:.6},{:.6},{:.3}",
                    stats.loss,
                    stats.grad_norm,
                    start.elapsed().as_secs_f64()
                )?;
            }
        }
        if checkpoint_every > 0 && (step + 1) % checkpoint_every == 0 {
            if let Some(dir) = out_dir {
                let ckpt = dir.join("checkpoints");
                std::fs::create_dir_all(&ckpt)?;
                trainer.field.save(&ckpt.join(format!("step_{:05}.cnpl", step + 1)))?;
            }
        }
        history.push(stats);
    }
    Ok((trainer.field, history))
}
