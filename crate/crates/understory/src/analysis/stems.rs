//! Cluster filtering and merging for stem counting.
//!
//! Each HDBSCAN cluster becomes a stem candidate: PCA over the centered
//! points gives the principal axis, whose angle to vertical filters out
//! fallen branches, and the axis-aligned bounding volume filters out
//! fragments and oversized blobs. Survivors that sit directly above one
//! another (close in xy, disjoint in z) are merged, since a stem is often
//! split where canopy occluded its middle.

use std::collections::BTreeMap;

use nalgebra::{Matrix3, SymmetricEigen};
use serde::{Deserialize, Serialize};

use crate::cloud::PointCloud;
use crate::error::{Error, Result};
use crate::geometry::Vec3;

#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct StemFilterConfig {
    /// Axis-aligned bounding volume limits, cubic meters.
    pub min_volume: f64,
    pub max_volume: f64,
    /// Maximum principal-axis angle from vertical, degrees.
    pub max_tilt_deg: f64,
    /// Merge clusters whose xy centroids are within this radius and whose
    /// z ranges are disjoint.
    pub vertical_merge_xy_radius: f64,
}

impl Default for StemFilterConfig {
    fn default() -> Self {
        StemFilterConfig {
            min_volume: 0.01,
            max_volume: 5.0,
            max_tilt_deg: 25.0,
            vertical_merge_xy_radius: 0.5,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct StemRecord {
    pub centroid: [f64; 3],
    /// Unit principal axis, oriented upward.
    pub axis: [f64; 3],
    /// Angle between the principal axis and vertical, degrees.
    pub tilt_deg: f64,
    /// Extent of the z range, meters.
    pub height_m: f64,
    pub n_points: usize,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct StemReport {
    pub stem_count: usize,
    pub stems: Vec<StemRecord>,
    /// Rejected candidate counts by reason ("degenerate", "tilt", "volume").
    pub discarded: BTreeMap<String, usize>,
}

struct Candidate {
    points: Vec<Vec3>,
    centroid: Vec3,
    axis: Vec3,
    z_min: f64,
    z_max: f64,
}

fn analyze(points: Vec<Vec3>) -> Result<Candidate, &'static str> {
    let n = points.len() as f64;
    let centroid = points.iter().sum::<Vec3>() / n;
    let mut cov = Matrix3::zeros();
    for p in &points {
        let d = p - centroid;
        cov += d * d.transpose();
    }
    cov /= n;
    if cov.trace() < 1e-18 {
        return Err("degenerate");
    }
    let eigen = SymmetricEigen::new(cov);
    let mut max_i = 0;
    for i in 1..3 {
        if eigen.eigenvalues[i] > eigen.eigenvalues[max_i] {
            max_i = i;
        }
    }
    let mut axis: Vec3 = eigen.eigenvectors.column(max_i).into();
    if axis.z < 0.0 {
        axis = -axis;
    }
    let z_min = points.iter().map(|p| p.z).fold(f64::INFINITY, f64::min);
    let z_max = points.iter().map(|p| p.z).fold(f64::NEG_INFINITY, f64::max);
    Ok(Candidate {
        points,
        centroid,
        axis,
        z_min,
        z_max,
    })
}

fn aabb_volume(points: &[Vec3]) -> f64 {
    let mut min = [f64::INFINITY; 3];
    let mut max = [f64::NEG_INFINITY; 3];
    for p in points {
        for (i, v) in [p.x, p.y, p.z].into_iter().enumerate() {
            min[i] = min[i].min(v);
            max[i] = max[i].max(v);
        }
    }
    (max[0] - min[0]) * (max[1] - min[1]) * (max[2] - min[2])
}

/// Group cloud points by cluster label (noise < 0 ignored), apply the tilt
/// and volume filters, merge vertically split survivors and report the
/// resulting stems ordered by centroid.
pub fn stem_filter_and_merge(
    cloud: &PointCloud,
    labels: &[i64],
    cfg: &StemFilterConfig,
) -> Result<StemReport> {
    if cloud.points.len() != labels.len() {
        return Err(Error::input("stem filter: label count must match points"));
    }
    if !(cfg.min_volume <= cfg.max_volume) || !(0.0..=90.0).contains(&cfg.max_tilt_deg) {
        return Err(Error::input("invalid stem filter configuration"));
    }
    let mut groups: BTreeMap<i64, Vec<Vec3>> = BTreeMap::new();
    for (p, &l) in cloud.points.iter().zip(labels) {
        if l >= 0 {
            groups.entry(l).or_default().push(p.position);
        }
    }

    let mut discarded: BTreeMap<String, usize> = BTreeMap::new();
    let discard = |reason: &str, map: &mut BTreeMap<String, usize>| {
        *map.entry(reason.to_owned()).or_insert(0) += 1;
    };
    let mut survivors: Vec<Candidate> = Vec::new();
    for (_, points) in groups {
        let volume = aabb_volume(&points);
        let cand = match analyze(points) {
            Ok(c) => c,
            Err(reason) => {
                discard(reason, &mut discarded);
                continue;
            }
        };
        let tilt = cand.axis.z.clamp(-1.0, 1.0).acos().to_degrees();
        if tilt > cfg.max_tilt_deg {
            discard("tilt", &mut discarded);
            continue;
        }
        if volume < cfg.min_volume || volume > cfg.max_volume {
            discard("volume", &mut discarded);
            continue;
        }
        survivors.push(cand);
    }

    // Merge pairs that are close in xy and disjoint in z, repeating until
    // stable so a stem split into three pieces still collapses.
    let mut merged = true;
    while merged {
        merged = false;
        'outer: for i in 0..survivors.len() {
            for j in (i + 1)..survivors.len() {
                let a = &survivors[i];
                let b = &survivors[j];
                let dx = a.centroid.x - b.centroid.x;
                let dy = a.centroid.y - b.centroid.y;
                let close = (dx * dx + dy * dy).sqrt() <= cfg.vertical_merge_xy_radius;
                let disjoint = a.z_max < b.z_min || b.z_max < a.z_min;
                if close && disjoint {
                    let b = survivors.swap_remove(j);
                    let mut points = std::mem::take(&mut survivors[i].points);
                    points.extend(b.points);
                    // A merged candidate was already vetted; keep it even if
                    // the union is degenerate for PCA (it cannot be).
                    survivors[i] = analyze(points).expect("merged cluster has extent");
                    merged = true;
                    break 'outer;
                }
            }
        }
    }

    survivors.sort_by(|a, b| {
        (a.centroid.x, a.centroid.y)
            .partial_cmp(&(b.centroid.x, b.centroid.y))
            .unwrap()
    });
    let stems: Vec<StemRecord> = survivors
        .iter()
        .map(|c| StemRecord {
            centroid: [c.centroid.x, c.centroid.y, c.centroid.z],
            axis: [c.axis.x, c.axis.y, c.axis.z],
            tilt_deg: c.axis.z.clamp(-1.0, 1.0).acos().to_degrees(),
            height_m: c.z_max - c.z_min,
            n_points: c.points.len(),
        })
        .collect();
    Ok(StemReport {
        stem_count: stems.len(),
        stems,
        discarded,
    })
}
