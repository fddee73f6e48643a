//! Lighting diagnostics: luminance histograms and bimodality detection.
//!
//! Direct sunlight through a canopy splits a capture into hard-lit and
//! shadowed regions, which shows up as a bimodal luminance histogram;
//! diffuse lighting stays unimodal. The detector combines the bimodality
//! coefficient with an explicit two-peak check so a skewed unimodal
//! histogram is not misflagged.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::img::ImageBuf;

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ExposureReport {
    pub histogram: Vec<usize>,
    /// Bimodality coefficient (skewness^2 + 1) / kurtosis; 0 for
    /// zero-variance images.
    pub bimodality: f64,
    pub bimodal: bool,
    /// Bin-center luminances of the detected local maxima.
    pub mode_positions: Vec<f64>,
}

const BIMODALITY_THRESHOLD: f64 = 0.555;

/// Histogram the image luminance into `n_bins` (at least 16) and flag the
/// image bimodal when the bimodality coefficient exceeds 0.555 AND two
/// local maxima sit at least `n_bins / 4` bins apart.
pub fn exposure_histogram(image: &ImageBuf, n_bins: usize) -> Result<ExposureReport> {
    if n_bins < 16 {
        return Err(Error::input("exposure_histogram needs at least 16 bins"));
    }
    let lum = image.luminance();
    if lum.is_empty() {
        return Err(Error::input("exposure_histogram: empty image"));
    }
    let mut histogram = vec![0usize; n_bins];
    for &v in &lum {
        let bin = ((v as f64 * n_bins as f64) as usize).min(n_bins - 1);
        histogram[bin] += 1;
    }

    let n = lum.len() as f64;
    let mean = lum.iter().map(|&v| v as f64).sum::<f64>() / n;
    let m2 = lum.iter().map(|&v| (v as f64 - mean).powi(2)).sum::<f64>() / n;
    let coeff = if m2 > 1e-18 {
        let m3 = lum.iter().map(|&v| (v as f64 - mean).powi(3)).sum::<f64>() / n;
        let m4 = lum.iter().map(|&v| (v as f64 - mean).powi(4)).sum::<f64>() / n;
        let skew = m3 / m2.powf(1.5);
        let kurt = m4 / (m2 * m2);
        (skew * skew + 1.0) / kurt
    } else {
        0.0
    };

    // Local maxima: strictly above the left neighbor, at least the right.
    let mut maxima = Vec::new();
    for i in 0..n_bins {
        if histogram[i] == 0 {
            continue;
        }
        let left = if i > 0 { histogram[i - 1] } else { 0 };
        let right = if i + 1 < n_bins { histogram[i + 1] } else { 0 };
        if histogram[i] > left && histogram[i] >= right {
            maxima.push(i);
        }
    }
    let separated = maxima
        .iter()
        .any(|&a| maxima.iter().any(|&b| b >= a + n_bins / 4));
    let bimodal = coeff > BIMODALITY_THRESHOLD && separated;
    Ok(ExposureReport {
        histogram,
        bimodality: coeff,
        bimodal,
        mode_positions: maxima
            .iter()
            .map(|&i| (i as f64 + 0.5) / n_bins as f64)
            .collect(),
    })
}
