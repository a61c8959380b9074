//! Foreground-percentile clipping followed by z-score standardization.

use serde::{Deserialize, Serialize};

use super::{Mask, Volume};
use crate::error::{Error, Result};

pub const DEFAULT_P_LO: f64 = 0.5;
pub const DEFAULT_P_HI: f64 = 99.5;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct IntensityStats {
    pub p_lo: f64,
    pub p_hi: f64,
    pub mean: f64,
    pub std: f64,
}

/// Linear-interpolated percentile of an ascending slice (`q` in percent).
pub fn percentile(sorted: &[f64], q: f64) -> f64 {
    assert!(!sorted.is_empty(), "percentile of an empty sample");
    let pos = (q / 100.0).clamp(0.0, 1.0) * (sorted.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    let frac = pos - lo as f64;
    sorted[lo] + (sorted[hi] - sorted[lo]) * frac
}

impl IntensityStats {
    /// Statistics over the foreground voxels of the training cases, using the
    /// default percentile pair.
    pub fn fit(cases: &[(&Volume, &Mask)]) -> Result<Self> {
        Self::fit_with(cases, DEFAULT_P_LO, DEFAULT_P_HI)
    }

    /// Percentiles of the pooled foreground intensities, then mean and
    /// population standard deviation of those intensities after clipping.
    /// Cases without any foreground contribute all voxels only when no case
    /// has foreground at all.
    pub fn fit_with(cases: &[(&Volume, &Mask)], q_lo: f64, q_hi: f64) -> Result<Self> {
        if !(0.0..=100.0).contains(&q_lo) || !(0.0..=100.0).contains(&q_hi) || q_lo > q_hi {
            return Err(Error::Config(format!("invalid percentile pair ({q_lo}, {q_hi})")));
        }
        let mut values = Vec::new();
        for (v, m) in cases {
            m.check_aligned(v)?;
            values.extend(
                v.data
                    .iter()
                    .zip(m.labels.iter())
                    .filter(|(_, &l)| l > 0)
                    .map(|(&x, _)| f64::from(x)),
            );
        }
        if values.is_empty() {
            log::warn!("no foreground voxels in the fit set; using all voxels");
            for (v, _) in cases {
                values.extend(v.data.iter().map(|&x| f64::from(x)));
            }
        }
        if values.is_empty() {
            return Err(Error::DegenerateStats("empty fit set".into()));
        }
        if values.iter().any(|x| !x.is_finite()) {
            return Err(Error::DegenerateStats("non-finite intensities in fit set".into()));
        }
        values.sort_by(f64::total_cmp);
        let p_lo = percentile(&values, q_lo);
        let p_hi = percentile(&values, q_hi);
        let n = values.len() as f64;
        let clipped = values.iter().map(|x| x.clamp(p_lo, p_hi));
        let mean = clipped.clone().sum::<f64>() / n;
        let var = clipped.map(|x| (x - mean) * (x - mean)).sum::<f64>() / n;
        Ok(IntensityStats {
            p_lo,
            p_hi,
            mean,
            std: var.sqrt(),
        })
    }
}

/// `(clip(data, p_lo, p_hi) − mean) / std`; shape, spacing and tags unchanged.
pub fn preprocess(v: &Volume, stats: &IntensityStats) -> Result<Volume> {
    if !(stats.std > 0.0) || !stats.std.is_finite() {
        return Err(Error::DegenerateStats(format!("standard deviation {}", stats.std)));
    }
    if !(stats.p_lo <= stats.p_hi) {
        return Err(Error::DegenerateStats(format!(
            "clip range [{}, {}] is empty",
            stats.p_lo, stats.p_hi
        )));
    }
    let data = v
        .data
        .mapv(|x| ((f64::from(x).clamp(stats.p_lo, stats.p_hi) - stats.mean) / stats.std) as f32);
    Ok(Volume {
        data,
        spacing: v.spacing,
        case_id: v.case_id.clone(),
        source_task: v.source_task.clone(),
    })
}
