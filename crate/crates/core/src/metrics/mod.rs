//! Overlap, surface and confusion metrics, and their per-fold aggregation.
//!
//! `a` is the annotation and `b` the prediction; any positive label counts
//! as foreground.

use std::path::Path;

use ndarray::Array3;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Feature;

pub mod surface;

pub use surface::{extract_surface, nsd, nsd_all_pairs, SurfaceSet};

pub const DEFAULT_TAU_MM: f64 = 3.0;

pub(crate) fn check_shapes(a: &Array3<u8>, b: &Array3<u8>) -> Result<()> {
    if a.dim() != b.dim() {
        return Err(Error::Shape(format!("masks {:?} and {:?} differ", a.dim(), b.dim())));
    }
    Ok(())
}

/// `2|A∩B| / (|A|+|B|)`; 1 when both are empty.
pub fn dsc(a: &Array3<u8>, b: &Array3<u8>) -> Result<f64> {
    check_shapes(a, b)?;
    let (mut inter, mut na, mut nb) = (0usize, 0usize, 0usize);
    for (&x, &y) in a.iter().zip(b.iter()) {
        let (x, y) = (x > 0, y > 0);
        na += usize::from(x);
        nb += usize::from(y);
        inter += usize::from(x && y);
    }
    if na + nb == 0 {
        return Ok(1.0);
    }
    Ok(2.0 * inter as f64 / (na + nb) as f64)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct Confusion {
    pub tp: usize,
    pub fp: usize,
    pub fn_: usize,
    pub tn: usize,
}

impl Confusion {
    pub fn count(a: &Array3<u8>, b: &Array3<u8>) -> Result<Self> {
        check_shapes(a, b)?;
        let mut c = Confusion::default();
        for (&x, &y) in a.iter().zip(b.iter()) {
            match (x > 0, y > 0) {
                (true, true) => c.tp += 1,
                (false, true) => c.fp += 1,
                (true, false) => c.fn_ += 1,
                (false, false) => c.tn += 1,
            }
        }
        Ok(c)
    }

    pub fn total(&self) -> usize {
        self.tp + self.fp + self.fn_ + self.tn
    }
}

fn ratio(num: usize, den: usize) -> Option<f64> {
    (den > 0).then(|| num as f64 / den as f64)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ConfusionStats {
    pub sensitivity: Option<f64>,
    pub precision: Option<f64>,
    pub f1: Option<f64>,
    pub accuracy: Option<f64>,
}

/// Sensitivity, precision, F1 and accuracy; `None` marks a zero denominator.
pub fn confusion_stats(a: &Array3<u8>, b: &Array3<u8>) -> Result<ConfusionStats> {
    let c = Confusion::count(a, b)?;
    let sensitivity = ratio(c.tp, c.tp + c.fn_);
    let precision = ratio(c.tp, c.tp + c.fp);
    let f1 = match (sensitivity, precision) {
        (Some(s), Some(p)) if s + p > 0.0 => Some(2.0 * p * s / (p + s)),
        (Some(_), Some(_)) => Some(0.0),
        _ => None,
    };
    Ok(ConfusionStats {
        sensitivity,
        precision,
        f1,
        accuracy: ratio(c.tp + c.tn, c.total()),
    })
}

/// Soft Dice of foreground probabilities (channel 1 of a two-class softmax)
/// against a binary target; 1 when both are empty.
pub fn soft_dice(probs: &Feature, labels: &Array3<u8>) -> Result<f64> {
    let (z, y, x) = labels.dim();
    if probs.dims != [z, y, x] || probs.channels < 2 {
        return Err(Error::Shape(format!(
            "probabilities {}×{:?} vs labels {:?}",
            probs.channels,
            probs.dims,
            [z, y, x]
        )));
    }
    let p = probs.channel(1);
    let (mut inter, mut sp, mut sg) = (0.0, 0.0, 0.0);
    for (&pi, &l) in p.iter().zip(labels.iter()) {
        let g = f64::from(u8::from(l > 0));
        inter += pi * g;
        sp += pi;
        sg += g;
    }
    if sp + sg == 0.0 {
        return Ok(1.0);
    }
    Ok(2.0 * inter / (sp + sg))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CaseMetrics {
    pub case_id: String,
    pub dsc: f64,
    pub nsd: f64,
    pub sensitivity: Option<f64>,
    pub precision: Option<f64>,
    pub f1: Option<f64>,
    pub accuracy: Option<f64>,
}

/// Every metric for one case over the full volume.
pub fn evaluate_case(
    case_id: &str,
    annotation: &Array3<u8>,
    prediction: &Array3<u8>,
    spacing: [f64; 3],
    tau_mm: f64,
) -> Result<CaseMetrics> {
    let c = confusion_stats(annotation, prediction)?;
    Ok(CaseMetrics {
        case_id: case_id.to_string(),
        dsc: dsc(annotation, prediction)?,
        nsd: nsd(annotation, prediction, spacing, tau_mm)?,
        sensitivity: c.sensitivity,
        precision: c.precision,
        f1: c.f1,
        accuracy: c.accuracy,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MetricSummary {
    pub mean: f64,
    /// Population standard deviation.
    pub std: f64,
    pub n: usize,
    pub excluded: usize,
}

/// Mean and population std over the defined values; undefined values are
/// excluded and counted.
pub fn summarize(name: &str, values: &[Option<f64>]) -> Result<MetricSummary> {
    let defined: Vec<f64> = values.iter().flatten().copied().collect();
    if defined.is_empty() {
        return Err(Error::AllUndefined(name.to_string()));
    }
    let n = defined.len() as f64;
    let mean = defined.iter().sum::<f64>() / n;
    let var = defined.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
    Ok(MetricSummary {
        mean,
        std: var.sqrt(),
        n: defined.len(),
        excluded: values.len() - defined.len(),
    })
}

pub const METRIC_NAMES: [&str; 6] = ["dsc", "nsd", "sensitivity", "precision", "f1", "accuracy"];

/// Per-metric summaries in [`METRIC_NAMES`] order. A metric undefined on
/// every case has no summary.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FoldSummary {
    pub n_cases: usize,
    pub metrics: Vec<(String, Option<MetricSummary>)>,
}

impl FoldSummary {
    pub fn get(&self, name: &str) -> Option<&MetricSummary> {
        self.metrics.iter().find(|(n, _)| n == name).and_then(|(_, s)| s.as_ref())
    }
}

fn column(cases: &[CaseMetrics], name: &str) -> Vec<Option<f64>> {
    cases
        .iter()
        .map(|c| match name {
            "dsc" => Some(c.dsc),
            "nsd" => Some(c.nsd),
            "sensitivity" => c.sensitivity,
            "precision" => c.precision,
            "f1" => c.f1,
            _ => c.accuracy,
        })
        .collect()
}

pub fn aggregate(cases: &[CaseMetrics]) -> Result<FoldSummary> {
    if cases.is_empty() {
        return Err(Error::Config("no cases to aggregate".into()));
    }
    let metrics = METRIC_NAMES
        .iter()
        .map(|&name| {
            let s = match summarize(name, &column(cases, name)) {
                Ok(s) => Some(s),
                Err(Error::AllUndefined(_)) => {
                    log::warn!("{name} is undefined on every case");
                    None
                }
                Err(e) => return Err(e),
            };
            Ok((name.to_string(), s))
        })
        .collect::<Result<_>>()?;
    Ok(FoldSummary {
        n_cases: cases.len(),
        metrics,
    })
}

/// `case_id` plus the six metrics; undefined values are empty fields.
pub fn write_case_csv(path: impl AsRef<Path>, cases: &[CaseMetrics]) -> Result<()> {
    let path = path.as_ref();
    let mut w = csv::Writer::from_path(path).map_err(|e| Error::format(path, e.to_string()))?;
    for c in cases {
        w.serialize(c).map_err(|e| Error::format(path, e.to_string()))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

pub fn read_case_csv(path: impl AsRef<Path>) -> Result<Vec<CaseMetrics>> {
    let path = path.as_ref();
    let mut r = csv::Reader::from_path(path).map_err(|e| Error::format(path, e.to_string()))?;
    r.deserialize()
        .collect::<std::result::Result<Vec<CaseMetrics>, _>>()
        .map_err(|e| Error::format(path, e.to_string()))
}
