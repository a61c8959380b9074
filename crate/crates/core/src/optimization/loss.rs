//! Soft Dice plus cross-entropy, and its deep-supervision aggregate.

use ndarray::Array3;
use serde::{Deserialize, Serialize};

use crate::backbone::LogitsPyramid;
use crate::error::{Error, Result};
use crate::tensor::Feature;

pub const DEFAULT_DICE_SMOOTH: f64 = 1e-5;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LossConfig {
    #[serde(default = "default_smooth")]
    pub dice_smooth: f64,
    pub ds_weights: Vec<f64>,
    #[serde(default)]
    pub class_weights: Option<Vec<f64>>,
}

fn default_smooth() -> f64 {
    DEFAULT_DICE_SMOOTH
}

impl LossConfig {
    /// Weights halving per level, renormalized: 3 levels give `4/7, 2/7, 1/7`.
    pub fn geometric(levels: usize) -> Self {
        let raw: Vec<f64> = (0..levels).map(|k| 0.5_f64.powi(k as i32)).collect();
        let total: f64 = raw.iter().sum();
        LossConfig {
            dice_smooth: DEFAULT_DICE_SMOOTH,
            ds_weights: raw.into_iter().map(|w| w / total).collect(),
            class_weights: None,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.dice_smooth > 0.0) {
            return Err(Error::Config("dice_smooth must be positive".into()));
        }
        if self.ds_weights.is_empty() || self.ds_weights.iter().any(|w| !(*w >= 0.0)) {
            return Err(Error::Config("ds_weights must be nonempty and nonnegative".into()));
        }
        let sum: f64 = self.ds_weights.iter().sum();
        if (sum - 1.0).abs() > 1e-9 {
            return Err(Error::Config(format!("ds_weights sum to {sum}, expected 1")));
        }
        if let Some(cw) = &self.class_weights {
            if cw.iter().any(|w| !(*w > 0.0)) {
                return Err(Error::Config("class weights must be positive".into()));
            }
        }
        Ok(())
    }
}

/// Loss value with its components and the gradient w.r.t. each sample's logits.
#[derive(Debug, Clone, PartialEq)]
pub struct LossOutput {
    pub total: f64,
    pub dice_loss: f64,
    pub cross_entropy: f64,
    pub grads: Vec<Feature>,
}

impl LossOutput {
    /// Mean soft Dice over foreground classes.
    pub fn soft_dice(&self) -> f64 {
        1.0 - self.dice_loss
    }
}

fn softmax_probs(logits: &Feature) -> (Vec<f64>, Vec<f64>) {
    // returns (probabilities, log-sum-exp per voxel)
    let n = logits.spatial();
    let k = logits.channels;
    let mut p = vec![0.0; k * n];
    let mut lse = vec![0.0; n];
    for v in 0..n {
        let m = (0..k).map(|c| logits.data[c * n + v]).fold(f64::NEG_INFINITY, f64::max);
        let mut sum = 0.0;
        for c in 0..k {
            let e = (logits.data[c * n + v] - m).exp();
            p[c * n + v] = e;
            sum += e;
        }
        for c in 0..k {
            p[c * n + v] /= sum;
        }
        lse[v] = m + sum.ln();
    }
    (p, lse)
}

/// Batch soft Dice over foreground classes plus voxel-mean cross-entropy.
pub fn dice_ce_loss(logits: &[Feature], targets: &[&Array3<u8>], cfg: &LossConfig) -> Result<LossOutput> {
    if logits.len() != targets.len() || logits.is_empty() {
        return Err(Error::Shape(format!(
            "{} logits for {} targets",
            logits.len(),
            targets.len()
        )));
    }
    let k = logits[0].channels;
    if k < 2 {
        return Err(Error::Shape("loss needs at least two classes".into()));
    }
    if let Some(cw) = &cfg.class_weights {
        if cw.len() != k {
            return Err(Error::Config(format!("{} class weights for {k} classes", cw.len())));
        }
    }
    for (l, t) in logits.iter().zip(targets) {
        let (z, y, x) = t.dim();
        if l.channels != k || l.dims != [z, y, x] {
            return Err(Error::Shape(format!(
                "logits {}×{:?} vs target {:?}",
                l.channels,
                l.dims,
                [z, y, x]
            )));
        }
        if let Some(&bad) = t.iter().find(|&&v| usize::from(v) >= k) {
            return Err(Error::LabelRange {
                label: bad,
                num_classes: k,
            });
        }
    }

    let probs: Vec<(Vec<f64>, Vec<f64>)> = logits.iter().map(softmax_probs).collect();
    let weight_of = |label: u8| cfg.class_weights.as_ref().map_or(1.0, |w| w[usize::from(label)]);

    // Cross-entropy
    let mut ce_num = 0.0;
    let mut ce_den = 0.0;
    for ((l, t), (_, lse)) in logits.iter().zip(targets).zip(&probs) {
        let n = l.spatial();
        for (v, &label) in t.iter().enumerate() {
            let w = weight_of(label);
            ce_num += w * (lse[v] - l.data[usize::from(label) * n + v]);
            ce_den += w;
        }
    }
    let cross_entropy = ce_num / ce_den;

    // Soft Dice, aggregated over the batch
    let fg = k - 1;
    let mut inter = vec![0.0; k];
    let mut psum = vec![0.0; k];
    let mut gsum = vec![0.0; k];
    for ((l, t), (p, _)) in logits.iter().zip(targets).zip(&probs) {
        let n = l.spatial();
        for c in 1..k {
            let pc = &p[c * n..(c + 1) * n];
            for (v, &label) in t.iter().enumerate() {
                let g = if usize::from(label) == c { 1.0 } else { 0.0 };
                inter[c] += pc[v] * g;
                psum[c] += pc[v];
                gsum[c] += g;
            }
        }
    }
    let eps = cfg.dice_smooth;
    let mean_dice = (1..k)
        .map(|c| (2.0 * inter[c] + eps) / (psum[c] + gsum[c] + eps))
        .sum::<f64>()
        / fg as f64;
    let dice_loss = 1.0 - mean_dice;

    let mut grads = Vec::with_capacity(logits.len());
    for ((l, t), (p, _)) in logits.iter().zip(targets).zip(&probs) {
        let n = l.spatial();
        let mut dp = vec![0.0; k * n];
        for c in 1..k {
            let den = psum[c] + gsum[c] + eps;
            let num = 2.0 * inter[c] + eps;
            for (v, &label) in t.iter().enumerate() {
                let g = if usize::from(label) == c { 1.0 } else { 0.0 };
                dp[c * n + v] = -(2.0 * g * den - num) / (den * den) / fg as f64;
            }
        }
        let mut d = Feature::zeros(k, l.dims);
        for (v, &label) in t.iter().enumerate() {
            let dot: f64 = (0..k).map(|c| p[c * n + v] * dp[c * n + v]).sum();
            let w = weight_of(label) / ce_den;
            for c in 0..k {
                let pc = p[c * n + v];
                let onehot = if usize::from(label) == c { 1.0 } else { 0.0 };
                d.data[c * n + v] = pc * (dp[c * n + v] - dot) + w * (pc - onehot);
            }
        }
        grads.push(d);
    }
    Ok(LossOutput {
        total: dice_loss + cross_entropy,
        dice_loss,
        cross_entropy,
        grads,
    })
}

/// Nearest-neighbour downsampling of a label grid to `dims` (integer factors).
pub fn downsample_labels(labels: &Array3<u8>, dims: [usize; 3]) -> Result<Array3<u8>> {
    let (z, y, x) = labels.dim();
    let src = [z, y, x];
    let mut factor = [1; 3];
    for a in 0..3 {
        if dims[a] == 0 || src[a] % dims[a] != 0 {
            return Err(Error::Shape(format!("cannot downsample {src:?} to {dims:?}")));
        }
        factor[a] = src[a] / dims[a];
    }
    if factor == [1, 1, 1] {
        return Ok(labels.clone());
    }
    Ok(Array3::from_shape_fn((dims[0], dims[1], dims[2]), |(i, j, k)| {
        labels[[i * factor[0], j * factor[1], k * factor[2]]]
    }))
}

/// Deep supervision: per-level losses against downsampled targets, combined
/// with `cfg.ds_weights`. Returns the aggregate and per-sample, per-level
/// gradients; `soft_dice` refers to the full-resolution level.
#[derive(Debug, Clone, PartialEq)]
pub struct DeepSupervisionOutput {
    pub total: f64,
    pub level_losses: Vec<f64>,
    pub full_resolution: LossOutput,
    pub grads: Vec<LogitsPyramid>,
}

pub fn deep_supervision_loss(
    pyramids: &[LogitsPyramid],
    targets: &[&Array3<u8>],
    cfg: &LossConfig,
) -> Result<DeepSupervisionOutput> {
    let levels = pyramids.first().map_or(0, Vec::len);
    if pyramids.iter().any(|p| p.len() != levels) || cfg.ds_weights.len() != levels {
        return Err(Error::Shape(format!(
            "{} deep-supervision weights for pyramids of {levels} levels",
            cfg.ds_weights.len()
        )));
    }
    let mut grads: Vec<LogitsPyramid> = vec![Vec::with_capacity(levels); pyramids.len()];
    let mut total = 0.0;
    let mut level_losses = Vec::with_capacity(levels);
    let mut full_resolution = None;
    for level in 0..levels {
        let logits: Vec<Feature> = pyramids.iter().map(|p| p[level].clone()).collect();
        let down: Vec<Array3<u8>> = targets
            .iter()
            .zip(&logits)
            .map(|(t, l)| downsample_labels(t, l.dims))
            .collect::<Result<_>>()?;
        let refs: Vec<&Array3<u8>> = down.iter().collect();
        let out = dice_ce_loss(&logits, &refs, cfg)?;
        let w = cfg.ds_weights[level];
        total += w * out.total;
        level_losses.push(out.total);
        for (sample, g) in out.grads.iter().enumerate() {
            grads[sample].push(g.scaled(w));
        }
        if level == 0 {
            full_resolution = Some(out);
        }
    }
    Ok(DeepSupervisionOutput {
        total,
        level_losses,
        full_resolution: full_resolution.ok_or_else(|| Error::Shape("empty pyramid".into()))?,
        grads,
    })
}
