//! Patch-based training loop with per-epoch poly learning rate.

use std::path::Path;
use std::time::Instant;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::loss::{deep_supervision_loss, LossConfig};
use super::sgd::{poly_lr, sgd_step, OptimizerState};
use crate::error::{DivergenceSnapshot, Error, Result};
use crate::model::Model;
use crate::params::Gradients;
use crate::tensor::Feature;
use crate::volume::patch::{CaseSampler, PatchSource, DEFAULT_FG_BIAS};
use crate::volume::{Mask, Volume};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub epochs: usize,
    #[serde(default = "default_iterations")]
    pub iterations_per_epoch: usize,
    #[serde(default = "default_batch")]
    pub batch_size: usize,
    #[serde(default = "default_patch")]
    pub patch: [usize; 3],
    #[serde(default = "default_fg_bias")]
    pub fg_bias: f64,
    /// Deep-supervision and Dice settings; geometric weights over the
    /// network's pyramid when absent.
    #[serde(default)]
    pub loss: Option<LossConfig>,
    #[serde(default)]
    pub seed: u64,
}

fn default_iterations() -> usize {
    10
}
fn default_batch() -> usize {
    2
}
fn default_patch() -> [usize; 3] {
    [16, 32, 32]
}
fn default_fg_bias() -> f64 {
    DEFAULT_FG_BIAS
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 10,
            iterations_per_epoch: default_iterations(),
            batch_size: default_batch(),
            patch: default_patch(),
            fg_bias: default_fg_bias(),
            loss: None,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be at least 1".into()));
        }
        if self.iterations_per_epoch == 0 {
            return Err(Error::Config("iterations_per_epoch must be at least 1".into()));
        }
        if !(0.0..=1.0).contains(&self.fg_bias) {
            return Err(Error::Config("fg_bias must be a probability".into()));
        }
        if let Some(l) = &self.loss {
            l.validate()?;
        }
        Ok(())
    }
}

/// Training cases plus the rule for drawing them.
#[derive(Debug, Clone)]
pub struct TrainData<'a> {
    pub cases: Vec<(&'a Volume, &'a Mask)>,
    pub sampler: CaseSampler,
}

impl<'a> TrainData<'a> {
    /// Every case drawn uniformly.
    pub fn uniform(cases: Vec<(&'a Volume, &'a Mask)>) -> Self {
        let n = cases.len();
        TrainData {
            cases,
            sampler: CaseSampler::single(n),
        }
    }

    /// Tasks drawn uniformly, then cases uniformly within the task.
    pub fn by_task(cases: Vec<(&'a Volume, &'a Mask)>) -> Self {
        let mut names: Vec<&str> = cases.iter().map(|(v, _)| v.source_task.as_str()).collect();
        names.sort_unstable();
        names.dedup();
        let tasks = names
            .iter()
            .map(|t| {
                cases
                    .iter()
                    .enumerate()
                    .filter(|(_, (v, _))| v.source_task == *t)
                    .map(|(i, _)| i)
                    .collect()
            })
            .collect();
        TrainData {
            cases,
            sampler: CaseSampler::new(tasks),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub lr: f64,
    pub train_loss: f64,
    pub seconds_per_epoch: f64,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainLog {
    pub records: Vec<EpochRecord>,
}

impl TrainLog {
    pub fn total_seconds(&self) -> f64 {
        self.records.iter().map(|r| r.seconds_per_epoch).sum()
    }

    pub fn last_loss(&self) -> Option<f64> {
        self.records.last().map(|r| r.train_loss)
    }

    pub fn write_csv(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let mut w = csv::Writer::from_path(path).map_err(|e| csv_err(path, e))?;
        for r in &self.records {
            w.serialize(r).map_err(|e| csv_err(path, e))?;
        }
        w.flush().map_err(|e| Error::io(path, e))
    }

    pub fn read_csv(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let mut r = csv::Reader::from_path(path).map_err(|e| csv_err(path, e))?;
        let records = r
            .deserialize()
            .collect::<std::result::Result<Vec<EpochRecord>, _>>()
            .map_err(|e| csv_err(path, e))?;
        Ok(TrainLog { records })
    }
}

pub(crate) fn csv_err(path: &Path, e: csv::Error) -> Error {
    Error::format(path, e.to_string())
}

/// Run `cfg.epochs` epochs starting at `start_epoch`. Each epoch uses
/// `poly_lr(epoch)` for all of its iterations; each iteration draws
/// `batch_size` patches and applies one optimizer step on the mean loss.
///
/// Returns the per-epoch log. A non-finite loss aborts with a
/// [`Error::Divergence`] snapshot and leaves the parameters as they were
/// before the failing step.
pub fn train_loop(
    model: &mut Model,
    state: &mut OptimizerState,
    data: &TrainData<'_>,
    cfg: &TrainConfig,
    start_epoch: usize,
) -> Result<TrainLog> {
    cfg.validate()?;
    let mut log = TrainLog::default();
    if cfg.epochs == 0 {
        return Ok(log);
    }
    if data.cases.is_empty() {
        return Err(Error::Config("no training cases".into()));
    }
    model.spec.check_patch(cfg.patch)?;
    let loss_cfg = match &cfg.loss {
        Some(l) => l.clone(),
        None => LossConfig::geometric(model.spec.pyramid_len()),
    };
    loss_cfg.validate()?;
    if !model.params.iter().any(|(_, p)| !p.frozen) {
        return Err(Error::Config("every parameter is frozen; nothing to train".into()));
    }
    let sources: Vec<PatchSource<'_>> = data.cases.iter().map(|(v, m)| PatchSource::new(v, m)).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut last_finite = None;
    let mut sampler = data.sampler.clone();

    for epoch in start_epoch..start_epoch + cfg.epochs {
        let lr = poly_lr(epoch, &state.config)?;
        let t0 = Instant::now();
        let mut loss_sum = 0.0;
        for iteration in 0..cfg.iterations_per_epoch {
            let mut inputs = Vec::with_capacity(cfg.batch_size);
            let mut targets = Vec::with_capacity(cfg.batch_size);
            for _ in 0..cfg.batch_size {
                let (_, c) = sampler.draw(&mut rng);
                let p = sources[c].sample(cfg.patch, &mut rng, cfg.fg_bias);
                inputs.push(Feature::from_volume(&p.volume_crop));
                targets.push(p.mask_crop);
            }
            let mut pyramids = Vec::with_capacity(inputs.len());
            let mut caches = Vec::with_capacity(inputs.len());
            for x in &inputs {
                let (l, c) = model.forward(x)?;
                pyramids.push(l);
                caches.push(c);
            }
            let refs: Vec<_> = targets.iter().collect();
            let out = deep_supervision_loss(&pyramids, &refs, &loss_cfg)?;
            if !out.total.is_finite() {
                return Err(Error::Divergence(Box::new(DivergenceSnapshot {
                    epoch,
                    iteration,
                    lr,
                    loss: out.total,
                    last_finite_loss: last_finite,
                    max_abs_param: model.params.max_abs(),
                })));
            }
            last_finite = Some(out.total);
            loss_sum += out.total;
            let mut grads = Gradients::new();
            for (cache, g) in caches.iter().zip(&out.grads) {
                model.backward(cache, g, &mut grads)?;
            }
            sgd_step(&mut model.params, &grads, lr, state)?;
        }
        let record = EpochRecord {
            epoch,
            lr,
            train_loss: loss_sum / cfg.iterations_per_epoch as f64,
            seconds_per_epoch: t0.elapsed().as_secs_f64(),
        };
        log::info!(
            "epoch {} lr {:.6} train_loss {:.5} ({:.2}s)",
            record.epoch,
            record.lr,
            record.train_loss,
            record.seconds_per_epoch
        );
        log.records.push(record);
    }
    Ok(log)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::backbone::NetworkSpec;
    use crate::optimization::sgd::OptimizerConfig;
    use ndarray::Array3;

    fn tiny_spec() -> NetworkSpec {
        NetworkSpec {
            channels_per_stage: vec![2, 4],
            strides_per_stage: vec![[1, 1, 1], [2, 2, 2]],
            ..NetworkSpec::desk()
        }
    }

    fn case() -> (Volume, Mask) {
        let labels = Array3::from_shape_fn((4, 4, 4), |(z, y, x)| u8::from(z < 2 && y < 2 && x < 2));
        let data = labels.mapv(|l| if l == 1 { 1.0f32 } else { -1.0 });
        (Volume::new(data, [1.0; 3], "c0", "t").unwrap(), Mask::new(labels, 2).unwrap())
    }

    fn state(epoch_max: usize) -> OptimizerState {
        OptimizerState::new(OptimizerConfig {
            epoch_max,
            ..OptimizerConfig::default()
        })
        .unwrap()
    }

    #[test]
    fn zero_epochs_is_a_no_op() {
        let mut model = Model::unet(tiny_spec(), 1).unwrap();
        let before = model.params.clone();
        let (v, m) = case();
        let data = TrainData::uniform(vec![(&v, &m)]);
        let cfg = TrainConfig {
            epochs: 0,
            patch: [4, 4, 4],
            ..TrainConfig::default()
        };
        let log = train_loop(&mut model, &mut state(10), &data, &cfg, 0).unwrap();
        assert!(log.records.is_empty());
        assert_eq!(model.params, before);
    }

    #[test]
    fn lr_column_is_the_poly_trace_and_csv_round_trips() {
        let mut model = Model::unet(tiny_spec(), 1).unwrap();
        let (v, m) = case();
        let data = TrainData::uniform(vec![(&v, &m)]);
        let cfg = TrainConfig {
            epochs: 3,
            iterations_per_epoch: 1,
            batch_size: 1,
            patch: [4, 4, 4],
            ..TrainConfig::default()
        };
        let mut st = state(5);
        let log = train_loop(&mut model, &mut st, &data, &cfg, 1).unwrap();
        let epochs: Vec<usize> = log.records.iter().map(|r| r.epoch).collect();
        assert_eq!(epochs, vec![1, 2, 3]);
        for r in &log.records {
            assert_eq!(r.lr, poly_lr(r.epoch, &st.config).unwrap());
        }
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("log.csv");
        log.write_csv(&p).unwrap();
        let text = std::fs::read_to_string(&p).unwrap();
        assert!(text.starts_with("epoch,lr,train_loss,seconds_per_epoch"));
        assert_eq!(TrainLog::read_csv(&p).unwrap(), log);
    }

    #[test]
    fn same_seed_same_parameters() {
        let (v, m) = case();
        let data = TrainData::uniform(vec![(&v, &m)]);
        let cfg = TrainConfig {
            epochs: 2,
            iterations_per_epoch: 2,
            patch: [4, 4, 4],
            seed: 3,
            ..TrainConfig::default()
        };
        let run = || {
            let mut model = Model::unet(tiny_spec(), 1).unwrap();
            train_loop(&mut model, &mut state(10), &data, &cfg, 0).unwrap();
            model.params
        };
        assert_eq!(run(), run());
    }

    #[test]
    fn non_finite_input_reports_divergence() {
        let (mut v, m) = case();
        v.data[[0, 0, 0]] = f32::NAN;
        let mut model = Model::unet(tiny_spec(), 1).unwrap();
        let data = TrainData::uniform(vec![(&v, &m)]);
        let cfg = TrainConfig {
            epochs: 1,
            iterations_per_epoch: 1,
            patch: [4, 4, 4],
            ..TrainConfig::default()
        };
        match train_loop(&mut model, &mut state(10), &data, &cfg, 0) {
            Err(Error::Divergence(s)) => {
                assert_eq!((s.epoch, s.iteration), (0, 0));
                assert!(s.last_finite_loss.is_none());
            }
            other => panic!("expected divergence, got {other:?}"),
        }
    }

    #[test]
    fn frozen_parameters_stay_bitwise_identical() {
        let mut model = Model::unet(tiny_spec(), 2).unwrap();
        model.params.set_frozen("encoder", true);
        let before: Vec<Vec<f64>> = model.params.subtree("encoder").map(|(_, p)| p.data.clone()).collect();
        let (v, m) = case();
        let data = TrainData::uniform(vec![(&v, &m)]);
        let cfg = TrainConfig {
            epochs: 2,
            iterations_per_epoch: 2,
            patch: [4, 4, 4],
            ..TrainConfig::default()
        };
        train_loop(&mut model, &mut state(10), &data, &cfg, 0).unwrap();
        let after: Vec<Vec<f64>> = model.params.subtree("encoder").map(|(_, p)| p.data.clone()).collect();
        assert_eq!(before, after);
    }
}
