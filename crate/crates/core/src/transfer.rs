//! Pre-training on source lesion tasks and the transfer strategies that
//! initialize and freeze a target network from such a checkpoint.

use std::collections::BTreeMap;
use std::path::PathBuf;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::backbone::{NetworkSpec, ENCODER};
use crate::checkpoint::{Checkpoint, CheckpointMeta};
use crate::error::{Error, Result};
use crate::fusion::{ADAPTED, DEFAULT_REDUCTION};
use crate::inference::{argmax_labels, predict_volume, DEFAULT_OVERLAP};
use crate::metrics::{dsc, soft_dice};
use crate::model::{Architecture, Model};
use crate::optimization::{train_loop, OptimizerConfig, OptimizerState, TrainConfig, TrainData, TrainLog};
use crate::params::ParamStore;
use crate::volume::{load_case, preprocess, IntensityStats, Mask, Volume};

pub const MULTI_LESION_TAG: &str = "multi_lesion";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StrategyKind {
    FromScratch,
    Continual,
    BodyFinetune,
    FrozenEncoder,
    Hybrid,
}

impl StrategyKind {
    pub const ALL: [StrategyKind; 5] = [
        StrategyKind::FromScratch,
        StrategyKind::Continual,
        StrategyKind::BodyFinetune,
        StrategyKind::FrozenEncoder,
        StrategyKind::Hybrid,
    ];

    /// Short command-line name.
    pub fn short_name(self) -> &'static str {
        match self {
            StrategyKind::FromScratch => "scratch",
            StrategyKind::Continual => "continual",
            StrategyKind::BodyFinetune => "body",
            StrategyKind::FrozenEncoder => "frozen",
            StrategyKind::Hybrid => "hybrid",
        }
    }

    pub fn from_short_name(name: &str) -> Result<Self> {
        StrategyKind::ALL
            .into_iter()
            .find(|k| k.short_name() == name)
            .ok_or_else(|| Error::Config(format!("unknown strategy {name:?}")))
    }

    pub fn needs_source(self) -> bool {
        self != StrategyKind::FromScratch
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StrategyConfig {
    pub kind: StrategyKind,
    #[serde(default)]
    pub source_checkpoint: Option<PathBuf>,
    #[serde(default)]
    pub seed: u64,
    /// Fusion reduction ratio for the dual-encoder network.
    #[serde(default = "default_reduction")]
    pub reduction: usize,
}

fn default_reduction() -> usize {
    DEFAULT_REDUCTION
}

impl StrategyConfig {
    pub fn new(kind: StrategyKind, source_checkpoint: Option<PathBuf>, seed: u64) -> Self {
        StrategyConfig {
            kind,
            source_checkpoint,
            seed,
            reduction: DEFAULT_REDUCTION,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.kind.needs_source() && self.source_checkpoint.is_none() {
            return Err(Error::Config(format!(
                "strategy {} requires a source checkpoint",
                self.kind.short_name()
            )));
        }
        Ok(())
    }
}

/// A network ready for target training: initialized, freeze mask applied,
/// with the epoch to start from and the optimizer state to continue.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainableSetup {
    pub kind: StrategyKind,
    pub model: Model,
    pub start_epoch: usize,
    pub optimizer: OptimizerState,
    pub source: Option<CheckpointMeta>,
}

impl TrainableSetup {
    pub fn trainable_fraction(&self) -> f64 {
        trainable_fraction(&self.model.params)
    }
}

pub fn trainable_fraction(params: &ParamStore) -> f64 {
    params.trainable_scalar_count() as f64 / params.scalar_count() as f64
}

fn check_source(ck: &Checkpoint, spec: &NetworkSpec) -> Result<()> {
    if ck.model.arch != Architecture::Unet {
        return Err(Error::SpecMismatch("source checkpoint must hold a single-encoder network".into()));
    }
    if &ck.model.spec != spec {
        return Err(Error::SpecMismatch(format!(
            "source spec {:?} differs from target spec {:?}",
            ck.model.spec, spec
        )));
    }
    Ok(())
}

/// Load the configured checkpoint (if any) and build the setup.
pub fn apply_strategy(cfg: &StrategyConfig, spec: &NetworkSpec, optimizer: &OptimizerConfig) -> Result<TrainableSetup> {
    cfg.validate()?;
    let source = match (&cfg.source_checkpoint, cfg.kind.needs_source()) {
        (Some(p), true) => Some(Checkpoint::load(p)?),
        _ => None,
    };
    apply_strategy_with(cfg, spec, optimizer, source.as_ref())
}

/// Build the setup from an in-memory source checkpoint.
///
/// `optimizer.epoch_max` is the target training budget. Under `continual`
/// the epoch counter starts at the checkpoint's epoch, the schedule horizon
/// grows by the target budget, and stored momentum buffers are restored;
/// every other strategy starts at epoch 0 with empty buffers.
pub fn apply_strategy_with(
    cfg: &StrategyConfig,
    spec: &NetworkSpec,
    optimizer: &OptimizerConfig,
    source: Option<&Checkpoint>,
) -> Result<TrainableSetup> {
    spec.validate()?;
    optimizer.validate()?;
    let kind = cfg.kind;
    let source = match (kind.needs_source(), source) {
        (true, None) => {
            return Err(Error::MissingCheckpoint(format!(
                "strategy {} needs a source checkpoint",
                kind.short_name()
            )))
        }
        (true, Some(ck)) => {
            check_source(ck, spec)?;
            Some(ck)
        }
        (false, _) => None,
    };
    let mut start_epoch = 0;
    let mut state = OptimizerState::new(optimizer.clone())?;
    let model = match (kind, source) {
        (StrategyKind::FromScratch, _) => Model::unet(spec.clone(), cfg.seed)?,
        (StrategyKind::Continual, Some(ck)) => {
            let mut m = ck.model.clone();
            m.params.set_frozen("", false);
            start_epoch = ck.epoch;
            state.config.epoch_max = ck.epoch + optimizer.epoch_max;
            if let Some(o) = &ck.optimizer {
                state.velocity = o.velocity.clone();
            }
            m
        }
        (StrategyKind::BodyFinetune, Some(ck)) => {
            let mut m = ck.model.clone();
            m.params.set_frozen("", false);
            m
        }
        (StrategyKind::FrozenEncoder, Some(ck)) => {
            let mut m = Model::unet(spec.clone(), cfg.seed)?;
            m.params.copy_subtree(&ck.model.params, ENCODER, ENCODER)?;
            m.params.set_frozen(ENCODER, true);
            m
        }
        (StrategyKind::Hybrid, Some(ck)) => {
            let mut m = Model::hybrid(spec.clone(), cfg.reduction, cfg.seed)?;
            m.params.copy_subtree(&ck.model.params, ENCODER, ADAPTED)?;
            m.params.set_frozen(ADAPTED, true);
            m
        }
        (_, None) => unreachable!("source presence checked above"),
    };
    Ok(TrainableSetup {
        kind,
        model,
        start_epoch,
        optimizer: state,
        source: source.map(|ck| ck.meta.clone()),
    })
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct FreezeReport {
    pub checked: usize,
    pub violations: Vec<String>,
}

impl FreezeReport {
    pub fn passed(&self) -> bool {
        self.violations.is_empty()
    }
}

/// Every parameter flagged frozen in `mask` must be bitwise identical in
/// `before` and `after`.
pub fn verify_frozen(before: &ParamStore, after: &ParamStore, mask: &BTreeMap<String, bool>) -> Result<FreezeReport> {
    let a: Vec<&String> = before.names().collect();
    let b: Vec<&String> = after.names().collect();
    if a != b {
        return Err(Error::SpecMismatch("parameter name sets differ".into()));
    }
    let mut report = FreezeReport::default();
    for (name, &frozen) in mask {
        if !frozen {
            continue;
        }
        let x = before.data(name)?;
        let y = after.data(name)?;
        report.checked += 1;
        if x.len() != y.len() || x.iter().zip(y).any(|(p, q)| p.to_bits() != q.to_bits()) {
            report.violations.push(name.clone());
        }
    }
    Ok(report)
}

/// A source task: an id plus its case files.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PretrainTask {
    pub task_id: String,
    pub cases: Vec<PathBuf>,
}

/// A source task held in memory, labels already merged to binary.
#[derive(Debug, Clone, PartialEq)]
pub struct LoadedTask {
    pub task_id: String,
    pub cases: Vec<(Volume, Mask)>,
}

impl LoadedTask {
    /// Tag every case with the task and merge labels to one lesion class.
    pub fn new(task_id: impl Into<String>, cases: Vec<(Volume, Mask)>) -> Result<Self> {
        let task_id = task_id.into();
        if cases.is_empty() {
            return Err(Error::Config(format!("task {task_id} has no cases")));
        }
        let cases = cases
            .into_iter()
            .map(|(mut v, m)| {
                m.check_aligned(&v)?;
                v.source_task.clone_from(&task_id);
                Ok((v, Mask::binary(m.labels)))
            })
            .collect::<Result<_>>()?;
        Ok(LoadedTask { task_id, cases })
    }
}

impl PretrainTask {
    pub fn load(&self) -> Result<LoadedTask> {
        let cases = self.cases.iter().map(load_case).collect::<Result<Vec<_>>>()?;
        LoadedTask::new(self.task_id.clone(), cases)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PretrainConfig {
    pub train: TrainConfig,
    pub optimizer: OptimizerConfig,
    #[serde(default = "default_val_fraction")]
    pub validation_fraction: f64,
    #[serde(default = "default_overlap")]
    pub overlap: f64,
}

fn default_val_fraction() -> f64 {
    0.2
}
fn default_overlap() -> f64 {
    DEFAULT_OVERLAP
}

#[derive(Debug, Clone, PartialEq)]
pub struct PretrainOutcome {
    pub checkpoint: Checkpoint,
    pub log: TrainLog,
    pub train_ids: Vec<String>,
    pub validation_ids: Vec<String>,
}

/// Intensity statistics fitted on `cases`, then every case standardized.
pub fn fit_and_preprocess(cases: &[(Volume, Mask)]) -> Result<(IntensityStats, Vec<(Volume, Mask)>)> {
    let refs: Vec<(&Volume, &Mask)> = cases.iter().map(|(v, m)| (v, m)).collect();
    let stats = IntensityStats::fit(&refs)?;
    let out = cases
        .iter()
        .map(|(v, m)| Ok((preprocess(v, &stats)?, m.clone())))
        .collect::<Result<_>>()?;
    Ok((stats, out))
}

/// Mean soft Dice and mean hard DSC of full-volume predictions.
pub fn validate_model(model: &Model, cases: &[(Volume, Mask)], patch: [usize; 3], overlap: f64) -> Result<(f64, f64)> {
    if cases.is_empty() {
        return Err(Error::Config("no validation cases".into()));
    }
    let (mut soft, mut hard) = (0.0, 0.0);
    for (v, m) in cases {
        let probs = predict_volume(model, &v.data, patch, overlap)?;
        soft += soft_dice(&probs, &m.labels)?;
        hard += dsc(&m.labels, &argmax_labels(&probs))?;
    }
    let n = cases.len() as f64;
    Ok((soft / n, hard / n))
}

fn pretrain(
    tasks: &[LoadedTask],
    spec: &NetworkSpec,
    cfg: &PretrainConfig,
    seed: u64,
    tag: &str,
) -> Result<PretrainOutcome> {
    if !(0.0..1.0).contains(&cfg.validation_fraction) {
        return Err(Error::Config("validation_fraction must lie in [0, 1)".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut train_raw = Vec::new();
    let mut val_raw = Vec::new();
    for task in tasks {
        let mut idx: Vec<usize> = (0..task.cases.len()).collect();
        idx.shuffle(&mut rng);
        let n = idx.len();
        let n_val = if n >= 2 {
            ((n as f64 * cfg.validation_fraction).round() as usize).clamp(usize::from(cfg.validation_fraction > 0.0), n - 1)
        } else {
            0
        };
        for (j, &i) in idx.iter().enumerate() {
            let c = task.cases[i].clone();
            if j < n_val {
                val_raw.push(c);
            } else {
                train_raw.push(c);
            }
        }
    }
    let train_ids = train_raw.iter().map(|(v, _)| v.case_id.clone()).collect();
    let validation_ids = val_raw.iter().map(|(v, _)| v.case_id.clone()).collect();
    let (stats, train) = fit_and_preprocess(&train_raw)?;
    let val: Vec<(Volume, Mask)> = val_raw
        .iter()
        .map(|(v, m)| Ok((preprocess(v, &stats)?, m.clone())))
        .collect::<Result<_>>()?;

    let mut model = Model::unet(spec.clone(), seed)?;
    let mut state = OptimizerState::new(cfg.optimizer.clone())?;
    let data = TrainData::by_task(train.iter().map(|(v, m)| (v, m)).collect());
    let mut train_cfg = cfg.train.clone();
    train_cfg.seed = seed;
    let log = train_loop(&mut model, &mut state, &data, &train_cfg, 0)?;
    let (soft, hard) = if val.is_empty() {
        (None, None)
    } else {
        let (s, h) = validate_model(&model, &val, cfg.train.patch, cfg.overlap)?;
        (Some(s), Some(h))
    };
    log::info!(
        "pre-trained {tag}: {} train / {} validation cases, validation soft Dice {:?}",
        train.len(),
        val.len(),
        soft
    );
    Ok(PretrainOutcome {
        checkpoint: Checkpoint {
            model,
            epoch: cfg.train.epochs,
            meta: CheckpointMeta {
                tag: tag.to_string(),
                source_tasks: tasks.iter().map(|t| t.task_id.clone()).collect(),
                validation_dsc: hard,
                validation_soft_dice: soft,
                intensity: Some(stats),
            },
            optimizer: Some(state),
        },
        log,
        train_ids,
        validation_ids,
    })
}

/// Train a single-encoder network from scratch on one task with an 80/20
/// train/validation split.
pub fn pretrain_single(task: &LoadedTask, spec: &NetworkSpec, cfg: &PretrainConfig, seed: u64) -> Result<PretrainOutcome> {
    pretrain(std::slice::from_ref(task), spec, cfg, seed, &task.task_id)
}

/// One network on the union of several tasks, labels merged, batches drawn
/// uniformly over tasks.
pub fn pretrain_multi(tasks: &[LoadedTask], spec: &NetworkSpec, cfg: &PretrainConfig, seed: u64) -> Result<PretrainOutcome> {
    if tasks.len() < 2 {
        return Err(Error::Config("multi-lesion pre-training needs at least two tasks".into()));
    }
    pretrain(tasks, spec, cfg, seed, MULTI_LESION_TAG)
}

/// Train a prepared setup on target cases (standardized with statistics fit
/// on those cases) for `train.epochs` epochs from the setup's start epoch.
pub fn train_target(
    setup: &mut TrainableSetup,
    cases: &[(Volume, Mask)],
    train: &TrainConfig,
) -> Result<(TrainLog, IntensityStats)> {
    let (stats, prepared) = fit_and_preprocess(cases)?;
    let data = TrainData::uniform(prepared.iter().map(|(v, m)| (v, m)).collect());
    let log = train_loop(&mut setup.model, &mut setup.optimizer, &data, train, setup.start_epoch)?;
    Ok((log, stats))
}
