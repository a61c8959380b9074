//! Pre-training, transfer, evaluation and synthetic-data commands.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::config::{ExperimentConfig, TaskSource};
use crate::checkpoint::{Checkpoint, CheckpointMeta};
use crate::error::{Error, Result};
use crate::inference::{argmax_labels, predict_volume};
use crate::metrics::{aggregate, evaluate_case, write_case_csv, CaseMetrics, FoldSummary};
use crate::optimization::TrainLog;
use crate::transfer::{
    apply_strategy_with, pretrain_multi, pretrain_single, train_target, verify_frozen, FreezeReport, LoadedTask,
    PretrainConfig, PretrainOutcome, StrategyConfig, StrategyKind,
};
use crate::volume::io::list_cases;
use crate::volume::synthetic::gen_cohort;
use crate::volume::{load_case, make_split, preprocess, save_case, Mask, SplitPlan, Volume};

pub(crate) fn ensure_dir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))
}

pub(crate) fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    if let Some(parent) = path.parent() {
        ensure_dir(parent)?;
    }
    let text = serde_json::to_string_pretty(value).expect("value serializes");
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

pub(crate) fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    serde_json::from_str(&text).map_err(|e| Error::format(path, e.to_string()))
}

pub fn sha256_file(path: &Path) -> Result<String> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    Ok(hex::encode(Sha256::digest(&bytes)))
}

/// Load every case under a task's data root, merged to one lesion class.
pub fn load_task(source: &TaskSource) -> Result<LoadedTask> {
    if !source.data_root.is_dir() {
        let reason = format!("data root of task {} does not exist", source.task_id);
        return Err(Error::io(&source.data_root, std::io::Error::new(std::io::ErrorKind::NotFound, reason)));
    }
    let paths = list_cases(&source.data_root)?;
    let cases = paths.iter().map(load_case).collect::<Result<Vec<_>>>()?;
    LoadedTask::new(source.task_id.clone(), cases)
}

/// Write `cases_per_family` cases of every configured family to
/// `out/<family>/<case_id>.lsgcase`. Returns the family directories.
pub fn cmd_make_synthetic(cfg: &ExperimentConfig, out: &Path) -> Result<Vec<PathBuf>> {
    let syn = cfg
        .synthetic
        .as_ref()
        .ok_or_else(|| Error::Config("no synthetic section in the config".into()))?;
    let mut dirs = Vec::new();
    for (i, fam) in syn.families.iter().enumerate() {
        let family = fam.resolve(syn.dims)?;
        let dir = out.join(&family.name);
        ensure_dir(&dir)?;
        let seed = syn.seed.wrapping_add(1_000_003 * i as u64);
        for (v, m) in gen_cohort(&family, syn.cases_per_family, seed)? {
            save_case(dir.join(format!("{}.lsgcase", v.case_id)), &v, &m)?;
        }
        log::info!("wrote {} {} cases to {}", syn.cases_per_family, family.name, dir.display());
        dirs.push(dir);
    }
    Ok(dirs)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub tag: String,
    pub path: PathBuf,
    pub sha256: String,
    pub source_tasks: Vec<String>,
    pub seed: u64,
    pub epochs: usize,
    pub validation_dsc: Option<f64>,
    pub validation_soft_dice: Option<f64>,
    pub train_ids: Vec<String>,
    pub validation_ids: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PretrainManifest {
    pub seed: u64,
    pub checkpoints: Vec<ManifestEntry>,
}

impl PretrainManifest {
    pub fn entry(&self, tag: &str) -> Option<&ManifestEntry> {
        self.checkpoints.iter().find(|e| e.tag == tag)
    }
}

fn pretrain_config(cfg: &ExperimentConfig, seed: u64) -> PretrainConfig {
    let mut train = cfg.pretrain.clone();
    train.seed = seed;
    PretrainConfig {
        optimizer: cfg.phase_optimizer(train.epochs),
        train,
        validation_fraction: cfg.validation_fraction,
        overlap: cfg.overlap,
    }
}

/// One checkpoint per source task plus the pooled multi-lesion checkpoint
/// when there are at least two tasks, all under `checkpoints/`, with a
/// `manifest.json` listing hashes and validation scores.
pub fn cmd_pretrain(cfg: &ExperimentConfig, seed: u64) -> Result<PretrainManifest> {
    if cfg.sources.is_empty() {
        return Err(Error::Config("no source tasks configured".into()));
    }
    let tasks = cfg.sources.iter().map(load_task).collect::<Result<Vec<_>>>()?;
    let pcfg = pretrain_config(cfg, seed);
    let dir = cfg.checkpoint_dir();
    ensure_dir(&dir)?;
    let mut outcomes: Vec<PretrainOutcome> = Vec::new();
    for task in &tasks {
        outcomes.push(pretrain_single(task, &cfg.spec, &pcfg, seed)?);
    }
    if tasks.len() >= 2 {
        outcomes.push(pretrain_multi(&tasks, &cfg.spec, &pcfg, seed)?);
    }
    let mut checkpoints = Vec::new();
    for o in outcomes {
        let meta = &o.checkpoint.meta;
        let path = cfg.checkpoint_path(&meta.tag);
        o.checkpoint.save(&path)?;
        o.log.write_csv(dir.join(format!("{}_train_log.csv", meta.tag)))?;
        checkpoints.push(ManifestEntry {
            tag: meta.tag.clone(),
            sha256: sha256_file(&path)?,
            path,
            source_tasks: meta.source_tasks.clone(),
            seed,
            epochs: o.checkpoint.epoch,
            validation_dsc: meta.validation_dsc,
            validation_soft_dice: meta.validation_soft_dice,
            train_ids: o.train_ids,
            validation_ids: o.validation_ids,
        });
    }
    let manifest = PretrainManifest { seed, checkpoints };
    write_json(&dir.join("manifest.json"), &manifest)?;
    Ok(manifest)
}

/// The split of the target task, created on first use and reused after.
pub fn target_split(cfg: &ExperimentConfig, target: &LoadedTask) -> Result<SplitPlan> {
    let mut ids: Vec<String> = target.cases.iter().map(|(v, _)| v.case_id.clone()).collect();
    ids.sort();
    let plan = make_split(&ids, cfg.folds, cfg.split_seed, cfg.train_fraction)?;
    let path = cfg.output_dir.join("split.json");
    if path.exists() {
        let stored = SplitPlan::load(&path)?;
        if stored != plan {
            return Err(Error::Config(format!(
                "{} was made from a different case list or split settings",
                path.display()
            )));
        }
    } else {
        ensure_dir(&cfg.output_dir)?;
        plan.save(&path)?;
    }
    Ok(plan)
}

pub(crate) fn select(task: &LoadedTask, ids: &[String]) -> Result<Vec<(Volume, Mask)>> {
    ids.iter()
        .map(|id| {
            task.cases
                .iter()
                .find(|(v, _)| &v.case_id == id)
                .cloned()
                .ok_or_else(|| Error::Config(format!("case {id} not found in task {}", task.task_id)))
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq)]
pub struct TransferOutcome {
    pub model_path: PathBuf,
    pub log_path: PathBuf,
    pub log: TrainLog,
    pub freeze: FreezeReport,
    pub trainable_fraction: f64,
    pub test_ids: Vec<String>,
}

impl TransferOutcome {
    pub fn mean_seconds_per_epoch(&self) -> f64 {
        let n = self.log.records.len().max(1) as f64;
        self.log.total_seconds() / n
    }
}

/// Train one strategy on the training cases of `fold` of the target task.
/// Writes `model.lsgckpt`, `train_log.csv` and `freeze.json` to `run_dir`.
/// `from_scratch` ignores `source`.
pub fn cmd_transfer(
    cfg: &ExperimentConfig,
    kind: StrategyKind,
    source: Option<&Path>,
    fold: usize,
    seed: u64,
    run_dir: &Path,
) -> Result<TransferOutcome> {
    let target = load_task(cfg.target()?)?;
    let plan = target_split(cfg, &target)?;
    let ck = match (kind.needs_source(), source) {
        (true, Some(p)) => Some(Checkpoint::load(p)?),
        (true, None) => {
            return Err(Error::MissingCheckpoint(format!("strategy {} needs --source", kind.short_name())))
        }
        (false, _) => None,
    };
    run_transfer(cfg, &target, &plan, kind, ck.as_ref(), fold, seed, run_dir)
}

#[allow(clippy::too_many_arguments)]
pub(crate) fn run_transfer(
    cfg: &ExperimentConfig,
    target: &LoadedTask,
    plan: &SplitPlan,
    kind: StrategyKind,
    source: Option<&Checkpoint>,
    fold: usize,
    seed: u64,
    run_dir: &Path,
) -> Result<TransferOutcome> {
    let fold_plan = plan.fold(fold)?;
    let train_cases = select(target, &fold_plan.train)?;
    let scfg = StrategyConfig {
        reduction: cfg.reduction,
        ..StrategyConfig::new(kind, None, seed)
    };
    let source = if kind.needs_source() { source } else { None };
    let mut setup = apply_strategy_with(&scfg, &cfg.spec, &cfg.phase_optimizer(cfg.transfer.epochs), source)?;
    let before = setup.model.params.clone();
    let mask = before.freeze_flags();
    let mut train = cfg.transfer.clone();
    train.seed = seed;
    let (log, stats) = train_target(&mut setup, &train_cases, &train)?;
    let freeze = verify_frozen(&before, &setup.model.params, &mask)?;
    if !freeze.passed() {
        log::error!("frozen parameters changed: {:?}", freeze.violations);
    }

    ensure_dir(run_dir)?;
    let model_path = run_dir.join("model.lsgckpt");
    let log_path = run_dir.join("train_log.csv");
    let trainable_fraction = setup.trainable_fraction();
    Checkpoint {
        epoch: setup.start_epoch + train.epochs,
        meta: CheckpointMeta {
            tag: format!("{}:{}", kind.short_name(), setup.source.as_ref().map_or("none", |m| m.tag.as_str())),
            source_tasks: vec![target.task_id.clone()],
            intensity: Some(stats),
            ..CheckpointMeta::default()
        },
        model: setup.model,
        optimizer: Some(setup.optimizer),
    }
    .save(&model_path)?;
    log.write_csv(&log_path)?;
    write_json(&run_dir.join("freeze.json"), &freeze)?;
    Ok(TransferOutcome {
        model_path,
        log_path,
        log,
        freeze,
        trainable_fraction,
        test_ids: fold_plan.test.clone(),
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct EvalOutcome {
    pub cases: Vec<CaseMetrics>,
    pub summary: FoldSummary,
}

/// Per-case metrics of a trained model over `cases`, via sliding-window
/// inference on volumes standardized with the model's own statistics.
pub fn evaluate_model(ck: &Checkpoint, cases: &[(Volume, Mask)], cfg: &ExperimentConfig) -> Result<EvalOutcome> {
    let stats = ck
        .meta
        .intensity
        .as_ref()
        .ok_or_else(|| Error::Config("model checkpoint carries no intensity statistics".into()))?;
    let patch = cfg.transfer.patch;
    let mut out = Vec::with_capacity(cases.len());
    for (v, m) in cases {
        m.check_aligned(v)?;
        let x = preprocess(v, stats)?;
        let probs = predict_volume(&ck.model, &x.data, patch, cfg.overlap)?;
        let pred = argmax_labels(&probs);
        out.push(evaluate_case(&v.case_id, &m.labels, &pred, v.spacing, cfg.tau_mm)?);
    }
    let summary = aggregate(&out)?;
    Ok(EvalOutcome { cases: out, summary })
}

/// Evaluate a model file on case files; writes `cases.csv` and
/// `summary.json` to `out_dir`.
pub fn cmd_eval(model: &Path, case_paths: &[PathBuf], cfg: &ExperimentConfig, out_dir: &Path) -> Result<EvalOutcome> {
    let ck = Checkpoint::load(model)?;
    let cases = case_paths
        .iter()
        .map(|p| {
            let (v, m) = load_case(p)?;
            Ok((v, Mask::binary(m.labels)))
        })
        .collect::<Result<Vec<_>>>()?;
    let outcome = evaluate_model(&ck, &cases, cfg)?;
    ensure_dir(out_dir)?;
    write_case_csv(out_dir.join("cases.csv"), &outcome.cases)?;
    write_json(&out_dir.join("summary.json"), &outcome.summary)?;
    Ok(outcome)
}

/// Case files of the target task's test set for `fold`.
pub fn fold_test_paths(cfg: &ExperimentConfig, fold: usize) -> Result<Vec<PathBuf>> {
    let target = cfg.target()?;
    let task = load_task(target)?;
    let plan = target_split(cfg, &task)?;
    let test = &plan.fold(fold)?.test;
    let paths = list_cases(&target.data_root)?;
    let mut out = Vec::new();
    for p in paths {
        let (v, _) = load_case(&p)?;
        if test.contains(&v.case_id) {
            out.push(p);
        }
    }
    Ok(out)
}
