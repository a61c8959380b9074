//! Strategy × source × fold grid with cached cells and tabular reports.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::commands::{ensure_dir, evaluate_model, load_task, read_json, run_transfer, select, target_split, write_json};
use super::config::ExperimentConfig;
use crate::checkpoint::Checkpoint;
use crate::error::{Error, Result};
use crate::metrics::{write_case_csv, FoldSummary, METRIC_NAMES};
use crate::transfer::{LoadedTask, StrategyKind};
use crate::volume::SplitPlan;

const NO_SOURCE: &str = "none";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CellStatus {
    Ok,
    Failed,
}

/// The stored outcome of one grid cell.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CellResult {
    pub strategy: StrategyKind,
    pub source: String,
    pub fold: usize,
    pub seed: u64,
    pub status: CellStatus,
    #[serde(default)]
    pub error: Option<String>,
    #[serde(default)]
    pub summary: Option<FoldSummary>,
    #[serde(default)]
    pub seconds_per_epoch: Option<f64>,
    #[serde(default)]
    pub trainable_fraction: Option<f64>,
    #[serde(default)]
    pub freeze_passed: Option<bool>,
}

/// Directory of a cell; `from_scratch` cells do not depend on the source
/// and are shared between sources.
pub fn cell_dir(cfg: &ExperimentConfig, kind: StrategyKind, source: &str, fold: usize, seed: u64) -> PathBuf {
    let source = if kind.needs_source() { source } else { NO_SOURCE };
    cfg.runs_dir()
        .join(format!("{}__{}__fold{}__seed{}", kind.short_name(), source, fold, seed))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MeanStd {
    pub mean: f64,
    pub std: f64,
}

/// One report line. `fold` and `seed` are `None` on AVG rows.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReportRow {
    pub strategy: StrategyKind,
    pub source: String,
    pub fold: Option<usize>,
    pub seed: Option<u64>,
    pub status: CellStatus,
    pub n_cases: usize,
    /// In [`METRIC_NAMES`] order.
    pub metrics: Vec<Option<MeanStd>>,
    pub seconds_per_epoch: Option<f64>,
}

impl ReportRow {
    pub fn is_avg(&self) -> bool {
        self.fold.is_none()
    }

    pub fn metric(&self, name: &str) -> Option<MeanStd> {
        let i = METRIC_NAMES.iter().position(|&n| n == name)?;
        self.metrics[i]
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunReport {
    pub rows: Vec<ReportRow>,
    pub averages: Vec<ReportRow>,
}

fn cell_row(c: &CellResult, source: &str) -> ReportRow {
    let metrics = METRIC_NAMES
        .iter()
        .map(|&n| {
            c.summary
                .as_ref()
                .and_then(|s| s.get(n))
                .map(|m| MeanStd { mean: m.mean, std: m.std })
        })
        .collect();
    ReportRow {
        strategy: c.strategy,
        source: source.to_string(),
        fold: Some(c.fold),
        seed: Some(c.seed),
        status: c.status,
        n_cases: c.summary.as_ref().map_or(0, |s| s.n_cases),
        metrics,
        seconds_per_epoch: c.seconds_per_epoch,
    }
}

fn mean(values: impl Iterator<Item = f64>) -> Option<f64> {
    let v: Vec<f64> = values.collect();
    (!v.is_empty()).then(|| v.iter().sum::<f64>() / v.len() as f64)
}

/// AVG row of a group of fold rows: per metric, the mean of the successful
/// rows' means and the mean of their standard deviations.
pub fn average_row(rows: &[&ReportRow]) -> Option<ReportRow> {
    let first = rows.first()?;
    let ok: Vec<&&ReportRow> = rows.iter().filter(|r| r.status == CellStatus::Ok).collect();
    let metrics = (0..METRIC_NAMES.len())
        .map(|i| {
            let m = mean(ok.iter().filter_map(|r| r.metrics[i]).map(|m| m.mean))?;
            let s = mean(ok.iter().filter_map(|r| r.metrics[i]).map(|m| m.std))?;
            Some(MeanStd { mean: m, std: s })
        })
        .collect();
    Some(ReportRow {
        strategy: first.strategy,
        source: first.source.clone(),
        fold: None,
        seed: None,
        status: if ok.is_empty() { CellStatus::Failed } else { CellStatus::Ok },
        n_cases: ok.iter().map(|r| r.n_cases).sum(),
        metrics,
        seconds_per_epoch: mean(ok.iter().filter_map(|r| r.seconds_per_epoch)),
    })
}

impl RunReport {
    pub fn from_rows(rows: Vec<ReportRow>) -> Self {
        let mut groups: Vec<(StrategyKind, String)> = Vec::new();
        for r in &rows {
            let key = (r.strategy, r.source.clone());
            if !groups.contains(&key) {
                groups.push(key);
            }
        }
        let averages = groups
            .iter()
            .filter_map(|(k, s)| {
                let g: Vec<&ReportRow> = rows.iter().filter(|r| r.strategy == *k && &r.source == s).collect();
                average_row(&g)
            })
            .collect();
        RunReport { rows, averages }
    }

    /// Fold rows followed by AVG rows.
    pub fn all_rows(&self) -> impl Iterator<Item = &ReportRow> {
        self.rows.iter().chain(&self.averages)
    }

    pub fn average(&self, kind: StrategyKind, source: &str) -> Option<&ReportRow> {
        self.averages.iter().find(|r| r.strategy == kind && r.source == source)
    }

    /// Hash of every row's identity, status and metric values; timing is
    /// left out since it is not reproducible.
    pub fn metrics_digest(&self) -> String {
        let mut h = Sha256::new();
        for r in self.all_rows() {
            let mut line = format!(
                "{}|{}|{:?}|{:?}|{:?}|{}",
                r.strategy.short_name(),
                r.source,
                r.fold,
                r.seed,
                r.status,
                r.n_cases
            );
            for m in &r.metrics {
                match m {
                    Some(m) => write!(line, "|{:016x}:{:016x}", m.mean.to_bits(), m.std.to_bits()).unwrap(),
                    None => line.push_str("|-"),
                }
            }
            line.push('\n');
            h.update(line.as_bytes());
        }
        hex::encode(h.finalize())
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let csv_err = |e: csv::Error| Error::format(path, e.to_string());
        let mut w = csv::Writer::from_path(path).map_err(csv_err)?;
        let mut header = vec!["strategy".to_string(), "source".into(), "fold".into(), "seed".into()];
        header.extend(["status".into(), "n_cases".into()]);
        for n in METRIC_NAMES {
            header.push(format!("{n}_mean"));
            header.push(format!("{n}_std"));
        }
        header.push("seconds_per_epoch".into());
        w.write_record(&header).map_err(csv_err)?;
        let opt = |v: Option<f64>| v.map(|x| x.to_string()).unwrap_or_default();
        for r in self.all_rows() {
            let mut rec = vec![
                r.strategy.short_name().to_string(),
                r.source.clone(),
                r.fold.map_or("AVG".to_string(), |f| f.to_string()),
                r.seed.map(|s| s.to_string()).unwrap_or_default(),
                format!("{:?}", r.status).to_lowercase(),
                r.n_cases.to_string(),
            ];
            for m in &r.metrics {
                rec.push(opt(m.map(|m| m.mean)));
                rec.push(opt(m.map(|m| m.std)));
            }
            rec.push(opt(r.seconds_per_epoch));
            w.write_record(&rec).map_err(csv_err)?;
        }
        w.flush().map_err(|e| Error::io(path, e))
    }

    pub fn to_markdown(&self) -> String {
        let mut s = String::from("| strategy | source | fold |");
        for n in METRIC_NAMES {
            write!(s, " {n} |").unwrap();
        }
        s.push_str(" s/epoch |\n|---|---|---|");
        for _ in METRIC_NAMES {
            s.push_str("---|");
        }
        s.push_str("---|\n");
        for r in self.all_rows() {
            let fold = match (r.fold, r.seed) {
                (Some(f), Some(seed)) => format!("{f} (seed {seed})"),
                _ => "**AVG**".to_string(),
            };
            write!(s, "| {} | {} | {} |", r.strategy.short_name(), r.source, fold).unwrap();
            for m in &r.metrics {
                match (r.status, m) {
                    (CellStatus::Failed, _) => s.push_str(" failed |"),
                    (_, Some(m)) => write!(s, " {:.3} ± {:.3} |", m.mean, m.std).unwrap(),
                    (_, None) => s.push_str(" n/a |"),
                }
            }
            match r.seconds_per_epoch {
                Some(t) => writeln!(s, " {t:.2} |").unwrap(),
                None => s.push_str(" - |\n"),
            }
        }
        s
    }
}

fn run_cell(
    cfg: &ExperimentConfig,
    target: &LoadedTask,
    plan: &SplitPlan,
    kind: StrategyKind,
    source: Option<(&str, &Checkpoint)>,
    fold: usize,
    seed: u64,
    dir: &Path,
) -> Result<CellResult> {
    let t = run_transfer(cfg, target, plan, kind, source.map(|s| s.1), fold, seed, dir)?;
    if !t.freeze.passed() {
        return Err(Error::Config(format!("frozen parameters changed: {:?}", t.freeze.violations)));
    }
    let model = Checkpoint::load(&t.model_path)?;
    let test = select(target, &t.test_ids)?;
    let eval = evaluate_model(&model, &test, cfg)?;
    write_case_csv(dir.join("cases.csv"), &eval.cases)?;
    write_json(&dir.join("summary.json"), &eval.summary)?;
    Ok(CellResult {
        strategy: kind,
        source: source.map_or(NO_SOURCE, |s| s.0).to_string(),
        fold,
        seed,
        status: CellStatus::Ok,
        error: None,
        summary: Some(eval.summary),
        seconds_per_epoch: cfg.exclusive_timing.then(|| t.mean_seconds_per_epoch()),
        trainable_fraction: Some(t.trainable_fraction),
        freeze_passed: Some(t.freeze.passed()),
    })
}

/// Run the grid, at most `max_new_cells` freshly computed cells when given.
/// Completed cells found on disk are reused; failed cells are retried.
/// Returns `None` when stopped early, otherwise the report, also written
/// to `report.csv` and `report.md`.
pub fn run_matrix(cfg: &ExperimentConfig, max_new_cells: Option<usize>) -> Result<Option<RunReport>> {
    cfg.validate()?;
    if cfg.matrix_sources.is_empty() {
        return Err(Error::Config("matrix_sources is empty".into()));
    }
    if cfg.strategies.iter().any(|k| k.needs_source()) {
        for tag in &cfg.matrix_sources {
            let path = cfg.checkpoint_path(tag);
            if !path.exists() {
                return Err(Error::MissingCheckpoint(format!("{} (run pretrain first)", path.display())));
            }
        }
    }
    // loaded on first use; an unreadable checkpoint fails only its cells
    let mut sources: BTreeMap<String, std::result::Result<Checkpoint, String>> = BTreeMap::new();
    let target = load_task(cfg.target()?)?;
    let plan = target_split(cfg, &target)?;
    let folds: Vec<usize> = cfg.matrix_folds.clone().unwrap_or_else(|| (0..cfg.folds).collect());
    ensure_dir(&cfg.runs_dir())?;

    let mut rows = Vec::new();
    let mut fresh = 0;
    for &kind in &cfg.strategies {
        for tag in &cfg.matrix_sources {
            for &fold in &folds {
                for &seed in &cfg.seeds {
                    let dir = cell_dir(cfg, kind, tag, fold, seed);
                    let marker = dir.join("cell.json");
                    let cached = if marker.exists() {
                        let c: CellResult = read_json(&marker)?;
                        (c.status == CellStatus::Ok).then_some(c)
                    } else {
                        None
                    };
                    let cell = match cached {
                        Some(c) => {
                            log::debug!("reusing {}", dir.display());
                            c
                        }
                        None => {
                            if max_new_cells.is_some_and(|m| fresh >= m) {
                                return Ok(None);
                            }
                            fresh += 1;
                            log::info!("running {}", dir.display());
                            let result = if kind.needs_source() {
                                let ck = sources
                                    .entry(tag.clone())
                                    .or_insert_with(|| Checkpoint::load(cfg.checkpoint_path(tag)).map_err(|e| e.to_string()));
                                match ck {
                                    Ok(ck) => run_cell(cfg, &target, &plan, kind, Some((tag, ck)), fold, seed, &dir),
                                    Err(e) => Err(Error::MissingCheckpoint(e.clone())),
                                }
                            } else {
                                run_cell(cfg, &target, &plan, kind, None, fold, seed, &dir)
                            };
                            let c = result.unwrap_or_else(|e| {
                                log::warn!("cell {} failed: {e}", dir.display());
                                CellResult {
                                    strategy: kind,
                                    source: if kind.needs_source() { tag.as_str() } else { NO_SOURCE }.to_string(),
                                    fold,
                                    seed,
                                    status: CellStatus::Failed,
                                    error: Some(e.to_string()),
                                    summary: None,
                                    seconds_per_epoch: None,
                                    trainable_fraction: None,
                                    freeze_passed: None,
                                }
                            });
                            write_json(&marker, &c)?;
                            c
                        }
                    };
                    rows.push(cell_row(&cell, tag));
                }
            }
        }
    }
    let report = RunReport::from_rows(rows);
    report.write_csv(&cfg.output_dir.join("report.csv"))?;
    let md = cfg.output_dir.join("report.md");
    fs::write(&md, report.to_markdown()).map_err(|e| Error::io(&md, e))?;
    write_json(&cfg.output_dir.join("report.json"), &report)?;
    Ok(Some(report))
}

pub fn cmd_matrix(cfg: &ExperimentConfig) -> Result<RunReport> {
    Ok(run_matrix(cfg, None)?.expect("an unbounded run completes"))
}
