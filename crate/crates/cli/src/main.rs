use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use lesionseg::checkpoint::Checkpoint;
use lesionseg::error::ErrorClass;
use lesionseg::harness::{self, ExperimentConfig};
use lesionseg::inference::{argmax_labels, predict_volume};
use lesionseg::transfer::StrategyKind;
use lesionseg::volume::{load_case, preprocess};
use lesionseg::{Error, Result};

#[derive(Parser)]
#[command(name = "lesionseg", version, about = "Volumetric lesion segmentation with encoder transfer")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// Experiment config (JSON); built-in defaults when omitted.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Output directory, overriding the config.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Single seed, overriding the config's seed list.
    #[arg(long)]
    seed: Option<u64>,
    /// Surface tolerance in mm, overriding the config.
    #[arg(long = "tau-mm")]
    tau_mm: Option<f64>,
}

impl Common {
    fn load(&self) -> Result<ExperimentConfig> {
        let mut cfg = match &self.config {
            Some(p) => ExperimentConfig::load(p)?,
            None => ExperimentConfig::default(),
        };
        if let Some(o) = &self.out {
            cfg.output_dir.clone_from(o);
        }
        if let Some(s) = self.seed {
            cfg.seeds = vec![s];
        }
        if let Some(t) = self.tau_mm {
            cfg.tau_mm = t;
        }
        cfg.validate()?;
        Ok(cfg)
    }
}

#[derive(Subcommand)]
enum Command {
    /// Pre-train one network per source task plus a pooled multi-lesion one.
    Pretrain {
        #[command(flatten)]
        common: Common,
    },
    /// Train one strategy on one fold of the target task.
    Transfer {
        #[command(flatten)]
        common: Common,
        /// scratch, continual, body, frozen or hybrid.
        #[arg(long)]
        strategy: String,
        /// Source checkpoint file, or a tag under the output's checkpoints/.
        #[arg(long)]
        source: Option<String>,
        #[arg(long, default_value_t = 0)]
        fold: usize,
    },
    /// Evaluate a trained model on a fold's test cases or on given case files.
    Eval {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        fold: Option<usize>,
        /// Case files to evaluate instead of a fold's test set.
        #[arg(long, num_args = 1..)]
        cases: Vec<PathBuf>,
    },
    /// Run the strategy × source × fold grid and write the report.
    Matrix {
        #[command(flatten)]
        common: Common,
        /// Restrict the grid to one fold.
        #[arg(long)]
        fold: Option<usize>,
    },
    /// Render annotation and prediction contours on axial slices to a PNG.
    Render {
        #[command(flatten)]
        common: Common,
        /// Case file with volume and annotation.
        #[arg(long)]
        case: PathBuf,
        /// Model used for the prediction; the prediction is empty without it.
        #[arg(long)]
        model: Option<PathBuf>,
        #[arg(long, default_value_t = harness::render::DEFAULT_SLICES)]
        slices: usize,
    },
    /// Write synthetic cohorts described by the config's synthetic section.
    MakeSynthetic {
        #[command(flatten)]
        common: Common,
    },
}

fn resolve_source(cfg: &ExperimentConfig, source: &str) -> PathBuf {
    let p = PathBuf::from(source);
    if p.exists() || p.extension().is_some() {
        p
    } else {
        cfg.checkpoint_path(source)
    }
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Pretrain { common } => {
            let cfg = common.load()?;
            let manifest = harness::cmd_pretrain(&cfg, cfg.seeds[0])?;
            for e in &manifest.checkpoints {
                println!(
                    "{}\t{}\tvalidation dsc {}",
                    e.tag,
                    e.path.display(),
                    e.validation_dsc.map_or("n/a".into(), |d| format!("{d:.4}"))
                );
            }
        }
        Command::Transfer {
            common,
            strategy,
            source,
            fold,
        } => {
            let cfg = common.load()?;
            let kind = StrategyKind::from_short_name(&strategy)?;
            let source = source.map(|s| resolve_source(&cfg, &s));
            let seed = cfg.seeds[0];
            let tag = source
                .as_ref()
                .and_then(|p| p.file_stem())
                .map_or("none".to_string(), |s| s.to_string_lossy().into_owned());
            let dir = harness::cell_dir(&cfg, kind, &tag, fold, seed);
            let t = harness::cmd_transfer(&cfg, kind, source.as_deref(), fold, seed, &dir)?;
            println!("model\t{}", t.model_path.display());
            println!("train log\t{}", t.log_path.display());
            println!("seconds per epoch\t{:.3}", t.mean_seconds_per_epoch());
            println!("trainable fraction\t{:.4}", t.trainable_fraction);
            println!(
                "freeze check\t{}",
                if t.freeze.passed() { "passed" } else { "FAILED" }
            );
            if !t.freeze.passed() {
                return Err(Error::Config(format!("frozen parameters changed: {:?}", t.freeze.violations)));
            }
        }
        Command::Eval {
            common,
            model,
            fold,
            cases,
        } => {
            let cfg = common.load()?;
            let paths = match (fold, cases.is_empty()) {
                (_, false) => cases,
                (Some(f), true) => harness::fold_test_paths(&cfg, f)?,
                (None, true) => return Err(Error::Config("eval needs --fold or --cases".into())),
            };
            let out = model.parent().unwrap_or(Path::new(".")).to_path_buf();
            let out = common.out.clone().unwrap_or(out);
            let e = harness::cmd_eval(&model, &paths, &cfg, &out)?;
            for (name, s) in &e.summary.metrics {
                match s {
                    Some(s) => println!("{name}\t{:.4} ± {:.4}\t(n={}, excluded {})", s.mean, s.std, s.n, s.excluded),
                    None => println!("{name}\tundefined"),
                }
            }
            println!("per-case metrics\t{}", out.join("cases.csv").display());
        }
        Command::Matrix { common, fold } => {
            let mut cfg = common.load()?;
            if let Some(f) = fold {
                cfg.matrix_folds = Some(vec![f]);
                cfg.validate()?;
            }
            let report = harness::cmd_matrix(&cfg)?;
            print!("{}", report.to_markdown());
            println!("metrics digest\t{}", report.metrics_digest());
        }
        Command::Render {
            common,
            case,
            model,
            slices,
        } => {
            let cfg = common.load()?;
            let (v, m) = load_case(&case)?;
            let annotation = m.labels.mapv(|l| u8::from(l > 0));
            let prediction = match &model {
                Some(p) => {
                    let ck = Checkpoint::load(p)?;
                    let stats = ck
                        .meta
                        .intensity
                        .as_ref()
                        .ok_or_else(|| Error::Config("model carries no intensity statistics".into()))?;
                    let x = preprocess(&v, stats)?;
                    argmax_labels(&predict_volume(&ck.model, &x.data, cfg.transfer.patch, cfg.overlap)?)
                }
                None => ndarray::Array3::zeros(annotation.dim()),
            };
            let out = cfg.output_dir.join("renders").join(format!("{}.png", v.case_id));
            let r = harness::cmd_render(&v, &annotation, &prediction, &out, slices)?;
            println!("{}\tslices {:?}", r.path.display(), r.slices);
        }
        Command::MakeSynthetic { common } => {
            let cfg = common.load()?;
            for d in harness::cmd_make_synthetic(&cfg, &cfg.output_dir)? {
                println!("{}", d.display());
            }
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(match e.class() {
                ErrorClass::Config => 2,
                ErrorClass::Data => 3,
                ErrorClass::Divergence => 4,
            })
        }
    }
}
