mod common;

use std::fs;

use lesionseg::checkpoint::Checkpoint;
use lesionseg::harness::*;
use lesionseg::metrics::{read_case_csv, METRIC_NAMES};
use lesionseg::optimization::TrainLog;
use lesionseg::transfer::{StrategyKind, MULTI_LESION_TAG};

#[test]
fn pretrain_writes_single_and_pooled_checkpoints_reproducibly() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = common::tiny_experiment(dir.path());
    let m = cmd_pretrain(&cfg, 5).unwrap();
    let tags: Vec<&str> = m.checkpoints.iter().map(|e| e.tag.as_str()).collect();
    assert_eq!(tags, ["blob", "shell", MULTI_LESION_TAG]);
    for e in &m.checkpoints {
        assert!(e.validation_dsc.is_some(), "{}", e.tag);
        assert!(e.path.exists());
        assert!(!e.validation_ids.is_empty());
        assert!(e.train_ids.iter().all(|id| !e.validation_ids.contains(id)));
    }
    assert_eq!(m.entry(MULTI_LESION_TAG).unwrap().source_tasks, ["blob", "shell"]);
    let stored: PretrainManifest =
        serde_json::from_str(&fs::read_to_string(cfg.checkpoint_dir().join("manifest.json")).unwrap()).unwrap();
    assert_eq!(stored, m);

    let again = cmd_pretrain(&cfg, 5).unwrap();
    let hashes = |m: &PretrainManifest| m.checkpoints.iter().map(|e| e.sha256.clone()).collect::<Vec<_>>();
    assert_eq!(hashes(&again), hashes(&m));
}

#[test]
fn missing_data_root_is_a_data_error() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = common::tiny_experiment(dir.path());
    cfg.sources[0].data_root = dir.path().join("nowhere");
    let e = cmd_pretrain(&cfg, 0).unwrap_err();
    assert_eq!(e.class(), lesionseg::error::ErrorClass::Data);
}

#[test]
fn transfer_and_eval_produce_models_logs_and_per_case_rows() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = common::tiny_experiment(dir.path());
    cmd_pretrain(&cfg, 0).unwrap();
    let src = cfg.checkpoint_path(MULTI_LESION_TAG);

    let run = dir.path().join("frozen");
    let t = cmd_transfer(&cfg, StrategyKind::FrozenEncoder, Some(&src), 1, 0, &run).unwrap();
    assert!(t.freeze.passed() && t.freeze.checked > 0);
    assert!(t.trainable_fraction < 1.0);
    let log = TrainLog::read_csv(&t.log_path).unwrap();
    assert_eq!(log.records.len(), cfg.transfer.epochs);
    assert!(log.records.iter().all(|r| r.seconds_per_epoch > 0.0));
    let model = Checkpoint::load(&t.model_path).unwrap();
    assert!(model.meta.intensity.is_some());

    let test = fold_test_paths(&cfg, 1).unwrap();
    assert_eq!(test.len(), t.test_ids.len());
    let e = cmd_eval(&t.model_path, &test, &cfg, &run).unwrap();
    assert_eq!(e.cases.len(), test.len());
    assert_eq!(read_case_csv(run.join("cases.csv")).unwrap().len(), test.len());
    assert_eq!(e.summary.n_cases, test.len());

    // scratch ignores the source entirely
    let a = cmd_transfer(&cfg, StrategyKind::FromScratch, Some(&src), 1, 0, &dir.path().join("a")).unwrap();
    let b = cmd_transfer(&cfg, StrategyKind::FromScratch, None, 1, 0, &dir.path().join("b")).unwrap();
    assert_eq!(fs::read(&a.model_path).unwrap(), fs::read(&b.model_path).unwrap());

    let missing = cmd_transfer(&cfg, StrategyKind::Hybrid, None, 0, 0, &dir.path().join("c")).unwrap_err();
    assert_eq!(missing.class(), lesionseg::error::ErrorClass::Config);
}

#[test]
fn matrix_rows_averages_and_resume() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = common::tiny_experiment(dir.path());
    cfg.matrix_folds = Some(vec![0, 1]);
    assert!(matches!(
        run_matrix(&cfg, None),
        Err(lesionseg::Error::MissingCheckpoint(_))
    ));
    cmd_pretrain(&cfg, 0).unwrap();
    let r = cmd_matrix(&cfg).unwrap();
    assert_eq!(r.rows.len(), 10);
    assert_eq!(r.averages.len(), 5);
    for avg in &r.averages {
        let rows: Vec<&ReportRow> = r.rows.iter().filter(|x| x.strategy == avg.strategy).collect();
        for name in METRIC_NAMES {
            let vals: Vec<f64> = rows.iter().filter_map(|x| x.metric(name)).map(|m| m.mean).collect();
            if let Some(m) = avg.metric(name) {
                let mean = vals.iter().sum::<f64>() / vals.len() as f64;
                assert!((m.mean - mean).abs() < 1e-12, "{name}");
            }
        }
    }
    let csv = fs::read_to_string(cfg.output_dir.join("report.csv")).unwrap();
    assert_eq!(csv.lines().count(), 1 + 15);
    assert!(cfg.output_dir.join("report.md").exists());

    // a second run reuses every cell: mark the cached models so recomputing would show
    let marker = cell_dir(&cfg, StrategyKind::Hybrid, MULTI_LESION_TAG, 0, 0).join("model.lsgckpt");
    fs::write(&marker, b"sentinel").unwrap();
    let again = cmd_matrix(&cfg).unwrap();
    assert_eq!(again.metrics_digest(), r.metrics_digest());
    assert_eq!(fs::read(&marker).unwrap(), b"sentinel");
}

#[test]
fn failed_cells_are_marked_and_the_grid_continues() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = common::tiny_experiment(dir.path());
    cfg.matrix_folds = Some(vec![0]);
    cfg.strategies = vec![StrategyKind::FromScratch, StrategyKind::BodyFinetune];
    cfg.matrix_sources = vec![MULTI_LESION_TAG.into(), "blob".into()];
    cmd_pretrain(&cfg, 0).unwrap();
    fs::write(cfg.checkpoint_path("blob"), b"not a checkpoint").unwrap();
    let r = cmd_matrix(&cfg).unwrap();
    assert_eq!(r.rows.len(), 4);
    let failed: Vec<&ReportRow> = r.rows.iter().filter(|x| x.status == CellStatus::Failed).collect();
    assert_eq!(failed.len(), 1);
    assert_eq!((failed[0].strategy, failed[0].source.as_str()), (StrategyKind::BodyFinetune, "blob"));
    let avg = r.average(StrategyKind::BodyFinetune, "blob").unwrap();
    assert_eq!(avg.status, CellStatus::Failed);
    let cell: CellResult = serde_json::from_str(
        &fs::read_to_string(cell_dir(&cfg, failed[0].strategy, "blob", 0, 0).join("cell.json")).unwrap(),
    )
    .unwrap();
    assert_eq!(cell.status, CellStatus::Failed);
    assert!(cell.error.is_some());
    assert!(fs::read_to_string(cfg.output_dir.join("report.md")).unwrap().contains("failed"));
}
