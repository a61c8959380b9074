//! Experiment orchestration: pre-training, transfer, evaluation, the
//! cross-validated strategy matrix and slice renders.

pub mod commands;
pub mod config;
pub mod matrix;
pub mod render;

pub use commands::{
    cmd_eval, cmd_make_synthetic, cmd_pretrain, cmd_transfer, evaluate_model, fold_test_paths, load_task, sha256_file,
    target_split, EvalOutcome, ManifestEntry, PretrainManifest, TransferOutcome,
};
pub use config::{ExperimentConfig, FamilyRef, SyntheticConfig, TaskSource};
pub use matrix::{cell_dir, cmd_matrix, run_matrix, CellResult, CellStatus, MeanStd, ReportRow, RunReport};
pub use render::{cmd_render, contour, select_slices, RenderOutput};
