#![allow(dead_code)]

pub mod gradcheck;

use std::path::Path;

use lesionseg::backbone::NetworkSpec;
use lesionseg::harness::{cmd_make_synthetic, ExperimentConfig, SyntheticConfig, TaskSource};

pub fn small_spec() -> NetworkSpec {
    NetworkSpec {
        channels_per_stage: vec![4, 8, 16],
        strides_per_stage: vec![[1, 1, 1], [1, 2, 2], [2, 2, 2]],
        ..NetworkSpec::desk()
    }
}

pub fn tiny_spec() -> NetworkSpec {
    NetworkSpec {
        channels_per_stage: vec![2, 4],
        strides_per_stage: vec![[1, 1, 1], [2, 2, 2]],
        blocks_per_stage: 1,
        ..NetworkSpec::desk()
    }
}

/// Two source families and a target family written under `root`, with a
/// config pointing at them.
pub fn synthetic_experiment(
    root: &Path,
    families: [&str; 3],
    dims: [usize; 3],
    cases: usize,
    seed: u64,
) -> ExperimentConfig {
    let mut cfg = ExperimentConfig::default();
    cfg.synthetic = Some(SyntheticConfig {
        families: families.iter().map(|f| lesionseg::harness::FamilyRef::Preset(f.to_string())).collect(),
        cases_per_family: cases,
        dims,
        seed,
    });
    cfg.output_dir = root.join("out");
    let data = root.join("data");
    if !data.join(families[2]).exists() {
        cmd_make_synthetic(&cfg, &data).unwrap();
    }
    cfg.sources = families[..2]
        .iter()
        .map(|f| TaskSource {
            task_id: f.to_string(),
            data_root: data.join(f),
        })
        .collect();
    cfg.target = Some(TaskSource {
        task_id: families[2].to_string(),
        data_root: data.join(families[2]),
    });
    cfg
}

/// A few-second configuration on `dims` volumes with one patch per volume.
pub fn tiny_experiment(root: &Path) -> ExperimentConfig {
    let mut cfg = synthetic_experiment(root, ["blob", "shell", "patchy"], [4, 8, 8], 10, 3);
    cfg.spec = tiny_spec();
    for phase in [&mut cfg.pretrain, &mut cfg.transfer] {
        phase.epochs = 2;
        phase.iterations_per_epoch = 2;
        phase.patch = [4, 8, 8];
    }
    cfg.reduction = 2;
    cfg
}
