use std::fs;
use std::path::Path;
use std::process::{Command, Output};

fn lesionseg(args: &[&str], cwd: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_lesionseg"))
        .args(args)
        .current_dir(cwd)
        .env("RUST_LOG", "warn")
        .output()
        .unwrap()
}

fn code(o: &Output) -> i32 {
    o.status.code().unwrap()
}

const TINY: &str = r#"{
  "spec": {
    "channels_per_stage": [2, 4],
    "strides_per_stage": [[1, 1, 1], [2, 2, 2]],
    "blocks_per_stage": 1
  },
  "reduction": 2,
  "pretrain": { "epochs": 2, "iterations_per_epoch": 2, "patch": [4, 8, 8] },
  "transfer": { "epochs": 2, "iterations_per_epoch": 2, "patch": [4, 8, 8] },
  "sources": [
    { "task_id": "blob", "data_root": "data/blob" },
    { "task_id": "shell", "data_root": "data/shell" }
  ],
  "target": { "task_id": "patchy", "data_root": "data/patchy" },
  "output_dir": "out",
  "synthetic": { "families": ["blob", "shell", "patchy"], "cases_per_family": 10, "dims": [4, 8, 8], "seed": 3 }
}"#;

#[test]
fn end_to_end_on_a_tiny_synthetic_experiment() {
    let tmp = tempfile::tempdir().unwrap();
    let dir = tmp.path();
    fs::write(dir.join("exp.json"), TINY).unwrap();

    let o = lesionseg(&["make-synthetic", "--config", "exp.json", "--out", "data"], dir);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    assert_eq!(fs::read_dir(dir.join("data/patchy")).unwrap().count(), 10);

    let o = lesionseg(&["pretrain", "--config", "exp.json"], dir);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    assert!(dir.join("out/checkpoints/multi_lesion.lsgckpt").exists());

    let o = lesionseg(
        &["transfer", "--config", "exp.json", "--strategy", "frozen", "--source", "multi_lesion", "--fold", "1"],
        dir,
    );
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let stdout = String::from_utf8_lossy(&o.stdout);
    assert!(stdout.contains("freeze check\tpassed"), "{stdout}");
    let model = stdout
        .lines()
        .find_map(|l| l.strip_prefix("model\t"))
        .unwrap()
        .to_string();

    let o = lesionseg(&["eval", "--config", "exp.json", "--model", &model, "--fold", "1"], dir);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    assert!(String::from_utf8_lossy(&o.stdout).contains("dsc\t"));
    let rows = fs::read_to_string(dir.join(&model).parent().unwrap().join("cases.csv")).unwrap();
    // header plus the 8 test cases of a fold
    assert_eq!(rows.lines().count(), 9);

    let o = lesionseg(
        &["render", "--config", "exp.json", "--case", "data/patchy/patchy_000.lsgcase", "--model", &model],
        dir,
    );
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    assert!(dir.join("out/renders/patchy_000.png").exists());
}

#[test]
fn configuration_errors_exit_with_2() {
    let tmp = tempfile::tempdir().unwrap();
    let dir = tmp.path();
    fs::write(dir.join("exp.json"), TINY).unwrap();
    fs::write(dir.join("bad.json"), "{ \"folds\": \"five\" }").unwrap();

    assert_eq!(code(&lesionseg(&["pretrain", "--config", "bad.json"], dir)), 2);
    let o = lesionseg(&["transfer", "--config", "exp.json", "--strategy", "sideways"], dir);
    assert_eq!(code(&o), 2);

    assert_eq!(code(&lesionseg(&["make-synthetic", "--config", "exp.json", "--out", "data"], dir)), 0);
    let o = lesionseg(&["transfer", "--config", "exp.json", "--strategy", "hybrid"], dir);
    assert_eq!(code(&o), 2, "{}", String::from_utf8_lossy(&o.stderr));
    assert!(String::from_utf8_lossy(&o.stderr).contains("needs --source"));
}

#[test]
fn missing_data_exits_with_3() {
    let tmp = tempfile::tempdir().unwrap();
    let dir = tmp.path();
    fs::write(dir.join("exp.json"), TINY).unwrap();
    let o = lesionseg(&["pretrain", "--config", "exp.json"], dir);
    assert_eq!(code(&o), 3, "{}", String::from_utf8_lossy(&o.stderr));
    assert_eq!(code(&lesionseg(&["pretrain", "--config", "absent.json"], dir)), 3);
}
