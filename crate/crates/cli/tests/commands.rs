use std::path::Path;
use std::process::{Command, Output};

const TINY_CONFIG: &str = r#"
seed = 3
[dhr]
base_width = 10
patch_size = 16
[ahg]
base_width = 8
disc_width = 8
[train]
batch_size = 2
[ahg_train]
batch_size = 2
steps = 3
crop = { unit = 32, output = 32 }
[sampling]
negatives = 3
crop = { unit = 32, output = 32 }
"#;

fn hazekit(root: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_hazekit"))
        .args(args)
        .current_dir(root)
        .env("RUST_LOG", "warn")
        .output()
        .unwrap()
}

fn ok(root: &Path, args: &[&str]) {
    let out = hazekit(root, args);
    assert!(out.status.success(), "{args:?}: {}", String::from_utf8_lossy(&out.stderr));
}

fn setup() -> tempfile::TempDir {
    let dir = tempfile::tempdir().unwrap();
    std::fs::write(dir.path().join("tiny.toml"), TINY_CONFIG).unwrap();
    ok(dir.path(), &["gen-micro-dataset", "--pairs", "2", "--size", "32", "--out", "data"]);
    dir
}

fn log_lines(path: &Path) -> Vec<serde_json::Value> {
    std::fs::read_to_string(path)
        .unwrap()
        .lines()
        .map(|l| serde_json::from_str(l).unwrap())
        .collect()
}

#[test]
fn train_ahg_reduces_loss_on_micro_set() {
    let dir = setup();
    ok(dir.path(), &["--config", "tiny.toml", "train-ahg", "--data", "data", "--steps", "50", "--out", "ahg"]);
    let log = log_lines(&dir.path().join("ahg/ahg_log.jsonl"));
    assert_eq!(log.len(), 50);
    let first = log[0]["total"].as_f64().unwrap();
    let last = log[49]["total"].as_f64().unwrap();
    assert!(last < first, "{first} -> {last}");
    assert!(dir.path().join("ahg/ahg.safetensors").exists());
}

#[test]
fn train_ahg_resume_continues_step_counter() {
    let dir = setup();
    let root = dir.path();
    ok(root, &["--config", "tiny.toml", "train-ahg", "--data", "data", "--steps", "2", "--out", "ahg"]);
    ok(root, &["train-ahg", "--resume", "ahg/ahg.safetensors", "--data", "data", "--steps", "4", "--out", "ahg"]);
    let steps: Vec<u64> = log_lines(&root.join("ahg/ahg_log.jsonl"))
        .iter()
        .map(|r| r["step"].as_u64().unwrap())
        .collect();
    assert_eq!(steps, [1, 2, 3, 4]);
}

#[test]
fn missing_dataset_exits_with_code_2_naming_the_path() {
    let dir = tempfile::tempdir().unwrap();
    let out = hazekit(dir.path(), &["train-ahg", "--data", "no_such_set", "--out", "o"]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("no_such_set"));
}

#[test]
fn unknown_config_key_exits_with_code_2_naming_the_key() {
    let dir = tempfile::tempdir().unwrap();
    std::fs::write(dir.path().join("bad.toml"), "[train]\nbatch_sise = 2\n").unwrap();
    let out = hazekit(dir.path(), &["--config", "bad.toml", "gen-micro-dataset", "--out", "o"]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("batch_sise"));
}

#[test]
fn eval_of_identical_sets_hits_the_caps() {
    let dir = setup();
    let root = dir.path();
    ok(root, &["eval", "--pred", "data/clear", "--gt", "data/clear", "--out", "ev"]);
    let report: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(root.join("ev/eval.json")).unwrap()).unwrap();
    assert_eq!(report["summary"]["mean_psnr"].as_f64(), Some(99.0));
    assert_eq!(report["summary"]["mean_ssim"].as_f64(), Some(1.0));
    let csv = std::fs::read_to_string(root.join("ev/eval.csv")).unwrap();
    assert_eq!(csv.lines().count(), 3);
}

#[test]
fn eval_rejects_unmatched_files() {
    let dir = setup();
    let root = dir.path();
    std::fs::create_dir(root.join("pred")).unwrap();
    for name in ["0000.png", "0001.png"] {
        std::fs::copy(root.join("data/clear").join(name), root.join("pred").join(name)).unwrap();
    }
    std::fs::copy(root.join("data/clear/0000.png"), root.join("pred/extra.png")).unwrap();
    let out = hazekit(root, &["eval", "--pred", "pred", "--gt", "data/clear", "--out", "ev"]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("extra.png"));
}

#[test]
fn generate_train_and_dehaze_end_to_end() {
    let dir = setup();
    let root = dir.path();
    ok(root, &["--config", "tiny.toml", "train-ahg", "--data", "data", "--out", "ahg"]);
    ok(
        root,
        &[
            "--config", "tiny.toml", "gen-haze", "--ahg", "ahg/ahg.safetensors", "--clear", "data/clear", "--hazy",
            "data/hazy", "--alpha", "-0.2,0.3", "--out", "gen",
        ],
    );
    for stem in ["0000_a-0.200_s0", "0000_a+0.300_s0", "0001_a-0.200_s0", "0001_a+0.300_s0"] {
        assert!(root.join("gen").join(format!("{stem}.png")).exists(), "{stem}");
        assert!(root.join("gen").join(format!("{stem}.json")).exists(), "{stem}");
    }
    ok(
        root,
        &["--config", "tiny.toml", "train-dhr", "--data", "data", "--ahg", "ahg/ahg.safetensors", "--steps", "2", "--out", "dhr"],
    );
    assert_eq!(log_lines(&root.join("dhr/dhr_log.jsonl")).len(), 2);
    ok(root, &["dehaze", "--checkpoint", "dhr/dhr.safetensors", "--input", "data/hazy", "--out", "pred"]);
    ok(root, &["eval", "--pred", "pred", "--gt", "data/clear", "--out", "ev"]);
    assert!(root.join("ev/eval.csv").exists());
}
