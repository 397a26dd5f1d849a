use std::path::Path;
use std::process::{Command, Output};

use endoseg::unet::{load_model, Model, UNetConfig};

const CONFIG: &str = r#"
[paths]
data_root = "data"
weights = "out/weights.bin"
output_dir = "out"

[synth]
width = 112
height = 104
n_cells = 24
seed = 3

[synth.split]
train = 6
val = 1
test = 3

[unet]
levels = 3
base_channels = 2

[train]
epochs = 2
batch_size = 2
augment_target_count = 4
checkpoint_every = 1
"#;

fn endoseg(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_endoseg"))
        .args(args)
        .args(["--config", "c.toml"])
        .current_dir(dir)
        .output()
        .expect("run endoseg")
}

fn ok(dir: &Path, args: &[&str]) -> String {
    let out = endoseg(dir, args);
    assert!(out.status.success(), "{args:?} failed: {}", String::from_utf8_lossy(&out.stderr));
    String::from_utf8(out.stdout).unwrap()
}

fn setup(config: &str) -> tempfile::TempDir {
    let dir = tempfile::tempdir().unwrap();
    std::fs::write(dir.path().join("c.toml"), config).unwrap();
    dir
}

#[test]
fn full_chain_emits_all_artifacts() {
    let dir = setup(CONFIG);
    let d = dir.path();
    ok(d, &["synth"]);
    assert!(d.join("data/manifest.json").exists());
    assert_eq!(std::fs::read_dir(d.join("data/train")).unwrap().filter(|e| {
        e.as_ref().unwrap().path().extension().is_some_and(|x| x == "tif")
    }).count(), 6);

    ok(d, &["train"]);
    for f in ["out/weights.bin", "out/train_log.csv", "out/checkpoints/epoch_0001.bin", "out/checkpoints/epoch_0002.bin"] {
        assert!(d.join(f).exists(), "{f} missing");
    }
    let log = std::fs::read_to_string(d.join("out/train_log.csv")).unwrap();
    assert!(log.starts_with("epoch,step,loss,wall_ms"));

    ok(d, &["infer"]);
    for stem in ["007", "008", "009"] {
        assert!(d.join(format!("out/infer/{stem}.sdm")).exists());
        assert!(d.join(format!("out/infer/{stem}.labels.png")).exists());
    }
    let report = ok(d, &["report"]);
    assert_eq!(report.lines().count(), 3);
    assert!(report.contains("CD:") && report.contains("GAR:"));
    assert!(d.join("out/reports.csv").exists() && d.join("out/reports.json").exists());

    let summary: serde_json::Value = serde_json::from_str(&ok(d, &["eval"])).unwrap();
    assert_eq!(summary["images"], 3);
    assert_eq!(summary["epochs"].as_array().unwrap().len(), 2);
    for f in ["accuracy.json", "ba_cd.csv", "ba_cd.svg", "ba_gar.svg", "gar.csv", "epochs.csv", "mae_cd.svg", "mae_cv.svg"] {
        assert!(d.join("out/eval").join(f).exists(), "eval/{f} missing");
    }
}

#[test]
fn seeded_runs_are_reproducible() {
    let a = setup(CONFIG);
    let b = setup(CONFIG);
    for d in [a.path(), b.path()] {
        ok(d, &["synth", "--seed", "11"]);
        ok(d, &["train", "--seed", "11"]);
    }
    for f in ["data/train/000.tif", "data/manifest.json", "out/weights.bin"] {
        assert_eq!(std::fs::read(a.path().join(f)).unwrap(), std::fs::read(b.path().join(f)).unwrap(), "{f} differs");
    }
}

#[test]
fn zero_epochs_writes_initialization() {
    let dir = setup(&CONFIG.replace("epochs = 2", "epochs = 0"));
    let d = dir.path();
    ok(d, &["synth"]);
    ok(d, &["train"]);
    let loaded = load_model(d.join("out/weights.bin")).unwrap();
    let fresh = Model::<f32>::build(&UNetConfig { levels: 3, base_channels: 2, ..UNetConfig::default() }).unwrap();
    assert_eq!(loaded.params().len(), fresh.params().len());
    for (a, b) in loaded.params().iter().zip(fresh.params()) {
        assert_eq!(a.value, b.value, "{} differs from initialization", a.name);
    }
}

#[test]
fn missing_weights_is_a_structured_error() {
    let dir = setup(CONFIG);
    let d = dir.path();
    ok(d, &["synth"]);
    let out = endoseg(d, &["infer"]);
    assert!(!out.status.success());
    let err: serde_json::Value = serde_json::from_slice(&out.stderr).unwrap();
    assert_eq!(err["error"], "weights");
}

#[test]
fn bad_config_fails_cleanly() {
    let dir = setup("[postprocess]\ncell_threshold = -1.0\n");
    let out = endoseg(dir.path(), &["synth"]);
    assert_eq!(out.status.code(), Some(2));
    let err: serde_json::Value = serde_json::from_slice(&out.stderr).unwrap();
    assert_eq!(err["error"], "config");
}
