use std::path::{Path, PathBuf};
use std::process::{Command, Output};

const TINY: &str = r#"
seed = 3

[phantom]
split = [0.5, 0.2, 0.3]

[phantom.generator]
image_size = [32, 32]
num_volumes = 20

[phantom.generator.slices]
min = 2
max = 3

[cvae.model]
height = 32
width = 32

[cvae.train]
epochs = 1
batch_size = 8

[classifier.model]
descriptor_dim = 16
clusters = 4

[classifier.train]
epochs = 2
lr = 1e-3

[metrics.bootstrap]
iterations = 50
"#;

struct Workspace {
    dir: tempfile::TempDir,
}

impl Workspace {
    fn new() -> Self {
        let dir = tempfile::tempdir().unwrap();
        std::fs::write(dir.path().join("run.toml"), TINY).unwrap();
        Self { dir }
    }

    fn path(&self, rel: &str) -> PathBuf {
        self.dir.path().join(rel)
    }

    fn run(&self, args: &[&str]) -> Output {
        Command::new(env!("CARGO_BIN_EXE_sidegate"))
            .arg("--config")
            .arg(self.path("run.toml"))
            .arg("--out")
            .arg(self.path("out"))
            .args(args)
            .env_remove("SIDEGATE_OUTPUT_ROOT")
            .output()
            .unwrap()
    }

    fn ok(&self, args: &[&str]) -> PathBuf {
        let out = self.run(args);
        assert!(
            out.status.success(),
            "{args:?} failed: {}",
            String::from_utf8_lossy(&out.stderr)
        );
        PathBuf::from(String::from_utf8(out.stdout).unwrap().trim())
    }

    fn code(&self, args: &[&str]) -> i32 {
        self.run(args).status.code().unwrap()
    }
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

#[test]
fn full_pipeline_writes_artifacts_and_is_reproducible() {
    let ws = Workspace::new();
    let dataset = ws.ok(&["generate"]);
    assert!(dataset.join("manifest.json").is_file());
    assert!(dataset.join("run_manifest.json").is_file());

    let cvae = ws.ok(&["train-cvae", "--dataset", s(&dataset)]);
    let cvae_ckpt = cvae.join("checkpoint.safetensors");
    assert!(cvae_ckpt.is_file());
    assert!(cvae.join("loss_trace.csv").is_file());

    let cls = ws.ok(&["train-classifier", "--dataset", s(&dataset), "--cvae", s(&cvae_ckpt)]);
    let ckpt = cls.join("checkpoint.safetensors");
    let history = std::fs::read_to_string(cls.join("history.csv")).unwrap();
    assert_eq!(history.lines().count(), 3);

    let manifest: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(cls.join("run_manifest.json")).unwrap()).unwrap();
    assert_eq!(manifest["seed"], 3);
    assert_eq!(manifest["inputs"].as_array().unwrap().len(), 2);
    assert!(manifest["wall_time_s"].as_f64().unwrap() >= 0.0);

    let eval_a = ws.ok(&["--name", "eval-a", "evaluate", "--checkpoint", s(&ckpt), "--dataset", s(&dataset), "--split", "train"]);
    let eval_b = ws.ok(&["--name", "eval-b", "evaluate", "--checkpoint", s(&ckpt), "--dataset", s(&dataset), "--split", "train"]);
    let a = std::fs::read(eval_a.join("metrics.json")).unwrap();
    assert_eq!(a, std::fs::read(eval_b.join("metrics.json")).unwrap());
    let metrics: serde_json::Value = serde_json::from_slice(&a).unwrap();
    for key in ["sensitivity", "specificity", "f1", "auc", "auc_ci", "fpr_at_tpr"] {
        assert!(metrics.get(key).is_some(), "missing {key}");
    }
    assert!(eval_a.join("roc.png").is_file());
    assert!(eval_a.join("predictions.csv").is_file());

    let manifest: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(dataset.join("manifest.json")).unwrap()).unwrap();
    let id = manifest["train"][0].as_str().unwrap().to_string();
    let ex = ws.ok(&["explain", "--checkpoint", s(&ckpt), "--dataset", s(&dataset), "--volume-id", &id, "--smooth"]);
    assert!(ex.join("slice000_image.png").is_file());
    assert!(ex.join("slice000_overlay.png").is_file());
    assert!(ex.join("relevance.safetensors").is_file());

    assert_eq!(ws.code(&["explain", "--checkpoint", s(&ckpt), "--dataset", s(&dataset), "--volume-id", "nope"]), 1);
}

#[test]
fn ablation_flags_are_checked() {
    let ws = Workspace::new();
    let dataset = ws.ok(&["generate"]);
    let d = s(&dataset);
    assert_eq!(ws.code(&["train-classifier", "--dataset", d, "--ablation", "full"]), 1);
    assert_eq!(ws.code(&["train-classifier", "--dataset", d, "--ablation", "no-cvae", "--cvae", d]), 1);
    assert_eq!(ws.code(&["train-classifier", "--dataset", d, "--ablation", "full", "--cvae", "/no/such/file"]), 1);

    let masked = ws.ok(&["train-cvae", "--dataset", d]);
    let ckpt = masked.join("checkpoint.safetensors");
    assert_eq!(ws.code(&["train-classifier", "--dataset", d, "--ablation", "no-side", "--cvae", s(&ckpt)]), 1);

    let no_cvae = ws.ok(&["train-classifier", "--dataset", d, "--ablation", "no-cvae", "--epochs", "1"]);
    assert!(no_cvae.ends_with("classifier-no-cvae"));
}

#[test]
fn invalid_inputs_exit_with_one() {
    let ws = Workspace::new();
    assert_eq!(ws.code(&["evaluate", "--checkpoint", "/no/such", "--dataset", "/no/such"]), 1);
    assert_eq!(ws.code(&["train-cvae", "--dataset", "/no/such"]), 1);
    assert_eq!(ws.code(&["frobnicate"]), 1);
    std::fs::write(ws.path("run.toml"), "[cvae.model]\nheight = 30\n").unwrap();
    assert_eq!(ws.code(&["show-config"]), 1);
    std::fs::write(ws.path("run.toml"), "not toml at all [").unwrap();
    assert_eq!(ws.code(&["show-config"]), 1);
}

#[test]
fn show_config_round_trips_and_applies_seed() {
    let ws = Workspace::new();
    let out = ws.run(&["--seed", "11", "show-config"]);
    assert!(out.status.success());
    let text = String::from_utf8(out.stdout).unwrap();
    std::fs::write(ws.path("again.toml"), &text).unwrap();
    let again = Command::new(env!("CARGO_BIN_EXE_sidegate"))
        .args(["--config", s(&ws.path("again.toml")), "show-config"])
        .output()
        .unwrap();
    assert_eq!(String::from_utf8(again.stdout).unwrap(), text);
    assert!(text.contains("seed = 11"));
}

#[test]
fn environment_sets_output_root() {
    let ws = Workspace::new();
    let root = ws.path("from-env");
    let out = Command::new(env!("CARGO_BIN_EXE_sidegate"))
        .args(["--config", s(&ws.path("run.toml")), "generate", "--num-volumes", "4"])
        .env("SIDEGATE_OUTPUT_ROOT", &root)
        .output()
        .unwrap();
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    assert!(root.join("dataset").join("manifest.json").is_file());
}
