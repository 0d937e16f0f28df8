use std::path::Path;
use std::process::Command;

use numspace::harness::{ExperimentConfig, ExperimentKind, ExperimentResult, Status};
use numspace::subspace::NumberSubspace;

const BIN: &str = env!("CARGO_BIN_EXE_numspace");

fn write_config(dir: &Path) -> std::path::PathBuf {
    let text = format!(
        r#"
trials = 1
alpha_grid = [2.0]
k_grid = [2]

[model]
num_layers = 2
hidden_dim = 16
num_heads = 2
ffn_dim = 32

[train]
steps = 30
warmup_steps = 5
log_every = 10

[data]
train_per_condition = 40
test_per_condition = 4
inlp_train_size = 64
inlp_heldout_size = 32
side_effect_sentences = 8

[paths]
checkpoints = "{}"
out = "{}"
"#,
        dir.join("ckpt").display(),
        dir.join("results").display()
    );
    let path = dir.join("config.toml");
    std::fs::write(&path, text).unwrap();
    ExperimentConfig::load(&path).unwrap();
    path
}

fn numspace(config: &Path, args: &[&str]) {
    let out = Command::new(BIN)
        .arg("--config")
        .arg(config)
        .args(args)
        .output()
        .unwrap();
    assert!(
        out.status.success(),
        "{args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
}

#[test]
fn end_to_end_through_the_binary() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path());
    let d = |p: &str| dir.path().join(p).display().to_string();

    numspace(&cfg, &["generate-corpus", "--out", &d("corpus")]);
    for f in ["train.jsonl", "test.jsonl", "lexicon.json"] {
        assert!(dir.path().join("corpus").join(f).exists(), "{f}");
    }

    numspace(&cfg, &["train-mlm", "--seed", "0"]);
    let ckpt = dir.path().join("ckpt/model-0.tmlm");
    assert!(ckpt.exists());

    let sub = d("layer1.nsub");
    numspace(
        &cfg,
        &[
            "find-subspace",
            "--checkpoint",
            &ckpt.display().to_string(),
            "--layer",
            "1",
            "--k",
            "2",
            "--out",
            &sub,
        ],
    );
    assert_eq!(NumberSubspace::load(&sub).unwrap().dim(), 16);
    assert!(dir.path().join("layer1.json").exists());

    let run = |out: &str| {
        numspace(
            &cfg,
            &[
                "run",
                "--experiment",
                "layer-sweep",
                "--alpha-grid",
                "1,3",
                "--k-grid",
                "1,2",
                "--scope",
                "global",
                "--layers",
                "0,2",
                "--out",
                out,
            ],
        )
    };
    run(&d("a.csv"));
    run(&d("b.csv"));
    let a = std::fs::read(d("a.csv")).unwrap();
    assert_eq!(a, std::fs::read(d("b.csv")).unwrap());

    let result = ExperimentResult::load(d("a.csv")).unwrap();
    assert!(result.rows.iter().all(|r| r.experiment == ExperimentKind::LayerSweep));
    assert!(result.rows.iter().all(|r| r.status == Status::Ok));
    let acc: Vec<_> = result.rows.iter().filter(|r| r.metric == "accuracy").collect();
    // 2 layers x 1 scope x 2 alphas x 2 ks x 3 conditions
    assert_eq!(acc.len(), 24);
    assert!(acc.iter().all(|r| r.layer == 0 || r.layer == 2));

    numspace(&cfg, &["report", "--input", &d("a.csv"), "--out", &d("report")]);
    assert!(std::fs::read_dir(dir.path().join("report")).unwrap().count() > 0);
}

#[test]
fn missing_checkpoint_fails_with_hint() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path());
    let out = Command::new(BIN)
        .arg("--config")
        .arg(&cfg)
        .args(["run", "--layers", "1"])
        .output()
        .unwrap();
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("train-mlm"));
}

#[test]
fn bad_flags_are_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path());
    for args in [
        &["run", "--experiment", "nonsense"][..],
        &["run", "--alpha-grid=-1", "--train-missing"],
        &["run", "--layers", "9", "--train-missing"],
    ] {
        let out = Command::new(BIN).arg("--config").arg(&cfg).args(args).output().unwrap();
        assert!(!out.status.success(), "{args:?} succeeded");
    }
}
