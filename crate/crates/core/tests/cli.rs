//! End-to-end runs of the command-line binary on the bundled digit data.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

fn data(name: &str) -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../../data").join(name)
}

fn run(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_aggexplain")).args(args).output().unwrap()
}

fn ok(args: &[&str]) -> String {
    let out = run(args);
    assert!(
        out.status.success(),
        "{args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout).unwrap()
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

#[test]
fn train_explain_and_experiments() {
    let dir = tempfile::tempdir().unwrap();
    let model = dir.path().join("net.xhw");
    let images = data("digits-images-idx3-ubyte");
    let stdout = ok(&["train", "--data", s(&images), "--out", s(&model), "--seed", "0", "--epochs", "1"]);
    assert!(stdout.contains("test accuracy"));
    assert!(model.exists());
    assert!(dir.path().join("net.xhw.arch.json").exists());

    let heat = dir.path().join("h.pgm");
    ok(&["explain", "--model", s(&model), "--image", s(&images), "--index", "8000", "--method", "lrp", "--out", s(&heat)]);
    let bytes = fs::read(&heat).unwrap();
    assert!(bytes.starts_with(b"P5\n28 28\n255\n"));
    assert_eq!(bytes.len(), 13 + 28 * 28);

    // a PGM written by one command is a valid input for another
    let again = dir.path().join("h2.pgm");
    ok(&["explain", "--model", s(&model), "--image", s(&heat), "--method", r#"{"method":"IG","steps":4}"#, "--out", s(&again)]);
    assert!(again.exists());

    let config = dir.path().join("c.json");
    fs::write(
        &config,
        format!(
            r#"{{"model":"net.xhw","dataset":{{"images":"{}","labels":"{}"}},"n_pairs":2,"seed":3,
                "explainers":["SM","GB"],"ensemble":{{"members":["SM","GB"],"kind":"mean"}},
                "attack":{{"eta":0.001,"iters":4,"gamma":null,"beta_start":10,"beta_end":100,"clamp":[0,1]}}}}"#,
            s(&images),
            s(&data("digits-labels-idx1-ubyte"))
        ),
    )
    .unwrap();
    let out = dir.path().join("out");
    let stdout = ok(&["transfer", "--config", s(&config), "--out", s(&out)]);
    assert!(stdout.contains("mean Δpcc"));
    ok(&["aggregate-bench", "--config", s(&config), "--out", s(&out)]);
    ok(&["blank-square", "--config", s(&config), "--out", s(&out)]);
    let table = fs::read_to_string(out.join("aggregate_robustness.csv")).unwrap();
    assert!(table.starts_with("# config: "));
    assert!(table.contains("\nAGG-Mean(SM+GB),2,"));
    for f in ["transfer_matrix.csv", "transfer_scatter.csv", "aggregate_samples.csv", "blank_square.csv", "blank_square_samples.csv"] {
        assert!(out.join(f).exists(), "{f}");
    }

    let gallery = dir.path().join("gallery");
    let stdout = ok(&["attack", "--model", s(&model), "--config", s(&config), "--out", s(&gallery)]);
    assert!(stdout.contains("AGG-Mean(SM+GB)"));
    assert!(gallery.join("SM_adversarial.pgm").exists());
    assert!(gallery.join("attack.csv").exists());
}

#[test]
fn bad_inputs_exit_nonzero() {
    let dir = tempfile::tempdir().unwrap();
    let config = dir.path().join("c.json");
    fs::write(&config, r#"{"model":"m","dataset":{"images":"i","labels":"l"},"iterations":5}"#).unwrap();
    let out = run(&["transfer", "--config", s(&config), "--out", s(dir.path())]);
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("iterations"));

    fs::write(&config, r#"{"model":"missing.xhw","dataset":{"images":"i","labels":"l"}}"#).unwrap();
    let out = run(&["blank-square", "--config", s(&config), "--out", s(dir.path())]);
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("does not exist"));

    let out = run(&["explain", "--model", "nope.xhw", "--image", "x.pgm", "--method", "GradCAM", "--out", "h.pgm"]);
    assert!(!out.status.success());
    assert!(!run(&["frobnicate"]).status.success());
}
