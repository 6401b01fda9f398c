use std::path::Path;
use std::process::{Command, Output};

use nnleak::network::{fixed_demo_neuron, load_model};

fn nnleak(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_nnleak"))
        .args(args)
        .env_remove("NNLEAK_PROFILE_DIR")
        .output()
        .expect("spawn")
}

fn p(path: &Path) -> &str {
    path.to_str().expect("utf-8 path")
}

#[test]
fn fixed_attack_recovers_fixed_demo_neuron() {
    let dir = tempfile::tempdir().unwrap();
    let model = dir.path().join("t2.nn");
    let out = dir.path().join("attack");
    assert!(
        nnleak(&["gen", "--example", "fixed-neuron", "--out", p(&model)])
            .status
            .success()
    );
    let r = nnleak(&[
        "attack-model",
        "--model",
        p(&model),
        "--precision",
        "fixed",
        "--out",
        p(&out),
    ]);
    assert!(r.status.success(), "{}", String::from_utf8_lossy(&r.stderr));
    assert_eq!(
        load_model(&out.join("recovered.nn")).unwrap(),
        fixed_demo_neuron()
    );
    let metrics = std::fs::read_to_string(out.join("metrics.txt")).unwrap();
    assert!(metrics.contains("exact=true"));
}

#[test]
fn same_config_gives_identical_bytes() {
    let dir = tempfile::tempdir().unwrap();
    let run = |tag: &str| {
        let model = dir.path().join(format!("{tag}.nn"));
        let out = dir.path().join(tag);
        assert!(nnleak(&[
            "gen",
            "--precision",
            "binary",
            "--dims",
            "8,4,2",
            "--seed",
            "9",
            "--out",
            p(&model)
        ])
        .status
        .success());
        assert!(nnleak(&[
            "attack-model",
            "--model",
            p(&model),
            "--precision",
            "binary",
            "--seed",
            "9",
            "--out",
            p(&out)
        ])
        .status
        .success());
        ["recovered.nn", "weights.csv", "neurons.csv", "metrics.txt"]
            .map(|f| std::fs::read(out.join(f)).unwrap())
    };
    assert_eq!(run("a"), run("b"));
}

#[test]
fn hardened_relu_verifies_constant_time() {
    let r = nnleak(&["verify-ct", "--kernel", "relu", "--hardened"]);
    assert!(r.status.success());
    let stdout = String::from_utf8(r.stdout).unwrap();
    let row = stdout
        .lines()
        .find(|l| l.starts_with("ct_relu"))
        .expect("relu row");
    assert!(row.ends_with("constant-time"), "{row}");

    let leaky = String::from_utf8(nnleak(&["verify-ct", "--kernel", "relu"]).stdout).unwrap();
    assert!(leaky.contains("leaky"), "{leaky}");
}

#[test]
fn exit_codes() {
    let dir = tempfile::tempdir().unwrap();
    assert_eq!(nnleak(&["frobnicate"]).status.code(), Some(2));
    assert_eq!(
        nnleak(&["verify-ct", "--kernel", "no-such-kernel"])
            .status
            .code(),
        Some(2)
    );
    assert_eq!(
        nnleak(&["verify-ct", "--kernel", "relu", "--samples", "0"])
            .status
            .code(),
        Some(2)
    );
    let missing = dir.path().join("missing.nn");
    assert_eq!(
        nnleak(&[
            "attack-model",
            "--model",
            p(&missing),
            "--out",
            p(&dir.path().join("o"))
        ])
        .status
        .code(),
        Some(1)
    );
}

#[test]
fn failed_run_leaves_no_outputs() {
    let dir = tempfile::tempdir().unwrap();
    let model = dir.path().join("t2.nn");
    let out = dir.path().join("attack");
    assert!(
        nnleak(&["gen", "--example", "fixed-neuron", "--out", p(&model)])
            .status
            .success()
    );
    let r = nnleak(&[
        "attack-model",
        "--model",
        p(&model),
        "--precision",
        "float",
        "--out",
        p(&out),
    ]);
    assert_eq!(r.status.code(), Some(1));
    assert!(!out.exists());

    let garbage = dir.path().join("bad.nn");
    std::fs::write(&garbage, "net float 1\nlayer 2 x relu\n").unwrap();
    let out = dir.path().join("harden");
    assert_eq!(
        nnleak(&["harden", "--model", p(&garbage), "--out", p(&out)])
            .status
            .code(),
        Some(1)
    );
    assert!(!out.exists());
}

#[test]
fn unknown_profile_is_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let model = dir.path().join("m.nn");
    let r = nnleak(&[
        "--profile",
        "no-such-profile",
        "gen",
        "--example",
        "float-neuron",
        "--out",
        p(&model),
    ]);
    assert_ne!(r.status.code(), Some(0));
    assert!(!model.exists());
}
