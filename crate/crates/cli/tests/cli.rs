use std::path::Path;
use std::process::Command;

const TINY: &[&str] = &[
    "channel.m_subcarriers=16",
    "channel.n_bs=4",
    "model.m_subcarriers=16",
    "model.n_bs=4",
    "model.k_feedback=4",
    "model.l_symbols=2",
    "n_train=16",
    "n_val=8",
    "n_test=8",
    "train.epochs=1",
    "train.batch_size=8",
    "ce.batch_size=8",
];

fn csifb(args: &[&str], out: &Path) -> std::process::Output {
    // the subcommand comes first; later overrides win over the tiny defaults
    let mut cmd = Command::new(env!("CARGO_BIN_EXE_csifb"));
    cmd.arg(args[0]).arg("--out").arg(out).env("RUST_LOG", "warn");
    for o in TINY {
        cmd.arg("--override").arg(o);
    }
    cmd.args(&args[1..]).output().unwrap()
}

#[test]
fn train_evaluate_and_plot() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path();
    let status = csifb(&["train", "--seed", "3"], out);
    assert!(status.status.success(), "{}", String::from_utf8_lossy(&status.stderr));
    for f in ["model.ckpt", "train_log.csv", "config.toml"] {
        assert!(out.join(f).exists(), "{f}");
    }

    let eval_dir = out.join("eval");
    let ckpt = out.join("model.ckpt");
    let status = csifb(&["evaluate", "--seed", "3", "--checkpoint", ckpt.to_str().unwrap()], &eval_dir);
    assert!(status.status.success(), "{}", String::from_utf8_lossy(&status.stderr));
    let results = std::fs::read_to_string(eval_dir.join("results.csv")).unwrap();
    assert_eq!(results.lines().count(), 6);

    let plots = out.join("plots");
    let status = Command::new(env!("CARGO_BIN_EXE_csifb"))
        .args(["export-plots", "--input"])
        .arg(eval_dir.join("results.csv"))
        .arg("--out")
        .arg(&plots)
        .output()
        .unwrap();
    assert!(status.status.success());
    assert_eq!(std::fs::read_dir(&plots).unwrap().count(), 1);
}

#[test]
fn reciprocity_table_has_three_statistics() {
    let dir = tempfile::tempdir().unwrap();
    let status = csifb(&["analyze-reciprocity"], dir.path());
    assert!(status.status.success(), "{}", String::from_utf8_lossy(&status.stderr));
    let text = std::fs::read_to_string(dir.path().join("reciprocity.csv")).unwrap();
    assert_eq!(text.lines().count(), 4);
}

#[test]
fn config_errors_exit_with_one() {
    let dir = tempfile::tempdir().unwrap();
    let bad = csifb(&["train", "--override", "model.n_bs=8"], dir.path());
    assert_eq!(bad.status.code(), Some(1));
    let missing = csifb(&["train", "--config", "/nonexistent.toml"], dir.path());
    assert_eq!(missing.status.code(), Some(1));
    let variant = csifb(&["sweep", "--variants", "NoSuchNet"], dir.path());
    assert_eq!(variant.status.code(), Some(1));
}

#[test]
fn runtime_errors_exit_with_two() {
    let dir = tempfile::tempdir().unwrap();
    let junk = dir.path().join("junk.ckpt");
    std::fs::write(&junk, b"not a checkpoint").unwrap();
    let out = csifb(&["evaluate", "--checkpoint", junk.to_str().unwrap()], dir.path());
    assert_eq!(out.status.code(), Some(2));
}
