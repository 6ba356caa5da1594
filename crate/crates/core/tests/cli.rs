//! Exit codes of the `padrec` binary.

use std::path::Path;
use std::process::{Command, Output};

fn padrec(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_padrec")).args(args).output().unwrap()
}

fn code(out: &Output) -> i32 {
    out.status.code().unwrap()
}

fn path(p: &Path) -> &str {
    p.to_str().unwrap()
}

#[test]
fn usage_errors_exit_one() {
    assert_eq!(code(&padrec(&[])), 1);
    assert_eq!(code(&padrec(&["gen-data"])), 1);
    assert_eq!(code(&padrec(&["bench", "--data", "d", "--target", "t", "--draft", "x", "--out", "o", "--seeds", "a"])), 1);
    assert_eq!(code(&padrec(&["--help"])), 0);
}

#[test]
fn missing_inputs_exit_three() {
    let dir = tempfile::tempdir().unwrap();
    let out = padrec(&["train-target", "--data", path(&dir.path().join("nope")), "--out", path(&dir.path().join("t.ckpt"))]);
    assert_eq!(code(&out), 3, "{}", String::from_utf8_lossy(&out.stderr));
    let out = padrec(&["plot", "--report", path(&dir.path().join("r.csv")), "--out", path(dir.path())]);
    assert_eq!(code(&out), 3);
}

#[test]
fn bad_ablation_and_configs_exit_one() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("data");
    let out = padrec(&["gen-data", "--out", path(&data), "--items", "40", "--users", "20"]);
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
    let out = padrec(&["train-draft", "--data", path(&data), "--target", "t", "--out", "d", "--ablation", "sideways"]);
    assert_eq!(code(&out), 1);
    assert_eq!(code(&padrec(&["gen-data", "--out", path(&data), "--items", "0"])), 1);
}
