use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_guided-prune"))
}

fn blobs_config() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs/blobs.toml")
}

fn run(args: &[&str]) -> Output {
    let out = bin().args(args).output().unwrap();
    assert!(out.status.success(), "{args:?}\nstderr: {}", String::from_utf8_lossy(&out.stderr));
    out
}

#[test]
fn staged_commands_chain() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = blobs_config();
    let (cfg, out) = (cfg.to_str().unwrap(), dir.path().to_str().unwrap());

    run(&["train", "--config", cfg, "--out-dir", out, "--seed", "5"]);
    assert!(dir.path().join("pretrained.ckpt").is_file());

    let stdout = run(&["prune", "--out-dir", out, "--alpha", "0.6"]).stdout;
    let text = String::from_utf8(stdout).unwrap();
    assert!(text.contains("alpha: 0.6"), "{text}");
    assert!(text.contains("m_before"));

    run(&["finetune", "--config", cfg, "--out-dir", out, "--seed", "5"]);
    assert!(dir.path().join("finetuned.ckpt").is_file());

    let ckpt = dir.path().join("reduced.ckpt");
    run(&["heatmap", "--checkpoint", ckpt.to_str().unwrap(), "--layer", "1", "--output", &format!("{out}/h")]);
    let pgm = fs::read(dir.path().join("h.pgm")).unwrap();
    assert!(pgm.starts_with(b"P5\n"));
}

#[test]
fn pipeline_then_report() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("run");
    let out_s = out.to_str().unwrap();
    run(&["pipeline", "--config", blobs_config().to_str().unwrap(), "--out-dir", out_s, "--regularizer", "l1", "--lambda", "0.001"]);
    assert!(!out.join("INCOMPLETE").exists());
    let written = fs::read_to_string(out.join("sweep.csv")).unwrap();

    let again = dir.path().join("again");
    run(&["report", "--input", out_s, "--out-dir", again.to_str().unwrap()]);
    assert_eq!(fs::read_to_string(again.join("sweep.csv")).unwrap(), written);
    assert_eq!(
        fs::read_to_string(again.join("prune_report.txt")).unwrap(),
        fs::read_to_string(out.join("prune_report.txt")).unwrap()
    );
}

#[test]
fn sweep_prints_csv() {
    let dir = tempfile::tempdir().unwrap();
    let out = run(&["sweep", "--config", blobs_config().to_str().unwrap(), "--out-dir", dir.path().to_str().unwrap(), "--grid", "0,1"]);
    let text = String::from_utf8(out.stdout).unwrap();
    assert_eq!(text.lines().count(), 3);
    assert!(text.lines().nth(1).unwrap().starts_with("0,1,"));
}

#[test]
fn bad_input_fails_with_message() {
    let out = bin().args(["pipeline"]).output().unwrap();
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("--config"));

    let out = bin().args(["train", "--config", blobs_config().to_str().unwrap(), "--regularizer", "l3"]).output().unwrap();
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("unknown regularizer"));

    let out = bin().args(["prune", "--alpha", "0.5", "--target-ratio", "2"]).output().unwrap();
    assert!(!out.status.success());
}
