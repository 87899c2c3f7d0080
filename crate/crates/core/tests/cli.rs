//! The `irdro` executable end to end on a small corpus.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use irdro::config::Settings;

fn irdro(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_irdro"))
        .current_dir(dir)
        .args(args)
        .output()
        .expect("binary runs")
}

fn error_line(out: &Output) -> String {
    let stderr = String::from_utf8_lossy(&out.stderr);
    stderr.lines().last().unwrap_or_default().to_string()
}

/// Temp dir with a 32 KiB corpus and a short pretrain run in `pre/`.
fn workspace() -> tempfile::TempDir {
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path();
    assert!(irdro(p, &["corpus", "synth", "--out", "c.txt", "--bytes", "32768", "--seed", "2"]).status.success());
    let out = irdro(p, &["pretrain", "--corpus", "c.txt", "--steps", "20", "--out-dir", "pre"]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    dir
}

fn files_except_manifest(dir: &Path) -> Vec<(PathBuf, Vec<u8>)> {
    let mut out: Vec<(PathBuf, Vec<u8>)> = fs::read_dir(dir)
        .unwrap()
        .map(|e| e.unwrap().path())
        .filter(|p| p.file_name().unwrap() != "manifest.json")
        .map(|p| (PathBuf::from(p.file_name().unwrap()), fs::read(&p).unwrap()))
        .collect();
    out.sort();
    out
}

#[test]
fn verify_math_succeeds_without_runs() {
    let dir = tempfile::tempdir().unwrap();
    let out = irdro(dir.path(), &["verify-math", "--instances", "50"]);
    assert!(out.status.success());
    let stdout = String::from_utf8_lossy(&out.stdout);
    assert!(stdout.contains("PASS objective_identity"));
    assert!(!stdout.contains("FAIL"));
}

#[test]
fn error_categories_and_exit_codes() {
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path();

    let out = irdro(p, &["continual", "--no-such-flag"]);
    assert_eq!(out.status.code(), Some(2));
    assert!(error_line(&out).starts_with("error category=usage exit=2"));

    fs::write(p.join("bad.toml"), "seed = 1\n[continual.selector]\nstrategy = \"best\"\n").unwrap();
    let out = irdro(p, &["eval", "--config", "bad.toml", "--checkpoint", "x.bin"]);
    assert_eq!(out.status.code(), Some(3));
    let line = error_line(&out);
    assert!(line.starts_with("error category=config exit=3"), "{line}");
    assert!(line.contains("line 3"), "{line}");

    let out = irdro(p, &["eval", "--corpus", "missing.txt", "--checkpoint", "x.bin"]);
    assert_eq!(out.status.code(), Some(4));
    assert!(error_line(&out).contains("missing.txt"));

    let out = irdro(p, &["compare", "no-run-here"]);
    assert_eq!(out.status.code(), Some(4));
    assert!(error_line(&out).contains("no-run-here"));

    let out = irdro(p, &["continual", "--selector", "midranking", "--n2", "0.01", "--init", "x.bin"]);
    assert_eq!(out.status.code(), Some(3));
}

#[test]
fn shipped_defaults_match_builtin_settings() {
    let path = Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs/defaults.toml");
    assert_eq!(Settings::load(&path).unwrap(), Settings::default());
    let low = Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs/low-lr.toml");
    assert_eq!(Settings::load(&low).unwrap().continual.optimizer.learning_rate, 2e-5);
}

#[test]
fn continual_run_layout_and_flags() {
    let ws = workspace();
    let p = ws.path();
    let out = irdro(
        p,
        &[
            "continual", "--corpus", "c.txt", "--init", "pre/checkpoint.bin", "--selector", "midranking",
            "--n1", "0.25", "--n2", "0.25", "--batch-size", "8", "--steps", "5", "--out-dir", "mid",
        ],
    );
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let manifest: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(p.join("mid/manifest.json")).unwrap()).unwrap();
    assert_eq!(manifest["status"], "completed");
    assert_eq!(manifest["config"]["continual"]["selector"]["strategy"], "midranking");
    assert_eq!(manifest["config"]["continual"]["steps"], 5);
    let steps = fs::read_to_string(p.join("mid/steps.jsonl")).unwrap();
    assert_eq!(steps.lines().count(), 5);
    for line in steps.lines() {
        let rec: irdro::train::StepRecord = serde_json::from_str(line).unwrap();
        let kept: Vec<usize> = rec.samples.iter().filter(|s| s.weight > 0.0).map(|s| s.rank).collect();
        assert_eq!(kept.len(), 2);
        assert!(kept.iter().all(|r| *r == 3 || *r == 4));
    }
    let snapshot = Settings::load(&p.join("mid/config.toml")).unwrap();
    assert_eq!(snapshot.continual.selector.n1, 0.25);
}

#[test]
fn identical_invocations_write_identical_files() {
    let ws = workspace();
    let p = ws.path();
    for d in ["a", "b"] {
        let out = irdro(
            p,
            &["continual", "--corpus", "c.txt", "--init", "pre/checkpoint.bin", "--steps", "6", "--out-dir", d],
        );
        assert!(out.status.success());
        assert!(irdro(p, &["eval", "--corpus", "c.txt", "--checkpoint", &format!("{d}/checkpoint.bin"), "--out-dir", &format!("eval-{d}")]).status.success());
    }
    assert_eq!(files_except_manifest(&p.join("a")), files_except_manifest(&p.join("b")));
    assert_eq!(files_except_manifest(&p.join("eval-a")), files_except_manifest(&p.join("eval-b")));
}

#[test]
fn sweep_and_compare() {
    let ws = workspace();
    let p = ws.path();
    let out = irdro(
        p,
        &["sweep", "--corpus", "c.txt", "--init", "pre/checkpoint.bin", "--axis", "steps", "--values", "0,3,3", "--out-dir", "sw"],
    );
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let csv = String::from_utf8_lossy(&out.stdout).to_string();
    let rows: Vec<Vec<&str>> = csv.lines().skip(1).map(|l| l.split(',').collect()).collect();
    assert_eq!(rows.len(), 3);
    assert_eq!(rows[0][2], "baseline");
    assert_eq!(rows[1][1], "0");
    assert_eq!(rows[0][3..5], rows[1][3..5]);
    assert!(String::from_utf8_lossy(&out.stderr).contains("duplicate sweep value 3"));

    let out = irdro(
        p,
        &["sweep", "--corpus", "c.txt", "--init", "pre/checkpoint.bin", "--axis", "learning-rate", "--values", "1e-5,-1,1e-3", "--steps", "2", "--out-dir", "lr"],
    );
    assert_eq!(out.status.code(), Some(6));
    let csv = String::from_utf8_lossy(&out.stdout).to_string();
    assert_eq!(csv.lines().count(), 5);
    assert_eq!(csv.lines().filter(|l| l.contains(",failed,")).count(), 1);

    let out = irdro(p, &["compare", "sw/steps-3", "sw/steps-3", "pre"]);
    assert!(out.status.success());
    let csv = String::from_utf8_lossy(&out.stdout).to_string();
    let lines: Vec<&str> = csv.lines().collect();
    assert_eq!(lines.len(), 1 + 3 + 2);
    assert_eq!(lines[2].split(',').skip(4).collect::<Vec<_>>(), lines[3].split(',').skip(4).collect::<Vec<_>>());

    // A run on a different corpus is refused.
    assert!(irdro(p, &["corpus", "synth", "--out", "d.txt", "--bytes", "32768", "--seed", "3"]).status.success());
    assert!(irdro(p, &["pretrain", "--corpus", "d.txt", "--steps", "2", "--out-dir", "other"]).status.success());
    let out = irdro(p, &["compare", "pre", "other"]);
    assert_eq!(out.status.code(), Some(6));
    assert!(error_line(&out).contains("different corpora"));
}

#[test]
fn inspect_losses_writes_ranking() {
    let ws = workspace();
    let p = ws.path();
    let out = irdro(p, &["inspect-losses", "--corpus", "c.txt", "--checkpoint", "pre/checkpoint.bin", "--top-k", "5", "--mid-k", "3", "--out-dir", "r"]);
    assert!(out.status.success());
    let files: Vec<_> = fs::read_dir(p.join("r")).unwrap().map(|e| e.unwrap().file_name()).collect();
    assert_eq!(files.len(), 1);
    let csv = fs::read_to_string(p.join("r").join(&files[0])).unwrap();
    assert_eq!(csv.lines().count(), 1 + 5 + 3);
}
