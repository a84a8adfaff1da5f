use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use serde_json::Value;

fn rearm(args: &[&str], cwd: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_rearm"))
        .args(args)
        .current_dir(cwd)
        .env("RUST_LOG", "warn")
        .env_remove("REARM_CACHE_DIR")
        .output()
        .expect("binary runs")
}

fn ok(out: &Output) -> String {
    assert!(out.status.success(), "stderr: {}", String::from_utf8_lossy(&out.stderr));
    String::from_utf8_lossy(&out.stdout).into_owned()
}

fn workspace(seed: &str) -> tempfile::TempDir {
    let dir = tempfile::tempdir().unwrap();
    ok(&rearm(&["generate-synthetic", "--dir", ".", "--seed", seed], dir.path()));
    fs::write(
        dir.path().join("short.conf"),
        "interactions = interactions.tsv\nvisual = visual.txt\ntextual = textual.txt\nd = 8\nepochs = 2\nlayers = 1\n",
    )
    .unwrap();
    dir
}

fn json(path: &Path) -> Value {
    serde_json::from_str(&fs::read_to_string(path).unwrap()).unwrap()
}

#[test]
fn help_exits_zero() {
    let dir = tempfile::tempdir().unwrap();
    for args in [&["--help"][..], &["train", "--help"], &["ablate", "--help"], &["--version"]] {
        let out = rearm(args, dir.path());
        assert_eq!(out.status.code(), Some(0), "{args:?}");
    }
    let help = ok(&rearm(&["train", "--help"], dir.path()));
    assert!(help.contains("--top-k-co") || help.contains("--top_k_co"));
    assert!(fs::read_dir(dir.path()).unwrap().next().is_none());
}

#[test]
fn usage_errors_exit_one() {
    let dir = workspace("1");
    fs::write(dir.path().join("bad.conf"), "interactions = interactions.tsv\nlearning_rate = 3\n").unwrap();
    assert_eq!(rearm(&["train", "--config", "bad.conf"], dir.path()).status.code(), Some(1));
    assert_eq!(rearm(&["train", "--bogus", "1"], dir.path()).status.code(), Some(1));
    assert_eq!(rearm(&["train", "--config", "short.conf", "--lr", "-1"], dir.path()).status.code(), Some(1));
    assert_eq!(rearm(&["train", "--config", "short.conf", "--softmax", "diag"], dir.path()).status.code(), Some(1));
}

#[test]
fn missing_input_is_a_data_error() {
    let dir = workspace("1");
    fs::remove_file(dir.path().join("visual.txt")).unwrap();
    let out = rearm(&["train", "--config", "short.conf"], dir.path());
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("visual.txt"));
}

#[test]
fn graph_cache_hits_and_rebuilds() {
    let dir = workspace("2");
    let first = ok(&rearm(&["build-graphs", "--config", "short.conf"], dir.path()));
    assert!(first.starts_with("built graphs"), "{first}");
    let second = ok(&rearm(&["build-graphs", "--config", "short.conf"], dir.path()));
    assert!(second.starts_with("cache hit"), "{second}");
    let changed = ok(&rearm(&["build-graphs", "--config", "short.conf", "--top-k-sem", "4"], dir.path()));
    assert!(changed.starts_with("built graphs"), "{changed}");
    // numerics-neutral settings share the cache
    let again = ok(&rearm(&["build-graphs", "--config", "short.conf", "--lr", "0.5"], dir.path()));
    assert!(again.starts_with("cache hit"), "{again}");
}

#[test]
fn train_then_evaluate_matches() {
    let dir = workspace("3");
    ok(&rearm(&["train", "--config", "short.conf", "--out", "run"], dir.path()));
    for f in ["model.ckpt", "history.jsonl", "report.json", "manifest.json"] {
        assert!(dir.path().join("run").join(f).is_file(), "{f}");
    }
    let report = json(&dir.path().join("run/report.json"));
    let rows = report.as_array().unwrap();
    assert_eq!(rows.len(), 4);
    assert_eq!(rows.iter().filter(|r| r["split"] == "test").count(), 2);
    let history = fs::read_to_string(dir.path().join("run/history.jsonl")).unwrap();
    let line: Value = serde_json::from_str(history.lines().next().unwrap()).unwrap();
    for key in ["epoch", "loss", "bpr", "cl", "ort", "val_recall20", "val_ndcg20", "seconds"] {
        assert!(line.get(key).is_some(), "{key}");
    }

    let printed = ok(&rearm(&["evaluate", "--config", "short.conf", "--out", "run"], dir.path()));
    let eval = fs::read(dir.path().join("run/eval_report.json")).unwrap();
    assert_eq!(eval, fs::read(dir.path().join("run/report.json")).unwrap());
    assert_eq!(printed.trim(), String::from_utf8(eval).unwrap().trim());
}

#[test]
fn foreign_checkpoint_is_refused() {
    let dir = workspace("4");
    ok(&rearm(&["train", "--config", "short.conf", "--out", "run"], dir.path()));
    let other = workspace("5");
    let ck = dir.path().join("run/model.ckpt");
    let out = rearm(
        &["evaluate", "--config", "short.conf", "--checkpoint", ck.to_str().unwrap()],
        other.path(),
    );
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("dataset"));
}

#[test]
fn wo_ort_forces_lambda_to_zero() {
    let dir = workspace("6");
    ok(&rearm(&["train", "--config", "short.conf", "--out", "run", "--ablation", "wo_ort"], dir.path()));
    let manifest = json(&dir.path().join("run/manifest.json"));
    assert_eq!(manifest["hyperparams"]["refine"]["lambda_ort"], 0.0);
    assert_eq!(manifest["ablation"]["no_ort"], true);
}

#[test]
fn diff_matrix_tsv() {
    let dir = workspace("7");
    ok(&rearm(&["train", "--config", "short.conf", "--out", "a"], dir.path()));
    ok(&rearm(&["train", "--config", "short.conf", "--out", "b", "--ablation", "wo_hom"], dir.path()));
    ok(&rearm(
        &["diff-matrix", "--config", "short.conf", "--out", "d", "--a", "a/model.ckpt", "--b", "b/model.ckpt", "--users", "0,3", "--items", "1,2,5"],
        dir.path(),
    ));
    let tsv = fs::read_to_string(dir.path().join("d/diff_matrix.tsv")).unwrap();
    let lines: Vec<&str> = tsv.lines().collect();
    assert_eq!(lines.len(), 3);
    assert_eq!(lines[0].split('\t').count(), 4);
    for line in &lines[1..] {
        for cell in line.split('\t').skip(1) {
            let v: f64 = cell.parse().unwrap();
            assert!(v.abs() <= 1.0);
        }
    }
    ok(&rearm(
        &["diff-matrix", "--config", "short.conf", "--out", "same", "--a", "a/model.ckpt", "--b", "a/model.ckpt"],
        dir.path(),
    ));
    let same = fs::read_to_string(dir.path().join("same/diff_matrix.tsv")).unwrap();
    assert_eq!(same.lines().count(), 21);
    assert!(same.lines().skip(1).flat_map(|l| l.split('\t').skip(1)).all(|c| c.parse::<f64>().unwrap() == 0.0));
}

#[test]
fn ablate_full_row_matches_train() {
    let dir = workspace("8");
    ok(&rearm(&["ablate", "--config", "short.conf", "--out", "abl"], dir.path()));
    ok(&rearm(&["train", "--config", "short.conf", "--out", "run"], dir.path()));
    assert_eq!(
        fs::read(dir.path().join("abl/full/report.json")).unwrap(),
        fs::read(dir.path().join("run/report.json")).unwrap()
    );
    let table = fs::read_to_string(dir.path().join("abl/ablation.md")).unwrap();
    assert_eq!(table.lines().count(), 11);
}
