use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use mscgc_cli::INTERPRET_FILES;

const TINY: [&str; 9] = [
    "--synth.n_subjects=2",
    "--synth.sessions_per_subject=1",
    "--synth.trials_per_session=40",
    "--synth.channels=4",
    "--synth.windows=6",
    "--synth.raw_width=6",
    "--model.hidden=8",
    "--model.out_dim=6",
    "--train.epochs=2",
];

fn mscgc(cmd: &str, data: &Path, runs: &Path, extra: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_mscgc"))
        .arg(cmd)
        .arg(format!("--data.dir={}", data.display()))
        .arg(format!("--output.dir={}", runs.display()))
        .args(TINY)
        .args(extra)
        .output()
        .expect("binary runs")
}

fn code(out: &Output) -> i32 {
    out.status.code().expect("exit code")
}

fn only_run_dir(runs: &Path, prefix: &str) -> PathBuf {
    let mut dirs: Vec<PathBuf> = fs::read_dir(runs)
        .unwrap()
        .map(|e| e.unwrap().path())
        .filter(|p| p.file_name().unwrap().to_string_lossy().starts_with(prefix))
        .collect();
    dirs.sort();
    dirs.pop().expect("a run directory")
}

fn sorted_files(dir: &Path) -> Vec<String> {
    let mut names: Vec<String> = fs::read_dir(dir).unwrap().map(|e| e.unwrap().file_name().to_string_lossy().into_owned()).collect();
    names.sort();
    names
}

#[test]
fn gen_data_is_reproducible() {
    let tmp = tempfile::tempdir().unwrap();
    let runs = tmp.path().join("runs");
    for name in ["a", "b"] {
        let out = mscgc("gen-data", &tmp.path().join(name), &runs, &[]);
        assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
    }
    for f in ["samples.mstf", "labels.mstf", "meta.json"] {
        assert_eq!(fs::read(tmp.path().join("a").join(f)).unwrap(), fs::read(tmp.path().join("b").join(f)).unwrap());
    }
}

#[test]
fn train_eval_interpret_pipeline() {
    let tmp = tempfile::tempdir().unwrap();
    let (data, runs) = (tmp.path().join("data"), tmp.path().join("runs"));
    assert_eq!(code(&mscgc("gen-data", &data, &runs, &[])), 0);

    let out = mscgc("train", &data, &runs, &[]);
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
    let train_dir = only_run_dir(&runs, "train-");
    for f in ["config.json", "seed.txt", "split.json", "best.ckpt", "log.jsonl", "metrics.json", "metrics.csv"] {
        assert!(train_dir.join(f).is_file(), "missing {f}");
    }
    let echoed: serde_json::Value = serde_json::from_slice(&fs::read(train_dir.join("config.json")).unwrap()).unwrap();
    assert_eq!(echoed["train.epochs"], 2);
    assert_eq!(fs::read_to_string(train_dir.join("log.jsonl")).unwrap().lines().count(), 2);

    // a second run never reuses the first directory
    assert_eq!(code(&mscgc("train", &data, &runs, &[])), 0);
    let second = only_run_dir(&runs, "train-");
    assert_ne!(second, train_dir);
    assert_eq!(fs::read(train_dir.join("metrics.json")).unwrap(), fs::read(second.join("metrics.json")).unwrap());

    let ckpt = format!("--eval.checkpoint={}", train_dir.join("best.ckpt").display());
    assert_eq!(code(&mscgc("eval", &data, &runs, &[&ckpt])), 0);
    let eval_dir = only_run_dir(&runs, "eval-");
    assert_eq!(fs::read(eval_dir.join("metrics.json")).unwrap(), fs::read(train_dir.join("metrics.json")).unwrap());

    let ckpt = format!("--interpret.checkpoint={}", train_dir.join("best.ckpt").display());
    let out = mscgc("interpret", &data, &runs, &[&ckpt]);
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
    let dir = only_run_dir(&runs, "interpret-");
    let csvs: Vec<String> = sorted_files(&dir).into_iter().filter(|f| f.ends_with(".csv")).collect();
    let mut expected: Vec<String> = INTERPRET_FILES.iter().map(|s| s.to_string()).collect();
    expected.sort();
    assert_eq!(csvs, expected);
    let adjacency = fs::read_to_string(dir.join("adjacency.csv")).unwrap();
    assert_eq!(adjacency.lines().count(), 4);
    assert!(adjacency.lines().all(|l| l.split(',').count() == 4));
    let hubs = fs::read_to_string(dir.join("hubs.csv")).unwrap();
    assert_eq!(hubs.lines().count(), 5);
    assert!(dir.join("kan_histograms.mstf").is_file());
}

#[test]
fn checkpoint_for_other_shapes_is_rejected() {
    let tmp = tempfile::tempdir().unwrap();
    let (data, runs) = (tmp.path().join("data"), tmp.path().join("runs"));
    assert_eq!(code(&mscgc("gen-data", &data, &runs, &[])), 0);
    assert_eq!(code(&mscgc("train", &data, &runs, &["--train.epochs=1"])), 0);
    let ckpt = only_run_dir(&runs, "train-").join("best.ckpt");
    let other = tmp.path().join("other");
    assert_eq!(code(&mscgc("gen-data", &other, &runs, &["--synth.channels=6"])), 0);
    let out = mscgc("eval", &other, &runs, &["--synth.channels=6", &format!("--eval.checkpoint={}", ckpt.display())]);
    assert_eq!(code(&out), 2);
    assert!(String::from_utf8_lossy(&out.stderr).contains("compatibility"));
}

#[test]
fn ablation_writes_four_labelled_rows() {
    let tmp = tempfile::tempdir().unwrap();
    let (data, runs) = (tmp.path().join("data"), tmp.path().join("runs"));
    assert_eq!(code(&mscgc("gen-data", &data, &runs, &[])), 0);
    let out = mscgc("ablate", &data, &runs, &["--ablate.seeds=[3,4]", "--train.epochs=1"]);
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
    let dir = only_run_dir(&runs, "ablate-");
    let mut rd = csv::Reader::from_path(dir.join("ablation.csv")).unwrap();
    let rows: Vec<csv::StringRecord> = rd.records().map(|r| r.unwrap()).collect();
    let labels: Vec<&str> = rows.iter().map(|r| &r[0]).collect();
    assert_eq!(labels, ["Baseline (CBraMod+Linear)", "+KAN", "+MCRBlock-GCN", "MSCGC-KAN (full model)"]);
    for r in &rows {
        assert_eq!(&r[1], "3;4");
        assert_eq!(r[2].split(';').filter(|h| h.len() == 64).count(), 2);
        assert_eq!(&r[3], "2");
    }
    assert_eq!(fs::read_to_string(dir.join("seed.txt")).unwrap(), "3\n4\n");
}

#[test]
fn failed_ablation_runs_keep_their_rows() {
    let tmp = tempfile::tempdir().unwrap();
    let (data, runs) = (tmp.path().join("data"), tmp.path().join("runs"));
    assert_eq!(code(&mscgc("gen-data", &data, &runs, &[])), 0);
    let out = mscgc("ablate", &data, &runs, &["--ablate.seeds=[0]", "--train.epochs=1", "--train.lr_head=1e300", "--train.lr_backbone=1e300"]);
    assert_eq!(code(&out), 4);
    let dir = only_run_dir(&runs, "ablate-");
    let mut rd = csv::Reader::from_path(dir.join("ablation.csv")).unwrap();
    let rows: Vec<csv::StringRecord> = rd.records().map(|r| r.unwrap()).collect();
    assert_eq!(rows.len(), 4);
    assert_eq!(&rows[3][0], "MSCGC-KAN (full model)");
    assert!(rows.iter().any(|r| !r[10].is_empty()));
}

#[test]
fn exit_codes() {
    let tmp = tempfile::tempdir().unwrap();
    let (data, runs) = (tmp.path().join("data"), tmp.path().join("runs"));
    assert_eq!(code(&mscgc("train", &data, &runs, &["--train.no_such_key=1"])), 2);
    assert_eq!(code(&mscgc("train", &data, &runs, &[])), 2, "missing dataset");
    assert_eq!(code(&mscgc("gen-data", &data, &runs, &[])), 0);
    assert_eq!(code(&mscgc("eval", &data, &runs, &[])), 2, "missing checkpoint");
    assert_eq!(code(&mscgc("train", &data, &runs, &["--split.ratios=[10,5,6]"])), 2);
    let out = mscgc("train", &data, &runs, &["--train.lr_head=1e300", "--train.lr_backbone=1e300", "--train.clip_norm=1e300"]);
    assert_eq!(code(&out), 3, "{}", String::from_utf8_lossy(&out.stderr));
}

#[test]
fn gradcheck_reports_corrupted_layer() {
    let tmp = tempfile::tempdir().unwrap();
    let (data, runs) = (tmp.path().join("data"), tmp.path().join("runs"));
    let ok = mscgc("gradcheck", &data, &runs, &[]);
    assert_eq!(code(&ok), 0);
    assert!(String::from_utf8_lossy(&ok.stdout).contains("model.full"));
    let bad = mscgc("gradcheck", &data, &runs, &["--gradcheck.corrupt=layer.graph_propagate"]);
    assert_eq!(code(&bad), 1);
    let stderr = String::from_utf8_lossy(&bad.stderr);
    assert!(stderr.contains("layer.graph_propagate"), "{stderr}");
    assert!(!stderr.contains("layer.kan"), "{stderr}");
}
