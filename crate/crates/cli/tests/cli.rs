//! End-to-end runs of the dzl binary against tiny synthetic corpora.

use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use dzl_core::model::{load_checkpoint, EncoderDecoderParams};
use dzl_core::video_io::{decode_pgm, save_dzlv, Frame, VideoClip};

fn dzl(args: &[&str], cwd: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_dzl"))
        .args(args)
        .current_dir(cwd)
        .output()
        .expect("binary runs")
}

fn assert_exit(out: &Output, code: i32) {
    assert_eq!(
        out.status.code(),
        Some(code),
        "stdout:\n{}\nstderr:\n{}",
        String::from_utf8_lossy(&out.stdout),
        String::from_utf8_lossy(&out.stderr)
    );
}

/// 2+2 clips, 8 frames, 48x48: enough for every command to run fast.
fn tiny_corpus(dir: &Path, seed: u64) -> PathBuf {
    let out = dzl(
        &[
            "synth",
            "--normal",
            "2",
            "--abnormal",
            "2",
            "--out",
            "corpus",
            "--seed",
            &seed.to_string(),
            "--working-size",
            "48",
            "--frames",
            "8",
        ],
        dir,
    );
    assert_exit(&out, 0);
    dir.join("corpus/manifest.json")
}

const TINY_TRAIN: &[&str] = &[
    "--working-size",
    "48",
    "--zone-k",
    "4",
    "--hidden",
    "6",
    "--layers",
    "1",
];

#[test]
fn synth_is_reproducible_and_complete() {
    let dir = tempfile::tempdir().unwrap();
    let manifest = tiny_corpus(dir.path(), 7);
    let names: Vec<String> = std::fs::read_dir(dir.path().join("corpus"))
        .unwrap()
        .map(|e| e.unwrap().file_name().into_string().unwrap())
        .collect();
    assert_eq!(names.len(), 6); // 4 clips + manifest + run_config
    assert!(names.iter().any(|n| n == "manifest.json"));
    assert!(names.iter().any(|n| n == "run_config.json"));

    let dir2 = tempfile::tempdir().unwrap();
    let manifest2 = tiny_corpus(dir2.path(), 7);
    assert_eq!(
        std::fs::read(&manifest).unwrap(),
        std::fs::read(&manifest2).unwrap()
    );
    assert_eq!(
        std::fs::read(dir.path().join("corpus/normal_000.dzlv")).unwrap(),
        std::fs::read(dir2.path().join("corpus/normal_000.dzlv")).unwrap()
    );
}

#[test]
fn synth_without_out_is_a_usage_error() {
    let dir = tempfile::tempdir().unwrap();
    let out = dzl(&["synth", "--normal", "2", "--abnormal", "2"], dir.path());
    assert_exit(&out, 1);
    let stderr = String::from_utf8_lossy(&out.stderr);
    assert!(stderr.contains("--out"), "stderr: {stderr}");
}

#[test]
fn train_writes_artifacts_and_epoch_zero_is_the_init() {
    let dir = tempfile::tempdir().unwrap();
    tiny_corpus(dir.path(), 3);
    let mut args = vec![
        "train",
        "--manifest",
        "corpus/manifest.json",
        "--out",
        "run",
        "--seed",
        "5",
        "--epochs",
        "0",
    ];
    args.extend_from_slice(TINY_TRAIN);
    let out = dzl(&args, dir.path());
    assert_exit(&out, 0);
    assert!(dir.path().join("run/history.csv").exists());
    assert!(dir.path().join("run/run_config.json").exists());

    // zero epochs: the checkpoint is exactly the seeded initialization
    let ck = load_checkpoint(&dir.path().join("run/checkpoint.ckpt")).unwrap();
    let init = EncoderDecoderParams::init(8, 6, 1, 0.1, 5).unwrap();
    assert_eq!(ck.params.param_slices(), init.param_slices());
    assert_eq!(
        std::fs::read_to_string(dir.path().join("run/history.csv")).unwrap(),
        "epoch,mean_loss,mean_accuracy\n"
    );
}

#[test]
fn train_then_score_and_eval_roundtrip() {
    let dir = tempfile::tempdir().unwrap();
    tiny_corpus(dir.path(), 11);
    let mut args = vec![
        "train",
        "--manifest",
        "corpus/manifest.json",
        "--out",
        "run",
        "--seed",
        "11",
        "--epochs",
        "2",
    ];
    args.extend_from_slice(TINY_TRAIN);
    assert_exit(&dzl(&args, dir.path()), 0);

    // same seed scores twice -> identical JSON
    let score_args = [
        "score",
        "--clip",
        "corpus/normal_000.dzlv",
        "--checkpoint",
        "run/checkpoint.ckpt",
        "--seed",
        "21",
        "--working-size",
        "48",
        "--repeats",
        "3",
    ];
    let a = dzl(&score_args, dir.path());
    let b = dzl(&score_args, dir.path());
    assert_exit(&a, 0);
    assert_eq!(a.stdout, b.stdout);
    let report: serde_json::Value = serde_json::from_slice(&a.stdout).unwrap();
    let score = report["score"].as_f64().unwrap();
    assert!((0.0..=1.0).contains(&score), "score {score}");
    assert!(report["call"].is_string());
    assert_eq!(report["repeats"].as_array().unwrap().len(), 3);
    // zone width defaults from the checkpoint
    assert_eq!(report["config"]["zone_k"], serde_json::Value::Null);

    let eval_args = [
        "eval",
        "--manifest",
        "corpus/manifest.json",
        "--checkpoint",
        "run/checkpoint.ckpt",
        "--out",
        "evalout",
        "--seed",
        "31",
        "--working-size",
        "48",
        "--repeats",
        "2",
    ];
    let out = dzl(&eval_args, dir.path());
    assert_exit(&out, 0);
    let summary: serde_json::Value = serde_json::from_slice(&out.stdout).unwrap();
    assert_eq!(summary["n"], 4);
    assert!(summary["auc"].is_f64());
    assert!(summary["ap"].is_f64());

    // the summary AUC must match the metrics module on the CSV contents
    let csv = std::fs::read_to_string(dir.path().join("evalout/scores.csv")).unwrap();
    let mut scores = Vec::new();
    let mut truths = Vec::new();
    for line in csv.lines().skip(1) {
        let cols: Vec<&str> = line.split(',').collect();
        scores.push(cols[1].parse::<f64>().unwrap());
        truths.push(cols[2] == "abnormal");
    }
    let auc = dzl_core::metrics::auc(&scores, &truths).unwrap();
    assert_eq!(summary["auc"].as_f64().unwrap(), auc);

    let on_disk: serde_json::Value = serde_json::from_slice(
        &std::fs::read(dir.path().join("evalout/summary.json")).unwrap(),
    )
    .unwrap();
    assert_eq!(summary, on_disk);
}

#[test]
fn eval_rejects_a_single_class_manifest() {
    let dir = tempfile::tempdir().unwrap();
    tiny_corpus(dir.path(), 13);
    let mut args = vec![
        "train",
        "--manifest",
        "corpus/manifest.json",
        "--out",
        "run",
        "--epochs",
        "0",
    ];
    args.extend_from_slice(TINY_TRAIN);
    assert_exit(&dzl(&args, dir.path()), 0);

    // keep only the normal entries
    let manifest = dir.path().join("corpus/manifest.json");
    let entries: serde_json::Value =
        serde_json::from_slice(&std::fs::read(&manifest).unwrap()).unwrap();
    let kept: Vec<serde_json::Value> = entries
        .as_array()
        .unwrap()
        .iter()
        .filter(|e| e["truth"] == false)
        .cloned()
        .collect();
    std::fs::write(&manifest, serde_json::to_string(&kept).unwrap()).unwrap();

    let out = dzl(
        &[
            "eval",
            "--manifest",
            "corpus/manifest.json",
            "--checkpoint",
            "run/checkpoint.ckpt",
            "--out",
            "evalout",
            "--working-size",
            "48",
            "--repeats",
            "1",
        ],
        dir.path(),
    );
    assert_exit(&out, 1);
    let stderr = String::from_utf8_lossy(&out.stderr);
    assert!(stderr.contains("class"), "stderr: {stderr}");
}

#[test]
fn corrupt_manifest_is_a_data_error() {
    let dir = tempfile::tempdir().unwrap();
    std::fs::write(dir.path().join("manifest.json"), b"{\"not\": ").unwrap();
    let out = dzl(
        &[
            "train",
            "--manifest",
            "manifest.json",
            "--out",
            "run",
        ],
        dir.path(),
    );
    assert_exit(&out, 2);
}

#[test]
fn explicit_zone_width_mismatch_is_a_data_error() {
    let dir = tempfile::tempdir().unwrap();
    tiny_corpus(dir.path(), 17);
    let mut args = vec![
        "train",
        "--manifest",
        "corpus/manifest.json",
        "--out",
        "run",
        "--epochs",
        "0",
    ];
    args.extend_from_slice(TINY_TRAIN);
    assert_exit(&dzl(&args, dir.path()), 0);

    let out = dzl(
        &[
            "score",
            "--clip",
            "corpus/normal_000.dzlv",
            "--checkpoint",
            "run/checkpoint.ckpt",
            "--working-size",
            "48",
            "--zone-k",
            "9",
        ],
        dir.path(),
    );
    assert_exit(&out, 2);
    let stderr = String::from_utf8_lossy(&out.stderr);
    assert!(stderr.contains("feature dim"), "stderr: {stderr}");
}

#[test]
fn config_file_fills_in_and_flags_override() {
    let dir = tempfile::tempdir().unwrap();
    tiny_corpus(dir.path(), 19);
    std::fs::write(
        dir.path().join("cfg.json"),
        br#"{"seed": 42, "repeats": 2, "working_size": 48}"#,
    )
    .unwrap();
    let mut args = vec![
        "train",
        "--manifest",
        "corpus/manifest.json",
        "--out",
        "run",
        "--epochs",
        "0",
    ];
    args.extend_from_slice(TINY_TRAIN);
    assert_exit(&dzl(&args, dir.path()), 0);

    let with_config = dzl(
        &[
            "score",
            "--clip",
            "corpus/normal_000.dzlv",
            "--checkpoint",
            "run/checkpoint.ckpt",
            "--config",
            "cfg.json",
        ],
        dir.path(),
    );
    assert_exit(&with_config, 0);
    let report: serde_json::Value = serde_json::from_slice(&with_config.stdout).unwrap();
    assert_eq!(report["config"]["seed"], 42);
    assert_eq!(report["config"]["repeats"], 2);

    // explicit flag beats the file
    let with_flag = dzl(
        &[
            "score",
            "--clip",
            "corpus/normal_000.dzlv",
            "--checkpoint",
            "run/checkpoint.ckpt",
            "--config",
            "cfg.json",
            "--seed",
            "43",
        ],
        dir.path(),
    );
    assert_exit(&with_flag, 0);
    let report: serde_json::Value = serde_json::from_slice(&with_flag.stdout).unwrap();
    assert_eq!(report["config"]["seed"], 43);

    // unknown keys in the config are rejected, not ignored
    std::fs::write(dir.path().join("bad.json"), br#"{"sed": 1}"#).unwrap();
    let bad = dzl(
        &[
            "score",
            "--clip",
            "corpus/normal_000.dzlv",
            "--checkpoint",
            "run/checkpoint.ckpt",
            "--config",
            "bad.json",
        ],
        dir.path(),
    );
    assert_exit(&bad, 2);
}

#[test]
fn flow_debug_reports_zero_motion_on_a_static_clip() {
    let dir = tempfile::tempdir().unwrap();
    let frame = Frame::from_fn(32, 32, |x, y| ((x + y) % 7) as f64 / 7.0).unwrap();
    let clip = VideoClip::new(vec![frame; 5]).unwrap();
    save_dzlv(&dir.path().join("static.dzlv"), &clip).unwrap();

    let out = dzl(
        &[
            "flow-debug",
            "--clip",
            "static.dzlv",
            "--frame-index",
            "1",
            "--stride",
            "4",
            "--out",
            "dbg",
            "--working-size",
            "32",
        ],
        dir.path(),
    );
    assert_exit(&out, 0);
    let pgm = std::fs::read(dir.path().join("dbg/flow_magnitude.pgm")).unwrap();
    let mag = decode_pgm(&pgm).unwrap();
    assert!(mag.data().iter().all(|&v| v == 0.0));

    let csv = std::fs::read_to_string(dir.path().join("dbg/flow_vectors.csv")).unwrap();
    assert_eq!(csv.lines().next().unwrap(), "x,y,dx,dy");
    assert_eq!(csv.lines().count(), 1 + 8 * 8);

    // one past the last valid pair
    let out = dzl(
        &[
            "flow-debug",
            "--clip",
            "static.dzlv",
            "--frame-index",
            "4",
            "--out",
            "dbg2",
            "--working-size",
            "32",
        ],
        dir.path(),
    );
    assert_exit(&out, 1);
}
