//! End-to-end tests of the `capformer` binary: every subcommand, the exit
//! code contract (0 success, 1 failed check, 2 input error), and output
//! determinism.

use std::path::Path;
use std::process::{Command, Output};

fn capformer(args: &[&str], cwd: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_capformer"))
        .args(args)
        .current_dir(cwd)
        .output()
        .expect("binary runs")
}

fn stdout(out: &Output) -> String {
    String::from_utf8_lossy(&out.stdout).into_owned()
}

fn assert_code(out: &Output, code: i32) {
    assert_eq!(
        out.status.code(),
        Some(code),
        "stdout: {}\nstderr: {}",
        stdout(out),
        String::from_utf8_lossy(&out.stderr)
    );
}

fn make_dataset(dir: &Path) {
    let out = capformer(
        &["synth-data", "--out-dir", "data", "--n", "6", "--seed", "3", "--grid-len", "4", "--feature-dim", "16", "--tokens", "12"],
        dir,
    );
    assert_code(&out, 0);
    let out = capformer(
        &["build-vocab", "--manifest", "data/manifest.jsonl", "--out", "vocab.txt"],
        dir,
    );
    assert_code(&out, 0);
    assert!(stdout(&out).starts_with("vocab_size="));
}

#[test]
fn synth_data_and_vocab_are_reproducible() {
    let tmp = tempfile::tempdir().unwrap();
    let dir = tmp.path();
    make_dataset(dir);
    let first_manifest = std::fs::read(dir.join("data/manifest.jsonl")).unwrap();
    let first_vocab = std::fs::read(dir.join("vocab.txt")).unwrap();

    std::fs::remove_dir_all(dir.join("data")).unwrap();
    make_dataset(dir);
    assert_eq!(std::fs::read(dir.join("data/manifest.jsonl")).unwrap(), first_manifest);
    assert_eq!(std::fs::read(dir.join("vocab.txt")).unwrap(), first_vocab);
}

#[test]
fn build_vocab_min_freq_above_counts_keeps_reserved_only() {
    let tmp = tempfile::tempdir().unwrap();
    let dir = tmp.path();
    make_dataset(dir);
    let out = capformer(
        &["build-vocab", "--manifest", "data/manifest.jsonl", "--min-freq", "99999", "--out", "v2.txt"],
        dir,
    );
    assert_code(&out, 0);
    assert_eq!(stdout(&out).trim(), "vocab_size=4");
}

#[test]
fn train_writes_lock_checkpoints_and_loss_csv() {
    let tmp = tempfile::tempdir().unwrap();
    let dir = tmp.path();
    make_dataset(dir);

    // max-steps 0: initial checkpoint only, empty curve
    let out = capformer(
        &["train", "--manifest", "data/manifest.jsonl", "--vocab", "vocab.txt", "--out-dir", "run0", "--max-steps", "0"],
        dir,
    );
    assert_code(&out, 0);
    assert!(dir.join("run0/ckpt-000000.capc").exists());
    assert!(!dir.join("run0/ckpt-final.capc").exists(), "zero-step run wrote a final checkpoint");
    assert!(dir.join("run0/config.lock.json").exists());
    assert_eq!(std::fs::read_to_string(dir.join("run0/loss.csv")).unwrap(), "step,loss\n");

    let out = capformer(
        &[
            "train", "--manifest", "data/manifest.jsonl", "--vocab", "vocab.txt",
            "--out-dir", "run", "--max-steps", "4", "--batch-size", "3",
            "--d-model", "16", "--n-heads", "4", "--d-ff", "32", "--dropout", "0.0",
            "--enc-layers", "1", "--dec-layers", "1", "--seed", "5",
        ],
        dir,
    );
    assert_code(&out, 0);
    assert!(stdout(&out).contains("steps=4"));
    let csv = std::fs::read_to_string(dir.join("run/loss.csv")).unwrap();
    assert_eq!(csv.lines().count(), 5); // header + 4 steps
    assert!(csv.starts_with("step,loss\n1,"));

    let lock: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(dir.join("run/config.lock.json")).unwrap())
            .unwrap();
    assert_eq!(lock["model"]["d_model"], 16);
    assert_eq!(lock["train"]["max_steps"], 4);
    assert_eq!(lock["paths"]["vocab"], "vocab.txt");
}

#[test]
fn caption_beam_one_matches_default_greedy() {
    let tmp = tempfile::tempdir().unwrap();
    let dir = tmp.path();
    make_dataset(dir);
    let out = capformer(
        &[
            "train", "--manifest", "data/manifest.jsonl", "--vocab", "vocab.txt",
            "--out-dir", "run", "--max-steps", "3", "--batch-size", "2",
            "--d-model", "16", "--n-heads", "4", "--d-ff", "32", "--dropout", "0.0",
            "--enc-layers", "1", "--dec-layers", "1",
        ],
        dir,
    );
    assert_code(&out, 0);

    let args = ["caption", "--checkpoint", "run/ckpt-final.capc", "--features", "data/features/img0001.capf", "--vocab", "vocab.txt", "--max-len", "10"];
    let default_out = capformer(&args, dir);
    assert_code(&default_out, 0);
    let mut beam1_args = args.to_vec();
    beam1_args.extend(["--beam", "1"]);
    let beam1_out = capformer(&beam1_args, dir);
    assert_code(&beam1_out, 0);
    assert_eq!(stdout(&default_out), stdout(&beam1_out));

    // identical invocation is deterministic
    let again = capformer(&args, dir);
    assert_eq!(stdout(&default_out), stdout(&again));
}

#[test]
fn evaluate_pairs_self_evaluation_and_underflow() {
    let tmp = tempfile::tempdir().unwrap();
    let dir = tmp.path();

    std::fs::write(
        dir.join("self.jsonl"),
        r#"{"candidate":"a b c d e","references":["a b c d e"]}"#,
    )
    .unwrap();
    let out = capformer(&["evaluate", "--pairs", "self.jsonl"], dir);
    assert_code(&out, 0);
    let report: serde_json::Value = serde_json::from_str(stdout(&out).trim()).unwrap();
    for key in ["bleu1", "bleu2", "bleu3", "bleu4", "meteor", "rouge_l", "cider"] {
        assert!(report.get(key).is_some(), "missing key {key}");
    }
    assert_eq!(report["bleu1"], 1.0);
    assert_eq!(report["rouge_l"], 1.0);

    // zero 4-gram overlap → the exact underflow sentinel, digit for digit
    std::fs::write(
        dir.join("zero.jsonl"),
        r#"{"candidate":"a b c d e","references":["v w x y z"]}"#,
    )
    .unwrap();
    let out = capformer(&["evaluate", "--pairs", "zero.jsonl", "--out-dir", "reports"], dir);
    assert_code(&out, 0);
    assert!(stdout(&out).contains("2.2250738585072014e-308"), "stdout: {}", stdout(&out));
    assert!(dir.join("reports/report.json").exists());
    let csv = std::fs::read_to_string(dir.join("reports/per_sentence.csv")).unwrap();
    assert!(csv.starts_with("index,bleu1,bleu2,bleu3,bleu4,meteor,rouge_l,cider\n"));
}

#[cfg(not(feature = "corrupt-backward"))]
#[test]
fn gradcheck_passes_and_reports_the_error() {
    let tmp = tempfile::tempdir().unwrap();
    let out = capformer(&["gradcheck", "--seed", "7"], tmp.path());
    assert_code(&out, 0);
    let line = stdout(&out);
    assert!(line.starts_with("gradcheck max_rel_err="), "got: {line}");
    let err: f64 = line.trim().strip_prefix("gradcheck max_rel_err=").unwrap().parse().unwrap();
    assert!(err < 1e-6);
}

// With the corrupt-backward feature the same run must fail with exit 1.
#[cfg(feature = "corrupt-backward")]
#[test]
fn gradcheck_detects_a_corrupted_backward_rule() {
    let tmp = tempfile::tempdir().unwrap();
    let out = capformer(&["gradcheck", "--seed", "7"], tmp.path());
    assert_code(&out, 1);
}

#[test]
fn input_errors_exit_two() {
    let tmp = tempfile::tempdir().unwrap();
    let dir = tmp.path();

    // missing manifest
    let out = capformer(&["build-vocab", "--manifest", "nope.jsonl", "--out", "v.txt"], dir);
    assert_code(&out, 2);

    // record with zero captions
    std::fs::write(
        dir.join("bad.jsonl"),
        r#"{"image_id":"a","feature_path":"a.capf","captions":[]}"#,
    )
    .unwrap();
    let out = capformer(&["build-vocab", "--manifest", "bad.jsonl", "--out", "v.txt"], dir);
    assert_code(&out, 2);

    // invalid CAPF file for captioning
    make_dataset(dir);
    let out = capformer(
        &["train", "--manifest", "data/manifest.jsonl", "--vocab", "vocab.txt", "--out-dir", "run", "--max-steps", "0"],
        dir,
    );
    assert_code(&out, 0);
    std::fs::write(dir.join("broken.capf"), b"not a capf file").unwrap();
    let out = capformer(
        &["caption", "--checkpoint", "run/ckpt-000000.capc", "--features", "broken.capf", "--vocab", "vocab.txt"],
        dir,
    );
    assert_code(&out, 2);

    // missing feature file: error message names the path
    std::fs::write(
        dir.join("ghost.jsonl"),
        r#"{"image_id":"g","feature_path":"ghost.capf","captions":["x y"]}"#,
    )
    .unwrap();
    let out = capformer(
        &["train", "--manifest", "ghost.jsonl", "--vocab", "vocab.txt", "--out-dir", "run2", "--max-steps", "1"],
        dir,
    );
    assert_code(&out, 2);
    assert!(String::from_utf8_lossy(&out.stderr).contains("ghost.capf"));

    // evaluate needs exactly one input mode
    let out = capformer(&["evaluate"], dir);
    assert_code(&out, 2);
}

#[test]
fn resume_continues_from_checkpoint() {
    let tmp = tempfile::tempdir().unwrap();
    let dir = tmp.path();
    make_dataset(dir);
    let base_args = [
        "train", "--manifest", "data/manifest.jsonl", "--vocab", "vocab.txt",
        "--batch-size", "2", "--d-model", "16", "--n-heads", "4", "--d-ff", "32",
        "--dropout", "0.0", "--enc-layers", "1", "--dec-layers", "1", "--seed", "9",
        "--checkpoint-every", "2",
    ];

    let mut full = base_args.to_vec();
    full.extend(["--out-dir", "full", "--max-steps", "4"]);
    assert_code(&capformer(&full, dir), 0);

    let mut half = base_args.to_vec();
    half.extend(["--out-dir", "half", "--max-steps", "2"]);
    assert_code(&capformer(&half, dir), 0);

    let mut resumed = base_args.to_vec();
    resumed.extend(["--out-dir", "resumed", "--max-steps", "4", "--resume", "half/ckpt-final.capc"]);
    assert_code(&capformer(&resumed, dir), 0);

    let full_bytes = std::fs::read(dir.join("full/ckpt-final.capc")).unwrap();
    let resumed_bytes = std::fs::read(dir.join("resumed/ckpt-final.capc")).unwrap();
    assert_eq!(full_bytes, resumed_bytes);
}
