//! Drives the installed binary end to end through a temp directory:
//! synth -> train -> eval -> mark, plus gradcheck and failure modes.

use std::path::Path;
use std::process::{Command, Output};

fn seqmark(args: &[&str], dir: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_seqmark"))
        .args(args)
        .current_dir(dir)
        .output()
        .expect("binary runs")
}

fn stdout(out: &Output) -> String {
    String::from_utf8_lossy(&out.stdout).into_owned()
}

fn stderr(out: &Output) -> String {
    String::from_utf8_lossy(&out.stderr).into_owned()
}

#[test]
fn synth_train_eval_mark_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let out = seqmark(
        &[
            "synth",
            "--seed",
            "5",
            "--count",
            "60",
            "--out",
            "corpus.tsv",
        ],
        dir.path(),
    );
    assert!(out.status.success(), "{}", stderr(&out));
    assert!(dir.path().join("corpus.tsv").exists());

    // A compact configuration keeps the training step quick.
    std::fs::write(
        dir.path().join("desk.conf"),
        "d_model=16\nencoder_depth=1\nd_ff=32\nd_adj=16\nd_inner=32\nd_state=4\n\
         h1=16\nh2=8\ntokenize=whitespace\nepochs=6\npatience=none\n",
    )
    .unwrap();
    let out = seqmark(
        &[
            "train",
            "--data",
            "corpus.tsv",
            "--config",
            "desk.conf",
            "--out",
            "model.ckpt",
        ],
        dir.path(),
    );
    assert!(out.status.success(), "{}", stderr(&out));
    let log = stdout(&out);
    assert!(log.contains("split 48/6/6"), "split line missing:\n{log}");
    assert!(dir.path().join("model.ckpt").exists());

    let out = seqmark(
        &[
            "eval",
            "--ckpt",
            "model.ckpt",
            "--data",
            "corpus.tsv",
            "--json",
        ],
        dir.path(),
    );
    assert!(out.status.success(), "{}", stderr(&out));
    let report: serde_json::Value = serde_json::from_str(&stdout(&out)).expect("valid JSON");
    assert_eq!(report["per_label"].as_array().unwrap().len(), 3);
    assert!(report["sentence_accuracy"].is_number());

    let out = seqmark(
        &[
            "mark",
            "--ckpt",
            "model.ckpt",
            "--text",
            "w1 w2 r0 r1 r2 r3 w4",
        ],
        dir.path(),
    );
    assert!(out.status.success(), "{}", stderr(&out));
}

#[test]
fn gradcheck_exits_cleanly_and_reports_groups() {
    let dir = tempfile::tempdir().unwrap();
    let out = seqmark(&["gradcheck", "--seed", "1"], dir.path());
    assert!(out.status.success(), "{}", stderr(&out));
    let log = stdout(&out);
    assert!(
        log.contains("crf.transitions"),
        "missing group lines:\n{log}"
    );
}

#[test]
fn missing_dataset_fails_with_io_error() {
    let dir = tempfile::tempdir().unwrap();
    let out = seqmark(
        &["train", "--data", "nope.tsv", "--out", "model.ckpt"],
        dir.path(),
    );
    assert!(!out.status.success());
    assert!(stderr(&out).contains("error:"), "{}", stderr(&out));
}

#[test]
fn bad_config_key_is_rejected_by_name() {
    let dir = tempfile::tempdir().unwrap();
    std::fs::write(dir.path().join("bad.conf"), "d_modell=16\n").unwrap();
    let out = seqmark(
        &["synth", "--seed", "1", "--count", "20", "--out", "c.tsv"],
        dir.path(),
    );
    assert!(out.status.success());
    let out = seqmark(
        &[
            "train", "--data", "c.tsv", "--config", "bad.conf", "--out", "m.ckpt",
        ],
        dir.path(),
    );
    assert!(!out.status.success());
    assert!(stderr(&out).contains("d_modell"), "{}", stderr(&out));
}
