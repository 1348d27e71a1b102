use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use dicelab::formats::{read_codebook, read_features, read_labels, read_soft_labels, sha256_file};

fn dicelab(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_dicelab"))
        .args(args)
        .output()
        .expect("binary runs")
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

#[test]
fn no_arguments_prints_usage() {
    let o = dicelab(&[]);
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).to_lowercase().contains("usage"));
}

#[test]
fn unknown_subcommand_is_a_config_error() {
    let o = dicelab(&["frobnicate"]);
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).starts_with("ERROR(config):"), "{}", stderr(&o));
}

#[test]
fn negative_tau_is_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    let o = dicelab(&[
        "labels",
        "--codebook",
        p(&d.join("c.bin")),
        "--features",
        p(&d.join("f.bin")),
        "--mode",
        "soft",
        "--tau",
        "-1",
        "--out",
        p(&d.join("l.bin")),
    ]);
    assert_eq!(o.status.code(), Some(1));
    let err = stderr(&o);
    assert!(err.starts_with("ERROR(config):"), "{err}");
    assert_eq!(err.lines().count(), 1);
    assert!(!d.join("l.bin").exists());
}

#[test]
fn missing_checkpoint_is_an_io_error() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    let o = dicelab(&["--out-dir", p(d), "gen-corpus", "--n-utts", "2", "--phonemes", "2", "--speakers", "1"]);
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    let o = dicelab(&[
        "extract-features",
        "--corpus",
        p(d),
        "--checkpoint",
        p(&d.join("nope.ckpt")),
        "--layer",
        "1",
        "--out",
        p(&d.join("f.bin")),
    ]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).starts_with("ERROR(io):"));
}

#[test]
fn unknown_preset_and_bad_override() {
    let dir = tempfile::tempdir().unwrap();
    let o = dicelab(&["--out-dir", p(dir.path()), "distill", "--preset", "nope"]);
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).starts_with("ERROR(config):"));
    let o = dicelab(&["--out-dir", p(dir.path()), "distill", "--preset", "dice-narrow2", "--override", "steps"]);
    assert_eq!(o.status.code(), Some(1));
}

/// gen-corpus → extract-features → kmeans → labels, twice with the same seed.
fn chain(d: &Path, seed: &str) -> Vec<String> {
    let corpus = d.join("corpus");
    let ok = |o: Output| assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    ok(dicelab(&[
        "--out-dir",
        p(&corpus),
        "--seed",
        seed,
        "gen-corpus",
        "--n-utts",
        "6",
        "--phonemes",
        "4",
        "--speakers",
        "2",
        "--min-secs",
        "1",
        "--max-secs",
        "2",
    ]));
    ok(dicelab(&["-q", "extract-features", "--corpus", p(&corpus), "--out", p(&d.join("f.bin"))]));
    ok(dicelab(&[
        "--seed",
        seed,
        "kmeans",
        "--features",
        p(&d.join("f.bin")),
        "--k",
        "4",
        "--out",
        p(&d.join("c.bin")),
    ]));
    for (mode, out) in [("hard", "h.bin"), ("soft", "s.bin")] {
        ok(dicelab(&[
            "labels",
            "--codebook",
            p(&d.join("c.bin")),
            "--features",
            p(&d.join("f.bin")),
            "--mode",
            mode,
            "--tau",
            "2.5",
            "--out",
            p(&d.join(out)),
        ]));
    }
    ["corpus/corpus.json", "corpus/waveforms.bin", "f.bin", "c.bin", "h.bin", "s.bin"]
        .iter()
        .map(|f| sha256_file(&d.join(f)).unwrap())
        .collect()
}

#[test]
fn stage_commands_are_seed_deterministic() {
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    let c = tempfile::tempdir().unwrap();
    let da = chain(a.path(), "11");
    assert_eq!(da, chain(b.path(), "11"));
    let dc = chain(c.path(), "12");
    assert_ne!(da[1], dc[1]);

    let f = read_features(&a.path().join("f.bin")).unwrap();
    assert_eq!((f.dim, f.items.len()), (39, 6));
    let cb = read_codebook(&a.path().join("c.bin")).unwrap();
    assert_eq!((cb.k(), cb.dim(), cb.seed), (4, 39, 11));
    let (k, hard) = read_labels(&a.path().join("h.bin")).unwrap();
    assert_eq!(k, 4);
    let soft = read_soft_labels(&a.path().join("s.bin")).unwrap();
    for (h, s) in hard.iter().zip(&soft) {
        assert_eq!(h.labels.len(), s.frames());
        assert_eq!(s.tau, 2.5);
    }
    let left: Vec<_> = fs::read_dir(a.path())
        .unwrap()
        .map(|e| e.unwrap().file_name().into_string().unwrap())
        .filter(|n| n.contains(".tmp"))
        .collect();
    assert!(left.is_empty());
}

#[test]
fn train_from_config_file() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    chain(d, "3");
    let cfg = serde_json::json!({
        "model": {
            "layers": 1, "dim": 16, "heads": 2, "ffn": 32,
            "conv_channels": [4, 4, 8, 8, 16], "conv_strides": [5, 4, 4, 2, 2],
            "classes": 4, "mask_span": 5, "mask_start_prob": 0.08
        },
        "steps": 6, "batch_size": 2, "max_frames_per_batch": 400,
        "peak_lr": 5e-4, "warmup_steps": 1, "beta1": 0.9, "beta2": 0.98, "adam_eps": 1e-6,
        "clip_norm": 1.0, "seed": 1, "loss": {"kind": "hard"},
        "log_every": 2, "checkpoint_every": 3,
        "targets": {"corpus": "corpus", "labels": "h.bin"}
    });
    fs::write(d.join("train.json"), serde_json::to_vec(&cfg).unwrap()).unwrap();
    let run = |out: &str, extra: &[&str]| {
        let out = d.join(out);
        let mut args = vec!["--out-dir", p(&out), "train", "--config"];
        let conf = d.join("train.json");
        let conf = p(&conf).to_string();
        args.push(&conf);
        args.extend_from_slice(extra);
        let o = dicelab(&args);
        (o, out)
    };
    let (o, out) = run("run1", &[]);
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    let log = fs::read_to_string(out.join("train.log")).unwrap();
    let lines: Vec<&str> = log.lines().collect();
    assert_eq!(lines.len(), 4);
    assert!(lines[0].starts_with("step=0 total="));
    assert!(lines[3].starts_with("step=5 "));
    assert!(out.join("step-000003.ckpt").exists() && out.join("model.ckpt").exists());

    let (o, out2) = run("run2", &["--until", "3"]);
    assert_eq!(o.status.code(), Some(0));
    let ck = out2.join("step-000003.ckpt");
    let (o, out2) = run("run2", &["--resume", p(&ck)]);
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    assert_eq!(fs::read(out2.join("model.ckpt")).unwrap(), fs::read(out.join("model.ckpt")).unwrap());

    let (o, _) = run("run3", &["--seed", "2", "--resume", p(&ck)]);
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).starts_with("ERROR(config):"));
}
