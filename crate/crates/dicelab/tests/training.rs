use std::fs;
use std::path::Path;

use dicelab::driver::{self, parse_log_line, periodic_name, RunOptions, TrainJob, LOG_FILE};
use dicelab::features::mfcc_features;
use dicelab::formats::{write_labels, Checkpoint};
use dicelab::store::Corpus;
use dicelab::{Error, ErrorClass};
use dicelab_core::clustering::{assign_hard, kmeans_fit, KMeansConfig};
use dicelab_core::corpus::CorpusConfig;
use dicelab_core::losses::LossMode;
use dicelab_core::model::{sample_mask, MaskSpec, ModelConfig};
use dicelab_core::train::{TargetPaths, TrainConfig};

const K: usize = 8;

fn model() -> ModelConfig {
    ModelConfig {
        layers: 2,
        dim: 32,
        heads: 2,
        ffn: 64,
        conv_channels: vec![8, 8, 16, 16, 32],
        conv_strides: vec![5, 4, 4, 2, 2],
        classes: K,
        mask_span: 5,
        mask_start_prob: 0.08,
    }
}

/// Corpus and MFCC k-means labels under `dir`.
fn setup(dir: &Path) {
    let corpus = Corpus::generate(&CorpusConfig::new(12, 4, 2, 21).with_duration(1.0)).unwrap();
    corpus.save(&dir.join("corpus")).unwrap();
    let dump = mfcc_features(&corpus).unwrap();
    let cb = kmeans_fit(&dump, &KMeansConfig::new(K, 3)).unwrap();
    write_labels(&dir.join("labels.bin"), K, &assign_hard(&cb, &dump).unwrap()).unwrap();
}

fn job(steps: usize) -> TrainJob {
    let mut train = TrainConfig::new(steps, 5, LossMode::Hard);
    train.batch_size = 4;
    train.log_every = 2;
    train.checkpoint_every = 10;
    train.targets = TargetPaths {
        corpus: "corpus".into(),
        labels: Some("labels.bin".into()),
        ..Default::default()
    };
    TrainJob { model: model(), train }
}

fn run(dir: &Path, out: &str, job: &TrainJob) -> Result<driver::TrainSummary, Error> {
    driver::run(job, &RunOptions::new(dir, dir.join(out)))
}

#[test]
fn zero_learning_rate_leaves_weights_unchanged() {
    let dir = tempfile::tempdir().unwrap();
    setup(dir.path());
    let mut j = job(1);
    j.train.peak_lr = 0.0;
    j.train.warmup_steps = 0;
    let s = run(dir.path(), "a", &j).unwrap();
    let ck = Checkpoint::load(&s.checkpoint).unwrap();
    assert_eq!(ck.header.step, 1);
    let fresh = dicelab_core::train::TrainState::init(&j.model, None, &j.train).unwrap();
    assert_eq!(ck.state.encoder, fresh.encoder);
}

#[test]
fn step_zero_loss_is_near_uniform() {
    let dir = tempfile::tempdir().unwrap();
    setup(dir.path());
    run(dir.path(), "a", &job(1)).unwrap();
    let log = fs::read_to_string(dir.path().join("a").join(LOG_FILE)).unwrap();
    let (step, r) = parse_log_line(log.lines().next().unwrap()).unwrap();
    assert_eq!(step, 0);
    assert!((r.total - (K as f64).ln()).abs() < 0.1, "step-0 loss {}", r.total);
    assert_eq!(r.ssl, r.total);
    assert!(r.masked_frames > 0);
}

#[test]
fn runs_are_deterministic_and_resume_exactly() {
    let dir = tempfile::tempdir().unwrap();
    setup(dir.path());
    let j = job(20);
    let a = run(dir.path(), "a", &j).unwrap();
    let b = run(dir.path(), "b", &j).unwrap();
    let read = |p: &Path| fs::read(p).unwrap();
    assert_eq!(read(&a.checkpoint), read(&b.checkpoint));
    let log_a = read(&dir.path().join("a").join(LOG_FILE));
    assert_eq!(log_a, read(&dir.path().join("b").join(LOG_FILE)));
    assert_eq!(String::from_utf8(log_a.clone()).unwrap().lines().count(), 11);
    assert!(dir.path().join("a").join(periodic_name(10)).exists());

    let mut opts = RunOptions::new(dir.path(), dir.path().join("c"));
    opts.halt_at = Some(7);
    let half = driver::run(&j, &opts).unwrap();
    assert_eq!(half.step, 7);
    assert!(half.eval.is_none());
    opts.halt_at = None;
    opts.resume = Some(half.checkpoint.clone());
    let rest = driver::run(&j, &opts).unwrap();
    assert_eq!(rest.steps_run, 13);
    assert_eq!(read(&rest.checkpoint), read(&a.checkpoint));
    assert_eq!(read(&dir.path().join("c").join(LOG_FILE)), log_a);
    assert_eq!(rest.eval, a.eval);

    // Already finished: nothing to do.
    opts.resume = Some(a.checkpoint.clone());
    let noop = driver::run(&j, &opts).unwrap();
    assert_eq!((noop.steps_run, noop.checkpoint), (0, a.checkpoint.clone()));

    let mut altered = j.clone();
    altered.train.peak_lr *= 2.0;
    opts.resume = Some(half.checkpoint);
    let err = driver::run(&altered, &opts).unwrap_err();
    assert_eq!(err.class(), ErrorClass::Config);
}

#[test]
fn checkpoint_round_trip_preserves_forward() {
    let dir = tempfile::tempdir().unwrap();
    setup(dir.path());
    let s = run(dir.path(), "a", &job(3)).unwrap();
    let ck = Checkpoint::load(&s.checkpoint).unwrap();
    let again = dir.path().join("copy.ckpt");
    ck.save(&again).unwrap();
    assert_eq!(fs::read(&again).unwrap(), fs::read(&s.checkpoint).unwrap());
    let enc = ck.encoder().unwrap();
    let enc2 = Checkpoint::load(&again).unwrap().encoder().unwrap();
    let corpus = Corpus::load(&dir.path().join("corpus")).unwrap();
    let u = &corpus.utterances[0];
    let mask = sample_mask(u.num_frames(), &enc.cfg, 1);
    assert_eq!(enc.forward(&u.samples, &mask).unwrap(), enc2.forward(&u.samples, &mask).unwrap());
    let clean = MaskSpec::clean(u.num_frames());
    assert_eq!(enc.forward(&u.samples, &clean).unwrap(), enc2.forward(&u.samples, &clean).unwrap());
}

#[test]
fn missing_targets_fail_before_training() {
    let dir = tempfile::tempdir().unwrap();
    setup(dir.path());
    let corpus = Corpus::load(&dir.path().join("corpus")).unwrap();
    let dump = mfcc_features(&corpus).unwrap();
    let cb = kmeans_fit(&dump, &KMeansConfig::new(K, 3)).unwrap();
    let mut labels = assign_hard(&cb, &dump).unwrap();
    labels.pop();
    write_labels(&dir.path().join("short.bin"), K, &labels).unwrap();
    let mut j = job(5);
    j.train.targets.labels = Some("short.bin".into());
    let err = run(dir.path(), "a", &j).unwrap_err();
    assert_eq!(err.class(), ErrorClass::Data);
    assert!(!dir.path().join("a").exists());

    j.train.targets.labels = Some("absent.bin".into());
    assert_eq!(run(dir.path(), "a", &j).unwrap_err().class(), ErrorClass::Io);
}

#[test]
fn divergence_aborts_with_a_diagnostic_checkpoint() {
    let dir = tempfile::tempdir().unwrap();
    setup(dir.path());
    let mut j = job(10);
    j.train.peak_lr = 1e30;
    j.train.warmup_steps = 0;
    j.train.clip_norm = 1e30;
    let err = run(dir.path(), "a", &j).unwrap_err();
    assert_eq!(err.class(), ErrorClass::Numeric);
    let diag: Vec<_> = fs::read_dir(dir.path().join("a"))
        .unwrap()
        .map(|e| e.unwrap().file_name().into_string().unwrap())
        .filter(|n| n.starts_with("diagnostic-"))
        .collect();
    assert_eq!(diag.len(), 1, "{err}");
}

#[test]
fn config_json_round_trips() {
    let j = job(7);
    let text = serde_json::to_vec_pretty(&j).unwrap();
    let back = TrainJob::from_json(&text, Path::new("x.json")).unwrap();
    assert_eq!(back, j);
    assert_eq!(back.digest(), j.digest());
    let v: serde_json::Value = serde_json::from_slice(&text).unwrap();
    assert_eq!(v["steps"], 7);
    assert_eq!(v["loss"]["kind"], "hard");
    let mut bad = v.clone();
    bad["warmup_steps"] = 100.into();
    let err = TrainJob::from_json(&serde_json::to_vec(&bad).unwrap(), Path::new("x.json")).unwrap_err();
    assert_eq!(err.class(), ErrorClass::Config);
}
