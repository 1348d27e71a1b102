use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use dicelab::formats::{read_labels, read_soft_labels, sha256_file};
use dicelab::pipeline::{run_plan, ExperimentManifest, PipelineOptions, MANIFEST_FILE};
use dicelab::report;
use dicelab_core::plan::{preset, IterationPlan};
use dicelab_core::probes::ProbeTask;

/// A preset shrunk to seconds of compute.
fn tiny(name: &str, seed: u64) -> IterationPlan {
    let mut plan = preset(name, seed).unwrap();
    for (k, v) in [
        ("n_utts", "10"),
        ("secs", "1"),
        ("steps", "4"),
        ("batch_size", "4"),
        ("probe_steps", "20"),
        ("kmeans_restarts", "1"),
        ("k", "8"),
    ] {
        plan.apply_override(k, v).unwrap();
    }
    plan
}

fn digests(root: &Path) -> BTreeMap<String, String> {
    let mut out = BTreeMap::new();
    let mut stack = vec![root.to_path_buf()];
    while let Some(d) = stack.pop() {
        for e in fs::read_dir(&d).unwrap() {
            let path = e.unwrap().path();
            if path.is_dir() {
                stack.push(path);
            } else {
                let rel = path.strip_prefix(root).unwrap().to_string_lossy().into_owned();
                out.insert(rel, sha256_file(&path).unwrap());
            }
        }
    }
    out
}

#[test]
fn reruns_are_byte_identical() {
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    let plan = tiny("dice-narrow2", 5);
    let ma = run_plan(&plan, a.path(), &PipelineOptions::default()).unwrap();
    let mb = run_plan(&plan, b.path(), &PipelineOptions::default()).unwrap();
    assert_eq!(ma, mb);
    assert_eq!(digests(a.path()), digests(b.path()));
    ma.verify(a.path()).unwrap();

    let c = tempfile::tempdir().unwrap();
    let mc = run_plan(&tiny("dice-narrow2", 6), c.path(), &PipelineOptions::default()).unwrap();
    assert_ne!(ma.stages[1].checkpoint.sha256, mc.stages[1].checkpoint.sha256);
}

#[test]
fn one_checkpoint_per_stage_and_history_is_untouched() {
    let dir = tempfile::tempdir().unwrap();
    let plan = tiny("teacher-n2", 2);
    let m = run_plan(&plan, dir.path(), &PipelineOptions::default()).unwrap();
    assert_eq!(m.stages.len(), 3);
    let ckpts: Vec<_> = m.stages.iter().map(|s| s.checkpoint.path.clone()).collect();
    assert_eq!(ckpts, ["stage1/model.ckpt", "stage2/model.ckpt", "stage3/model.ckpt"]);
    // Stage 1 files, as recorded before stage 2 ran, still match.
    let on_disk = ExperimentManifest::load(&dir.path().join(MANIFEST_FILE)).unwrap();
    assert_eq!(on_disk, m);
    m.verify(dir.path()).unwrap();
    for s in &m.stages {
        let (k, labels) = read_labels(&dir.path().join(&s.labels.as_ref().unwrap().path)).unwrap();
        assert_eq!(k, 8);
        assert_eq!(labels.len(), 10);
        assert!(s.metrics.step0.is_some());
        assert_eq!(s.metrics.probes.len(), 2);
        let w = &s.metrics.probe(ProbeTask::Phoneme).unwrap().layer_weights;
        assert_eq!(w.len(), s.model.layers + 1);
        assert!((w.iter().sum::<f64>() - 1.0).abs() < 1e-6);
    }

    // Tampering is detected.
    let victim = dir.path().join("stage1/codebook.bin");
    let mut bytes = fs::read(&victim).unwrap();
    bytes[20] ^= 0xff;
    fs::write(&victim, bytes).unwrap();
    assert!(m.verify(dir.path()).is_err());
}

#[test]
fn soft_and_feature_presets() {
    let dir = tempfile::tempdir().unwrap();
    let m = run_plan(&tiny("soft-tau5", 1), &dir.path().join("soft"), &PipelineOptions::default()).unwrap();
    let soft = read_soft_labels(&dir.path().join("soft").join(&m.stages[1].labels.as_ref().unwrap().path)).unwrap();
    assert!(soft.iter().all(|s| s.tau == 5.0 && s.k == 8));

    let f = run_plan(&tiny("feat-baseline", 1), &dir.path().join("feat"), &PipelineOptions::default()).unwrap();
    let s2 = &f.stages[1];
    assert!(s2.labels.is_none() && s2.codebook.is_none());
    let r = s2.metrics.step0.unwrap();
    assert_eq!(r.ssl, 0.0);
    assert!(r.feat > 0.0 && r.total == r.feat);

    let rows = report::rows(&[m, f]);
    assert_eq!(rows.len(), 4);
    let t = report::table(&rows);
    assert!(t.contains("soft tau=5") && t.contains("feat"));
}

#[test]
fn failed_stage_keeps_earlier_artifacts() {
    let dir = tempfile::tempdir().unwrap();
    let mut plan = tiny("dice-narrow2", 3);
    // A batch larger than the corpus is only rejected once stage 2 trains.
    plan.apply_override("stage2.batch_size", "50").unwrap();
    let err = run_plan(&plan, dir.path(), &PipelineOptions::default()).unwrap_err();
    assert_eq!(err.class(), dicelab::ErrorClass::Config);
    let m = ExperimentManifest::load(&dir.path().join(MANIFEST_FILE)).unwrap();
    assert_eq!(m.stages.len(), 1);
    m.verify(dir.path()).unwrap();
    assert!(!dir.path().join("stage2/model.ckpt").exists());
}
