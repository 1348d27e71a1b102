//! Runs an iteration plan stage by stage and keeps an experiment manifest.
//!
//! Layout under the output directory:
//!
//! ```text
//! manifest.json
//! plan.json
//! corpus/corpus.json, corpus/waveforms.bin
//! stageN/features.bin, codebook.bin, labels.bin | soft_labels.bin,
//!        train.json, train.log, step-*.ckpt, model.ckpt
//! ```
//!
//! Manifest paths are relative to the output directory and training-config
//! paths to the stage directory, so two runs with the same seed produce identical bytes
//! wherever they live.

use std::fs;
use std::path::{Path, PathBuf};

use dicelab_core::clustering::{assign_hard, kmeans_fit, purity, soft_labels};
use dicelab_core::losses::{LossMode, LossReport};
use dicelab_core::model::{init_params, ModelConfig};
use dicelab_core::plan::{stage_seed, Arch, IterationPlan, LabelMode, StageSpec, TargetSource};
use dicelab_core::probes::{ProbeConfig, ProbeResult, ProbeTask};
use dicelab_core::rng::{derive_seed, hash_str};
use dicelab_core::train::TargetPaths;
use serde::{Deserialize, Serialize};

use crate::driver::{self, parse_log_line, RunOptions, TrainJob};
use crate::error::{Error, IoContext, Result};
use crate::features::{mfcc_features, teacher_features};
use crate::formats::{atomic_write, sha256_file, sha256_hex, write_codebook, write_features, write_labels, write_soft_labels, Checkpoint};
use crate::probing::probe_encoder;
use crate::store::{self, Corpus};

pub const MANIFEST_FILE: &str = "manifest.json";
pub const PLAN_FILE: &str = "plan.json";
pub const CORPUS_DIR: &str = "corpus";

/// A file under the output directory and its sha256.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Artifact {
    pub path: String,
    pub sha256: String,
}

impl Artifact {
    pub fn of(root: &Path, rel: &str) -> Result<Self> {
        Ok(Self {
            path: rel.to_string(),
            sha256: sha256_file(&root.join(rel))?,
        })
    }

    pub fn verify(&self, root: &Path) -> Result<()> {
        let p = root.join(&self.path);
        if sha256_file(&p)? != self.sha256 {
            return Err(Error::data(format!("{}: content changed since it was recorded", p.display())));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProbeRecord {
    pub task: ProbeTask,
    pub seed: u64,
    pub steps: usize,
    pub accuracy: f64,
    pub train_accuracy: f64,
    pub layer_weights: Vec<f64>,
}

impl ProbeRecord {
    pub fn new(cfg: &ProbeConfig, r: &ProbeResult) -> Self {
        Self {
            task: r.task,
            seed: cfg.seed,
            steps: cfg.steps,
            accuracy: r.accuracy,
            train_accuracy: r.train_accuracy,
            layer_weights: r.layer_weights.clone(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct StageMetrics {
    pub params: usize,
    pub kmeans_inertia: Option<f64>,
    /// Cluster purity against the synthetic phoneme truth.
    pub label_purity: Option<f64>,
    pub step0: Option<LossReport>,
    pub last_logged: Option<LossReport>,
    /// Whole-corpus loss after training with held-out mask draws.
    pub eval: Option<LossReport>,
    pub probes: Vec<ProbeRecord>,
}

impl StageMetrics {
    pub fn probe(&self, task: ProbeTask) -> Option<&ProbeRecord> {
        self.probes.iter().find(|p| p.task == task)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StageRecord {
    pub name: String,
    pub arch: Arch,
    pub model: ModelConfig,
    pub target: TargetSource,
    pub labels_mode: LabelMode,
    pub loss: LossMode,
    pub stage_seed: u64,
    pub kmeans_seed: u64,
    pub train_seed: u64,
    pub features: Option<Artifact>,
    pub codebook: Option<Artifact>,
    pub labels: Option<Artifact>,
    pub train_config: Artifact,
    pub log: Artifact,
    pub checkpoint: Artifact,
    pub metrics: StageMetrics,
}

/// A probe run recorded after the pipeline, e.g. by `dicelab probe`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExtraProbe {
    pub checkpoint: String,
    pub checkpoint_sha256: String,
    #[serde(flatten)]
    pub record: ProbeRecord,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentManifest {
    pub preset: String,
    pub seed: u64,
    pub plan_digest: String,
    pub plan: Artifact,
    pub corpus: Artifact,
    pub waveforms: Artifact,
    pub stages: Vec<StageRecord>,
    #[serde(default)]
    pub extra_probes: Vec<ExtraProbe>,
}

impl ExperimentManifest {
    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read(path).at(path)?;
        serde_json::from_slice(&text).map_err(|e| Error::format(path, format!("bad experiment manifest: {e}")))
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        atomic_write(path, &serde_json::to_vec_pretty(self).expect("manifest serializes"))
    }

    /// Checks every recorded digest against the files under `root`.
    pub fn verify(&self, root: &Path) -> Result<()> {
        for a in [&self.plan, &self.corpus, &self.waveforms] {
            a.verify(root)?;
        }
        for s in &self.stages {
            verify_stage(s, root)?;
        }
        Ok(())
    }
}

fn verify_stage(s: &StageRecord, root: &Path) -> Result<()> {
    for a in [&s.features, &s.codebook, &s.labels].into_iter().flatten() {
        a.verify(root)?;
    }
    for a in [&s.train_config, &s.log, &s.checkpoint] {
        a.verify(root)?;
    }
    Ok(())
}

pub fn plan_digest(plan: &IterationPlan) -> String {
    sha256_hex(&serde_json::to_vec(plan).expect("plan serializes"))
}

#[derive(Debug, Clone, Default)]
pub struct PipelineOptions {
    /// Print loss log lines and stage progress to stderr.
    pub echo: bool,
}

fn note(opts: &PipelineOptions, msg: impl AsRef<str>) {
    if opts.echo {
        eprintln!("{}", msg.as_ref());
    }
}

fn probe_seed(sseed: u64, task: ProbeTask) -> u64 {
    derive_seed(&[sseed, hash_str("probe"), hash_str(task.name())])
}

/// Runs every stage of `plan` into `out_dir`, rewriting the manifest after
/// each stage. A failing stage leaves earlier stages' files and manifest
/// entries untouched.
pub fn run_plan(plan: &IterationPlan, out_dir: &Path, opts: &PipelineOptions) -> Result<ExperimentManifest> {
    plan.validate()?;
    fs::create_dir_all(out_dir).at(out_dir)?;
    atomic_write(&out_dir.join(PLAN_FILE), &serde_json::to_vec_pretty(plan).expect("plan serializes"))?;

    note(opts, format!("generating corpus ({} utterances)", plan.corpus.n_utts));
    let corpus = Corpus::generate(&plan.corpus)?;
    corpus.save(&out_dir.join(CORPUS_DIR))?;
    let mut manifest = ExperimentManifest {
        preset: plan.name.clone(),
        seed: plan.seed,
        plan_digest: plan_digest(plan),
        plan: Artifact::of(out_dir, PLAN_FILE)?,
        corpus: Artifact::of(out_dir, &format!("{CORPUS_DIR}/{}", store::MANIFEST_FILE))?,
        waveforms: Artifact::of(out_dir, &format!("{CORPUS_DIR}/{}", store::WAVES_FILE))?,
        stages: Vec::new(),
        extra_probes: Vec::new(),
    };
    manifest.save(&out_dir.join(MANIFEST_FILE))?;

    for (i, stage) in plan.stages.iter().enumerate() {
        let prev = i.checked_sub(1).map(|j| manifest.stages[j].checkpoint.path.clone());
        let record = run_stage(plan, stage, prev.as_deref(), &corpus, out_dir, opts)?;
        for s in &manifest.stages {
            verify_stage(s, out_dir)?;
        }
        manifest.stages.push(record);
        manifest.save(&out_dir.join(MANIFEST_FILE))?;
    }
    Ok(manifest)
}

/// Features, codebook, labels, training and probes for one stage.
pub fn run_stage(
    plan: &IterationPlan,
    stage: &StageSpec,
    prev_checkpoint: Option<&str>,
    corpus: &Corpus,
    root: &Path,
    opts: &PipelineOptions,
) -> Result<StageRecord> {
    let dir_rel = stage.name.clone();
    let dir = root.join(&dir_rel);
    fs::create_dir_all(&dir).at(&dir)?;
    let rel = |f: &str| format!("{dir_rel}/{f}");
    let teacher = match (stage.target, prev_checkpoint) {
        (TargetSource::Mfcc, _) => None,
        (TargetSource::PrevModel { .. }, Some(p)) => Some(Checkpoint::load(&root.join(p))?.encoder()?),
        (TargetSource::PrevModel { .. }, None) => {
            return Err(Error::config(format!("{}: teacher stage is missing", stage.name)))
        }
    };

    let mut metrics = StageMetrics {
        params: scalar_count(&stage.model),
        ..Default::default()
    };
    let (mut features, mut codebook, mut labels) = (None, None, None);
    let mut targets = TargetPaths {
        corpus: format!("../{CORPUS_DIR}"),
        ..Default::default()
    };
    if stage.needs_labels() {
        note(opts, format!("{}: extracting features", stage.name));
        let dump = match (stage.target, &teacher) {
            (TargetSource::PrevModel { layer }, Some(t)) => teacher_features(t, corpus, layer)?,
            _ => mfcc_features(corpus)?,
        };
        write_features(&dir.join("features.bin"), &dump)?;
        features = Some(Artifact::of(root, &rel("features.bin"))?);

        note(opts, format!("{}: k-means with K={}", stage.name, stage.k()));
        let cb = kmeans_fit(&dump, &stage.kmeans)?;
        write_codebook(&dir.join("codebook.bin"), &cb)?;
        codebook = Some(Artifact::of(root, &rel("codebook.bin"))?);
        metrics.kmeans_inertia = Some(cb.inertia);

        let hard = assign_hard(&cb, &dump)?;
        let assigned: Vec<u16> = hard.iter().flat_map(|s| s.labels.iter().copied()).collect();
        let truth: Vec<u16> = corpus.utterances.iter().flat_map(|u| u.frame_truth.iter().copied()).collect();
        metrics.label_purity = Some(purity(&assigned, &truth, cb.k(), corpus.config().phonemes));
        match stage.labels {
            LabelMode::Hard => {
                write_labels(&dir.join("labels.bin"), cb.k(), &hard)?;
                labels = Some(Artifact::of(root, &rel("labels.bin"))?);
                targets.labels = Some("labels.bin".into());
            }
            LabelMode::Soft { tau } => {
                let soft = soft_labels(&cb, &dump, tau)?;
                write_soft_labels(&dir.join("soft_labels.bin"), tau, cb.k(), &soft)?;
                labels = Some(Artifact::of(root, &rel("soft_labels.bin"))?);
                targets.soft_labels = Some("soft_labels.bin".into());
            }
        }
    }
    if stage.train.loss.needs_teacher() {
        targets.teacher = prev_checkpoint.map(|p| format!("../{p}"));
    }

    let mut train = stage.train.clone();
    train.targets = targets;
    let job = TrainJob {
        model: stage.model.clone(),
        train,
    };
    atomic_write(&dir.join("train.json"), &serde_json::to_vec_pretty(&job).expect("job serializes"))?;
    note(opts, format!("{}: training {} steps", stage.name, job.train.steps));
    let run_opts = RunOptions {
        echo: opts.echo,
        ..RunOptions::new(&dir, &dir)
    };
    let summary = driver::run(&job, &run_opts)?;
    metrics.eval = summary.eval;
    let log_text = fs::read_to_string(dir.join(driver::LOG_FILE)).at(&dir)?;
    let mut logged = log_text.lines().filter_map(parse_log_line);
    metrics.step0 = logged.next().filter(|(s, _)| *s == 0).map(|(_, r)| r);
    metrics.last_logged = log_text.lines().filter_map(parse_log_line).last().map(|(_, r)| r);

    let sseed = stage_seed(plan.seed, &stage.name);
    let encoder = Checkpoint::load(&summary.checkpoint)?.encoder()?;
    for task in [ProbeTask::Phoneme, ProbeTask::Speaker] {
        note(opts, format!("{}: {} probe", stage.name, task.name()));
        let mut cfg = ProbeConfig::new(task, probe_seed(sseed, task));
        cfg.steps = plan.probe_steps;
        let r = probe_encoder(&encoder, corpus, &cfg)?;
        metrics.probes.push(ProbeRecord::new(&cfg, &r));
    }

    Ok(StageRecord {
        name: stage.name.clone(),
        arch: stage.arch,
        model: stage.model.clone(),
        target: stage.target,
        labels_mode: stage.labels,
        loss: stage.train.loss,
        stage_seed: sseed,
        kmeans_seed: stage.kmeans.seed,
        train_seed: stage.train.seed,
        features,
        codebook,
        labels,
        train_config: Artifact::of(root, &rel("train.json"))?,
        log: Artifact::of(root, &rel(driver::LOG_FILE))?,
        checkpoint: Artifact::of(root, &rel(driver::FINAL_CHECKPOINT))?,
        metrics,
    })
}

/// Scalar parameter count of a model.
pub fn scalar_count(cfg: &ModelConfig) -> usize {
    init_params(cfg, 0).map_or(0, |p| p.num_scalars())
}

/// Root directory of a manifest path.
pub fn manifest_root(manifest_path: &Path) -> PathBuf {
    manifest_path.parent().map_or_else(|| PathBuf::from("."), Path::to_path_buf)
}
