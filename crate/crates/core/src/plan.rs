//! Iterative self-distillation plans and the named experiment presets.
//!
//! Stage 1 always learns MFCC cluster targets. Every later stage uses the
//! previous stage's model as its teacher: cluster labels from one teacher
//! layer, teacher features for the feature loss, or both. Students always
//! start from fresh weights.

use alloc::format;
use alloc::string::{String, ToString};
use alloc::vec;
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::clustering::KMeansConfig;
use crate::corpus::CorpusConfig;
use crate::error::{Error, Result};
use crate::losses::LossMode;
use crate::model::ModelConfig;
use crate::rng::{derive_seed, hash_str};
use crate::train::{warmup_for, TrainConfig};

pub const MFCC_CLUSTERS: usize = 16;
pub const FEATURE_CLUSTERS: usize = 32;
pub const PIPELINE_KMEANS_RESTARTS: usize = 3;

/// Every preset name accepted by [`preset`].
pub const PRESETS: &[&str] = &[
    "dice-narrow2",
    "dice-narrow4",
    "dice-shallow4",
    "dice-shallow6",
    "feat-baseline",
    "mixed-0.1",
    "mixed-1.0",
    "soft-tau1",
    "soft-tau5",
    "soft-tau10",
    "scratch-lowerbound",
    "teacher-n2",
    "teacher-wide",
];

/// Architecture of a stage relative to the plan's base model.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", content = "factor", rename_all = "snake_case")]
pub enum Arch {
    Base,
    /// Width divided by the factor.
    Narrow(usize),
    /// This many transformer layers.
    Shallow(usize),
    /// Width multiplied by the factor.
    Wide(usize),
}

impl Arch {
    pub fn resolve(&self, base: &ModelConfig) -> Result<ModelConfig> {
        match *self {
            Arch::Base => Ok(base.clone()),
            Arch::Narrow(d) => base.narrow(d),
            Arch::Shallow(l) => base.shallow(l),
            Arch::Wide(f) => base.wide(f),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum TargetSource {
    Mfcc,
    /// The previous stage's model; labels come from this layer.
    PrevModel { layer: usize },
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum LabelMode {
    Hard,
    Soft { tau: f64 },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StageSpec {
    pub name: String,
    pub arch: Arch,
    pub model: ModelConfig,
    pub target: TargetSource,
    pub labels: LabelMode,
    pub kmeans: KMeansConfig,
    pub train: TrainConfig,
}

impl StageSpec {
    pub fn k(&self) -> usize {
        self.kmeans.k
    }

    pub fn needs_labels(&self) -> bool {
        self.train.loss.needs_labels()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IterationPlan {
    pub name: String,
    pub seed: u64,
    pub corpus: CorpusConfig,
    pub base: ModelConfig,
    pub stages: Vec<StageSpec>,
    /// Adam steps for each probe.
    pub probe_steps: usize,
}

/// Seed for a named stage under a global seed.
pub fn stage_seed(global: u64, stage: &str) -> u64 {
    derive_seed(&[global, hash_str(stage)])
}

impl IterationPlan {
    pub fn validate(&self) -> Result<()> {
        self.corpus.validate()?;
        self.base.validate()?;
        if self.stages.is_empty() {
            return Err(Error::config("a plan needs at least one stage"));
        }
        if self.probe_steps == 0 {
            return Err(Error::config("probe_steps must be >= 1"));
        }
        for (i, st) in self.stages.iter().enumerate() {
            st.model.validate()?;
            st.train.validate()?;
            let mut expected = st.arch.resolve(&self.base)?;
            expected.classes = st.model.classes;
            if st.model != expected {
                return Err(Error::config(format!(
                    "{}: model config does not match its architecture",
                    st.name
                )));
            }
            if !matches!(st.arch, Arch::Wide(_)) {
                self.base.variant_of(&st.model)?;
            }
            if st.model.classes != st.kmeans.k {
                return Err(Error::config(format!(
                    "{}: model predicts {} classes but k-means has {}",
                    st.name, st.model.classes, st.kmeans.k
                )));
            }
            if st.kmeans.k < 2 || st.kmeans.n_init == 0 {
                return Err(Error::config(format!("{}: invalid k-means settings", st.name)));
            }
            if let LabelMode::Soft { tau } = st.labels {
                if !(tau > 0.0 && tau.is_finite()) {
                    return Err(Error::config(format!("{}: temperature must be > 0", st.name)));
                }
            }
            let soft_loss = matches!(st.train.loss, LossMode::Soft);
            if soft_loss != matches!(st.labels, LabelMode::Soft { .. }) {
                return Err(Error::config(format!(
                    "{}: soft loss and soft labels must go together",
                    st.name
                )));
            }
            match (i, st.target) {
                (0, TargetSource::Mfcc) => {
                    if st.train.loss.needs_teacher() {
                        return Err(Error::config("the first stage has no teacher for a feature loss"));
                    }
                }
                (0, _) => return Err(Error::config("the first stage must learn MFCC targets")),
                (_, TargetSource::Mfcc) => {
                    return Err(Error::config(format!(
                        "{}: later stages take targets from the previous model",
                        st.name
                    )))
                }
                (_, TargetSource::PrevModel { layer }) => {
                    let prev = &self.stages[i - 1].model;
                    if layer == 0 || layer > prev.layers {
                        return Err(Error::config(format!(
                            "{}: teacher layer {} outside 1..={}",
                            st.name, layer, prev.layers
                        )));
                    }
                    if st.train.loss.needs_teacher() && st.model.layers > prev.layers {
                        return Err(Error::config(format!(
                            "{}: student deeper than its teacher",
                            st.name
                        )));
                    }
                }
            }
        }
        Ok(())
    }

    /// Applies `key=value`. Keys without a `stageN.` prefix apply to every
    /// stage.
    pub fn apply_override(&mut self, key: &str, value: &str) -> Result<()> {
        let (target, field) = match key.split_once('.') {
            Some((s, f)) if s.starts_with("stage") => {
                let n: usize = s[5..]
                    .parse()
                    .map_err(|_| Error::config(format!("bad stage in override {key:?}")))?;
                if n == 0 || n > self.stages.len() {
                    return Err(Error::config(format!("override {key:?}: no such stage")));
                }
                (Some(n - 1), f)
            }
            _ => (None, key),
        };
        let uint = || -> Result<usize> {
            value
                .parse()
                .map_err(|_| Error::config(format!("override {key}: expected an integer, got {value:?}")))
        };
        let real = || -> Result<f64> {
            value
                .parse()
                .map_err(|_| Error::config(format!("override {key}: expected a number, got {value:?}")))
        };
        match field {
            "n_utts" => self.corpus.n_utts = uint()?,
            "phonemes" => self.corpus.phonemes = uint()?,
            "speakers" => self.corpus.speakers = uint()?,
            "secs" => self.corpus = self.corpus.clone().with_duration(real()?),
            "snr_db" => self.corpus.snr_db = real()?,
            "probe_steps" => self.probe_steps = uint()?,
            _ => {
                let v = value;
                for (i, st) in self.stages.iter_mut().enumerate() {
                    if target.is_some_and(|t| t != i) {
                        continue;
                    }
                    match field {
                        "steps" => {
                            st.train.steps = uint()?;
                            st.train.warmup_steps = warmup_for(st.train.steps);
                        }
                        "batch_size" => st.train.batch_size = uint()?,
                        "max_frames" => st.train.max_frames_per_batch = uint()?,
                        "lr" => st.train.peak_lr = real()?,
                        "warmup" => st.train.warmup_steps = uint()?,
                        "clip" => st.train.clip_norm = real()?,
                        "log_every" => st.train.log_every = uint()?,
                        "checkpoint_every" => st.train.checkpoint_every = uint()?,
                        "kmeans_restarts" => st.kmeans.n_init = uint()?,
                        "kmeans_iters" => st.kmeans.max_iters = uint()?,
                        "k" => {
                            st.kmeans.k = uint()?;
                            st.model.classes = st.kmeans.k;
                        }
                        "teacher_layer" => {
                            if let TargetSource::PrevModel { layer } = &mut st.target {
                                *layer = uint()?;
                            }
                        }
                        "lambda" => {
                            if let LossMode::Mixed { lambda } = &mut st.train.loss {
                                *lambda = real()?;
                            }
                        }
                        "tau" => {
                            if let LabelMode::Soft { tau } = &mut st.labels {
                                *tau = real()?;
                            }
                        }
                        _ => return Err(Error::config(format!("unknown override key {key:?} (value {v:?})"))),
                    }
                }
            }
        }
        Ok(())
    }
}

struct StageDef {
    arch: Arch,
    target: TargetSource,
    labels: LabelMode,
    loss: LossMode,
}

fn hard(arch: Arch, target: TargetSource) -> StageDef {
    StageDef {
        arch,
        target,
        labels: LabelMode::Hard,
        loss: LossMode::Hard,
    }
}

/// Plan for a named preset; every seed derives from `seed`.
pub fn preset(name: &str, seed: u64) -> Result<IterationPlan> {
    let base = ModelConfig::toy_base(MFCC_CLUSTERS);
    let mid = TargetSource::PrevModel { layer: base.layers / 2 };
    let stage1 = hard(Arch::Base, TargetSource::Mfcc);
    let student = |arch, labels, loss| StageDef {
        arch,
        target: mid,
        labels,
        loss,
    };
    let n2 = Arch::Narrow(2);
    let defs = match name {
        "dice-narrow2" => vec![stage1, hard(n2, mid)],
        "dice-narrow4" => vec![stage1, hard(Arch::Narrow(4), mid)],
        "dice-shallow4" => vec![stage1, hard(Arch::Shallow(base.layers / 2), mid)],
        "dice-shallow6" => vec![stage1, hard(Arch::Shallow(1), mid)],
        "feat-baseline" => vec![stage1, student(n2, LabelMode::Hard, LossMode::Feat)],
        "mixed-0.1" => vec![stage1, student(n2, LabelMode::Hard, LossMode::Mixed { lambda: 0.1 })],
        "mixed-1.0" => vec![stage1, student(n2, LabelMode::Hard, LossMode::Mixed { lambda: 1.0 })],
        "soft-tau1" => vec![stage1, student(n2, LabelMode::Soft { tau: 1.0 }, LossMode::Soft)],
        "soft-tau5" => vec![stage1, student(n2, LabelMode::Soft { tau: 5.0 }, LossMode::Soft)],
        "soft-tau10" => vec![stage1, student(n2, LabelMode::Soft { tau: 10.0 }, LossMode::Soft)],
        "scratch-lowerbound" => vec![hard(n2, TargetSource::Mfcc), hard(n2, mid)],
        "teacher-n2" => vec![
            stage1,
            hard(Arch::Base, mid),
            hard(n2, TargetSource::PrevModel { layer: 3 * base.layers / 4 }),
        ],
        "teacher-wide" => vec![hard(Arch::Wide(2), TargetSource::Mfcc), hard(n2, mid)],
        other => {
            return Err(Error::config(format!(
                "unknown preset {other:?}; expected one of {}",
                PRESETS.join(", ")
            )))
        }
    };

    let mut stages = Vec::with_capacity(defs.len());
    for (i, d) in defs.into_iter().enumerate() {
        let name = format!("stage{}", i + 1);
        let sseed = stage_seed(seed, &name);
        let k = if i == 0 { MFCC_CLUSTERS } else { FEATURE_CLUSTERS };
        let mut model = d.arch.resolve(&base)?;
        model.classes = k;
        let mut kmeans = KMeansConfig::new(k, derive_seed(&[sseed, hash_str("kmeans")]));
        kmeans.n_init = PIPELINE_KMEANS_RESTARTS;
        let train = TrainConfig::new(2000, derive_seed(&[sseed, hash_str("train")]), d.loss);
        stages.push(StageSpec {
            name,
            arch: d.arch,
            model,
            target: d.target,
            labels: d.labels,
            kmeans,
            train,
        });
    }
    let plan = IterationPlan {
        name: name.to_string(),
        seed,
        corpus: CorpusConfig::new(200, 8, 8, stage_seed(seed, "corpus")).with_duration(2.0),
        base,
        stages,
        probe_steps: 2000,
    };
    plan.validate()?;
    Ok(plan)
}
