//! One optimization step at a time: deterministic batching, per-utterance
//! masks, the configured objective, global-norm clipping and Adam with a
//! warmup/linear-decay schedule.
//!
//! All randomness is derived from `(seed, step, utterance id)`, so a
//! [`TrainState`] plus the config is enough to continue a run exactly.

use alloc::format;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::clustering::SoftLabelSequence;
use crate::error::{Error, Result};
use crate::losses::{feat_terms, hard_term, mixed_loss, soft_term, LossMode, LossReport, ProjectionSet};
use crate::model::{
    bind, forward_on_tape, frame_count, init_params, sample_mask, EncoderVars, LayerFeatures,
    MaskSpec, ModelConfig, ParamSet,
};
use crate::real::Real;
use crate::rng::{derive_seed, stream};
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

const MASK_TAG: u64 = 0x4D53_4B53;
const SHUFFLE_TAG: u64 = 0x5348_5546;
const PROJ_TAG: u64 = 0x4645_4154;

/// Where a training run reads its targets from.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct TargetPaths {
    pub corpus: String,
    #[serde(default)]
    pub labels: Option<String>,
    #[serde(default)]
    pub soft_labels: Option<String>,
    /// Checkpoint of the frozen teacher for feature distillation.
    #[serde(default)]
    pub teacher: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub steps: usize,
    /// Utterances per batch.
    pub batch_size: usize,
    pub max_frames_per_batch: usize,
    pub peak_lr: f64,
    pub warmup_steps: usize,
    pub beta1: f64,
    pub beta2: f64,
    pub adam_eps: f64,
    pub clip_norm: f64,
    pub seed: u64,
    pub loss: LossMode,
    pub log_every: usize,
    pub checkpoint_every: usize,
    #[serde(default)]
    pub targets: TargetPaths,
}

impl TrainConfig {
    /// Desk-scale defaults; warmup is 8% of `steps`.
    pub fn new(steps: usize, seed: u64, loss: LossMode) -> Self {
        Self {
            steps,
            batch_size: 8,
            max_frames_per_batch: 1600,
            peak_lr: 5e-4,
            warmup_steps: warmup_for(steps),
            beta1: 0.9,
            beta2: 0.98,
            adam_eps: 1e-6,
            clip_norm: 1.0,
            seed,
            loss,
            log_every: 10,
            checkpoint_every: 1000,
            targets: TargetPaths::default(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::config(m));
        if self.steps == 0 {
            return bad("steps must be >= 1".into());
        }
        if self.warmup_steps > self.steps {
            return bad(format!("warmup {} exceeds {} steps", self.warmup_steps, self.steps));
        }
        if self.batch_size == 0 || self.max_frames_per_batch == 0 {
            return bad("batch_size and max_frames_per_batch must be positive".into());
        }
        if !(self.peak_lr >= 0.0) || !self.peak_lr.is_finite() {
            return bad(format!("learning rate must be finite and >= 0, got {}", self.peak_lr));
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) || !(self.adam_eps > 0.0) {
            return bad("Adam needs betas in [0, 1) and eps > 0".into());
        }
        if !(self.clip_norm > 0.0) {
            return bad("clip norm must be positive".into());
        }
        if self.log_every == 0 || self.checkpoint_every == 0 {
            return bad("log and checkpoint intervals must be positive".into());
        }
        self.loss.validate()
    }

    /// Learning rate used at `step` (0-based).
    pub fn lr_at(&self, step: usize) -> f64 {
        if step < self.warmup_steps {
            self.peak_lr * (step + 1) as f64 / self.warmup_steps as f64
        } else {
            let rest = (self.steps - self.warmup_steps).max(1);
            self.peak_lr * self.steps.saturating_sub(step) as f64 / rest as f64
        }
    }
}

pub fn warmup_for(steps: usize) -> usize {
    libm::round(steps as f64 * 0.08) as usize
}

/// Utterance indices for `step`: one seeded permutation per epoch cut into
/// `batch_size` chunks, the trailing partial chunk dropped, then the longest
/// prefix within the frame cap (never empty).
pub fn select_batch(step: usize, frames: &[usize], cfg: &TrainConfig) -> Result<Vec<usize>> {
    let n = frames.len();
    if cfg.batch_size > n {
        return Err(Error::config(format!(
            "batch of {} utterances from a corpus of {}",
            cfg.batch_size, n
        )));
    }
    let per_epoch = n / cfg.batch_size;
    let (epoch, idx) = (step / per_epoch, step % per_epoch);
    let mut perm: Vec<usize> = (0..n).collect();
    perm.shuffle(&mut stream(&[cfg.seed, SHUFFLE_TAG, epoch as u64]));
    let chunk = &perm[idx * cfg.batch_size..(idx + 1) * cfg.batch_size];
    let mut out = Vec::with_capacity(chunk.len());
    let mut total = 0;
    for &u in chunk {
        if !out.is_empty() && total + frames[u] > cfg.max_frames_per_batch {
            break;
        }
        total += frames[u];
        out.push(u);
    }
    Ok(out)
}

/// Mask seed for one utterance at one step.
pub fn mask_seed(seed: u64, step: usize, utt_id: u32) -> u64 {
    derive_seed(&[seed, MASK_TAG, step as u64, utt_id as u64])
}

/// One utterance's inputs for a step.
#[derive(Debug, Clone)]
pub struct BatchItem<'a, S: Real = f32> {
    pub samples: &'a [f32],
    pub mask: MaskSpec,
    pub hard: Option<&'a [u16]>,
    pub soft: Option<&'a SoftLabelSequence>,
    /// Frozen teacher features, one tensor per teacher layer.
    pub teacher: Option<LayerFeatures<S>>,
}

/// Records the configured objective over a batch. SSL terms are averaged
/// over all masked frames of the batch, each feature layer over all of its
/// elements.
pub fn objective<S: Real>(
    tape: &mut Tape<S>,
    cfg: &ModelConfig,
    enc: &EncoderVars,
    proj: Option<(&ProjectionSet<S>, &[Var])>,
    mode: LossMode,
    items: &[BatchItem<'_, S>],
) -> Result<(Var, LossReport)> {
    let (w_ssl, w_feat) = mode.weights();
    let mut ssl_terms = Vec::new();
    let mut feat_terms_by_layer: Vec<Vec<Var>> = Vec::new();
    let mut masked = 0;
    let mut frames = 0;
    for item in items {
        let out = forward_on_tape(tape, enc, cfg, item.samples, &item.mask)?;
        frames += item.mask.frames();
        masked += item.mask.count();
        if w_ssl > 0.0 {
            let (term, _) = match (mode, item.hard, item.soft) {
                (LossMode::Soft, _, Some(soft)) => soft_term(tape, out.logits, soft, &item.mask)?,
                (LossMode::Soft, _, None) => return Err(Error::data("soft labels missing for an utterance")),
                (_, Some(hard), _) => hard_term(tape, out.logits, hard, &item.mask)?,
                (_, None, _) => return Err(Error::data("hard labels missing for an utterance")),
            };
            ssl_terms.push(term);
        }
        if w_feat > 0.0 {
            let (p, vars) = proj.ok_or_else(|| Error::config("feature loss needs a projection set"))?;
            let teacher = item
                .teacher
                .as_ref()
                .ok_or_else(|| Error::data("teacher features missing for an utterance"))?;
            let terms = feat_terms(tape, &out.layers, teacher, p, vars)?;
            if feat_terms_by_layer.is_empty() {
                feat_terms_by_layer = vec![Vec::new(); terms.len()];
            }
            for (acc, t) in feat_terms_by_layer.iter_mut().zip(terms) {
                acc.push(t);
            }
        }
    }
    if items.is_empty() {
        return Err(Error::data("empty batch"));
    }

    let mut report = LossReport {
        masked_frames: masked,
        ..LossReport::default()
    };
    let ssl = if w_ssl > 0.0 {
        let s = sum_vars(tape, &ssl_terms)?;
        let s = tape.scale(s, 1.0 / masked as f64);
        report.ssl = tape.value(s).item().to_f64();
        Some(s)
    } else {
        None
    };
    let feat = if w_feat > 0.0 {
        let (p, _) = proj.expect("checked above");
        let mut layer_losses = Vec::new();
        for (i, terms) in feat_terms_by_layer.iter().enumerate() {
            let s = sum_vars(tape, terms)?;
            let width = p.weights[i].shape()[1];
            layer_losses.push(tape.scale(s, p.alphas[i] / (frames * width) as f64));
        }
        let f = sum_vars(tape, &layer_losses)?;
        report.feat = tape.value(f).item().to_f64();
        Some(f)
    } else {
        None
    };
    let total = match (ssl, feat) {
        (Some(s), None) => s,
        (None, Some(f)) => f,
        (Some(s), Some(f)) => {
            let f = tape.scale(f, w_feat);
            tape.add(s, f)?
        }
        (None, None) => return Err(Error::config("loss mode has no active term")),
    };
    report.total = match mode {
        LossMode::Mixed { lambda } => mixed_loss(report.ssl, report.feat, lambda)?,
        _ => tape.value(total).item().to_f64(),
    };
    Ok((total, report))
}

fn sum_vars<S: Real>(tape: &mut Tape<S>, vars: &[Var]) -> Result<Var> {
    let (first, rest) = vars
        .split_first()
        .ok_or_else(|| Error::data("no loss terms to sum"))?;
    let mut acc = *first;
    for v in rest {
        acc = tape.add(acc, *v)?;
    }
    Ok(acc)
}

/// Everything needed to continue training: weights, Adam moments, step.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainState {
    pub step: usize,
    pub encoder: ParamSet<f32>,
    pub proj: Option<ProjectionSet<f32>>,
    /// First and second moments, encoder tensors then projections.
    pub adam_m: Vec<Tensor<f32>>,
    pub adam_v: Vec<Tensor<f32>>,
}

impl TrainState {
    /// Fresh state. Projection weights come from their own stream so the
    /// encoder initialization does not depend on the loss mode.
    pub fn init(model: &ModelConfig, teacher: Option<&ModelConfig>, cfg: &TrainConfig) -> Result<Self> {
        cfg.validate()?;
        let encoder = init_params(model, derive_seed(&[cfg.seed, 0x454E_43]))?;
        let proj = if cfg.loss.needs_teacher() {
            let t = teacher.ok_or_else(|| Error::config("feature loss needs a teacher model"))?;
            Some(ProjectionSet::default_for(model, t, derive_seed(&[cfg.seed, PROJ_TAG]))?)
        } else {
            None
        };
        let mut state = Self {
            step: 0,
            encoder,
            proj,
            adam_m: Vec::new(),
            adam_v: Vec::new(),
        };
        state.adam_m = state.tensors().map(|t| Tensor::zeros(t.shape())).collect();
        state.adam_v = state.adam_m.clone();
        Ok(state)
    }

    pub fn tensors(&self) -> impl Iterator<Item = &Tensor<f32>> {
        self.encoder
            .tensors
            .iter()
            .chain(self.proj.iter().flat_map(|p| p.weights.iter()))
    }

    fn tensors_mut(&mut self) -> impl Iterator<Item = &mut Tensor<f32>> {
        self.encoder
            .tensors
            .iter_mut()
            .chain(self.proj.iter_mut().flat_map(|p| p.weights.iter_mut()))
    }
}

/// Result of one update.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StepOutcome {
    pub report: LossReport,
    /// Global gradient norm before clipping.
    pub grad_norm: f64,
    pub lr: f64,
}

/// An utterance with its training targets, before masking.
#[derive(Debug, Clone, Copy)]
pub struct Example<'a> {
    pub utt_id: u32,
    pub samples: &'a [f32],
    pub hard: Option<&'a [u16]>,
    pub soft: Option<&'a SoftLabelSequence>,
    /// Frozen teacher layers on the clean input.
    pub teacher: Option<&'a LayerFeatures>,
}

/// Masks and tape inputs for `examples` at `step`.
pub fn prepare_batch<'a>(
    examples: &[Example<'a>],
    model: &ModelConfig,
    cfg: &TrainConfig,
    step: usize,
) -> Result<Vec<BatchItem<'a, f32>>> {
    examples
        .iter()
        .map(|ex| {
            let frames = frame_count(ex.samples.len());
            let mask = sample_mask(frames, model, mask_seed(cfg.seed, step, ex.utt_id));
            let teacher = match (cfg.loss.needs_teacher(), ex.teacher) {
                (true, Some(t)) => Some(t.clone()),
                (true, None) => return Err(Error::config("feature loss needs teacher features")),
                (false, _) => None,
            };
            Ok(BatchItem {
                samples: ex.samples,
                mask,
                hard: ex.hard,
                soft: ex.soft,
                teacher,
            })
        })
        .collect()
}

/// Loss on a batch without updating anything.
pub fn evaluate(
    state: &TrainState,
    model: &ModelConfig,
    cfg: &TrainConfig,
    items: &[BatchItem<'_, f32>],
) -> Result<LossReport> {
    let mut tape = Tape::new();
    let enc = bind(&mut tape, model, &state.encoder, false)?;
    let pvars: Vec<Var> = state
        .proj
        .iter()
        .flat_map(|p| p.weights.iter())
        .map(|w| tape.constant(w.clone()))
        .collect();
    let proj = state.proj.as_ref().map(|p| (p, pvars.as_slice()));
    Ok(objective(&mut tape, model, &enc, proj, cfg.loss, items)?.1)
}

/// Forward, backward, clip and Adam update; advances `state.step`.
pub fn train_step(
    state: &mut TrainState,
    model: &ModelConfig,
    cfg: &TrainConfig,
    items: &[BatchItem<'_, f32>],
) -> Result<StepOutcome> {
    let mut tape = Tape::new();
    let enc = bind(&mut tape, model, &state.encoder, true)?;
    let pvars: Vec<Var> = state
        .proj
        .iter()
        .flat_map(|p| p.weights.iter())
        .map(|w| tape.param(w.clone()))
        .collect();
    let proj = state.proj.as_ref().map(|p| (p, pvars.as_slice()));
    let (loss, report) = objective(&mut tape, model, &enc, proj, cfg.loss, items)?;
    if !report.total.is_finite() || !tape.value(loss).item().is_finite() {
        return Err(Error::Numeric(format!(
            "non-finite loss {} at step {}",
            report.total, state.step
        )));
    }
    let grads = tape.backward(loss);
    let vars: Vec<Var> = enc.all.iter().chain(&pvars).copied().collect();
    let mut g: Vec<Tensor<f32>> = vars.iter().map(|v| grads.wrt(*v)).collect();
    let grad_norm = clip_global_norm(&mut g, cfg.clip_norm);
    if !grad_norm.is_finite() {
        return Err(Error::Numeric(format!("non-finite gradient at step {}", state.step)));
    }
    let lr = cfg.lr_at(state.step);
    let t = (state.step + 1) as i32;
    let (b1, b2) = (cfg.beta1, cfg.beta2);
    let (c1, c2) = (1.0 - libm::pow(b1, t as f64), 1.0 - libm::pow(b2, t as f64));
    let mut m = core::mem::take(&mut state.adam_m);
    let mut v = core::mem::take(&mut state.adam_v);
    for (((p, g), m), v) in state.tensors_mut().zip(&g).zip(m.iter_mut()).zip(v.iter_mut()) {
        for (((p, g), m), v) in p
            .data_mut()
            .iter_mut()
            .zip(g.data())
            .zip(m.data_mut())
            .zip(v.data_mut())
        {
            let g = *g as f64;
            let mn = b1 * *m as f64 + (1.0 - b1) * g;
            let vn = b2 * *v as f64 + (1.0 - b2) * g * g;
            *m = mn as f32;
            *v = vn as f32;
            let update = lr * (mn / c1) / (libm::sqrt(vn / c2) + cfg.adam_eps);
            *p = (*p as f64 - update) as f32;
        }
    }
    state.adam_m = m;
    state.adam_v = v;
    state.step += 1;
    Ok(StepOutcome {
        report,
        grad_norm,
        lr,
    })
}

/// Scales `grads` in place so their joint L2 norm is at most `max_norm`;
/// returns the norm before scaling.
pub fn clip_global_norm<S: Real>(grads: &mut [Tensor<S>], max_norm: f64) -> f64 {
    let norm = libm::sqrt(
        grads
            .iter()
            .flat_map(|g| g.data())
            .map(|x| x.to_f64() * x.to_f64())
            .sum::<f64>(),
    );
    if norm > max_norm && norm.is_finite() {
        let s = max_norm / norm;
        for g in grads.iter_mut() {
            g.data_mut().iter_mut().for_each(|x| *x = S::from_f64(x.to_f64() * s));
        }
    }
    norm
}
