//! Training objectives: masked cross-entropy on hard cluster labels, masked KL
//! on soft labels, projected layer-wise MSE feature distillation and their
//! weighted mixture.
//!
//! The plain functions evaluate a loss on concrete tensors in f64. The
//! `*_term` functions record the same quantities on a [`Tape`] as
//! unnormalized sums so a batch can be normalized once.

use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::clustering::SoftLabelSequence;
use crate::error::{Error, Result};
use crate::model::{LayerFeatures, MaskSpec, ModelConfig};
use crate::real::Real;
use crate::rng::stream;
use crate::tape::{Tape, Var};
use crate::tensor::{log_softmax_in_place, Tensor};

/// Tolerance on soft label rows summing to one.
pub const SOFT_ROW_TOL: f64 = 1e-4;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum LossMode {
    Hard,
    Soft,
    Feat,
    /// Hard-label SSL plus `lambda` times the feature loss.
    Mixed { lambda: f64 },
}

impl LossMode {
    pub fn needs_labels(&self) -> bool {
        !matches!(self, LossMode::Feat)
    }

    pub fn needs_teacher(&self) -> bool {
        match self {
            LossMode::Feat => true,
            LossMode::Mixed { lambda } => *lambda != 0.0,
            _ => false,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if let LossMode::Mixed { lambda } = self {
            check_lambda(*lambda)?;
        }
        Ok(())
    }

    /// Weights `(ssl, feat)` applied to the two terms.
    pub fn weights(&self) -> (f64, f64) {
        match *self {
            LossMode::Hard | LossMode::Soft => (1.0, 0.0),
            LossMode::Feat => (0.0, 1.0),
            LossMode::Mixed { lambda } if lambda.is_infinite() => (0.0, 1.0),
            LossMode::Mixed { lambda } => (1.0, lambda),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct LossReport {
    pub total: f64,
    pub ssl: f64,
    pub feat: f64,
    pub masked_frames: usize,
}

fn check_lambda(lambda: f64) -> Result<()> {
    if lambda.is_nan() || lambda < 0.0 {
        return Err(Error::config(format!("mixing weight must be >= 0, got {lambda}")));
    }
    Ok(())
}

/// `ssl + λ·feat`; `λ = ∞` selects the feature loss alone.
pub fn mixed_loss(ssl: f64, feat: f64, lambda: f64) -> Result<f64> {
    check_lambda(lambda)?;
    if lambda.is_infinite() {
        return Ok(feat);
    }
    if lambda == 0.0 {
        return Ok(ssl);
    }
    Ok(ssl + lambda * feat)
}

fn check_masked(logits_rows: usize, target_rows: usize, mask: &MaskSpec) -> Result<Vec<usize>> {
    if target_rows != logits_rows || mask.frames() != logits_rows {
        return Err(Error::dim(
            "ssl loss",
            format!(
                "logits {} frames, targets {}, mask {}",
                logits_rows,
                target_rows,
                mask.frames()
            ),
        ));
    }
    let rows = mask.masked_indices();
    if rows.is_empty() {
        return Err(Error::data("loss needs at least one masked frame"));
    }
    Ok(rows)
}

fn log_probs_row<S: Real>(logits: &Tensor<S>, t: usize) -> Vec<f64> {
    let mut row: Vec<f64> = logits.row(t).iter().map(|v| v.to_f64()).collect();
    log_softmax_in_place(&mut row);
    row
}

/// Mean negative log-likelihood of `labels` over masked frames.
pub fn ssl_hard_loss<S: Real>(logits: &Tensor<S>, labels: &[u16], mask: &MaskSpec) -> Result<f64> {
    let rows = check_masked(logits.rows(), labels.len(), mask)?;
    let k = logits.cols();
    let mut acc = 0.0;
    for &t in &rows {
        let z = labels[t] as usize;
        if z >= k {
            return Err(Error::data(format!("label {} outside {} classes", z, k)));
        }
        acc -= log_probs_row(logits, t)[z];
    }
    Ok(acc / rows.len() as f64)
}

fn check_soft_row(row: &[f64], t: usize) -> Result<()> {
    let s: f64 = row.iter().sum();
    if (s - 1.0).abs() > SOFT_ROW_TOL || row.iter().any(|p| !(*p >= 0.0)) {
        return Err(Error::data(format!(
            "soft label row {} is not a distribution (sums to {})",
            t, s
        )));
    }
    Ok(())
}

/// Mean `KL(soft ‖ softmax(logits))` over masked frames.
pub fn ssl_soft_loss<S: Real>(
    logits: &Tensor<S>,
    soft: &SoftLabelSequence,
    mask: &MaskSpec,
) -> Result<f64> {
    let rows = check_masked(logits.rows(), soft.frames(), mask)?;
    if soft.k != logits.cols() {
        return Err(Error::dim(
            "ssl_soft_loss",
            format!("{} logit classes vs {} soft classes", logits.cols(), soft.k),
        ));
    }
    let mut acc = 0.0;
    for &t in &rows {
        let p = soft.row(t);
        check_soft_row(p, t)?;
        let logq = log_probs_row(logits, t);
        for (pj, lq) in p.iter().zip(&logq) {
            if *pj > 0.0 {
                acc += pj * (libm::log(*pj) - lq);
            }
        }
    }
    Ok(acc / rows.len() as f64)
}

/// Linear maps from student layers to teacher layers with per-layer weights.
#[derive(Debug, Clone, PartialEq)]
pub struct ProjectionSet<S: Real = f32> {
    /// Student layer indices into its `L + 1` features.
    pub student_layers: Vec<usize>,
    /// Matching teacher layer indices.
    pub teacher_layers: Vec<usize>,
    /// `W_l`, each `[D^S × D^T]`.
    pub weights: Vec<Tensor<S>>,
    pub alphas: Vec<f64>,
}

impl<S: Real> ProjectionSet<S> {
    pub fn new(
        student_layers: Vec<usize>,
        teacher_layers: Vec<usize>,
        weights: Vec<Tensor<S>>,
        alphas: Vec<f64>,
    ) -> Result<Self> {
        let set = Self {
            student_layers,
            teacher_layers,
            weights,
            alphas,
        };
        set.validate()?;
        Ok(set)
    }

    pub fn validate(&self) -> Result<()> {
        let n = self.student_layers.len();
        if n == 0 || self.teacher_layers.len() != n || self.weights.len() != n || self.alphas.len() != n {
            return Err(Error::config(format!(
                "projection set needs matching nonempty layer lists, got {} / {} / {} / {}",
                n,
                self.teacher_layers.len(),
                self.weights.len(),
                self.alphas.len()
            )));
        }
        if self.alphas.iter().any(|a| !(*a >= 0.0) || !a.is_finite()) || self.alphas.iter().all(|a| *a == 0.0) {
            return Err(Error::config("layer weights must be >= 0 and not all zero"));
        }
        if self.weights.iter().any(|w| w.shape().len() != 2) {
            return Err(Error::config("projection matrices must be 2-d"));
        }
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.weights.len()
    }

    pub fn is_empty(&self) -> bool {
        self.weights.is_empty()
    }

    pub fn cast<T: Real>(&self) -> ProjectionSet<T> {
        ProjectionSet {
            student_layers: self.student_layers.clone(),
            teacher_layers: self.teacher_layers.clone(),
            weights: self.weights.iter().map(|w| w.cast()).collect(),
            alphas: self.alphas.clone(),
        }
    }
}

/// Teacher layer matched to student layer `l`: uniform subsampling.
pub fn teacher_layer_for(l: usize, student_layers: usize, teacher_layers: usize) -> usize {
    l * teacher_layers / student_layers
}

impl ProjectionSet<f32> {
    /// Every student transformer layer, uniform α, random `W` drawn from a
    /// stream separate from the encoder initialization.
    pub fn default_for(student: &ModelConfig, teacher: &ModelConfig, seed: u64) -> Result<Self> {
        if student.layers == 0 || student.layers > teacher.layers {
            return Err(Error::config(format!(
                "cannot map {} student layers onto {} teacher layers",
                student.layers, teacher.layers
            )));
        }
        let student_layers: Vec<usize> = (1..=student.layers).collect();
        let teacher_layers = student_layers
            .iter()
            .map(|&l| teacher_layer_for(l, student.layers, teacher.layers))
            .collect();
        let mut rng = stream(&[seed, 0x5052_4F4A]);
        let std = 1.0 / libm::sqrt(student.dim as f64);
        let normal = Normal::new(0.0, std).map_err(|e| Error::config(format!("{e}")))?;
        let n = student.dim * teacher.dim;
        let weights = student_layers
            .iter()
            .map(|_| {
                Tensor::new(
                    vec![student.dim, teacher.dim],
                    (0..n).map(|_| normal.sample(&mut rng) as f32).collect(),
                )
            })
            .collect::<Result<Vec<_>>>()?;
        let alphas = vec![1.0 / student.layers as f64; student.layers];
        Self::new(student_layers, teacher_layers, weights, alphas)
    }
}

fn layer_pair<'a, S: Real>(
    student: &'a [Tensor<S>],
    teacher: &'a [Tensor<S>],
    proj: &ProjectionSet<S>,
    i: usize,
) -> Result<(&'a Tensor<S>, &'a Tensor<S>)> {
    let (ls, lt) = (proj.student_layers[i], proj.teacher_layers[i]);
    if ls >= student.len() || lt >= teacher.len() {
        return Err(Error::config(format!(
            "layer pair ({}, {}) outside {} student / {} teacher layers",
            ls,
            lt,
            student.len(),
            teacher.len()
        )));
    }
    let (hs, ht) = (&student[ls], &teacher[lt]);
    let w = &proj.weights[i];
    if hs.rows() != ht.rows() || hs.cols() != w.shape()[0] || ht.cols() != w.shape()[1] {
        return Err(Error::dim(
            "feat_loss",
            format!(
                "student {:?} · W {:?} vs teacher {:?}",
                hs.shape(),
                w.shape(),
                ht.shape()
            ),
        ));
    }
    Ok((hs, ht))
}

/// `Σ_l α_l · mean((H_T − H_S W_l)²)`.
pub fn feat_loss<S: Real>(
    student: &LayerFeatures<S>,
    teacher: &LayerFeatures<S>,
    proj: &ProjectionSet<S>,
) -> Result<f64> {
    proj.validate()?;
    let mut total = 0.0;
    for i in 0..proj.len() {
        let (hs, ht) = layer_pair(student, teacher, proj, i)?;
        let pred = hs.matmul(&proj.weights[i])?;
        let sse: f64 = pred
            .data()
            .iter()
            .zip(ht.data())
            .map(|(a, b)| {
                let d = a.to_f64() - b.to_f64();
                d * d
            })
            .sum();
        total += proj.alphas[i] * sse / ht.len() as f64;
    }
    Ok(total)
}

/// Masked NLL sum on the tape; returns the term and the masked count.
pub fn hard_term<S: Real>(
    tape: &mut Tape<S>,
    logits: Var,
    labels: &[u16],
    mask: &MaskSpec,
) -> Result<(Var, usize)> {
    let (t, k) = (tape.value(logits).rows(), tape.value(logits).cols());
    let rows = check_masked(t, labels.len(), mask)?;
    let picks = rows
        .iter()
        .map(|&r| {
            let z = labels[r] as usize;
            if z >= k {
                Err(Error::data(format!("label {} outside {} classes", z, k)))
            } else {
                Ok((r, z))
            }
        })
        .collect::<Result<Vec<_>>>()?;
    let logp = tape.log_softmax(logits)?;
    Ok((tape.nll_sum(logp, &picks)?, rows.len()))
}

/// Masked KL sum on the tape; returns the term and the masked count.
pub fn soft_term<S: Real>(
    tape: &mut Tape<S>,
    logits: Var,
    soft: &SoftLabelSequence,
    mask: &MaskSpec,
) -> Result<(Var, usize)> {
    let (t, k) = (tape.value(logits).rows(), tape.value(logits).cols());
    let rows = check_masked(t, soft.frames(), mask)?;
    if soft.k != k {
        return Err(Error::dim(
            "soft_term",
            format!("{} logit classes vs {} soft classes", k, soft.k),
        ));
    }
    for &r in &rows {
        check_soft_row(soft.row(r), r)?;
    }
    let target = Tensor::new(
        vec![t, k],
        soft.probs.iter().map(|p| S::from_f64(*p)).collect(),
    )?;
    let logp = tape.log_softmax(logits)?;
    Ok((tape.kl_sum(logp, target, &rows)?, rows.len()))
}

/// Per projected layer, `Σ (H_T − H_S W)²` on the tape. `student` holds the
/// student's `L + 1` layer vars and `proj_vars` the registered `W_l`.
pub fn feat_terms<S: Real>(
    tape: &mut Tape<S>,
    student: &[Var],
    teacher: &[Tensor<S>],
    proj: &ProjectionSet<S>,
    proj_vars: &[Var],
) -> Result<Vec<Var>> {
    if proj_vars.len() != proj.len() {
        return Err(Error::config("one registered var per projection needed"));
    }
    let mut out = Vec::with_capacity(proj.len());
    for i in 0..proj.len() {
        let (ls, lt) = (proj.student_layers[i], proj.teacher_layers[i]);
        if ls >= student.len() || lt >= teacher.len() {
            return Err(Error::config(format!(
                "layer pair ({}, {}) outside {} student / {} teacher layers",
                ls,
                lt,
                student.len(),
                teacher.len()
            )));
        }
        let pred = tape.matmul(student[ls], proj_vars[i])?;
        out.push(tape.sq_err_sum(pred, teacher[lt].clone())?);
    }
    Ok(out)
}
