//! Frozen-feature linear probes. Features are a softmax-weighted sum over
//! all encoder layers; the weights and a linear classifier are trained with
//! Adam, the encoder never is.

use alloc::format;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{Encoder, MaskSpec};
use crate::rng::stream;
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ProbeTask {
    /// Frame-level pseudo-phoneme classification.
    Phoneme,
    /// Utterance-level speaker classification on mean-pooled frames.
    Speaker,
}

impl ProbeTask {
    pub fn name(&self) -> &'static str {
        match self {
            ProbeTask::Phoneme => "phoneme",
            ProbeTask::Speaker => "speaker",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "phoneme" => Ok(ProbeTask::Phoneme),
            "speaker" => Ok(ProbeTask::Speaker),
            other => Err(Error::config(format!("unknown probe task {other:?}"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProbeConfig {
    pub task: ProbeTask,
    pub seed: u64,
    pub lr: f64,
    pub steps: usize,
    /// Fraction of utterances used for training.
    pub train_fraction: f64,
}

impl ProbeConfig {
    pub fn new(task: ProbeTask, seed: u64) -> Self {
        Self {
            task,
            seed,
            lr: 1e-3,
            steps: 2000,
            train_fraction: 0.8,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.steps == 0 || !(self.lr > 0.0) || !(self.train_fraction > 0.0 && self.train_fraction < 1.0) {
            return Err(Error::config(
                "probe needs steps >= 1, lr > 0 and a train fraction in (0, 1)",
            ));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProbeResult {
    pub task: ProbeTask,
    /// Eval-split accuracy.
    pub accuracy: f64,
    pub train_accuracy: f64,
    /// Simplex over the input layers.
    pub layer_weights: Vec<f64>,
    pub train_utts: Vec<u32>,
    pub eval_utts: Vec<u32>,
}

/// One utterance's frozen features and ground truth.
#[derive(Debug, Clone, PartialEq)]
pub struct ProbeUtterance {
    pub id: u32,
    /// One `[T × D]` tensor per layer.
    pub layers: Vec<Tensor<f32>>,
    pub frame_truth: Vec<u16>,
    pub speaker: u16,
}

/// Clean-input activations of every layer.
pub fn encoder_layers(encoder: &Encoder, samples: &[f32]) -> Result<Vec<Tensor<f32>>> {
    let frames = crate::model::frame_count(samples.len());
    Ok(encoder.forward(samples, &MaskSpec::clean(frames))?.1)
}

/// Seeded split of `n` utterances into (train, eval) index lists.
pub fn split(n: usize, fraction: f64, seed: u64) -> Result<(Vec<usize>, Vec<usize>)> {
    let n_train = libm::round(n as f64 * fraction) as usize;
    if n_train == 0 || n_train >= n {
        return Err(Error::config(format!(
            "cannot split {} utterances into nonempty train and eval sets",
            n
        )));
    }
    let mut idx: Vec<usize> = (0..n).collect();
    idx.shuffle(&mut stream(&[seed, 0x5350_4C54]));
    let mut train = idx[..n_train].to_vec();
    let mut eval = idx[n_train..].to_vec();
    train.sort_unstable();
    eval.sort_unstable();
    Ok((train, eval))
}

/// Examples as a layer-major design: `cat[(n·D + j), l] = X_l[n, j]`.
struct Design {
    rows: usize,
    dim: usize,
    n_layers: usize,
    cat: Tensor<f32>,
    labels: Vec<u16>,
}

fn design(data: &[ProbeUtterance], idx: &[usize], task: ProbeTask) -> Result<Design> {
    let first = &data[idx[0]];
    let n_layers = first.layers.len();
    let dim = first.layers[0].cols();
    let mut rows_per_layer: Vec<Vec<f32>> = vec![Vec::new(); n_layers];
    let mut labels = Vec::new();
    for &i in idx {
        let u = &data[i];
        if u.layers.len() != n_layers || u.layers.iter().any(|l| l.cols() != dim) {
            return Err(Error::dim("probe", "utterances disagree on layer count or width"));
        }
        let t = u.layers[0].rows();
        match task {
            ProbeTask::Phoneme => {
                if u.frame_truth.len() != t {
                    return Err(Error::data(format!(
                        "utterance {} has {} truth frames for {} feature frames",
                        u.id,
                        u.frame_truth.len(),
                        t
                    )));
                }
                for (l, layer) in u.layers.iter().enumerate() {
                    rows_per_layer[l].extend_from_slice(layer.data());
                }
                labels.extend_from_slice(&u.frame_truth);
            }
            ProbeTask::Speaker => {
                for (l, layer) in u.layers.iter().enumerate() {
                    let mut mean = vec![0.0f64; dim];
                    for r in 0..t {
                        for (m, v) in mean.iter_mut().zip(layer.row(r)) {
                            *m += *v as f64;
                        }
                    }
                    rows_per_layer[l].extend(mean.iter().map(|m| (m / t as f64) as f32));
                }
                labels.push(u.speaker);
            }
        }
    }
    let rows = labels.len();
    let mut cat = vec![0.0f32; rows * dim * n_layers];
    for (l, flat) in rows_per_layer.iter().enumerate() {
        for (e, v) in flat.iter().enumerate() {
            cat[e * n_layers + l] = *v;
        }
    }
    Ok(Design {
        rows,
        dim,
        n_layers,
        cat: Tensor::new(vec![rows * dim, n_layers], cat)?,
        labels,
    })
}

struct ProbeVars {
    theta: Var,
    w: Var,
    b: Var,
}

fn logits_on_tape(tape: &mut Tape<f32>, d: &Design, v: &ProbeVars) -> Result<Var> {
    let weights = tape.softmax(v.theta)?;
    let weights = tape.reshape(weights, &[d.n_layers, 1])?;
    let x = tape.constant(d.cat.clone());
    let h = tape.matmul(x, weights)?;
    let h = tape.reshape(h, &[d.rows, d.dim])?;
    let logits = tape.matmul(h, v.w)?;
    tape.add_row(logits, v.b)
}

fn accuracy(logits: &Tensor<f32>, labels: &[u16]) -> f64 {
    let hits = labels
        .iter()
        .enumerate()
        .filter(|(r, &z)| {
            let row = logits.row(*r);
            let best = (0..row.len()).fold(0, |b, j| if row[j] > row[b] { j } else { b });
            best == z as usize
        })
        .count();
    hits as f64 / labels.len().max(1) as f64
}

/// Trains layer weights and a linear classifier over `classes` on the
/// training split and reports eval accuracy.
pub fn probe_train(data: &[ProbeUtterance], classes: usize, cfg: &ProbeConfig) -> Result<ProbeResult> {
    cfg.validate()?;
    if classes < 2 {
        return Err(Error::config("probe needs at least 2 classes"));
    }
    let (train_idx, eval_idx) = split(data.len(), cfg.train_fraction, cfg.seed)?;
    let train = design(data, &train_idx, cfg.task)?;
    let eval = design(data, &eval_idx, cfg.task)?;
    if let Some(z) = train.labels.iter().chain(&eval.labels).find(|&&z| z as usize >= classes) {
        return Err(Error::data(format!("truth label {} outside {} classes", z, classes)));
    }

    let mut params = vec![
        Tensor::<f32>::zeros(&[1, train.n_layers]),
        Tensor::zeros(&[train.dim, classes]),
        Tensor::zeros(&[classes]),
    ];
    let mut m: Vec<Vec<f64>> = params.iter().map(|p| vec![0.0; p.len()]).collect();
    let mut s = m.clone();
    let picks: Vec<(usize, usize)> = train.labels.iter().enumerate().map(|(r, &z)| (r, z as usize)).collect();
    let (b1, b2, eps) = (0.9, 0.999, 1e-8);
    for step in 0..cfg.steps {
        let mut tape = Tape::new();
        let vars = ProbeVars {
            theta: tape.param(params[0].clone()),
            w: tape.param(params[1].clone()),
            b: tape.param(params[2].clone()),
        };
        let logits = logits_on_tape(&mut tape, &train, &vars)?;
        let logp = tape.log_softmax(logits)?;
        let nll = tape.nll_sum(logp, &picks)?;
        let loss = tape.scale(nll, 1.0 / train.rows as f64);
        if !tape.value(loss).item().is_finite() {
            return Err(Error::Numeric(format!("probe loss diverged at step {step}")));
        }
        let grads = tape.backward(loss);
        let g: Vec<Tensor<f32>> = [vars.theta, vars.w, vars.b].iter().map(|v| grads.wrt(*v)).collect();
        let t = (step + 1) as f64;
        let (c1, c2) = (1.0 - libm::pow(b1, t), 1.0 - libm::pow(b2, t));
        for (((p, g), m), s) in params.iter_mut().zip(&g).zip(&mut m).zip(&mut s) {
            for (((p, g), m), s) in p.data_mut().iter_mut().zip(g.data()).zip(m.iter_mut()).zip(s.iter_mut()) {
                let g = *g as f64;
                *m = b1 * *m + (1.0 - b1) * g;
                *s = b2 * *s + (1.0 - b2) * g * g;
                *p = (*p as f64 - cfg.lr * (*m / c1) / (libm::sqrt(*s / c2) + eps)) as f32;
            }
        }
    }

    let evaluate = |d: &Design| -> Result<f64> {
        let mut tape = Tape::new();
        let vars = ProbeVars {
            theta: tape.constant(params[0].clone()),
            w: tape.constant(params[1].clone()),
            b: tape.constant(params[2].clone()),
        };
        let logits = logits_on_tape(&mut tape, d, &vars)?;
        Ok(accuracy(tape.value(logits), &d.labels))
    };
    let layer_weights = params[0].softmax()?.data().iter().map(|v| *v as f64).collect();
    Ok(ProbeResult {
        task: cfg.task,
        accuracy: evaluate(&eval)?,
        train_accuracy: evaluate(&train)?,
        layer_weights,
        train_utts: train_idx.iter().map(|&i| data[i].id).collect(),
        eval_utts: eval_idx.iter().map(|&i| data[i].id).collect(),
    })
}

/// One row of a probe comparison.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RankedRow {
    pub name: String,
    pub accuracy: f64,
    /// Accuracy minus the first row's.
    pub delta: f64,
}

/// Ranks results by accuracy (descending, ties by name).
pub fn compare(results: &[(String, ProbeResult)]) -> Result<Vec<RankedRow>> {
    if results.len() < 2 {
        return Err(Error::config("comparison needs at least two results"));
    }
    let task = results[0].1.task;
    if results.iter().any(|(_, r)| r.task != task) {
        return Err(Error::config("cannot compare results from different probe tasks"));
    }
    let mut rows: Vec<(String, f64)> = results.iter().map(|(n, r)| (n.clone(), r.accuracy)).collect();
    rows.sort_by(|a, b| b.1.total_cmp(&a.1).then_with(|| a.0.cmp(&b.0)));
    let top = rows[0].1;
    Ok(rows
        .into_iter()
        .map(|(name, accuracy)| RankedRow {
            name,
            accuracy,
            delta: accuracy - top,
        })
        .collect())
}
