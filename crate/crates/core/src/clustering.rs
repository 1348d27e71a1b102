//! k-means codebooks over frame features and the hard / soft targets derived
//! from them.

use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use rand::seq::index::sample;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::{derive_seed, stream};
use crate::tensor::Tensor;

/// Frames kept for fitting before uniform subsampling kicks in.
pub const MAX_FIT_FRAMES: usize = 1_000_000;

/// Per-utterance frame features (MFCC or encoder activations).
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureDump {
    pub dim: usize,
    pub items: Vec<FeatureItem>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct FeatureItem {
    pub id: u32,
    /// `[T × dim]`
    pub frames: Tensor<f32>,
}

impl FeatureDump {
    pub fn new(dim: usize) -> Self {
        Self {
            dim,
            items: Vec::new(),
        }
    }

    pub fn push(&mut self, id: u32, frames: Tensor<f32>) -> Result<()> {
        if frames.shape().len() != 2 || frames.cols() != self.dim {
            return Err(Error::dim(
                "feature dump",
                format!("frames {:?} in a dim-{} dump", frames.shape(), self.dim),
            ));
        }
        self.items.push(FeatureItem { id, frames });
        Ok(())
    }

    pub fn total_frames(&self) -> usize {
        self.items.iter().map(|i| i.frames.rows()).sum()
    }

    fn frame_refs(&self) -> impl Iterator<Item = &[f32]> + '_ {
        self.items
            .iter()
            .flat_map(|it| (0..it.frames.rows()).map(move |t| it.frames.row(t)))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct KMeansConfig {
    pub k: usize,
    pub seed: u64,
    pub max_iters: usize,
    pub tol: f64,
    /// Independent k-means++ restarts; the lowest final inertia wins.
    pub n_init: usize,
}

impl KMeansConfig {
    pub fn new(k: usize, seed: u64) -> Self {
        Self {
            k,
            seed,
            max_iters: 100,
            tol: 1e-4,
            n_init: 10,
        }
    }
}

/// `K` centroids plus fit provenance.
#[derive(Debug, Clone, PartialEq)]
pub struct Codebook {
    /// `[K × dim]`
    pub centroids: Tensor<f32>,
    pub inertia: f64,
    pub iterations: usize,
    pub seed: u64,
    pub samples: usize,
    /// Inertia of every assignment pass of the winning restart.
    pub history: Vec<f64>,
}

impl Codebook {
    pub fn k(&self) -> usize {
        self.centroids.rows()
    }

    pub fn dim(&self) -> usize {
        self.centroids.cols()
    }

    /// True when some pair of centroids coincides exactly.
    pub fn has_duplicate_centroids(&self) -> bool {
        let k = self.k();
        (0..k).any(|i| (i + 1..k).any(|j| self.centroids.row(i) == self.centroids.row(j)))
    }
}

#[inline]
fn sq_dist_f64(a: &[f32], b: &[f64]) -> f64 {
    a.iter()
        .zip(b)
        .map(|(x, y)| {
            let d = *x as f64 - y;
            d * d
        })
        .sum()
}

struct Fit {
    centroids: Vec<f64>,
    inertia: f64,
    iterations: usize,
    history: Vec<f64>,
}

/// Nearest centroid (lowest index on ties) and squared distance.
fn nearest(p: &[f32], centroids: &[f64], dim: usize) -> (usize, f64) {
    let mut best = (0, f64::INFINITY);
    for (j, c) in centroids.chunks(dim).enumerate() {
        let d = sq_dist_f64(p, c);
        if d < best.1 {
            best = (j, d);
        }
    }
    best
}

fn assign_all(points: &[&[f32]], centroids: &[f64], dim: usize, labels: &mut [usize]) -> f64 {
    let mut inertia = 0.0;
    for (p, l) in points.iter().zip(labels.iter_mut()) {
        let (j, d) = nearest(p, centroids, dim);
        *l = j;
        inertia += d;
    }
    inertia
}

fn plus_plus_init(points: &[&[f32]], k: usize, dim: usize, seed: u64) -> Vec<f64> {
    let mut rng = stream(&[seed, 0x4B50]);
    let n = points.len();
    let mut centroids = Vec::with_capacity(k * dim);
    let first = rng.random_range(0..n);
    centroids.extend(points[first].iter().map(|v| *v as f64));
    let mut d2: Vec<f64> = points
        .iter()
        .map(|p| sq_dist_f64(p, &centroids[0..dim]))
        .collect();
    for _ in 1..k {
        let total: f64 = d2.iter().sum();
        let pick = if total > 0.0 {
            let target = rng.random_range(0.0..total);
            let mut acc = 0.0;
            let mut chosen = n - 1;
            for (i, d) in d2.iter().enumerate() {
                acc += d;
                if acc > target {
                    chosen = i;
                    break;
                }
            }
            chosen
        } else {
            rng.random_range(0..n)
        };
        let start = centroids.len();
        centroids.extend(points[pick].iter().map(|v| *v as f64));
        for (p, d) in points.iter().zip(d2.iter_mut()) {
            *d = d.min(sq_dist_f64(p, &centroids[start..start + dim]));
        }
    }
    centroids
}

/// Recomputes centroids as cluster means; empty clusters take the farthest
/// point of the cluster with the largest squared error.
fn update_centroids(
    points: &[&[f32]],
    labels: &mut [usize],
    old: &[f64],
    k: usize,
    dim: usize,
) -> Vec<f64> {
    let mut sums = vec![0.0f64; k * dim];
    let mut counts = vec![0usize; k];
    for (p, &l) in points.iter().zip(labels.iter()) {
        counts[l] += 1;
        for (s, v) in sums[l * dim..(l + 1) * dim].iter_mut().zip(p.iter()) {
            *s += *v as f64;
        }
    }
    let mut centroids = old.to_vec();
    for j in 0..k {
        if counts[j] > 0 {
            for d in 0..dim {
                centroids[j * dim + d] = sums[j * dim + d] / counts[j] as f64;
            }
        }
    }
    for j in 0..k {
        if counts[j] > 0 {
            continue;
        }
        let mut sse = vec![0.0f64; k];
        for (p, &l) in points.iter().zip(labels.iter()) {
            sse[l] += sq_dist_f64(p, &centroids[l * dim..(l + 1) * dim]);
        }
        let worst = (0..k)
            .filter(|&c| counts[c] > 1)
            .fold(None, |best: Option<usize>, c| match best {
                Some(b) if sse[b] >= sse[c] => Some(b),
                _ => Some(c),
            });
        let Some(worst) = worst else { continue };
        let mut far = (usize::MAX, -1.0);
        for (i, (p, &l)) in points.iter().zip(labels.iter()).enumerate() {
            if l == worst {
                let d = sq_dist_f64(p, &centroids[worst * dim..(worst + 1) * dim]);
                if d > far.1 {
                    far = (i, d);
                }
            }
        }
        let (idx, _) = far;
        for d in 0..dim {
            centroids[j * dim + d] = points[idx][d] as f64;
        }
        labels[idx] = j;
        counts[worst] -= 1;
        counts[j] = 1;
    }
    centroids
}

fn lloyd(points: &[&[f32]], cfg: &KMeansConfig, dim: usize, seed: u64) -> Fit {
    let k = cfg.k;
    let mut centroids = plus_plus_init(points, k, dim, seed);
    let mut labels = vec![0usize; points.len()];
    let mut prev: Option<Vec<usize>> = None;
    let mut history = Vec::new();
    let mut iterations = 0;
    loop {
        let inertia = assign_all(points, &centroids, dim, &mut labels);
        history.push(inertia);
        if prev.as_deref() == Some(&labels[..]) || iterations >= cfg.max_iters {
            break;
        }
        iterations += 1;
        let mut next_labels = labels.clone();
        let next = update_centroids(points, &mut next_labels, &centroids, k, dim);
        let shift = next
            .chunks(dim)
            .zip(centroids.chunks(dim))
            .map(|(a, b)| libm::sqrt(a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>()))
            .fold(0.0, f64::max);
        centroids = next;
        // a repair moves points after the means were taken; force another pass
        let repaired = next_labels != labels;
        prev = (!repaired).then_some(next_labels);
        if shift < cfg.tol {
            let inertia = assign_all(points, &centroids, dim, &mut labels);
            history.push(inertia);
            break;
        }
    }
    Fit {
        centroids,
        inertia: *history.last().expect("at least one pass"),
        iterations,
        history,
    }
}

/// Fits a codebook on flat `[n × dim]` points.
pub fn kmeans_fit_points(points: &[&[f32]], dim: usize, cfg: &KMeansConfig) -> Result<Codebook> {
    if cfg.k < 2 {
        return Err(Error::config(format!("k must be at least 2, got {}", cfg.k)));
    }
    if points.len() < cfg.k {
        return Err(Error::config(format!(
            "{} frames cannot seed {} clusters",
            points.len(),
            cfg.k
        )));
    }
    if dim == 0 || points.iter().any(|p| p.len() != dim) {
        return Err(Error::dim("kmeans_fit", "points must share a nonzero dimension"));
    }
    let mut best: Option<Fit> = None;
    for restart in 0..cfg.n_init.max(1) {
        let fit = lloyd(points, cfg, dim, derive_seed(&[cfg.seed, restart as u64]));
        if best.as_ref().is_none_or(|b| fit.inertia < b.inertia) {
            best = Some(fit);
        }
    }
    let best = best.expect("n_init >= 1");
    let centroids = Tensor::new(
        vec![cfg.k, dim],
        best.centroids.iter().map(|v| *v as f32).collect(),
    )?;
    Ok(Codebook {
        centroids,
        inertia: best.inertia,
        iterations: best.iterations,
        seed: cfg.seed,
        samples: points.len(),
        history: best.history,
    })
}

/// Fits a codebook on every frame of a dump, subsampling above
/// [`MAX_FIT_FRAMES`].
pub fn kmeans_fit(features: &FeatureDump, cfg: &KMeansConfig) -> Result<Codebook> {
    let mut points: Vec<&[f32]> = features.frame_refs().collect();
    if points.len() > MAX_FIT_FRAMES {
        let mut rng = stream(&[cfg.seed, 0x5355_4253]);
        let mut keep = sample(&mut rng, points.len(), MAX_FIT_FRAMES).into_vec();
        keep.sort_unstable();
        points = keep.into_iter().map(|i| points[i]).collect();
    }
    kmeans_fit_points(&points, features.dim, cfg)
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LabelSequence {
    pub utterance_id: u32,
    pub labels: Vec<u16>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SoftLabelSequence {
    pub utterance_id: u32,
    pub k: usize,
    pub tau: f64,
    /// `[T × K]`, rows on the simplex.
    pub probs: Vec<f64>,
}

impl SoftLabelSequence {
    pub fn frames(&self) -> usize {
        self.probs.len() / self.k
    }

    pub fn row(&self, t: usize) -> &[f64] {
        &self.probs[t * self.k..(t + 1) * self.k]
    }
}

fn check_dim(codebook: &Codebook, features: &FeatureDump, op: &'static str) -> Result<()> {
    if codebook.dim() != features.dim {
        return Err(Error::dim(
            op,
            format!("codebook dim {} vs feature dim {}", codebook.dim(), features.dim),
        ));
    }
    Ok(())
}

fn sq_dists(frame: &[f32], codebook: &Codebook, out: &mut [f64]) {
    for (j, o) in out.iter_mut().enumerate() {
        *o = frame
            .iter()
            .zip(codebook.centroids.row(j))
            .map(|(a, b)| {
                let d = *a as f64 - *b as f64;
                d * d
            })
            .sum();
    }
}

/// Label of the nearest centroid for one frame; ties go to the lowest index.
pub fn nearest_centroid(codebook: &Codebook, frame: &[f32]) -> u16 {
    let mut d = vec![0.0; codebook.k()];
    sq_dists(frame, codebook, &mut d);
    let mut best = 0;
    for j in 1..d.len() {
        if d[j] < d[best] {
            best = j;
        }
    }
    best as u16
}

pub fn assign_hard(codebook: &Codebook, features: &FeatureDump) -> Result<Vec<LabelSequence>> {
    check_dim(codebook, features, "assign_hard")?;
    Ok(features
        .items
        .iter()
        .map(|it| LabelSequence {
            utterance_id: it.id,
            labels: (0..it.frames.rows())
                .map(|t| nearest_centroid(codebook, it.frames.row(t)))
                .collect(),
        })
        .collect())
}

/// `softmax(-ρ/τ)` over unsquared L2 distances to each centroid.
pub fn soft_label_row(distances: &[f64], tau: f64, out: &mut [f64]) {
    let min = distances.iter().copied().fold(f64::INFINITY, f64::min);
    let mut sum = 0.0;
    for (o, d) in out.iter_mut().zip(distances) {
        *o = libm::exp(-(d - min) / tau);
        sum += *o;
    }
    for o in out.iter_mut() {
        *o /= sum;
    }
}

pub fn soft_labels(
    codebook: &Codebook,
    features: &FeatureDump,
    tau: f64,
) -> Result<Vec<SoftLabelSequence>> {
    if !(tau > 0.0 && tau.is_finite()) {
        return Err(Error::config(format!("temperature must be positive, got {}", tau)));
    }
    check_dim(codebook, features, "soft_labels")?;
    let k = codebook.k();
    let mut dist = vec![0.0; k];
    Ok(features
        .items
        .iter()
        .map(|it| {
            let mut probs = vec![0.0; it.frames.rows() * k];
            for t in 0..it.frames.rows() {
                sq_dists(it.frames.row(t), codebook, &mut dist);
                dist.iter_mut().for_each(|d| *d = libm::sqrt(*d));
                soft_label_row(&dist, tau, &mut probs[t * k..(t + 1) * k]);
            }
            SoftLabelSequence {
                utterance_id: it.id,
                k,
                tau,
                probs,
            }
        })
        .collect())
}

/// Fraction of frames whose cluster's majority truth label matches their own.
pub fn purity(assigned: &[u16], truth: &[u16], k: usize, classes: usize) -> f64 {
    let mut table = vec![0usize; k * classes];
    for (&a, &t) in assigned.iter().zip(truth) {
        table[a as usize * classes + t as usize] += 1;
    }
    let hits: usize = table
        .chunks(classes)
        .map(|row| row.iter().copied().max().unwrap_or(0))
        .sum();
    hits as f64 / assigned.len().max(1) as f64
}
