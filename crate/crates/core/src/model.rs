//! The masked-prediction speech encoder: strided conv frontend, span masking
//! with a learned mask vector, pre-norm transformer stack and a linear
//! per-frame classification head.

use alloc::format;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::corpus::FRAME_HOP;
use crate::error::{Error, Result};
use crate::real::Real;
use crate::rng::stream;
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    /// Transformer layer count `L`.
    pub layers: usize,
    /// Model width `D`.
    pub dim: usize,
    pub heads: usize,
    /// Feed-forward width `F`.
    pub ffn: usize,
    pub conv_channels: Vec<usize>,
    /// Kernel size equals stride for every conv layer.
    pub conv_strides: Vec<usize>,
    /// Output cluster count `K`.
    pub classes: usize,
    pub mask_span: usize,
    pub mask_start_prob: f64,
}

/// How a student config relates to its base config.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Variant {
    Same,
    /// Only `dim` (and `ffn` in proportion) changed.
    Narrow,
    /// Only `layers` changed.
    Shallow,
}

impl ModelConfig {
    /// Desk-scale base: 4 layers of width 64.
    pub fn toy_base(classes: usize) -> Self {
        Self {
            layers: 4,
            dim: 64,
            heads: 4,
            ffn: 256,
            conv_channels: vec![8, 16, 16, 32, 32],
            conv_strides: vec![5, 4, 4, 2, 2],
            classes,
            mask_span: 10,
            mask_start_prob: 0.08,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::config(m));
        if self.dim == 0 || self.heads == 0 || self.dim % self.heads != 0 {
            return bad(format!("dim {} not divisible by {} heads", self.dim, self.heads));
        }
        if self.ffn == 0 {
            return bad("ffn width must be positive".into());
        }
        if self.conv_channels.is_empty() || self.conv_channels.len() != self.conv_strides.len() {
            return bad("conv_channels and conv_strides must be nonempty and equally long".into());
        }
        if self.conv_channels.iter().any(|&c| c == 0) || self.conv_strides.iter().any(|&s| s == 0) {
            return bad("conv channels and strides must be positive".into());
        }
        let stride: usize = self.conv_strides.iter().product();
        if stride != FRAME_HOP {
            return bad(format!("conv strides multiply to {}, need {}", stride, FRAME_HOP));
        }
        if self.classes < 2 {
            return bad(format!("need at least 2 classes, got {}", self.classes));
        }
        if self.mask_span == 0 || !(0.0..=1.0).contains(&self.mask_start_prob) {
            return bad("mask_span must be positive and mask_start_prob in [0, 1]".into());
        }
        Ok(())
    }

    pub fn head_dim(&self) -> usize {
        self.dim / self.heads
    }

    /// Same depth, width and feed-forward width divided by `divisor`.
    pub fn narrow(&self, divisor: usize) -> Result<Self> {
        self.student(None, Some(divisor))
    }

    /// Same width, `layers` transformer layers.
    pub fn shallow(&self, layers: usize) -> Result<Self> {
        self.student(Some(layers), None)
    }

    /// Width and feed-forward width multiplied by `factor`; used to emulate a
    /// larger teacher.
    pub fn wide(&self, factor: usize) -> Result<Self> {
        let mut c = self.clone();
        c.dim *= factor;
        c.ffn *= factor;
        c.validate()?;
        Ok(c)
    }

    /// Derives a compressed student. Exactly one of depth or width may change.
    pub fn student(&self, layers: Option<usize>, width_divisor: Option<usize>) -> Result<Self> {
        let mut c = self.clone();
        match (layers, width_divisor) {
            (Some(_), Some(_)) => {
                return Err(Error::config(
                    "a student may reduce depth or width, not both",
                ))
            }
            (Some(l), None) => {
                if l >= self.layers {
                    return Err(Error::config(format!(
                        "shallow student needs fewer than {} layers, got {}",
                        self.layers, l
                    )));
                }
                c.layers = l;
            }
            (None, Some(d)) => {
                if d < 2 || self.dim % d != 0 || self.ffn % d != 0 {
                    return Err(Error::config(format!(
                        "width divisor {} does not divide dim {} / ffn {}",
                        d, self.dim, self.ffn
                    )));
                }
                c.dim /= d;
                c.ffn /= d;
            }
            (None, None) => {}
        }
        c.validate()?;
        Ok(c)
    }

    /// Classifies `candidate` relative to `self`, rejecting mixed changes.
    pub fn variant_of(&self, candidate: &ModelConfig) -> Result<Variant> {
        let depth = candidate.layers != self.layers;
        let width = candidate.dim != self.dim || candidate.ffn != self.ffn;
        let other = candidate.heads != self.heads
            || candidate.conv_channels != self.conv_channels
            || candidate.conv_strides != self.conv_strides;
        match (depth, width, other) {
            (false, false, false) => Ok(Variant::Same),
            (false, true, false)
                if candidate.dim < self.dim
                    && candidate.ffn * self.dim == self.ffn * candidate.dim =>
            {
                Ok(Variant::Narrow)
            }
            (true, false, false) if candidate.layers < self.layers => Ok(Variant::Shallow),
            _ => Err(Error::config(
                "candidate mixes modifications; change only depth or only width",
            )),
        }
    }
}

/// Masked frames and the spans that produced them.
#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct MaskSpec {
    pub masked: Vec<bool>,
    /// `(start, length)`, length clipped at the sequence end.
    pub spans: Vec<(usize, usize)>,
}

impl MaskSpec {
    pub fn clean(frames: usize) -> Self {
        Self {
            masked: vec![false; frames],
            spans: Vec::new(),
        }
    }

    pub fn frames(&self) -> usize {
        self.masked.len()
    }

    pub fn masked_indices(&self) -> Vec<usize> {
        (0..self.masked.len()).filter(|&t| self.masked[t]).collect()
    }

    pub fn count(&self) -> usize {
        self.masked.iter().filter(|&&m| m).count()
    }

    fn add_span(&mut self, start: usize, span: usize) {
        let len = span.min(self.masked.len() - start);
        self.masked[start..start + len].iter_mut().for_each(|m| *m = true);
        self.spans.push((start, len));
    }
}

/// Samples span starts independently per frame; an empty draw is rescued by
/// one span at a uniform start.
pub fn sample_mask(frames: usize, cfg: &ModelConfig, seed: u64) -> MaskSpec {
    let mut rng = stream(&[seed, 0x4D41_534B]);
    let mut mask = MaskSpec::clean(frames);
    if frames == 0 {
        return mask;
    }
    for t in 0..frames {
        if rng.random_bool(cfg.mask_start_prob) {
            mask.add_span(t, cfg.mask_span);
        }
    }
    if mask.spans.is_empty() {
        let start = rng.random_range(0..frames);
        mask.add_span(start, cfg.mask_span);
    }
    mask
}

/// Named parameter tensors in a fixed order.
#[derive(Debug, Clone, PartialEq)]
pub struct ParamSet<S: Real = f32> {
    pub names: Vec<String>,
    pub tensors: Vec<Tensor<S>>,
}

impl<S: Real> ParamSet<S> {
    pub fn new() -> Self {
        Self {
            names: Vec::new(),
            tensors: Vec::new(),
        }
    }

    pub fn push(&mut self, name: impl Into<String>, t: Tensor<S>) {
        self.names.push(name.into());
        self.tensors.push(t);
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn get(&self, name: &str) -> Option<&Tensor<S>> {
        self.names
            .iter()
            .position(|n| n == name)
            .map(|i| &self.tensors[i])
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor<S>> {
        self.names
            .iter()
            .position(|n| n == name)
            .map(|i| &mut self.tensors[i])
    }

    pub fn cast<T: Real>(&self) -> ParamSet<T> {
        ParamSet {
            names: self.names.clone(),
            tensors: self.tensors.iter().map(|t| t.cast()).collect(),
        }
    }

    pub fn num_scalars(&self) -> usize {
        self.tensors.iter().map(|t| t.len()).sum()
    }

    /// The subset whose names start with `prefix`, in order.
    pub fn with_prefix(&self, prefix: &str) -> Self {
        let mut out = Self::new();
        for (n, t) in self.names.iter().zip(&self.tensors) {
            if n.starts_with(prefix) {
                out.push(n.clone(), t.clone());
            }
        }
        out
    }
}

impl<S: Real> Default for ParamSet<S> {
    fn default() -> Self {
        Self::new()
    }
}

#[derive(Debug, Clone, Copy)]
enum Init {
    Zeros,
    Ones,
    Normal(f64),
}

fn param_specs(cfg: &ModelConfig) -> Vec<(String, Vec<usize>, Init)> {
    let mut specs = Vec::new();
    let mut in_ch = 1;
    for (i, (&c, &s)) in cfg.conv_channels.iter().zip(&cfg.conv_strides).enumerate() {
        let fan_in = in_ch * s;
        specs.push((format!("conv.{i}.weight"), vec![fan_in, c], Init::Normal(libm::sqrt(2.0 / fan_in as f64))));
        specs.push((format!("conv.{i}.bias"), vec![c], Init::Zeros));
        in_ch = c;
    }
    let d = cfg.dim;
    let lin = |fan_in: usize| Init::Normal(1.0 / libm::sqrt(fan_in as f64));
    specs.push(("frontend.norm.gain".into(), vec![in_ch], Init::Ones));
    specs.push(("frontend.norm.bias".into(), vec![in_ch], Init::Zeros));
    specs.push(("frontend.proj.weight".into(), vec![in_ch, d], lin(in_ch)));
    specs.push(("frontend.proj.bias".into(), vec![d], Init::Zeros));
    specs.push(("mask_emb".into(), vec![d], Init::Normal(0.02)));
    for l in 0..cfg.layers {
        let p = |s: &str| format!("layers.{l}.{s}");
        specs.push((p("attn_norm.gain"), vec![d], Init::Ones));
        specs.push((p("attn_norm.bias"), vec![d], Init::Zeros));
        specs.push((p("attn.qkv.weight"), vec![d, 3 * d], lin(d)));
        specs.push((p("attn.qkv.bias"), vec![3 * d], Init::Zeros));
        specs.push((p("attn.out.weight"), vec![d, d], lin(d)));
        specs.push((p("attn.out.bias"), vec![d], Init::Zeros));
        specs.push((p("ffn_norm.gain"), vec![d], Init::Ones));
        specs.push((p("ffn_norm.bias"), vec![d], Init::Zeros));
        specs.push((p("ffn.in.weight"), vec![d, cfg.ffn], lin(d)));
        specs.push((p("ffn.in.bias"), vec![cfg.ffn], Init::Zeros));
        specs.push((p("ffn.out.weight"), vec![cfg.ffn, d], lin(cfg.ffn)));
        specs.push((p("ffn.out.bias"), vec![d], Init::Zeros));
    }
    specs.push(("head.weight".into(), vec![d, cfg.classes], Init::Normal(0.02)));
    specs.push(("head.bias".into(), vec![cfg.classes], Init::Zeros));
    specs
}

/// Fresh random parameters, deterministic in `seed`.
pub fn init_params(cfg: &ModelConfig, seed: u64) -> Result<ParamSet<f32>> {
    cfg.validate()?;
    let mut rng = stream(&[seed, 0x494E_4954]);
    let mut params = ParamSet::new();
    for (name, shape, init) in param_specs(cfg) {
        let t = match init {
            Init::Zeros => Tensor::zeros(&shape),
            Init::Ones => Tensor::full(&shape, 1.0),
            Init::Normal(std) => {
                let normal = Normal::new(0.0, std).map_err(|e| Error::config(format!("{e}")))?;
                let n = shape.iter().product();
                Tensor::new(shape, (0..n).map(|_| normal.sample(&mut rng) as f32).collect())?
            }
        };
        params.push(name, t);
    }
    Ok(params)
}

/// Checks that `params` has exactly the tensors `cfg` needs, in order.
pub fn check_params<S: Real>(cfg: &ModelConfig, params: &ParamSet<S>) -> Result<()> {
    let specs = param_specs(cfg);
    if params.len() < specs.len() {
        return Err(Error::data(format!(
            "expected {} encoder tensors, found {}",
            specs.len(),
            params.len()
        )));
    }
    for ((name, shape, _), (pn, pt)) in specs.iter().zip(params.names.iter().zip(&params.tensors)) {
        if name != pn || shape.as_slice() != pt.shape() {
            return Err(Error::data(format!(
                "parameter {} {:?} does not match expected {} {:?}",
                pn,
                pt.shape(),
                name,
                shape
            )));
        }
    }
    Ok(())
}

struct LayerVars {
    attn_norm: (Var, Var),
    qkv: (Var, Var),
    out: (Var, Var),
    ffn_norm: (Var, Var),
    ffn_in: (Var, Var),
    ffn_out: (Var, Var),
}

/// Encoder parameters registered on a tape.
pub struct EncoderVars {
    /// Every registered leaf, in [`ParamSet`] order.
    pub all: Vec<Var>,
    conv: Vec<(Var, Var)>,
    front_norm: (Var, Var),
    proj: (Var, Var),
    mask_emb: Var,
    layers: Vec<LayerVars>,
    head: (Var, Var),
}

/// Registers the encoder tensors of `params` (the first ones, in layout
/// order) as trainable leaves or constants.
pub fn bind<S: Real>(
    tape: &mut Tape<S>,
    cfg: &ModelConfig,
    params: &ParamSet<S>,
    trainable: bool,
) -> Result<EncoderVars> {
    check_params(cfg, params)?;
    let n = param_count(cfg);
    let all: Vec<Var> = params.tensors[..n]
        .iter()
        .map(|t| {
            if trainable {
                tape.param(t.clone())
            } else {
                tape.constant(t.clone())
            }
        })
        .collect();
    EncoderVars::from_vars(cfg, all)
}

/// Number of encoder tensors for `cfg`.
pub fn param_count(cfg: &ModelConfig) -> usize {
    2 * cfg.conv_channels.len() + 5 + 12 * cfg.layers + 2
}

impl EncoderVars {
    /// Interprets already registered vars, laid out in [`ParamSet`] order.
    pub fn from_vars(cfg: &ModelConfig, all: Vec<Var>) -> Result<Self> {
        let n = param_count(cfg);
        if all.len() != n {
            return Err(Error::config(format!("expected {} encoder vars, got {}", n, all.len())));
        }
        let nc = cfg.conv_channels.len();
        let conv = (0..nc).map(|i| (all[2 * i], all[2 * i + 1])).collect();
        let front_norm = (all[2 * nc], all[2 * nc + 1]);
        let proj = (all[2 * nc + 2], all[2 * nc + 3]);
        let mask_emb = all[2 * nc + 4];
        let base = 2 * nc + 5;
        let layers = (0..cfg.layers)
            .map(|l| {
                let v = &all[base + 12 * l..base + 12 * (l + 1)];
                LayerVars {
                    attn_norm: (v[0], v[1]),
                    qkv: (v[2], v[3]),
                    out: (v[4], v[5]),
                    ffn_norm: (v[6], v[7]),
                    ffn_in: (v[8], v[9]),
                    ffn_out: (v[10], v[11]),
                }
            })
            .collect();
        let head = (all[n - 2], all[n - 1]);
        Ok(EncoderVars {
            all,
            conv,
            front_norm,
            proj,
            mask_emb,
            layers,
            head,
        })
    }
}

/// Output of one forward pass on a tape.
pub struct ForwardVars {
    /// `[T × K]`
    pub logits: Var,
    /// `L + 1` entries, each `[T × D]`: masked embedding, then every layer.
    pub layers: Vec<Var>,
}

/// Sinusoidal position table `[T × D]`.
pub fn positions<S: Real>(frames: usize, dim: usize) -> Tensor<S> {
    let mut data = vec![S::ZERO; frames * dim];
    for i in 0..dim / 2 {
        let freq = libm::pow(10_000.0, -((2 * i) as f64) / dim as f64);
        // rotate (sin, cos) by one step instead of evaluating per frame
        let (ds, dc) = (libm::sin(freq), libm::cos(freq));
        let (mut s, mut c) = (0.0f64, 1.0f64);
        for t in 0..frames {
            data[t * dim + 2 * i] = S::from_f64(s);
            data[t * dim + 2 * i + 1] = S::from_f64(c);
            (s, c) = (s * dc + c * ds, c * dc - s * ds);
        }
    }
    Tensor::new(vec![frames, dim], data).expect("positions shape")
}

fn linear<S: Real>(tape: &mut Tape<S>, x: Var, (w, b): (Var, Var)) -> Result<Var> {
    let y = tape.matmul(x, w)?;
    tape.add_row(y, b)
}

/// Frames produced by the frontend for `num_samples` input samples.
pub fn frame_count(num_samples: usize) -> usize {
    num_samples / FRAME_HOP
}

fn conv_frontend_on_tape<S: Real>(
    tape: &mut Tape<S>,
    vars: &EncoderVars,
    cfg: &ModelConfig,
    samples: &[f32],
) -> Result<Var> {
    let frames = frame_count(samples.len());
    if frames == 0 {
        return Err(Error::Length {
            needed: FRAME_HOP,
            got: samples.len(),
        });
    }
    let n = frames * FRAME_HOP;
    let wave = Tensor::new(
        vec![n, 1],
        samples[..n].iter().map(|v| S::from_f64(*v as f64)).collect(),
    )?;
    let mut x = tape.constant(wave);
    let mut len = n;
    let mut ch = 1;
    for (i, &s) in cfg.conv_strides.iter().enumerate() {
        len /= s;
        // kernel == stride: each output row is `s` consecutive input rows
        let patches = tape.reshape(x, &[len, s * ch])?;
        let y = linear(tape, patches, vars.conv[i])?;
        x = tape.gelu(y);
        ch = cfg.conv_channels[i];
    }
    let x = tape.layer_norm(x, vars.front_norm.0, vars.front_norm.1)?;
    linear(tape, x, vars.proj)
}

/// Full forward pass on `tape`. The mask length must equal the frame count.
pub fn forward_on_tape<S: Real>(
    tape: &mut Tape<S>,
    vars: &EncoderVars,
    cfg: &ModelConfig,
    samples: &[f32],
    mask: &MaskSpec,
) -> Result<ForwardVars> {
    let emb = conv_frontend_on_tape(tape, vars, cfg, samples)?;
    let frames = tape.value(emb).rows();
    if mask.frames() != frames {
        return Err(Error::dim(
            "forward",
            format!("mask covers {} frames, input has {}", mask.frames(), frames),
        ));
    }
    let masked = tape.mask_rows(emb, vars.mask_emb, &mask.masked)?;
    let mut layers = vec![masked];
    let pos = tape.constant(positions(frames, cfg.dim));
    let mut x = tape.add(masked, pos)?;
    let dh = cfg.head_dim();
    let scale = 1.0 / libm::sqrt(dh as f64);
    for lv in &vars.layers {
        let a = tape.layer_norm(x, lv.attn_norm.0, lv.attn_norm.1)?;
        let qkv = linear(tape, a, lv.qkv)?;
        let mut heads = Vec::with_capacity(cfg.heads);
        for h in 0..cfg.heads {
            let q = tape.slice_cols(qkv, h * dh, dh)?;
            let k = tape.slice_cols(qkv, cfg.dim + h * dh, dh)?;
            let v = tape.slice_cols(qkv, 2 * cfg.dim + h * dh, dh)?;
            let scores = tape.matmul_nt(q, k)?;
            let scores = tape.scale(scores, scale);
            let attn = tape.softmax(scores)?;
            heads.push(tape.matmul(attn, v)?);
        }
        let o = tape.concat_cols(&heads)?;
        let o = linear(tape, o, lv.out)?;
        x = tape.add(x, o)?;
        let b = tape.layer_norm(x, lv.ffn_norm.0, lv.ffn_norm.1)?;
        let f = linear(tape, b, lv.ffn_in)?;
        let f = tape.gelu(f);
        let f = linear(tape, f, lv.ffn_out)?;
        x = tape.add(x, f)?;
        layers.push(x);
    }
    let logits = linear(tape, x, vars.head)?;
    Ok(ForwardVars { logits, layers })
}

/// Per-layer activations, `L + 1` tensors of shape `[T × D]`.
pub type LayerFeatures<S = f32> = Vec<Tensor<S>>;

/// An encoder with concrete weights, for inference.
#[derive(Debug, Clone, PartialEq)]
pub struct Encoder {
    pub cfg: ModelConfig,
    pub params: ParamSet<f32>,
}

impl Encoder {
    pub fn new(cfg: ModelConfig, params: ParamSet<f32>) -> Result<Self> {
        cfg.validate()?;
        check_params(&cfg, &params)?;
        Ok(Self { cfg, params })
    }

    pub fn random(cfg: ModelConfig, seed: u64) -> Result<Self> {
        let params = init_params(&cfg, seed)?;
        Ok(Self { cfg, params })
    }

    /// `[T × D]` embeddings before masking, `T = floor(len / 320)`.
    pub fn conv_frontend(&self, samples: &[f32]) -> Result<Tensor<f32>> {
        let mut tape = Tape::new();
        let vars = bind(&mut tape, &self.cfg, &self.params, false)?;
        let out = conv_frontend_on_tape(&mut tape, &vars, &self.cfg, samples)?;
        Ok(tape.value(out).clone())
    }

    pub fn forward(&self, samples: &[f32], mask: &MaskSpec) -> Result<(Tensor<f32>, LayerFeatures)> {
        let mut tape = Tape::new();
        let vars = bind(&mut tape, &self.cfg, &self.params, false)?;
        let out = forward_on_tape(&mut tape, &vars, &self.cfg, samples, mask)?;
        let feats = out.layers.iter().map(|v| tape.value(*v).clone()).collect();
        Ok((tape.value(out.logits).clone(), feats))
    }

    /// Clean-input activations of one layer.
    pub fn layer_features(&self, samples: &[f32], layer: usize) -> Result<Tensor<f32>> {
        if layer > self.cfg.layers {
            return Err(Error::config(format!(
                "layer {} outside 0..={}",
                layer, self.cfg.layers
            )));
        }
        let frames = frame_count(samples.len());
        let (_, mut feats) = self.forward(samples, &MaskSpec::clean(frames))?;
        Ok(feats.swap_remove(layer))
    }
}
