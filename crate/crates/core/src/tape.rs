//! Reverse-mode gradient tape over a closed set of tensor primitives.
//!
//! A tape is built by one forward pass and consumed by one call to
//! [`Tape::backward`]. Values are stored eagerly, so the forward result of any
//! node can be read back with [`Tape::value`].

use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use crate::error::{Error, Result};
use crate::real::Real;
use crate::tensor::{
    gemm_nn, gemm_nt, gemm_tn, log_softmax_in_place, row_moments, Tensor,
};

/// Handle to a node on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_A: f64 = 0.044_715;

#[derive(Debug, Clone)]
enum Op<S: Real> {
    Leaf,
    MatMul(Var, Var),
    MatMulNT(Var, Var),
    Add(Var, Var),
    AddRow(Var, Var),
    Mul(Var, Var),
    Scale(Var, S),
    /// Keeps `gelu'(x)` from the forward pass.
    Gelu(Var, Vec<S>),
    LayerNorm { x: Var, gain: Var, bias: Var },
    Softmax(Var),
    LogSoftmax(Var),
    Reshape(Var),
    SliceCols { x: Var, start: usize },
    ConcatCols(Vec<Var>),
    MaskRows { x: Var, emb: Var, mask: Vec<bool> },
    NllSum { logp: Var, picks: Vec<(usize, usize)> },
    KlSum { logq: Var, target: Tensor<S>, rows: Vec<usize> },
    SqErrSum { x: Var, target: Tensor<S> },
    Sum(Var),
}

#[derive(Debug, Clone)]
struct Node<S: Real> {
    value: Tensor<S>,
    op: Op<S>,
    requires_grad: bool,
}

/// Ordered record of primitive ops for one forward pass.
#[derive(Debug, Clone, Default)]
pub struct Tape<S: Real = f32> {
    nodes: Vec<Node<S>>,
}

/// Gradients produced by [`Tape::backward`], indexed by [`Var`].
#[derive(Debug, Clone)]
pub struct Gradients<S: Real> {
    shapes: Vec<Vec<usize>>,
    grads: Vec<Option<Vec<S>>>,
}

impl<S: Real> Gradients<S> {
    /// Gradient with respect to `v`, or zeros if `v` did not influence the output.
    pub fn wrt(&self, v: Var) -> Tensor<S> {
        let shape = self.shapes[v.0].clone();
        match &self.grads[v.0] {
            Some(g) => Tensor::new(shape, g.clone()).expect("gradient shape"),
            None => Tensor::zeros(&shape),
        }
    }

    pub fn get(&self, v: Var) -> Option<&[S]> {
        self.grads[v.0].as_deref()
    }
}

fn expect_matrix<S: Real>(t: &Tensor<S>, op: &'static str) -> Result<(usize, usize)> {
    match t.shape() {
        [r, c] => Ok((*r, *c)),
        other => Err(Error::dim(op, format!("expected a matrix, got {:?}", other))),
    }
}

fn same_shape<S: Real>(a: &Tensor<S>, b: &Tensor<S>, op: &'static str) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(Error::dim(op, format!("{:?} vs {:?}", a.shape(), b.shape())));
    }
    Ok(())
}

impl<S: Real> Tape<S> {
    pub fn new() -> Self {
        Self { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor<S> {
        &self.nodes[v.0].value
    }

    fn push(&mut self, value: Tensor<S>, op: Op<S>, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// A trainable leaf; receives a gradient on backward.
    pub fn param(&mut self, t: Tensor<S>) -> Var {
        self.push(t, Op::Leaf, true)
    }

    /// A leaf that never receives a gradient.
    pub fn constant(&mut self, t: Tensor<S>) -> Var {
        self.push(t, Op::Leaf, false)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.value(a).matmul(self.value(b))?;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(out, Op::MatMul(a, b), rg))
    }

    /// `a · bᵀ` without materializing the transpose on the tape.
    pub fn matmul_nt(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = expect_matrix(self.value(a), "matmul_nt")?;
        let (n, k2) = expect_matrix(self.value(b), "matmul_nt")?;
        if k != k2 {
            return Err(Error::dim("matmul_nt", format!("inner dims {} vs {}", k, k2)));
        }
        let mut out = vec![S::ZERO; m * n];
        gemm_nt(self.value(a).data(), self.value(b).data(), &mut out, m, k, n);
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(Tensor::new(vec![m, n], out)?, Op::MatMulNT(a, b), rg))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (va, vb) = (self.value(a), self.value(b));
        same_shape(va, vb, "add")?;
        let data = va.data().iter().zip(vb.data()).map(|(x, y)| *x + *y).collect();
        let out = Tensor::new(va.shape().to_vec(), data)?;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(out, Op::Add(a, b), rg))
    }

    /// Adds a length-`cols` vector to every row of `x`.
    pub fn add_row(&mut self, x: Var, bias: Var) -> Result<Var> {
        let (vx, vb) = (self.value(x), self.value(bias));
        let c = vx.cols();
        if vb.len() != c {
            return Err(Error::dim("add_row", format!("bias {} vs width {}", vb.len(), c)));
        }
        let mut data = vx.data().to_vec();
        for row in data.chunks_mut(c) {
            for (o, b) in row.iter_mut().zip(vb.data()) {
                *o += *b;
            }
        }
        let out = Tensor::new(vx.shape().to_vec(), data)?;
        let rg = self.rg(x) || self.rg(bias);
        Ok(self.push(out, Op::AddRow(x, bias), rg))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (va, vb) = (self.value(a), self.value(b));
        same_shape(va, vb, "mul")?;
        let data = va.data().iter().zip(vb.data()).map(|(x, y)| *x * *y).collect();
        let out = Tensor::new(va.shape().to_vec(), data)?;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(out, Op::Mul(a, b), rg))
    }

    pub fn scale(&mut self, x: Var, c: f64) -> Var {
        let c = S::from_f64(c);
        let vx = self.value(x);
        let data = vx.data().iter().map(|v| *v * c).collect();
        let out = Tensor::new(vx.shape().to_vec(), data).expect("same shape");
        let rg = self.rg(x);
        self.push(out, Op::Scale(x, c), rg)
    }

    /// GELU, tanh approximation.
    pub fn gelu(&mut self, x: Var) -> Var {
        let vx = self.value(x);
        let rg = self.rg(x);
        let data = vx.data().iter().map(|&v| gelu(v)).collect();
        let deriv = if rg {
            vx.data().iter().map(|&v| gelu_grad(v)).collect()
        } else {
            Vec::new()
        };
        let out = Tensor::new(vx.shape().to_vec(), data).expect("same shape");
        self.push(out, Op::Gelu(x, deriv), rg)
    }

    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var) -> Result<Var> {
        let out = self.value(x).layer_norm(self.value(gain), self.value(bias))?;
        let rg = self.rg(x) || self.rg(gain) || self.rg(bias);
        Ok(self.push(out, Op::LayerNorm { x, gain, bias }, rg))
    }

    /// Softmax over the last axis.
    pub fn softmax(&mut self, x: Var) -> Result<Var> {
        let out = self.value(x).softmax()?;
        let rg = self.rg(x);
        Ok(self.push(out, Op::Softmax(x), rg))
    }

    pub fn log_softmax(&mut self, x: Var) -> Result<Var> {
        let vx = self.value(x);
        let k = vx.cols();
        if k == 0 {
            return Err(Error::dim("log_softmax", "last axis is empty"));
        }
        let mut data = vx.data().to_vec();
        for row in data.chunks_mut(k) {
            log_softmax_in_place(row);
        }
        let out = Tensor::new(vx.shape().to_vec(), data)?;
        let rg = self.rg(x);
        Ok(self.push(out, Op::LogSoftmax(x), rg))
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let out = self.value(x).reshape(shape)?;
        let rg = self.rg(x);
        Ok(self.push(out, Op::Reshape(x), rg))
    }

    /// Columns `start..start + width` of a matrix.
    pub fn slice_cols(&mut self, x: Var, start: usize, width: usize) -> Result<Var> {
        let vx = self.value(x);
        let (r, c) = expect_matrix(vx, "slice_cols")?;
        if start + width > c {
            return Err(Error::dim(
                "slice_cols",
                format!("columns {}..{} of {}", start, start + width, c),
            ));
        }
        let mut data = Vec::with_capacity(r * width);
        for i in 0..r {
            data.extend_from_slice(&vx.row(i)[start..start + width]);
        }
        let out = Tensor::new(vec![r, width], data)?;
        let rg = self.rg(x);
        Ok(self.push(out, Op::SliceCols { x, start }, rg))
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let first = parts
            .first()
            .ok_or_else(|| Error::dim("concat_cols", "no inputs"))?;
        let rows = expect_matrix(self.value(*first), "concat_cols")?.0;
        let mut total = 0;
        for p in parts {
            let (r, c) = expect_matrix(self.value(*p), "concat_cols")?;
            if r != rows {
                return Err(Error::dim("concat_cols", format!("rows {} vs {}", r, rows)));
            }
            total += c;
        }
        let mut data = Vec::with_capacity(rows * total);
        for i in 0..rows {
            for p in parts {
                data.extend_from_slice(self.value(*p).row(i));
            }
        }
        let out = Tensor::new(vec![rows, total], data)?;
        let rg = parts.iter().any(|p| self.rg(*p));
        Ok(self.push(out, Op::ConcatCols(parts.to_vec()), rg))
    }

    /// Replaces every row `t` with `mask[t]` set by the single row vector `emb`.
    /// `emb` is never read when no row is masked.
    pub fn mask_rows(&mut self, x: Var, emb: Var, mask: &[bool]) -> Result<Var> {
        let (vx, ve) = (self.value(x), self.value(emb));
        let (r, c) = expect_matrix(vx, "mask_rows")?;
        if mask.len() != r || ve.len() != c {
            return Err(Error::dim(
                "mask_rows",
                format!("{} rows / width {} vs mask {} / emb {}", r, c, mask.len(), ve.len()),
            ));
        }
        let mut data = vx.data().to_vec();
        for (t, &m) in mask.iter().enumerate() {
            if m {
                data[t * c..(t + 1) * c].copy_from_slice(ve.data());
            }
        }
        let out = Tensor::new(vec![r, c], data)?;
        let rg = self.rg(x) || (self.rg(emb) && mask.iter().any(|&m| m));
        Ok(self.push(
            out,
            Op::MaskRows {
                x,
                emb,
                mask: mask.to_vec(),
            },
            rg,
        ))
    }

    /// `-Σ logp[row, class]` over `(row, class)` picks; a scalar.
    pub fn nll_sum(&mut self, logp: Var, picks: &[(usize, usize)]) -> Result<Var> {
        let v = self.value(logp);
        let (r, c) = expect_matrix(v, "nll_sum")?;
        let mut acc = 0.0f64;
        for &(row, class) in picks {
            if row >= r || class >= c {
                return Err(Error::dim(
                    "nll_sum",
                    format!("pick ({}, {}) outside {}x{}", row, class, r, c),
                ));
            }
            acc -= v.at(row, class).to_f64();
        }
        let rg = self.rg(logp);
        Ok(self.push(
            Tensor::scalar(S::from_f64(acc)),
            Op::NllSum {
                logp,
                picks: picks.to_vec(),
            },
            rg,
        ))
    }

    /// `Σ_rows KL(target_row ‖ exp(logq_row))`; a scalar. Zero target entries
    /// contribute nothing.
    pub fn kl_sum(&mut self, logq: Var, target: Tensor<S>, rows: &[usize]) -> Result<Var> {
        let v = self.value(logq);
        same_shape(v, &target, "kl_sum")?;
        let k = v.cols();
        let mut acc = 0.0f64;
        for &row in rows {
            if row >= v.rows() {
                return Err(Error::dim("kl_sum", format!("row {} of {}", row, v.rows())));
            }
            for j in 0..k {
                let p = target.data()[row * k + j].to_f64();
                if p > 0.0 {
                    acc += p * (libm::log(p) - v.data()[row * k + j].to_f64());
                }
            }
        }
        let rg = self.rg(logq);
        Ok(self.push(
            Tensor::scalar(S::from_f64(acc)),
            Op::KlSum {
                logq,
                target,
                rows: rows.to_vec(),
            },
            rg,
        ))
    }

    /// `Σ (x - target)²`; a scalar.
    pub fn sq_err_sum(&mut self, x: Var, target: Tensor<S>) -> Result<Var> {
        let v = self.value(x);
        same_shape(v, &target, "sq_err_sum")?;
        let acc: f64 = v
            .data()
            .iter()
            .zip(target.data())
            .map(|(a, b)| {
                let d = a.to_f64() - b.to_f64();
                d * d
            })
            .sum();
        let rg = self.rg(x);
        Ok(self.push(
            Tensor::scalar(S::from_f64(acc)),
            Op::SqErrSum { x, target },
            rg,
        ))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let acc: f64 = self.value(x).data().iter().map(|v| v.to_f64()).sum();
        let rg = self.rg(x);
        self.push(Tensor::scalar(S::from_f64(acc)), Op::Sum(x), rg)
    }

    /// Reverse sweep from `output`, seeded with ones. Only leaf gradients are
    /// kept.
    pub fn backward(&self, output: Var) -> Gradients<S> {
        let n = self.nodes.len();
        let mut grads: Vec<Option<Vec<S>>> = vec![None; n];
        grads[output.0] = Some(vec![S::ONE; self.nodes[output.0].value.len()]);

        for idx in (0..=output.0).rev() {
            let node = &self.nodes[idx];
            if !node.requires_grad {
                continue;
            }
            let Some(dy) = grads[idx].take() else {
                continue;
            };
            self.propagate(node, &dy, &mut grads);
            if matches!(node.op, Op::Leaf) {
                grads[idx] = Some(dy);
            }
        }

        Gradients {
            shapes: self.nodes.iter().map(|n| n.value.shape().to_vec()).collect(),
            grads,
        }
    }

    fn accumulate(&self, grads: &mut [Option<Vec<S>>], v: Var, f: impl FnOnce(&mut [S])) {
        if !self.rg(v) {
            return;
        }
        let slot = &mut grads[v.0];
        let buf = slot.get_or_insert_with(|| vec![S::ZERO; self.nodes[v.0].value.len()]);
        f(buf);
    }

    fn propagate(&self, node: &Node<S>, dy: &[S], grads: &mut [Option<Vec<S>>]) {
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (va, vb) = (self.value(*a), self.value(*b));
                let (m, k) = (va.shape()[0], va.shape()[1]);
                let n = vb.shape()[1];
                self.accumulate(grads, *a, |g| gemm_nt(dy, vb.data(), g, m, n, k));
                self.accumulate(grads, *b, |g| gemm_tn(va.data(), dy, g, m, k, n));
            }
            Op::MatMulNT(a, b) => {
                let (va, vb) = (self.value(*a), self.value(*b));
                let (m, k) = (va.shape()[0], va.shape()[1]);
                let n = vb.shape()[0];
                self.accumulate(grads, *a, |g| gemm_nn(dy, vb.data(), g, m, n, k));
                self.accumulate(grads, *b, |g| gemm_tn(dy, va.data(), g, m, n, k));
            }
            Op::Add(a, b) => {
                for v in [*a, *b] {
                    self.accumulate(grads, v, |g| add_into(g, dy));
                }
            }
            Op::AddRow(x, bias) => {
                self.accumulate(grads, *x, |g| add_into(g, dy));
                let c = node.value.cols();
                self.accumulate(grads, *bias, |g| {
                    for row in dy.chunks(c) {
                        add_into(g, row);
                    }
                });
            }
            Op::Mul(a, b) => {
                let (va, vb) = (self.value(*a), self.value(*b));
                self.accumulate(grads, *a, |g| {
                    for ((o, d), y) in g.iter_mut().zip(dy).zip(vb.data()) {
                        *o += *d * *y;
                    }
                });
                self.accumulate(grads, *b, |g| {
                    for ((o, d), x) in g.iter_mut().zip(dy).zip(va.data()) {
                        *o += *d * *x;
                    }
                });
            }
            Op::Scale(x, c) => {
                self.accumulate(grads, *x, |g| {
                    for (o, d) in g.iter_mut().zip(dy) {
                        *o += *d * *c;
                    }
                });
            }
            Op::Gelu(x, deriv) => {
                self.accumulate(grads, *x, |g| {
                    for ((o, d), dv) in g.iter_mut().zip(dy).zip(deriv) {
                        *o += *d * *dv;
                    }
                });
            }
            Op::LayerNorm { x, gain, bias } => {
                self.layer_norm_backward(*x, *gain, *bias, dy, grads);
            }
            Op::Softmax(x) => {
                let y = &node.value;
                let k = y.cols();
                self.accumulate(grads, *x, |g| {
                    for ((gr, dr), yr) in g.chunks_mut(k).zip(dy.chunks(k)).zip(y.data().chunks(k))
                    {
                        let dot: f64 = dr.iter().zip(yr).map(|(a, b)| a.to_f64() * b.to_f64()).sum();
                        let dot = S::from_f64(dot);
                        for ((o, d), p) in gr.iter_mut().zip(dr).zip(yr) {
                            *o += *p * (*d - dot);
                        }
                    }
                });
            }
            Op::LogSoftmax(x) => {
                let y = &node.value;
                let k = y.cols();
                self.accumulate(grads, *x, |g| {
                    for ((gr, dr), yr) in g.chunks_mut(k).zip(dy.chunks(k)).zip(y.data().chunks(k))
                    {
                        let total: f64 = dr.iter().map(|d| d.to_f64()).sum();
                        for ((o, d), ly) in gr.iter_mut().zip(dr).zip(yr) {
                            *o += *d - S::from_f64(libm::exp(ly.to_f64()) * total);
                        }
                    }
                });
            }
            Op::Reshape(x) => self.accumulate(grads, *x, |g| add_into(g, dy)),
            Op::SliceCols { x, start } => {
                let (r, w) = (node.value.shape()[0], node.value.shape()[1]);
                let c = self.value(*x).cols();
                self.accumulate(grads, *x, |g| {
                    for i in 0..r {
                        add_into(&mut g[i * c + start..i * c + start + w], &dy[i * w..(i + 1) * w]);
                    }
                });
            }
            Op::ConcatCols(parts) => {
                let (r, total) = (node.value.shape()[0], node.value.shape()[1]);
                let mut offset = 0;
                for p in parts {
                    let w = self.value(*p).cols();
                    self.accumulate(grads, *p, |g| {
                        for i in 0..r {
                            let src = &dy[i * total + offset..i * total + offset + w];
                            add_into(&mut g[i * w..(i + 1) * w], src);
                        }
                    });
                    offset += w;
                }
            }
            Op::MaskRows { x, emb, mask } => {
                let c = node.value.cols();
                self.accumulate(grads, *x, |g| {
                    for (t, &m) in mask.iter().enumerate() {
                        if !m {
                            add_into(&mut g[t * c..(t + 1) * c], &dy[t * c..(t + 1) * c]);
                        }
                    }
                });
                if mask.iter().any(|&m| m) {
                    self.accumulate(grads, *emb, |g| {
                        for (t, &m) in mask.iter().enumerate() {
                            if m {
                                add_into(g, &dy[t * c..(t + 1) * c]);
                            }
                        }
                    });
                }
            }
            Op::NllSum { logp, picks } => {
                let c = self.value(*logp).cols();
                let d = dy[0];
                self.accumulate(grads, *logp, |g| {
                    for &(row, class) in picks {
                        g[row * c + class] -= d;
                    }
                });
            }
            Op::KlSum { logq, target, rows } => {
                let k = target.cols();
                let d = dy[0];
                self.accumulate(grads, *logq, |g| {
                    for &row in rows {
                        for j in 0..k {
                            g[row * k + j] -= d * target.data()[row * k + j];
                        }
                    }
                });
            }
            Op::SqErrSum { x, target } => {
                let vx = self.value(*x);
                let two_d = dy[0] + dy[0];
                self.accumulate(grads, *x, |g| {
                    for ((o, a), b) in g.iter_mut().zip(vx.data()).zip(target.data()) {
                        *o += two_d * (*a - *b);
                    }
                });
            }
            Op::Sum(x) => {
                let d = dy[0];
                self.accumulate(grads, *x, |g| {
                    for o in g.iter_mut() {
                        *o += d;
                    }
                });
            }
        }
    }

    fn layer_norm_backward(
        &self,
        x: Var,
        gain: Var,
        bias: Var,
        dy: &[S],
        grads: &mut [Option<Vec<S>>],
    ) {
        let vx = self.value(x);
        let vg = self.value(gain);
        let d = vx.cols();
        let rows = vx.rows();
        let mut xhat = vec![0.0f64; vx.len()];
        let mut inv = vec![0.0f64; rows];
        for (i, xr) in vx.data().chunks(d).enumerate() {
            let (mean, inv_std) = row_moments(xr);
            inv[i] = inv_std;
            for j in 0..d {
                xhat[i * d + j] = (xr[j].to_f64() - mean) * inv_std;
            }
        }
        self.accumulate(grads, gain, |g| {
            for i in 0..rows {
                for j in 0..d {
                    g[j] += S::from_f64(dy[i * d + j].to_f64() * xhat[i * d + j]);
                }
            }
        });
        self.accumulate(grads, bias, |g| {
            for row in dy.chunks(d) {
                add_into(g, row);
            }
        });
        self.accumulate(grads, x, |g| {
            let mut dxhat = vec![0.0f64; d];
            for i in 0..rows {
                let mut mean_d = 0.0;
                let mut mean_dx = 0.0;
                for j in 0..d {
                    let v = dy[i * d + j].to_f64() * vg.data()[j].to_f64();
                    dxhat[j] = v;
                    mean_d += v;
                    mean_dx += v * xhat[i * d + j];
                }
                mean_d /= d as f64;
                mean_dx /= d as f64;
                for j in 0..d {
                    let v = inv[i] * (dxhat[j] - mean_d - xhat[i * d + j] * mean_dx);
                    g[i * d + j] += S::from_f64(v);
                }
            }
        });
    }
}

fn add_into<S: Real>(dst: &mut [S], src: &[S]) {
    for (o, s) in dst.iter_mut().zip(src) {
        *o += *s;
    }
}

#[inline]
pub(crate) fn gelu<S: Real>(x: S) -> S {
    let c = S::from_f64(GELU_C);
    let a = S::from_f64(GELU_A);
    let half = S::from_f64(0.5);
    half * x * (S::ONE + (c * (x + a * x * x * x)).tanh())
}

#[inline]
fn gelu_grad<S: Real>(x: S) -> S {
    let c = S::from_f64(GELU_C);
    let a = S::from_f64(GELU_A);
    let half = S::from_f64(0.5);
    let th = (c * (x + a * x * x * x)).tanh();
    let du = c * (S::ONE + S::from_f64(3.0) * a * x * x);
    half * (S::ONE + th) + half * x * (S::ONE - th * th) * du
}
