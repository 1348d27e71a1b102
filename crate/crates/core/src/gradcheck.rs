//! Central finite-difference verification of tape gradients, run in f64.

use alloc::format;
use alloc::vec::Vec;

use crate::error::{Error, Result};
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

/// Per-parameter outcome of a gradient check.
#[derive(Debug, Clone, PartialEq)]
pub struct ParamCheck {
    pub index: usize,
    pub max_abs_diff: f64,
    pub rel_error: f64,
}

/// Compares the tape gradient of the scalar `f` against central differences.
///
/// For each parameter tensor the relative error is
/// `max_i |analytic_i - numeric_i| / max(max_i |analytic_i|, 1e-8)`; the
/// returned value is the maximum over parameters.
pub fn grad_check<F>(f: F, params: &[Tensor<f64>], eps: f64) -> Result<f64>
where
    F: Fn(&mut Tape<f64>, &[Var]) -> Result<Var>,
{
    Ok(grad_check_detailed(f, params, eps)?
        .iter()
        .map(|c| c.rel_error)
        .fold(0.0, f64::max))
}

pub fn grad_check_detailed<F>(f: F, params: &[Tensor<f64>], eps: f64) -> Result<Vec<ParamCheck>>
where
    F: Fn(&mut Tape<f64>, &[Var]) -> Result<Var>,
{
    let eval = |ps: &[Tensor<f64>]| -> Result<f64> {
        let mut tape = Tape::new();
        let vars: Vec<Var> = ps.iter().map(|p| tape.param(p.clone())).collect();
        let out = f(&mut tape, &vars)?;
        let v = tape.value(out);
        if v.len() != 1 {
            return Err(Error::dim("grad_check", format!("output has {} elements", v.len())));
        }
        let v = v.item();
        if !v.is_finite() {
            return Err(Error::Numeric(format!("loss evaluated to {}", v)));
        }
        Ok(v)
    };

    let mut tape = Tape::new();
    let vars: Vec<Var> = params.iter().map(|p| tape.param(p.clone())).collect();
    let out = f(&mut tape, &vars)?;
    if !tape.value(out).item().is_finite() {
        return Err(Error::Numeric("non-finite loss at the base point".into()));
    }
    let grads = tape.backward(out);

    let mut work: Vec<Tensor<f64>> = params.to_vec();
    let mut report = Vec::with_capacity(params.len());
    for (pi, var) in vars.iter().enumerate() {
        let analytic = grads.wrt(*var);
        let mut max_diff = 0.0f64;
        let mut max_mag = 0.0f64;
        for i in 0..params[pi].len() {
            let orig = params[pi].data()[i];
            work[pi].data_mut()[i] = orig + eps;
            let plus = eval(&work)?;
            work[pi].data_mut()[i] = orig - eps;
            let minus = eval(&work)?;
            work[pi].data_mut()[i] = orig;
            let numeric = (plus - minus) / (2.0 * eps);
            let a = analytic.data()[i];
            max_diff = max_diff.max((a - numeric).abs());
            max_mag = max_mag.max(a.abs());
        }
        report.push(ParamCheck {
            index: pi,
            max_abs_diff: max_diff,
            rel_error: max_diff / max_mag.max(1e-8),
        });
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;
    use alloc::vec;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn rand_tensor(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor<f64> {
        let n = shape.iter().product();
        Tensor::new(shape.to_vec(), (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap()
    }

    #[test]
    fn square_is_exact() {
        let err = grad_check(
            |t, v| t.mul(v[0], v[0]),
            &[Tensor::scalar(3.0)],
            1e-4,
        )
        .unwrap();
        assert!(err < 1e-6, "{err}");
    }

    #[test]
    fn constant_function_has_zero_error() {
        let err = grad_check(
            |t, _| Ok(t.constant(Tensor::scalar(5.0))),
            &[Tensor::scalar(1.0)],
            1e-4,
        )
        .unwrap();
        assert_eq!(err, 0.0);
    }

    #[test]
    fn non_finite_loss_is_numeric_error() {
        let r = grad_check(
            |t, v| {
                let big = t.scale(v[0], f64::INFINITY);
                Ok(t.sum(big))
            },
            &[Tensor::scalar(1.0)],
            1e-4,
        );
        assert!(matches!(r, Err(Error::Numeric(_))));
    }

    // Each trainable primitive checked in isolation at random points in [-1, 1].
    #[test]
    fn every_primitive_passes() {
        let mut rng = ChaCha8Rng::seed_from_u64(42);
        type Case = fn(&mut Tape<f64>, &[Var]) -> Result<Var>;
        let cases: Vec<(&str, Vec<Vec<usize>>, Case)> = vec![
            ("matmul", vec![vec![3, 4], vec![4, 2]], |t, v| {
                let y = t.matmul(v[0], v[1])?;
                let y2 = t.mul(y, y)?;
                Ok(t.sum(y2))
            }),
            ("matmul_nt", vec![vec![3, 4], vec![5, 4]], |t, v| {
                let y = t.matmul_nt(v[0], v[1])?;
                let y2 = t.mul(y, y)?;
                Ok(t.sum(y2))
            }),
            ("add_row+gelu", vec![vec![3, 4], vec![4]], |t, v| {
                let y = t.add_row(v[0], v[1])?;
                let y = t.gelu(y);
                let y2 = t.mul(y, y)?;
                Ok(t.sum(y2))
            }),
            ("layer_norm", vec![vec![3, 4], vec![4], vec![4]], |t, v| {
                let y = t.layer_norm(v[0], v[1], v[2])?;
                let w = t.constant(Tensor::new(vec![4, 1], vec![0.3, -1.2, 0.7, 2.0]).unwrap());
                let y = t.matmul(y, w)?;
                let y2 = t.mul(y, y)?;
                Ok(t.sum(y2))
            }),
            ("softmax", vec![vec![3, 4]], |t, v| {
                let y = t.softmax(v[0])?;
                let w = t.constant(Tensor::new(vec![4, 1], vec![0.3, -1.2, 0.7, 2.0]).unwrap());
                let y = t.matmul(y, w)?;
                let y2 = t.mul(y, y)?;
                Ok(t.sum(y2))
            }),
            ("log_softmax+nll", vec![vec![3, 4]], |t, v| {
                let y = t.log_softmax(v[0])?;
                t.nll_sum(y, &[(0, 1), (2, 3), (2, 0)])
            }),
            ("kl", vec![vec![3, 4]], |t, v| {
                let y = t.log_softmax(v[0])?;
                let target = Tensor::new(
                    vec![3, 4],
                    vec![0.1, 0.2, 0.3, 0.4, 0.25, 0.25, 0.25, 0.25, 0.0, 0.5, 0.5, 0.0],
                )
                .unwrap();
                t.kl_sum(y, target, &[0, 2])
            }),
            ("slice/concat/reshape/scale", vec![vec![3, 4]], |t, v| {
                let a = t.slice_cols(v[0], 1, 2)?;
                let b = t.slice_cols(v[0], 0, 1)?;
                let c = t.concat_cols(&[a, b, a])?;
                let r = t.reshape(c, &[15, 1])?;
                let s = t.scale(r, -0.7);
                let s2 = t.mul(s, r)?;
                Ok(t.sum(s2))
            }),
            ("mask_rows", vec![vec![3, 4], vec![4]], |t, v| {
                let y = t.mask_rows(v[0], v[1], &[true, false, true])?;
                let y = t.gelu(y);
                let y2 = t.mul(y, y)?;
                Ok(t.sum(y2))
            }),
            ("sq_err", vec![vec![3, 4]], |t, v| {
                let target = Tensor::full(&[3, 4], 0.25);
                t.sq_err_sum(v[0], target)
            }),
        ];
        for (name, shapes, f) in cases {
            let params: Vec<Tensor<f64>> = shapes.iter().map(|s| rand_tensor(&mut rng, s)).collect();
            let err = grad_check(f, &params, 1e-5).unwrap();
            assert!(err < 1e-4, "{name}: rel error {err}");
        }
    }
}
