//! Finite-difference verification of analytic gradients.

use super::{Tape, Var};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Central-difference step. Chosen for f64: truncation and rounding error
/// cross over near 1e-5 for O(1) losses.
pub const FD_EPS: f64 = 1e-5;

/// |a−b| / max(|a|, |b|, 1e-8).
pub fn rel_err(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(1e-8)
}

/// Max relative error between analytic and central-difference gradients of a
/// scalar-valued function at `x`.
///
/// `f` must be deterministic and differentiable at `x`; keep inputs at least
/// ~1e-3 away from relu/max kinks or the finite differences straddle them.
pub fn gradcheck_fn(
    f: impl for<'a> Fn(&'a Tape, Var<'a>) -> Result<Var<'a>>,
    x: &Tensor,
    eps: f64,
) -> Result<f64> {
    let eval = |pt: &Tensor, want_grad: bool| -> Result<(f64, Option<Tensor>)> {
        let tape = Tape::new();
        let v = tape.leaf(pt.clone(), want_grad);
        let y = f(&tape, v)?;
        let yv = y.value();
        if yv.numel() != 1 {
            return Err(Error::validation(format!(
                "gradcheck function must return a scalar, got shape {}",
                crate::tensor::fmt_shape(yv.shape())
            )));
        }
        let out = yv.data()[0];
        if !out.is_finite() {
            return Err(Error::numerical(format!("gradcheck function produced {out}")));
        }
        if want_grad {
            tape.backward(y)?;
            Ok((out, Some(tape.grad(v).expect("x requires grad"))))
        } else {
            Ok((out, None))
        }
    };
    let (_, analytic) = eval(x, true)?;
    let analytic = analytic.unwrap();
    let mut worst = 0.0f64;
    let mut pt = x.clone();
    for i in 0..x.numel() {
        let orig = pt.data()[i];
        pt.data_mut()[i] = orig + eps;
        let (fp, _) = eval(&pt, false)?;
        pt.data_mut()[i] = orig - eps;
        let (fm, _) = eval(&pt, false)?;
        pt.data_mut()[i] = orig;
        let fd = (fp - fm) / (2.0 * eps);
        worst = worst.max(rel_err(analytic.data()[i], fd));
    }
    Ok(worst)
}
