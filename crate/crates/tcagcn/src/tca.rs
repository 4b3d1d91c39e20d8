//! The TCA module: channel-wise topology modeling, temporal adaptive weight
//! aggregation, and channel aggregation, for one partition subset.
//!
//! All forward functions accept `[T, N, C]` or `[B, T, N, C]` inputs; the
//! trailing three axes are always (time, joint, channel).

use rand::Rng;

use crate::autodiff::ops::{self, Activation};
use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::tensor::{fmt_shape, uniform, Tensor};

/// Trainable state of one TCA module.
///
/// `alpha` scales the learned correlation before the static topology is
/// added; at its zero init the module starts from the prior graph alone.
/// The calibration branch's second conv is zero-initialized so α_t ≡ 1 at
/// init: training starts from frame-shared weights.
#[derive(Debug, Clone)]
pub struct TcaParams {
    pub alpha: Tensor,
    /// Bottleneck correlation maps C→Cq (no bias).
    pub phi: Tensor,
    pub psi: Tensor,
    /// Expansion Cq→C₁ (no bias, so a zero correlation stays zero).
    pub xi: Tensor,
    /// Initial per-frame weight, C₁×C.
    pub w0: Tensor,
    /// Calibration branch: temporal conv K=3 C→Cr, σ, temporal conv K=3
    /// Cr→C₁, then 1 + output.
    pub calib_w1: Tensor,
    pub calib_b1: Tensor,
    pub calib_w2: Tensor,
    pub calib_b2: Tensor,
    /// σ for both the correlation model and the calibration branch.
    pub act: Activation,
}

/// The same module bound onto a tape for one forward pass.
#[derive(Clone, Copy)]
pub struct TcaVars<'t> {
    pub alpha: Var<'t>,
    pub phi: Var<'t>,
    pub psi: Var<'t>,
    pub xi: Var<'t>,
    pub w0: Var<'t>,
    pub calib_w1: Var<'t>,
    pub calib_b1: Var<'t>,
    pub calib_w2: Var<'t>,
    pub calib_b2: Var<'t>,
    pub act: Activation,
}

/// Width of a bottleneck: C/r, floored, never below 1.
pub fn bottleneck(c: usize, r: usize) -> usize {
    (c / r).max(1)
}

impl TcaParams {
    pub fn init(
        c_in: usize,
        c_out: usize,
        rq: usize,
        r: usize,
        act: Activation,
        rng: &mut impl Rng,
    ) -> Self {
        let cq = bottleneck(c_in, rq);
        let cr = bottleneck(c_in, r);
        let fan_in = |ci: usize| (1.0 / ci as f64).sqrt();
        TcaParams {
            alpha: Tensor::scalar(0.0),
            phi: uniform(rng, &[cq, c_in], fan_in(c_in)),
            psi: uniform(rng, &[cq, c_in], fan_in(c_in)),
            xi: uniform(rng, &[c_out, cq], fan_in(cq)),
            w0: uniform(rng, &[c_out, c_in], fan_in(c_in)),
            calib_w1: uniform(rng, &[3, c_in, cr], fan_in(3 * c_in)),
            calib_b1: Tensor::zeros(&[cr]),
            calib_w2: Tensor::zeros(&[3, cr, c_out]),
            calib_b2: Tensor::zeros(&[c_out]),
            act,
        }
    }

    pub fn visit(
        &mut self,
        prefix: &str,
        f: &mut impl FnMut(String, &mut Tensor),
    ) {
        f(format!("{prefix}.alpha"), &mut self.alpha);
        f(format!("{prefix}.phi"), &mut self.phi);
        f(format!("{prefix}.psi"), &mut self.psi);
        f(format!("{prefix}.xi"), &mut self.xi);
        f(format!("{prefix}.w0"), &mut self.w0);
        f(format!("{prefix}.calib_w1"), &mut self.calib_w1);
        f(format!("{prefix}.calib_b1"), &mut self.calib_b1);
        f(format!("{prefix}.calib_w2"), &mut self.calib_w2);
        f(format!("{prefix}.calib_b2"), &mut self.calib_b2);
    }

    /// Register every trainable tensor as a tape leaf. The (name, var) pairs
    /// land in `reg` in the same order `visit` walks them.
    pub fn bind<'t>(
        &self,
        prefix: &str,
        tape: &'t Tape,
        reg: &mut Vec<(String, Var<'t>)>,
    ) -> TcaVars<'t> {
        let mut leaf = |name: &str, t: &Tensor| {
            let v = tape.leaf(t.clone(), true);
            reg.push((format!("{prefix}.{name}"), v));
            v
        };
        TcaVars {
            alpha: leaf("alpha", &self.alpha),
            phi: leaf("phi", &self.phi),
            psi: leaf("psi", &self.psi),
            xi: leaf("xi", &self.xi),
            w0: leaf("w0", &self.w0),
            calib_w1: leaf("calib_w1", &self.calib_w1),
            calib_b1: leaf("calib_b1", &self.calib_b1),
            calib_w2: leaf("calib_w2", &self.calib_w2),
            calib_b2: leaf("calib_b2", &self.calib_b2),
            act: self.act,
        }
    }
}

fn time_joint_axes(x: Var<'_>) -> Result<(usize, usize)> {
    let rank = x.shape().len();
    if rank < 3 {
        return Err(Error::validation(format!(
            "expected [..., T, N, C], got {}",
            fmt_shape(&x.shape())
        )));
    }
    Ok((rank - 3, rank - 2))
}

/// Channel-specific joint correlations Q ∈ `[..., N, N, C₁]`.
///
/// Mean-pool over time, map through the φ/ψ bottlenecks, take all pairwise
/// differences u[n]−v[m], apply σ, expand with ξ.
pub fn correlation_model<'t>(x: Var<'t>, p: &TcaVars<'t>) -> Result<Var<'t>> {
    let (t_ax, _) = time_joint_axes(x)?;
    let pooled = x.pool_mean(&[t_ax])?;
    let u = ops::linear(pooled, p.phi, None)?;
    let v = ops::linear(pooled, p.psi, None)?;
    let mut u_shape = u.shape();
    let n = u_shape[u_shape.len() - 2];
    let cq = *u_shape.last().unwrap();
    u_shape.truncate(u_shape.len() - 2);
    let prefix = u_shape;
    let mut shape_u = prefix.clone();
    shape_u.extend([n, 1, cq]);
    let mut shape_v = prefix;
    shape_v.extend([1, n, cq]);
    let diff = ops::sub(u.reshape(&shape_u)?, v.reshape(&shape_v)?)?;
    ops::linear(diff.activation(p.act), p.xi, None)
}

/// S = α·Q + μ(A_k), the static prior refined per channel.
pub fn refine_topology<'t>(q: Var<'t>, mu_ak: Var<'t>, alpha: Var<'t>) -> Result<Var<'t>> {
    let mu_shape = mu_ak.shape();
    if mu_shape.len() != 2 || mu_shape[0] != mu_shape[1] {
        return Err(Error::validation(format!(
            "μ(A_k) must be square, got {}",
            fmt_shape(&mu_shape)
        )));
    }
    let n = mu_shape[0];
    let mu3 = mu_ak.reshape(&[n, n, 1])?;
    ops::add(ops::mul(q, alpha)?, mu3)
}

/// Frame calibration factors α_t ∈ `[..., T, C₁]`: 1 + conv(σ(conv(mean over
/// joints of X))). Zeroed branch parameters give α_t ≡ 1.
pub fn calibration<'t>(x: Var<'t>, p: &TcaVars<'t>) -> Result<Var<'t>> {
    let (_, n_ax) = time_joint_axes(x)?;
    let frames = x.pool_mean(&[n_ax])?;
    let mut conv_shape = frames.shape();
    conv_shape.insert(conv_shape.len() - 1, 1);
    let h = frames.reshape(&conv_shape)?;
    let h = ops::conv_temporal(h, p.calib_w1, Some(p.calib_b1), 1, 1)?;
    let h = ops::conv_temporal(h.activation(p.act), p.calib_w2, Some(p.calib_b2), 1, 1)?;
    let bt = h.add_scalar(1.0);
    let mut out_shape = bt.shape();
    out_shape.remove(out_shape.len() - 2);
    bt.reshape(&out_shape)
}

/// Apply the calibrated per-frame weights: out[.., t, n, :] = (α_t ⊙ rows of
/// W₀)·x[.., t, n, :], frames concatenated along T.
pub fn temporal_aggregate<'t>(x: Var<'t>, w0: Var<'t>, alpha_t: Var<'t>) -> Result<Var<'t>> {
    time_joint_axes(x)?;
    let base = ops::linear(x, w0, None)?;
    let at_shape = alpha_t.shape();
    let x_shape = x.shape();
    let t = x_shape[x_shape.len() - 3];
    let c1 = w0.shape()[0];
    if at_shape[at_shape.len() - 2..] != [t, c1] {
        return Err(Error::validation(format!(
            "α_t {} does not match T={t}, C₁={c1}",
            fmt_shape(&at_shape)
        )));
    }
    let mut bshape = at_shape;
    bshape.insert(bshape.len() - 1, 1);
    ops::mul(base, alpha_t.reshape(&bshape)?)
}

/// Per-channel joint mixing through S; re-exported from the op so callers
/// compose the documented pipeline from one module.
pub use crate::autodiff::ops::channel_aggregate;

/// The whole module: CA(TA(X, W₀, α_t), α·Q + μ(A_k)).
pub fn tca_forward<'t>(x: Var<'t>, mu_ak: Var<'t>, p: &TcaVars<'t>) -> Result<Var<'t>> {
    let alpha_t = calibration(x, p)?;
    let a_out = temporal_aggregate(x, p.w0, alpha_t)?;
    let q = correlation_model(x, p)?;
    let s = refine_topology(q, mu_ak, p.alpha)?;
    channel_aggregate(a_out, s)
}
