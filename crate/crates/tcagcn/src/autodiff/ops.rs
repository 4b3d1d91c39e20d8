//! Differentiable operations.
//!
//! Tensor arguments follow two layout conventions used across the crate:
//! features live on the last axis, and time-structured inputs are
//! `[..., T, N, C]` with any number of leading batch axes. Binary elementwise
//! ops broadcast trailing dimensions; their backward sums adjoints over the
//! broadcast axes.

use std::cell::RefCell;

use serde::{Deserialize, Serialize};

use super::{same_tape, BackFn, Tape, Var};
use crate::error::{Error, Result};
use crate::tensor::{broadcast_zip, fmt_shape, reduce_to_shape, strides_of, Tensor};

pub const BN_EPS: f64 = 1e-5;
/// Running-stat retention: running = momentum·running + (1−momentum)·batch.
pub const BN_MOMENTUM: f64 = 0.9;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    Relu,
    Tanh,
    Sigmoid,
}

/// How batch_norm sources its statistics.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BnMode {
    /// Batch statistics; running stats are updated.
    Train,
    /// Batch statistics; running stats left alone. Keeps the loss a pure
    /// function of parameters, which finite-difference checks need.
    TrainFrozen,
    /// Running statistics only.
    Eval,
}

fn emit<'t>(tape: &'t Tape, value: Tensor, requires_grad: bool, back: BackFn) -> Var<'t> {
    if requires_grad {
        tape.push(value, true, Some(back))
    } else {
        tape.push(value, false, None)
    }
}

// ── elementwise ───────────────────────────────────────────────────────────────

pub fn add<'t>(a: Var<'t>, b: Var<'t>) -> Result<Var<'t>> {
    let tape = same_tape(a, b);
    let (av, bv) = (a.value(), b.value());
    let out = broadcast_zip(&av, &bv, |x, y| x + y)?;
    let (sa, sb) = (av.shape().to_vec(), bv.shape().to_vec());
    let (ia, ib) = (a.id(), b.id());
    Ok(emit(
        tape,
        out,
        a.requires_grad() || b.requires_grad(),
        Box::new(move |g| {
            vec![(ia, reduce_to_shape(g, &sa)), (ib, reduce_to_shape(g, &sb))]
        }),
    ))
}

pub fn sub<'t>(a: Var<'t>, b: Var<'t>) -> Result<Var<'t>> {
    let tape = same_tape(a, b);
    let (av, bv) = (a.value(), b.value());
    let out = broadcast_zip(&av, &bv, |x, y| x - y)?;
    let (sa, sb) = (av.shape().to_vec(), bv.shape().to_vec());
    let (ia, ib) = (a.id(), b.id());
    Ok(emit(
        tape,
        out,
        a.requires_grad() || b.requires_grad(),
        Box::new(move |g| {
            let gb = reduce_to_shape(g, &sb).map(|v| -v);
            vec![(ia, reduce_to_shape(g, &sa)), (ib, gb)]
        }),
    ))
}

pub fn mul<'t>(a: Var<'t>, b: Var<'t>) -> Result<Var<'t>> {
    let tape = same_tape(a, b);
    let (av, bv) = (a.value(), b.value());
    let out = broadcast_zip(&av, &bv, |x, y| x * y)?;
    let (sa, sb) = (av.shape().to_vec(), bv.shape().to_vec());
    let (ia, ib) = (a.id(), b.id());
    Ok(emit(
        tape,
        out,
        a.requires_grad() || b.requires_grad(),
        Box::new(move |g| {
            let ga = broadcast_zip(g, &bv, |x, y| x * y).expect("forward broadcast held");
            let gb = broadcast_zip(g, &av, |x, y| x * y).expect("forward broadcast held");
            vec![(ia, reduce_to_shape(&ga, &sa)), (ib, reduce_to_shape(&gb, &sb))]
        }),
    ))
}

impl<'t> Var<'t> {
    pub fn scale(self, c: f64) -> Var<'t> {
        let out = self.with_value(|v| v.map(|x| x * c));
        let id = self.id();
        emit(
            self.tape(),
            out,
            self.requires_grad(),
            Box::new(move |g| vec![(id, g.map(|v| v * c))]),
        )
    }

    pub fn add_scalar(self, c: f64) -> Var<'t> {
        let out = self.with_value(|v| v.map(|x| x + c));
        let id = self.id();
        emit(
            self.tape(),
            out,
            self.requires_grad(),
            Box::new(move |g| vec![(id, g.clone())]),
        )
    }

    pub fn relu(self) -> Var<'t> {
        let xv = self.value();
        let out = xv.map(|v| v.max(0.0));
        let id = self.id();
        emit(
            self.tape(),
            out,
            self.requires_grad(),
            // Subgradient at 0 is 0.
            Box::new(move |g| {
                let mut gx = g.clone();
                for (gi, &x) in gx.data_mut().iter_mut().zip(xv.data()) {
                    if x <= 0.0 {
                        *gi = 0.0;
                    }
                }
                vec![(id, gx)]
            }),
        )
    }

    pub fn tanh(self) -> Var<'t> {
        let out = self.with_value(|v| v.map(f64::tanh));
        let y = out.clone();
        let id = self.id();
        emit(
            self.tape(),
            out,
            self.requires_grad(),
            Box::new(move |g| {
                let mut gx = g.clone();
                for (gi, &yv) in gx.data_mut().iter_mut().zip(y.data()) {
                    *gi *= 1.0 - yv * yv;
                }
                vec![(id, gx)]
            }),
        )
    }

    pub fn sigmoid(self) -> Var<'t> {
        let out = self.with_value(|v| v.map(|x| 1.0 / (1.0 + (-x).exp())));
        let y = out.clone();
        let id = self.id();
        emit(
            self.tape(),
            out,
            self.requires_grad(),
            Box::new(move |g| {
                let mut gx = g.clone();
                for (gi, &yv) in gx.data_mut().iter_mut().zip(y.data()) {
                    *gi *= yv * (1.0 - yv);
                }
                vec![(id, gx)]
            }),
        )
    }

    pub fn activation(self, act: Activation) -> Var<'t> {
        match act {
            Activation::Relu => self.relu(),
            Activation::Tanh => self.tanh(),
            Activation::Sigmoid => self.sigmoid(),
        }
    }

    pub fn reshape(self, shape: &[usize]) -> Result<Var<'t>> {
        let out = self.with_value(|v| v.reshaped(shape))?;
        let orig = self.shape();
        let id = self.id();
        Ok(emit(
            self.tape(),
            out,
            self.requires_grad(),
            Box::new(move |g| vec![(id, g.reshaped(&orig).expect("same numel"))]),
        ))
    }
}

// ── reductions ────────────────────────────────────────────────────────────────

pub fn sum_all(x: Var<'_>) -> Var<'_> {
    let shape = x.shape();
    let total = x.with_value(|v| v.data().iter().sum());
    let id = x.id();
    emit(
        x.tape(),
        Tensor::scalar(total),
        x.requires_grad(),
        Box::new(move |g| vec![(id, Tensor::full(&shape, g.data()[0]))]),
    )
}

pub fn mean_all(x: Var<'_>) -> Var<'_> {
    let n = x.with_value(|v| v.numel());
    sum_all(x).scale(1.0 / n as f64)
}

fn validate_axes(shape: &[usize], axes: &[usize]) -> Result<Vec<usize>> {
    if axes.is_empty() {
        return Err(Error::validation("pool needs at least one axis"));
    }
    let mut sorted = axes.to_vec();
    sorted.sort_unstable();
    sorted.dedup();
    if sorted.len() != axes.len() {
        return Err(Error::validation(format!("duplicate pool axes {axes:?}")));
    }
    if let Some(&bad) = sorted.iter().find(|&&ax| ax >= shape.len()) {
        return Err(Error::validation(format!(
            "pool axis {bad} out of range for shape {}",
            fmt_shape(shape)
        )));
    }
    Ok(sorted)
}

fn pool_plan(shape: &[usize], axes: &[usize]) -> (Vec<usize>, Vec<usize>, usize) {
    // Output shape drops the pooled axes; out_stride_for_input_axis maps each
    // input axis to its stride in the output (0 when pooled away).
    let keep: Vec<usize> = (0..shape.len()).filter(|ax| !axes.contains(ax)).collect();
    let out_shape: Vec<usize> = keep.iter().map(|&ax| shape[ax]).collect();
    let out_strides = strides_of(&out_shape);
    let mut map = vec![0usize; shape.len()];
    for (oi, &ax) in keep.iter().enumerate() {
        map[ax] = out_strides[oi];
    }
    let count: usize = axes.iter().map(|&ax| shape[ax]).product();
    (out_shape, map, count)
}

impl<'t> Var<'t> {
    /// Mean over the given axes; the axes are removed from the shape.
    pub fn pool_mean(self, axes: &[usize]) -> Result<Var<'t>> {
        let xv = self.value();
        let axes = validate_axes(xv.shape(), axes)?;
        let (out_shape, axis_map, count) = pool_plan(xv.shape(), &axes);
        let shape = xv.shape().to_vec();
        let mut out = Tensor::zeros(&out_shape);
        {
            let od = out.data_mut();
            let mut idx = vec![0usize; shape.len()];
            let mut ooff = 0usize;
            for &v in xv.data() {
                od[ooff] += v;
                advance(&mut idx, &shape, &axis_map, &mut ooff);
            }
            let inv = 1.0 / count as f64;
            for o in od.iter_mut() {
                *o *= inv;
            }
        }
        let id = self.id();
        Ok(emit(
            self.tape(),
            out,
            self.requires_grad(),
            Box::new(move |g| {
                let mut gx = Tensor::zeros(&shape);
                let inv = 1.0 / count as f64;
                let mut idx = vec![0usize; shape.len()];
                let mut ooff = 0usize;
                let gd = g.data();
                for slot in gx.data_mut().iter_mut() {
                    *slot = gd[ooff] * inv;
                    advance(&mut idx, &shape, &axis_map, &mut ooff);
                }
                vec![(id, gx)]
            }),
        ))
    }

    /// Max over the given axes; ties route gradient to the lowest flat index.
    pub fn pool_max(self, axes: &[usize]) -> Result<Var<'t>> {
        let xv = self.value();
        let axes = validate_axes(xv.shape(), axes)?;
        let (out_shape, axis_map, _count) = pool_plan(xv.shape(), &axes);
        let shape = xv.shape().to_vec();
        let out_numel: usize = out_shape.iter().product();
        let mut best = vec![f64::NEG_INFINITY; out_numel];
        let mut arg = vec![0usize; out_numel];
        {
            let mut idx = vec![0usize; shape.len()];
            let mut ooff = 0usize;
            for (i, &v) in xv.data().iter().enumerate() {
                if v > best[ooff] {
                    best[ooff] = v;
                    arg[ooff] = i;
                }
                advance(&mut idx, &shape, &axis_map, &mut ooff);
            }
        }
        let out = Tensor::new(out_shape, best).expect("shape/product consistent");
        let id = self.id();
        Ok(emit(
            self.tape(),
            out,
            self.requires_grad(),
            Box::new(move |g| {
                let mut gx = Tensor::zeros(&shape);
                for (o, &src) in arg.iter().enumerate() {
                    gx.data_mut()[src] += g.data()[o];
                }
                vec![(id, gx)]
            }),
        ))
    }
}

/// Advance a row-major multi-index and keep the mapped output offset in sync.
#[inline]
fn advance(idx: &mut [usize], shape: &[usize], axis_map: &[usize], ooff: &mut usize) {
    for ax in (0..shape.len()).rev() {
        idx[ax] += 1;
        *ooff += axis_map[ax];
        if idx[ax] < shape[ax] {
            return;
        }
        idx[ax] = 0;
        *ooff -= axis_map[ax] * shape[ax];
    }
}

// ── linear algebra ────────────────────────────────────────────────────────────

pub fn matmul<'t>(a: Var<'t>, b: Var<'t>) -> Result<Var<'t>> {
    let tape = same_tape(a, b);
    let (av, bv) = (a.value(), b.value());
    if av.rank() != 2 || bv.rank() != 2 {
        return Err(Error::validation(format!(
            "matmul wants rank-2 operands, got {} and {}",
            fmt_shape(av.shape()),
            fmt_shape(bv.shape())
        )));
    }
    let (m, k) = (av.shape()[0], av.shape()[1]);
    let (k2, n) = (bv.shape()[0], bv.shape()[1]);
    if k != k2 {
        return Err(Error::validation(format!(
            "matmul inner dimensions differ: {} vs {}",
            fmt_shape(av.shape()),
            fmt_shape(bv.shape())
        )));
    }
    let mut out = Tensor::zeros(&[m, n]);
    {
        let od = out.data_mut();
        let (ad, bd) = (av.data(), bv.data());
        for i in 0..m {
            let orow = &mut od[i * n..(i + 1) * n];
            for kk in 0..k {
                let x = ad[i * k + kk];
                let brow = &bd[kk * n..(kk + 1) * n];
                for (o, &bvv) in orow.iter_mut().zip(brow) {
                    *o += x * bvv;
                }
            }
        }
    }
    let (ia, ib) = (a.id(), b.id());
    Ok(emit(
        tape,
        out,
        a.requires_grad() || b.requires_grad(),
        Box::new(move |g| {
            let gd = g.data();
            let (ad, bd) = (av.data(), bv.data());
            // ga = g · bᵀ
            let mut ga = Tensor::zeros(&[m, k]);
            {
                let gad = ga.data_mut();
                for i in 0..m {
                    let grow = &gd[i * n..(i + 1) * n];
                    for kk in 0..k {
                        let brow = &bd[kk * n..(kk + 1) * n];
                        let mut acc = 0.0;
                        for (gvv, bvv) in grow.iter().zip(brow) {
                            acc += gvv * bvv;
                        }
                        gad[i * k + kk] = acc;
                    }
                }
            }
            // gb = aᵀ · g
            let mut gb = Tensor::zeros(&[k, n]);
            {
                let gbd = gb.data_mut();
                for i in 0..m {
                    let grow = &gd[i * n..(i + 1) * n];
                    for kk in 0..k {
                        let x = ad[i * k + kk];
                        let gbrow = &mut gbd[kk * n..(kk + 1) * n];
                        for (o, &gvv) in gbrow.iter_mut().zip(grow) {
                            *o += x * gvv;
                        }
                    }
                }
            }
            vec![(ia, ga), (ib, gb)]
        }),
    ))
}

/// x: `[..., C_in]`, weight: `[C_out, C_in]`, bias: `[C_out]` →
/// `[..., C_out]`. The feature map every module uses.
pub fn linear<'t>(x: Var<'t>, weight: Var<'t>, bias: Option<Var<'t>>) -> Result<Var<'t>> {
    let tape = same_tape(x, weight);
    let (xv, wv) = (x.value(), weight.value());
    if wv.rank() != 2 {
        return Err(Error::validation(format!(
            "linear weight must be rank 2, got {}",
            fmt_shape(wv.shape())
        )));
    }
    let (c_out, c_in) = (wv.shape()[0], wv.shape()[1]);
    if xv.rank() < 1 || *xv.shape().last().unwrap() != c_in {
        return Err(Error::validation(format!(
            "linear input {} does not end in C_in={} (weight {})",
            fmt_shape(xv.shape()),
            c_in,
            fmt_shape(wv.shape())
        )));
    }
    let bv = match bias {
        Some(b) => {
            same_tape(x, b);
            let bvv = b.value();
            if bvv.shape() != [c_out] {
                return Err(Error::validation(format!(
                    "linear bias must be [{}], got {}",
                    c_out,
                    fmt_shape(bvv.shape())
                )));
            }
            Some((b.id(), bvv, b.requires_grad()))
        }
        None => None,
    };
    let rows = xv.numel() / c_in;
    let mut out_shape = xv.shape().to_vec();
    *out_shape.last_mut().unwrap() = c_out;
    let mut out = Tensor::zeros(&out_shape);
    {
        let od = out.data_mut();
        let (xd, wd) = (xv.data(), wv.data());
        for r in 0..rows {
            let xrow = &xd[r * c_in..(r + 1) * c_in];
            let orow = &mut od[r * c_out..(r + 1) * c_out];
            for (co, o) in orow.iter_mut().enumerate() {
                let wrow = &wd[co * c_in..(co + 1) * c_in];
                let mut acc = 0.0;
                for (xvv, wvv) in xrow.iter().zip(wrow) {
                    acc += xvv * wvv;
                }
                *o = acc;
            }
            if let Some((_, bvv, _)) = &bv {
                for (o, b) in orow.iter_mut().zip(bvv.data()) {
                    *o += b;
                }
            }
        }
    }
    let req = x.requires_grad()
        || weight.requires_grad()
        || bv.as_ref().is_some_and(|(_, _, r)| *r);
    let (ix, iw) = (x.id(), weight.id());
    let x_shape = xv.shape().to_vec();
    Ok(emit(
        tape,
        out,
        req,
        Box::new(move |g| {
            let gd = g.data();
            let (xd, wd) = (xv.data(), wv.data());
            let mut gx = Tensor::zeros(&x_shape);
            let mut gw = Tensor::zeros(&[c_out, c_in]);
            {
                let gxd = gx.data_mut();
                let gwd = gw.data_mut();
                for r in 0..rows {
                    let grow = &gd[r * c_out..(r + 1) * c_out];
                    let xrow = &xd[r * c_in..(r + 1) * c_in];
                    let gxrow = &mut gxd[r * c_in..(r + 1) * c_in];
                    for (co, &gvv) in grow.iter().enumerate() {
                        if gvv == 0.0 {
                            continue;
                        }
                        let wrow = &wd[co * c_in..(co + 1) * c_in];
                        let gwrow = &mut gwd[co * c_in..(co + 1) * c_in];
                        for ci in 0..c_in {
                            gxrow[ci] += gvv * wrow[ci];
                            gwrow[ci] += gvv * xrow[ci];
                        }
                    }
                }
            }
            let mut grads = vec![(ix, gx), (iw, gw)];
            if let Some((ibias, _, _)) = &bv {
                let mut gb = Tensor::zeros(&[c_out]);
                for r in 0..rows {
                    let grow = &gd[r * c_out..(r + 1) * c_out];
                    for (o, &gvv) in gb.data_mut().iter_mut().zip(grow) {
                        *o += gvv;
                    }
                }
                grads.push((*ibias, gb));
            }
            grads
        }),
    ))
}

// ── temporal ops ──────────────────────────────────────────────────────────────

/// 1-D convolution along T applied independently per joint.
///
/// x: `[..., T, N, C_in]`, kernel: `[K, C_in, C_out]` with K odd,
/// stride/dilation in {1,2}. Zero padding keeps stride-1 output length at T;
/// T' = ceil(T/stride).
pub fn conv_temporal<'t>(
    x: Var<'t>,
    kernel: Var<'t>,
    bias: Option<Var<'t>>,
    stride: usize,
    dilation: usize,
) -> Result<Var<'t>> {
    let tape = same_tape(x, kernel);
    let (xv, kv) = (x.value(), kernel.value());
    if xv.rank() < 3 {
        return Err(Error::validation(format!(
            "conv_temporal input must be [..., T, N, C], got {}",
            fmt_shape(xv.shape())
        )));
    }
    if kv.rank() != 3 {
        return Err(Error::validation(format!(
            "conv_temporal kernel must be [K, C_in, C_out], got {}",
            fmt_shape(kv.shape())
        )));
    }
    let (k_len, c_in, c_out) = (kv.shape()[0], kv.shape()[1], kv.shape()[2]);
    if k_len % 2 == 0 {
        return Err(Error::validation(format!("conv_temporal kernel size {k_len} must be odd")));
    }
    if !matches!(stride, 1 | 2) || !matches!(dilation, 1 | 2) {
        return Err(Error::validation(format!(
            "conv_temporal stride {stride} / dilation {dilation} must be 1 or 2"
        )));
    }
    let rank = xv.rank();
    let (t_in, n, c) = (xv.shape()[rank - 3], xv.shape()[rank - 2], xv.shape()[rank - 1]);
    if c != c_in {
        return Err(Error::validation(format!(
            "conv_temporal input channels {} do not match kernel {}",
            c,
            fmt_shape(kv.shape())
        )));
    }
    let bv = match bias {
        Some(b) => {
            same_tape(x, b);
            let bvv = b.value();
            if bvv.shape() != [c_out] {
                return Err(Error::validation(format!(
                    "conv_temporal bias must be [{}], got {}",
                    c_out,
                    fmt_shape(bvv.shape())
                )));
            }
            Some((b.id(), bvv, b.requires_grad()))
        }
        None => None,
    };
    let pad = dilation * (k_len - 1) / 2;
    let t_out = t_in.div_ceil(stride);
    let outer: usize = xv.shape()[..rank - 3].iter().product();
    let mut out_shape = xv.shape().to_vec();
    out_shape[rank - 3] = t_out;
    out_shape[rank - 1] = c_out;
    let mut out = Tensor::zeros(&out_shape);
    {
        let od = out.data_mut();
        let (xd, kd) = (xv.data(), kv.data());
        let x_frame = n * c_in;
        let o_frame = n * c_out;
        for b in 0..outer {
            let xb = &xd[b * t_in * x_frame..(b + 1) * t_in * x_frame];
            let ob = &mut od[b * t_out * o_frame..(b + 1) * t_out * o_frame];
            for to in 0..t_out {
                for k in 0..k_len {
                    let ti = (to * stride + k * dilation) as isize - pad as isize;
                    if ti < 0 || ti >= t_in as isize {
                        continue;
                    }
                    let xt = &xb[ti as usize * x_frame..(ti as usize + 1) * x_frame];
                    let ot = &mut ob[to * o_frame..(to + 1) * o_frame];
                    let kk = &kd[k * c_in * c_out..(k + 1) * c_in * c_out];
                    for j in 0..n {
                        let xrow = &xt[j * c_in..(j + 1) * c_in];
                        let orow = &mut ot[j * c_out..(j + 1) * c_out];
                        for (ci, &xvv) in xrow.iter().enumerate() {
                            if xvv == 0.0 {
                                continue;
                            }
                            let krow = &kk[ci * c_out..(ci + 1) * c_out];
                            for (o, &kvv) in orow.iter_mut().zip(krow) {
                                *o += xvv * kvv;
                            }
                        }
                    }
                }
            }
            if let Some((_, bvv, _)) = &bv {
                for ot in ob.chunks_mut(c_out) {
                    for (o, bb) in ot.iter_mut().zip(bvv.data()) {
                        *o += bb;
                    }
                }
            }
        }
    }
    let req = x.requires_grad()
        || kernel.requires_grad()
        || bv.as_ref().is_some_and(|(_, _, r)| *r);
    let (ix, ik) = (x.id(), kernel.id());
    let x_shape = xv.shape().to_vec();
    Ok(emit(
        tape,
        out,
        req,
        Box::new(move |g| {
            let gd = g.data();
            let (xd, kd) = (xv.data(), kv.data());
            let mut gx = Tensor::zeros(&x_shape);
            let mut gk = Tensor::zeros(&[k_len, c_in, c_out]);
            {
                let gxd = gx.data_mut();
                let gkd = gk.data_mut();
                let x_frame = n * c_in;
                let o_frame = n * c_out;
                for b in 0..outer {
                    let xb = &xd[b * t_in * x_frame..(b + 1) * t_in * x_frame];
                    let gxb = &mut gxd[b * t_in * x_frame..(b + 1) * t_in * x_frame];
                    let gb = &gd[b * t_out * o_frame..(b + 1) * t_out * o_frame];
                    for to in 0..t_out {
                        for k in 0..k_len {
                            let ti = (to * stride + k * dilation) as isize - pad as isize;
                            if ti < 0 || ti >= t_in as isize {
                                continue;
                            }
                            let ti = ti as usize;
                            let xt = &xb[ti * x_frame..(ti + 1) * x_frame];
                            let gxt = &mut gxb[ti * x_frame..(ti + 1) * x_frame];
                            let gt = &gb[to * o_frame..(to + 1) * o_frame];
                            let kk = &kd[k * c_in * c_out..(k + 1) * c_in * c_out];
                            let gkk = &mut gkd[k * c_in * c_out..(k + 1) * c_in * c_out];
                            for j in 0..n {
                                let grow = &gt[j * c_out..(j + 1) * c_out];
                                let xrow = &xt[j * c_in..(j + 1) * c_in];
                                let gxrow = &mut gxt[j * c_in..(j + 1) * c_in];
                                for ci in 0..c_in {
                                    let krow = &kk[ci * c_out..(ci + 1) * c_out];
                                    let gkrow = &mut gkk[ci * c_out..(ci + 1) * c_out];
                                    let xvv = xrow[ci];
                                    let mut acc = 0.0;
                                    for (co, &gvv) in grow.iter().enumerate() {
                                        acc += gvv * krow[co];
                                        gkrow[co] += gvv * xvv;
                                    }
                                    gxrow[ci] += acc;
                                }
                            }
                        }
                    }
                }
            }
            let mut grads = vec![(ix, gx), (ik, gk)];
            if let Some((ibias, _, _)) = &bv {
                let mut gbias = Tensor::zeros(&[c_out]);
                for chunk in gd.chunks(c_out) {
                    for (o, &gvv) in gbias.data_mut().iter_mut().zip(chunk) {
                        *o += gvv;
                    }
                }
                grads.push((*ibias, gbias));
            }
            grads
        }),
    ))
}

/// Max pooling along T with window 3 and padding 1 (out-of-range positions
/// ignored). x: `[..., T, N, C]`; T' = ceil(T/stride). Ties take the earliest
/// frame.
pub fn temporal_max_pool(x: Var<'_>, stride: usize) -> Result<Var<'_>> {
    const WINDOW: usize = 3;
    const PAD: usize = 1;
    let xv = x.value();
    if xv.rank() < 3 {
        return Err(Error::validation(format!(
            "temporal_max_pool input must be [..., T, N, C], got {}",
            fmt_shape(xv.shape())
        )));
    }
    if !matches!(stride, 1 | 2) {
        return Err(Error::validation(format!("temporal_max_pool stride {stride} must be 1 or 2")));
    }
    let rank = xv.rank();
    let (t_in, n, c) = (xv.shape()[rank - 3], xv.shape()[rank - 2], xv.shape()[rank - 1]);
    let t_out = t_in.div_ceil(stride);
    let outer: usize = xv.shape()[..rank - 3].iter().product();
    let mut out_shape = xv.shape().to_vec();
    out_shape[rank - 3] = t_out;
    let mut out = Tensor::zeros(&out_shape);
    let frame = n * c;
    let mut arg = vec![0usize; outer * t_out * frame];
    {
        let od = out.data_mut();
        let xd = xv.data();
        for b in 0..outer {
            for to in 0..t_out {
                let obase = (b * t_out + to) * frame;
                let mut first = true;
                for k in 0..WINDOW {
                    let ti = (to * stride + k) as isize - PAD as isize;
                    if ti < 0 || ti >= t_in as isize {
                        continue;
                    }
                    let ibase = (b * t_in + ti as usize) * frame;
                    if first {
                        for j in 0..frame {
                            od[obase + j] = xd[ibase + j];
                            arg[obase + j] = ibase + j;
                        }
                        first = false;
                    } else {
                        for j in 0..frame {
                            if xd[ibase + j] > od[obase + j] {
                                od[obase + j] = xd[ibase + j];
                                arg[obase + j] = ibase + j;
                            }
                        }
                    }
                }
                debug_assert!(!first, "window never empty for to < t_out");
            }
        }
    }
    let id = x.id();
    let x_shape = xv.shape().to_vec();
    Ok(emit(
        x.tape(),
        out,
        x.requires_grad(),
        Box::new(move |g| {
            let mut gx = Tensor::zeros(&x_shape);
            for (o, &src) in arg.iter().enumerate() {
                gx.data_mut()[src] += g.data()[o];
            }
            vec![(id, gx)]
        }),
    ))
}

// ── normalization ─────────────────────────────────────────────────────────────

/// Normalize per channel (last axis) over all other axes.
///
/// Train modes use batch statistics; `BnMode::Train` additionally folds them
/// into the running stats. Eval normalizes with the running stats.
pub fn batch_norm<'t>(
    x: Var<'t>,
    gamma: Var<'t>,
    beta: Var<'t>,
    running_mean: &RefCell<Tensor>,
    running_var: &RefCell<Tensor>,
    mode: BnMode,
) -> Result<Var<'t>> {
    let tape = same_tape(x, gamma);
    same_tape(x, beta);
    let xv = x.value();
    let (gv, bv) = (gamma.value(), beta.value());
    if xv.rank() < 1 {
        return Err(Error::validation("batch_norm input must have a channel axis"));
    }
    let c = *xv.shape().last().unwrap();
    for (name, t) in [("gamma", &gv), ("beta", &bv)] {
        if t.shape() != [c] {
            return Err(Error::validation(format!(
                "batch_norm {name} must be [{c}], got {}",
                fmt_shape(t.shape())
            )));
        }
    }
    let m = xv.numel() / c;
    if m == 0 {
        return Err(Error::validation("batch_norm over an empty batch"));
    }
    let (mean, var) = match mode {
        BnMode::Train | BnMode::TrainFrozen => {
            let mut mean = vec![0.0; c];
            let mut var = vec![0.0; c];
            for row in xv.data().chunks(c) {
                for (mu, &v) in mean.iter_mut().zip(row) {
                    *mu += v;
                }
            }
            for mu in mean.iter_mut() {
                *mu /= m as f64;
            }
            for row in xv.data().chunks(c) {
                for ((vv, &v), mu) in var.iter_mut().zip(row).zip(&mean) {
                    let d = v - mu;
                    *vv += d * d;
                }
            }
            for vv in var.iter_mut() {
                *vv /= m as f64;
            }
            if mode == BnMode::Train {
                let mut rm = running_mean.borrow_mut();
                let mut rv = running_var.borrow_mut();
                for (r, &b) in rm.data_mut().iter_mut().zip(&mean) {
                    *r = BN_MOMENTUM * *r + (1.0 - BN_MOMENTUM) * b;
                }
                for (r, &b) in rv.data_mut().iter_mut().zip(&var) {
                    *r = BN_MOMENTUM * *r + (1.0 - BN_MOMENTUM) * b;
                }
            }
            (mean, var)
        }
        BnMode::Eval => {
            let rm = running_mean.borrow();
            let rv = running_var.borrow();
            if rm.shape() != [c] || rv.shape() != [c] {
                return Err(Error::validation(format!(
                    "batch_norm running stats must be [{c}], got {} and {}",
                    fmt_shape(rm.shape()),
                    fmt_shape(rv.shape())
                )));
            }
            (rm.data().to_vec(), rv.data().to_vec())
        }
    };
    let inv_std: Vec<f64> = var.iter().map(|&v| 1.0 / (v + BN_EPS).sqrt()).collect();
    // x̂ is saved for backward; y = γ·x̂ + β.
    let mut xhat = Tensor::zeros(xv.shape());
    let mut out = Tensor::zeros(xv.shape());
    {
        let xh = xhat.data_mut();
        let od = out.data_mut();
        for (rx, (rh, ro)) in xv
            .data()
            .chunks_exact(c)
            .zip(xh.chunks_exact_mut(c).zip(od.chunks_exact_mut(c)))
        {
            for ch in 0..c {
                let h = (rx[ch] - mean[ch]) * inv_std[ch];
                rh[ch] = h;
                ro[ch] = gv.data()[ch] * h + bv.data()[ch];
            }
        }
    }
    let batch_stats = mode != BnMode::Eval;
    let req = x.requires_grad() || gamma.requires_grad() || beta.requires_grad();
    let (ix, ig, ib) = (x.id(), gamma.id(), beta.id());
    Ok(emit(
        tape,
        out,
        req,
        Box::new(move |g| {
            let gd = g.data();
            let xh = xhat.data();
            let mut dgamma = vec![0.0; c];
            let mut dbeta = vec![0.0; c];
            for (rg, rh) in gd.chunks_exact(c).zip(xh.chunks_exact(c)) {
                for ch in 0..c {
                    dgamma[ch] += rg[ch] * rh[ch];
                    dbeta[ch] += rg[ch];
                }
            }
            let mut gx = Tensor::zeros(xv.shape());
            if batch_stats {
                // dx = γ·s/M · (M·g − Σg − x̂·Σ(g·x̂)), per channel.
                let gxd = gx.data_mut();
                let mf = m as f64;
                let coef: Vec<f64> = (0..c).map(|ch| gv.data()[ch] * inv_std[ch] / mf).collect();
                for ((rg, rh), rout) in gd
                    .chunks_exact(c)
                    .zip(xh.chunks_exact(c))
                    .zip(gxd.chunks_exact_mut(c))
                {
                    for ch in 0..c {
                        rout[ch] = coef[ch] * (mf * rg[ch] - dbeta[ch] - rh[ch] * dgamma[ch]);
                    }
                }
            } else {
                let gxd = gx.data_mut();
                let coef: Vec<f64> = (0..c).map(|ch| gv.data()[ch] * inv_std[ch]).collect();
                for (rg, rout) in gd.chunks_exact(c).zip(gxd.chunks_exact_mut(c)) {
                    for ch in 0..c {
                        rout[ch] = rg[ch] * coef[ch];
                    }
                }
            }
            vec![
                (ix, gx),
                (ig, Tensor::new(vec![c], dgamma).expect("len c")),
                (ib, Tensor::new(vec![c], dbeta).expect("len c")),
            ]
        }),
    ))
}

// ── structure ─────────────────────────────────────────────────────────────────

pub fn concat<'t>(parts: &[Var<'t>], axis: usize) -> Result<Var<'t>> {
    if parts.is_empty() {
        return Err(Error::validation("concat of zero tensors"));
    }
    let tape = parts[0].tape();
    for p in &parts[1..] {
        same_tape(parts[0], *p);
    }
    let values: Vec<Tensor> = parts.iter().map(|p| p.value()).collect();
    let rank = values[0].rank();
    if axis >= rank {
        return Err(Error::validation(format!(
            "concat axis {axis} out of range for rank {rank}"
        )));
    }
    let mut out_shape = values[0].shape().to_vec();
    for v in &values[1..] {
        if v.rank() != rank
            || v.shape()[..axis] != out_shape[..axis]
            || v.shape()[axis + 1..] != out_shape[axis + 1..]
        {
            return Err(Error::validation(format!(
                "concat shapes differ off-axis: {} vs {}",
                fmt_shape(&out_shape),
                fmt_shape(v.shape())
            )));
        }
    }
    out_shape[axis] = values.iter().map(|v| v.shape()[axis]).sum();
    let outer: usize = out_shape[..axis].iter().product();
    let inner: usize = out_shape[axis + 1..].iter().product();
    let mut out = Tensor::zeros(&out_shape);
    {
        let od = out.data_mut();
        let out_row = out_shape[axis] * inner;
        let mut col_off = 0;
        for v in &values {
            let rows = v.shape()[axis] * inner;
            for o in 0..outer {
                od[o * out_row + col_off..o * out_row + col_off + rows]
                    .copy_from_slice(&v.data()[o * rows..(o + 1) * rows]);
            }
            col_off += rows;
        }
    }
    let req = parts.iter().any(|p| p.requires_grad());
    let ids: Vec<usize> = parts.iter().map(|p| p.id()).collect();
    let part_shapes: Vec<Vec<usize>> = values.iter().map(|v| v.shape().to_vec()).collect();
    let out_row = out_shape[axis] * inner;
    Ok(emit(
        tape,
        out,
        req,
        Box::new(move |g| {
            let gd = g.data();
            let mut grads = Vec::with_capacity(ids.len());
            let mut col_off = 0;
            for (pid, shape) in ids.iter().zip(&part_shapes) {
                let rows = shape[axis] * inner;
                let mut gp = Tensor::zeros(shape);
                for o in 0..outer {
                    gp.data_mut()[o * rows..(o + 1) * rows]
                        .copy_from_slice(&gd[o * out_row + col_off..o * out_row + col_off + rows]);
                }
                col_off += rows;
                grads.push((*pid, gp));
            }
            grads
        }),
    ))
}

/// Per-channel joint mixing: out[.., t, n, c] = Σ_m s[.., n, m, c]·a[.., t, m, c].
///
/// a: `[..., T, N, C]`, s: `[..., N, N, C]` with identical leading axes. The
/// first N axis of s indexes the receiving joint.
pub fn channel_aggregate<'t>(a: Var<'t>, s: Var<'t>) -> Result<Var<'t>> {
    let tape = same_tape(a, s);
    let (av, sv) = (a.value(), s.value());
    if av.rank() < 3 || sv.rank() < 3 {
        return Err(Error::validation(format!(
            "channel_aggregate wants [..., T, N, C] and [..., N, N, C], got {} and {}",
            fmt_shape(av.shape()),
            fmt_shape(sv.shape())
        )));
    }
    let ar = av.rank();
    let sr = sv.rank();
    let (t, n, c) = (av.shape()[ar - 3], av.shape()[ar - 2], av.shape()[ar - 1]);
    let ok = sv.shape()[sr - 3] == n
        && sv.shape()[sr - 2] == n
        && sv.shape()[sr - 1] == c
        && av.shape()[..ar - 3] == sv.shape()[..sr - 3];
    if !ok {
        return Err(Error::validation(format!(
            "channel_aggregate shapes disagree: features {} vs topology {}",
            fmt_shape(av.shape()),
            fmt_shape(sv.shape())
        )));
    }
    let outer: usize = av.shape()[..ar - 3].iter().product();
    let mut out = Tensor::zeros(av.shape());
    {
        let od = out.data_mut();
        let (ad, sd) = (av.data(), sv.data());
        let a_block = t * n * c;
        let s_block = n * n * c;
        for b in 0..outer {
            let ab = &ad[b * a_block..(b + 1) * a_block];
            let sb = &sd[b * s_block..(b + 1) * s_block];
            let ob = &mut od[b * a_block..(b + 1) * a_block];
            for tt in 0..t {
                let at = &ab[tt * n * c..(tt + 1) * n * c];
                let ot = &mut ob[tt * n * c..(tt + 1) * n * c];
                for nn in 0..n {
                    let orow = &mut ot[nn * c..(nn + 1) * c];
                    let srows = &sb[nn * n * c..(nn + 1) * n * c];
                    for mm in 0..n {
                        let srow = &srows[mm * c..(mm + 1) * c];
                        let arow = &at[mm * c..(mm + 1) * c];
                        for ((o, &svv), &avv) in orow.iter_mut().zip(srow).zip(arow) {
                            *o += svv * avv;
                        }
                    }
                }
            }
        }
    }
    let req = a.requires_grad() || s.requires_grad();
    let (ia, is) = (a.id(), s.id());
    Ok(emit(
        tape,
        out,
        req,
        Box::new(move |g| {
            let gd = g.data();
            let (ad, sd) = (av.data(), sv.data());
            let mut ga = Tensor::zeros(av.shape());
            let mut gs = Tensor::zeros(sv.shape());
            let a_block = t * n * c;
            let s_block = n * n * c;
            {
                let gad = ga.data_mut();
                let gsd = gs.data_mut();
                for b in 0..outer {
                    let ab = &ad[b * a_block..(b + 1) * a_block];
                    let sb = &sd[b * s_block..(b + 1) * s_block];
                    let gab = &mut gad[b * a_block..(b + 1) * a_block];
                    let gsb = &mut gsd[b * s_block..(b + 1) * s_block];
                    for tt in 0..t {
                        let at = &ab[tt * n * c..(tt + 1) * n * c];
                        let gat = &mut gab[tt * n * c..(tt + 1) * n * c];
                        let gt = &gd[(b * t + tt) * n * c..(b * t + tt + 1) * n * c];
                        for nn in 0..n {
                            let grow = &gt[nn * c..(nn + 1) * c];
                            let srows = &sb[nn * n * c..(nn + 1) * n * c];
                            let gsrows = &mut gsb[nn * n * c..(nn + 1) * n * c];
                            for mm in 0..n {
                                let srow = &srows[mm * c..(mm + 1) * c];
                                let gsrow = &mut gsrows[mm * c..(mm + 1) * c];
                                let arow = &at[mm * c..(mm + 1) * c];
                                let garow = &mut gat[mm * c..(mm + 1) * c];
                                for cc in 0..c {
                                    let gvv = grow[cc];
                                    garow[cc] += srow[cc] * gvv;
                                    gsrow[cc] += arow[cc] * gvv;
                                }
                            }
                        }
                    }
                }
            }
            vec![(ia, ga), (is, gs)]
        }),
    ))
}

// ── loss ──────────────────────────────────────────────────────────────────────

/// Mean cross-entropy of raw logits `[B, K]` against class indices.
/// Log-sum-exp is max-shifted, so large logits stay finite.
pub fn cross_entropy<'t>(logits: Var<'t>, labels: &[usize]) -> Result<Var<'t>> {
    let lv = logits.value();
    if lv.rank() != 2 {
        return Err(Error::validation(format!(
            "cross_entropy wants [B, K] logits, got {}",
            fmt_shape(lv.shape())
        )));
    }
    let (b, k) = (lv.shape()[0], lv.shape()[1]);
    if labels.len() != b {
        return Err(Error::validation(format!(
            "cross_entropy got {} labels for batch of {b}",
            labels.len()
        )));
    }
    if let Some(&bad) = labels.iter().find(|&&y| y >= k) {
        return Err(Error::validation(format!("label {bad} out of range for {k} classes")));
    }
    let mut softmax = Tensor::zeros(&[b, k]);
    let mut loss = 0.0;
    {
        let sm = softmax.data_mut();
        for (i, row) in lv.data().chunks(k).enumerate() {
            let maxv = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let mut z = 0.0;
            for &v in row {
                z += (v - maxv).exp();
            }
            let lse = maxv + z.ln();
            loss += lse - row[labels[i]];
            for (j, &v) in row.iter().enumerate() {
                sm[i * k + j] = (v - maxv).exp() / z;
            }
        }
        loss /= b as f64;
    }
    let id = logits.id();
    let labels = labels.to_vec();
    Ok(emit(
        logits.tape(),
        Tensor::scalar(loss),
        logits.requires_grad(),
        Box::new(move |g| {
            let scale = g.data()[0] / b as f64;
            let mut gl = softmax;
            for (i, row) in gl.data_mut().chunks_mut(k).enumerate() {
                row[labels[i]] -= 1.0;
                for v in row.iter_mut() {
                    *v *= scale;
                }
            }
            vec![(id, gl)]
        }),
    ))
}
