//! The TF module: multi-scale temporal convolution (MSCONV) and single-input
//! attentional feature fusion.
//!
//! MSCONV runs four branches, each opened by a 1×1 conv that reduces to C₁/4
//! channels: K=5 dilation-1 conv, K=5 dilation-2 conv, window-3 max pool, and
//! identity. Every conv is followed by batch norm; the requested temporal
//! stride is applied once inside each branch. The fusion gate is
//! M = sigmoid(l(Z) ⊕ g(Z)) with l a per-position channel bottleneck and g
//! the same-shaped bottleneck of the global average, and the output is Z ⊙ M.

use rand::Rng;

use crate::autodiff::ops::{self, BnMode};
use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::layers::{ConvBn, ConvBnVars, ParamKind};
use crate::tca::bottleneck;
use crate::tensor::{fmt_shape, uniform, Tensor};

pub const NUM_BRANCHES: usize = 4;

#[derive(Debug, Clone)]
pub struct TfParams {
    /// 1×1 reducers to C₁/4, one per branch (a, b, c, d). Branch d's reducer
    /// is its whole conv path and carries the stride.
    pub reduce: [ConvBn; NUM_BRANCHES],
    /// K=5 dilation-1 conv of branch a.
    pub conv_a: ConvBn,
    /// K=5 dilation-2 conv of branch b.
    pub conv_b: ConvBn,
    pub aff_local_w1: Tensor,
    pub aff_local_b1: Tensor,
    pub aff_local_w2: Tensor,
    pub aff_local_b2: Tensor,
    pub aff_global_w1: Tensor,
    pub aff_global_b1: Tensor,
    pub aff_global_w2: Tensor,
    pub aff_global_b2: Tensor,
}

pub struct TfVars<'t, 'p> {
    pub reduce: [ConvBnVars<'t, 'p>; NUM_BRANCHES],
    pub conv_a: ConvBnVars<'t, 'p>,
    pub conv_b: ConvBnVars<'t, 'p>,
    pub aff_local_w1: Var<'t>,
    pub aff_local_b1: Var<'t>,
    pub aff_local_w2: Var<'t>,
    pub aff_local_b2: Var<'t>,
    pub aff_global_w1: Var<'t>,
    pub aff_global_b1: Var<'t>,
    pub aff_global_w2: Var<'t>,
    pub aff_global_b2: Var<'t>,
}

impl TfParams {
    /// `channels` is both input and output width; the four C₁/4 branches
    /// concatenate back to it.
    pub fn init(channels: usize, ra: usize, rng: &mut impl Rng) -> Result<Self> {
        if channels % NUM_BRANCHES != 0 {
            return Err(Error::validation(format!(
                "TF channels {channels} not divisible by {NUM_BRANCHES}"
            )));
        }
        let cb = channels / NUM_BRANCHES;
        let ch = bottleneck(channels, ra);
        let fan = |ci: usize| (1.0 / ci as f64).sqrt();
        Ok(TfParams {
            reduce: [
                ConvBn::init(1, channels, cb, 1, rng),
                ConvBn::init(1, channels, cb, 1, rng),
                ConvBn::init(1, channels, cb, 1, rng),
                ConvBn::init(1, channels, cb, 1, rng),
            ],
            conv_a: ConvBn::init(5, cb, cb, 1, rng),
            conv_b: ConvBn::init(5, cb, cb, 2, rng),
            aff_local_w1: uniform(rng, &[ch, channels], fan(channels)),
            aff_local_b1: Tensor::zeros(&[ch]),
            aff_local_w2: uniform(rng, &[channels, ch], fan(ch)),
            aff_local_b2: Tensor::zeros(&[channels]),
            aff_global_w1: uniform(rng, &[ch, channels], fan(channels)),
            aff_global_b1: Tensor::zeros(&[ch]),
            aff_global_w2: uniform(rng, &[channels, ch], fan(ch)),
            aff_global_b2: Tensor::zeros(&[channels]),
        })
    }

    pub fn visit(
        &mut self,
        prefix: &str,
        f: &mut impl FnMut(String, ParamKind, &mut Tensor),
    ) {
        for (i, r) in self.reduce.iter_mut().enumerate() {
            r.visit(&format!("{prefix}.reduce{}", ["a", "b", "c", "d"][i]), f);
        }
        self.conv_a.visit(&format!("{prefix}.conv_a"), f);
        self.conv_b.visit(&format!("{prefix}.conv_b"), f);
        f(format!("{prefix}.aff_local_w1"), ParamKind::Trainable, &mut self.aff_local_w1);
        f(format!("{prefix}.aff_local_b1"), ParamKind::Trainable, &mut self.aff_local_b1);
        f(format!("{prefix}.aff_local_w2"), ParamKind::Trainable, &mut self.aff_local_w2);
        f(format!("{prefix}.aff_local_b2"), ParamKind::Trainable, &mut self.aff_local_b2);
        f(format!("{prefix}.aff_global_w1"), ParamKind::Trainable, &mut self.aff_global_w1);
        f(format!("{prefix}.aff_global_b1"), ParamKind::Trainable, &mut self.aff_global_b1);
        f(format!("{prefix}.aff_global_w2"), ParamKind::Trainable, &mut self.aff_global_w2);
        f(format!("{prefix}.aff_global_b2"), ParamKind::Trainable, &mut self.aff_global_b2);
    }

    pub fn bind<'t>(
        &self,
        prefix: &str,
        tape: &'t Tape,
        reg: &mut Vec<(String, Var<'t>)>,
    ) -> TfVars<'t, '_> {
        let names = ["a", "b", "c", "d"];
        let reduce = [
            self.reduce[0].bind(&format!("{prefix}.reduce{}", names[0]), tape, reg),
            self.reduce[1].bind(&format!("{prefix}.reduce{}", names[1]), tape, reg),
            self.reduce[2].bind(&format!("{prefix}.reduce{}", names[2]), tape, reg),
            self.reduce[3].bind(&format!("{prefix}.reduce{}", names[3]), tape, reg),
        ];
        let conv_a = self.conv_a.bind(&format!("{prefix}.conv_a"), tape, reg);
        let conv_b = self.conv_b.bind(&format!("{prefix}.conv_b"), tape, reg);
        let mut leaf = |name: &str, t: &Tensor| {
            let v = tape.leaf(t.clone(), true);
            reg.push((format!("{prefix}.{name}"), v));
            v
        };
        TfVars {
            reduce,
            conv_a,
            conv_b,
            aff_local_w1: leaf("aff_local_w1", &self.aff_local_w1),
            aff_local_b1: leaf("aff_local_b1", &self.aff_local_b1),
            aff_local_w2: leaf("aff_local_w2", &self.aff_local_w2),
            aff_local_b2: leaf("aff_local_b2", &self.aff_local_b2),
            aff_global_w1: leaf("aff_global_w1", &self.aff_global_w1),
            aff_global_b1: leaf("aff_global_b1", &self.aff_global_b1),
            aff_global_w2: leaf("aff_global_w2", &self.aff_global_w2),
            aff_global_b2: leaf("aff_global_b2", &self.aff_global_b2),
        }
    }
}

/// Four-branch multi-scale temporal conv; channels in == channels out.
pub fn msconv<'t>(
    x: Var<'t>,
    p: &TfVars<'t, '_>,
    stride: usize,
    mode: BnMode,
) -> Result<Var<'t>> {
    let shape = x.shape();
    if shape.len() < 3 {
        return Err(Error::validation(format!(
            "msconv wants [..., T, N, C], got {}",
            fmt_shape(&shape)
        )));
    }
    let a = p.reduce[0].forward(x, 1, mode)?;
    let a = p.conv_a.forward(a, stride, mode)?;
    let b = p.reduce[1].forward(x, 1, mode)?;
    let b = p.conv_b.forward(b, stride, mode)?;
    let c = p.reduce[2].forward(x, 1, mode)?;
    let c = ops::temporal_max_pool(c, stride)?;
    let d = p.reduce[3].forward(x, stride, mode)?;
    let channel_axis = shape.len() - 1;
    ops::concat(&[a, b, c, d], channel_axis)
}

/// Attentional gate over one input: Z ⊙ sigmoid(l(Z) ⊕ g(Z)).
pub fn aff_fuse<'t>(z: Var<'t>, p: &TfVars<'t, '_>) -> Result<Var<'t>> {
    let shape = z.shape();
    if shape.len() < 3 {
        return Err(Error::validation(format!(
            "aff_fuse wants [..., T, N, C], got {}",
            fmt_shape(&shape)
        )));
    }
    let rank = shape.len();
    let local = ops::linear(z, p.aff_local_w1, Some(p.aff_local_b1))?.relu();
    let local = ops::linear(local, p.aff_local_w2, Some(p.aff_local_b2))?;
    let pooled = z.pool_mean(&[rank - 3, rank - 2])?;
    let global = ops::linear(pooled, p.aff_global_w1, Some(p.aff_global_b1))?.relu();
    let global = ops::linear(global, p.aff_global_w2, Some(p.aff_global_b2))?;
    let mut gshape = global.shape();
    let c = gshape.pop().expect("has channel axis");
    gshape.extend([1, 1, c]);
    let gate = ops::add(local, global.reshape(&gshape)?)?.sigmoid();
    ops::mul(z, gate)
}

/// MSCONV then the attentional gate.
pub fn tf_forward<'t>(
    x: Var<'t>,
    p: &TfVars<'t, '_>,
    stride: usize,
    mode: BnMode,
) -> Result<Var<'t>> {
    aff_fuse(msconv(x, p, stride, mode)?, p)
}
