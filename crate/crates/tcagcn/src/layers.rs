//! Parameter bundles shared by the network modules: batch norm state and
//! conv + batch-norm pairs, with their tape-bound forms.

use std::cell::RefCell;

use rand::Rng;

use crate::autodiff::ops::{self, BnMode};
use crate::autodiff::{Tape, Var};
use crate::error::Result;
use crate::tensor::{uniform, Tensor};

#[derive(Debug, Clone)]
pub struct BnParams {
    pub gamma: Tensor,
    pub beta: Tensor,
    /// Updated in place during train-mode forwards, hence the cells.
    pub running_mean: RefCell<Tensor>,
    pub running_var: RefCell<Tensor>,
}

pub struct BnVars<'t, 'p> {
    pub gamma: Var<'t>,
    pub beta: Var<'t>,
    pub running_mean: &'p RefCell<Tensor>,
    pub running_var: &'p RefCell<Tensor>,
}

impl BnParams {
    pub fn new(channels: usize) -> Self {
        BnParams {
            gamma: Tensor::full(&[channels], 1.0),
            beta: Tensor::zeros(&[channels]),
            running_mean: RefCell::new(Tensor::zeros(&[channels])),
            running_var: RefCell::new(Tensor::full(&[channels], 1.0)),
        }
    }

    pub fn visit(
        &mut self,
        prefix: &str,
        f: &mut impl FnMut(String, ParamKind, &mut Tensor),
    ) {
        f(format!("{prefix}.gamma"), ParamKind::Trainable, &mut self.gamma);
        f(format!("{prefix}.beta"), ParamKind::Trainable, &mut self.beta);
        f(
            format!("{prefix}.running_mean"),
            ParamKind::State,
            &mut self.running_mean.borrow_mut(),
        );
        f(
            format!("{prefix}.running_var"),
            ParamKind::State,
            &mut self.running_var.borrow_mut(),
        );
    }

    pub fn bind<'t>(
        &self,
        prefix: &str,
        tape: &'t Tape,
        reg: &mut Vec<(String, Var<'t>)>,
    ) -> BnVars<'t, '_> {
        let gamma = tape.leaf(self.gamma.clone(), true);
        reg.push((format!("{prefix}.gamma"), gamma));
        let beta = tape.leaf(self.beta.clone(), true);
        reg.push((format!("{prefix}.beta"), beta));
        BnVars {
            gamma,
            beta,
            running_mean: &self.running_mean,
            running_var: &self.running_var,
        }
    }
}

impl<'t> BnVars<'t, '_> {
    pub fn forward(&self, x: Var<'t>, mode: BnMode) -> Result<Var<'t>> {
        ops::batch_norm(x, self.gamma, self.beta, self.running_mean, self.running_var, mode)
    }
}

/// Which tensors an optimizer may touch. State tensors (batch-norm running
/// stats) are checkpointed but never stepped.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ParamKind {
    Trainable,
    State,
}

/// Temporal conv (kernel K, odd) followed by batch norm. The conv carries no
/// bias: batch norm would subtract it right back out, leaving a parameter
/// with an identically zero gradient, so β owns the shift.
#[derive(Debug, Clone)]
pub struct ConvBn {
    pub w: Tensor,
    pub bn: BnParams,
    pub dilation: usize,
}

pub struct ConvBnVars<'t, 'p> {
    pub w: Var<'t>,
    pub bn: BnVars<'t, 'p>,
    pub dilation: usize,
}

impl ConvBn {
    pub fn init(k: usize, c_in: usize, c_out: usize, dilation: usize, rng: &mut impl Rng) -> Self {
        ConvBn {
            w: uniform(rng, &[k, c_in, c_out], (1.0 / (k * c_in) as f64).sqrt()),
            bn: BnParams::new(c_out),
            dilation,
        }
    }

    pub fn visit(
        &mut self,
        prefix: &str,
        f: &mut impl FnMut(String, ParamKind, &mut Tensor),
    ) {
        f(format!("{prefix}.w"), ParamKind::Trainable, &mut self.w);
        self.bn.visit(&format!("{prefix}.bn"), f);
    }

    pub fn bind<'t>(
        &self,
        prefix: &str,
        tape: &'t Tape,
        reg: &mut Vec<(String, Var<'t>)>,
    ) -> ConvBnVars<'t, '_> {
        let w = tape.leaf(self.w.clone(), true);
        reg.push((format!("{prefix}.w"), w));
        ConvBnVars {
            w,
            bn: self.bn.bind(&format!("{prefix}.bn"), tape, reg),
            dilation: self.dilation,
        }
    }
}

impl<'t> ConvBnVars<'t, '_> {
    pub fn forward(&self, x: Var<'t>, stride: usize, mode: BnMode) -> Result<Var<'t>> {
        let h = ops::conv_temporal(x, self.w, None, stride, self.dilation)?;
        self.bn.forward(h, mode)
    }
}
