//! Forward results of the tensor ops against plain-loop oracles.

mod common;

use common::*;
use tcagcn::autodiff::ops::{self, BnMode};
use tcagcn::autodiff::Tape;
use tcagcn::layers::ConvBn;
use tcagcn::tensor::Tensor;

const TOL: f64 = 1e-12;

#[test]
fn linear_matches_the_loop_oracle() {
    let mut r = rng(11);
    for (t, n, ci, co) in [(1, 1, 1, 1), (3, 4, 2, 5), (6, 2, 7, 3)] {
        let x = rand_t(&mut r, &[t, n, ci], 2.0);
        let w = rand_t(&mut r, &[co, ci], 1.0);
        let b = rand_t(&mut r, &[co], 1.0);
        let tape = Tape::new();
        let got = ops::linear(
            tape.constant(x.clone()),
            tape.constant(w.clone()),
            Some(tape.constant(b.clone())),
        )
        .unwrap()
        .value();
        assert!(max_abs_diff(&got, &or_linear(&x, &w, Some(&b))) < TOL);
    }
}

#[test]
fn conv_matches_the_loop_oracle_across_strides_and_dilations() {
    let mut r = rng(12);
    for t in [1, 2, 5, 8] {
        for (stride, dilation) in [(1, 1), (1, 2), (2, 1), (2, 2)] {
            for k in [1, 3, 5] {
                let x = rand_t(&mut r, &[t, 3, 2], 2.0);
                let kernel = rand_t(&mut r, &[k, 2, 4], 1.0);
                let bias = rand_t(&mut r, &[4], 1.0);
                let tape = Tape::new();
                let got = ops::conv_temporal(
                    tape.constant(x.clone()),
                    tape.constant(kernel.clone()),
                    Some(tape.constant(bias.clone())),
                    stride,
                    dilation,
                )
                .unwrap()
                .value();
                let want = or_conv_temporal(&x, &kernel, Some(&bias), stride, dilation);
                assert!(
                    max_abs_diff(&got, &want) < TOL,
                    "t={t} stride={stride} dilation={dilation} k={k}"
                );
            }
        }
    }
}

#[test]
fn max_pool_matches_the_loop_oracle() {
    let mut r = rng(13);
    for t in [1, 2, 3, 7, 8] {
        for stride in [1, 2] {
            let x = rand_t(&mut r, &[t, 2, 3], 3.0);
            let tape = Tape::new();
            let got = ops::temporal_max_pool(tape.constant(x.clone()), stride).unwrap().value();
            assert!(max_abs_diff(&got, &or_temporal_max_pool(&x, stride)) < TOL);
        }
    }
}

#[test]
fn channel_aggregate_matches_the_loop_oracle() {
    let mut r = rng(14);
    for (t, n, c) in [(1, 1, 1), (4, 3, 2), (2, 6, 5)] {
        let a = rand_t(&mut r, &[t, n, c], 2.0);
        let s = rand_t(&mut r, &[n, n, c], 1.0);
        let tape = Tape::new();
        let got = ops::channel_aggregate(tape.constant(a.clone()), tape.constant(s.clone()))
            .unwrap()
            .value();
        assert!(max_abs_diff(&got, &or_channel_aggregate(&a, &s)) < TOL);
    }
}

#[test]
fn batch_norm_matches_the_loop_oracle_in_both_modes() {
    let mut r = rng(15);
    let x = rand_t(&mut r, &[5, 4, 3], 2.0);
    let gamma = rand_t(&mut r, &[3], 1.0);
    let beta = rand_t(&mut r, &[3], 1.0);
    let rm = rand_t(&mut r, &[3], 0.5);
    let rv = Tensor::from_fn(&[3], |ix| 0.5 + 0.3 * ix[0] as f64);

    let tape = Tape::new();
    let rm_cell = std::cell::RefCell::new(rm.clone());
    let rv_cell = std::cell::RefCell::new(rv.clone());
    let xv = tape.constant(x.clone());
    let gv = tape.constant(gamma.clone());
    let bv = tape.constant(beta.clone());
    let eval =
        ops::batch_norm(xv, gv, bv, &rm_cell, &rv_cell, BnMode::Eval).unwrap().value();
    assert!(max_abs_diff(&eval, &or_bn_eval(&x, &gamma, &beta, &rm, &rv)) < TOL);

    let frozen =
        ops::batch_norm(xv, gv, bv, &rm_cell, &rv_cell, BnMode::TrainFrozen).unwrap().value();
    assert!(max_abs_diff(&frozen, &or_bn_train(&x, &gamma, &beta)) < TOL);
    // Frozen mode must leave the stored statistics alone.
    assert_eq!(rm_cell.borrow().data(), rm.data());
    assert_eq!(rv_cell.borrow().data(), rv.data());
}

#[test]
fn conv_bn_eval_matches_the_composed_oracle() {
    let mut r = rng(16);
    let mut cb = ConvBn::init(3, 2, 4, 1, &mut r);
    // Move the stats and affine off their neutral defaults.
    for v in cb.bn.gamma.data_mut() {
        *v = 1.3;
    }
    for v in cb.bn.beta.data_mut() {
        *v = -0.2;
    }
    for v in cb.bn.running_mean.borrow_mut().data_mut() {
        *v = 0.4;
    }
    for v in cb.bn.running_var.borrow_mut().data_mut() {
        *v = 0.8;
    }
    let x = rand_t(&mut r, &[6, 3, 2], 2.0);
    for stride in [1, 2] {
        let tape = Tape::new();
        let mut reg = Vec::new();
        let vars = cb.bind("cb", &tape, &mut reg);
        let got = vars.forward(tape.constant(x.clone()), stride, BnMode::Eval).unwrap().value();
        assert!(max_abs_diff(&got, &or_convbn_eval(&x, &cb, stride)) < TOL);
    }
}

#[test]
fn batched_inputs_are_processed_per_sample() {
    // Stacking two samples and running once must equal running each alone.
    let mut r = rng(17);
    let a = rand_t(&mut r, &[4, 3, 2], 2.0);
    let b = rand_t(&mut r, &[4, 3, 2], 2.0);
    let mut stacked = Tensor::zeros(&[2, 4, 3, 2]);
    stacked.data_mut()[..24].copy_from_slice(a.data());
    stacked.data_mut()[24..].copy_from_slice(b.data());
    let kernel = rand_t(&mut r, &[3, 2, 5], 1.0);

    let tape = Tape::new();
    let kv = tape.constant(kernel.clone());
    let batch = ops::conv_temporal(tape.constant(stacked), kv, None, 2, 1).unwrap().value();
    let one = or_conv_temporal(&a, &kernel, None, 2, 1);
    let two = or_conv_temporal(&b, &kernel, None, 2, 1);
    let half = one.numel();
    for (i, &v) in one.data().iter().enumerate() {
        assert_eq!(batch.data()[i], v);
    }
    for (i, &v) in two.data().iter().enumerate() {
        assert_eq!(batch.data()[half + i], v);
    }
}
