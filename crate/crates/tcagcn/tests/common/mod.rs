//! Loop oracles: every function here recomputes a library result with plain
//! nested loops and no shared code beyond the parameter structs, so a bug in
//! the vectorized path cannot hide in its own mirror image.
#![allow(dead_code)]

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha20Rng;
use tcagcn::autodiff::ops::{Activation, BN_EPS};
use tcagcn::fusion::{ScoreMatrix, NUM_STREAMS};
use tcagcn::layers::ConvBn;
use tcagcn::tca::TcaParams;
use tcagcn::tensor::Tensor;
use tcagcn::tf::TfParams;

pub fn rng(seed: u64) -> ChaCha20Rng {
    ChaCha20Rng::seed_from_u64(seed)
}

pub fn rand_t(rng: &mut ChaCha20Rng, shape: &[usize], bound: f64) -> Tensor {
    tcagcn::tensor::uniform(rng, shape, bound)
}

pub fn max_abs_diff(a: &Tensor, b: &Tensor) -> f64 {
    assert_eq!(a.shape(), b.shape(), "comparing different shapes");
    a.data()
        .iter()
        .zip(b.data())
        .map(|(x, y)| (x - y).abs())
        .fold(0.0, f64::max)
}

fn sigma(v: f64, act: Activation) -> f64 {
    match act {
        Activation::Relu => {
            if v > 0.0 {
                v
            } else {
                0.0
            }
        }
        Activation::Tanh => v.tanh(),
        Activation::Sigmoid => 1.0 / (1.0 + (-v).exp()),
    }
}

// ------------------------------------------------------------- base ops ----

/// y[t, n, co] = Σ_ci x[t, n, ci] · w[co, ci] (+ b[co])
pub fn or_linear(x: &Tensor, w: &Tensor, b: Option<&Tensor>) -> Tensor {
    let (t, n, ci) = (x.shape()[0], x.shape()[1], x.shape()[2]);
    let co = w.shape()[0];
    Tensor::from_fn(&[t, n, co], |ix| {
        let mut acc = b.map_or(0.0, |b| b.at(&[ix[2]]));
        for c in 0..ci {
            acc += x.at(&[ix[0], ix[1], c]) * w.at(&[ix[2], c]);
        }
        acc
    })
}

/// Zero-padded temporal conv: out[to] = Σ_k taps at to·stride + k·dil − pad.
pub fn or_conv_temporal(
    x: &Tensor,
    kernel: &Tensor,
    bias: Option<&Tensor>,
    stride: usize,
    dilation: usize,
) -> Tensor {
    let (t_in, n, ci) = (x.shape()[0], x.shape()[1], x.shape()[2]);
    let (k_len, co) = (kernel.shape()[0], kernel.shape()[2]);
    let pad = dilation * (k_len - 1) / 2;
    let t_out = t_in.div_ceil(stride);
    Tensor::from_fn(&[t_out, n, co], |ix| {
        let mut acc = bias.map_or(0.0, |b| b.at(&[ix[2]]));
        for k in 0..k_len {
            let ti = (ix[0] * stride + k * dilation) as isize - pad as isize;
            if ti < 0 || ti >= t_in as isize {
                continue;
            }
            for c in 0..ci {
                acc += x.at(&[ti as usize, ix[1], c]) * kernel.at(&[k, c, ix[2]]);
            }
        }
        acc
    })
}

/// Window-3 pad-1 max over in-range frames.
pub fn or_temporal_max_pool(x: &Tensor, stride: usize) -> Tensor {
    let (t_in, n, c) = (x.shape()[0], x.shape()[1], x.shape()[2]);
    let t_out = t_in.div_ceil(stride);
    Tensor::from_fn(&[t_out, n, c], |ix| {
        let mut best = f64::NEG_INFINITY;
        for k in 0..3 {
            let ti = (ix[0] * stride + k) as isize - 1;
            if ti < 0 || ti >= t_in as isize {
                continue;
            }
            best = best.max(x.at(&[ti as usize, ix[1], ix[2]]));
        }
        best
    })
}

/// Eval-mode batch norm: an affine map from the stored statistics.
pub fn or_bn_eval(x: &Tensor, gamma: &Tensor, beta: &Tensor, rm: &Tensor, rv: &Tensor) -> Tensor {
    let c = *x.shape().last().unwrap();
    let mut out = x.clone();
    for row in out.data_mut().chunks_exact_mut(c) {
        for (ch, v) in row.iter_mut().enumerate() {
            let inv = 1.0 / (rv.at(&[ch]) + BN_EPS).sqrt();
            *v = gamma.at(&[ch]) * (*v - rm.at(&[ch])) * inv + beta.at(&[ch]);
        }
    }
    out
}

/// Train-mode batch norm: biased per-channel stats over every position.
pub fn or_bn_train(x: &Tensor, gamma: &Tensor, beta: &Tensor) -> Tensor {
    let c = *x.shape().last().unwrap();
    let m = x.numel() / c;
    let mut mean = vec![0.0; c];
    for row in x.data().chunks_exact(c) {
        for (mu, &v) in mean.iter_mut().zip(row) {
            *mu += v / m as f64;
        }
    }
    let mut var = vec![0.0; c];
    for row in x.data().chunks_exact(c) {
        for ((vv, &v), mu) in var.iter_mut().zip(row).zip(&mean) {
            *vv += (v - mu) * (v - mu) / m as f64;
        }
    }
    let mut out = x.clone();
    for row in out.data_mut().chunks_exact_mut(c) {
        for (ch, v) in row.iter_mut().enumerate() {
            let inv = 1.0 / (var[ch] + BN_EPS).sqrt();
            *v = gamma.at(&[ch]) * (*v - mean[ch]) * inv + beta.at(&[ch]);
        }
    }
    out
}

/// Conv then eval-mode norm, reading stats straight from the params.
pub fn or_convbn_eval(x: &Tensor, cb: &ConvBn, stride: usize) -> Tensor {
    let z = or_conv_temporal(x, &cb.w, None, stride, cb.dilation);
    or_bn_eval(&z, &cb.bn.gamma, &cb.bn.beta, &cb.bn.running_mean.borrow(), &cb.bn.running_var.borrow())
}

// ----------------------------------------------------------- tca module ----

/// q[n, m, c1] = Σ_cq ξ[c1, cq] · σ(u[n, cq] − v[m, cq]) with u, v the φ/ψ
/// images of the time-mean pose.
pub fn or_correlation(x: &Tensor, p: &TcaParams) -> Tensor {
    let (t, n, c) = (x.shape()[0], x.shape()[1], x.shape()[2]);
    let cq = p.phi.shape()[0];
    let c1 = p.xi.shape()[0];
    let pooled = Tensor::from_fn(&[n, c], |ix| {
        (0..t).map(|tt| x.at(&[tt, ix[0], ix[1]])).sum::<f64>() / t as f64
    });
    let proj = |w: &Tensor, j: usize, q: usize| -> f64 {
        (0..c).map(|cc| pooled.at(&[j, cc]) * w.at(&[q, cc])).sum()
    };
    Tensor::from_fn(&[n, n, c1], |ix| {
        (0..cq)
            .map(|q| {
                p.xi.at(&[ix[2], q]) * sigma(proj(&p.phi, ix[0], q) - proj(&p.psi, ix[1], q), p.act)
            })
            .sum()
    })
}

/// s[n, m, c1] = α · q[n, m, c1] + μ[n, m]
pub fn or_refine(q: &Tensor, mu: &Tensor, alpha: f64) -> Tensor {
    Tensor::from_fn(q.shape(), |ix| alpha * q.at(ix) + mu.at(&[ix[0], ix[1]]))
}

/// α_t[t, c1] = 1 + conv(σ(conv(joint-mean of x)))
pub fn or_calibration(x: &Tensor, p: &TcaParams) -> Tensor {
    let (t, n, c) = (x.shape()[0], x.shape()[1], x.shape()[2]);
    let frames = Tensor::from_fn(&[t, 1, c], |ix| {
        (0..n).map(|j| x.at(&[ix[0], j, ix[2]])).sum::<f64>() / n as f64
    });
    let h = or_conv_temporal(&frames, &p.calib_w1, Some(&p.calib_b1), 1, 1);
    let mut hs = h.clone();
    for v in hs.data_mut() {
        *v = sigma(*v, p.act);
    }
    let g = or_conv_temporal(&hs, &p.calib_w2, Some(&p.calib_b2), 1, 1);
    let c1 = g.shape()[2];
    Tensor::from_fn(&[t, c1], |ix| 1.0 + g.at(&[ix[0], 0, ix[1]]))
}

/// out[t, n, c1] = α_t[t, c1] · Σ_c x[t, n, c] · w0[c1, c]
pub fn or_temporal_aggregate(x: &Tensor, w0: &Tensor, alpha_t: &Tensor) -> Tensor {
    let (t, n, c) = (x.shape()[0], x.shape()[1], x.shape()[2]);
    let c1 = w0.shape()[0];
    Tensor::from_fn(&[t, n, c1], |ix| {
        let base: f64 = (0..c).map(|cc| x.at(&[ix[0], ix[1], cc]) * w0.at(&[ix[2], cc])).sum();
        alpha_t.at(&[ix[0], ix[2]]) * base
    })
}

/// out[t, n, c] = Σ_m s[n, m, c] · a[t, m, c]
pub fn or_channel_aggregate(a: &Tensor, s: &Tensor) -> Tensor {
    let (t, n, c) = (a.shape()[0], a.shape()[1], a.shape()[2]);
    Tensor::from_fn(&[t, n, c], |ix| {
        (0..n).map(|m| s.at(&[ix[1], m, ix[2]]) * a.at(&[ix[0], m, ix[2]])).sum()
    })
}

/// CA(TA(x), α·Q + μ), composed entirely from the oracles above.
pub fn or_tca_forward(x: &Tensor, mu: &Tensor, p: &TcaParams) -> Tensor {
    let alpha_t = or_calibration(x, p);
    let ta = or_temporal_aggregate(x, &p.w0, &alpha_t);
    let q = or_correlation(x, p);
    let s = or_refine(&q, mu, p.alpha.at(&[]));
    or_channel_aggregate(&ta, &s)
}

// ------------------------------------------------------------ tf module ----

fn concat_channels(parts: &[Tensor]) -> Tensor {
    let (t, n) = (parts[0].shape()[0], parts[0].shape()[1]);
    let widths: Vec<usize> = parts.iter().map(|p| p.shape()[2]).collect();
    let total: usize = widths.iter().sum();
    Tensor::from_fn(&[t, n, total], |ix| {
        let mut c = ix[2];
        for (part, w) in parts.iter().zip(&widths) {
            if c < *w {
                return part.at(&[ix[0], ix[1], c]);
            }
            c -= w;
        }
        unreachable!("channel in range");
    })
}

/// Four branches in eval mode: a = 1×1→K5, b = 1×1→K5 d2, c = 1×1→maxpool,
/// d = strided 1×1; concatenated on channels.
pub fn or_msconv_eval(x: &Tensor, p: &TfParams, stride: usize) -> Tensor {
    let a = or_convbn_eval(&or_convbn_eval(x, &p.reduce[0], 1), &p.conv_a, stride);
    let b = or_convbn_eval(&or_convbn_eval(x, &p.reduce[1], 1), &p.conv_b, stride);
    let c = or_temporal_max_pool(&or_convbn_eval(x, &p.reduce[2], 1), stride);
    let d = or_convbn_eval(x, &p.reduce[3], stride);
    concat_channels(&[a, b, c, d])
}

/// z ⊙ sigmoid(local(z) + global(z)); the two branches share widths, the
/// global one runs on the (T, N)-mean and broadcasts.
pub fn or_aff(z: &Tensor, p: &TfParams) -> Tensor {
    let (t, n, c) = (z.shape()[0], z.shape()[1], z.shape()[2]);
    let ch = p.aff_local_w1.shape()[0];
    let two_layer = |input: &dyn Fn(usize) -> f64, w1: &Tensor, b1: &Tensor, w2: &Tensor, b2: &Tensor, out_c: usize| -> f64 {
        let mut acc = b2.at(&[out_c]);
        for h in 0..ch {
            let mut pre = b1.at(&[h]);
            for cc in 0..c {
                pre += w1.at(&[h, cc]) * input(cc);
            }
            acc += w2.at(&[out_c, h]) * sigma(pre, Activation::Relu);
        }
        acc
    };
    let pooled: Vec<f64> = (0..c)
        .map(|cc| {
            let mut s = 0.0;
            for tt in 0..t {
                for j in 0..n {
                    s += z.at(&[tt, j, cc]);
                }
            }
            s / (t * n) as f64
        })
        .collect();
    Tensor::from_fn(&[t, n, c], |ix| {
        let local = two_layer(
            &|cc| z.at(&[ix[0], ix[1], cc]),
            &p.aff_local_w1,
            &p.aff_local_b1,
            &p.aff_local_w2,
            &p.aff_local_b2,
            ix[2],
        );
        let global = two_layer(
            &|cc| pooled[cc],
            &p.aff_global_w1,
            &p.aff_global_b1,
            &p.aff_global_w2,
            &p.aff_global_b2,
            ix[2],
        );
        let gate = 1.0 / (1.0 + (-(local + global)).exp());
        z.at(ix) * gate
    })
}

// --------------------------------------------------------------- fusion ----

/// Correct count under fixed weights, recomputed from scratch.
pub fn or_count_right(streams: &[ScoreMatrix; NUM_STREAMS], w: [f64; 4]) -> usize {
    let k = streams[0].num_classes;
    let mut right = 0;
    for i in 0..streams[0].num_samples() {
        let mut best = (f64::NEG_INFINITY, 0);
        for class in 0..k {
            let fused: f64 =
                (0..NUM_STREAMS).map(|s| w[s] * streams[s].row(i)[class]).sum();
            // Strictly-greater keeps the lowest class index on ties.
            if fused > best.0 {
                best = (fused, class);
            }
        }
        if best.1 == streams[0].labels[i] {
            right += 1;
        }
    }
    right
}

/// Brute-force weight search: scan every strictly descending level tuple,
/// prefer more correct predictions, then the larger index tuple in
/// (b, a, c, d) order, exactly the solver's declared total order.
pub fn or_best_tuple(
    streams: &[ScoreMatrix; NUM_STREAMS],
    step: f64,
) -> (usize, [f64; 4], usize) {
    let count = (1.0 / step + 1e-9).floor() as usize;
    let levels: Vec<f64> = (1..=count).map(|k| k as f64 * step).collect();
    let ln = levels.len();
    let mut evaluated = 0;
    let mut best_right = 0;
    let mut best_key = [0usize; 4];
    let mut best_w = [0.0; 4];
    for kd in 0..ln {
        for kc in kd + 1..ln {
            for ka in kc + 1..ln {
                for kb in ka + 1..ln {
                    let w = [levels[ka], levels[kb], levels[kc], levels[kd]];
                    let right = or_count_right(streams, w);
                    evaluated += 1;
                    let key = [kb, ka, kc, kd];
                    if (right, key) > (best_right, best_key) || evaluated == 1 {
                        best_right = right;
                        best_key = key;
                        best_w = w;
                    }
                }
            }
        }
    }
    (best_right, best_w, evaluated)
}

/// A random score table with labels; scores in [-bound, bound].
pub fn random_scores(
    rng: &mut ChaCha20Rng,
    stream_id: &str,
    samples: usize,
    classes: usize,
    bound: f64,
) -> ScoreMatrix {
    let labels: Vec<usize> = (0..samples).map(|_| rng.gen_range(0..classes)).collect();
    let scores: Vec<f64> =
        (0..samples * classes).map(|_| rng.gen_range(-bound..bound)).collect();
    let ids: Vec<String> = (0..samples).map(|i| format!("s{i:04}")).collect();
    ScoreMatrix::new(stream_id, ids, labels, scores, classes).expect("valid test scores")
}

/// Four random score tables over one shared id/label column, the aligned
/// shape the fusion entry points insist on.
pub fn random_streams(
    rng: &mut ChaCha20Rng,
    samples: usize,
    classes: usize,
    bound: f64,
) -> [ScoreMatrix; NUM_STREAMS] {
    let labels: Vec<usize> = (0..samples).map(|_| rng.gen_range(0..classes)).collect();
    let ids: Vec<String> = (0..samples).map(|i| format!("s{i:04}")).collect();
    ["a", "b", "c", "d"].map(|name| {
        let scores: Vec<f64> =
            (0..samples * classes).map(|_| rng.gen_range(-bound..bound)).collect();
        ScoreMatrix::new(name, ids.clone(), labels.clone(), scores, classes)
            .expect("valid test scores")
    })
}

/// Nudge every tensor so oracle comparisons never run on the blander
/// freshly-initialized values (zero α, zeroed branches, unit γ, zero stats).
pub fn scramble_tca(rng: &mut ChaCha20Rng, p: &mut TcaParams) {
    p.visit("p", &mut |_, t| {
        for v in t.data_mut() {
            *v += rng.gen_range(-0.5..0.5);
        }
    });
}

/// Same for the temporal module. Variances stay positive so the eval-mode
/// norm stays real.
pub fn scramble_tf(rng: &mut ChaCha20Rng, p: &mut TfParams) {
    p.visit("p", &mut |name, _, t| {
        if name.ends_with("running_var") {
            for v in t.data_mut() {
                *v = rng.gen_range(0.5..1.5);
            }
        } else {
            for v in t.data_mut() {
                *v += rng.gen_range(-0.5..0.5);
            }
        }
    });
}
