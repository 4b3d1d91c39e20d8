//! The full classifier: a stack of TCAF blocks over a partitioned skeleton
//! graph, plus the whole-model gradient check.
//!
//! Each block runs a spatial stage (three TCA modules, one per partition
//! subset, summed, batch-normed, residual, ReLU) and a temporal stage (TF,
//! residual, ReLU). Residual projections appear only where shapes change:
//! a 1×1 conv+BN when the channel width grows, a strided one when the block
//! downsamples time.

use rand::SeedableRng;
use rand_chacha::ChaCha20Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::gradcheck::{rel_err, FD_EPS};
use crate::autodiff::ops::{self, Activation, BnMode};
use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::graph::{spatial_partition, PartitionedAdjacency, SkeletonGraph, NUM_SUBSETS};
use crate::layers::{BnParams, BnVars, ConvBn, ConvBnVars, ParamKind};
use crate::tca::{calibration, correlation_model, refine_topology, tca_forward, TcaParams, TcaVars};
use crate::tensor::{fmt_shape, uniform, Tensor};
use crate::tf::{tf_forward, TfParams, TfVars, NUM_BRANCHES};

/// Joint coordinates are (x, y, z).
pub const INPUT_CHANNELS: usize = 3;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BlockSpec {
    pub in_channels: usize,
    pub out_channels: usize,
    pub stride: usize,
}

fn default_rq() -> usize {
    8
}
fn default_r() -> usize {
    2
}
fn default_ra() -> usize {
    4
}
fn default_act() -> Activation {
    Activation::Relu
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NetConfig {
    pub num_classes: usize,
    pub blocks: Vec<BlockSpec>,
    /// Correlation bottleneck divisor (Cq = C/rq).
    #[serde(default = "default_rq")]
    pub rq: usize,
    /// Calibration bottleneck divisor.
    #[serde(default = "default_r")]
    pub r: usize,
    /// Attention bottleneck divisor.
    #[serde(default = "default_ra")]
    pub ra: usize,
    #[serde(default = "default_act")]
    pub activation: Activation,
}

impl NetConfig {
    /// The ten-block plan: four blocks at `width`, three at 2×width (first
    /// strided), three at 4×width (first strided). `width` 64 is full scale;
    /// smaller multiples of 4 give desk-sized variants.
    pub fn standard(num_classes: usize, width: usize) -> Result<NetConfig> {
        let mut blocks = Vec::new();
        let mut prev = INPUT_CHANNELS;
        for (stage, count) in [(width, 4), (2 * width, 3), (4 * width, 3)] {
            for i in 0..count {
                let stride = if stage != width && i == 0 { 2 } else { 1 };
                blocks.push(BlockSpec { in_channels: prev, out_channels: stage, stride });
                prev = stage;
            }
        }
        let cfg = NetConfig {
            num_classes,
            blocks,
            rq: default_rq(),
            r: default_r(),
            ra: default_ra(),
            activation: default_act(),
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        if self.num_classes < 2 {
            return Err(Error::validation(format!(
                "need at least 2 classes, got {}",
                self.num_classes
            )));
        }
        if self.blocks.is_empty() {
            return Err(Error::validation("network needs at least one block"));
        }
        if self.rq == 0 || self.r == 0 || self.ra == 0 {
            return Err(Error::validation("bottleneck divisors must be positive"));
        }
        let mut prev = INPUT_CHANNELS;
        for (i, b) in self.blocks.iter().enumerate() {
            if b.in_channels != prev {
                return Err(Error::validation(format!(
                    "block {i}: in_channels {} does not chain from {prev}",
                    b.in_channels
                )));
            }
            if b.out_channels % NUM_BRANCHES != 0 {
                return Err(Error::validation(format!(
                    "block {i}: out_channels {} not divisible by {NUM_BRANCHES}",
                    b.out_channels
                )));
            }
            if !matches!(b.stride, 1 | 2) {
                return Err(Error::validation(format!(
                    "block {i}: stride {} must be 1 or 2",
                    b.stride
                )));
            }
            prev = b.out_channels;
        }
        Ok(())
    }

    pub fn last_channels(&self) -> usize {
        self.blocks.last().map_or(INPUT_CHANNELS, |b| b.out_channels)
    }

    /// Product of the temporal strides; inputs need at least this many frames.
    pub fn min_frames(&self) -> usize {
        self.blocks.iter().map(|b| b.stride).product()
    }
}

#[derive(Debug, Clone)]
pub struct BlockParams {
    pub spec: BlockSpec,
    pub tca: [TcaParams; NUM_SUBSETS],
    pub bn_spatial: BnParams,
    /// 1×1 projection, present only when the channel width changes.
    pub res_spatial: Option<ConvBn>,
    pub tf: TfParams,
    /// Strided 1×1 projection, present only when the block downsamples.
    pub res_temporal: Option<ConvBn>,
}

impl BlockParams {
    fn init(spec: BlockSpec, cfg: &NetConfig, rng: &mut impl rand::Rng) -> Result<Self> {
        let (ci, co) = (spec.in_channels, spec.out_channels);
        let mk_tca = |rng: &mut _| TcaParams::init(ci, co, cfg.rq, cfg.r, cfg.activation, rng);
        Ok(BlockParams {
            spec,
            tca: [mk_tca(rng), mk_tca(rng), mk_tca(rng)],
            bn_spatial: BnParams::new(co),
            res_spatial: (ci != co).then(|| ConvBn::init(1, ci, co, 1, rng)),
            tf: TfParams::init(co, cfg.ra, rng)?,
            res_temporal: (spec.stride != 1).then(|| ConvBn::init(1, co, co, 1, rng)),
        })
    }

    fn visit(&mut self, prefix: &str, f: &mut impl FnMut(String, ParamKind, &mut Tensor)) {
        for (k, tca) in self.tca.iter_mut().enumerate() {
            tca.visit(&format!("{prefix}.tca{}", k + 1), &mut |name, t| {
                f(name, ParamKind::Trainable, t)
            });
        }
        self.bn_spatial.visit(&format!("{prefix}.bn"), f);
        if let Some(rs) = &mut self.res_spatial {
            rs.visit(&format!("{prefix}.res_spatial"), f);
        }
        self.tf.visit(&format!("{prefix}.tf"), f);
        if let Some(rt) = &mut self.res_temporal {
            rt.visit(&format!("{prefix}.res_temporal"), f);
        }
    }

    fn bind<'t>(
        &self,
        prefix: &str,
        tape: &'t Tape,
        reg: &mut Vec<(String, Var<'t>)>,
    ) -> BoundBlock<'t, '_> {
        BoundBlock {
            spec: self.spec,
            tca: [
                self.tca[0].bind(&format!("{prefix}.tca1"), tape, reg),
                self.tca[1].bind(&format!("{prefix}.tca2"), tape, reg),
                self.tca[2].bind(&format!("{prefix}.tca3"), tape, reg),
            ],
            bn_spatial: self.bn_spatial.bind(&format!("{prefix}.bn"), tape, reg),
            res_spatial: self
                .res_spatial
                .as_ref()
                .map(|rs| rs.bind(&format!("{prefix}.res_spatial"), tape, reg)),
            tf: self.tf.bind(&format!("{prefix}.tf"), tape, reg),
            res_temporal: self
                .res_temporal
                .as_ref()
                .map(|rt| rt.bind(&format!("{prefix}.res_temporal"), tape, reg)),
        }
    }
}

pub struct BoundBlock<'t, 'p> {
    spec: BlockSpec,
    tca: [TcaVars<'t>; NUM_SUBSETS],
    bn_spatial: BnVars<'t, 'p>,
    res_spatial: Option<ConvBnVars<'t, 'p>>,
    tf: TfVars<'t, 'p>,
    res_temporal: Option<ConvBnVars<'t, 'p>>,
}

impl<'t> BoundBlock<'t, '_> {
    pub fn forward(
        &self,
        x: Var<'t>,
        mu: &[Var<'t>; NUM_SUBSETS],
        mode: BnMode,
    ) -> Result<Var<'t>> {
        let mut spatial = tca_forward(x, mu[0], &self.tca[0])?;
        for k in 1..NUM_SUBSETS {
            spatial = ops::add(spatial, tca_forward(x, mu[k], &self.tca[k])?)?;
        }
        let spatial = self.bn_spatial.forward(spatial, mode)?;
        let res_s = match &self.res_spatial {
            Some(rs) => rs.forward(x, 1, mode)?,
            None => x,
        };
        let h = ops::add(spatial, res_s)?.relu();
        let temporal = tf_forward(h, &self.tf, self.spec.stride, mode)?;
        let res_t = match &self.res_temporal {
            Some(rt) => rt.forward(h, self.spec.stride, mode)?,
            None => h,
        };
        Ok(ops::add(temporal, res_t)?.relu())
    }
}

/// A full model: graph, partition constants, and every parameter tensor.
#[derive(Debug, Clone)]
pub struct Model {
    pub graph: SkeletonGraph,
    pub partitions: PartitionedAdjacency,
    pub cfg: NetConfig,
    pub input_bn: BnParams,
    pub blocks: Vec<BlockParams>,
    pub fc_w: Tensor,
    pub fc_b: Tensor,
}

impl Model {
    pub fn init(graph: SkeletonGraph, cfg: NetConfig, seed: u64) -> Result<Model> {
        cfg.validate()?;
        let mut rng = ChaCha20Rng::seed_from_u64(seed);
        let blocks = cfg
            .blocks
            .iter()
            .map(|&spec| BlockParams::init(spec, &cfg, &mut rng))
            .collect::<Result<Vec<_>>>()?;
        let c_last = cfg.last_channels();
        let fc_w = uniform(&mut rng, &[cfg.num_classes, c_last], (1.0 / c_last as f64).sqrt());
        let fc_b = Tensor::zeros(&[cfg.num_classes]);
        let partitions = spatial_partition(&graph);
        Ok(Model {
            graph,
            partitions,
            cfg,
            input_bn: BnParams::new(INPUT_CHANNELS),
            blocks,
            fc_w,
            fc_b,
        })
    }

    /// Same parameters on a different skeleton. No tensor depends on the
    /// joint count, so any graph fits; used to probe relabeling invariance.
    pub fn with_graph(&self, graph: SkeletonGraph) -> Model {
        let partitions = spatial_partition(&graph);
        Model { graph, partitions, ..self.clone() }
    }

    /// Walk every parameter tensor in a stable order. The same order drives
    /// checkpoints, the optimizer, and gradient reports.
    pub fn visit_params(&mut self, f: &mut impl FnMut(String, ParamKind, &mut Tensor)) {
        self.input_bn.visit("input_bn", f);
        for (i, b) in self.blocks.iter_mut().enumerate() {
            b.visit(&format!("block{:02}", i + 1), f);
        }
        f("fc.w".into(), ParamKind::Trainable, &mut self.fc_w);
        f("fc.b".into(), ParamKind::Trainable, &mut self.fc_b);
    }

    /// (trainable tensors, trainable scalars).
    pub fn param_counts(&mut self) -> (usize, usize) {
        let (mut groups, mut scalars) = (0, 0);
        self.visit_params(&mut |_, kind, t| {
            if kind == ParamKind::Trainable {
                groups += 1;
                scalars += t.numel();
            }
        });
        (groups, scalars)
    }

    pub fn bind<'t, 'p>(&'p self, tape: &'t Tape) -> BoundModel<'t, 'p> {
        let mut reg = Vec::new();
        let input_bn = self.input_bn.bind("input_bn", tape, &mut reg);
        let blocks = self
            .blocks
            .iter()
            .enumerate()
            .map(|(i, b)| b.bind(&format!("block{:02}", i + 1), tape, &mut reg))
            .collect();
        let fc_w = tape.leaf(self.fc_w.clone(), true);
        reg.push(("fc.w".into(), fc_w));
        let fc_b = tape.leaf(self.fc_b.clone(), true);
        reg.push(("fc.b".into(), fc_b));
        let mu = [
            tape.constant(self.partitions.normalized[0].clone()),
            tape.constant(self.partitions.normalized[1].clone()),
            tape.constant(self.partitions.normalized[2].clone()),
        ];
        BoundModel { model: self, reg, input_bn, blocks, fc_w, fc_b, mu }
    }
}

/// Translate each sample so its first frame's center joint sits at the
/// origin. Trailing axes are (T, N, C); every leading axis indexes samples.
pub fn normalize_input(x: &Tensor, center: usize) -> Result<Tensor> {
    let rank = x.rank();
    if rank < 3 {
        return Err(Error::validation(format!(
            "expected [..., T, N, C], got {}",
            fmt_shape(x.shape())
        )));
    }
    let (t, n, c) = (x.shape()[rank - 3], x.shape()[rank - 2], x.shape()[rank - 1]);
    if center >= n {
        return Err(Error::validation(format!("center joint {center} out of range for N={n}")));
    }
    let mut out = x.clone();
    let sample = t * n * c;
    for (b, chunk) in out.data_mut().chunks_exact_mut(sample).enumerate() {
        let origin: Vec<f64> =
            x.data()[b * sample + center * c..b * sample + center * c + c].to_vec();
        for pos in chunk.chunks_exact_mut(c) {
            for (v, o) in pos.iter_mut().zip(&origin) {
                *v -= o;
            }
        }
    }
    Ok(out)
}

pub struct BoundModel<'t, 'p> {
    model: &'p Model,
    /// Trainable leaves in `visit_params` order.
    pub reg: Vec<(String, Var<'t>)>,
    input_bn: BnVars<'t, 'p>,
    blocks: Vec<BoundBlock<'t, 'p>>,
    fc_w: Var<'t>,
    fc_b: Var<'t>,
    mu: [Var<'t>; NUM_SUBSETS],
}

impl<'t> BoundModel<'t, '_> {
    /// Validate a `[B, T, N, 3]` batch, normalize it, and run the input norm.
    fn stem(&self, x: &Tensor, mode: BnMode) -> Result<Var<'t>> {
        let m = self.model;
        if x.rank() != 4 {
            return Err(Error::validation(format!(
                "expected [B, T, N, {INPUT_CHANNELS}], got {}",
                fmt_shape(x.shape())
            )));
        }
        let (t, n, c) = (x.shape()[1], x.shape()[2], x.shape()[3]);
        if n != m.graph.num_joints() || c != INPUT_CHANNELS {
            return Err(Error::validation(format!(
                "batch {} does not fit a {}-joint skeleton",
                fmt_shape(x.shape()),
                m.graph.num_joints()
            )));
        }
        let min_t = m.cfg.min_frames();
        if t < min_t {
            return Err(Error::validation(format!(
                "{t} frames cannot pass {} temporal downsamplings (need ≥ {min_t})",
                min_t.trailing_zeros()
            )));
        }
        let tape = self.fc_w.tape();
        self.input_bn.forward(tape.constant(normalize_input(x, m.graph.center())?), mode)
    }

    /// Logits for a `[B, T, N, 3]` batch of raw joint coordinates.
    pub fn forward(&self, x: &Tensor, mode: BnMode) -> Result<Var<'t>> {
        let mut h = self.stem(x, mode)?;
        for block in &self.blocks {
            h = block.forward(h, &self.mu, mode)?;
        }
        let pooled = h.pool_mean(&[1, 2])?;
        ops::linear(pooled, self.fc_w, Some(self.fc_b))
    }

    pub fn loss(&self, x: &Tensor, labels: &[usize], mode: BnMode) -> Result<Var<'t>> {
        ops::cross_entropy(self.forward(x, mode)?, labels)
    }

    /// Inner views of one block for a single sample: per-subset refined
    /// topologies and temporal calibrations, plus the block's output, all with
    /// the batch axis stripped. `block` is zero-based.
    pub fn probe_block(&self, x: &Tensor, block: usize, mode: BnMode) -> Result<BlockProbe> {
        if x.rank() != 4 && x.rank() != 3 {
            return Err(Error::validation(format!(
                "expected one [T, N, {INPUT_CHANNELS}] sample, got {}",
                fmt_shape(x.shape())
            )));
        }
        let batch = if x.rank() == 3 {
            let mut shape = vec![1];
            shape.extend_from_slice(x.shape());
            Tensor::new(shape, x.data().to_vec())?
        } else if x.shape()[0] == 1 {
            x.clone()
        } else {
            return Err(Error::validation(format!(
                "probing works on a single sample, got a batch of {}",
                x.shape()[0]
            )));
        };
        let Some(target) = self.blocks.get(block) else {
            return Err(Error::validation(format!(
                "block index {block} out of range ({} blocks)",
                self.blocks.len()
            )));
        };
        let mut h = self.stem(&batch, mode)?;
        for b in &self.blocks[..block] {
            h = b.forward(h, &self.mu, mode)?;
        }
        let mut topology = Vec::with_capacity(NUM_SUBSETS);
        let mut calib = Vec::with_capacity(NUM_SUBSETS);
        for k in 0..NUM_SUBSETS {
            let q = correlation_model(h, &target.tca[k])?;
            let s = refine_topology(q, self.mu[k], target.tca[k].alpha)?;
            topology.push(strip_batch(&s.value()));
            calib.push(strip_batch(&calibration(h, &target.tca[k])?.value()));
        }
        let y = target.forward(h, &self.mu, mode)?;
        Ok(BlockProbe {
            topology: topology.try_into().expect("three subsets"),
            calibration: calib.try_into().expect("three subsets"),
            output: strip_batch(&y.value()),
        })
    }
}

/// Drop a leading unit batch axis.
fn strip_batch(t: &Tensor) -> Tensor {
    debug_assert_eq!(t.shape()[0], 1);
    Tensor::new(t.shape()[1..].to_vec(), t.data().to_vec()).expect("same numel")
}

/// What one block computes for a single sample, in value form.
pub struct BlockProbe {
    /// Refined topology per subset, `[N, N, C_out]`.
    pub topology: [Tensor; NUM_SUBSETS],
    /// Frame calibration per subset, `[T, C_out]`.
    pub calibration: [Tensor; NUM_SUBSETS],
    /// Block output, `[T', N, C_out]`.
    pub output: Tensor,
}

pub struct GroupError {
    pub name: String,
    pub max_rel_err: f64,
}

pub struct GradcheckReport {
    pub groups: Vec<GroupError>,
    pub max_rel_err: f64,
}

impl GradcheckReport {
    pub fn passed(&self, threshold: f64) -> bool {
        self.max_rel_err < threshold
    }
}

/// Compare analytic parameter gradients of the batch loss against central
/// finite differences, one coordinate at a time. Batch statistics are used
/// but frozen so the loss is a pure function of the parameters.
///
/// `corrupt` is a test hook: analytic gradients of every group whose name
/// contains the needle are shifted by 1e-2, which a healthy check must flag.
pub fn model_gradcheck(
    model: &mut Model,
    x: &Tensor,
    labels: &[usize],
    corrupt: Option<&str>,
) -> Result<GradcheckReport> {
    let mode = BnMode::TrainFrozen;
    let mut analytic: Vec<(String, Tensor)> = Vec::new();
    {
        let tape = Tape::new();
        let bound = model.bind(&tape);
        let loss = bound.loss(x, labels, mode)?;
        tape.backward(loss)?;
        for (name, var) in &bound.reg {
            let grad = tape
                .grad(*var)
                .unwrap_or_else(|| Tensor::zeros(&var.shape()));
            analytic.push((name.clone(), grad));
        }
    }
    if let Some(needle) = corrupt {
        for (name, grad) in &mut analytic {
            if name.contains(needle) {
                for g in grad.data_mut() {
                    *g += 1e-2;
                }
            }
        }
    }

    let loss_at = |model: &mut Model| -> Result<f64> {
        let tape = Tape::new();
        let bound = model.bind(&tape);
        let loss = bound.loss(x, labels, mode)?;
        Ok(loss.value().data()[0])
    };
    let nudge = |model: &mut Model, target: &str, idx: usize, delta: f64| {
        model.visit_params(&mut |name, kind, t| {
            if kind == ParamKind::Trainable && name == target {
                t.data_mut()[idx] += delta;
            }
        });
    };

    let mut groups = Vec::with_capacity(analytic.len());
    let mut overall: f64 = 0.0;
    for (name, grad) in &analytic {
        let mut worst: f64 = 0.0;
        for idx in 0..grad.numel() {
            nudge(model, name, idx, FD_EPS);
            let plus = loss_at(model)?;
            nudge(model, name, idx, -2.0 * FD_EPS);
            let minus = loss_at(model)?;
            nudge(model, name, idx, FD_EPS);
            let fd = (plus - minus) / (2.0 * FD_EPS);
            worst = worst.max(rel_err(grad.data()[idx], fd));
        }
        overall = overall.max(worst);
        groups.push(GroupError { name: name.clone(), max_rel_err: worst });
    }
    Ok(GradcheckReport { groups, max_rel_err: overall })
}
