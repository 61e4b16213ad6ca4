//! Exactly invertible coupling blocks and the two-level noise estimator.
//!
//! A coupling block splits its channels half/half into streams `(x0, y0)`
//! and applies two residual stages
//!
//! ```text
//! y1 = x0          x1 = F(x0) + y0
//! y2 = x1          x2 = G(x1) + y1
//! ```
//!
//! whose algebraic inverse needs nothing but the outputs:
//!
//! ```text
//! x1 = y2          y1 = x2 − G(x1)
//! x0 = y1          y0 = x1 − F(x0)
//! ```
//!
//! Because the inverse is exact, backpropagation through a stack ("span") of
//! blocks can free every intermediate activation and rebuild each block's
//! inputs on demand, walking the stack backwards. The estimator wires such
//! spans at two resolutions with pixel-(un)shuffle resampling and 1×1
//! projections, one disjoint parameter set per chain step.

use crate::autograd::{
    backward_into, ops, BackCtx, Gradients, MeterHandle, NodeId, Tape,
};
use crate::error::{Error, Result};
use crate::params::{ParamId, ParamStore};
use crate::rng::SplitMix64;
use crate::scalar::{Dtype, Scalar};
use crate::tensor::{self, ConvSpec, Tensor};
use alloc::boxed::Box;
use alloc::format;
use alloc::vec;
use alloc::vec::Vec;
// Resolves f64 math in no_std builds; shadowed by std's inherent methods
// whenever the build graph links std (e.g. under dev-dependencies).
#[allow(unused_imports)]
use num_traits::Float;

/// Groups used by every normalization layer.
pub const NORM_GROUPS: usize = 4;

/// How freshly registered weights are drawn.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum InitMode {
    /// Training default: each sub-network's final convolution starts at
    /// zero, so every block begins as the pure rewiring.
    Train,
    /// All weights drawn from small normals — used by inversion and
    /// gradient-equivalence tests that need non-degenerate Jacobians.
    FullRandom,
}

/// Maximum tolerated drift between a recomputed activation and the value
/// the forward pass produced, before backward aborts with a diagnostic.
pub fn recompute_tolerance(dtype: Dtype) -> f64 {
    match dtype {
        Dtype::F32 => 1e-3,
        Dtype::F64 => 1e-8,
    }
}

fn normal_tensor<T: Scalar>(shape: &[usize], std: f64, rng: &mut SplitMix64) -> Tensor<T> {
    Tensor::from_fn(shape, |_| T::from_f64(rng.next_normal() * std))
}

// ── Sub-networks ────────────────────────────────────────────────────────

/// conv3×3 → group-norm → SiLU → conv3×3 over a fixed channel count.
///
/// The first convolution carries no bias: the group statistics cancel any
/// per-channel shift ahead of the normalization, so such a parameter would
/// be untrainable (and unverifiable by finite differences).
#[derive(Debug, Clone, Copy)]
pub struct SubnetParams {
    pub conv1_w: ParamId,
    pub conv2_w: ParamId,
    pub conv2_b: ParamId,
}

/// Registers one sub-network over `ch` channels under `prefix.*` names.
pub fn register_subnet<T: Scalar>(
    store: &mut ParamStore<T>,
    prefix: &str,
    ch: usize,
    init: InitMode,
    rng: &mut SplitMix64,
) -> Result<SubnetParams> {
    if ch % NORM_GROUPS != 0 {
        return Err(shape_err!(
            "sub-network channel count {ch} not divisible by {NORM_GROUPS} groups"
        ));
    }
    let fan_in = ch * 9;
    let std1 = (2.0 / fan_in as f64).sqrt();
    let conv1_w = store.register(
        &format!("{prefix}.conv1.w"),
        normal_tensor(&[ch, ch, 3, 3], std1, rng),
    )?;
    let conv2_w = store.register(
        &format!("{prefix}.conv2.w"),
        match init {
            InitMode::Train => Tensor::zeros(&[ch, ch, 3, 3]),
            InitMode::FullRandom => normal_tensor(&[ch, ch, 3, 3], 0.05, rng),
        },
    )?;
    let conv2_b = store.register(
        &format!("{prefix}.conv2.b"),
        match init {
            InitMode::Train => Tensor::zeros(&[ch]),
            InitMode::FullRandom => normal_tensor(&[ch], 0.02, rng),
        },
    )?;
    Ok(SubnetParams {
        conv1_w,
        conv2_w,
        conv2_b,
    })
}

fn conv_spec<T: Scalar>(
    store: &ParamStore<T>,
    w: ParamId,
    b: ParamId,
    padding: usize,
) -> Result<ConvSpec<T>> {
    ConvSpec::new(store.get(w).clone(), store.get(b).clone(), 1, padding)
}

/// Pure sub-network evaluation.
pub fn subnet_eval<T: Scalar>(
    x: &Tensor<T>,
    p: &SubnetParams,
    store: &ParamStore<T>,
) -> Result<Tensor<T>> {
    let w1 = store.get(p.conv1_w);
    let zero_bias = Tensor::zeros(&[w1.shape()[0]]);
    let c1 = tensor::conv2d(x, &ConvSpec::new(w1.clone(), zero_bias, 1, 1)?)?;
    let n = ops::group_norm_eval(&c1, NORM_GROUPS)?;
    let s = tensor::silu(&n);
    tensor::conv2d(&s, &conv_spec(store, p.conv2_w, p.conv2_b, 1)?)
}

/// Taped sub-network (bitwise identical values to [`subnet_eval`]).
pub fn subnet_build<T: Scalar>(
    tape: &mut Tape<T>,
    x: NodeId,
    p: &SubnetParams,
    store: &ParamStore<T>,
) -> Result<NodeId> {
    let w1 = tape.leaf_param(store, p.conv1_w)?;
    let zero = Tensor::zeros(&[store.get(p.conv1_w).shape()[0]]);
    let b1 = tape.leaf_input("conv1.zero_bias", zero)?;
    let c1 = ops::conv2d(tape, x, w1, b1, 1, 1)?;
    let n = ops::group_norm(tape, c1, NORM_GROUPS)?;
    let s = ops::silu(tape, n)?;
    let w2 = tape.leaf_param(store, p.conv2_w)?;
    let b2 = tape.leaf_param(store, p.conv2_b)?;
    ops::conv2d(tape, s, w2, b2, 1, 1)
}

// ── Coupling blocks ─────────────────────────────────────────────────────

/// Two residual sub-networks over a half/half channel split.
#[derive(Debug, Clone, Copy)]
pub struct CouplingBlock {
    pub f: SubnetParams,
    pub g: SubnetParams,
    /// Full channel count at block entry (streams carry half each).
    pub channels: usize,
}

/// Registers one coupling block over `channels` (split half/half).
pub fn register_coupling<T: Scalar>(
    store: &mut ParamStore<T>,
    prefix: &str,
    channels: usize,
    init: InitMode,
    rng: &mut SplitMix64,
) -> Result<CouplingBlock> {
    if channels % 2 != 0 {
        return Err(shape_err!(
            "coupling block needs an even channel count, got {channels}"
        ));
    }
    let half = channels / 2;
    let f = register_subnet(store, &format!("{prefix}.f"), half, init, rng)?;
    let g = register_subnet(store, &format!("{prefix}.g"), half, init, rng)?;
    Ok(CouplingBlock { f, g, channels })
}

fn check_stream_shapes<T: Scalar>(
    block: &CouplingBlock,
    a: &Tensor<T>,
    b: &Tensor<T>,
) -> Result<()> {
    let (_, ca, _, _) = a.dims4()?;
    if a.shape() != b.shape() {
        return Err(shape_err!(
            "coupling streams differ: {:?} vs {:?}",
            a.shape(),
            b.shape()
        ));
    }
    if ca * 2 != block.channels {
        return Err(shape_err!(
            "coupling streams carry {ca} channels each, block expects {}",
            block.channels / 2
        ));
    }
    Ok(())
}

/// `(x0, y0) → (x2, y2)` per the two-stage rewiring.
pub fn coupling_forward<T: Scalar>(
    x0: &Tensor<T>,
    y0: &Tensor<T>,
    block: &CouplingBlock,
    store: &ParamStore<T>,
) -> Result<(Tensor<T>, Tensor<T>)> {
    check_stream_shapes(block, x0, y0)?;
    let x1 = tensor::add(&subnet_eval(x0, &block.f, store)?, y0)?;
    let x2 = tensor::add(&subnet_eval(&x1, &block.g, store)?, x0)?;
    Ok((x2, x1)) // y2 = x1
}

/// Exact algebraic inverse of [`coupling_forward`].
pub fn coupling_inverse<T: Scalar>(
    x2: &Tensor<T>,
    y2: &Tensor<T>,
    block: &CouplingBlock,
    store: &ParamStore<T>,
) -> Result<(Tensor<T>, Tensor<T>)> {
    check_stream_shapes(block, x2, y2)?;
    let x1 = y2;
    let y1 = tensor::sub(x2, &subnet_eval(x1, &block.g, store)?)?;
    let x0 = y1;
    let y0 = tensor::sub(x1, &subnet_eval(&x0, &block.f, store)?)?;
    Ok((x0, y0))
}

/// Taped coupling block; returns the `(x2, y2)` node pair.
pub fn coupling_build<T: Scalar>(
    tape: &mut Tape<T>,
    x0: NodeId,
    y0: NodeId,
    block: &CouplingBlock,
    store: &ParamStore<T>,
) -> Result<(NodeId, NodeId)> {
    check_stream_shapes(block, tape.value(x0)?, tape.value(y0)?)?;
    let f_out = subnet_build(tape, x0, &block.f, store)?;
    let x1 = ops::add(tape, f_out, y0)?;
    let g_out = subnet_build(tape, x1, &block.g, store)?;
    let x2 = ops::add(tape, g_out, x0)?;
    Ok((x2, x1))
}

/// One block of reconstruct-replay-backpropagate, accumulating parameter
/// gradients into `grads`. Returns the reconstructed inputs and their
/// cotangents.
#[allow(clippy::too_many_arguments)]
fn coupling_recompute_into<T: Scalar>(
    x2: &Tensor<T>,
    y2: &Tensor<T>,
    cx2: &Tensor<T>,
    cy2: &Tensor<T>,
    block: &CouplingBlock,
    store: &ParamStore<T>,
    meter: MeterHandle,
    grads: &mut Gradients<T>,
) -> Result<((Tensor<T>, Tensor<T>), (Tensor<T>, Tensor<T>))> {
    let (x0, y0) = coupling_inverse(x2, y2, block, store)?;

    let mut local = Tape::with_meter(meter);
    let x0n = local.leaf_input("x0", x0.clone())?;
    let y0n = local.leaf_input("y0", y0.clone())?;
    let (x2n, y2n) = coupling_build(&mut local, x0n, y0n, block, store)?;

    // The replay must land back on the retained output, else the weights
    // have drifted into numerically non-invertible territory.
    let tol = recompute_tolerance(T::DTYPE);
    let dx = local.value(x2n)?.max_abs_diff(x2)?;
    let dy = local.value(y2n)?.max_abs_diff(y2)?;
    if dx.max(dy) > tol {
        return Err(Error::Inversion(format!(
            "coupling replay drifted {:.3e} from the retained output (tolerance {tol:.1e})",
            dx.max(dy)
        )));
    }

    let root = ops::concat_ch(&mut local, x2n, y2n)?;
    let seed = tensor::concat_ch(cx2, cy2)?;
    let watched = backward_into(&mut local, root, seed, store, grads)?;
    let half = block.channels / 2;
    let zero = || {
        let mut shape = x2.shape().to_vec();
        shape[1] = half;
        Tensor::zeros(&shape)
    };
    let cx0 = watched.get(&x0n).cloned().unwrap_or_else(zero);
    let cy0 = watched.get(&y0n).cloned().unwrap_or_else(zero);
    Ok(((x0, y0), (cx0, cy0)))
}

/// Backward through one coupling block given only its retained outputs:
/// reconstructs the inputs by inversion, replays the block, and applies the
/// standard VJPs. Returns the input cotangents and parameter gradients.
pub fn coupling_backward_recompute<T: Scalar>(
    x2: &Tensor<T>,
    y2: &Tensor<T>,
    cx2: &Tensor<T>,
    cy2: &Tensor<T>,
    block: &CouplingBlock,
    store: &ParamStore<T>,
    meter: MeterHandle,
) -> Result<((Tensor<T>, Tensor<T>), Gradients<T>)> {
    let mut grads = Gradients::new();
    let ((_, _), (cx0, cy0)) =
        coupling_recompute_into(x2, y2, cx2, cy2, block, store, meter, &mut grads)?;
    Ok(((cx0, cy0), grads))
}

// ── Spans (stacks of blocks treated as one reversible unit) ─────────────

/// Pure evaluation of a block stack on a merged-channel tensor.
pub fn span_eval<T: Scalar>(
    x: &Tensor<T>,
    blocks: &[CouplingBlock],
    store: &ParamStore<T>,
) -> Result<Tensor<T>> {
    let (_, c, _, _) = x.dims4()?;
    let half = c / 2;
    let mut x0 = tensor::slice_ch(x, 0, half)?;
    let mut y0 = tensor::slice_ch(x, half, c)?;
    for block in blocks {
        let (nx, ny) = coupling_forward(&x0, &y0, block, store)?;
        x0 = nx;
        y0 = ny;
    }
    tensor::concat_ch(&x0, &y0)
}

/// Exact inverse of [`span_eval`].
pub fn span_inverse<T: Scalar>(
    out: &Tensor<T>,
    blocks: &[CouplingBlock],
    store: &ParamStore<T>,
) -> Result<Tensor<T>> {
    let (_, c, _, _) = out.dims4()?;
    let half = c / 2;
    let mut x2 = tensor::slice_ch(out, 0, half)?;
    let mut y2 = tensor::slice_ch(out, half, c)?;
    for block in blocks.iter().rev() {
        let (nx, ny) = coupling_inverse(&x2, &y2, block, store)?;
        x2 = nx;
        y2 = ny;
    }
    tensor::concat_ch(&x2, &y2)
}

/// Taped span with every intermediate retained.
pub fn span_build_storeall<T: Scalar>(
    tape: &mut Tape<T>,
    x: NodeId,
    blocks: &[CouplingBlock],
    store: &ParamStore<T>,
) -> Result<NodeId> {
    let (_, c, _, _) = tape.value(x)?.dims4()?;
    let half = c / 2;
    let mut x0 = ops::slice_ch(tape, x, 0, half)?;
    let mut y0 = ops::slice_ch(tape, x, half, c)?;
    for block in blocks {
        let (nx, ny) = coupling_build(tape, x0, y0, block, store)?;
        x0 = nx;
        y0 = ny;
    }
    ops::concat_ch(tape, x0, y0)
}

/// Taped span as a single compact node: only the span output is retained;
/// the VJP reconstructs block inputs by inversion, block by block, and
/// checks the final reconstruction against the still-alive input node.
pub fn span_build_reversible<T: Scalar>(
    tape: &mut Tape<T>,
    x: NodeId,
    blocks: &[CouplingBlock],
    store: &ParamStore<T>,
) -> Result<NodeId> {
    let out = span_eval(tape.value(x)?, blocks, store)?;
    let blocks: Vec<CouplingBlock> = blocks.to_vec();
    tape.record("coupling_span", &[x], out, None, |id| {
        Some(Box::new(move |ctx, cot| span_vjp(ctx, id, x, &blocks, cot)))
    })
}

fn span_vjp<T: Scalar>(
    ctx: &mut BackCtx<'_, T>,
    self_id: NodeId,
    input_id: NodeId,
    blocks: &[CouplingBlock],
    cot: &Tensor<T>,
) -> Result<Vec<(NodeId, Tensor<T>)>> {
    let out = ctx.value(self_id)?.clone();
    let (_, c, _, _) = out.dims4()?;
    let half = c / 2;
    let mut x2 = tensor::slice_ch(&out, 0, half)?;
    let mut y2 = tensor::slice_ch(&out, half, c)?;
    let mut cx = tensor::slice_ch(cot, 0, half)?;
    let mut cy = tensor::slice_ch(cot, half, c)?;

    for block in blocks.iter().rev() {
        let ((px, py), (ncx, ncy)) = coupling_recompute_into(
            &x2,
            &y2,
            &cx,
            &cy,
            block,
            ctx.store,
            ctx.meter.clone(),
            ctx.grads,
        )?;
        x2 = px;
        y2 = py;
        cx = ncx;
        cy = ncy;
    }

    // The chain of inversions must terminate on the retained span input.
    let rebuilt = tensor::concat_ch(&x2, &y2)?;
    let drift = rebuilt.max_abs_diff(ctx.value(input_id)?)?;
    let tol = recompute_tolerance(T::DTYPE);
    if drift > tol {
        return Err(Error::Inversion(format!(
            "span reconstruction drifted {drift:.3e} from the retained input (tolerance {tol:.1e})"
        )));
    }
    Ok(vec![(input_id, tensor::concat_ch(&cx, &cy)?)])
}

// ── Noise estimator ─────────────────────────────────────────────────────

/// Width/depth of the estimator.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct EstimatorConfig {
    /// Channels at the outer resolution level (the inner level uses twice
    /// as many). Must be a multiple of 8 so the coupling streams split into
    /// normalization groups.
    pub width: usize,
    /// Coupling blocks per resolution level.
    pub blocks: usize,
}

impl Default for EstimatorConfig {
    fn default() -> Self {
        EstimatorConfig { width: 8, blocks: 2 }
    }
}

impl EstimatorConfig {
    pub fn validate(&self) -> Result<()> {
        if self.width == 0 || self.width % 8 != 0 {
            return Err(domain_err!(
                "estimator width must be a positive multiple of 8, got {}",
                self.width
            ));
        }
        if self.blocks == 0 {
            return Err(domain_err!("estimator needs at least one coupling block"));
        }
        Ok(())
    }
}

/// One chain step's worth of estimator weights.
#[derive(Debug, Clone)]
pub struct EstimatorStep {
    pub in_w: ParamId,
    pub in_b: ParamId,
    pub lvl1: Vec<CouplingBlock>,
    pub down_w: ParamId,
    pub down_b: ParamId,
    pub lvl2: Vec<CouplingBlock>,
    pub up_w: ParamId,
    pub up_b: ParamId,
    pub out_w: ParamId,
    pub out_b: ParamId,
}

/// Per-step noise estimator: grayscale in, grayscale out, two resolution
/// levels of coupling spans, disjoint parameters for every step.
#[derive(Debug, Clone)]
pub struct NoiseEstimator {
    pub config: EstimatorConfig,
    steps: Vec<EstimatorStep>,
}

impl NoiseEstimator {
    /// Registers parameter sets for steps `1..=t_count`.
    pub fn register<T: Scalar>(
        store: &mut ParamStore<T>,
        config: EstimatorConfig,
        t_count: usize,
        init: InitMode,
        rng: &mut SplitMix64,
    ) -> Result<Self> {
        config.validate()?;
        if t_count == 0 {
            return Err(domain_err!("estimator needs at least one step"));
        }
        let c1 = config.width;
        let c2 = 2 * c1;
        let mut steps = Vec::with_capacity(t_count);
        for t in 1..=t_count {
            let p = |suffix: &str| format!("step{t}.{suffix}");
            let he = |cin: usize| (2.0 / cin as f64).sqrt();
            let in_w = store.register(
                &p("in_proj.w"),
                normal_tensor(&[c1, 4, 1, 1], he(4), rng),
            )?;
            let in_b = store.register(&p("in_proj.b"), Tensor::zeros(&[c1]))?;
            let mut lvl1 = Vec::with_capacity(config.blocks);
            for j in 0..config.blocks {
                lvl1.push(register_coupling(
                    store,
                    &p(&format!("lvl1.block{j}")),
                    c1,
                    init,
                    rng,
                )?);
            }
            let down_w = store.register(
                &p("down_proj.w"),
                normal_tensor(&[c2, 4 * c1, 1, 1], he(4 * c1), rng),
            )?;
            let down_b = store.register(&p("down_proj.b"), Tensor::zeros(&[c2]))?;
            let mut lvl2 = Vec::with_capacity(config.blocks);
            for j in 0..config.blocks {
                lvl2.push(register_coupling(
                    store,
                    &p(&format!("lvl2.block{j}")),
                    c2,
                    init,
                    rng,
                )?);
            }
            let up_w = store.register(
                &p("up_proj.w"),
                normal_tensor(&[4 * c1, c2, 1, 1], he(c2), rng),
            )?;
            let up_b = store.register(&p("up_proj.b"), Tensor::zeros(&[4 * c1]))?;
            // Training starts the output head at full He scale: a fresh
            // estimator then emits noise of roughly the magnitude it is
            // trained to predict, and gradients flow to every layer from
            // the first step (only sub-network tails are pinned to zero).
            // The fully-random mode instead keeps every draw spectrally
            // modest, the regime in which floating-point inversion over
            // long chains is well conditioned.
            let out_scale = match init {
                InitMode::Train => he(c1),
                InitMode::FullRandom => 0.05,
            };
            let out_w = store.register(
                &p("out_proj.w"),
                normal_tensor(&[4, c1, 1, 1], out_scale, rng),
            )?;
            let out_b = store.register(&p("out_proj.b"), Tensor::zeros(&[4]))?;
            steps.push(EstimatorStep {
                in_w,
                in_b,
                lvl1,
                down_w,
                down_b,
                lvl2,
                up_w,
                up_b,
                out_w,
                out_b,
            });
        }
        Ok(NoiseEstimator { config, steps })
    }

    pub fn step_count(&self) -> usize {
        self.steps.len()
    }

    /// The parameter set for chain step `t ∈ [1, T]`.
    pub fn step(&self, t: usize) -> Result<&EstimatorStep> {
        if t == 0 || t > self.steps.len() {
            return Err(domain_err!(
                "estimator step {t} out of range 1..={}",
                self.steps.len()
            ));
        }
        Ok(&self.steps[t - 1])
    }

    fn check_input<T: Scalar>(&self, x: &Tensor<T>) -> Result<()> {
        let (_, c, h, w) = x.dims4()?;
        if c != 1 {
            return Err(shape_err!("estimator expects grayscale input, got {c} channels"));
        }
        if h % 4 != 0 || w % 4 != 0 {
            return Err(shape_err!(
                "estimator needs H and W divisible by 4 (two unshuffle levels), got {h}x{w}"
            ));
        }
        Ok(())
    }

    /// Pure evaluation of ε̂ for chain step `t`.
    pub fn forward<T: Scalar>(
        &self,
        x: &Tensor<T>,
        t: usize,
        store: &ParamStore<T>,
    ) -> Result<Tensor<T>> {
        self.check_input(x)?;
        let s = self.step(t)?;
        let down1 = tensor::pixel_unshuffle(x, 2)?;
        let feat = tensor::conv2d(&down1, &conv_spec(store, s.in_w, s.in_b, 0)?)?;
        let skip = span_eval(&feat, &s.lvl1, store)?;
        let down2 = tensor::pixel_unshuffle(&skip, 2)?;
        let inner = tensor::conv2d(&down2, &conv_spec(store, s.down_w, s.down_b, 0)?)?;
        let inner = span_eval(&inner, &s.lvl2, store)?;
        let up = tensor::conv2d(&inner, &conv_spec(store, s.up_w, s.up_b, 0)?)?;
        let up = tensor::pixel_shuffle(&up, 2)?;
        let merged = tensor::add(&up, &skip)?;
        let head = tensor::conv2d(&merged, &conv_spec(store, s.out_w, s.out_b, 0)?)?;
        tensor::pixel_shuffle(&head, 2)
    }

    /// Taped ε̂ for chain step `t`; `reversible_spans` selects whether the
    /// coupling stacks record compact inversion nodes or store everything.
    pub fn build<T: Scalar>(
        &self,
        tape: &mut Tape<T>,
        x: NodeId,
        t: usize,
        store: &ParamStore<T>,
        reversible_spans: bool,
    ) -> Result<NodeId> {
        self.check_input(tape.value(x)?)?;
        let s = self.step(t)?.clone();
        let span = |tape: &mut Tape<T>, x: NodeId, blocks: &[CouplingBlock]| {
            if reversible_spans {
                span_build_reversible(tape, x, blocks, store)
            } else {
                span_build_storeall(tape, x, blocks, store)
            }
        };
        let down1 = ops::pixel_unshuffle(tape, x, 2)?;
        let (iw, ib) = (tape.leaf_param(store, s.in_w)?, tape.leaf_param(store, s.in_b)?);
        let feat = ops::conv2d(tape, down1, iw, ib, 1, 0)?;
        let skip = span(tape, feat, &s.lvl1)?;
        let down2 = ops::pixel_unshuffle(tape, skip, 2)?;
        let (dw, db) = (
            tape.leaf_param(store, s.down_w)?,
            tape.leaf_param(store, s.down_b)?,
        );
        let inner = ops::conv2d(tape, down2, dw, db, 1, 0)?;
        let inner = span(tape, inner, &s.lvl2)?;
        let (uw, ub) = (tape.leaf_param(store, s.up_w)?, tape.leaf_param(store, s.up_b)?);
        let up = ops::conv2d(tape, inner, uw, ub, 1, 0)?;
        let up = ops::pixel_shuffle(tape, up, 2)?;
        let merged = ops::add(tape, up, skip)?;
        let (ow, ob) = (tape.leaf_param(store, s.out_w)?, tape.leaf_param(store, s.out_b)?);
        let head = ops::conv2d(tape, merged, ow, ob, 1, 0)?;
        ops::pixel_shuffle(tape, head, 2)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autograd::{backward, new_meter};

    fn random_image<T: Scalar>(shape: &[usize], rng: &mut SplitMix64) -> Tensor<T> {
        Tensor::from_fn(shape, |_| T::from_f64(rng.next_f64()))
    }

    fn test_block<T: Scalar>(
        channels: usize,
        init: InitMode,
        seed: u64,
    ) -> (ParamStore<T>, CouplingBlock) {
        let mut store = ParamStore::new();
        let mut rng = SplitMix64::new(seed);
        let block = register_coupling(&mut store, "blk", channels, init, &mut rng).unwrap();
        (store, block)
    }

    #[test]
    fn zero_subnets_reduce_to_the_pure_rewiring() {
        let (mut store, block) = test_block::<f64>(8, InitMode::Train, 1);
        // Zero conv1 too, so F ≡ 0 and G ≡ 0 exactly.
        for pid in store.ids().collect::<Vec<_>>() {
            store.set(pid, Tensor::zeros(store.get(pid).shape())).unwrap();
        }
        let mut rng = SplitMix64::new(2);
        let x0 = random_image::<f64>(&[1, 4, 4, 4], &mut rng);
        let y0 = random_image::<f64>(&[1, 4, 4, 4], &mut rng);
        let (x2, y2) = coupling_forward(&x0, &y0, &block, &store).unwrap();
        assert!(x2.bit_eq(&x0), "x2 = x0 under zero sub-networks");
        assert!(y2.bit_eq(&y0), "y2 = y0 under zero sub-networks");
        let (rx, ry) = coupling_inverse(&x2, &y2, &block, &store).unwrap();
        assert!(rx.bit_eq(&x0) && ry.bit_eq(&y0), "inverse of rewiring");
    }

    #[test]
    fn double_precision_roundtrip_is_exact_to_1e10() {
        let (store, block) = test_block::<f64>(8, InitMode::FullRandom, 3);
        let mut rng = SplitMix64::new(4);
        let x0 = random_image::<f64>(&[2, 4, 4, 4], &mut rng);
        let y0 = random_image::<f64>(&[2, 4, 4, 4], &mut rng);
        let (x2, y2) = coupling_forward(&x0, &y0, &block, &store).unwrap();
        let (rx, ry) = coupling_inverse(&x2, &y2, &block, &store).unwrap();
        assert!(rx.max_abs_diff(&x0).unwrap() < 1e-10);
        assert!(ry.max_abs_diff(&y0).unwrap() < 1e-10);

        // And the other direction: forward(inverse(·)) = id.
        let (ix, iy) = coupling_inverse(&x0, &y0, &block, &store).unwrap();
        let (fx, fy) = coupling_forward(&ix, &iy, &block, &store).unwrap();
        assert!(fx.max_abs_diff(&x0).unwrap() < 1e-10);
        assert!(fy.max_abs_diff(&y0).unwrap() < 1e-10);
    }

    #[test]
    fn linear_subnets_make_the_block_additive() {
        // With normalization bypassed (it is not linear) the claim holds for
        // the residual wiring itself: zero F/G plus the skip structure is
        // linear, so check additivity of forward with zero sub-nets ... and
        // separately that a random block is NOT additive (normalization).
        let (mut store, block) = test_block::<f64>(8, InitMode::Train, 5);
        for pid in store.ids().collect::<Vec<_>>() {
            store.set(pid, Tensor::zeros(store.get(pid).shape())).unwrap();
        }
        let mut rng = SplitMix64::new(6);
        let a0 = random_image::<f64>(&[1, 4, 3, 3], &mut rng);
        let a1 = random_image::<f64>(&[1, 4, 3, 3], &mut rng);
        let b0 = random_image::<f64>(&[1, 4, 3, 3], &mut rng);
        let b1 = random_image::<f64>(&[1, 4, 3, 3], &mut rng);
        let (sx, sy) = coupling_forward(
            &tensor::add(&a0, &b0).unwrap(),
            &tensor::add(&a1, &b1).unwrap(),
            &block,
            &store,
        )
        .unwrap();
        let (ax, ay) = coupling_forward(&a0, &a1, &block, &store).unwrap();
        let (bx, by) = coupling_forward(&b0, &b1, &block, &store).unwrap();
        assert!(sx.max_abs_diff(&tensor::add(&ax, &bx).unwrap()).unwrap() < 1e-12);
        assert!(sy.max_abs_diff(&tensor::add(&ay, &by).unwrap()).unwrap() < 1e-12);
    }

    #[test]
    fn single_precision_roundtrip_error_stays_small_when_stacking() {
        let mut store = ParamStore::<f32>::new();
        let mut rng = SplitMix64::new(7);
        let blocks: Vec<CouplingBlock> = (0..8)
            .map(|j| {
                register_coupling(
                    &mut store,
                    &format!("s.block{j}"),
                    8,
                    InitMode::FullRandom,
                    &mut rng,
                )
                .unwrap()
            })
            .collect();
        let x = random_image::<f32>(&[1, 8, 4, 4], &mut rng);
        for k in [1usize, 2, 4, 8] {
            let out = span_eval(&x, &blocks[..k], &store).unwrap();
            let back = span_inverse(&out, &blocks[..k], &store).unwrap();
            let err = back.max_abs_diff(&x).unwrap();
            assert!(err < 1e-4, "stack of {k}: inversion error {err}");
        }
    }

    #[test]
    fn recompute_backward_matches_storeall_in_double_precision() {
        let mut store = ParamStore::<f64>::new();
        let mut rng = SplitMix64::new(8);
        let blocks: Vec<CouplingBlock> = (0..2)
            .map(|j| {
                register_coupling(
                    &mut store,
                    &format!("s.block{j}"),
                    8,
                    InitMode::FullRandom,
                    &mut rng,
                )
                .unwrap()
            })
            .collect();
        let x = random_image::<f64>(&[1, 8, 4, 4], &mut rng);
        let cot = random_image::<f64>(&[1, 8, 4, 4], &mut rng);

        // Store-all oracle.
        let mut tape = Tape::new();
        let xn = tape.leaf_input("x", x.clone()).unwrap();
        let out = span_build_storeall(&mut tape, xn, &blocks, &store).unwrap();
        let (g_store, inputs) = backward(&mut tape, out, cot.clone(), &store).unwrap();
        let gx_store = &inputs[&xn];

        // Reversible span.
        let mut tape = Tape::new();
        let xn = tape.leaf_input("x", x.clone()).unwrap();
        let out = span_build_reversible(&mut tape, xn, &blocks, &store).unwrap();
        let (g_rev, inputs) = backward(&mut tape, out, cot, &store).unwrap();
        let gx_rev = &inputs[&xn];

        assert!(gx_rev.max_abs_diff(gx_store).unwrap() < 1e-10);
        for pid in store.ids() {
            let a = g_store.get(pid).unwrap();
            let b = g_rev.get(pid).unwrap();
            let denom = 1f64.max(
                a.as_slice()
                    .iter()
                    .fold(0.0f64, |m, v| m.max(v.abs())),
            );
            assert!(
                a.max_abs_diff(b).unwrap() / denom < 1e-10,
                "parameter {} gradients diverge",
                store.name(pid)
            );
        }
    }

    #[test]
    fn zero_upstream_gradient_yields_zero_parameter_gradients() {
        let (store, block) = test_block::<f64>(8, InitMode::FullRandom, 9);
        let mut rng = SplitMix64::new(10);
        let x0 = random_image::<f64>(&[1, 4, 4, 4], &mut rng);
        let y0 = random_image::<f64>(&[1, 4, 4, 4], &mut rng);
        let (x2, y2) = coupling_forward(&x0, &y0, &block, &store).unwrap();
        let zeros = Tensor::zeros(x2.shape());
        let ((cx0, cy0), grads) = coupling_backward_recompute(
            &x2,
            &y2,
            &zeros,
            &zeros,
            &block,
            &store,
            new_meter(),
        )
        .unwrap();
        assert!(cx0.max_abs_diff(&zeros).unwrap() == 0.0);
        assert!(cy0.max_abs_diff(&zeros).unwrap() == 0.0);
        for (_, g) in grads.iter() {
            assert!(g.as_slice().iter().all(|&v| v == 0.0));
        }
    }

    #[test]
    fn zero_estimator_weights_produce_zero_noise() {
        let mut store = ParamStore::<f64>::new();
        let mut rng = SplitMix64::new(11);
        let est = NoiseEstimator::register(
            &mut store,
            EstimatorConfig::default(),
            2,
            InitMode::Train,
            &mut rng,
        )
        .unwrap();
        for pid in store.ids().collect::<Vec<_>>() {
            store.set(pid, Tensor::zeros(store.get(pid).shape())).unwrap();
        }
        let x = random_image::<f64>(&[1, 1, 8, 8], &mut rng);
        let eps = est.forward(&x, 1, &store).unwrap();
        assert!(eps.as_slice().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn estimator_preserves_shape_and_respects_step_disjointness() {
        let mut store = ParamStore::<f64>::new();
        let mut rng = SplitMix64::new(12);
        let est = NoiseEstimator::register(
            &mut store,
            EstimatorConfig::default(),
            3,
            InitMode::FullRandom,
            &mut rng,
        )
        .unwrap();
        let x = random_image::<f64>(&[1, 1, 16, 16], &mut rng);
        let e1 = est.forward(&x, 1, &store).unwrap();
        assert_eq!(e1.shape(), x.shape());

        // Perturbing step 2's weights must not affect step 1's output.
        let w2 = est.step(2).unwrap().in_w;
        let bumped = tensor::affine(store.get(w2), 1.0, 10.0);
        store.set(w2, bumped).unwrap();
        let e1_again = est.forward(&x, 1, &store).unwrap();
        assert!(e1.bit_eq(&e1_again), "step parameter sets are disjoint");

        assert!(est.forward(&x, 0, &store).is_err());
        assert!(est.forward(&x, 4, &store).is_err());
        let odd = random_image::<f64>(&[1, 1, 6, 6], &mut rng);
        assert!(est.forward(&odd, 1, &store).is_err(), "H,W must divide by 4");
    }

    #[test]
    fn estimator_values_match_between_eval_and_both_tape_modes_bitwise() {
        let mut store = ParamStore::<f64>::new();
        let mut rng = SplitMix64::new(13);
        let est = NoiseEstimator::register(
            &mut store,
            EstimatorConfig::default(),
            1,
            InitMode::FullRandom,
            &mut rng,
        )
        .unwrap();
        let x = random_image::<f64>(&[2, 1, 8, 8], &mut rng);
        let plain = est.forward(&x, 1, &store).unwrap();
        for reversible in [false, true] {
            let mut tape = Tape::new();
            let xn = tape.leaf_input("x", x.clone()).unwrap();
            let out = est.build(&mut tape, xn, 1, &store, reversible).unwrap();
            assert!(
                tape.value(out).unwrap().bit_eq(&plain),
                "taped (reversible={reversible}) must equal pure eval bitwise"
            );
        }
    }

    #[test]
    fn estimator_gradients_match_between_modes_in_single_precision() {
        let mut store = ParamStore::<f32>::new();
        let mut rng = SplitMix64::new(14);
        let est = NoiseEstimator::register(
            &mut store,
            EstimatorConfig::default(),
            1,
            InitMode::FullRandom,
            &mut rng,
        )
        .unwrap();
        let x = random_image::<f32>(&[1, 1, 8, 8], &mut rng);
        let cot = random_image::<f32>(&[1, 1, 8, 8], &mut rng);

        let run = |reversible: bool| {
            let mut tape = Tape::new();
            let xn = tape.leaf_input("x", x.clone()).unwrap();
            let out = est.build(&mut tape, xn, 1, &store, reversible).unwrap();
            let (grads, inputs) = backward(&mut tape, out, cot.clone(), &store).unwrap();
            (grads, inputs[&xn].clone())
        };
        let (gs, gxs) = run(false);
        let (gr, gxr) = run(true);

        // Relative L∞ over the whole gradient set: largest deviation
        // divided by the largest oracle gradient magnitude.
        let max_abs = |t: &Tensor<f32>| {
            t.as_slice()
                .iter()
                .fold(0.0f64, |m, v| m.max(v.as_f64().abs()))
        };
        let mut scale = max_abs(&gxs);
        for (_, g) in gs.iter() {
            scale = scale.max(max_abs(g));
        }
        assert!(scale > 0.0);

        let mut worst = gxs.max_abs_diff(&gxr).unwrap();
        for pid in store.ids() {
            if let (Some(a), Some(b)) = (gs.get(pid), gr.get(pid)) {
                worst = worst.max(a.max_abs_diff(b).unwrap());
            }
        }
        let rel = worst / scale;
        assert!(rel < 1e-5, "mode equivalence relative L∞ = {rel:.3e}");
    }

    #[test]
    fn reversible_spans_retain_constant_bytes_as_block_count_grows() {
        let mut peaks = Vec::new();
        for blocks in [1usize, 2, 4] {
            let mut store = ParamStore::<f64>::new();
            let mut rng = SplitMix64::new(15);
            let stack: Vec<CouplingBlock> = (0..blocks)
                .map(|j| {
                    register_coupling(
                        &mut store,
                        &format!("s.block{j}"),
                        8,
                        InitMode::FullRandom,
                        &mut rng,
                    )
                    .unwrap()
                })
                .collect();
            let x = random_image::<f64>(&[1, 8, 4, 4], &mut rng);
            let mut tape = Tape::new();
            let xn = tape.leaf_input("x", x).unwrap();
            span_build_reversible(&mut tape, xn, &stack, &store).unwrap();
            // Forward retention: input node + span output node only.
            peaks.push(tape.memory_report().live_bytes);
        }
        assert_eq!(peaks[0], peaks[1], "retained bytes independent of depth");
        assert_eq!(peaks[1], peaks[2], "retained bytes independent of depth");
    }
}
