//! The fusion chain: a non-Markovian two-term recursion over image states,
//! walked forward for fusion and backward — by exact algebraic inversion —
//! for training.
//!
//! States are `f_0 = v` (visible) and `f_1 = i` (infrared); each step adds a
//! transformed current state onto the state two slots back:
//!
//! ```text
//! f_{t+1} = f_{t−1} + F_t(f_t)        (forward)
//! f_{t−1} = f_{t+1} − F_t(f_t)        (reverse)
//! ```
//!
//! `F_t` is a per-step noise estimate, optionally pushed through one
//! deterministic diffusion update with learnable per-step ᾱ coefficients.
//! With state recomputation enabled, training retains only the two final
//! states; the backward pass reconstructs every earlier state by the
//! reverse recursion and replays one step at a time.

use crate::autograd::{
    backward_into, ops, BackCtx, Gradients, MemoryReport, MeterHandle, NodeId, Tape,
};
use crate::error::{Error, Result};
use crate::objective::{loss_total_build, LossBreakdown};
use crate::optim::Adam;
use crate::params::{ParamId, ParamStore};
use crate::revnet::{EstimatorConfig, InitMode, NoiseEstimator};
use crate::rng::SplitMix64;
use crate::scalar::{Dtype, Scalar};
use crate::tensor::{self, Tensor};
use alloc::boxed::Box;
use alloc::format;
use alloc::vec;
use alloc::vec::Vec;
// Resolves f64 math in no_std builds; shadowed by std's inherent methods
// whenever the build graph links std (e.g. under dev-dependencies).
#[allow(unused_imports)]
use num_traits::Float;

/// Maximum tolerated drift between reconstructed chain sources and the
/// retained originals before backward aborts.
pub fn chain_tolerance(dtype: Dtype) -> f64 {
    match dtype {
        Dtype::F32 => 1e-2,
        Dtype::F64 => 1e-8,
    }
}

// ── Learnable diffusion coefficients ────────────────────────────────────

/// Free logits for the per-step ᾱ coefficients, `t = 0..=T`. The
/// constrained values `ᾱ_t = sigmoid(logit_t) ∈ (0,1)` are recomputed from
/// the logits on every read.
#[derive(Debug, Clone)]
pub struct AlphaSchedule {
    logits: Vec<ParamId>,
}

fn inverse_sigmoid(p: f64) -> f64 {
    (p / (1.0 - p)).ln()
}

impl AlphaSchedule {
    /// Registers `t_steps + 1` logits initialized to a linear schedule
    /// `ᾱ_t = 1 − 0.1·t` (floored away from zero; the t = 0 entry starts at
    /// 0.999 since exactly 1 has no finite logit).
    pub fn register<T: Scalar>(store: &mut ParamStore<T>, t_steps: usize) -> Result<Self> {
        if t_steps == 0 {
            return Err(domain_err!("the schedule needs at least one step"));
        }
        let mut logits = Vec::with_capacity(t_steps + 1);
        for t in 0..=t_steps {
            let target = if t == 0 {
                0.999
            } else {
                (1.0 - 0.1 * t as f64).max(0.05)
            };
            let logit = T::from_f64(inverse_sigmoid(target));
            logits.push(store.register(&format!("alpha.logit{t}"), Tensor::scalar(logit))?);
        }
        Ok(AlphaSchedule { logits })
    }

    /// Highest valid step index `T`.
    pub fn t_steps(&self) -> usize {
        self.logits.len() - 1
    }

    /// The logit parameter behind `ᾱ_t`.
    pub fn logit(&self, t: usize) -> Result<ParamId> {
        self.logits
            .get(t)
            .copied()
            .ok_or_else(|| domain_err!("alpha index {t} out of range 0..={}", self.t_steps()))
    }

    /// `ᾱ_t` as a one-element tensor (the exact value the taped graph sees).
    pub fn value_tensor<T: Scalar>(&self, t: usize, store: &ParamStore<T>) -> Result<Tensor<T>> {
        Ok(tensor::sigmoid(store.get(self.logit(t)?)))
    }

    /// `ᾱ_t` as a plain number.
    pub fn value<T: Scalar>(&self, t: usize, store: &ParamStore<T>) -> Result<f64> {
        Ok(self.value_tensor(t, store)?.as_slice()[0].as_f64())
    }
}

// ── Deterministic diffusion update ──────────────────────────────────────

fn check_alpha_domain(alpha_t: f64, alpha_prev: f64) -> Result<()> {
    for (name, a) in [("alpha_bar_t", alpha_t), ("alpha_bar_prev", alpha_prev)] {
        if !(a > 0.0 && a <= 1.0) {
            return Err(domain_err!("{name} must lie in (0, 1], got {a}"));
        }
    }
    Ok(())
}

/// Shared kernel sequence of the diffusion update; `at` / `ap` are
/// one-element tensors holding ᾱ_t and ᾱ_{t−1}.
fn ddim_apply<T: Scalar>(
    x: &Tensor<T>,
    eps: &Tensor<T>,
    at: &Tensor<T>,
    ap: &Tensor<T>,
) -> Result<Tensor<T>> {
    let neg = T::from_f64(-1.0);
    let one = T::from_f64(1.0);
    let sq_at = tensor::sqrt(at)?;
    let om_at = tensor::affine(at, neg, one);
    let sq_om_at = tensor::sqrt(&om_at)?;
    let noise = tensor::scale(eps, sq_om_at.as_slice()[0]);
    let num = tensor::sub(x, &noise)?;
    let inv = tensor::recip(&sq_at)?;
    let x0 = tensor::scale(&num, inv.as_slice()[0]);
    let sq_ap = tensor::sqrt(ap)?;
    let om_ap = tensor::affine(ap, neg, one);
    let sq_om_ap = tensor::sqrt(&om_ap)?;
    let carry = tensor::scale(&x0, sq_ap.as_slice()[0]);
    let fresh = tensor::scale(eps, sq_om_ap.as_slice()[0]);
    tensor::add(&carry, &fresh)
}

/// One deterministic diffusion step: estimates the clean signal from `f_t`
/// and the noise estimate, then re-noises it at the previous coefficient.
///
/// `x̂_0 = (f_t − √(1−ᾱ_t)·ε̂)/√ᾱ_t`, output `√ᾱ_{t−1}·x̂_0 + √(1−ᾱ_{t−1})·ε̂`.
pub fn ddim_update<T: Scalar>(
    f_t: &Tensor<T>,
    eps_hat: &Tensor<T>,
    alpha_bar_t: T,
    alpha_bar_prev: T,
) -> Result<Tensor<T>> {
    if f_t.shape() != eps_hat.shape() {
        return Err(shape_err!(
            "state and noise estimate must share a shape, got {:?} vs {:?}",
            f_t.shape(),
            eps_hat.shape()
        ));
    }
    check_alpha_domain(alpha_bar_t.as_f64(), alpha_bar_prev.as_f64())?;
    ddim_apply(
        f_t,
        eps_hat,
        &Tensor::scalar(alpha_bar_t),
        &Tensor::scalar(alpha_bar_prev),
    )
}

/// Taped twin of [`ddim_update`] over node handles; `at` / `ap` are
/// one-element nodes (typically sigmoids of schedule logits), so gradients
/// reach the coefficients.
pub fn ddim_build<T: Scalar>(
    tape: &mut Tape<T>,
    x: NodeId,
    eps: NodeId,
    at: NodeId,
    ap: NodeId,
) -> Result<NodeId> {
    check_alpha_domain(
        tape.value(at)?.as_slice()[0].as_f64(),
        tape.value(ap)?.as_slice()[0].as_f64(),
    )?;
    let neg = T::from_f64(-1.0);
    let one = T::from_f64(1.0);
    let sq_at = ops::sqrt(tape, at)?;
    let om_at = ops::affine(tape, at, neg, one)?;
    let sq_om_at = ops::sqrt(tape, om_at)?;
    let noise = ops::mul_scalar(tape, eps, sq_om_at)?;
    let num = ops::sub(tape, x, noise)?;
    let inv = ops::recip(tape, sq_at)?;
    let x0 = ops::mul_scalar(tape, num, inv)?;
    let sq_ap = ops::sqrt(tape, ap)?;
    let om_ap = ops::affine(tape, ap, neg, one)?;
    let sq_om_ap = ops::sqrt(tape, om_ap)?;
    let carry = ops::mul_scalar(tape, x0, sq_ap)?;
    let fresh = ops::mul_scalar(tape, eps, sq_om_ap)?;
    ops::add(tape, carry, fresh)
}

// ── Model ───────────────────────────────────────────────────────────────

/// Construction-time choices for a [`FusionModel`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ModelOptions {
    /// Chain length `T` (states run `f_0..f_T`).
    pub t_steps: usize,
    pub estimator: EstimatorConfig,
    /// Recompute chain states during backward instead of storing them.
    pub reverse1: bool,
    /// Recompute coupling-block activations inside the estimator.
    pub reverse2: bool,
    /// Push noise estimates through the diffusion update (vs. using them raw).
    pub ddim: bool,
}

impl Default for ModelOptions {
    fn default() -> Self {
        ModelOptions {
            t_steps: 2,
            estimator: EstimatorConfig::default(),
            reverse1: true,
            reverse2: true,
            ddim: true,
        }
    }
}

/// The complete learnable fusion system: per-step noise estimators, the ᾱ
/// schedule, and the output mixing weight.
#[derive(Debug, Clone)]
pub struct FusionModel {
    pub estimator: NoiseEstimator,
    pub alphas: AlphaSchedule,
    /// Raw mixing weight; the effective `w = clamp(raw, 0, 1)` starts at 1.
    pub w_raw: ParamId,
    pub t_steps: usize,
    pub reverse1: bool,
    pub reverse2: bool,
    pub ddim: bool,
}

impl FusionModel {
    pub fn register<T: Scalar>(
        store: &mut ParamStore<T>,
        opts: ModelOptions,
        init: InitMode,
        rng: &mut SplitMix64,
    ) -> Result<Self> {
        if opts.t_steps == 0 {
            return Err(domain_err!("chain length must be at least 1"));
        }
        let estimator =
            NoiseEstimator::register(store, opts.estimator, opts.t_steps, init, rng)?;
        let alphas = AlphaSchedule::register(store, opts.t_steps)?;
        let w_raw = store.register("fusion.w", Tensor::scalar(T::from_f64(1.0)))?;
        Ok(FusionModel {
            estimator,
            alphas,
            w_raw,
            t_steps: opts.t_steps,
            reverse1: opts.reverse1,
            reverse2: opts.reverse2,
            ddim: opts.ddim,
        })
    }

    /// The effective mixing weight `clamp(raw, 0, 1)`.
    pub fn w_value<T: Scalar>(&self, store: &ParamStore<T>) -> f64 {
        tensor::clamp_unit(store.get(self.w_raw)).as_slice()[0].as_f64()
    }
}

/// Per-step transform `F_t`: the noise estimate, optionally pushed through
/// the diffusion update with `(ᾱ_t, ᾱ_{t−1})`. Pure evaluation.
fn step_transform_eval<T: Scalar>(
    model: &FusionModel,
    f_t: &Tensor<T>,
    t: usize,
    store: &ParamStore<T>,
) -> Result<Tensor<T>> {
    let eps = model.estimator.forward(f_t, t, store)?;
    if model.ddim {
        let at = model.alphas.value_tensor(t, store)?;
        let ap = model.alphas.value_tensor(t - 1, store)?;
        ddim_apply(f_t, &eps, &at, &ap)
    } else {
        Ok(eps)
    }
}

/// Taped twin of [`step_transform_eval`] (bitwise-identical values).
fn step_transform_build<T: Scalar>(
    tape: &mut Tape<T>,
    model: &FusionModel,
    f_t: NodeId,
    t: usize,
    store: &ParamStore<T>,
) -> Result<NodeId> {
    let eps = model
        .estimator
        .build(tape, f_t, t, store, model.reverse2)?;
    if model.ddim {
        let lt = tape.leaf_param(store, model.alphas.logit(t)?)?;
        let lp = tape.leaf_param(store, model.alphas.logit(t - 1)?)?;
        let at = ops::sigmoid(tape, lt)?;
        let ap = ops::sigmoid(tape, lp)?;
        ddim_build(tape, f_t, eps, at, ap)
    } else {
        Ok(eps)
    }
}

// ── Forward chain ───────────────────────────────────────────────────────

/// The two final chain states.
#[derive(Debug, Clone)]
pub struct ChainEndpoints<T: Scalar> {
    /// `f_T`.
    pub f_last: Tensor<T>,
    /// `f_{T−1}`.
    pub f_prev: Tensor<T>,
}

/// Node handles for the two final chain states in a taped graph.
#[derive(Debug, Clone, Copy)]
pub struct ChainNodes {
    pub f_last: NodeId,
    pub f_prev: NodeId,
}

fn check_sources<T: Scalar>(v: &Tensor<T>, i: &Tensor<T>) -> Result<()> {
    if v.shape() != i.shape() {
        return Err(shape_err!(
            "source images must share a shape, got {:?} vs {:?}",
            v.shape(),
            i.shape()
        ));
    }
    v.dims4()?;
    Ok(())
}

/// Runs the chain forward from `(f_0, f_1) = (v, i)`. Pure evaluation —
/// intermediate states are dropped as the recursion advances.
pub fn chain_forward<T: Scalar>(
    v: &Tensor<T>,
    i: &Tensor<T>,
    model: &FusionModel,
    store: &ParamStore<T>,
) -> Result<ChainEndpoints<T>> {
    check_sources(v, i)?;
    let mut f_prev = v.clone();
    let mut f_curr = i.clone();
    for t in 1..model.t_steps {
        let transform = step_transform_eval(model, &f_curr, t, store)?;
        let f_next = tensor::add(&f_prev, &transform)?;
        f_prev = f_curr;
        f_curr = f_next;
    }
    Ok(ChainEndpoints {
        f_last: f_curr,
        f_prev,
    })
}

/// Reverses the chain from its endpoints down to the sources,
/// reconstructing `(f_0, f_1)` by the inverse recursion.
pub fn chain_reverse<T: Scalar>(
    f_last: &Tensor<T>,
    f_prev: &Tensor<T>,
    model: &FusionModel,
    store: &ParamStore<T>,
) -> Result<(Tensor<T>, Tensor<T>)> {
    check_sources(f_prev, f_last)?;
    let mut f_next = f_last.clone();
    let mut f_curr = f_prev.clone();
    for t in (1..model.t_steps).rev() {
        let transform = step_transform_eval(model, &f_curr, t, store)?;
        let f_old = tensor::sub(&f_next, &transform)?;
        if !f_old.as_slice().iter().all(|x| x.as_f64().is_finite()) {
            return Err(Error::Inversion(format!(
                "chain reconstruction diverged at step {t} (non-finite state)"
            )));
        }
        f_next = f_curr;
        f_curr = f_old;
    }
    Ok((f_curr, f_next))
}

/// Builds the taped chain. With state recomputation off, every intermediate
/// state and estimator activation is retained; with it on, a single compact
/// node retains only the packed endpoint pair and reconstructs everything
/// else during backward.
pub fn chain_build<T: Scalar>(
    tape: &mut Tape<T>,
    v: NodeId,
    i: NodeId,
    model: &FusionModel,
    store: &ParamStore<T>,
) -> Result<ChainNodes> {
    check_sources(tape.value(v)?, tape.value(i)?)?;
    if !model.reverse1 {
        let mut f_prev = v;
        let mut f_curr = i;
        for t in 1..model.t_steps {
            let transform = step_transform_build(tape, model, f_curr, t, store)?;
            let f_next = ops::add(tape, f_prev, transform)?;
            f_prev = f_curr;
            f_curr = f_next;
        }
        return Ok(ChainNodes {
            f_last: f_curr,
            f_prev,
        });
    }

    let endpoints = chain_forward(tape.value(v)?, tape.value(i)?, model, store)?;
    let channels = endpoints.f_last.dims4()?.1;
    let packed = tensor::concat_ch(&endpoints.f_last, &endpoints.f_prev)?;
    let model_for_vjp = model.clone();
    let node = tape.record("fusion_chain", &[v, i], packed, None, |id| {
        Some(Box::new(move |ctx, cot| {
            chain_vjp(ctx, id, v, i, &model_for_vjp, cot)
        }))
    })?;
    let f_last = ops::slice_ch(tape, node, 0, channels)?;
    let f_prev = ops::slice_ch(tape, node, channels, 2 * channels)?;
    Ok(ChainNodes { f_last, f_prev })
}

// ── Backward by reconstruction ──────────────────────────────────────────

/// Walks the chain backwards from the endpoints: reconstructs each earlier
/// state by the inverse recursion, replays its transform on a scratch tape,
/// and pulls the endpoint cotangents through. Returns the reconstructed
/// sources and their cotangents; parameter gradients accumulate in `grads`.
#[allow(clippy::too_many_arguments)]
fn reverse_walk_into<T: Scalar>(
    f_last: &Tensor<T>,
    f_prev: &Tensor<T>,
    c_last: &Tensor<T>,
    c_prev: &Tensor<T>,
    model: &FusionModel,
    store: &ParamStore<T>,
    meter: MeterHandle,
    grads: &mut Gradients<T>,
) -> Result<((Tensor<T>, Tensor<T>), (Tensor<T>, Tensor<T>))> {
    let mut f_next = f_last.clone();
    let mut f_curr = f_prev.clone();
    let mut c_next = c_last.clone();
    let mut c_curr = c_prev.clone();
    for t in (1..model.t_steps).rev() {
        let mut local = Tape::with_meter(meter.clone());
        let fc = local.leaf_input("f_t", f_curr.clone())?;
        let out = step_transform_build(&mut local, model, fc, t, store)?;
        let transform = local.value(out)?.clone();

        let f_old = tensor::sub(&f_next, &transform)?;
        if !f_old.as_slice().iter().all(|x| x.as_f64().is_finite()) {
            return Err(Error::Inversion(format!(
                "chain reconstruction diverged at step {t} (non-finite state)"
            )));
        }

        // f_{t+1} = f_{t−1} + F_t(f_t): identity path hands c_{t+1} to
        // f_{t−1}; the transform path adds its pullback onto c_t.
        let watched = backward_into(&mut local, out, c_next.clone(), store, grads)?;
        let pullback = match watched.get(&fc) {
            Some(g) => g.clone(),
            None => Tensor::zeros(f_curr.shape()),
        };
        let c_t_updated = tensor::add(&c_curr, &pullback)?;

        f_next = f_curr;
        f_curr = f_old;
        c_curr = c_next;
        c_next = c_t_updated;

        // Naming after the shift: (f_next, f_curr) = (f_t, f_{t−1}) and
        // (c_next, c_curr) = (c_t, c_{t−1}).
    }
    Ok(((f_curr, f_next), (c_curr, c_next)))
}

fn chain_vjp<T: Scalar>(
    ctx: &mut BackCtx<'_, T>,
    self_id: NodeId,
    v_id: NodeId,
    i_id: NodeId,
    model: &FusionModel,
    cot: &Tensor<T>,
) -> Result<Vec<(NodeId, Tensor<T>)>> {
    let packed = ctx.value(self_id)?.clone();
    let doubled = packed.dims4()?.1;
    let channels = doubled / 2;
    let f_last = tensor::slice_ch(&packed, 0, channels)?;
    let f_prev = tensor::slice_ch(&packed, channels, doubled)?;
    let c_last = tensor::slice_ch(cot, 0, channels)?;
    let c_prev = tensor::slice_ch(cot, channels, doubled)?;

    let meter = ctx.meter.clone();
    let ((f0, f1), (c_v, c_i)) = reverse_walk_into(
        &f_last, &f_prev, &c_last, &c_prev, model, ctx.store, meter, ctx.grads,
    )?;

    // The reconstruction must land back on the retained source images.
    let tol = chain_tolerance(T::DTYPE);
    let dv = f0.max_abs_diff(ctx.value(v_id)?)?;
    let di = f1.max_abs_diff(ctx.value(i_id)?)?;
    if dv.max(di) > tol {
        return Err(Error::Inversion(format!(
            "chain reconstruction drifted {:.3e} from the retained sources (tolerance {tol:.1e})",
            dv.max(di)
        )));
    }
    Ok(vec![(v_id, c_v), (i_id, c_i)])
}

/// Gradients of a chain whose intermediate states were never stored,
/// produced by walking the reverse recursion. Standalone entry point; the
/// same walk runs inside the taped chain's backward rule.
pub struct ChainBackward<T: Scalar> {
    pub grads: Gradients<T>,
    /// Cotangents of `(v, i)`.
    pub source_cotangents: (Tensor<T>, Tensor<T>),
    /// Reconstructed `(f_0, f_1)` for divergence checking by the caller.
    pub reconstructed: (Tensor<T>, Tensor<T>),
}

/// Backpropagates endpoint cotangents `(c_last, c_prev)` through the whole
/// chain by state reconstruction.
#[allow(clippy::too_many_arguments)]
pub fn block_reverse_backward<T: Scalar>(
    f_last: &Tensor<T>,
    f_prev: &Tensor<T>,
    c_last: &Tensor<T>,
    c_prev: &Tensor<T>,
    model: &FusionModel,
    store: &ParamStore<T>,
    meter: MeterHandle,
) -> Result<ChainBackward<T>> {
    let mut grads = Gradients::new();
    let (reconstructed, source_cotangents) = reverse_walk_into(
        f_last, f_prev, c_last, c_prev, model, store, meter, &mut grads,
    )?;
    Ok(ChainBackward {
        grads,
        source_cotangents,
        reconstructed,
    })
}

// ── Output combination ──────────────────────────────────────────────────

/// `f = w·f_T + (1−w)·f_{T−1}` with `w = clamp(raw, 0, 1)`. Pure.
pub fn combine_w<T: Scalar>(
    f_last: &Tensor<T>,
    f_prev: &Tensor<T>,
    w_raw: T,
) -> Result<Tensor<T>> {
    if f_last.shape() != f_prev.shape() {
        return Err(shape_err!(
            "endpoint shapes differ: {:?} vs {:?}",
            f_last.shape(),
            f_prev.shape()
        ));
    }
    let w = tensor::clamp_unit(&Tensor::scalar(w_raw));
    let om = tensor::affine(&w, T::from_f64(-1.0), T::from_f64(1.0));
    let a = tensor::scale(f_last, w.as_slice()[0]);
    let b = tensor::scale(f_prev, om.as_slice()[0]);
    tensor::add(&a, &b)
}

/// Taped twin of [`combine_w`]; gradients flow to both endpoints and to the
/// raw weight (including at the clamp boundaries, so a weight sitting at
/// exactly 1 can still move).
pub fn combine_w_build<T: Scalar>(
    tape: &mut Tape<T>,
    f_last: NodeId,
    f_prev: NodeId,
    w_raw: ParamId,
    store: &ParamStore<T>,
) -> Result<NodeId> {
    let raw = tape.leaf_param(store, w_raw)?;
    let w = ops::clamp_unit(tape, raw)?;
    let om = ops::affine(tape, w, T::from_f64(-1.0), T::from_f64(1.0))?;
    let a = ops::mul_scalar(tape, f_last, w)?;
    let b = ops::mul_scalar(tape, f_prev, om)?;
    ops::add(tape, a, b)
}

// ── Training ────────────────────────────────────────────────────────────

/// What one optimization step produced.
#[derive(Debug, Clone)]
pub struct StepReport {
    pub loss: LossBreakdown,
    pub memory: MemoryReport,
    /// Effective mixing weight after the update.
    pub w: f64,
}

/// One full training step: forward chain, fused output, loss, backward
/// (by reconstruction when enabled), Adam update.
pub fn train_step<T: Scalar>(
    v: &Tensor<T>,
    i: &Tensor<T>,
    model: &FusionModel,
    store: &mut ParamStore<T>,
    opt: &mut Adam<T>,
    lr: f64,
) -> Result<StepReport> {
    let mut tape = Tape::new();
    let nv = tape.leaf_input("v", v.clone())?;
    let ni = tape.leaf_input("i", i.clone())?;
    let chain = chain_build(&mut tape, nv, ni, model, store)?;
    let fused = combine_w_build(&mut tape, chain.f_last, chain.f_prev, model.w_raw, store)?;
    let losses = loss_total_build(&mut tape, ni, nv, fused)?;
    let breakdown = losses.read(&tape)?;
    if !breakdown.total.is_finite() {
        return Err(Error::Numeric(format!(
            "training loss is not finite: ssim {}, pixel {}, gradient {}",
            breakdown.l_ssim, breakdown.l_1, breakdown.l_grad
        )));
    }
    let seed = Tensor::scalar(T::from_f64(1.0));
    let (grads, _) = crate::autograd::backward(&mut tape, losses.total, seed, store)?;
    let memory = tape.memory_report();
    opt.step(store, &grads, lr)?;
    Ok(StepReport {
        loss: breakdown,
        memory,
        w: model.w_value(store),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autograd::{backward, new_meter};

    fn random_image(shape: &[usize], seed: u64) -> Tensor<f64> {
        let mut rng = SplitMix64::new(seed);
        Tensor::from_fn(shape, |_| rng.next_f64())
    }

    fn small_model(
        t_steps: usize,
        init: InitMode,
        seed: u64,
    ) -> (ParamStore<f64>, FusionModel) {
        let mut store = ParamStore::new();
        let mut rng = SplitMix64::new(seed);
        let model = FusionModel::register(
            &mut store,
            ModelOptions {
                t_steps,
                ..ModelOptions::default()
            },
            init,
            &mut rng,
        )
        .unwrap();
        (store, model)
    }

    fn zero_params(store: &mut ParamStore<f64>, except: &str) {
        let ids: alloc::vec::Vec<_> = store.ids().collect();
        for pid in ids {
            if !store.name(pid).starts_with(except) {
                store
                    .set(pid, Tensor::zeros(store.get(pid).shape()))
                    .unwrap();
            }
        }
    }

    #[test]
    fn ddim_worked_example_matches_hand_arithmetic() {
        let x = Tensor::scalar(0.8f64);
        let eps = Tensor::scalar(0.5f64);
        let out = ddim_update(&x, &eps, 0.64, 0.81).unwrap();
        let got = out.as_slice()[0];
        assert!(
            (got - 0.7804449471770337).abs() < 1e-5,
            "diffusion update gave {got}"
        );
    }

    #[test]
    fn ddim_is_the_identity_at_unit_coefficients() {
        let x = random_image(&[1, 1, 4, 4], 1);
        let eps = random_image(&[1, 1, 4, 4], 2);
        let out = ddim_update(&x, &eps, 1.0, 1.0).unwrap();
        assert!(out.bit_eq(&x));
    }

    #[test]
    fn ddim_with_zero_noise_scales_by_the_coefficient_ratio() {
        let x = random_image(&[1, 1, 4, 4], 3);
        let eps = Tensor::zeros(&[1, 1, 4, 4]);
        let out = ddim_update(&x, &eps, 0.64, 0.81).unwrap();
        let expected = tensor::scale(&x, (0.81f64 / 0.64).sqrt());
        assert!(out.max_abs_diff(&expected).unwrap() < 1e-12);
    }

    #[test]
    fn ddim_rejects_out_of_range_coefficients() {
        let x = Tensor::scalar(0.5f64);
        let eps = Tensor::scalar(0.1f64);
        assert!(ddim_update(&x, &eps, 0.0, 0.5).is_err());
        assert!(ddim_update(&x, &eps, 0.5, 0.0).is_err());
        assert!(ddim_update(&x, &eps, 1.5, 0.5).is_err());
        assert!(ddim_update(&x, &eps, -0.2, 0.5).is_err());
    }

    #[test]
    fn schedule_initializes_linearly_and_recomputes_on_read() {
        let mut store = ParamStore::<f64>::new();
        let sched = AlphaSchedule::register(&mut store, 4).unwrap();
        assert!((sched.value(0, &store).unwrap() - 0.999).abs() < 1e-12);
        assert!((sched.value(1, &store).unwrap() - 0.9).abs() < 1e-12);
        assert!((sched.value(4, &store).unwrap() - 0.6).abs() < 1e-12);
        assert!(sched.value(5, &store).is_err());

        // Values always track the live logits.
        store
            .set(sched.logit(1).unwrap(), Tensor::scalar(0.0))
            .unwrap();
        assert!((sched.value(1, &store).unwrap() - 0.5).abs() < 1e-15);
    }

    #[test]
    fn zero_estimator_without_ddim_swaps_the_sources() {
        let (mut store, mut model) = small_model(2, InitMode::Train, 4);
        model.ddim = false;
        zero_params(&mut store, "alpha");
        let v = random_image(&[1, 1, 8, 8], 5);
        let i = random_image(&[1, 1, 8, 8], 6);
        let ep = chain_forward(&v, &i, &model, &store).unwrap();
        assert!(ep.f_last.bit_eq(&v), "f_2 = f_0 + 0 = v");
        assert!(ep.f_prev.bit_eq(&i), "f_1 = i");

        let (f0, f1) = chain_reverse(&ep.f_last, &ep.f_prev, &model, &store).unwrap();
        assert!(f0.bit_eq(&v) && f1.bit_eq(&i), "zero chain reverses bitwise");
    }

    #[test]
    fn zero_estimator_with_equal_coefficients_sums_the_sources() {
        let (mut store, model) = small_model(2, InitMode::Train, 7);
        zero_params(&mut store, "alpha");
        // Make ᾱ_1 = ᾱ_0 so the diffusion update is (numerically) the identity.
        let logit0 = model.alphas.logit(0).unwrap();
        let l0 = store.get(logit0).clone();
        store.set(model.alphas.logit(1).unwrap(), l0).unwrap();
        let v = random_image(&[1, 1, 8, 8], 8);
        let i = random_image(&[1, 1, 8, 8], 9);
        let ep = chain_forward(&v, &i, &model, &store).unwrap();
        let expected = tensor::add(&v, &i).unwrap();
        assert!(ep.f_last.max_abs_diff(&expected).unwrap() < 1e-12, "f_2 = v + i");
    }

    #[test]
    fn chain_roundtrips_in_double_precision() {
        for t_steps in [2usize, 4] {
            let (store, model) = small_model(t_steps, InitMode::FullRandom, 10);
            let v = random_image(&[1, 1, 8, 8], 11);
            let i = random_image(&[1, 1, 8, 8], 12);
            let ep = chain_forward(&v, &i, &model, &store).unwrap();
            let (f0, f1) = chain_reverse(&ep.f_last, &ep.f_prev, &model, &store).unwrap();
            assert!(f0.max_abs_diff(&v).unwrap() < 1e-10, "T={t_steps}");
            assert!(f1.max_abs_diff(&i).unwrap() < 1e-10, "T={t_steps}");
        }
    }

    #[test]
    fn endpoints_are_bitwise_identical_across_all_mode_combinations() {
        let v = random_image(&[1, 1, 8, 8], 13);
        let i = random_image(&[1, 1, 8, 8], 14);
        let mut reference: Option<(Tensor<f64>, Tensor<f64>)> = None;
        for reverse1 in [false, true] {
            for reverse2 in [false, true] {
                let (store, mut model) = small_model(3, InitMode::FullRandom, 15);
                model.reverse1 = reverse1;
                model.reverse2 = reverse2;
                let mut tape = Tape::new();
                let nv = tape.leaf_input("v", v.clone()).unwrap();
                let ni = tape.leaf_input("i", i.clone()).unwrap();
                let nodes = chain_build(&mut tape, nv, ni, &model, &store).unwrap();
                let last = tape.value(nodes.f_last).unwrap().clone();
                let prev = tape.value(nodes.f_prev).unwrap().clone();
                match &reference {
                    None => reference = Some((last, prev)),
                    Some((rl, rp)) => {
                        assert!(
                            last.bit_eq(rl) && prev.bit_eq(rp),
                            "endpoints differ at reverse1={reverse1} reverse2={reverse2}"
                        );
                    }
                }
            }
        }
    }

    #[test]
    fn reconstructing_backward_matches_storeall_gradients() {
        let v = random_image(&[1, 1, 8, 8], 16);
        let i = random_image(&[1, 1, 8, 8], 17);
        let run = |reverse1: bool, reverse2: bool| {
            let (mut store, mut model) = small_model(2, InitMode::FullRandom, 18);
            model.reverse1 = reverse1;
            model.reverse2 = reverse2;
            // A mixing weight strictly inside (0,1) keeps both endpoints
            // in play.
            store.set(model.w_raw, Tensor::scalar(0.6)).unwrap();
            let mut tape = Tape::new();
            let nv = tape.leaf_input("v", v.clone()).unwrap();
            let ni = tape.leaf_input("i", i.clone()).unwrap();
            let nodes = chain_build(&mut tape, nv, ni, &model, &store).unwrap();
            let fused =
                combine_w_build(&mut tape, nodes.f_last, nodes.f_prev, model.w_raw, &store)
                    .unwrap();
            let root = crate::autograd::ops::mean_all(&mut tape, fused).unwrap();
            let (grads, inputs) =
                backward(&mut tape, root, Tensor::scalar(1.0), &store).unwrap();
            (grads, inputs[&nv].clone(), inputs[&ni].clone(), store)
        };
        let (g_ref, gv_ref, gi_ref, store) = run(false, false);
        for (reverse1, reverse2) in [(true, false), (false, true), (true, true)] {
            let (g, gv, gi, _) = run(reverse1, reverse2);
            let mut scale = 0.0f64;
            let max_abs = |t: &Tensor<f64>| {
                t.as_slice().iter().fold(0.0f64, |m, x| m.max(x.abs()))
            };
            scale = scale.max(max_abs(&gv_ref)).max(max_abs(&gi_ref));
            for (_, g) in g_ref.iter() {
                scale = scale.max(max_abs(g));
            }
            let mut worst = gv.max_abs_diff(&gv_ref).unwrap();
            worst = worst.max(gi.max_abs_diff(&gi_ref).unwrap());
            for pid in store.ids() {
                if let (Some(a), Some(b)) = (g_ref.get(pid), g.get(pid)) {
                    worst = worst.max(a.max_abs_diff(b).unwrap());
                }
            }
            assert!(
                worst / scale < 1e-10,
                "reverse1={reverse1} reverse2={reverse2}: relative deviation {:.3e}",
                worst / scale
            );
        }
    }

    #[test]
    fn w_gradient_stays_nonzero_at_the_clamp_boundary() {
        // w starts exactly at 1 (clamp boundary); its gradient must still be
        // nonzero on the first step whenever the endpoints differ.
        let (mut store, model) = small_model(2, InitMode::FullRandom, 19);
        let v = random_image(&[1, 1, 8, 8], 20);
        let i = random_image(&[1, 1, 8, 8], 21);
        let mut opt = Adam::new();
        let report = train_step(&v, &i, &model, &mut store, &mut opt, 0.0).unwrap();
        assert!(report.loss.total.is_finite() && report.loss.total > 0.0);
        assert_eq!(report.w, 1.0, "weight untouched at zero learning rate");

        // Re-run the graph manually to inspect the w gradient.
        let mut tape = Tape::new();
        let nv = tape.leaf_input("v", v.clone()).unwrap();
        let ni = tape.leaf_input("i", i).unwrap();
        let nodes = chain_build(&mut tape, nv, ni, &model, &store).unwrap();
        let fused =
            combine_w_build(&mut tape, nodes.f_last, nodes.f_prev, model.w_raw, &store).unwrap();
        let losses = loss_total_build(&mut tape, ni, nv, fused).unwrap();
        let (grads, _) =
            backward(&mut tape, losses.total, Tensor::scalar(1.0), &store).unwrap();
        let gw = grads.get(model.w_raw).unwrap().as_slice()[0];
        assert!(gw != 0.0, "w gradient vanished at the clamp boundary");
    }

    #[test]
    fn zero_endpoint_cotangents_produce_zero_gradients() {
        let (store, model) = small_model(3, InitMode::FullRandom, 22);
        let v = random_image(&[1, 1, 8, 8], 23);
        let i = random_image(&[1, 1, 8, 8], 24);
        let ep = chain_forward(&v, &i, &model, &store).unwrap();
        let zeros = Tensor::zeros(ep.f_last.shape());
        let out = block_reverse_backward(
            &ep.f_last, &ep.f_prev, &zeros, &zeros, &model, &store, new_meter(),
        )
        .unwrap();
        for (_, g) in out.grads.iter() {
            assert!(g.as_slice().iter().all(|&x| x == 0.0));
        }
        assert!(out.reconstructed.0.max_abs_diff(&v).unwrap() < 1e-10);
        assert!(out.reconstructed.1.max_abs_diff(&i).unwrap() < 1e-10);
    }

    #[test]
    fn combine_w_examples_hold() {
        let a = random_image(&[1, 1, 4, 4], 25);
        let b = random_image(&[1, 1, 4, 4], 26);
        let at_one = combine_w(&a, &b, 1.0).unwrap();
        assert_eq!(at_one.max_abs_diff(&a).unwrap(), 0.0, "w = 1 passes f_T through");

        let ones = Tensor::from_fn(&[1, 1, 2, 2], |_| 1.0f64);
        let zeros = Tensor::zeros(&[1, 1, 2, 2]);
        let mixed = combine_w(&ones, &zeros, 0.9567).unwrap();
        assert!((mixed.as_slice()[0] - 0.9567).abs() < 1e-15);

        // Raw weights beyond the unit interval saturate.
        let clamped = combine_w(&ones, &zeros, 1.7).unwrap();
        assert_eq!(clamped.as_slice()[0], 1.0);
    }

    #[test]
    fn combine_w_gradient_is_the_endpoint_difference() {
        let mut store = ParamStore::<f64>::new();
        let w = store.register("fusion.w", Tensor::scalar(0.8)).unwrap();
        let a = random_image(&[1, 1, 4, 4], 27);
        let b = random_image(&[1, 1, 4, 4], 28);
        let mut tape = Tape::new();
        let na = tape.leaf_input("a", a.clone()).unwrap();
        let nb = tape.leaf_input("b", b.clone()).unwrap();
        let fused = combine_w_build(&mut tape, na, nb, w, &store).unwrap();
        let root = crate::autograd::ops::sum_all(&mut tape, fused).unwrap();
        let (grads, _) = backward(&mut tape, root, Tensor::scalar(1.0), &store).unwrap();
        let gw = grads.get(w).unwrap().as_slice()[0];
        let expected = tensor::sum_all(&tensor::sub(&a, &b).unwrap()).as_f64();
        assert!(
            (gw - expected).abs() < 1e-12,
            "d(sum f)/d w = Σ(f_T − f_(T−1)): {gw} vs {expected}"
        );
    }

    #[test]
    fn training_with_zero_learning_rate_keeps_parameters_bitwise() {
        let (mut store, model) = small_model(2, InitMode::Train, 29);
        let ids: alloc::vec::Vec<_> = store.ids().collect();
        let before: alloc::vec::Vec<Tensor<f64>> =
            ids.iter().map(|&pid| store.get(pid).clone()).collect();
        let v = random_image(&[1, 1, 8, 8], 30);
        let i = random_image(&[1, 1, 8, 8], 31);
        let mut opt = Adam::new();
        train_step(&v, &i, &model, &mut store, &mut opt, 0.0).unwrap();
        for (&pid, old) in ids.iter().zip(&before) {
            assert!(
                store.get(pid).bit_eq(old),
                "parameter {} changed at zero learning rate",
                store.name(pid)
            );
        }
    }

    #[test]
    fn recomputed_chain_memory_is_flat_in_chain_length() {
        let mut peaks = alloc::vec::Vec::new();
        for t_steps in [2usize, 4, 6] {
            let (mut store, model) = small_model(t_steps, InitMode::FullRandom, 32);
            let v = random_image(&[1, 1, 8, 8], 33);
            let i = random_image(&[1, 1, 8, 8], 34);
            let mut opt = Adam::new();
            let report = train_step(&v, &i, &model, &mut store, &mut opt, 1e-4).unwrap();
            peaks.push(report.memory.peak_bytes);
        }
        let lo = *peaks.iter().min().unwrap() as f64;
        let hi = *peaks.iter().max().unwrap() as f64;
        assert!(
            hi / lo < 1.05,
            "recomputed-chain peaks vary more than 5%: {peaks:?}"
        );
    }

    #[test]
    fn storeall_chain_memory_grows_with_chain_length() {
        let mut peaks = alloc::vec::Vec::new();
        for t_steps in [2usize, 4] {
            let (mut store, mut model) = small_model(t_steps, InitMode::FullRandom, 35);
            model.reverse1 = false;
            model.reverse2 = false;
            let v = random_image(&[1, 1, 8, 8], 36);
            let i = random_image(&[1, 1, 8, 8], 37);
            let mut opt = Adam::new();
            let report = train_step(&v, &i, &model, &mut store, &mut opt, 1e-4).unwrap();
            peaks.push(report.memory.peak_bytes);
        }
        assert!(
            peaks[1] as f64 > peaks[0] as f64 * 1.5,
            "stored-state peak should grow with T: {peaks:?}"
        );
    }
}
