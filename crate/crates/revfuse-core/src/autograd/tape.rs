//! The recording tape and the reverse walk.

use super::meter::{new_meter, MemoryReport, MeterHandle};
use crate::error::{Error, Result};
use crate::params::{ParamId, ParamStore};
use crate::scalar::Scalar;
use crate::tensor::{add, Tensor};
use alloc::boxed::Box;
use alloc::collections::BTreeMap;
use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

/// Index of a node on its tape.
pub type NodeId = usize;

/// Gradient contributions a VJP hands back to its input nodes.
pub type VjpResult<T> = Result<Vec<(NodeId, Tensor<T>)>>;

/// VJP closure: receives the backward context and the node's accumulated
/// output cotangent. Closures must not capture tensors — they read inputs
/// (still retained at that point of the reverse walk) and their own output
/// through [`BackCtx::value`], or reconstruct freed values by inversion.
pub type VjpFn<T> = Box<dyn FnOnce(&mut BackCtx<'_, T>, &Tensor<T>) -> VjpResult<T>>;

/// What a leaf node stands for.
#[derive(Debug, Clone, Copy)]
pub enum LeafRole {
    /// External input; its gradient is reported by `backward`.
    Input(&'static str),
    /// Trainable parameter; its gradient lands in [`Gradients`].
    Param(ParamId),
    /// Constant; gradients flowing into it are discarded.
    Constant,
}

/// Whether intermediate activations are all retained or recomputed.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum TapeMode {
    #[default]
    StoreAll,
    Reversible,
}

struct NodeMeta {
    op: &'static str,
    inputs: Vec<NodeId>,
    leaf: Option<LeafRole>,
    bytes: usize,
}

/// Parameter gradients accumulated during one backward pass.
#[derive(Debug, Clone, Default)]
pub struct Gradients<T: Scalar> {
    params: BTreeMap<usize, Tensor<T>>,
}

impl<T: Scalar> Gradients<T> {
    pub fn new() -> Self {
        Gradients {
            params: BTreeMap::new(),
        }
    }

    /// Adds a contribution for one parameter (accumulating across calls).
    pub fn add_param(&mut self, id: ParamId, grad: Tensor<T>) -> Result<()> {
        match self.params.remove(&id.index()) {
            None => {
                self.params.insert(id.index(), grad);
            }
            Some(existing) => {
                self.params.insert(id.index(), add(&existing, &grad)?);
            }
        }
        Ok(())
    }

    pub fn get(&self, id: ParamId) -> Option<&Tensor<T>> {
        self.params.get(&id.index())
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    /// Parameters in ascending id order (deterministic).
    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &Tensor<T>)> {
        self.params.iter().map(|(k, v)| (ParamId(*k), v))
    }
}

/// Context handed to VJP closures during the reverse walk.
pub struct BackCtx<'a, T: Scalar> {
    /// Current parameter values (for replaying reversible computations).
    pub store: &'a ParamStore<T>,
    /// Destination for parameter gradients produced by nested backward runs.
    pub grads: &'a mut Gradients<T>,
    /// Shared activation meter; nested tapes must be created with it.
    pub meter: MeterHandle,
    values: &'a mut [Option<Tensor<T>>],
}

impl<'a, T: Scalar> BackCtx<'a, T> {
    /// Reads a still-retained node value.
    pub fn value(&self, id: NodeId) -> Result<&Tensor<T>> {
        self.values
            .get(id)
            .and_then(Option::as_ref)
            .ok_or_else(|| Error::Tape(format!("value of node #{id} is freed or missing")))
    }
}

/// Recorded forward pass.
pub struct Tape<T: Scalar> {
    metas: Vec<NodeMeta>,
    values: Vec<Option<Tensor<T>>>,
    vjps: Vec<Option<VjpFn<T>>>,
    meter: MeterHandle,
    consumed: bool,
    param_nodes: BTreeMap<usize, NodeId>,
    /// Advisory mode tag for reports; set by the model builder.
    pub mode: TapeMode,
}

impl<T: Scalar> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Scalar> Tape<T> {
    pub fn new() -> Self {
        Self::with_meter(new_meter())
    }

    /// A tape contributing to an existing episode meter (nested replays).
    pub fn with_meter(meter: MeterHandle) -> Self {
        Tape {
            metas: Vec::new(),
            values: Vec::new(),
            vjps: Vec::new(),
            meter,
            consumed: false,
            param_nodes: BTreeMap::new(),
            mode: TapeMode::StoreAll,
        }
    }

    pub fn meter(&self) -> MeterHandle {
        self.meter.clone()
    }

    /// Records one node. `vjp` receives the id the node will get; leaves pass
    /// a builder returning `None`.
    pub fn record(
        &mut self,
        op: &'static str,
        inputs: &[NodeId],
        value: Tensor<T>,
        leaf: Option<LeafRole>,
        vjp: impl FnOnce(NodeId) -> Option<VjpFn<T>>,
    ) -> Result<NodeId> {
        if self.consumed {
            return Err(Error::Tape(format!(
                "recording {op:?} after backward has begun"
            )));
        }
        for &i in inputs {
            if i >= self.metas.len() {
                return Err(Error::Tape(format!(
                    "{op:?} references nonexistent input node #{i}"
                )));
            }
        }
        let id = self.metas.len();
        let bytes = value.byte_size();
        self.meter.borrow_mut().add(bytes);
        self.metas.push(NodeMeta {
            op,
            inputs: inputs.to_vec(),
            leaf,
            bytes,
        });
        self.values.push(Some(value));
        self.vjps.push(vjp(id));
        Ok(id)
    }

    /// Watched external input (v or i); `backward` reports its gradient.
    pub fn leaf_input(&mut self, tag: &'static str, value: Tensor<T>) -> Result<NodeId> {
        self.record("input", &[], value, Some(LeafRole::Input(tag)), |_| None)
    }

    /// Trainable parameter leaf; repeated requests return the cached node.
    pub fn leaf_param(&mut self, store: &ParamStore<T>, id: ParamId) -> Result<NodeId> {
        if let Some(&n) = self.param_nodes.get(&id.index()) {
            return Ok(n);
        }
        let n = self.record(
            "param",
            &[],
            store.get(id).clone(),
            Some(LeafRole::Param(id)),
            |_| None,
        )?;
        self.param_nodes.insert(id.index(), n);
        Ok(n)
    }

    /// Non-differentiable constant.
    pub fn constant(&mut self, value: Tensor<T>) -> Result<NodeId> {
        self.record("const", &[], value, Some(LeafRole::Constant), |_| None)
    }

    /// Reads a node's retained value.
    pub fn value(&self, id: NodeId) -> Result<&Tensor<T>> {
        self.values
            .get(id)
            .and_then(Option::as_ref)
            .ok_or_else(|| Error::Tape(format!("value of node #{id} is freed or missing")))
    }

    pub fn node_count(&self) -> usize {
        self.metas.len()
    }

    /// Audit walk: sum of bytes of the values this tape still retains.
    pub fn retained_bytes(&self) -> usize {
        self.values
            .iter()
            .zip(&self.metas)
            .filter(|(v, _)| v.is_some())
            .map(|(_, m)| m.bytes)
            .sum()
    }

    pub fn retained_node_count(&self) -> usize {
        self.values.iter().filter(|v| v.is_some()).count()
    }

    /// Episode counters plus this tape's retained-node count.
    pub fn memory_report(&self) -> MemoryReport {
        let m = self.meter.borrow();
        MemoryReport {
            live_bytes: m.live_bytes(),
            peak_bytes: m.peak_bytes(),
            retained_node_count: self.retained_node_count(),
        }
    }

    fn free_value(&mut self, id: NodeId) {
        if let Some(v) = self.values[id].take() {
            debug_assert_eq!(v.byte_size(), self.metas[id].bytes);
            self.meter.borrow_mut().sub(self.metas[id].bytes);
        }
    }
}

fn accumulate<T: Scalar>(slot: &mut Option<Tensor<T>>, g: Tensor<T>) -> Result<()> {
    *slot = Some(match slot.take() {
        None => g,
        Some(existing) => add(&existing, &g)?,
    });
    Ok(())
}

/// Reverse walk with gradient accumulation into `grads`; returns the
/// cotangents of watched input leaves. Frees every retained activation, so
/// the episode's live byte count returns to its pre-forward baseline.
pub fn backward_into<T: Scalar>(
    tape: &mut Tape<T>,
    root: NodeId,
    seed: Tensor<T>,
    store: &ParamStore<T>,
    grads: &mut Gradients<T>,
) -> Result<BTreeMap<NodeId, Tensor<T>>> {
    if tape.consumed {
        return Err(Error::Tape("backward on a consumed tape".into()));
    }
    tape.consumed = true;
    let len = tape.metas.len();
    if root >= len {
        return Err(Error::Tape(format!("backward root #{root} does not exist")));
    }
    {
        let rv = tape.value(root)?;
        if rv.shape() != seed.shape() {
            return Err(shape_err!(
                "backward seed shape {:?} does not match root shape {:?}",
                seed.shape(),
                rv.shape()
            ));
        }
    }
    if !seed.is_finite() {
        return Err(Error::Numeric("backward seed is non-finite".into()));
    }

    // Reachability from the root through input edges.
    let mut reach = vec![false; len];
    let mut stack = vec![root];
    while let Some(id) = stack.pop() {
        if reach[id] {
            continue;
        }
        reach[id] = true;
        stack.extend_from_slice(&tape.metas[id].inputs);
    }

    let mut cots: Vec<Option<Tensor<T>>> = (0..len).map(|_| None).collect();
    cots[root] = Some(seed);
    let mut watched: BTreeMap<NodeId, Tensor<T>> = BTreeMap::new();

    for id in (0..=root).rev() {
        if !reach[id] {
            continue;
        }
        let Some(cot) = cots[id].take() else {
            // Reachable, but no gradient arrived (e.g. a gated path).
            tape.free_value(id);
            continue;
        };
        match tape.metas[id].leaf {
            Some(LeafRole::Param(pid)) => grads.add_param(pid, cot)?,
            Some(LeafRole::Input(_)) => {
                watched.insert(id, cot);
            }
            Some(LeafRole::Constant) => {}
            None => {
                let vjp = tape.vjps[id].take().ok_or_else(|| {
                    Error::Tape(format!(
                        "node #{id} ({}) has no VJP but is not a leaf",
                        tape.metas[id].op
                    ))
                })?;
                let op = tape.metas[id].op;
                let contribs = {
                    let mut ctx = BackCtx {
                        store,
                        grads,
                        meter: tape.meter.clone(),
                        values: &mut tape.values,
                    };
                    vjp(&mut ctx, &cot)?
                };
                for (src, g) in contribs {
                    if src >= len {
                        return Err(Error::Tape(format!(
                            "VJP of node #{id} ({op}) targets nonexistent node #{src}"
                        )));
                    }
                    if !g.is_finite() {
                        return Err(Error::Numeric(format!(
                            "non-finite gradient produced by node #{id} ({op})"
                        )));
                    }
                    accumulate(&mut cots[src], g)?;
                }
            }
        }
        tape.free_value(id);
    }

    // Nodes above the root or unreachable from it are released as well.
    for id in 0..len {
        tape.free_value(id);
    }
    Ok(watched)
}

/// One-shot backward: returns parameter gradients and watched-input
/// cotangents. The tape is consumed.
pub fn backward<T: Scalar>(
    tape: &mut Tape<T>,
    root: NodeId,
    seed: Tensor<T>,
    store: &ParamStore<T>,
) -> Result<(Gradients<T>, BTreeMap<NodeId, Tensor<T>>)> {
    let mut grads = Gradients::new();
    let watched = backward_into(tape, root, seed, store, &mut grads)?;
    Ok((grads, watched))
}
