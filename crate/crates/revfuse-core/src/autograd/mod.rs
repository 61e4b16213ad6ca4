//! Reverse-mode automatic differentiation over the tensor kernels.
//!
//! A [`Tape`] records every operation of a forward pass together with its
//! output value (the "retained activation") and a VJP closure. [`backward`]
//! walks the tape in reverse, freeing each activation the moment its VJP has
//! consumed it, and accounts every retained byte in a shared [`Meter`] so the
//! memory behaviour of reversible training is measurable exactly rather than
//! through allocator noise.
//!
//! Reversible computations enter the tape as *compact* nodes: a single node
//! retains only the final output of a block span or of the whole fusion
//! chain, and its VJP reconstructs the freed inputs by algebraic inversion,
//! replays the local computation on a nested tape (sharing the same meter),
//! and feeds the resulting gradients back into the main pass. Those
//! constructors live in `revnet` and `chain`; this module provides the
//! engine they plug into.

mod gradcheck;
mod meter;
pub mod ops;
mod tape;

pub use gradcheck::{grad_check, grad_check_targets, GradCheckReport};
pub use meter::{new_meter, MemoryReport, Meter, MeterHandle};
pub use tape::{
    backward, backward_into, BackCtx, Gradients, LeafRole, NodeId, Tape, TapeMode, VjpFn,
    VjpResult,
};
