//! Exact byte accounting of retained activations.
//!
//! One meter is shared by a training episode's main tape and every nested
//! tape spawned during reversible backward passes, so `peak_bytes` reflects
//! the true high-water mark of retained activation memory for the whole
//! episode. Counters track logical payload bytes (elements × element size),
//! deliberately independent of allocator behaviour.

use alloc::rc::Rc;
use core::cell::RefCell;

/// Live/peak counters for one training episode.
#[derive(Debug, Default, Clone)]
pub struct Meter {
    live: usize,
    peak: usize,
}

impl Meter {
    pub fn add(&mut self, bytes: usize) {
        self.live += bytes;
        if self.live > self.peak {
            self.peak = self.live;
        }
    }

    pub fn sub(&mut self, bytes: usize) {
        debug_assert!(self.live >= bytes, "meter underflow");
        self.live = self.live.saturating_sub(bytes);
    }

    pub fn live_bytes(&self) -> usize {
        self.live
    }

    pub fn peak_bytes(&self) -> usize {
        self.peak
    }
}

/// Shared handle: tapes are single-threaded, so `Rc<RefCell<_>>` suffices.
pub type MeterHandle = Rc<RefCell<Meter>>;

pub fn new_meter() -> MeterHandle {
    Rc::new(RefCell::new(Meter::default()))
}

/// Snapshot of the accounting state, serialized by the CLI per step.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct MemoryReport {
    /// Bytes of activations currently retained.
    pub live_bytes: usize,
    /// Episode high-water mark of retained bytes.
    pub peak_bytes: usize,
    /// Number of tape nodes whose activation is still retained.
    pub retained_node_count: usize,
}
