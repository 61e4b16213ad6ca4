//! Core of a reversible image-fusion pipeline.
//!
//! The crate provides, bottom to top:
//!
//! - dense NCHW tensors with deterministic numeric kernels ([`tensor`]),
//! - a reverse-mode autodiff tape with exact byte accounting of retained
//!   activations ([`autograd`]),
//! - exactly invertible two-stream coupling blocks and a small two-level
//!   noise-estimator network built from them ([`revnet`]),
//! - a non-Markovian fusion chain whose states can be reconstructed by
//!   inversion instead of being stored, so backpropagation runs in
//!   near-constant activation memory ([`chain`]),
//! - the structural/pixel/gradient training losses ([`objective`]),
//! - the fusion quality metric suite ([`metrics`]),
//! - PGM codecs, synthetic pair generation and patch sampling
//!   ([`pgm`], [`synth`]),
//! - a seeded, platform-independent PRNG ([`rng`]) and Adam ([`optim`]).
//!
//! The crate is `no_std`-compatible (requires `alloc`); everything that needs
//! an operating system (files, CLI, wall-clock timing) lives in the companion
//! CLI crate.

#![cfg_attr(not(test), no_std)]
#![deny(unsafe_code)]

extern crate alloc;

#[macro_use]
pub mod error;

pub mod autograd;
pub mod chain;
pub mod metrics;
pub mod objective;
pub mod optim;
pub mod params;
pub mod pgm;
pub mod revnet;
pub mod rng;
pub mod scalar;
pub mod synth;
pub mod tensor;

pub use error::{Error, Result};
pub use scalar::{Dtype, Scalar};
pub use tensor::Tensor;
