//! Library half of the command-line driver: run configuration, checkpoint
//! format, PGM dataset IO, and the four command implementations. The
//! `revfuse` binary is a thin argument-parsing shell over this crate.

pub mod checkpoint;
pub mod commands;
pub mod config;
pub mod dataset;
pub mod error;
