//! 6-DoF pose estimation for rendezvous image sequences.
//!
//! The crate contains a complete, CPU-trainable pipeline: a reverse-mode
//! differentiable core ([`diffcore`]), rigid-body geometry and attitude
//! representations ([`geometry`]), a procedural multimodal scene generator
//! ([`scenegen`]), dataset storage and batching ([`dataset`]), the network
//! itself ([`backbone`], [`recurrent`], [`heads`], [`model`]), a three-stage
//! trainer ([`trainer`]) and sequence-level evaluation ([`eval`]).
//!
//! Start with the runnable examples (`cargo run --release --example ...`):
//! each one drives a single capability end to end. The `rvpose` binary wraps
//! the same library calls behind `gen` / `train` / `eval` / `gradcheck` /
//! `ablate` / `report` subcommands.

pub mod backbone;
pub mod cli;
pub mod dataset;
pub mod diffcore;
pub mod eval;
pub mod geometry;
pub mod gradsuite;
pub mod heads;
pub mod model;
pub mod recurrent;
pub mod scenegen;
pub mod trainer;
