//! Core model and metrics for structure-conditioned antibody CDR design.
//!
//! The crate is `no_std` (with `alloc`): everything here is a pure function of
//! its inputs. File formats, the embedding cache, checkpoints and the command
//! line live in the companion `evostruct` crate.
//!
//! Pipeline, in order of data flow:
//!
//! - [`structure`]: the [`structure::Complex`] data model, contact sets, CDR masking.
//! - [`graph`]: heterogeneous residue graph with eight typed edge sets and
//!   rotation-invariant edge features.
//! - [`plm`]: pluggable frozen protein-language-model backend (a seeded toy model here).
//! - [`encoder`]: relation-aware E(3)-equivariant message passing.
//! - [`adapter`]: cross-attention adapter and the sequence head.
//! - [`losses`] and [`training`]: five-term objective, R-Drop, phased unfreezing.
//! - [`metrics`]: recovery, perplexity, vocabulary collapse and interface diagnostics.

#![no_std]

extern crate alloc;

#[cfg(test)]
extern crate std;

pub mod aa;
pub mod adapter;
pub mod autograd;
pub mod config;
pub mod encoder;
pub mod geometry;
pub mod gradcheck;
pub mod graph;
pub mod losses;
pub mod metrics;
pub mod model;
pub mod nn;
pub mod optim;
pub mod params;
pub mod plm;
pub mod rng;
pub mod structure;
pub mod synth;
pub mod tensor;
pub mod training;

pub use autograd::{Tape, Var};
pub use params::{ParamId, ParamStore};
pub use rng::RngStream;
pub use tensor::Mat;
