//! LoRA provenance detection for decoder-only transformers.
//!
//! Given a base model and a candidate, decide whether the candidate's attention
//! value/output projections differ from the base by a low-rank update, and
//! recover that rank, even after the candidate has been reparameterized by
//! function-preserving permutations and scalings.
//!
//! The pipeline probes both models with single tokens, reconstructs the
//! candidate's post-attention intermediate states by inverting the base MLP,
//! and reads the rank off the spectral gap of the stacked differences.

pub mod error;
pub mod lora;
pub mod model;
pub mod numerics;
pub mod obfuscate;
pub mod reconstruct;
pub mod tracer;
pub mod weights_io;

pub use error::{Error, Result};
