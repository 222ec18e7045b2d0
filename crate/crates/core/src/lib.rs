//! Quantization-aware deployment of latent generative models with
//! swappable low-rank adapters.
//!
//! The pipeline runs bottom-up: [`tensor`] kernels, the [`graph`] IR and
//! interpreter, [`quant`] calibration and simulation, [`sensitivity`]
//! scoring, [`distill`] adapter fine-tuning, [`compile`] to a frozen
//! artifact, and the [`runtime`] that loads it and hot-swaps adapters.

mod codec;
pub mod compile;
pub mod distill;
pub mod error;
pub mod graph;
pub mod model_def;
pub mod par;
pub mod quant;
pub mod rng;
pub mod runtime;
pub mod sensitivity;
pub mod store;
pub mod tensor;

pub use error::{Error, GraphFault, Result};
