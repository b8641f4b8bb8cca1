//! Post-training quantization of diffusion noise-estimation networks, with
//! per-timestep correction of the quantization error.
//!
//! The crate is organized bottom-up:
//!
//! * [`tensors`]: dense f64 tensors and a counter-based RNG.
//! * [`diffusion`]: noise schedules, forward noising, reverse-step algebra and timestep grids.
//! * [`models`]: small MLP / conv noise estimators with training.
//! * [`quant`]: uniform fake quantization of weights and activations.
//! * [`correction`]: per-timestep noise-estimation scaling and input-bias tables.
//! * [`samplers`]: DDIM and DPM-Solver++(2S) samplers that consume those tables.
//! * [`metrics`]: trace diagnostics and distribution distances.
//! * [`harness`]: config files, checkpoints, pipelines and the CLI.

pub mod correction;
pub mod diffusion;
pub mod error;
pub mod harness;
pub mod metrics;
pub mod models;
pub mod quant;
pub mod samplers;
pub mod tensors;

pub use error::{Error, Result};
