//! Adaptively distilled ControlNet at desk scale.
//!
//! A dual-branch conditional diffusion model: a mask-only student and a
//! mask+image teacher share one encoder and one forward process, and the
//! student is pulled toward the teacher's noise prediction with a
//! lesion-weighted, stop-gradient distillation term. Only the student is used
//! for sampling.

pub mod checkpoint;
pub mod data;
pub mod distill;
pub mod error;
pub mod eval;
pub mod experiment;
pub mod mask;
pub mod model;
pub mod nn;
pub mod optim;
pub mod pipeline;
pub mod plot;
pub mod sampler;
pub mod schedule;
pub mod stats;
pub mod trainer;

pub use error::{Error, Result};
