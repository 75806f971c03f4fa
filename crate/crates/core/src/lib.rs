//! Class-incremental learning for temporal models with time-channel
//! importance-weighted feature distillation.
//!
//! The crate covers the full incremental protocol: task streams and a
//! synthetic subaction dataset ([`task_data`]), a temporal-shift backbone with
//! a proxy-based classifier ([`model`]), gradient-sensitivity importance maps
//! ([`importance`]), the distillation and orthogonality objectives
//! ([`losses`]), herding exemplar memory ([`memory`]), the training loop
//! ([`trainer`]) and dual-protocol evaluation ([`evaluation`]).

pub mod archive;
pub mod error;
pub mod evaluation;
pub mod importance;
pub mod losses;
pub mod memory;
pub mod model;
pub mod optim;
pub mod parallel;
pub mod rng;
pub mod task_data;
pub mod trainer;

pub use error::{Error, Result};
