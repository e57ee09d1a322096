//! Object-incremental defect inspection: a gated reconstruction transformer
//! trained across tasks with a latent-compression loss and a channel-projected
//! update rule that protects directions used by earlier objects.

pub mod cli;
pub mod config;
pub mod data_synth;
pub mod error;
pub mod eval;
pub mod linalg;
pub mod losses;
pub mod model;
pub mod optimizer;
pub mod persist;
pub mod seed;
pub mod tape;
pub mod trainer;

pub use error::{Error, Result};
