//! Model, data and environment components of the APE pipeline.

pub mod agent;
pub mod checkpoint;
pub mod encoder;
pub mod env;
pub mod error;
pub mod moco;
pub mod nets;
pub mod probe;
pub mod replay;
pub mod rl;
pub mod rng;
pub mod scheduler;
pub mod vision;
pub mod world_model;

pub use error::{Error, Result};
