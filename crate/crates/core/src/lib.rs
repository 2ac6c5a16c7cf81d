pub mod diffusion;
pub mod error;
pub mod experiments;
pub mod mmse;
pub mod nets;
pub mod physics;
pub mod pipeline;
pub mod schedule;
pub mod stats;
pub mod tensor;

pub use error::{Error, Result};
pub use tensor::{Graph, ParamSet, Rng, Tensor, Var};
