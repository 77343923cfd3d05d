//! Semi-supervised vision-language pre-training on a small, dependency-light
//! numeric core: masked image modeling and label-guided contrastive learning
//! joined by a bridge transformer and masked feature distillation.

pub mod checkpoint;
pub mod cli;
pub mod data;
pub mod error;
pub mod evalkit;
pub mod gradcheck;
pub mod graph;
pub mod losses;
pub mod model;
pub mod params;
pub mod patcher;
pub mod rng;
pub mod tensor;
pub mod trainer;
pub mod verify;

pub use error::{Error, Result};
pub use graph::{Bound, Gradients, Graph, Var};
pub use params::ParamSet;
pub use rng::Rng;
pub use tensor::{Real, Tensor};
