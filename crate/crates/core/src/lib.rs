pub mod error;
pub mod model;
pub mod numerics;
pub mod peft;
pub mod pipeline;
pub mod tasks;

pub use error::{Error, Result};
pub use model::{ModelConfig, ModelWeights};
pub use numerics::{Float, Tensor};
pub use peft::{Adapter, AdapterHyper, AdapterKind};
