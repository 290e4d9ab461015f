pub mod data;
pub mod decoder;
pub mod encoder;
pub mod error;
pub mod exec;
pub mod inference;
pub mod metrics;
pub mod model;
pub mod nn;
pub mod tensor;
pub mod training;

pub use error::{Error, ErrorKind, Result};
pub use exec::Execution;
pub use model::{Model, ModelConfig};
