pub mod baselines;
pub mod dgp;
pub mod error;
pub mod eval;
pub mod ingest;
pub mod layers;
pub mod model;
pub mod tensor;
pub mod training;

pub use error::{MsctError, Result};
