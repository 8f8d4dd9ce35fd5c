pub mod agent;
pub mod cscc;
pub mod dit;
pub mod error;
pub mod layout;
pub mod llm;
pub mod metrics;
pub mod params;
pub mod regional;
pub mod rope;
pub mod tensor;
pub mod text;

pub use error::{Error, Result};
