//! Compact multi-task image enhancement network with structural
//! re-parameterization.

pub mod error;
pub mod io;
pub mod loss;
pub mod metrics;
pub mod network;
pub mod reparam;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
