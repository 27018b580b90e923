//! Gradients, optimization and toy-scale training.

pub mod data;
pub mod gradcheck;
pub mod mask;
pub mod optim;
pub mod tape;
pub mod toy;
