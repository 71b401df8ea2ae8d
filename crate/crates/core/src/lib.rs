//! Recurrent stacks for spatiotemporal prediction, with a multi-scale
//! (mirror pyramid) variant, a reverse-mode tape, cost models, data
//! generation, metrics, and training.

pub mod cells;
pub mod cost;
pub mod data;
pub mod error;
pub mod kernels;
pub mod metrics;
pub mod optim;
pub mod stack;
pub mod tape;
pub mod tensor;
pub mod training;

pub use error::{Error, Result};
pub use tape::{Gradients, Tape, Var};
pub use tensor::{Shape, Tensor};
