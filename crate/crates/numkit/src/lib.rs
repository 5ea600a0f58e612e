// SPDX-License-Identifier: MIT OR Apache-2.0

//! Minimal dense-tensor arithmetic for the steering stack.
//!
//! Everything numeric downstream is built from three pieces:
//!
//! - [`Tensor`]: an immutable row-major `f32` array with a shape.
//! - [`Graph`]: a tape that records differentiable ops on [`Var`] handles
//!   and replays them in reverse to produce gradients.
//! - [`AdamState`] and [`LrSchedule`]: the optimizer and the linear-warmup /
//!   cosine-decay learning-rate schedule used for every training loop.

mod error;
mod graph;
pub mod kernels;
mod optim;
mod schedule;
mod tensor;

pub use error::{NumError, Result};
pub use graph::{Gradients, Graph, Var};
pub use optim::{adam_step, AdamState, ADAM_BETA1, ADAM_BETA2, ADAM_EPS};
pub use schedule::LrSchedule;
pub use tensor::Tensor;
