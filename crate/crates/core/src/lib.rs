//! Few-step solution-flow training stack.
//!
//! The crate is organised bottom-up:
//!
//! * [`tensor`]: dense 64-bit tensors and a reverse-mode tape.
//! * [`attention`]: gated local-global attention and its softmax reference.
//! * [`backbone`]: encoder / droppable middle / decoder network realising the
//!   bi-time solution map `f(x, t, s, c) = x + (s - t) F(x, t, s, c)`.
//! * [`objectives`]: flow matching, solution consistency, mean-velocity
//!   additivity, path-drop guidance and the batch-split training step.
//! * [`sampler`]: few-step inference with re-noising between jumps.
//! * [`theory`]: closed-form flows and exact checks of the semigroup identities.
//! * [`datasets`]: synthetic data and the MMD metric.
//! * [`flops`]: multiply-add instrumentation and closed-form cost models.
//! * [`gradcheck`]: finite-difference verification of every primitive.

pub mod attention;
pub mod backbone;
pub mod datasets;
mod error;
pub mod flops;
pub mod gradcheck;
pub mod objectives;
pub mod params;
pub mod rng;
pub mod sampler;
pub mod tensor;
pub mod theory;

pub use error::{Error, Result};
pub use tensor::{Tape, Tensor, Var};
