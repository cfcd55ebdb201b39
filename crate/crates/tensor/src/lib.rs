//! Minimal dense tensor library with a reverse-mode gradient tape.
//!
//! Values are plain row-major [`Tensor`]s. Differentiable computations are
//! expressed as calls on a [`Tape`], which records each result together
//! with the rule needed to push gradients back to its inputs. [`AdamState`]
//! consumes the gradients accumulated on parameter tensors.

mod adam;
mod element;
mod error;
mod tape;
mod tensor;

pub use adam::AdamState;
pub use element::Element;
pub use error::{Result, TensorError};
pub use tape::{attention_forward, AttnLayout, Tape, Var};
pub use tensor::Tensor;
