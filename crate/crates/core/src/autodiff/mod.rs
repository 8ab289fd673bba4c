//! Reverse-mode automatic differentiation over dense `f64` tensors.
//!
//! Values are recorded on a [`Tape`]; every operation returns a [`Var`] handle
//! and [`Tape::backward`] accumulates gradients into every tracked ancestor of
//! a scalar loss. Two operations have gradient behavior beyond the chain rule
//! of their forward function:
//!
//! * [`Tape::reparam_sample`] takes its noise as a plain [`Tensor`], so the
//!   gradient reaches the mean and scale but never the noise source.
//! * [`Tape::grl`] is the identity forward and multiplies the incoming
//!   gradient by `-lambda` backward.
//!
//! ```
//! use xmreg::autodiff::{Tape, Tensor};
//!
//! let mut tape = Tape::new();
//! let x = tape.leaf(Tensor::scalar(3.0));
//! let y = tape.mul(x, x).unwrap();
//! tape.backward(y).unwrap();
//! assert_eq!(tape.grad(x).unwrap().item(), 6.0);
//! ```

pub mod gradcheck;
mod tape;
mod tensor;

pub use tape::{logsumexp, sigmoid, softplus, Axis, Tape, Var, ZERO_NORM};
pub use tensor::Tensor;
