//! Minimal differentiable-computation kernel: a reverse-mode tape over 2-D
//! tensors, layer builders (dense, LSTM step, multi-head attention, layer
//! norm), a named parameter store with checkpointing, and SGD/Adam updates.
//!
//! Training runs at `f32`; every op is generic over [`Real`] so gradient
//! tests can run the identical code at `f64`.

pub mod gradcheck;
pub mod layers;
pub mod optim;
pub mod params;
pub mod tape;

pub use params::{Bindings, ParamStore};
pub use tape::{Grads, Tape, Var};

use ndarray::{LinalgScalar, ScalarOperand};
use num_traits::Float;

/// Scalar element type for tensors: `f32` for training, `f64` for tests.
pub trait Real:
    Float + LinalgScalar + ScalarOperand + std::fmt::Debug + std::fmt::Display + Send + Sync + 'static
{
    fn of(x: f64) -> Self;
    fn as_f64(self) -> f64;
}

impl Real for f32 {
    fn of(x: f64) -> Self {
        x as f32
    }
    fn as_f64(self) -> f64 {
        f64::from(self)
    }
}

impl Real for f64 {
    fn of(x: f64) -> Self {
        x
    }
    fn as_f64(self) -> f64 {
        self
    }
}
