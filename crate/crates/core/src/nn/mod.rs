//! Small CPU neural-network engine for the path-profile CNN: 2-D
//! convolution, ReLU, max pooling, dense layers with an optional scalar
//! junction, MSE loss, reverse-mode gradients and Adam.
//!
//! Everything is generic over [`Real`] so the same code runs in `f32` for
//! training and in `f64` for finite-difference gradient checks.

use std::fmt::Debug;
use std::iter::Sum;
use std::ops::AddAssign;

use num_traits::Float;

pub mod adam;
pub mod checkpoint;
pub mod layers;
pub mod loss;
pub mod model;

pub use adam::{AdamConfig, AdamState};
pub use checkpoint::Checkpoint;
pub use loss::mse_loss;
pub use model::{ArchSpec, BatchCache, CnnModel, ConvBlockSpec, ConvLayer, DenseLayer, Params};

/// Floating-point element type of parameters and activations.
pub trait Real: Float + Sum + AddAssign + Send + Sync + Debug + Default + 'static {
    fn of(x: f64) -> Self;
    fn of32(x: f32) -> Self;
    fn to64(self) -> f64;
}

impl Real for f32 {
    fn of(x: f64) -> Self {
        x as f32
    }
    fn of32(x: f32) -> Self {
        x
    }
    fn to64(self) -> f64 {
        self as f64
    }
}

impl Real for f64 {
    fn of(x: f64) -> Self {
        x
    }
    fn of32(x: f32) -> Self {
        x as f64
    }
    fn to64(self) -> f64 {
        self
    }
}
