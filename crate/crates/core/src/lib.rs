//! WaDeNet: a 1-D convolutional speech classifier whose blocks are fused
//! with gated Haar wavelet coefficients of the raw waveform, built on a
//! small tape-based reverse-mode autodiff engine.
//!
//! The numeric core is generic over [`Scalar`] (`f32` or `f64`); the
//! aliases below fix the common choices. Training runs in `f32`,
//! gradient checks in `f64`.

pub mod datapipe;
pub mod error;
pub mod gradcheck;
pub mod model;
pub mod rng;
pub mod scalar;
pub mod tensor;
pub mod trainer;
pub mod wavelet;

pub use error::{Error, Result};
pub use model::{Model, ModelConfig, ModelKind, ParamSet};
pub use rng::{rng_from_seed, Rng};
pub use scalar::Scalar;
pub use tensor::{Tape, Tensor, Var};
pub use trainer::{TrainConfig, Trainer};
pub use wavelet::WaveletPyramid;

pub type Tensor32 = Tensor<f32>;
pub type Tensor64 = Tensor<f64>;
pub type Tape32 = Tape<f32>;
pub type Tape64 = Tape<f64>;
pub type Model32 = Model<f32>;
pub type Model64 = Model<f64>;
pub type Pyramid32 = WaveletPyramid<f32>;
pub type Pyramid64 = WaveletPyramid<f64>;
