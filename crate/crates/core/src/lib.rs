//! Backpropagation, feedback alignment and difference target propagation on
//! plain and densely connected MLPs and ConvNets, with the MNIST training
//! and sweep harness around them.
//!
//! Numerical code is generic over [`Scalar`] (`f32` or `f64`); the aliases
//! below fix it to `f64`, the precision used for all experiments.

pub mod activation;
pub mod checkpoint;
pub mod data;
pub mod error;
pub mod gradcheck;
pub mod loss;
pub mod network;
pub mod ops;
pub mod rng;
pub mod rules;
pub mod scalar;
pub mod sweep;
pub mod tensor;
pub mod trainer;

pub use activation::Activation;
pub use data::{Dataset, Splits};
pub use error::{Error, Result};
pub use network::{build_network, forward, ActivationTrace, Family, NetworkSpec, ParamTree, ParameterSet};
pub use rng::{mix_seed, RngStream};
pub use rules::{DecoderSet, FeedbackSet, Rule};
pub use scalar::Scalar;
pub use sweep::{GridSpec, SweepResult};
pub use tensor::Tensor;
pub use trainer::{RunRecord, TrainConfig};

pub type Real = f64;
pub type Tensor64 = Tensor<f64>;
pub type Params64 = ParameterSet<f64>;
pub type Trace64 = ActivationTrace<f64>;
pub type Dataset64 = Dataset<f64>;
pub type Splits64 = Splits<f64>;
