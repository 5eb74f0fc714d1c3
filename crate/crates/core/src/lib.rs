//! Hybrid ANN-SNN co-training.
//!
//! Rate networks built from smoothed spiking-neuron activation curves are
//! trained with gradient descent, converted to clock-driven spiking networks
//! by swapping neuron models, then fine-tuned with spiking forward passes and
//! smooth-surrogate backward passes.
//!
//! - [`tensor`]: tensors, layer kernels, reverse-mode autodiff, Adam
//! - [`neuron`]: LIF / soft-LIF / rectified-linear neurons, synaptic filter
//! - [`graph`]: layer stacks, the LocNet and CAE builders, losses
//! - [`sim`]: spiking rollouts, post-training scaling, spike statistics
//! - [`train`]: ANN training, conversion, hybrid fine-tuning, early stopping
//! - [`data`]: synthetic box and mask datasets
//! - [`eval`]: IoU, Dice and model reports
//! - [`checkpoint`], [`config`], [`cli`]: persistence and the command-line driver
//!
//! Numeric code is generic over [`Scalar`] (`f32` or `f64`); the aliases
//! below fix the element type.

pub mod checkpoint;
pub mod cli;
pub mod config;
pub mod data;
pub mod error;
mod fsutil;
pub mod eval;
pub mod graph;
pub mod neuron;
pub mod pipeline;
mod scalar;
pub mod sim;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
pub use scalar::Scalar;

pub type Tensor32 = tensor::Tensor<f32>;
pub type Tensor64 = tensor::Tensor<f64>;
pub type Network32 = graph::Network<f32>;
pub type Network64 = graph::Network<f64>;
pub type NeuronParams32 = neuron::NeuronParams<f32>;
pub type NeuronParams64 = neuron::NeuronParams<f64>;
pub type Tape32 = tensor::Tape<f32>;
pub type Tape64 = tensor::Tape<f64>;
pub type SimConfig32 = sim::SimConfig<f32>;
pub type SimConfig64 = sim::SimConfig<f64>;
