//! Quantization-aware training for image classifiers whose connection weights
//! take only a handful of discrete values (1 to 4.08 bits per weight).
//!
//! Training keeps 32-bit master weights. Every forward pass snaps them onto a
//! symmetric grid of `n_values` points with a per-layer scale, and the
//! straight-through estimator carries gradients back to the masters. Trained
//! models are stored with several weights per byte in the `LBQ1` container.
//!
//! Module map:
//!
//! - [`tensor`]: dense tensors, the reverse-mode [`Tape`](tensor::Tape), seeded streams
//! - [`quant`]: weight grids and the quantizer
//! - [`nn`]: dense, convolution, attention, norm and patch layers
//! - [`models`]: the FCNN, CVNN and ViT architectures and their parameter inventory
//! - [`data`]: CIFAR-10 binary loader, synthetic data, augmentation, batching
//! - [`train`]: loss, SGD with momentum, epoch loop and metrics
//! - [`packing`]: base-N weight packing and the model file format
//! - [`cli`]: run configuration and the `lowbit` command-line tool

pub mod cli;
pub mod data;
pub mod error;
pub mod models;
pub mod nn;
pub mod packing;
pub mod quant;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
