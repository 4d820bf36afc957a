//! Binary neural networks with stochastic scale vectors.
//!
//! The crate provides, end to end:
//!
//! * bit-packed {−1,+1} tensors with exact XNOR/popcount matmul and
//!   convolution ([`packed`]);
//! * channel-wise weight normalization, sign binarization, and batch norm
//!   ([`norm`]);
//! * learnable per-channel scale vectors dropped layer-wise by a single
//!   Bernoulli bit per layer, in Unitary / Average / Random variants
//!   ([`dropout`]);
//! * training with straight-through gradients, Adam, and the scale/weight
//!   regularizers ([`train`]);
//! * Monte-Carlo inference: repeated stochastic passes, predictive
//!   mean/variance/confidence intervals/entropy, and an
//!   out-of-distribution decision rule ([`bayes`]);
//! * a physical model of the stochastic SOT-MTJ bit driving the dropout
//!   masks: switching probability, current calibration, device variation,
//!   bitstream generation ([`mtj`]);
//! * a crossbar compute-in-memory simulator: layer-to-tile mapping,
//!   complementary-cell XNOR encoding, ADC quantization, scale memory,
//!   and per-image energy accounting ([`cim`]);
//! * datasets, corruption/OOD generators, checkpoints, experiment configs,
//!   and report writers behind the CLI ([`data`], [`checkpoint`],
//!   [`config`], [`harness`]).

pub mod bayes;
pub mod checkpoint;
pub mod cim;
pub mod data;
pub mod dropout;
pub mod config;
pub mod error;
pub mod harness;
pub mod model;
pub mod mtj;
pub mod norm;
pub mod packed;
pub mod report;
pub mod rng;
pub mod stats;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
