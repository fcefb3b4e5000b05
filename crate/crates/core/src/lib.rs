//! Incident-aware spatiotemporal transformer for traffic forecasting.
//!
//! The crate contains a small tensor library with tape-based reverse-mode
//! differentiation, the model built on it, dataset utilities (loading,
//! windowing, normalization, a synthetic generator), a trainer and a CLI.

// `!(x > 0.0)` is used on purpose so NaN fails validation.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod attention;
pub mod autodiff;
pub mod checkpoint;
#[cfg(feature = "cli")]
pub mod cli;
pub mod conditioning;
pub mod config;
pub mod data;
pub mod embeddings;
pub mod error;
pub mod graph;
pub mod model;
pub mod nn;
pub mod params;
pub mod tensor;
pub mod trainer;

pub use config::{Ablation, ConFormerConfig, ModelSettings};
pub use data::{DatasetBundle, SynthConfig};
pub use error::{Error, Result};
pub use model::{estimate_flops, ConFormer, Mode};
pub use tensor::Tensor;
pub use trainer::{train, TrainConfig};
