//! Probabilistic multivariate forecasting of multi-well production series.
//!
//! Two generative forecasters share one small autodiff core:
//!
//! * [`timegrad`]: a GRU summarizes the history and a denoising diffusion
//!   model ([`diffusion`]) samples each next step conditioned on it.
//! * [`seq_models`]: an encoder-decoder transformer with sparse query
//!   selection and distilling ([`attention`]), plus a full-attention
//!   baseline, both emitting per-step Gaussians in one decoder pass.
//!
//! [`data`] ingests or synthesizes production panels and [`eval`] turns
//! sample ensembles into quantile forecasts and MSE/MASE reports.
//!
//! Every numeric type is generic over [`Scalar`] (`f32` or `f64`); the
//! `*64` aliases below are the concrete types the CLI uses.

pub mod attention;
pub mod checkpoint;
pub mod data;
pub mod diffusion;
pub mod error;
pub mod eval;
pub mod graph;
pub mod optim;
pub mod params;
pub mod rng;
pub mod scalar;
pub mod seq_models;
pub mod tensor;
pub mod timegrad;

pub use error::{Error, Result};
pub use graph::{Gradients, Graph, ParamGrads, Var};
pub use optim::{AdamW, AdamWConfig};
pub use params::{ParamId, ParamStore};
pub use scalar::Scalar;
pub use tensor::Tensor;

pub type Tensor64 = Tensor<f64>;
pub type Tensor32 = Tensor<f32>;
pub type Graph64 = Graph<f64>;
