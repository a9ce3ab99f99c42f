//! Periodicity-aware self-supervised representation learning for
//! multivariate time series.
//!
//! The pipeline: detect dominant periods from the amplitude spectrum, segment
//! series into windows at each period-derived granularity, weight soft
//! contrastive targets by maximum cross-correlation between raw windows, and
//! train a latent-state encoder plus a dynamic-transition encoder with a
//! next-transition prediction head.

pub mod data;
pub mod error;
pub mod eval;
pub mod losses;
pub mod model;
pub mod patching;
pub mod periodicity;
pub mod similarity;
pub mod tensor;
pub mod training;

pub use data::{Labels, TimeSeriesDataset};
pub use error::{PlantsError, Result};
pub use tensor::{Graph, Tensor, Var};
