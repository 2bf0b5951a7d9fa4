//! Channel-wise influence functions for multivariate time series.
//!
//! The influence of a training sample on a test sample is approximated by
//! a learning-rate-scaled inner product of loss gradients. Splitting the
//! loss by channel turns that scalar into an `N × N` matrix whose entries
//! sum back to the whole-sample value. Its diagonal (per-channel
//! self-influence) drives two applications:
//!
//! * [`anomaly`]: score each window by its largest channel self-influence,
//!   normalize, threshold at the best validation F1.
//! * [`pruning`]: accumulate channel self-influence over a validation set,
//!   sort, and keep an evenly spaced subset of channels for training.
//!
//! Numeric code is generic over [`Scalar`]; the aliases below fix `f64`.

pub mod anomaly;
pub mod autodiff;
pub mod data;
pub mod error;
pub mod influence;
pub mod models;
pub mod pruning;
pub mod scalar;
pub mod series;

pub use error::{Error, Result};
pub use scalar::Scalar;

pub type Tensor = autodiff::Tensor<f64>;
pub type Tape = autodiff::Tape<f64>;
pub type Params = autodiff::Params<f64>;
pub type GradientVector = autodiff::GradientVector<f64>;
pub type MtsSeries = series::MtsSeries<f64>;
pub type MtsWindow = series::MtsWindow<f64>;
pub type DatasetSplit = series::DatasetSplit<f64>;
pub type ModelState = models::ModelState<f64>;
pub type InfluenceMatrix = influence::InfluenceMatrix<f64>;
pub type ScoreSeries = anomaly::ScoreSeries<f64>;
pub type AnomalyReport = anomaly::AnomalyReport<f64>;
pub type ChannelScoreTable = pruning::ChannelScoreTable<f64>;
