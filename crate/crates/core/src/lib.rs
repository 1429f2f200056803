//! Gaussian-process regression with a BNN-induced mixed kernel.
//!
//! The covariance function is a convex mixture of a smooth (arcsine, tanh-induced)
//! component and an angular (arc-cosine, LeakyReLU-induced) component, both arising
//! as infinite-width limits of shallow Bayesian neural networks. The crate provides:
//!
//! * [`kernel`] — closed-form activation kernels, the reduced mixed kernel, analytic
//!   parameter derivatives, and matrix assembly;
//! * [`lowrank`] — Nystrom low-rank factorization with `first`/k-means++ anchors and
//!   O(nr^2) solve / log-determinant;
//! * [`train`] — MAP objective (GP NLL + inverse-gamma/Beta log-priors), analytic
//!   gradients through the low-rank algebra, and a fixed-budget Adam loop;
//! * [`predict`] — posterior predictive moments and the MAE/RMSE/MESE/SDESE metrics;
//! * [`simulate`] — uniform/stratified input designs, automatic nugget calibration,
//!   and a Vecchia-type sampler for generating benchmark scenarios;
//! * [`bnn`] — a finite-width Monte-Carlo sampler used as an oracle for the
//!   infinite-width limit;
//! * [`data`] — CSV ingestion, train/test splitting, and the min-max + z-score
//!   preprocessing pipeline;
//! * [`dense`] — exact dense-Cholesky reference implementations for small n.

pub mod bnn;
pub mod data;
pub mod dense;
pub mod kernel;
pub mod lowrank;
pub mod predict;
pub mod simulate;
pub mod train;

/// Crate-wide error type.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    /// Malformed input (dimension mismatch, empty data, out-of-range argument).
    #[error("input error: {0}")]
    Input(String),
    /// Invalid hyperparameter value (non-positive variance, boundary alpha/w).
    #[error("parameter error: {0}")]
    Parameter(String),
    /// Numerical failure (factorization failure, non-finite objective).
    #[error("numeric error: {0}")]
    Numeric(String),
    /// Malformed data file (CSV parse failure, missing column).
    #[error("data error: {0}")]
    Data(String),
}

pub type Result<T> = std::result::Result<T, Error>;

pub use kernel::{HyperParams, KernelMatrix, PreactMoments};
pub use lowrank::{AnchorSet, AnchorStrategy, NystromFactor};
pub use predict::{MetricsReport, PredictiveMoments};
pub use train::{FitResult, PriorConfig, TrainConfig};
