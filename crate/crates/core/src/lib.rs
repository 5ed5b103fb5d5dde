//! Joint kernel estimation of conditional means and covariance matrices for
//! unbalanced panels of asset returns.
//!
//! The estimator fits a moment kernel on the covariate space, extended by an
//! auxiliary point that carries the conditional mean. After a low-rank
//! Nyström approximation, the fit becomes a convex quadratic program over a
//! pair of PSD matrices `(U_sy, U_id)`. The fitted conditional covariance is
//! PSD by construction and factored as `Φ S Φᵀ + diag(d)`.
//!
//! Pipeline:
//!
//! - [`panel`]: load, preprocess, and slice a long-format panel.
//! - [`features`]: kernels, pivoted Cholesky, Nyström feature maps.
//! - [`objective`]: per-period quadratic coefficients and their averages.
//! - [`solver`]: projected accelerated gradient over the feasible set.
//! - [`moments`]: conditional moments, precision, log-determinant, portfolios.
//! - [`evaluation`]: out-of-sample metrics and windowed aggregation.
//! - [`backtest`]: rolling train / validate / test evaluation.
//! - [`simulate`]: synthetic factor-model panels and the rate experiment.
//! - [`cli`]: the `coco` command-line tool.

pub mod backtest;
pub mod cli;
pub mod config;
pub mod error;
pub mod evaluation;
pub mod features;
pub mod linalg;
pub mod model;
pub mod moments;
pub mod objective;
pub mod panel;
pub mod simulate;
pub mod solver;

pub use error::{CocoError, Result};
pub use features::{build_feature_map, FeatureMap, KernelKind, KernelSpec};
pub use model::{fit_model, FitSpec, FittedModel};
pub use moments::MomentEstimate;
pub use objective::{AggregateObjective, Lambdas};
pub use panel::{DataPoint, Panel};
pub use solver::{solve, ParamU, SolveReport, SolverOptions};
