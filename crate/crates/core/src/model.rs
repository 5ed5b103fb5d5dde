//! End-to-end fitting: feature construction, objective assembly, solve.

use ndarray::{concatenate, Array2, Axis};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{CocoError, Result};
use crate::features::{build_feature_map, constant_id_feature, FeatureMap, KernelSpec, MixingMode};
use crate::moments::{coco_moments, MomentEstimate};
use crate::objective::{aggregate, section_coefficients, Lambdas, SectionCoefficients};
use crate::panel::DataPoint;
use crate::solver::{solve, SolveReport, SolverOptions};

/// Model hyperparameters of a single fit.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FitSpec {
    pub kernel_sy: KernelSpec,
    /// Kernel of the idiosyncratic features; only used when `m_id > 1`.
    pub kernel_id: KernelSpec,
    pub m_sy: usize,
    pub m_id: usize,
    pub lambdas: Lambdas,
    /// Residual-trace tolerance of the pivoted Cholesky factorization.
    pub pivot_tol: f64,
    pub mixing: MixingMode,
    pub solver: SolverOptions,
}

impl Default for FitSpec {
    fn default() -> Self {
        Self {
            kernel_sy: KernelSpec::cosine(),
            kernel_id: KernelSpec::cosine(),
            m_sy: 5,
            m_id: 1,
            lambdas: Lambdas::default(),
            pivot_tol: 0.0,
            mixing: MixingMode::Orthonormal,
            solver: SolverOptions::default(),
        }
    }
}

/// A fitted parameter together with the feature maps it refers to.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct FittedModel {
    pub phi_sy: FeatureMap,
    pub phi_id: FeatureMap,
    pub report: SolveReport,
    /// Lower clamp of idiosyncratic variances used when extracting moments.
    pub floor_id: f64,
}

impl FittedModel {
    pub fn moments(&self, xi: &DataPoint) -> Result<MomentEstimate> {
        coco_moments(&self.report.u_star, &self.phi_sy, &self.phi_id, xi, self.floor_id)
    }
}

/// Stacks the covariate rows of several cross sections.
pub fn stack_covariates(points: &[DataPoint]) -> Result<Array2<f64>> {
    if points.is_empty() {
        return Err(CocoError::Data("no cross sections".into()));
    }
    let views: Vec<_> = points.iter().map(|p| p.covariates()).collect();
    concatenate(Axis(0), &views).map_err(|e| CocoError::dim("equal covariate dimension", e.to_string()))
}

/// Per-section coefficients computed in parallel, returned in input order.
pub fn section_stream(points: &[DataPoint], phi_sy: &FeatureMap, phi_id: &FeatureMap, lambdas: Lambdas) -> Result<Vec<SectionCoefficients>> {
    points
        .par_iter()
        .map(|p| section_coefficients(p, phi_sy, phi_id, lambdas))
        .collect()
}

/// Fits with fixed feature maps.
pub fn fit_with_features(
    points: &[DataPoint],
    phi_sy: FeatureMap,
    phi_id: FeatureMap,
    lambdas: Lambdas,
    opts: &SolverOptions,
) -> Result<FittedModel> {
    let stream = section_stream(points, &phi_sy, &phi_id, lambdas)?;
    let obj = aggregate(&stream, lambdas)?;
    let report = solve(&obj, opts)?;
    Ok(FittedModel {
        phi_sy,
        phi_id,
        report,
        floor_id: opts.floor_id,
    })
}

/// Builds the feature maps of `spec` on the training covariates.
pub fn build_features(points: &[DataPoint], spec: &FitSpec) -> Result<(FeatureMap, FeatureMap)> {
    let z = stack_covariates(points)?;
    let phi_sy = build_feature_map(&spec.kernel_sy, z.view(), spec.m_sy, spec.pivot_tol, spec.mixing)?;
    let phi_id = if spec.m_id <= 1 {
        constant_id_feature()
    } else {
        build_feature_map(&spec.kernel_id, z.view(), spec.m_id, spec.pivot_tol, spec.mixing)?
    };
    Ok((phi_sy, phi_id))
}

/// Builds features on the training covariates and fits.
pub fn fit_model(points: &[DataPoint], spec: &FitSpec) -> Result<FittedModel> {
    let (phi_sy, phi_id) = build_features(points, spec)?;
    fit_with_features(points, phi_sy, phi_id, spec.lambdas, &spec.solver)
}
