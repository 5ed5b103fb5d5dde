//! Run configuration shared by the command-line subcommands.
//!
//! A single JSON document with nested sections; every field has a default
//! and unknown keys are rejected. The resolved configuration is hashed and
//! the hash is embedded in every output file.

use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::backtest::BacktestConfig;
use crate::error::{CocoError, Result};
use crate::features::{KernelSpec, MixingMode};
use crate::model::FitSpec;
use crate::objective::Lambdas;
use crate::panel::{PreprocessOptions, Schema};
use crate::simulate::{AsymptoticsSpec, Innovations, PopulationSpec};
use crate::solver::SolverOptions;

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PanelSection {
    pub schema: Schema,
    pub preprocess: PreprocessOptions,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RanksSection {
    pub m_sy: Vec<usize>,
    pub m_id: usize,
}

impl Default for RanksSection {
    fn default() -> Self {
        Self {
            m_sy: vec![5, 10, 20, 40],
            m_id: 1,
        }
    }
}

/// Window layout and validation settings of the rolling evaluation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BacktestSection {
    pub train_months: usize,
    pub val_months: usize,
    pub test_months: usize,
    pub step: usize,
    pub rho: Option<f64>,
    pub rho_multipliers: Vec<f64>,
    pub median_rows: usize,
    pub pivot_tol: f64,
    pub mixing: MixingMode,
    pub refit_on_validation: bool,
    pub rolling_window: usize,
}

impl Default for BacktestSection {
    fn default() -> Self {
        let d = BacktestConfig::default();
        Self {
            train_months: d.train_months,
            val_months: d.val_months,
            test_months: d.test_months,
            step: d.step,
            rho: d.rho,
            rho_multipliers: d.rho_multipliers,
            median_rows: d.median_rows,
            pivot_tol: d.pivot_tol,
            mixing: d.mixing,
            refit_on_validation: d.refit_on_validation,
            rolling_window: d.rolling_window,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SimulateSection {
    pub population: PopulationSpec,
    /// Load population parameters from this JSON file instead of drawing them.
    pub population_file: Option<String>,
    pub months: usize,
    pub n_assets: usize,
    pub innovations: Innovations,
    pub asymptotics: AsymptoticsSpec,
    /// Population rank used by the rate experiment.
    pub asymptotics_rank: usize,
}

impl Default for SimulateSection {
    fn default() -> Self {
        Self {
            population: PopulationSpec::default(),
            population_file: None,
            months: 120,
            n_assets: 100,
            innovations: Innovations::Normal,
            asymptotics: AsymptoticsSpec::default(),
            asymptotics_rank: 3,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub panel: PanelSection,
    pub kernel_sy: KernelSpec,
    pub kernel_id: KernelSpec,
    pub ranks: RanksSection,
    pub lambdas: Lambdas,
    pub solver: SolverOptions,
    pub backtest: BacktestSection,
    pub simulate: SimulateSection,
    pub output_dir: String,
    pub seed: u64,
    /// Worker threads; 0 uses every available core.
    pub threads: usize,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            panel: PanelSection::default(),
            kernel_sy: KernelSpec::cosine(),
            kernel_id: KernelSpec::cosine(),
            ranks: RanksSection::default(),
            lambdas: Lambdas::default(),
            solver: SolverOptions::default(),
            backtest: BacktestSection::default(),
            simulate: SimulateSection::default(),
            output_dir: "out".into(),
            seed: 0,
            threads: 0,
        }
    }
}

impl RunConfig {
    pub fn from_json(s: &str) -> Result<Self> {
        Ok(serde_json::from_str(s)?)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| CocoError::io(path, e))?;
        serde_json::from_str(&text).map_err(|e| CocoError::Parse {
            path: path.display().to_string(),
            line: e.line(),
            message: e.to_string(),
        })
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    /// Hash of every setting that can influence results. Execution settings
    /// (`threads`, `output_dir`) are excluded, so runs that differ only in
    /// where or how fast they ran carry the same hash.
    pub fn hash(&self) -> Result<String> {
        let mut canonical = self.clone();
        canonical.threads = 0;
        canonical.output_dir.clear();
        config_hash(&canonical)
    }

    pub fn backtest_config(&self) -> BacktestConfig {
        let b = &self.backtest;
        BacktestConfig {
            train_months: b.train_months,
            val_months: b.val_months,
            test_months: b.test_months,
            step: b.step,
            ranks: self.ranks.m_sy.clone(),
            m_id: self.ranks.m_id,
            kernel: self.kernel_sy,
            kernel_id: self.kernel_id,
            rho: b.rho,
            rho_multipliers: b.rho_multipliers.clone(),
            median_rows: b.median_rows,
            lambdas: self.lambdas,
            pivot_tol: b.pivot_tol,
            mixing: b.mixing,
            solver: self.solver.clone(),
            refit_on_validation: b.refit_on_validation,
            rolling_window: b.rolling_window,
        }
    }

    /// Fit settings for the first configured rank.
    pub fn fit_spec(&self) -> Result<FitSpec> {
        let m_sy = *self
            .ranks
            .m_sy
            .first()
            .ok_or_else(|| CocoError::InvalidArgument("ranks.m_sy is empty".into()))?;
        Ok(FitSpec {
            kernel_sy: self.kernel_sy,
            kernel_id: self.kernel_id,
            m_sy,
            m_id: self.ranks.m_id,
            lambdas: self.lambdas,
            pivot_tol: self.backtest.pivot_tol,
            mixing: self.backtest.mixing,
            solver: self.solver.clone(),
        })
    }
}

/// Hex SHA-256 of the compact JSON serialization.
pub fn config_hash<T: Serialize>(value: &T) -> Result<String> {
    let bytes = serde_json::to_vec(value)?;
    Ok(hex::encode(Sha256::digest(&bytes)))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_round_trip_and_unknown_keys_fail() {
        let c = RunConfig::default();
        assert_eq!(RunConfig::from_json(&c.to_json().unwrap()).unwrap(), c);
        assert!(RunConfig::from_json(r#"{"sed": 1}"#).is_err());
        assert!(RunConfig::from_json(r#"{"backtest": {"train": 1}}"#).is_err());
        let c = RunConfig::from_json(r#"{"seed": 4, "kernel_sy": {"kind": "gaussian", "rho": 2.0}}"#).unwrap();
        assert_eq!(c.seed, 4);
        assert_eq!(c.backtest_config().kernel.rho, 2.0);
    }

    #[test]
    fn hash_is_stable_and_sensitive() {
        let a = RunConfig::default();
        let mut b = a.clone();
        assert_eq!(a.hash().unwrap(), b.hash().unwrap());
        b.threads = 3;
        b.output_dir = "elsewhere".into();
        assert_eq!(a.hash().unwrap(), b.hash().unwrap());
        b.seed = 1;
        assert_ne!(a.hash().unwrap(), b.hash().unwrap());
        assert_eq!(a.hash().unwrap().len(), 64);
    }
}
