//! Rolling train / validate / test evaluation.
//!
//! Each window rebuilds the feature maps on its training covariates, fits the
//! model for every length-scale candidate, keeps the candidate with the best
//! validation score, and evaluates the following test months against the
//! zero-mean constant-variance benchmark.

use std::collections::BTreeMap;
use std::path::Path;

use log::{info, warn};
use ndarray::{Array1, Array2};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{CocoError, Result};
use crate::evaluation::{
    dawid_sebastiani, r2_first_terms, r2_second_terms, total_r2_term, windowed, write_metrics_csv, Aggregation,
    MetricSeries, MetricTerms, Window, ANNUALIZE,
};
use crate::features::{median_heuristic_rho, KernelSpec, MixingMode};
use crate::model::{fit_model, stack_covariates, FitSpec, FittedModel};
use crate::moments::{cmve, factor_covariance, factor_portfolios, systematic_ratio, MomentEstimate};
use crate::objective::Lambdas;
use crate::panel::{DataPoint, Panel};
use crate::simulate::{population_moments, PopulationModel};
use crate::solver::{benchmark_sigma, SolverOptions};

/// Settings of [`run_backtest`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BacktestConfig {
    pub train_months: usize,
    pub val_months: usize,
    pub test_months: usize,
    pub step: usize,
    /// One independent run per systematic rank.
    pub ranks: Vec<usize>,
    pub m_id: usize,
    pub kernel: KernelSpec,
    pub kernel_id: KernelSpec,
    /// Base length-scale of the validation grid; `None` uses the median
    /// heuristic on the training covariates.
    pub rho: Option<f64>,
    pub rho_multipliers: Vec<f64>,
    /// Subsample size of the median heuristic.
    pub median_rows: usize,
    pub lambdas: Lambdas,
    pub pivot_tol: f64,
    pub mixing: MixingMode,
    pub solver: SolverOptions,
    /// Refit on train + validation months after choosing the length-scale.
    pub refit_on_validation: bool,
    pub rolling_window: usize,
}

impl Default for BacktestConfig {
    fn default() -> Self {
        Self {
            train_months: 96,
            val_months: 1,
            test_months: 1,
            step: 1,
            ranks: vec![5, 10, 20, 40],
            m_id: 1,
            kernel: KernelSpec::cosine(),
            kernel_id: KernelSpec::cosine(),
            rho: None,
            rho_multipliers: vec![0.25, 0.5, 1.0, 2.0, 4.0],
            median_rows: 1000,
            lambdas: Lambdas::default(),
            pivot_tol: 0.0,
            mixing: MixingMode::Orthonormal,
            solver: SolverOptions::default(),
            refit_on_validation: false,
            rolling_window: 24,
        }
    }
}

impl BacktestConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(CocoError::InvalidArgument(m.to_string()));
        if self.train_months < 1 || self.test_months < 1 || self.step < 1 {
            return bad("train_months, test_months and step must be ≥ 1");
        }
        if self.ranks.is_empty() || self.ranks.contains(&0) || self.m_id == 0 {
            return bad("ranks must be a non-empty list of positive integers and m_id ≥ 1");
        }
        if self.rolling_window == 0 {
            return bad("rolling_window must be ≥ 1");
        }
        if self.kernel.uses_rho() && (self.rho_multipliers.is_empty() || self.rho_multipliers.iter().any(|m| !(*m > 0.0))) {
            return bad("rho_multipliers must be positive");
        }
        if let Some(r) = self.rho {
            if !(r > 0.0) {
                return bad("rho must be positive");
            }
        }
        Ok(())
    }

    /// `⌊(T − train − val − test)/step⌋ + 1`, or 0 for a short panel.
    pub fn window_count(&self, t: usize) -> usize {
        let need = self.train_months + self.val_months + self.test_months;
        if t < need {
            0
        } else {
            (t - need) / self.step + 1
        }
    }

    fn fit_spec(&self, m_sy: usize, kernel: KernelSpec) -> FitSpec {
        FitSpec {
            kernel_sy: kernel,
            kernel_id: self.kernel_id,
            m_sy,
            m_id: self.m_id,
            lambdas: self.lambdas,
            pivot_tol: self.pivot_tol,
            mixing: self.mixing,
            solver: self.solver.clone(),
        }
    }
}

/// Raw evaluation terms of one test month for one model.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelTerms {
    pub score: f64,
    pub r2_num: f64,
    pub r2_second_num: f64,
    pub predicted_sharpe: f64,
    pub cmve_return: f64,
    pub rho_f: f64,
    /// `tr(Σ_sy)/tr(Σ)`, the lower end of the factor-share sandwich.
    pub sys_share: f64,
    /// Residual ratio `‖x − Φf‖²/‖x‖²` of the factor portfolios.
    pub total_r2_resid: f64,
}

/// Evaluation of one test month.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MonthRecord {
    pub date: String,
    pub n: usize,
    pub factors: usize,
    pub r2_den: f64,
    pub r2_second_den: f64,
    pub benchmark_score: f64,
    pub model: ModelTerms,
    pub population: Option<ModelTerms>,
}

/// Summary of the final solve of a window.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SolveSummary {
    pub iterations: usize,
    pub converged: bool,
    pub grad_map_norm: f64,
    pub objective: f64,
}

/// One rolled window.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct WindowRecord {
    pub index: usize,
    pub m_sy: usize,
    pub train_start: String,
    pub train_end: String,
    pub test_dates: Vec<String>,
    pub rho: Option<f64>,
    /// `(ρ, summed validation score)` for every candidate.
    pub validation: Vec<(f64, f64)>,
    pub sigma_bm: f64,
    pub solve: Option<SolveSummary>,
    pub months: Vec<MonthRecord>,
    pub skipped: Option<String>,
    #[serde(skip)]
    pub model: Option<FittedModel>,
}

/// All windows of one systematic rank, with assembled metrics.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RankRun {
    pub m_sy: usize,
    pub windows: Vec<WindowRecord>,
    pub terms: Vec<MetricTerms>,
    #[serde(skip)]
    pub series: Vec<MetricSeries>,
    /// Every metric evaluated over all test months.
    pub summary: BTreeMap<String, f64>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct BacktestReport {
    pub config_sha256: String,
    pub config: BacktestConfig,
    pub runs: Vec<RankRun>,
}

/// The zero-mean benchmark with constant idiosyncratic variance `σ²_bm`.
pub fn benchmark_moments(sigma_bm: f64, xi: &DataPoint) -> Result<MomentEstimate> {
    if !(sigma_bm > 0.0) {
        return Err(CocoError::InvalidArgument(format!("benchmark variance must be positive, got {sigma_bm}")));
    }
    MomentEstimate::new(
        Array1::zeros(xi.n),
        Array2::zeros((xi.n, 0)),
        Array2::zeros((0, 0)),
        Array1::from_elem(xi.n, sigma_bm),
    )
}

fn model_terms(est: &MomentEstimate, xi: &DataPoint, sigma_bm: f64) -> Result<ModelTerms> {
    let x = xi.returns.view();
    let score = dawid_sebastiani(x, est.mu.view(), est)?;
    let (r2_num, _) = r2_first_terms(x, est.mu.view(), xi.weight)?;
    let (r2_second_num, _) = r2_second_terms(x, est, sigma_bm, xi.weight)?;
    let (w, predicted_sharpe) = cmve(est)?;
    let (f, _) = factor_portfolios(est.phi_sy.view(), x, None)?;
    let f_cov = factor_covariance(est, None)?;
    let total = est.trace();
    Ok(ModelTerms {
        score,
        r2_num,
        r2_second_num,
        predicted_sharpe,
        cmve_return: w.dot(&x),
        rho_f: systematic_ratio(est, f_cov.view())?,
        sys_share: est.trace_systematic() / total,
        total_r2_resid: total_r2_term(x, est.phi_sy.view(), f.view())?,
    })
}

fn month_record(
    date: &str,
    xi: &DataPoint,
    model: &FittedModel,
    sigma_bm: f64,
    population: Option<&PopulationModel>,
) -> Result<MonthRecord> {
    let x = xi.returns.view();
    let est = model.moments(xi)?;
    let bench = benchmark_moments(sigma_bm, xi)?;
    let (_, r2_den) = r2_first_terms(x, bench.mu.view(), xi.weight)?;
    let (_, r2_second_den) = r2_second_terms(x, &bench, sigma_bm, xi.weight)?;
    let pop = match population {
        Some(p) => Some(model_terms(&population_moments(p, xi)?, xi, sigma_bm)?),
        None => None,
    };
    Ok(MonthRecord {
        date: date.to_string(),
        n: xi.n,
        factors: est.factors(),
        r2_den,
        r2_second_den,
        benchmark_score: dawid_sebastiani(x, bench.mu.view(), &bench)?,
        model: model_terms(&est, xi, sigma_bm)?,
        population: pop,
    })
}

fn validation_score(model: &FittedModel, val: &[DataPoint]) -> f64 {
    let mut total = 0.0;
    for xi in val {
        let s = model
            .moments(xi)
            .and_then(|est| dawid_sebastiani(xi.returns.view(), est.mu.view(), &est));
        match s {
            Ok(v) if v.is_finite() => total += v,
            _ => return f64::INFINITY,
        }
    }
    total
}

struct WindowInput<'a> {
    index: usize,
    m_sy: usize,
    start: usize,
    points: &'a [DataPoint],
    dates: &'a [String],
}

fn run_window(cfg: &BacktestConfig, w: WindowInput, population: Option<&PopulationModel>) -> Result<WindowRecord> {
    let (tr, va, te) = (cfg.train_months, cfg.val_months, cfg.test_months);
    let s = w.start;
    let train = &w.points[s..s + tr];
    let val = &w.points[s + tr..s + tr + va];
    let test = &w.points[s + tr + va..s + tr + va + te];
    let test_dates = w.dates[s + tr + va..s + tr + va + te].to_vec();

    let candidates: Vec<KernelSpec> = if cfg.kernel.uses_rho() {
        let base = match cfg.rho {
            Some(r) => r,
            None => median_heuristic_rho(stack_covariates(train)?.view(), cfg.median_rows)?,
        };
        let mults: Vec<f64> = if va == 0 {
            // Without validation data keep the candidate closest to the base value.
            let best = cfg
                .rho_multipliers
                .iter()
                .copied()
                .min_by(|a, b| a.ln().abs().total_cmp(&b.ln().abs()))
                .unwrap_or(1.0);
            vec![best]
        } else {
            cfg.rho_multipliers.clone()
        };
        mults.iter().map(|m| KernelSpec { rho: base * m, ..cfg.kernel }).collect()
    } else {
        vec![cfg.kernel]
    };

    let fits: Vec<Result<FittedModel>> = candidates
        .par_iter()
        .map(|k| fit_model(train, &cfg.fit_spec(w.m_sy, *k)))
        .collect();
    let mut validation = Vec::new();
    let mut best: Option<(usize, f64)> = None;
    for (i, f) in fits.iter().enumerate() {
        let score = match f {
            Ok(m) if va > 0 => validation_score(m, val),
            Ok(_) => 0.0,
            Err(e) => {
                warn!("window {} (m={}): candidate {:?} failed: {e}", w.index, w.m_sy, candidates[i]);
                f64::INFINITY
            }
        };
        validation.push((candidates[i].rho, score));
        if f.is_ok() && best.is_none_or(|(_, b)| score < b) {
            best = Some((i, score));
        }
    }
    let Some((chosen, _)) = best else {
        let reason = fits.into_iter().find_map(|f| f.err()).map(|e| e.to_string()).unwrap_or_default();
        return Err(CocoError::Numerical(reason));
    };
    let kernel = candidates[chosen];
    let (model, fit_points) = if cfg.refit_on_validation && va > 0 {
        let pts = &w.points[s..s + tr + va];
        (fit_model(pts, &cfg.fit_spec(w.m_sy, kernel))?, pts)
    } else {
        let m = fits.into_iter().nth(chosen).expect("chosen candidate exists")?;
        (m, train)
    };
    let sigma_bm = benchmark_sigma(fit_points)?;
    let months = test
        .iter()
        .zip(&test_dates)
        .map(|(xi, d)| month_record(d, xi, &model, sigma_bm, population))
        .collect::<Result<Vec<_>>>()?;
    let r = &model.report;
    Ok(WindowRecord {
        index: w.index,
        m_sy: model.phi_sy.rank,
        train_start: w.dates[s].clone(),
        train_end: w.dates[s + tr - 1].clone(),
        test_dates,
        rho: kernel.uses_rho().then_some(kernel.rho),
        validation,
        sigma_bm,
        solve: Some(SolveSummary {
            iterations: r.iterations,
            converged: r.converged,
            grad_map_norm: r.grad_map_norm,
            objective: r.objective,
        }),
        months,
        skipped: None,
        model: Some(model),
    })
}

fn collect_terms(windows: &[WindowRecord], with_population: bool) -> Vec<MetricTerms> {
    let mut r2 = MetricTerms::new("r2", Aggregation::PooledRatio);
    let mut r2s = MetricTerms::new("r2_second", Aggregation::PooledRatio);
    let mut sd = MetricTerms::new("score_differential", Aggregation::Mean);
    let mut tot = MetricTerms::new("total_r2", Aggregation::OneMinusMean);
    let mut rho = MetricTerms::new("rho_f", Aggregation::Mean);
    let mut ps = MetricTerms::new("predicted_sharpe", Aggregation::Mean);
    let mut rs = MetricTerms::new("cmve_sharpe", Aggregation::Sharpe);
    let mut pop: Vec<MetricTerms> = ["r2", "r2_second", "score_differential", "total_r2", "rho_f", "predicted_sharpe", "cmve_sharpe"]
        .iter()
        .zip([
            Aggregation::PooledRatio,
            Aggregation::PooledRatio,
            Aggregation::Mean,
            Aggregation::OneMinusMean,
            Aggregation::Mean,
            Aggregation::Mean,
            Aggregation::Sharpe,
        ])
        .map(|(k, a)| MetricTerms::new(format!("population_{k}"), a))
        .collect();
    for m in windows.iter().flat_map(|w| &w.months) {
        let d = m.date.as_str();
        let push_model = |t: &ModelTerms, out: &mut [&mut MetricTerms]| {
            out[0].push(d, t.r2_num, m.r2_den);
            out[1].push(d, t.r2_second_num, m.r2_second_den);
            out[2].push(d, m.benchmark_score - t.score, 0.0);
            out[3].push(d, t.total_r2_resid, 0.0);
            out[4].push(d, t.rho_f, 0.0);
            out[5].push(d, ANNUALIZE * t.predicted_sharpe, 0.0);
            out[6].push(d, t.cmve_return, 0.0);
        };
        push_model(&m.model, &mut [&mut r2, &mut r2s, &mut sd, &mut tot, &mut rho, &mut ps, &mut rs]);
        if let (true, Some(p)) = (with_population, &m.population) {
            let mut refs: Vec<&mut MetricTerms> = pop.iter_mut().collect();
            push_model(p, &mut refs);
        }
    }
    let mut out = vec![r2, r2s, sd, tot, rho, ps, rs];
    if with_population {
        out.append(&mut pop);
    }
    out
}

/// Runs the rolling evaluation for every configured rank. When a population
/// model is supplied, population moments are scored on the same test months.
pub fn run_backtest(panel: &Panel, cfg: &BacktestConfig, population: Option<&PopulationModel>) -> Result<BacktestReport> {
    cfg.validate()?;
    let t = panel.len();
    let n_windows = cfg.window_count(t);
    if n_windows == 0 {
        return Err(CocoError::Data(format!(
            "panel has {t} periods; a window needs {} (train {} + validation {} + test {})",
            cfg.train_months + cfg.val_months + cfg.test_months,
            cfg.train_months,
            cfg.val_months,
            cfg.test_months
        )));
    }
    let points = panel.data_points()?;
    let dates = panel.dates();
    let tasks: Vec<(usize, usize)> = cfg
        .ranks
        .iter()
        .flat_map(|&m| (0..n_windows).map(move |i| (m, i)))
        .collect();
    let records: Vec<WindowRecord> = tasks
        .par_iter()
        .map(|&(m_sy, index)| {
            let input = WindowInput {
                index,
                m_sy,
                start: index * cfg.step,
                points: &points,
                dates: &dates,
            };
            run_window(cfg, input, population).unwrap_or_else(|e| {
                warn!("window {index} (m={m_sy}) skipped: {e}");
                let s = index * cfg.step;
                WindowRecord {
                    index,
                    m_sy,
                    train_start: dates[s].clone(),
                    train_end: dates[s + cfg.train_months - 1].clone(),
                    test_dates: Vec::new(),
                    rho: None,
                    validation: Vec::new(),
                    sigma_bm: f64::NAN,
                    solve: None,
                    months: Vec::new(),
                    skipped: Some(e.to_string()),
                    model: None,
                }
            })
        })
        .collect();

    let mut runs = Vec::new();
    for (k, &m_sy) in cfg.ranks.iter().enumerate() {
        let windows: Vec<WindowRecord> = records[k * n_windows..(k + 1) * n_windows].to_vec();
        let terms = collect_terms(&windows, population.is_some());
        let mut series = Vec::new();
        let mut summary = BTreeMap::new();
        for term in &terms {
            for window in [Window::Rolling(cfg.rolling_window), Window::Expanding] {
                let mut s = windowed(term, window)?;
                s.kind = format!("{}_m{m_sy}", s.kind);
                series.push(s);
            }
            summary.insert(term.kind.clone(), term.overall());
        }
        let skipped = windows.iter().filter(|w| w.skipped.is_some()).count();
        info!("rank {m_sy}: {n_windows} windows, {skipped} skipped");
        runs.push(RankRun {
            m_sy,
            windows,
            terms,
            series,
            summary,
        });
    }
    Ok(BacktestReport {
        config_sha256: crate::config::config_hash(cfg)?,
        config: cfg.clone(),
        runs,
    })
}

/// Parameters of one fitted window, as written to `params_<date>.json`.
#[derive(Debug, Clone, Serialize)]
pub struct WindowParams<'a> {
    pub config_sha256: &'a str,
    pub m_sy: usize,
    pub rho: Option<f64>,
    pub train_start: &'a str,
    pub train_end: &'a str,
    pub model: &'a FittedModel,
}

impl BacktestReport {
    pub fn all_series(&self) -> Vec<MetricSeries> {
        self.runs.iter().flat_map(|r| r.series.iter().cloned()).collect()
    }

    /// Writes `report.json`, `metrics.csv`, and one `params_<date>.json` per
    /// fitted window (suffixed by the rank when several ranks are run).
    pub fn write_dir(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir).map_err(|e| CocoError::io(dir, e))?;
        let hash_line = format!("config-sha256: {}", self.config_sha256);
        let report_path = dir.join("report.json");
        std::fs::write(&report_path, serde_json::to_string_pretty(self)?).map_err(|e| CocoError::io(&report_path, e))?;
        let metrics_path = dir.join("metrics.csv");
        let f = std::fs::File::create(&metrics_path).map_err(|e| CocoError::io(&metrics_path, e))?;
        write_metrics_csv(&self.all_series(), &[hash_line], std::io::BufWriter::new(f))?;
        let multi = self.runs.len() > 1;
        for run in &self.runs {
            for w in &run.windows {
                let (Some(model), Some(date)) = (&w.model, w.test_dates.first()) else {
                    continue;
                };
                let name = if multi {
                    format!("params_{date}_m{}.json", run.m_sy)
                } else {
                    format!("params_{date}.json")
                };
                let doc = WindowParams {
                    config_sha256: &self.config_sha256,
                    m_sy: w.m_sy,
                    rho: w.rho,
                    train_start: &w.train_start,
                    train_end: &w.train_end,
                    model,
                };
                let path = dir.join(name);
                std::fs::write(&path, serde_json::to_string_pretty(&doc)?).map_err(|e| CocoError::io(&path, e))?;
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    #[test]
    fn window_arithmetic() {
        let cfg = BacktestConfig::default();
        assert_eq!(cfg.window_count(98), 1);
        assert_eq!(cfg.window_count(97), 0);
        assert_eq!(cfg.window_count(108), 11);
        let c = BacktestConfig { step: 3, ..cfg };
        assert_eq!(c.window_count(108), 4);
    }

    #[test]
    fn benchmark_examples() {
        let xi = DataPoint::new(array![1.0, -2.0], Array2::zeros((2, 1))).unwrap();
        let b = benchmark_moments(1.0, &xi).unwrap();
        assert_eq!(dawid_sebastiani(xi.returns.view(), b.mu.view(), &b).unwrap(), 5.0);
        assert_eq!(cmve(&b).unwrap().1, 0.0);
        let (num, den) = r2_first_terms(xi.returns.view(), b.mu.view(), xi.weight).unwrap();
        assert_eq!(1.0 - num / den, 0.0);
        assert!(benchmark_moments(0.0, &xi).is_err());
    }

    #[test]
    fn config_rejects_unknown_keys() {
        assert!(serde_json::from_str::<BacktestConfig>(r#"{"train_months": 3, "bogus": 1}"#).is_err());
        let c: BacktestConfig = serde_json::from_str(r#"{"train_months": 3}"#).unwrap();
        assert_eq!(c.train_months, 3);
        assert_eq!(c.val_months, 1);
    }
}
