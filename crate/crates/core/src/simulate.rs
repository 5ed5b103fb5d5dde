//! Synthetic data-generating factor model, population moments, and the
//! parameter-consistency rate experiment.
//!
//! Returns follow `x = Φ g + √u_id · w` with `g ~ N(b, V − bbᵀ)` and white
//! noise `w`. Month `t` of a simulation with seed `s` uses its own ChaCha
//! stream, so its draws do not depend on how many other months are simulated.

use ndarray::{s, Array1, Array2, ArrayView1, ArrayView2};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal, StudentT};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{CocoError, Result};
use crate::features::{build_feature_map, constant_id_feature, FeatureMap, KernelSpec, MixingMode};
use crate::linalg;
use crate::model::{fit_with_features, stack_covariates};
use crate::moments::{coco_moments, MomentEstimate};
use crate::objective::Lambdas;
use crate::panel::{DataPoint, Panel, PeriodRecord};
use crate::solver::{ParamU, SolverOptions};

/// Distribution of synthetic covariates.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum CovariateSampler {
    /// I.i.d. standard normal vectors of dimension `dim`.
    StandardNormal { dim: usize },
    /// Rows drawn uniformly with replacement from a reference matrix.
    Reference { rows: Array2<f64> },
}

impl CovariateSampler {
    pub fn dim(&self) -> usize {
        match self {
            CovariateSampler::StandardNormal { dim } => *dim,
            CovariateSampler::Reference { rows } => rows.ncols(),
        }
    }

    fn sample<R: Rng>(&self, n: usize, rng: &mut R) -> Array2<f64> {
        match self {
            CovariateSampler::StandardNormal { dim } => {
                Array2::from_shape_fn((n, *dim), |_| rng.sample::<f64, _>(StandardNormal))
            }
            CovariateSampler::Reference { rows } => {
                let mut out = Array2::zeros((n, rows.ncols()));
                for i in 0..n {
                    let k = rng.random_range(0..rows.nrows());
                    out.row_mut(i).assign(&rows.row(k));
                }
                out
            }
        }
    }
}

/// Innovation distribution of simulated returns.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize, Default)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum Innovations {
    #[default]
    Normal,
    /// Student-t with `dof > 2` degrees of freedom, rescaled to unit variance.
    /// A robustness extension; the reference design uses normal draws.
    StudentT { dof: f64 },
}

/// Population parameters of the data-generating model.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PopulationModel {
    pub b_pop: Array1<f64>,
    pub v_pop: Array2<f64>,
    pub u_id_pop: f64,
    pub feature_map: FeatureMap,
    pub covariates: CovariateSampler,
}

/// Settings of [`gen_population`].
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PopulationSpec {
    /// Population factor rank `m`.
    pub m: usize,
    /// Covariate dimension; 0 means `m`.
    pub d: usize,
    pub kernel: KernelSpec,
    /// Rows of the covariate sample the population features are built on.
    pub reference_rows: usize,
    /// Standard deviation of the mean loadings `b`.
    pub mean_scale: f64,
    pub u_id: f64,
}

impl Default for PopulationSpec {
    fn default() -> Self {
        Self {
            m: 40,
            d: 0,
            kernel: KernelSpec::cosine(),
            reference_rows: 400,
            mean_scale: 0.25,
            u_id: 1.0,
        }
    }
}

impl PopulationSpec {
    pub fn with_rank(m: usize) -> Self {
        Self { m, ..Self::default() }
    }
}

impl PopulationModel {
    pub fn m(&self) -> usize {
        self.b_pop.len()
    }

    /// `U_sy = [[1, bᵀ], [b, V]]`, `U_id = [[u_id]]`.
    pub fn param(&self) -> ParamU {
        let m = self.m();
        let mut u_sy = Array2::zeros((m + 1, m + 1));
        u_sy[[0, 0]] = 1.0;
        u_sy.slice_mut(s![1.., 0]).assign(&self.b_pop);
        u_sy.slice_mut(s![0, 1..]).assign(&self.b_pop);
        u_sy.slice_mut(s![1.., 1..]).assign(&self.v_pop);
        ParamU {
            u_sy,
            u_id: Array2::from_elem((1, 1), self.u_id_pop),
        }
    }

    /// Factor covariance `V − bbᵀ`.
    pub fn factor_cov(&self) -> Array2<f64> {
        self.v_pop.clone() - linalg::outer(self.b_pop.view(), self.b_pop.view())
    }

    pub fn validate(&self) -> Result<()> {
        let m = self.m();
        if self.v_pop.dim() != (m, m) || self.feature_map.rank != m {
            return Err(CocoError::dim(
                format!("V {m}x{m} and a rank-{m} feature map"),
                format!("V {:?}, rank {}", self.v_pop.dim(), self.feature_map.rank),
            ));
        }
        if !(self.u_id_pop >= 0.0) {
            return Err(CocoError::InvalidArgument("u_id_pop must be non-negative".into()));
        }
        self.param().check_feasible(0.0, 0.0)
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn from_json(s: &str) -> Result<Self> {
        let p: PopulationModel = serde_json::from_str(s)?;
        p.validate()?;
        Ok(p)
    }
}

/// Draws a random feasible population: `b ~ N(0, scale²)`,
/// `V − bbᵀ = LLᵀ/m` with Gaussian `L`, and population features from the
/// chosen kernel on a standard-normal covariate sample.
pub fn gen_population(spec: &PopulationSpec, seed: u64) -> Result<PopulationModel> {
    let m = spec.m;
    if m == 0 {
        return Err(CocoError::InvalidArgument("population rank must be ≥ 1".into()));
    }
    let d = if spec.d == 0 { m } else { spec.d };
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let sampler = CovariateSampler::StandardNormal { dim: d };
    let reference = sampler.sample(spec.reference_rows.max(m), &mut rng);
    let feature_map = build_feature_map(&spec.kernel, reference.view(), m, 0.0, MixingMode::Orthonormal)?;
    if feature_map.rank != m {
        return Err(CocoError::InvalidArgument(format!(
            "kernel {:?} on {d} covariates supports rank {} < {m}",
            spec.kernel.kind, feature_map.rank
        )));
    }
    let b: Array1<f64> = (0..m).map(|_| spec.mean_scale * rng.sample::<f64, _>(StandardNormal)).collect();
    let l = Array2::from_shape_fn((m, m), |_| rng.sample::<f64, _>(StandardNormal));
    let mut s = l.dot(&l.t()) / m as f64;
    linalg::symmetrize(&mut s);
    let v = s + linalg::outer(b.view(), b.view());
    Ok(PopulationModel {
        b_pop: b,
        v_pop: v,
        u_id_pop: spec.u_id,
        feature_map,
        covariates: sampler,
    })
}

/// RNG of month `t` under `seed`.
pub fn month_rng(seed: u64, t: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(t);
    rng
}

fn sym_sqrt(a: ArrayView2<f64>) -> Result<Array2<f64>> {
    if a.nrows() == 0 {
        return Ok(a.to_owned());
    }
    Ok(linalg::symmetric_eigen(a)?.reconstruct_with(|l| l.max(0.0).sqrt()))
}

fn innovation<R: Rng>(kind: Innovations, rng: &mut R) -> Result<f64> {
    match kind {
        Innovations::Normal => Ok(rng.sample(StandardNormal)),
        Innovations::StudentT { dof } => {
            if !(dof > 2.0) {
                return Err(CocoError::InvalidArgument("Student-t innovations need dof > 2".into()));
            }
            let t = StudentT::new(dof).map_err(|e| CocoError::InvalidArgument(e.to_string()))?;
            Ok(t.sample(rng) * ((dof - 2.0) / dof).sqrt())
        }
    }
}

/// Draws one month's returns for given features `Φ` (`N × m`).
pub fn draw_returns<R: Rng>(
    pop: &PopulationModel,
    phi: ArrayView2<f64>,
    s_half: ArrayView2<f64>,
    innovations: Innovations,
    rng: &mut R,
) -> Result<Array1<f64>> {
    let m = pop.m();
    let mut e = Array1::zeros(m);
    for v in e.iter_mut() {
        *v = innovation(innovations, rng)?;
    }
    let g = &pop.b_pop + &s_half.dot(&e);
    let mut x = phi.dot(&g);
    let scale = pop.u_id_pop.sqrt();
    for v in x.iter_mut() {
        *v += scale * innovation(innovations, rng)?;
    }
    Ok(x)
}

/// Simulates a panel with `sizes[t]` assets in month `t`.
pub fn simulate_panel(pop: &PopulationModel, sizes: &[usize], seed: u64, innovations: Innovations) -> Result<Panel> {
    if sizes.is_empty() || sizes.contains(&0) {
        return Err(CocoError::InvalidArgument("need at least one month with ≥ 1 asset each".into()));
    }
    let s_half = sym_sqrt(pop.factor_cov().view())?;
    let width = sizes.len().to_string().len().max(4);
    let periods = sizes
        .par_iter()
        .enumerate()
        .map(|(t, &n)| {
            let mut rng = month_rng(seed, t as u64);
            let z = pop.covariates.sample(n, &mut rng);
            let phi = pop.feature_map.evaluate(z.view())?;
            let x = draw_returns(pop, phi.view(), s_half.view(), innovations, &mut rng)?;
            Ok(PeriodRecord {
                date: format!("t{:0width$}", t + 1),
                asset_ids: (0..n).map(|i| format!("a{i}")).collect(),
                returns: x,
                covariates: z,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    let names = (1..=pop.covariates.dim()).map(|k| format!("z{k}")).collect();
    let mut panel = Panel::new(periods, names)?;
    panel.meta.source = Some(format!("simulated (seed {seed})"));
    Ok(panel)
}

/// Population moments of a cross section.
pub fn population_moments(pop: &PopulationModel, xi: &DataPoint) -> Result<MomentEstimate> {
    coco_moments(&pop.param(), &pop.feature_map, &constant_id_feature(), xi, 0.0)
}

/// One cell of the rate experiment.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AsymptoticsRow {
    pub t: usize,
    pub rep: usize,
    /// `log(‖vech U_sy,T − vech U_sy,pop‖² + (u_id,T − u_id,pop)²)`; `None`
    /// when the fit failed.
    pub log_dev: Option<f64>,
    pub converged: bool,
}

/// Feature maps used when fitting the rate-experiment panels.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum RateFeatures {
    /// Hold features at the population map, isolating parameter convergence.
    #[default]
    Population,
    /// Re-select Nyström pivots on every simulated panel with the population
    /// kernel and rank; fitted parameters are mapped back to the population
    /// basis before measuring the deviation.
    Reselect,
}

/// Settings of [`asymptotics_experiment`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AsymptoticsSpec {
    pub t_list: Vec<usize>,
    pub reps: usize,
    /// Assets per simulated month.
    pub n_assets: usize,
    pub features: RateFeatures,
    pub solver: SolverOptions,
}

impl Default for AsymptoticsSpec {
    fn default() -> Self {
        Self {
            t_list: vec![100, 400, 1600, 6400],
            reps: 100,
            n_assets: 50,
            features: RateFeatures::Population,
            solver: SolverOptions::unfloored(),
        }
    }
}

fn cell_seed(seed: u64, t: usize, rep: usize) -> u64 {
    // SplitMix64 finalizer over the cell coordinates.
    let mut z = seed ^ ((t as u64) << 32) ^ (rep as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Squared parameter deviation `‖vech U_sy − vech U_sy,pop‖² + (u_id − u_id,pop)²`.
pub fn squared_deviation(fit: &ParamU, pop: &ParamU) -> Result<f64> {
    let a = crate::objective::vech_of(fit.u_sy.view())?;
    let b = crate::objective::vech_of(pop.u_sy.view())?;
    if a.len() != b.len() {
        return Err(CocoError::dim(b.len(), a.len()));
    }
    let d = &a - &b;
    let du = fit.u_id[[0, 0]] - pop.u_id[[0, 0]];
    Ok(d.dot(&d) + du * du)
}

/// Fits a simulated panel of `t` months and returns the fitted parameters
/// in the population feature basis.
pub fn fit_simulated(
    pop: &PopulationModel,
    t: usize,
    n_assets: usize,
    seed: u64,
    features: RateFeatures,
    opts: &SolverOptions,
) -> Result<(ParamU, bool)> {
    let panel = simulate_panel(pop, &vec![n_assets; t], seed, Innovations::Normal)?;
    let points = panel.data_points()?;
    let phi_sy = match features {
        RateFeatures::Population => pop.feature_map.clone(),
        RateFeatures::Reselect => {
            let kernel = pop
                .feature_map
                .kernel()
                .ok_or_else(|| CocoError::InvalidArgument("population features have no kernel to re-select".into()))?;
            let z = stack_covariates(&points)?;
            build_feature_map(kernel, z.view(), pop.m(), 0.0, MixingMode::Orthonormal)?
        }
    };
    let fit = fit_with_features(&points, phi_sy, constant_id_feature(), Lambdas::default(), opts)?;
    let u = fit.report.u_star;
    if features == RateFeatures::Population {
        return Ok((u, fit.report.converged));
    }
    // Least-squares change of basis φ_fit ≈ φ_pop R on the training covariates,
    // then U ↦ T U Tᵀ with T = diag(1, R).
    let z = stack_covariates(&points)?;
    let phi_pop = pop.feature_map.evaluate(z.view())?;
    let phi_fit = fit.phi_sy.evaluate(z.view())?;
    let r = linalg::thin_svd(phi_pop.view())?.pinv(1e-12).dot(&phi_fit);
    let m = pop.m();
    let mut tm = Array2::zeros((m + 1, r.ncols() + 1));
    tm[[0, 0]] = 1.0;
    tm.slice_mut(s![1.., 1..]).assign(&r);
    let mut u_sy = tm.dot(&u.u_sy).dot(&tm.t());
    linalg::symmetrize(&mut u_sy);
    Ok((ParamU::new(u_sy, u.u_id)?, fit.report.converged))
}

/// Runs every `(T, rep)` cell and returns the table in `(T, rep)` order.
pub fn asymptotics_experiment(pop: &PopulationModel, spec: &AsymptoticsSpec, seed: u64) -> Result<Vec<AsymptoticsRow>> {
    if spec.reps < 2 {
        return Err(CocoError::InvalidArgument("rate experiment needs reps ≥ 2".into()));
    }
    let truth = pop.param();
    let cells: Vec<(usize, usize)> = spec
        .t_list
        .iter()
        .flat_map(|&t| (0..spec.reps).map(move |r| (t, r)))
        .collect();
    Ok(cells
        .par_iter()
        .map(|&(t, rep)| {
            match fit_simulated(pop, t, spec.n_assets, cell_seed(seed, t, rep), spec.features, &spec.solver)
                .and_then(|(u, conv)| Ok((squared_deviation(&u, &truth)?, conv)))
            {
                Ok((dev, converged)) => AsymptoticsRow {
                    t,
                    rep,
                    log_dev: Some(dev.ln()),
                    converged,
                },
                Err(e) => {
                    log::warn!("rate experiment cell T={t} rep={rep} failed: {e}");
                    AsymptoticsRow {
                        t,
                        rep,
                        log_dev: None,
                        converged: false,
                    }
                }
            }
        })
        .collect())
}

/// Median of the valid `log_dev` values for each `T`, in `t_list` order.
pub fn medians_by_t(rows: &[AsymptoticsRow], t_list: &[usize]) -> Vec<(usize, f64)> {
    t_list
        .iter()
        .map(|&t| {
            let mut v: Vec<f64> = rows.iter().filter(|r| r.t == t).filter_map(|r| r.log_dev).filter(|v| v.is_finite()).collect();
            (t, median(&mut v))
        })
        .collect()
}

pub(crate) fn median(v: &mut [f64]) -> f64 {
    if v.is_empty() {
        return f64::NAN;
    }
    v.sort_by(f64::total_cmp);
    let k = v.len();
    if k % 2 == 1 {
        v[k / 2]
    } else {
        0.5 * (v[k / 2 - 1] + v[k / 2])
    }
}

/// Ordinary least-squares slope of `y` on `x`.
pub fn ols_slope(x: ArrayView1<f64>, y: ArrayView1<f64>) -> Result<f64> {
    if x.len() != y.len() || x.len() < 2 {
        return Err(CocoError::InvalidArgument("slope needs ≥ 2 paired points".into()));
    }
    let n = x.len() as f64;
    let (mx, my) = (x.sum() / n, y.sum() / n);
    let sxx: f64 = x.iter().map(|a| (a - mx).powi(2)).sum();
    if sxx == 0.0 {
        return Err(CocoError::InvalidArgument("slope needs distinct x values".into()));
    }
    let sxy: f64 = x.iter().zip(y.iter()).map(|(a, b)| (a - mx) * (b - my)).sum();
    Ok(sxy / sxx)
}

/// Slope of the median log deviation on `log T`.
pub fn rate_slope(rows: &[AsymptoticsRow], t_list: &[usize]) -> Result<f64> {
    let med = medians_by_t(rows, t_list);
    let x: Array1<f64> = med.iter().map(|(t, _)| (*t as f64).ln()).collect();
    let y: Array1<f64> = med.iter().map(|(_, v)| *v).collect();
    if y.iter().any(|v| !v.is_finite()) {
        return Err(CocoError::Numerical("a sample size has no valid cells".into()));
    }
    ols_slope(x.view(), y.view())
}

/// Writes the `T,rep,log_dev` table preceded by optional `# ` comment lines.
pub fn write_asymptotics_csv<W: std::io::Write>(rows: &[AsymptoticsRow], comments: &[String], mut out: W) -> Result<()> {
    let io = |e: std::io::Error| CocoError::Serde(e.to_string());
    for c in comments {
        writeln!(out, "# {c}").map_err(io)?;
    }
    writeln!(out, "T,rep,log_dev").map_err(io)?;
    for r in rows {
        let v = r.log_dev.map(|v| format!("{v}")).unwrap_or_else(|| "NaN".into());
        writeln!(out, "{},{},{}", r.t, r.rep, v).map_err(io)?;
    }
    Ok(())
}
