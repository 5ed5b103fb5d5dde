//! Out-of-sample metrics and their rolling / expanding aggregation.

use ndarray::{Array2, ArrayView1, ArrayView2, Axis};
use serde::{Deserialize, Serialize};

use crate::error::{CocoError, Result};
use crate::moments::{log_det, precision_apply, MomentEstimate};

/// Annualization factor for monthly Sharpe ratios.
pub const ANNUALIZE: f64 = 3.464_101_615_137_754_6; // √12

/// Dawid–Sebastiani score `log det Σ + (x − μ)ᵀ Σ⁻¹ (x − μ)`; lower is better.
pub fn dawid_sebastiani(x: ArrayView1<f64>, mu: ArrayView1<f64>, est: &MomentEstimate) -> Result<f64> {
    if x.len() != mu.len() || x.len() != est.len() {
        return Err(CocoError::dim(est.len(), format!("x {}, μ {}", x.len(), mu.len())));
    }
    let e = &x - &mu;
    Ok(log_det(est)? + e.dot(&precision_apply(est, e.view())?))
}

/// Mean of `benchmark − model` scores; positive favours the model.
pub fn score_differential(terms: &[(f64, f64)]) -> Result<f64> {
    if terms.is_empty() {
        return Err(CocoError::Data("score differential over zero months".into()));
    }
    Ok(terms.iter().map(|(b, m)| b - m).sum::<f64>() / terms.len() as f64)
}

/// Numerator and denominator terms `(w‖x − μ‖², w‖x‖²)` of one month.
pub fn r2_first_terms(x: ArrayView1<f64>, mu: ArrayView1<f64>, w: f64) -> Result<(f64, f64)> {
    if x.len() != mu.len() {
        return Err(CocoError::dim(x.len(), mu.len()));
    }
    let e = &x - &mu;
    Ok((w * e.dot(&e), w * x.dot(&x)))
}

fn pooled_ratio(terms: &[(f64, f64)]) -> Result<f64> {
    let (num, den) = terms.iter().fold((0.0, 0.0), |(a, b), (n, d)| (a + n, b + d));
    if den == 0.0 {
        return Err(CocoError::Numerical("R² denominator is zero".into()));
    }
    Ok(1.0 - num / den)
}

/// Predictive R² of the conditional mean: `1 − Σ w‖x − μ‖² / Σ w‖x‖²`.
pub fn r2_first(months: &[(ArrayView1<f64>, ArrayView1<f64>, f64)]) -> Result<f64> {
    let terms = months
        .iter()
        .map(|(x, mu, w)| r2_first_terms(*x, *mu, *w))
        .collect::<Result<Vec<_>>>()?;
    pooled_ratio(&terms)
}

/// `‖x xᵀ − A C Aᵀ − diag(d)‖²_F` through `k`-dimensional traces, with `A`
/// of size `N × k` and symmetric `C`.
pub fn second_moment_error(x: ArrayView1<f64>, a: ArrayView2<f64>, c: ArrayView2<f64>, d: ArrayView1<f64>) -> Result<f64> {
    let n = x.len();
    if a.nrows() != n || d.len() != n || c.dim() != (a.ncols(), a.ncols()) {
        return Err(CocoError::dim(
            format!("N = {n}, A N×k, C k×k"),
            format!("A {:?}, C {:?}, d {}", a.dim(), c.dim(), d.len()),
        ));
    }
    let xx = x.dot(&x);
    let g = a.t().dot(&a);
    let cg = c.dot(&g);
    let tr_cgcg = (&cg * &cg.t()).sum();
    let ax = a.t().dot(&x);
    let quad = ax.dot(&c.dot(&ax));
    let ac = a.dot(&c);
    let diag_model = (&ac * &a).sum_axis(Axis(1));
    let x2 = &x * &x;
    let v = xx * xx + tr_cgcg + d.dot(&d) - 2.0 * quad - 2.0 * d.dot(&x2) + 2.0 * d.dot(&diag_model);
    Ok(v.max(0.0))
}

/// Numerator and denominator of the second-moment R² for one month. The
/// model's second moment is `Φ S Φᵀ + μμᵀ + diag(d)`; the benchmark's is
/// `σ²_bm I`.
pub fn r2_second_terms(x: ArrayView1<f64>, est: &MomentEstimate, sigma_bm: f64, w: f64) -> Result<(f64, f64)> {
    let n = x.len();
    if est.len() != n {
        return Err(CocoError::dim(n, est.len()));
    }
    let m = est.factors();
    let mut a = Array2::<f64>::zeros((n, m + 1));
    a.slice_mut(ndarray::s![.., ..m]).assign(&est.phi_sy);
    a.column_mut(m).assign(&est.mu);
    let mut c = Array2::<f64>::zeros((m + 1, m + 1));
    c.slice_mut(ndarray::s![..m, ..m]).assign(&est.s);
    c[[m, m]] = 1.0;
    let num = second_moment_error(x, a.view(), c.view(), est.sigma_id_diag.view())?;
    let xx = x.dot(&x);
    let den = xx * xx - 2.0 * sigma_bm * xx + sigma_bm * sigma_bm * n as f64;
    Ok((w * num, w * den))
}

/// Second-moment R²: `1 − Σ w‖xxᵀ − M̂‖²_F / Σ w‖xxᵀ − σ²_bm I‖²_F`.
pub fn r2_second(months: &[(ArrayView1<f64>, &MomentEstimate, f64, f64)]) -> Result<f64> {
    let terms = months
        .iter()
        .map(|(x, est, s, w)| r2_second_terms(*x, est, *s, *w))
        .collect::<Result<Vec<_>>>()?;
    pooled_ratio(&terms)
}

/// `‖x − Φf‖² / ‖x‖²` for one month.
pub fn total_r2_term(x: ArrayView1<f64>, phi: ArrayView2<f64>, f: ArrayView1<f64>) -> Result<f64> {
    if phi.nrows() != x.len() || phi.ncols() != f.len() {
        return Err(CocoError::dim(format!("{}x{}", x.len(), f.len()), format!("{:?}", phi.dim())));
    }
    let xx = x.dot(&x);
    if xx == 0.0 {
        return Err(CocoError::Numerical("zero return vector in total R²".into()));
    }
    let e = &x - &phi.dot(&f);
    Ok(e.dot(&e) / xx)
}

/// Total R² of the factor portfolios: `1 − mean ‖x − Φf‖² / ‖x‖²`.
pub fn total_r2_factors(months: &[(ArrayView1<f64>, ArrayView2<f64>, ArrayView1<f64>)]) -> Result<f64> {
    if months.is_empty() {
        return Err(CocoError::Data("total R² over zero months".into()));
    }
    let mut acc = 0.0;
    for (x, phi, f) in months {
        acc += total_r2_term(*x, *phi, *f)?;
    }
    Ok(1.0 - acc / months.len() as f64)
}

/// Annualized Sharpe ratio `√12 · mean / std` with the population standard
/// deviation (divisor `T`).
pub fn realized_sharpe(returns: &[f64]) -> Result<f64> {
    if returns.len() < 2 {
        return Err(CocoError::Data("Sharpe ratio needs at least two months".into()));
    }
    let t = returns.len() as f64;
    let mean = returns.iter().sum::<f64>() / t;
    let var = returns.iter().map(|r| (r - mean).powi(2)).sum::<f64>() / t;
    if !(var > 0.0) {
        return Err(CocoError::Numerical("zero variance in Sharpe ratio".into()));
    }
    Ok(ANNUALIZE * mean / var.sqrt())
}

/// Aggregation window.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Window {
    Rolling(usize),
    Expanding,
}

impl std::fmt::Display for Window {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Window::Rolling(r) => write!(f, "rolling{r}"),
            Window::Expanding => write!(f, "expanding"),
        }
    }
}

/// How raw monthly terms combine over a window.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Aggregation {
    /// `1 − Σ num / Σ den`.
    PooledRatio,
    /// Arithmetic mean of `num`.
    Mean,
    /// `1 − mean(num)`.
    OneMinusMean,
    /// Annualized Sharpe ratio of `num` (NaN with fewer than two months).
    Sharpe,
}

/// Raw per-month terms of one metric.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricTerms {
    pub kind: String,
    pub aggregation: Aggregation,
    pub dates: Vec<String>,
    pub num: Vec<f64>,
    /// Only used by [`Aggregation::PooledRatio`].
    pub den: Vec<f64>,
}

impl MetricTerms {
    pub fn new(kind: impl Into<String>, aggregation: Aggregation) -> Self {
        Self {
            kind: kind.into(),
            aggregation,
            dates: Vec::new(),
            num: Vec::new(),
            den: Vec::new(),
        }
    }

    pub fn push(&mut self, date: impl Into<String>, num: f64, den: f64) {
        self.dates.push(date.into());
        self.num.push(num);
        self.den.push(den);
    }

    pub fn len(&self) -> usize {
        self.dates.len()
    }

    pub fn is_empty(&self) -> bool {
        self.dates.is_empty()
    }

    fn combine(&self, lo: usize, hi: usize) -> f64 {
        let num = &self.num[lo..hi];
        let k = (hi - lo) as f64;
        match self.aggregation {
            Aggregation::PooledRatio => {
                let den: f64 = self.den[lo..hi].iter().sum();
                if den == 0.0 {
                    f64::NAN
                } else {
                    1.0 - num.iter().sum::<f64>() / den
                }
            }
            Aggregation::Mean => num.iter().sum::<f64>() / k,
            Aggregation::OneMinusMean => 1.0 - num.iter().sum::<f64>() / k,
            Aggregation::Sharpe => realized_sharpe(num).unwrap_or(f64::NAN),
        }
    }

    /// Value over all months.
    pub fn overall(&self) -> f64 {
        if self.is_empty() {
            return f64::NAN;
        }
        self.combine(0, self.len())
    }
}

/// A metric evaluated over a sequence of windows, labelled by each window's
/// last month.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricSeries {
    pub kind: String,
    pub window: Window,
    pub dates: Vec<String>,
    pub values: Vec<f64>,
}

/// Rolling or expanding aggregation of raw monthly terms. Ratio metrics
/// pool the window sums. A rolling window longer than the series yields an
/// empty series.
pub fn windowed(terms: &MetricTerms, window: Window) -> Result<MetricSeries> {
    let n = terms.len();
    let (mut dates, mut values) = (Vec::new(), Vec::new());
    match window {
        Window::Rolling(0) => return Err(CocoError::InvalidArgument("rolling window must be ≥ 1".into())),
        Window::Rolling(r) => {
            if r <= n {
                for end in r..=n {
                    dates.push(terms.dates[end - 1].clone());
                    values.push(terms.combine(end - r, end));
                }
            }
        }
        Window::Expanding => {
            for end in 1..=n {
                dates.push(terms.dates[end - 1].clone());
                values.push(terms.combine(0, end));
            }
        }
    }
    Ok(MetricSeries {
        kind: terms.kind.clone(),
        window,
        dates,
        values,
    })
}

/// Writes series as tidy CSV with columns `date,metric,window,value`,
/// preceded by optional `# ` comment lines.
pub fn write_metrics_csv<W: std::io::Write>(series: &[MetricSeries], comments: &[String], mut out: W) -> Result<()> {
    let io = |e: std::io::Error| CocoError::Serde(e.to_string());
    for c in comments {
        writeln!(out, "# {c}").map_err(io)?;
    }
    let mut w = csv::Writer::from_writer(out);
    let ser = |e: csv::Error| CocoError::Serde(e.to_string());
    w.write_record(["date", "metric", "window", "value"]).map_err(ser)?;
    for s in series {
        let label = s.window.to_string();
        for (d, v) in s.dates.iter().zip(&s.values) {
            w.write_record([d.as_str(), s.kind.as_str(), label.as_str(), &format!("{v}")]).map_err(ser)?;
        }
    }
    w.flush().map_err(io)?;
    Ok(())
}
