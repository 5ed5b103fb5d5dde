//! Conditional moments implied by a fitted parameter, with fast precision
//! and log-determinant services, the conditional mean–variance efficient
//! portfolio, and factor portfolios.
//!
//! Covariance matrices are held in factored form `Σ = Φ S Φᵀ + diag(d)` and
//! never assembled densely outside of diagnostics.

use ndarray::{s, Array1, Array2, ArrayView1, ArrayView2, Axis};
use serde::{Deserialize, Serialize};

use crate::error::{CocoError, Result};
use crate::features::FeatureMap;
use crate::linalg;
use crate::panel::DataPoint;
use crate::solver::ParamU;

/// Relative cutoff below which eigenvalues of `S` are treated as zero.
pub const RANGE_CUTOFF: f64 = 1e-12;

/// A point of the extended covariate space: a covariate vector or the
/// auxiliary point Δ that carries the mean.
#[derive(Debug, Clone, Copy)]
pub enum Point<'a> {
    Delta,
    At(ArrayView1<'a, f64>),
}

impl Point<'_> {
    fn is_delta(&self) -> bool {
        matches!(self, Point::Delta)
    }
}

fn same_point(a: &Point, b: &Point) -> bool {
    match (a, b) {
        (Point::Delta, Point::Delta) => true,
        (Point::At(x), Point::At(y)) => x == y,
        _ => false,
    }
}

/// Evaluates the moment kernel
/// `q(z, z') = [1_{z=Δ}, φ_sy(z)] U_sy [1_{z'=Δ}, φ_sy(z')]ᵀ + φ_id(z) U_id φ_id(z')ᵀ 1_{z=z'}`.
pub fn moment_kernel(u: &ParamU, phi_sy: &FeatureMap, phi_id: &FeatureMap, z: Point, zp: Point) -> Result<f64> {
    let dims = u.dims();
    let border = |p: &Point| -> Result<Array1<f64>> {
        let mut v = Array1::zeros(dims.m_sy + 1);
        match p {
            Point::Delta => v[0] = 1.0,
            Point::At(c) => {
                let f = phi_sy.evaluate_one(*c)?;
                if f.len() != dims.m_sy {
                    return Err(CocoError::dim(dims.m_sy, f.len()));
                }
                v.slice_mut(s![1..]).assign(&f);
            }
        }
        Ok(v)
    };
    let (a, b) = (border(&z)?, border(&zp)?);
    let mut q = a.dot(&u.u_sy.dot(&b));
    if same_point(&z, &zp) && !z.is_delta() {
        if let Point::At(c) = z {
            let f = phi_id.evaluate_one(c)?;
            if f.len() != dims.m_id {
                return Err(CocoError::dim(dims.m_id, f.len()));
            }
            q += f.dot(&u.u_id.dot(&f));
        }
    }
    Ok(q)
}

/// Cached reduced Woodbury factorization: `Σ = D + B Bᵀ` with
/// `B = Φ E_r Λ_r^{1/2}` and `core = I + Bᵀ D⁻¹ B = L Lᵀ`.
#[derive(Debug, Clone)]
struct Woodbury {
    b: Array2<f64>,
    core_chol: Array2<f64>,
}

/// Factored conditional moments of one cross section.
#[derive(Debug, Clone)]
pub struct MomentEstimate {
    pub mu: Array1<f64>,
    pub phi_sy: Array2<f64>,
    /// Conditional factor covariance `V − bbᵀ`.
    pub s: Array2<f64>,
    pub sigma_id_diag: Array1<f64>,
    cache: Option<Woodbury>,
}

/// Serializable factored form of a [`MomentEstimate`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FactoredMoments {
    pub mu: Array1<f64>,
    pub phi_sy: Array2<f64>,
    pub s: Array2<f64>,
    pub sigma_id_diag: Array1<f64>,
}

impl MomentEstimate {
    pub fn new(mu: Array1<f64>, phi_sy: Array2<f64>, s: Array2<f64>, sigma_id_diag: Array1<f64>) -> Result<Self> {
        let n = mu.len();
        if phi_sy.nrows() != n || sigma_id_diag.len() != n || s.dim() != (phi_sy.ncols(), phi_sy.ncols()) {
            return Err(CocoError::dim(
                format!("N = {n}, Φ N×m, S m×m"),
                format!("Φ {:?}, S {:?}, d {}", phi_sy.dim(), s.dim(), sigma_id_diag.len()),
            ));
        }
        if mu.iter().chain(phi_sy.iter()).chain(s.iter()).chain(sigma_id_diag.iter()).any(|v| !v.is_finite()) {
            return Err(CocoError::Numerical("non-finite moment components".into()));
        }
        let mut est = Self {
            mu,
            phi_sy,
            s,
            sigma_id_diag,
            cache: None,
        };
        if est.sigma_id_diag.iter().all(|&d| d > 0.0) {
            est.cache = Some(est.build_cache()?);
        }
        Ok(est)
    }

    fn build_cache(&self) -> Result<Woodbury> {
        let n = self.len();
        let m = self.s.nrows();
        let mut b = Array2::<f64>::zeros((n, 0));
        if m > 0 {
            let eig = linalg::symmetric_eigen(self.s.view())?;
            let lmax = eig.max_value();
            let keep: Vec<usize> = (0..m).filter(|&k| lmax > 0.0 && eig.values[k] >= RANGE_CUTOFF * lmax).collect();
            let mut e = Array2::<f64>::zeros((m, keep.len()));
            for (c, &k) in keep.iter().enumerate() {
                e.column_mut(c).assign(&(&eig.vectors.column(k) * eig.values[k].sqrt()));
            }
            b = self.phi_sy.dot(&e);
        }
        let r = b.ncols();
        let dinv_b = &b / &self.sigma_id_diag.view().insert_axis(Axis(1));
        let mut core = b.t().dot(&dinv_b);
        for k in 0..r {
            core[[k, k]] += 1.0;
        }
        linalg::symmetrize(&mut core);
        let core_chol = linalg::cholesky(core.view())?;
        Ok(Woodbury { b, core_chol })
    }

    fn woodbury(&self) -> Result<&Woodbury> {
        self.cache
            .as_ref()
            .ok_or_else(|| CocoError::Numerical("idiosyncratic variance has a zero entry; Σ is not invertible".into()))
    }

    pub fn len(&self) -> usize {
        self.mu.len()
    }

    pub fn is_empty(&self) -> bool {
        self.mu.is_empty()
    }

    pub fn factors(&self) -> usize {
        self.s.nrows()
    }

    /// `tr(Φ S Φᵀ)`.
    pub fn trace_systematic(&self) -> f64 {
        self.s.dot(&self.phi_sy.t().dot(&self.phi_sy)).diag().sum()
    }

    /// `tr(Σ)`.
    pub fn trace(&self) -> f64 {
        self.trace_systematic() + self.sigma_id_diag.sum()
    }

    /// `Σ v` without assembling `Σ`.
    pub fn sigma_apply(&self, v: ArrayView1<f64>) -> Array1<f64> {
        let sys = self.phi_sy.dot(&self.s.dot(&self.phi_sy.t().dot(&v)));
        sys + &(&self.sigma_id_diag * &v)
    }

    /// Dense `Σ`; diagnostics and tests only.
    pub fn assemble_dense(&self) -> Array2<f64> {
        let mut sigma = self.phi_sy.dot(&self.s).dot(&self.phi_sy.t());
        for (i, d) in self.sigma_id_diag.iter().enumerate() {
            sigma[[i, i]] += d;
        }
        linalg::symmetrize(&mut sigma);
        sigma
    }

    pub fn to_factored(&self) -> FactoredMoments {
        FactoredMoments {
            mu: self.mu.clone(),
            phi_sy: self.phi_sy.clone(),
            s: self.s.clone(),
            sigma_id_diag: self.sigma_id_diag.clone(),
        }
    }

    pub fn from_factored(f: FactoredMoments) -> Result<Self> {
        Self::new(f.mu, f.phi_sy, f.s, f.sigma_id_diag)
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string(&self.to_factored())?)
    }

    pub fn from_json(s: &str) -> Result<Self> {
        Self::from_factored(serde_json::from_str(s)?)
    }

    /// Writes `asset_id,mu` rows.
    pub fn write_mu_csv<W: std::io::Write>(&self, asset_ids: &[String], out: W) -> Result<()> {
        if asset_ids.len() != self.len() {
            return Err(CocoError::dim(self.len(), asset_ids.len()));
        }
        let mut w = csv::Writer::from_writer(out);
        let ser = |e: csv::Error| CocoError::Serde(e.to_string());
        w.write_record(["asset_id", "mu"]).map_err(ser)?;
        for (id, m) in asset_ids.iter().zip(self.mu.iter()) {
            w.write_record([id.as_str(), &format!("{m}")]).map_err(ser)?;
        }
        w.flush().map_err(|e| CocoError::Serde(e.to_string()))?;
        Ok(())
    }
}

/// Conditional moments of one cross section under the parameter `u`.
pub fn coco_moments(
    u: &ParamU,
    phi_sy: &FeatureMap,
    phi_id: &FeatureMap,
    xi: &DataPoint,
    floor_id: f64,
) -> Result<MomentEstimate> {
    let fs = phi_sy.evaluate(xi.covariates())?;
    let fi = phi_id.evaluate(xi.covariates())?;
    moments_from_features(u, fs, fi.view(), floor_id)
}

/// As [`coco_moments`], from evaluated features.
pub fn moments_from_features(u: &ParamU, phi_sy: Array2<f64>, phi_id: ArrayView2<f64>, floor_id: f64) -> Result<MomentEstimate> {
    let dims = u.dims();
    if phi_sy.ncols() != dims.m_sy || phi_id.ncols() != dims.m_id || phi_id.nrows() != phi_sy.nrows() {
        return Err(CocoError::dim(
            format!("features with {} and {} columns", dims.m_sy, dims.m_id),
            format!("{:?} and {:?}", phi_sy.dim(), phi_id.dim()),
        ));
    }
    if phi_sy.iter().chain(phi_id.iter()).any(|v| !v.is_finite()) {
        return Err(CocoError::Numerical("non-finite feature values".into()));
    }
    let mu = phi_sy.dot(&u.b());
    let mut s = u.schur();
    linalg::symmetrize(&mut s);
    let diag: Array1<f64> = phi_id
        .rows()
        .into_iter()
        .map(|f| f.dot(&u.u_id.dot(&f)).max(floor_id))
        .collect();
    MomentEstimate::new(mu, phi_sy, s, diag)
}

/// `Σ⁻¹ v` by the diagonal-plus-low-rank identity in the range of `S`.
pub fn precision_apply(est: &MomentEstimate, v: ArrayView1<f64>) -> Result<Array1<f64>> {
    if v.len() != est.len() {
        return Err(CocoError::dim(est.len(), v.len()));
    }
    let w = est.woodbury()?;
    let dinv_v = &v / &est.sigma_id_diag;
    if w.b.ncols() == 0 {
        return Ok(dinv_v);
    }
    let rhs = w.b.t().dot(&dinv_v);
    let inner = linalg::cholesky_solve(w.core_chol.view(), rhs.view());
    let corr = w.b.dot(&inner) / &est.sigma_id_diag;
    Ok(dinv_v - corr)
}

/// `log det Σ = Σ log dᵢ + log det(I + S^{1/2} Φᵀ D⁻¹ Φ S^{1/2})`.
pub fn log_det(est: &MomentEstimate) -> Result<f64> {
    let w = est.woodbury()?;
    let v = est.sigma_id_diag.iter().map(|d| d.ln()).sum::<f64>() + linalg::cholesky_log_det(w.core_chol.view());
    if !v.is_finite() {
        return Err(CocoError::Numerical("non-finite log-determinant".into()));
    }
    Ok(v)
}

/// Conditional mean–variance efficient weights `Σ⁻¹μ` and the predicted
/// per-period maximum Sharpe ratio `sqrt(μᵀΣ⁻¹μ)`.
pub fn cmve(est: &MomentEstimate) -> Result<(Array1<f64>, f64)> {
    let w = precision_apply(est, est.mu.view())?;
    let sharpe = est.mu.dot(&w).max(0.0).sqrt();
    Ok((w, sharpe))
}

/// Weighted least-squares factor returns `f = (Wφ)⁺ W x` and residuals
/// `x − φ f`, with `W = diag(id_weights)` (identity by default).
pub fn factor_portfolios(
    phi: ArrayView2<f64>,
    x: ArrayView1<f64>,
    id_weights: Option<ArrayView1<f64>>,
) -> Result<(Array1<f64>, Array1<f64>)> {
    let l = factor_map(phi, id_weights)?;
    if x.len() != phi.nrows() {
        return Err(CocoError::dim(phi.nrows(), x.len()));
    }
    let f = l.dot(&x);
    let resid = &x - &phi.dot(&f);
    Ok((f, resid))
}

/// The linear map `L = (Wφ)⁺ W` from returns to factor-portfolio returns.
pub fn factor_map(phi: ArrayView2<f64>, id_weights: Option<ArrayView1<f64>>) -> Result<Array2<f64>> {
    let n = phi.nrows();
    let w = match id_weights {
        Some(w) => {
            if w.len() != n {
                return Err(CocoError::dim(n, w.len()));
            }
            if w.iter().any(|&v| !(v > 0.0) || !v.is_finite()) {
                return Err(CocoError::InvalidArgument("factor weights must be positive".into()));
            }
            w.to_owned()
        }
        None => Array1::ones(n),
    };
    let wphi = &phi * &w.view().insert_axis(Axis(1));
    let pinv = linalg::thin_svd(wphi.view())?.pinv(1e-12);
    Ok(pinv * &w.view().insert_axis(Axis(0)))
}

/// Conditional covariance of the factor portfolios: `L Σ Lᵀ`.
pub fn factor_covariance(est: &MomentEstimate, id_weights: Option<ArrayView1<f64>>) -> Result<Array2<f64>> {
    let l = factor_map(est.phi_sy.view(), id_weights)?;
    let lphi = l.dot(&est.phi_sy);
    let mut cov = lphi.dot(&est.s).dot(&lphi.t());
    let ld = &l * &est.sigma_id_diag.view().insert_axis(Axis(0));
    cov += &ld.dot(&l.t());
    linalg::symmetrize(&mut cov);
    Ok(cov)
}

/// Share of total variance spanned by the factor portfolios:
/// `tr(Φ f_cov Φᵀ) / tr(Σ)`.
pub fn systematic_ratio(est: &MomentEstimate, f_cov: ArrayView2<f64>) -> Result<f64> {
    let m = est.factors();
    if f_cov.dim() != (m, m) {
        return Err(CocoError::dim(format!("{m}x{m}"), format!("{:?}", f_cov.dim())));
    }
    let total = est.trace();
    if total == 0.0 {
        return Err(CocoError::Numerical("total variance is zero".into()));
    }
    let num = f_cov.dot(&est.phi_sy.t().dot(&est.phi_sy)).diag().sum();
    Ok(num / total)
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    fn example() -> MomentEstimate {
        let u = ParamU::new(array![[1.0, 0.5], [0.5, 1.0]], array![[2.0]]).unwrap();
        moments_from_features(&u, array![[1.0], [1.0]], array![[1.0], [1.0]].view(), 0.0).unwrap()
    }

    #[test]
    fn example_moments() {
        let e = example();
        assert_eq!(e.mu.to_vec(), vec![0.5, 0.5]);
        let sigma = e.assemble_dense();
        assert!((sigma[[0, 0]] - 2.75).abs() < 1e-15);
        assert!((sigma[[0, 1]] - 0.75).abs() < 1e-15);
    }

    #[test]
    fn example_precision_and_cmve() {
        let e = example();
        let p = precision_apply(&e, e.mu.view()).unwrap();
        for v in p.iter() {
            assert!((v - 1.0 / 7.0).abs() < 1e-14);
        }
        let (w, sr) = cmve(&e).unwrap();
        assert!((sr - (1.0f64 / 7.0).sqrt()).abs() < 1e-14);
        let realized = e.mu.dot(&w) / w.dot(&e.sigma_apply(w.view())).sqrt();
        assert!((realized - sr).abs() < 1e-12);
    }

    #[test]
    fn log_det_examples() {
        let e = MomentEstimate::new(array![0.0, 0.0], array![[1.0], [1.0]], array![[0.75]], array![1.0, 1.0]).unwrap();
        assert!((log_det(&e).unwrap() - 2.5f64.ln()).abs() < 1e-14);
        let e = MomentEstimate::new(array![0.0, 0.0], Array2::zeros((2, 1)), array![[0.0]], array![1.0, 1.0]).unwrap();
        assert_eq!(log_det(&e).unwrap(), 0.0);
        let v = array![1.0, -2.0];
        assert_eq!(precision_apply(&e, v.view()).unwrap(), v);
    }

    #[test]
    fn zero_idiosyncratic_entry_is_an_error() {
        let e = MomentEstimate::new(array![0.0], array![[1.0]], array![[1.0]], array![0.0]).unwrap();
        assert!(precision_apply(&e, array![1.0].view()).is_err());
        assert!(log_det(&e).is_err());
    }

    #[test]
    fn factor_portfolio_examples() {
        let phi = array![[1.0], [1.0]];
        let (f, eps) = factor_portfolios(phi.view(), array![1.0, 3.0].view(), None).unwrap();
        assert!((f[0] - 2.0).abs() < 1e-14);
        assert!((eps[0] + 1.0).abs() < 1e-14 && (eps[1] - 1.0).abs() < 1e-14);
        let w = array![1.0, 2.0];
        let (f1, _) = factor_portfolios(phi.view(), array![1.0, 3.0].view(), Some(w.view())).unwrap();
        let w2 = &w * 2.0;
        let (f2, _) = factor_portfolios(phi.view(), array![1.0, 3.0].view(), Some(w2.view())).unwrap();
        assert!((f1[0] - f2[0]).abs() < 1e-14);
    }

    #[test]
    fn kernel_at_delta() {
        let u = ParamU::new(array![[1.0, 0.5], [0.5, 1.0]], array![[2.0]]).unwrap();
        let one = crate::features::constant_id_feature();
        let z = array![0.3];
        assert_eq!(moment_kernel(&u, &one, &one, Point::Delta, Point::Delta).unwrap(), 1.0);
        assert_eq!(moment_kernel(&u, &one, &one, Point::At(z.view()), Point::Delta).unwrap(), 0.5);
        assert_eq!(moment_kernel(&u, &one, &one, Point::At(z.view()), Point::At(z.view())).unwrap(), 3.0);
        let z2 = array![0.4];
        assert_eq!(moment_kernel(&u, &one, &one, Point::At(z.view()), Point::At(z2.view())).unwrap(), 1.0);
    }

    #[test]
    fn zero_systematic_ratio() {
        let e = MomentEstimate::new(array![0.0, 0.0], array![[1.0], [1.0]], array![[0.0]], array![1.0, 1.0]).unwrap();
        assert_eq!(systematic_ratio(&e, array![[0.0]].view()).unwrap(), 0.0);
    }
}
