//! Scalar kernels, greedy pivoted Cholesky, and Nyström feature maps.
//!
//! A feature map is `φ(z) = k(z, Z_Π) B`, where `Z_Π` holds the pivot rows
//! selected by a pivoted Cholesky factorization of the kernel matrix and `B`
//! is an invertible mixing matrix. With the orthonormal choice
//! `B Bᵀ = k(Z_Π, Z_Π)⁻¹` the features are orthonormal in the RKHS and their
//! Gram matrix is the identity.

use ndarray::{s, Array1, Array2, ArrayView1, ArrayView2, Axis};
use serde::{Deserialize, Serialize};

use crate::error::{CocoError, Result};
use crate::linalg;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum KernelKind {
    /// `⟨z, z'⟩ / (‖z‖ ‖z'‖)`; no hyperparameter.
    Cosine,
    /// `exp(−‖z − z'‖² / (2ρ))`.
    Gaussian,
    /// `exp(−‖z − z'‖ / ρ)`.
    Laplace,
    /// `1 / sqrt(‖z − z'‖² + ρ)`.
    Imq,
}

impl std::str::FromStr for KernelKind {
    type Err = CocoError;
    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "cosine" => Ok(Self::Cosine),
            "gaussian" | "gauss" => Ok(Self::Gaussian),
            "laplace" => Ok(Self::Laplace),
            "imq" => Ok(Self::Imq),
            other => Err(CocoError::InvalidArgument(format!("unknown kernel `{other}`"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct KernelSpec {
    pub kind: KernelKind,
    /// Length-scale; ignored by the cosine kernel.
    #[serde(default = "one")]
    pub rho: f64,
}

fn one() -> f64 {
    1.0
}

impl KernelSpec {
    pub fn cosine() -> Self {
        Self { kind: KernelKind::Cosine, rho: 1.0 }
    }

    pub fn gaussian(rho: f64) -> Self {
        Self { kind: KernelKind::Gaussian, rho }
    }

    pub fn laplace(rho: f64) -> Self {
        Self { kind: KernelKind::Laplace, rho }
    }

    pub fn imq(rho: f64) -> Self {
        Self { kind: KernelKind::Imq, rho }
    }

    pub fn uses_rho(&self) -> bool {
        self.kind != KernelKind::Cosine
    }

    pub fn validate(&self) -> Result<()> {
        if self.uses_rho() && !(self.rho > 0.0 && self.rho.is_finite()) {
            return Err(CocoError::InvalidArgument(format!(
                "{:?} kernel needs rho > 0, got {}",
                self.kind, self.rho
            )));
        }
        Ok(())
    }

    /// `k(z, z)`, which is constant for all supported kernels.
    fn self_value(&self) -> f64 {
        match self.kind {
            KernelKind::Imq => 1.0 / self.rho.sqrt(),
            _ => 1.0,
        }
    }

    fn from_parts(&self, dot: f64, sq_dist: f64, norm_a: f64, norm_b: f64) -> f64 {
        match self.kind {
            KernelKind::Cosine => dot / (norm_a * norm_b),
            KernelKind::Gaussian => (-sq_dist.max(0.0) / (2.0 * self.rho)).exp(),
            KernelKind::Laplace => (-sq_dist.max(0.0).sqrt() / self.rho).exp(),
            KernelKind::Imq => 1.0 / (sq_dist.max(0.0) + self.rho).sqrt(),
        }
    }
}

/// Evaluates `k(z, z')`.
pub fn eval_kernel(spec: &KernelSpec, z: ArrayView1<f64>, zp: ArrayView1<f64>) -> Result<f64> {
    spec.validate()?;
    if z.len() != zp.len() {
        return Err(CocoError::dim(z.len(), zp.len()));
    }
    let dot = z.dot(&zp);
    let (na, nb) = (z.dot(&z).sqrt(), zp.dot(&zp).sqrt());
    if spec.kind == KernelKind::Cosine && (na == 0.0 || nb == 0.0) {
        return Err(CocoError::InvalidArgument(
            "cosine kernel undefined for a zero vector".into(),
        ));
    }
    Ok(spec.from_parts(dot, sq_dist(z, zp), na, nb))
}

// Differences rather than `‖a‖² + ‖b‖² − 2a·b`, which cancels for nearby
// points; the Laplace kernel's square root would amplify the error.
fn sq_dist(a: ArrayView1<f64>, b: ArrayView1<f64>) -> f64 {
    a.iter().zip(b.iter()).map(|(x, y)| (x - y) * (x - y)).sum()
}

fn row_norms(z: ArrayView2<f64>) -> Array1<f64> {
    z.axis_iter(Axis(0)).map(|r| r.dot(&r).sqrt()).collect()
}

fn check_cosine_rows(spec: &KernelSpec, norms: &Array1<f64>) -> Result<()> {
    if spec.kind == KernelKind::Cosine {
        if let Some(i) = norms.iter().position(|&n| n == 0.0) {
            return Err(CocoError::Data(format!(
                "cosine kernel undefined: covariate row {i} is the zero vector"
            )));
        }
    }
    Ok(())
}

/// Kernel matrix `k(A, Bᵀ)` between the rows of `a` and `b`.
pub fn kernel_matrix(spec: &KernelSpec, a: ArrayView2<f64>, b: ArrayView2<f64>) -> Result<Array2<f64>> {
    spec.validate()?;
    if a.ncols() != b.ncols() {
        return Err(CocoError::dim(a.ncols(), b.ncols()));
    }
    let na = row_norms(a);
    let nb = row_norms(b);
    check_cosine_rows(spec, &na)?;
    check_cosine_rows(spec, &nb)?;
    let dots = a.dot(&b.t());
    let mut out = Array2::<f64>::zeros((a.nrows(), b.nrows()));
    for i in 0..a.nrows() {
        for j in 0..b.nrows() {
            out[[i, j]] = spec.from_parts(dots[[i, j]], sq_dist(a.row(i), b.row(j)), na[i], nb[j]);
        }
    }
    Ok(out)
}

/// Access to a symmetric PSD matrix through its diagonal and single columns.
pub trait KernelOracle {
    fn size(&self) -> usize;
    fn diagonal(&self) -> Result<Array1<f64>>;
    fn column(&self, j: usize) -> Result<Array1<f64>>;
}

/// Oracle over an explicitly stored matrix.
pub struct DenseOracle<'a>(pub ArrayView2<'a, f64>);

impl KernelOracle for DenseOracle<'_> {
    fn size(&self) -> usize {
        self.0.nrows()
    }
    fn diagonal(&self) -> Result<Array1<f64>> {
        Ok(self.0.diag().to_owned())
    }
    fn column(&self, j: usize) -> Result<Array1<f64>> {
        Ok(self.0.column(j).to_owned())
    }
}

/// Oracle evaluating `k(Z, Zᵀ)` lazily from the covariate rows.
pub struct KernelRowsOracle<'a> {
    spec: KernelSpec,
    rows: ArrayView2<'a, f64>,
    norms: Array1<f64>,
}

impl<'a> KernelRowsOracle<'a> {
    pub fn new(spec: KernelSpec, rows: ArrayView2<'a, f64>) -> Result<Self> {
        spec.validate()?;
        let norms = row_norms(rows);
        check_cosine_rows(&spec, &norms)?;
        Ok(Self { spec, rows, norms })
    }
}

impl KernelOracle for KernelRowsOracle<'_> {
    fn size(&self) -> usize {
        self.rows.nrows()
    }
    fn diagonal(&self) -> Result<Array1<f64>> {
        Ok(Array1::from_elem(self.rows.nrows(), self.spec.self_value()))
    }
    fn column(&self, j: usize) -> Result<Array1<f64>> {
        let zj = self.rows.row(j);
        let nj = self.norms[j];
        let dots = self.rows.dot(&zj);
        Ok(Array1::from_iter((0..self.rows.nrows()).map(|i| {
            if i == j {
                return self.spec.self_value();
            }
            self.spec.from_parts(dots[i], sq_dist(self.rows.row(i), zj), self.norms[i], nj)
        })))
    }
}

/// Result of the greedy pivoted Cholesky factorization `K ≈ F Fᵀ`.
#[derive(Debug, Clone)]
pub struct PivotedCholesky {
    /// Selected indices in selection order.
    pub pivots: Vec<usize>,
    /// `n × m` factor; row `pivots[k]` has zeros beyond column `k`.
    pub factor: Array2<f64>,
    /// Trace of the residual `K − F Fᵀ`.
    pub trace_error: f64,
}

/// Residual diagonal entries below this fraction of the largest initial
/// diagonal entry are treated as exhausted rank.
pub const PIVOT_RANK_TOL: f64 = 1e-12;

/// Greedy pivoted Cholesky: each step pivots on the largest residual diagonal
/// entry (lowest index on ties). Stops after `m_max` pivots, when the residual
/// trace is at most `tol`, or when the residual is numerically zero.
pub fn pivoted_cholesky(oracle: &dyn KernelOracle, m_max: usize, tol: f64) -> Result<PivotedCholesky> {
    let n = oracle.size();
    if m_max > n {
        return Err(CocoError::InvalidArgument(format!(
            "m_max = {m_max} exceeds matrix size {n}"
        )));
    }
    let mut residual = oracle.diagonal()?;
    if residual.len() != n {
        return Err(CocoError::dim(n, residual.len()));
    }
    let total: f64 = residual.sum();
    let floor = -1e-8 * total.abs().max(f64::MIN_POSITIVE);
    if residual.iter().any(|&d| d < floor || !d.is_finite()) {
        return Err(CocoError::Numerical("kernel diagonal is negative or non-finite".into()));
    }
    let max_initial = residual.iter().cloned().fold(0.0, f64::max);
    let mut factor = Array2::<f64>::zeros((n, m_max));
    let mut pivots = Vec::with_capacity(m_max);

    for k in 0..m_max {
        let trace: f64 = residual.sum();
        if trace <= tol {
            break;
        }
        let mut p = 0;
        for i in 1..n {
            if residual[i] > residual[p] {
                p = i;
            }
        }
        let dp = residual[p];
        if dp <= PIVOT_RANK_TOL * max_initial || dp <= 0.0 {
            break;
        }
        let mut col = oracle.column(p)?;
        if col.len() != n {
            return Err(CocoError::dim(n, col.len()));
        }
        if k > 0 {
            let prev = factor.slice(s![.., ..k]);
            let lp = prev.row(p).to_owned();
            col -= &prev.dot(&lp);
        }
        let scale = dp.sqrt();
        col /= scale;
        // Exact zero at already-chosen pivots and the exact pivot value.
        for &q in &pivots {
            col[q] = 0.0;
        }
        col[p] = scale;
        for i in 0..n {
            let r = residual[i] - col[i] * col[i];
            if r < floor {
                return Err(CocoError::Numerical(format!(
                    "kernel matrix not positive semidefinite: residual diagonal {r:e} at index {i}"
                )));
            }
            residual[i] = r.max(0.0);
        }
        residual[p] = 0.0;
        factor.column_mut(k).assign(&col);
        pivots.push(p);
    }
    let m = pivots.len();
    let factor = factor.slice(s![.., ..m]).to_owned();
    Ok(PivotedCholesky {
        pivots,
        factor,
        trace_error: residual.sum(),
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum MixingMode {
    /// `B Bᵀ = k(Z_Π, Z_Π)⁻¹`, giving an identity Gram matrix.
    #[default]
    Orthonormal,
    /// `B = I`; the Gram matrix is the pivot kernel block.
    Identity,
}

/// How a feature map produces features from covariates.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "lowercase")]
pub enum FeatureKind {
    /// `φ(z) = k(z, Z_Πᵀ) B`.
    Nystrom {
        kernel: KernelSpec,
        pivots: Array2<f64>,
        mixing: Array2<f64>,
    },
    /// `φ(z) ≡ [1]`.
    Constant,
}

/// An `R^m`-valued feature map with its Gram matrix and Nyström certificate.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FeatureMap {
    pub kind: FeatureKind,
    pub rank: usize,
    pub trace_error: f64,
    pub gram: Array2<f64>,
}

impl FeatureMap {
    pub fn rank(&self) -> usize {
        self.rank
    }

    /// Features of every covariate row, `N × m`.
    pub fn evaluate(&self, z: ArrayView2<f64>) -> Result<Array2<f64>> {
        match &self.kind {
            FeatureKind::Constant => Ok(Array2::ones((z.nrows(), 1))),
            FeatureKind::Nystrom { kernel, pivots, mixing } => {
                if z.ncols() != pivots.ncols() {
                    return Err(CocoError::dim(
                        format!("{} covariates", pivots.ncols()),
                        z.ncols(),
                    ));
                }
                let k = kernel_matrix(kernel, z, pivots.view())?;
                let out = k.dot(mixing);
                if out.iter().any(|v| !v.is_finite()) {
                    return Err(CocoError::Numerical("non-finite feature values".into()));
                }
                Ok(out)
            }
        }
    }

    /// Features of a single covariate vector.
    pub fn evaluate_one(&self, z: ArrayView1<f64>) -> Result<Array1<f64>> {
        let row = z.insert_axis(Axis(0));
        Ok(self.evaluate(row)?.row(0).to_owned())
    }

    pub fn kernel(&self) -> Option<&KernelSpec> {
        match &self.kind {
            FeatureKind::Nystrom { kernel, .. } => Some(kernel),
            FeatureKind::Constant => None,
        }
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn from_json(s: &str) -> Result<Self> {
        Ok(serde_json::from_str(s)?)
    }
}

/// The constant idiosyncratic feature map `φ ≡ 1` (rank 1, unit Gram matrix).
pub fn constant_id_feature() -> FeatureMap {
    FeatureMap {
        kind: FeatureKind::Constant,
        rank: 1,
        trace_error: 0.0,
        gram: Array2::ones((1, 1)),
    }
}

/// Nyström feature map on the rows of `z`.
///
/// `m_max` caps the rank; the achieved rank may be lower when the kernel
/// matrix is numerically rank deficient or the residual trace reaches `tol`.
pub fn build_feature_map(
    spec: &KernelSpec,
    z: ArrayView2<f64>,
    m_max: usize,
    tol: f64,
    mixing_mode: MixingMode,
) -> Result<FeatureMap> {
    if z.nrows() == 0 {
        return Err(CocoError::Data("no covariate rows to build features from".into()));
    }
    if m_max == 0 {
        return Err(CocoError::InvalidArgument("feature rank must be at least 1".into()));
    }
    let oracle = KernelRowsOracle::new(*spec, z)?;
    let chol = pivoted_cholesky(&oracle, m_max.min(z.nrows()), tol)?;
    let m = chol.pivots.len();
    if m == 0 {
        return Err(CocoError::Numerical("kernel matrix is numerically zero".into()));
    }
    let pivots = z.select(Axis(0), &chol.pivots);
    let block = kernel_matrix(spec, pivots.view(), pivots.view())?;
    let mixing = match mixing_mode {
        MixingMode::Identity => Array2::eye(m),
        MixingMode::Orthonormal => {
            let l = match linalg::cholesky(block.view()) {
                Ok(l) => l,
                Err(_) => {
                    let jitter = 1e-10 * linalg::trace(block.view()) / m as f64;
                    let jittered = &block + &(Array2::<f64>::eye(m) * jitter);
                    linalg::cholesky(jittered.view()).map_err(|_| {
                        CocoError::Numerical(format!(
                            "pivot block of rank {m} numerically singular after jitter"
                        ))
                    })?
                }
            };
            linalg::lower_triangular_inverse(l.view()).reversed_axes()
        }
    };
    let mut gram = mixing.t().dot(&block).dot(&mixing);
    linalg::symmetrize(&mut gram);
    Ok(FeatureMap {
        kind: FeatureKind::Nystrom {
            kernel: *spec,
            pivots,
            mixing,
        },
        rank: m,
        trace_error: chol.trace_error,
        gram,
    })
}

/// Median of pairwise squared distances over an evenly spaced subsample of at
/// most `max_rows` rows. Used as the default Gaussian length-scale.
pub fn median_heuristic_rho(z: ArrayView2<f64>, max_rows: usize) -> Result<f64> {
    let n = z.nrows();
    if n < 2 {
        return Err(CocoError::Data("median heuristic needs at least two rows".into()));
    }
    let take = n.min(max_rows.max(2));
    let idx: Vec<usize> = (0..take).map(|k| k * n / take).collect();
    let mut d2 = Vec::with_capacity(take * (take - 1) / 2);
    for a in 0..take {
        for b in (a + 1)..take {
            let (ra, rb) = (z.row(idx[a]), z.row(idx[b]));
            d2.push(ra.iter().zip(rb.iter()).map(|(x, y)| (x - y) * (x - y)).sum::<f64>());
        }
    }
    d2.sort_by(f64::total_cmp);
    let k = d2.len();
    let med = if k % 2 == 1 { d2[k / 2] } else { 0.5 * (d2[k / 2 - 1] + d2[k / 2]) };
    if med > 0.0 {
        Ok(med)
    } else {
        Err(CocoError::Data("median pairwise distance is zero".into()))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    #[test]
    fn cosine_values() {
        let k = KernelSpec::cosine();
        assert_eq!(eval_kernel(&k, array![1.0, 0.0].view(), array![1.0, 0.0].view()).unwrap(), 1.0);
        // ⟨z,z'⟩/(‖z‖‖z'‖) = 1/√2
        let v = eval_kernel(&k, array![1.0, 0.0].view(), array![1.0, 1.0].view()).unwrap();
        assert!((v - 0.7071068).abs() < 1e-7);
        assert!(eval_kernel(&k, array![0.0, 0.0].view(), array![1.0, 1.0].view()).is_err());
        assert!(eval_kernel(&k, array![1.0].view(), array![1.0, 1.0].view()).is_err());
    }

    #[test]
    fn gaussian_value() {
        let v = eval_kernel(&KernelSpec::gaussian(1.0), array![1.0, 0.0].view(), array![0.0, 1.0].view()).unwrap();
        assert!((v - 0.3678794).abs() < 1e-7);
        assert!(eval_kernel(&KernelSpec::gaussian(0.0), array![1.0].view(), array![1.0].view()).is_err());
    }

    #[test]
    fn laplace_and_imq_values() {
        let a = array![0.0, 0.0];
        let b = array![3.0, 4.0];
        let lap = eval_kernel(&KernelSpec::laplace(5.0), a.view(), b.view()).unwrap();
        assert!((lap - (-1.0f64).exp()).abs() < 1e-15);
        let imq = eval_kernel(&KernelSpec::imq(11.0), a.view(), b.view()).unwrap();
        assert!((imq - 1.0 / 6.0).abs() < 1e-15);
    }

    #[test]
    fn identity_kernel_three_pivots() {
        let k = Array2::<f64>::eye(3);
        let pc = pivoted_cholesky(&DenseOracle(k.view()), 3, 0.0).unwrap();
        assert_eq!(pc.pivots, vec![0, 1, 2]);
        assert_eq!(pc.trace_error, 0.0);
    }

    #[test]
    fn all_ones_rank_one() {
        let k = Array2::<f64>::ones((3, 3));
        let pc = pivoted_cholesky(&DenseOracle(k.view()), 1, 0.0).unwrap();
        assert_eq!(pc.pivots, vec![0]);
        assert!(pc.trace_error.abs() < 1e-15);
    }

    #[test]
    fn ties_break_to_lowest_index() {
        let k = array![[1.0, 0.0, 0.0], [0.0, 2.0, 0.0], [0.0, 0.0, 2.0]];
        let pc = pivoted_cholesky(&DenseOracle(k.view()), 2, 0.0).unwrap();
        assert_eq!(pc.pivots, vec![1, 2]);
    }

    #[test]
    fn indefinite_matrix_is_rejected() {
        let k = array![[1.0, 2.0], [2.0, 1.0]];
        assert!(pivoted_cholesky(&DenseOracle(k.view()), 2, 0.0).is_err());
    }

    #[test]
    fn early_stop_at_rank() {
        // cosine kernel on 2-d data has rank 2
        let z = array![[1.0, 0.0], [0.0, 1.0], [1.0, 1.0], [2.0, -1.0]];
        let fm = build_feature_map(&KernelSpec::cosine(), z.view(), 4, 1e-10, MixingMode::Orthonormal).unwrap();
        assert_eq!(fm.rank, 2);
        assert!(fm.trace_error <= 1e-10);
    }

    #[test]
    fn orthonormal_gram_is_identity() {
        let z = array![[1.0, 0.0, 0.0], [0.6, 0.8, 0.0], [0.0, 0.6, 0.8]];
        let fm = build_feature_map(&KernelSpec::cosine(), z.view(), 3, 0.0, MixingMode::Orthonormal).unwrap();
        let dev = &fm.gram - &Array2::<f64>::eye(3);
        assert!(linalg::frobenius(dev.view()) <= 1e-8);
    }

    #[test]
    fn identity_mixing_gram_is_pivot_block() {
        let z = array![[1.0, 0.0], [0.0, 1.0], [1.0, 1.0]];
        let spec = KernelSpec::gaussian(1.0);
        let fm = build_feature_map(&spec, z.view(), 2, 0.0, MixingMode::Identity).unwrap();
        if let FeatureKind::Nystrom { pivots, .. } = &fm.kind {
            let block = kernel_matrix(&spec, pivots.view(), pivots.view()).unwrap();
            assert!((&block - &fm.gram).iter().all(|d| d.abs() < 1e-15));
        } else {
            unreachable!()
        }
    }

    #[test]
    fn constant_feature() {
        let c = constant_id_feature();
        let z = array![[3.0, -1.0], [0.0, 0.0]];
        assert_eq!(c.evaluate(z.view()).unwrap(), Array2::<f64>::ones((2, 1)));
        assert_eq!(c.gram, array![[1.0]]);
        assert_eq!(c.trace_error, 0.0);
    }

    #[test]
    fn json_round_trip() {
        let z = array![[1.0, 0.2], [0.1, 1.0], [0.5, 0.5]];
        let fm = build_feature_map(&KernelSpec::gaussian(0.7), z.view(), 2, 0.0, MixingMode::Orthonormal).unwrap();
        let back = FeatureMap::from_json(&fm.to_json().unwrap()).unwrap();
        assert_eq!(back, fm);
    }

    #[test]
    fn median_heuristic_simple() {
        let z = array![[0.0], [1.0], [3.0]];
        // squared distances 1, 9, 4 → median 4
        assert_eq!(median_heuristic_rho(z.view(), 1000).unwrap(), 4.0);
    }
}
