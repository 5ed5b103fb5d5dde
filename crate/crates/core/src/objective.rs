//! Vectorization machinery and the quadratic form of the regularized loss.
//!
//! For one cross section the loss is the weighted squared Frobenius distance
//! between the bordered return-product matrix `[[1, xᵀ], [x, xxᵀ]]` and the
//! model `Ψ_sy U_sy Ψ_syᵀ + Diag(Ψ_id U_id Ψ_idᵀ)`, plus trace regularizers.
//! In the half-vectorized parameter `u = [vech U_sy; vech U_id]` this is the
//! quadratic `½ uᵀ A u + bᵀ u + c`.
//!
//! `A = 2w QᵀQ` is assembled from the small Gram products `Ψ_syᵀ Ψ_sy` and
//! per-asset outer products, so the `(N+1)² × M` matrix `Q` never exists.

use ndarray::{Array1, Array2, ArrayView1, ArrayView2};
use serde::{Deserialize, Serialize};

use crate::error::{CocoError, Result};
use crate::features::FeatureMap;
use crate::linalg;
use crate::panel::DataPoint;
use crate::solver::ParamU;

/// Number of entries of `vech` for an `n × n` matrix.
pub fn vech_len(n: usize) -> usize {
    n * (n + 1) / 2
}

/// Position of `(i, j)`, `i ≥ j`, in the column-major half-vectorization.
pub fn vech_index(n: usize, i: usize, j: usize) -> usize {
    debug_assert!(i >= j && i < n);
    j * n - j * j.saturating_sub(1) / 2 + (i - j)
}

/// The `(row, col)` pairs enumerated by `vech`, in order:
/// `(0,0), (1,0), …, (n−1,0), (1,1), …, (n−1,n−1)`.
pub fn vech_pairs(n: usize) -> Vec<(usize, usize)> {
    let mut out = Vec::with_capacity(vech_len(n));
    for j in 0..n {
        for i in j..n {
            out.push((i, j));
        }
    }
    out
}

fn symmetry_tol(a: ArrayView2<f64>) -> f64 {
    1e-12 * a.iter().fold(1.0f64, |m, v| m.max(v.abs()))
}

/// Half-vectorization of a symmetric matrix.
pub fn vech_of(a: ArrayView2<f64>) -> Result<Array1<f64>> {
    let n = a.nrows();
    if a.ncols() != n {
        return Err(CocoError::dim(format!("{n}x{n}"), format!("{}x{}", n, a.ncols())));
    }
    let asym = linalg::asymmetry(a);
    if asym > symmetry_tol(a) {
        return Err(CocoError::InvalidArgument(format!(
            "matrix not symmetric (max deviation {asym:e})"
        )));
    }
    Ok(vech_pairs(n).into_iter().map(|(i, j)| a[[i, j]]).collect())
}

/// Column-major vectorization.
pub fn vec_of(a: ArrayView2<f64>) -> Array1<f64> {
    a.t().iter().copied().collect()
}

/// Inverse of [`vech_of`].
pub fn unvech(v: ArrayView1<f64>, n: usize) -> Result<Array2<f64>> {
    if v.len() != vech_len(n) {
        return Err(CocoError::dim(vech_len(n), v.len()));
    }
    let mut a = Array2::zeros((n, n));
    for (k, (i, j)) in vech_pairs(n).into_iter().enumerate() {
        a[[i, j]] = v[k];
        a[[j, i]] = v[k];
    }
    Ok(a)
}

/// Duplication matrix `D_n` with `vec(A) = D_n vech(A)` for symmetric `A`.
pub fn duplication(n: usize) -> Array2<f64> {
    let mut d = Array2::zeros((n * n, vech_len(n)));
    for (k, (i, j)) in vech_pairs(n).into_iter().enumerate() {
        d[[j * n + i, k]] = 1.0;
        d[[i * n + j, k]] = 1.0;
    }
    d
}

/// `R_n`, whose `i`-th column selects the `i`-th diagonal entry of `vec(A)`.
pub fn diag_selector(n: usize) -> Array2<f64> {
    let mut r = Array2::zeros((n * n, n));
    for i in 0..n {
        r[[i * n + i, i]] = 1.0;
    }
    r
}

/// `D_nᵀ vec(S)` for a symmetric `S`: diagonal entries once, off-diagonal
/// entries twice.
fn dup_transpose_sym(s: ArrayView2<f64>) -> Array1<f64> {
    let n = s.nrows();
    vech_pairs(n)
        .into_iter()
        .map(|(i, j)| if i == j { s[[i, i]] } else { s[[i, j]] + s[[j, i]] })
        .collect()
}

/// `D_nᵀ vec(ψ ψᵀ)` for a vector `ψ`.
fn dup_transpose_outer(psi: ArrayView1<f64>) -> Array1<f64> {
    let n = psi.len();
    vech_pairs(n)
        .into_iter()
        .map(|(i, j)| if i == j { psi[i] * psi[i] } else { 2.0 * psi[i] * psi[j] })
        .collect()
}

/// `D_nᵀ (G ⊗ G) D_n`, the quadratic form `vech(U) ↦ tr(U G U G)`.
fn dup_kron_dup(g: ArrayView2<f64>) -> Array2<f64> {
    let n = g.nrows();
    let pairs = vech_pairs(n);
    let m = pairs.len();
    let mut out = Array2::zeros((m, m));
    for (k, &(a, b)) in pairs.iter().enumerate() {
        for (l, &(c, d)) in pairs.iter().enumerate().skip(k) {
            // Sum over the vec positions hit by the duplication columns.
            let v = match (a == b, c == d) {
                (true, true) => g[[a, c]] * g[[a, c]],
                (true, false) => 2.0 * g[[a, c]] * g[[a, d]],
                (false, true) => 2.0 * g[[a, c]] * g[[b, c]],
                (false, false) => 2.0 * (g[[a, c]] * g[[b, d]] + g[[a, d]] * g[[b, c]]),
            };
            out[[k, l]] = v;
            out[[l, k]] = v;
        }
    }
    out
}

/// Regularization weights of the systematic and idiosyncratic components.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Lambdas {
    pub sy: f64,
    pub id: f64,
}

/// Dimensions `(m_sy, m_id)` and the derived parameter sizes.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Dims {
    pub m_sy: usize,
    pub m_id: usize,
}

impl Dims {
    pub fn new(m_sy: usize, m_id: usize) -> Self {
        Self { m_sy, m_id }
    }

    /// Length of `vech U_sy`, with `U_sy` of size `m_sy + 1`.
    pub fn len_sy(&self) -> usize {
        vech_len(self.m_sy + 1)
    }

    pub fn len_id(&self) -> usize {
        vech_len(self.m_id)
    }

    /// Total parameter dimension `M`.
    pub fn len(&self) -> usize {
        self.len_sy() + self.len_id()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// Ingredients of `Pᵀ P`, retained for the strong-convexity certificate.
#[derive(Debug, Clone)]
pub struct DesignGram {
    /// `Ψ_syᵀ Ψ_sy`, `(m_sy+1) × (m_sy+1)`.
    pub psi_sy_gram: Array2<f64>,
    /// `Σ_i vec(ψ_i ψ_iᵀ) vec(φ^id_i φ^id_iᵀ)ᵀ`.
    pub cross: Array2<f64>,
    /// `Σ_i vec(φ^id_i φ^id_iᵀ) vec(φ^id_i φ^id_iᵀ)ᵀ`.
    pub id_id: Array2<f64>,
}

/// Quadratic coefficients `(A, b, c)` of one cross section.
#[derive(Debug, Clone)]
pub struct SectionCoefficients {
    pub a: Array2<f64>,
    pub b: Array1<f64>,
    pub c: f64,
    pub n: usize,
    pub weight: f64,
    pub dims: Dims,
    pub design: DesignGram,
}

/// Coefficients of one cross section from its feature maps.
pub fn section_coefficients(
    xi: &DataPoint,
    phi_sy: &FeatureMap,
    phi_id: &FeatureMap,
    lambdas: Lambdas,
) -> Result<SectionCoefficients> {
    let fs = phi_sy.evaluate(xi.covariates())?;
    let fi = phi_id.evaluate(xi.covariates())?;
    section_coefficients_from_features(
        xi.returns.view(),
        xi.weight,
        fs.view(),
        fi.view(),
        phi_sy.gram.view(),
        phi_id.gram.view(),
        lambdas,
    )
}

/// Coefficients from already evaluated features `Φ_sy` (`N × m_sy`) and
/// `Φ_id` (`N × m_id`).
pub fn section_coefficients_from_features(
    x: ArrayView1<f64>,
    weight: f64,
    phi_sy: ArrayView2<f64>,
    phi_id: ArrayView2<f64>,
    gram_sy: ArrayView2<f64>,
    gram_id: ArrayView2<f64>,
    lambdas: Lambdas,
) -> Result<SectionCoefficients> {
    let n = x.len();
    if phi_sy.nrows() != n || phi_id.nrows() != n {
        return Err(CocoError::dim(
            format!("{n} feature rows"),
            format!("{} / {}", phi_sy.nrows(), phi_id.nrows()),
        ));
    }
    if phi_sy.iter().chain(phi_id.iter()).any(|v| !v.is_finite()) {
        return Err(CocoError::Numerical("non-finite feature values".into()));
    }
    if x.iter().any(|v| !v.is_finite()) || !(weight > 0.0) {
        return Err(CocoError::Data("non-finite returns or non-positive weight".into()));
    }
    let dims = Dims::new(phi_sy.ncols(), phi_id.ncols());
    let (m_sy, m_id) = (dims.m_sy, dims.m_id);
    if gram_sy.dim() != (m_sy, m_sy) || gram_id.dim() != (m_id, m_id) {
        return Err(CocoError::dim(
            format!("Gram matrices {m_sy}x{m_sy} and {m_id}x{m_id}"),
            format!("{:?} and {:?}", gram_sy.dim(), gram_id.dim()),
        ));
    }
    let n1 = m_sy + 1;
    let (len_sy, len_id) = (dims.len_sy(), dims.len_id());
    let big_m = dims.len();

    // Ψ_syᵀ Ψ_sy = [[1, 0], [0, Φᵀ Φ]].
    let mut g = Array2::<f64>::zeros((n1, n1));
    g[[0, 0]] = 1.0;
    g.slice_mut(ndarray::s![1.., 1..]).assign(&phi_sy.t().dot(&phi_sy));

    let mut qtq = Array2::<f64>::zeros((big_m, big_m));
    qtq.slice_mut(ndarray::s![..len_sy, ..len_sy])
        .assign(&dup_kron_dup(g.view()));

    let mut cross_vech = Array2::<f64>::zeros((len_sy, len_id));
    let mut id_vech = Array2::<f64>::zeros((len_id, len_id));
    let mut cross_vec = Array2::<f64>::zeros((n1 * n1, m_id * m_id));
    let mut id_vec = Array2::<f64>::zeros((m_id * m_id, m_id * m_id));
    let mut psi = Array1::<f64>::zeros(n1);
    let mut id_target = Array2::<f64>::zeros((m_id, m_id));
    for i in 0..n {
        psi.slice_mut(ndarray::s![1..]).assign(&phi_sy.row(i));
        let fi = phi_id.row(i);
        let dsy = dup_transpose_outer(psi.view());
        let did = dup_transpose_outer(fi);
        for (k, &a) in dsy.iter().enumerate() {
            if a == 0.0 {
                continue;
            }
            for (l, &b) in did.iter().enumerate() {
                cross_vech[[k, l]] += a * b;
            }
        }
        for (k, &a) in did.iter().enumerate() {
            for (l, &b) in did.iter().enumerate() {
                id_vech[[k, l]] += a * b;
            }
        }
        let vs = vec_of(linalg::outer(psi.view(), psi.view()).view());
        let vi = vec_of(linalg::outer(fi, fi).view());
        for (k, &a) in vs.iter().enumerate() {
            if a == 0.0 {
                continue;
            }
            for (l, &b) in vi.iter().enumerate() {
                cross_vec[[k, l]] += a * b;
            }
        }
        for (k, &a) in vi.iter().enumerate() {
            for (l, &b) in vi.iter().enumerate() {
                id_vec[[k, l]] += a * b;
            }
        }
        let x2 = x[i] * x[i];
        for a in 0..m_id {
            for b in 0..m_id {
                id_target[[a, b]] += x2 * fi[a] * fi[b];
            }
        }
    }
    qtq.slice_mut(ndarray::s![..len_sy, len_sy..]).assign(&cross_vech);
    qtq.slice_mut(ndarray::s![len_sy.., ..len_sy]).assign(&cross_vech.t());
    qtq.slice_mut(ndarray::s![len_sy.., len_sy..]).assign(&id_vech);
    let a = qtq * (2.0 * weight);

    // Qᵀ y: the systematic part is D ᵀ vec(v vᵀ) with v = Ψ_syᵀ [1; x].
    let mut v = Array1::<f64>::zeros(n1);
    v[0] = 1.0;
    v.slice_mut(ndarray::s![1..]).assign(&phi_sy.t().dot(&x));
    let qty_sy = dup_transpose_outer(v.view());
    let qty_id = dup_transpose_sym(id_target.view());
    let mut b = Array1::<f64>::zeros(big_m);
    let mut g_reg = Array2::<f64>::zeros((n1, n1));
    g_reg.slice_mut(ndarray::s![1.., 1..]).assign(&gram_sy);
    let reg_sy = dup_transpose_sym(g_reg.view());
    let reg_id = dup_transpose_sym(gram_id);
    for k in 0..len_sy {
        b[k] = -2.0 * weight * qty_sy[k] + lambdas.sy * reg_sy[k];
    }
    for k in 0..len_id {
        b[len_sy + k] = -2.0 * weight * qty_id[k] + lambdas.id * reg_id[k];
    }
    let xx = x.dot(&x);
    let c = weight * (1.0 + xx) * (1.0 + xx);

    Ok(SectionCoefficients {
        a,
        b,
        c,
        n,
        weight,
        dims,
        design: DesignGram {
            psi_sy_gram: g,
            cross: cross_vec,
            id_id: id_vec,
        },
    })
}

/// Evaluates the regularized loss directly from its matrix form: the
/// bordered Frobenius residual plus `λ_sy tr(G_sy U_sy) + λ_id tr(G_id U_id)`.
pub fn loss_direct(
    u: &ParamU,
    xi: &DataPoint,
    phi_sy: &FeatureMap,
    phi_id: &FeatureMap,
    lambdas: Lambdas,
) -> Result<f64> {
    let fs = phi_sy.evaluate(xi.covariates())?;
    let fi = phi_id.evaluate(xi.covariates())?;
    loss_direct_from_features(
        u,
        xi.returns.view(),
        xi.weight,
        fs.view(),
        fi.view(),
        phi_sy.gram.view(),
        phi_id.gram.view(),
        lambdas,
    )
}

#[allow(clippy::too_many_arguments)]
pub fn loss_direct_from_features(
    u: &ParamU,
    x: ArrayView1<f64>,
    weight: f64,
    phi_sy: ArrayView2<f64>,
    phi_id: ArrayView2<f64>,
    gram_sy: ArrayView2<f64>,
    gram_id: ArrayView2<f64>,
    lambdas: Lambdas,
) -> Result<f64> {
    let n = x.len();
    let (m_sy, m_id) = (phi_sy.ncols(), phi_id.ncols());
    if u.u_sy.dim() != (m_sy + 1, m_sy + 1) || u.u_id.dim() != (m_id, m_id) {
        return Err(CocoError::dim(
            format!("U_sy {0}x{0}, U_id {1}x{1}", m_sy + 1, m_id),
            format!("{:?}, {:?}", u.u_sy.dim(), u.u_id.dim()),
        ));
    }
    let mut psi_sy = Array2::<f64>::zeros((n + 1, m_sy + 1));
    psi_sy[[0, 0]] = 1.0;
    psi_sy.slice_mut(ndarray::s![1.., 1..]).assign(&phi_sy);
    let mut psi_id = Array2::<f64>::zeros((n + 1, m_id));
    psi_id.slice_mut(ndarray::s![1.., ..]).assign(&phi_id);

    let mut y = Array1::<f64>::zeros(n + 1);
    y[0] = 1.0;
    y.slice_mut(ndarray::s![1..]).assign(&x);
    let target = linalg::outer(y.view(), y.view());
    let sys = psi_sy.dot(&u.u_sy).dot(&psi_sy.t());
    let idio = psi_id.dot(&u.u_id).dot(&psi_id.t());
    let mut resid = target - sys;
    for i in 0..=n {
        resid[[i, i]] -= idio[[i, i]];
    }
    let fit = weight * resid.iter().map(|r| r * r).sum::<f64>();
    let reg_sy = gram_sy.dot(&u.v()).diag().sum();
    let reg_id = gram_id.dot(&u.u_id).diag().sum();
    Ok(fit + lambdas.sy * reg_sy + lambdas.id * reg_id)
}

/// `½ uᵀ A u + bᵀ u + c`.
pub fn loss_vectorized(coeffs: &SectionCoefficients, u: ArrayView1<f64>) -> Result<f64> {
    quadratic_value(coeffs.a.view(), coeffs.b.view(), coeffs.c, u)
}

pub(crate) fn quadratic_value(a: ArrayView2<f64>, b: ArrayView1<f64>, c: f64, u: ArrayView1<f64>) -> Result<f64> {
    if u.len() != b.len() {
        return Err(CocoError::dim(b.len(), u.len()));
    }
    Ok(0.5 * u.dot(&a.dot(&u)) + b.dot(&u) + c)
}

/// Sample averages `(A_T, b_T, c_T)` of the per-section coefficients.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AggregateObjective {
    pub a: Array2<f64>,
    pub b: Array1<f64>,
    pub c: f64,
    /// Number of averaged cross sections.
    pub t: usize,
    pub dims: Dims,
    pub lambdas: Lambdas,
    /// Certified strong-convexity constant, 0 when unknown.
    pub alpha_lower: f64,
}

impl AggregateObjective {
    pub fn value(&self, u: ArrayView1<f64>) -> Result<f64> {
        quadratic_value(self.a.view(), self.b.view(), self.c, u)
    }

    pub fn gradient(&self, u: ArrayView1<f64>) -> Array1<f64> {
        self.a.dot(&u) + &self.b
    }

    /// Adds further cross sections to the running averages.
    pub fn extend<'a>(&mut self, coeffs: impl IntoIterator<Item = &'a SectionCoefficients>) -> Result<()> {
        let mut sum_a = &self.a * self.t as f64;
        let mut sum_b = &self.b * self.t as f64;
        let mut sum_c = self.c * self.t as f64;
        let mut t = self.t;
        for s in coeffs {
            if s.dims != self.dims {
                return Err(CocoError::dim(format!("{:?}", self.dims), format!("{:?}", s.dims)));
            }
            sum_a += &s.a;
            sum_b += &s.b;
            sum_c += s.c;
            t += 1;
        }
        let tf = t as f64;
        self.a = sum_a / tf;
        self.b = sum_b / tf;
        self.c = sum_c / tf;
        self.t = t;
        Ok(())
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string(self)?)
    }

    pub fn from_json(s: &str) -> Result<Self> {
        Ok(serde_json::from_str(s)?)
    }
}

/// Averages a stream of section coefficients in stream order.
pub fn aggregate<'a>(
    coeffs: impl IntoIterator<Item = &'a SectionCoefficients>,
    lambdas: Lambdas,
) -> Result<AggregateObjective> {
    let mut iter = coeffs.into_iter();
    let first = iter
        .next()
        .ok_or_else(|| CocoError::Data("cannot aggregate an empty stream of sections".into()))?;
    let mut agg = AggregateObjective {
        a: first.a.clone(),
        b: first.b.clone(),
        c: first.c,
        t: 1,
        dims: first.dims,
        lambdas,
        alpha_lower: 0.0,
    };
    agg.extend(iter)?;
    Ok(agg)
}

/// `2 w σ_min(P)²`, where `σ_min(P)² = λ_min(PᵀP)` over all columns of `P`.
/// Returns 0 when `PᵀP` is numerically singular.
///
/// Materializes `PᵀP` of size `(m_sy+1)² + m_id²`; intended for small ranks.
pub fn strong_convexity_bound(coeffs: &SectionCoefficients) -> Result<f64> {
    let d = &coeffs.design;
    let n1 = d.psi_sy_gram.nrows();
    let q = d.id_id.nrows();
    let size = n1 * n1 + q;
    let mut ptp = Array2::<f64>::zeros((size, size));
    let g = &d.psi_sy_gram;
    for s in 0..n1 {
        for r in 0..n1 {
            for s2 in 0..n1 {
                for r2 in 0..n1 {
                    ptp[[s * n1 + r, s2 * n1 + r2]] = g[[s, s2]] * g[[r, r2]];
                }
            }
        }
    }
    ptp.slice_mut(ndarray::s![..n1 * n1, n1 * n1..]).assign(&d.cross);
    ptp.slice_mut(ndarray::s![n1 * n1.., ..n1 * n1]).assign(&d.cross.t());
    ptp.slice_mut(ndarray::s![n1 * n1.., n1 * n1..]).assign(&d.id_id);
    let eig = linalg::symmetric_eigen(ptp.view())?;
    let (lo, hi) = (eig.min_value(), eig.max_value());
    if lo <= 1e-12 * hi.max(f64::MIN_POSITIVE) {
        return Ok(0.0);
    }
    Ok(2.0 * coeffs.weight * lo)
}
