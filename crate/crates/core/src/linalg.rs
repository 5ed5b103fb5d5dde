//! Small dense linear-algebra kernels.
//!
//! Everything here operates on matrices of at most a few hundred rows and
//! columns (feature dimensions, vectorized parameter blocks), so plain
//! `ndarray` loops are adequate and keep the crate free of LAPACK.

use ndarray::{Array1, Array2, ArrayView1, ArrayView2, Axis};

use crate::error::{CocoError, Result};

/// Off-diagonal tolerance of the cyclic Jacobi sweeps, relative to `‖A‖_F`.
pub const JACOBI_TOL: f64 = 1e-12;
const JACOBI_MAX_SWEEPS: usize = 100;

/// Eigendecomposition `A = Q diag(λ) Qᵀ` of a symmetric matrix.
#[derive(Debug, Clone)]
pub struct SymmetricEigen {
    /// Eigenvalues in ascending order.
    pub values: Array1<f64>,
    /// Orthonormal eigenvectors stored as columns, aligned with `values`.
    pub vectors: Array2<f64>,
}

impl SymmetricEigen {
    /// Reassemble `Q diag(f(λ)) Qᵀ`.
    pub fn reconstruct_with(&self, f: impl Fn(f64) -> f64) -> Array2<f64> {
        let n = self.values.len();
        let mut scaled = self.vectors.clone();
        for (j, mut col) in scaled.axis_iter_mut(Axis(1)).enumerate() {
            col *= f(self.values[j]);
        }
        let mut out = scaled.dot(&self.vectors.t());
        symmetrize(&mut out);
        debug_assert_eq!(out.nrows(), n);
        out
    }

    pub fn min_value(&self) -> f64 {
        self.values.first().copied().unwrap_or(0.0)
    }

    pub fn max_value(&self) -> f64 {
        self.values.last().copied().unwrap_or(0.0)
    }
}

/// Cyclic Jacobi eigensolver for symmetric matrices.
///
/// Sweeps until the off-diagonal Frobenius norm drops below
/// `JACOBI_TOL · ‖A‖_F`. The input is symmetrized first.
pub fn symmetric_eigen(a: ArrayView2<f64>) -> Result<SymmetricEigen> {
    let n = a.nrows();
    if a.ncols() != n {
        return Err(CocoError::dim(format!("{n}x{n}"), format!("{}x{}", n, a.ncols())));
    }
    if a.iter().any(|v| !v.is_finite()) {
        return Err(CocoError::Numerical("non-finite entry passed to eigensolver".into()));
    }
    let mut m = a.to_owned();
    symmetrize(&mut m);
    let mut v = Array2::<f64>::eye(n);
    let total = frobenius(m.view());
    let threshold = (JACOBI_TOL * total).max(f64::MIN_POSITIVE);

    let mut converged = n <= 1;
    for _ in 0..JACOBI_MAX_SWEEPS {
        if off_diagonal_norm(m.view()) <= threshold {
            converged = true;
            break;
        }
        for p in 0..n {
            for q in (p + 1)..n {
                let apq = m[[p, q]];
                if apq == 0.0 {
                    continue;
                }
                let theta = (m[[q, q]] - m[[p, p]]) / (2.0 * apq);
                let t = if theta.abs() > 1e150 {
                    0.5 / theta
                } else {
                    theta.signum() / (theta.abs() + (theta * theta + 1.0).sqrt())
                };
                let c = 1.0 / (t * t + 1.0).sqrt();
                let s = t * c;
                for k in 0..n {
                    let akp = m[[k, p]];
                    let akq = m[[k, q]];
                    m[[k, p]] = c * akp - s * akq;
                    m[[k, q]] = s * akp + c * akq;
                }
                for k in 0..n {
                    let apk = m[[p, k]];
                    let aqk = m[[q, k]];
                    m[[p, k]] = c * apk - s * aqk;
                    m[[q, k]] = s * apk + c * aqk;
                }
                m[[p, q]] = 0.0;
                m[[q, p]] = 0.0;
                for k in 0..n {
                    let vkp = v[[k, p]];
                    let vkq = v[[k, q]];
                    v[[k, p]] = c * vkp - s * vkq;
                    v[[k, q]] = s * vkp + c * vkq;
                }
            }
        }
    }
    if !converged && off_diagonal_norm(m.view()) > threshold {
        return Err(CocoError::Numerical(format!(
            "Jacobi eigensolver did not converge in {JACOBI_MAX_SWEEPS} sweeps (n = {n})"
        )));
    }

    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&i, &j| m[[i, i]].total_cmp(&m[[j, j]]).then(i.cmp(&j)));
    let values = Array1::from_iter(order.iter().map(|&i| m[[i, i]]));
    let mut vectors = Array2::zeros((n, n));
    for (dst, &src) in order.iter().enumerate() {
        vectors.column_mut(dst).assign(&v.column(src));
    }
    Ok(SymmetricEigen { values, vectors })
}

fn off_diagonal_norm(a: ArrayView2<f64>) -> f64 {
    let n = a.nrows();
    let mut s = 0.0;
    for i in 0..n {
        for j in 0..n {
            if i != j {
                s += a[[i, j]] * a[[i, j]];
            }
        }
    }
    s.sqrt()
}

pub fn frobenius(a: ArrayView2<f64>) -> f64 {
    a.iter().map(|v| v * v).sum::<f64>().sqrt()
}

/// Replace `a` by `(a + aᵀ)/2` in place.
pub fn symmetrize(a: &mut Array2<f64>) {
    let n = a.nrows();
    for i in 0..n {
        for j in (i + 1)..n {
            let avg = 0.5 * (a[[i, j]] + a[[j, i]]);
            a[[i, j]] = avg;
            a[[j, i]] = avg;
        }
    }
}

/// Largest absolute deviation from symmetry.
pub fn asymmetry(a: ArrayView2<f64>) -> f64 {
    let n = a.nrows();
    let mut worst = 0.0f64;
    for i in 0..n {
        for j in (i + 1)..n {
            worst = worst.max((a[[i, j]] - a[[j, i]]).abs());
        }
    }
    worst
}

pub fn trace(a: ArrayView2<f64>) -> f64 {
    a.diag().sum()
}

/// Lower-triangular Cholesky factor `L` with `A = L Lᵀ`.
pub fn cholesky(a: ArrayView2<f64>) -> Result<Array2<f64>> {
    let n = a.nrows();
    if a.ncols() != n {
        return Err(CocoError::dim(format!("{n}x{n}"), format!("{}x{}", n, a.ncols())));
    }
    let mut l = Array2::<f64>::zeros((n, n));
    for j in 0..n {
        let mut d = a[[j, j]];
        for k in 0..j {
            d -= l[[j, k]] * l[[j, k]];
        }
        if !(d > 0.0) || !d.is_finite() {
            return Err(CocoError::Numerical(format!(
                "matrix not positive definite at pivot {j} (residual {d:e})"
            )));
        }
        let djj = d.sqrt();
        l[[j, j]] = djj;
        for i in (j + 1)..n {
            let mut s = a[[i, j]];
            for k in 0..j {
                s -= l[[i, k]] * l[[j, k]];
            }
            l[[i, j]] = s / djj;
        }
    }
    Ok(l)
}

/// Solve `L y = b` for lower-triangular `L`.
pub fn forward_substitute(l: ArrayView2<f64>, b: ArrayView1<f64>) -> Array1<f64> {
    let n = l.nrows();
    let mut y = b.to_owned();
    for i in 0..n {
        let mut s = y[i];
        for k in 0..i {
            s -= l[[i, k]] * y[k];
        }
        y[i] = s / l[[i, i]];
    }
    y
}

/// Solve `Lᵀ x = y` for lower-triangular `L`.
pub fn backward_substitute(l: ArrayView2<f64>, y: ArrayView1<f64>) -> Array1<f64> {
    let n = l.nrows();
    let mut x = y.to_owned();
    for i in (0..n).rev() {
        let mut s = x[i];
        for k in (i + 1)..n {
            s -= l[[k, i]] * x[k];
        }
        x[i] = s / l[[i, i]];
    }
    x
}

/// Solve `A x = b` given the Cholesky factor of `A`.
pub fn cholesky_solve(l: ArrayView2<f64>, b: ArrayView1<f64>) -> Array1<f64> {
    let y = forward_substitute(l, b);
    backward_substitute(l, y.view())
}

/// Inverse of a lower-triangular matrix.
pub fn lower_triangular_inverse(l: ArrayView2<f64>) -> Array2<f64> {
    let n = l.nrows();
    let mut inv = Array2::<f64>::zeros((n, n));
    for j in 0..n {
        let mut e = Array1::<f64>::zeros(n);
        e[j] = 1.0;
        let col = forward_substitute(l, e.view());
        inv.column_mut(j).assign(&col);
    }
    inv
}

/// `log det A` from its Cholesky factor.
pub fn cholesky_log_det(l: ArrayView2<f64>) -> f64 {
    2.0 * l.diag().iter().map(|d| d.ln()).sum::<f64>()
}

/// Thin SVD computed by one-sided (Hestenes) Jacobi rotations on the columns
/// of `A`: the rotated columns `A V` are mutually orthogonal and their norms
/// are the singular values.
#[derive(Debug, Clone)]
pub struct ThinSvd {
    /// `A V`; column `i` equals `σ_i u_i`.
    pub scaled_left: Array2<f64>,
    pub singular_values: Array1<f64>,
    pub right: Array2<f64>,
}

pub fn thin_svd(a: ArrayView2<f64>) -> Result<ThinSvd> {
    let (rows, cols) = a.dim();
    let mut w = a.to_owned();
    let mut v = Array2::<f64>::eye(cols);
    let mut converged = cols <= 1;
    // Columns driven to roundoff level (always the case for wide or
    // rank-deficient inputs) are treated as zero; rotating their noise
    // never settles the relative orthogonality test.
    let negligible = (f64::EPSILON * frobenius(a)).powi(2);
    for _ in 0..JACOBI_MAX_SWEEPS {
        let mut rotated = false;
        for p in 0..cols {
            for q in (p + 1)..cols {
                let (mut alpha, mut beta, mut gamma) = (0.0, 0.0, 0.0);
                for k in 0..rows {
                    alpha += w[[k, p]] * w[[k, p]];
                    beta += w[[k, q]] * w[[k, q]];
                    gamma += w[[k, p]] * w[[k, q]];
                }
                if gamma == 0.0 || gamma.abs() <= 1e-15 * (alpha * beta).sqrt() || alpha.min(beta) <= negligible {
                    continue;
                }
                rotated = true;
                let zeta = (beta - alpha) / (2.0 * gamma);
                let t = zeta.signum() / (zeta.abs() + (1.0 + zeta * zeta).sqrt());
                let c = 1.0 / (1.0 + t * t).sqrt();
                let s = c * t;
                for k in 0..rows {
                    let wp = w[[k, p]];
                    let wq = w[[k, q]];
                    w[[k, p]] = c * wp - s * wq;
                    w[[k, q]] = s * wp + c * wq;
                }
                for k in 0..cols {
                    let vp = v[[k, p]];
                    let vq = v[[k, q]];
                    v[[k, p]] = c * vp - s * vq;
                    v[[k, q]] = s * vp + c * vq;
                }
            }
        }
        if !rotated {
            converged = true;
            break;
        }
    }
    if !converged {
        return Err(CocoError::Numerical("one-sided Jacobi SVD did not converge".into()));
    }
    let singular_values = Array1::from_iter(w.axis_iter(Axis(1)).map(|c| c.dot(&c).sqrt()));
    Ok(ThinSvd {
        scaled_left: w,
        singular_values,
        right: v,
    })
}

impl ThinSvd {
    /// `A⁺ y`, discarding singular values below `rel_cutoff · σ_max`.
    pub fn pinv_apply(&self, y: ArrayView1<f64>, rel_cutoff: f64) -> Array1<f64> {
        let cols = self.right.nrows();
        let smax = self.singular_values.iter().cloned().fold(0.0, f64::max);
        let mut out = Array1::<f64>::zeros(cols);
        if smax == 0.0 {
            return out;
        }
        for (i, &s) in self.singular_values.iter().enumerate() {
            if s <= rel_cutoff * smax {
                continue;
            }
            let coef = self.scaled_left.column(i).dot(&y) / (s * s);
            out.scaled_add(coef, &self.right.column(i));
        }
        out
    }

    /// Dense `A⁺` (cols × rows).
    pub fn pinv(&self, rel_cutoff: f64) -> Array2<f64> {
        let rows = self.scaled_left.nrows();
        let cols = self.right.nrows();
        let smax = self.singular_values.iter().cloned().fold(0.0, f64::max);
        let mut out = Array2::<f64>::zeros((cols, rows));
        if smax == 0.0 {
            return out;
        }
        for (i, &s) in self.singular_values.iter().enumerate() {
            if s <= rel_cutoff * smax {
                continue;
            }
            let v = self.right.column(i);
            let u = self.scaled_left.column(i);
            for a in 0..cols {
                let va = v[a] / (s * s);
                if va == 0.0 {
                    continue;
                }
                for b in 0..rows {
                    out[[a, b]] += va * u[b];
                }
            }
        }
        out
    }
}

/// Largest eigenvalue of a symmetric PSD matrix by power iteration from the
/// all-ones start vector. Stops after `max_iter` steps or when the Rayleigh
/// quotient changes by less than `tol` relative.
pub fn power_iteration(a: ArrayView2<f64>, max_iter: usize, tol: f64) -> f64 {
    let n = a.nrows();
    if n == 0 {
        return 0.0;
    }
    let mut x = Array1::from_elem(n, 1.0 / (n as f64).sqrt());
    let mut lambda = 0.0;
    for _ in 0..max_iter {
        let y = a.dot(&x);
        let norm = y.dot(&y).sqrt();
        if norm == 0.0 {
            // Start vector in the null space; fall back to the diagonal bound.
            return a.diag().iter().cloned().fold(0.0, f64::max);
        }
        let next = x.dot(&y);
        x = y / norm;
        if (next - lambda).abs() <= tol * next.abs().max(f64::MIN_POSITIVE) {
            lambda = next;
            break;
        }
        lambda = next;
    }
    lambda
}

/// Outer product `a bᵀ`.
pub fn outer(a: ArrayView1<f64>, b: ArrayView1<f64>) -> Array2<f64> {
    let mut out = Array2::zeros((a.len(), b.len()));
    for (i, &ai) in a.iter().enumerate() {
        for (j, &bj) in b.iter().enumerate() {
            out[[i, j]] = ai * bj;
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    #[test]
    fn jacobi_diagonalizes_two_by_two() {
        let a = array![[2.0, 1.0], [1.0, 2.0]];
        let eig = symmetric_eigen(a.view()).unwrap();
        assert!((eig.values[0] - 1.0).abs() < 1e-14);
        assert!((eig.values[1] - 3.0).abs() < 1e-14);
        let back = eig.reconstruct_with(|l| l);
        assert!((&back - &a).iter().all(|d| d.abs() < 1e-14));
    }

    #[test]
    fn jacobi_handles_already_diagonal_and_empty() {
        let a = array![[3.0, 0.0], [0.0, -1.0]];
        let eig = symmetric_eigen(a.view()).unwrap();
        assert_eq!(eig.values.to_vec(), vec![-1.0, 3.0]);
        let empty = Array2::<f64>::zeros((0, 0));
        assert_eq!(symmetric_eigen(empty.view()).unwrap().values.len(), 0);
    }

    #[test]
    fn jacobi_rejects_nan() {
        let a = array![[f64::NAN, 0.0], [0.0, 1.0]];
        assert!(symmetric_eigen(a.view()).is_err());
    }

    #[test]
    fn cholesky_solves_and_rejects_indefinite() {
        let a = array![[4.0, 2.0], [2.0, 3.0]];
        let l = cholesky(a.view()).unwrap();
        let x = cholesky_solve(l.view(), array![2.0, 1.0].view());
        let back = a.dot(&x);
        assert!((back[0] - 2.0).abs() < 1e-14 && (back[1] - 1.0).abs() < 1e-14);
        assert!((cholesky_log_det(l.view()) - 8.0f64.ln()).abs() < 1e-14);
        assert!(cholesky(array![[1.0, 2.0], [2.0, 1.0]].view()).is_err());
    }

    #[test]
    fn svd_pinv_least_squares() {
        let a = array![[1.0], [1.0]];
        let svd = thin_svd(a.view()).unwrap();
        let f = svd.pinv_apply(array![1.0, 3.0].view(), 1e-12);
        assert!((f[0] - 2.0).abs() < 1e-14);
    }

    #[test]
    fn svd_rank_deficient_columns() {
        let a = array![[1.0, 2.0], [2.0, 4.0], [3.0, 6.0]];
        let svd = thin_svd(a.view()).unwrap();
        let mut s = svd.singular_values.to_vec();
        s.sort_by(f64::total_cmp);
        assert!(s[0] < 1e-12 * s[1]);
        let p = svd.pinv(1e-12);
        // A A⁺ A = A
        let back = a.dot(&p).dot(&a);
        assert!((&back - &a).iter().all(|d| d.abs() < 1e-12));
    }

    #[test]
    fn svd_wide_matrix_converges() {
        let a = array![[0.3, -1.2, 2.5], [1.7, 0.4, -0.9]];
        let svd = thin_svd(a.view()).unwrap();
        let back = a.dot(&svd.pinv(1e-12)).dot(&a);
        assert!((&back - &a).iter().all(|d| d.abs() < 1e-12));
    }

    #[test]
    fn power_iteration_finds_top_eigenvalue() {
        let a = array![[2.0, 0.0, 0.0], [0.0, 5.0, 1.0], [0.0, 1.0, 1.0]];
        let top = symmetric_eigen(a.view()).unwrap().max_value();
        let l = power_iteration(a.view(), 500, 1e-14);
        assert!((l - top).abs() < 1e-8);
    }
}
