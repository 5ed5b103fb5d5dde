//! Shared generators and dense oracles for the integration tests.
#![allow(dead_code)]

use coco::objective::Dims;
use coco::ParamU;
use nalgebra::{DMatrix, DVector};
use ndarray::{s, Array1, Array2, ArrayView1, ArrayView2};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn normal_matrix<R: Rng>(rows: usize, cols: usize, rng: &mut R) -> Array2<f64> {
    Array2::from_shape_fn((rows, cols), |_| rng.sample::<f64, _>(StandardNormal))
}

pub fn normal_vector<R: Rng>(n: usize, rng: &mut R) -> Array1<f64> {
    Array1::from_shape_fn(n, |_| rng.sample::<f64, _>(StandardNormal))
}

/// `A Aᵀ / cols`, a random PSD matrix of rank `min(n, cols)`.
pub fn random_psd<R: Rng>(n: usize, cols: usize, rng: &mut R) -> Array2<f64> {
    let a = normal_matrix(n, cols, rng);
    a.dot(&a.t()) / cols.max(1) as f64
}

/// Random feasible `U`: `U_sy = [[1, bᵀ], [b, bbᵀ + W]]`, `U_id` PSD.
pub fn random_param<R: Rng>(dims: Dims, rng: &mut R) -> ParamU {
    let m = dims.m_sy;
    let b = normal_vector(m, rng) * 0.5;
    let w = random_psd(m, rng.random_range(1..=m.max(1)), rng);
    let mut u_sy = Array2::zeros((m + 1, m + 1));
    u_sy[[0, 0]] = 1.0;
    u_sy.slice_mut(s![1.., 0]).assign(&b);
    u_sy.slice_mut(s![0, 1..]).assign(&b);
    let v = outer(b.view(), b.view()) + w;
    u_sy.slice_mut(s![1.., 1..]).assign(&v);
    let u_id = random_psd(dims.m_id, dims.m_id.max(1), rng);
    ParamU::new(u_sy, u_id).unwrap()
}

/// Random element of `{U ∈ S₊ : U₁₁ = 1, λ_min(U) ≥ floor}` (requires floor < 1).
pub fn random_dsy<R: Rng>(n: usize, floor: f64, rng: &mut R) -> Array2<f64> {
    let mut c = normal_matrix(n, n, rng);
    let norm = c.row(0).dot(&c.row(0)).sqrt();
    let scale = (1.0 - floor).sqrt() / norm;
    c.row_mut(0).mapv_inplace(|v| v * scale);
    let mut u = c.dot(&c.t());
    for i in 0..n {
        u[[i, i]] += floor;
    }
    u[[0, 0]] = 1.0;
    u
}

pub fn outer(a: ArrayView1<f64>, b: ArrayView1<f64>) -> Array2<f64> {
    Array2::from_shape_fn((a.len(), b.len()), |(i, j)| a[i] * b[j])
}

pub fn to_na(a: ArrayView2<f64>) -> DMatrix<f64> {
    DMatrix::from_fn(a.nrows(), a.ncols(), |i, j| a[[i, j]])
}

pub fn to_na_vec(v: ArrayView1<f64>) -> DVector<f64> {
    DVector::from_iterator(v.len(), v.iter().copied())
}

pub fn min_eigenvalue(a: ArrayView2<f64>) -> f64 {
    if a.nrows() == 0 {
        return 0.0;
    }
    to_na(a).symmetric_eigen().eigenvalues.min()
}

pub fn frob(a: ArrayView2<f64>) -> f64 {
    a.iter().map(|v| v * v).sum::<f64>().sqrt()
}

pub fn rel_err(a: f64, b: f64) -> f64 {
    (a - b).abs() / (1.0 + a.abs().max(b.abs()))
}

/// Golden-section minimizer of a unimodal function on `[lo, hi]`.
pub fn golden_section(f: impl Fn(f64) -> f64, mut lo: f64, mut hi: f64, tol: f64) -> f64 {
    let g = (5f64.sqrt() - 1.0) / 2.0;
    let mut x1 = hi - g * (hi - lo);
    let mut x2 = lo + g * (hi - lo);
    let (mut f1, mut f2) = (f(x1), f(x2));
    while hi - lo > tol {
        if f1 <= f2 {
            hi = x2;
            x2 = x1;
            f2 = f1;
            x1 = hi - g * (hi - lo);
            f1 = f(x1);
        } else {
            lo = x1;
            x1 = x2;
            f1 = f2;
            x2 = lo + g * (hi - lo);
            f2 = f(x2);
        }
    }
    0.5 * (lo + hi)
}
