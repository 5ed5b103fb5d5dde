//! Projected first-order solver for the convex program over
//! `𝒟 = {U_sy ⪰ floor, (U_sy)₁₁ = 1} × {U_id ⪰ floor}`.
//!
//! Iterates live in scaled half-vectorized coordinates (off-diagonal entries
//! multiplied by √2), in which the Euclidean norm equals the Frobenius norm of
//! the underlying matrices. The Euclidean projection onto `𝒟` in these
//! coordinates is therefore the matrix Frobenius projection.

use log::debug;
use ndarray::{s, Array1, Array2, ArrayView1, ArrayView2};
use serde::{Deserialize, Serialize};

use crate::error::{CocoError, Result};
use crate::linalg;
use crate::objective::{unvech, vech_len, vech_of, vech_pairs, AggregateObjective, Dims};
use crate::panel::DataPoint;

/// Parameter pair `(U_sy, U_id)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ParamU {
    pub u_sy: Array2<f64>,
    pub u_id: Array2<f64>,
}

impl ParamU {
    pub fn new(u_sy: Array2<f64>, u_id: Array2<f64>) -> Result<Self> {
        if u_sy.nrows() == 0 || u_sy.nrows() != u_sy.ncols() || u_id.nrows() != u_id.ncols() {
            return Err(CocoError::dim("square U_sy (≥1) and U_id", format!("{:?}, {:?}", u_sy.dim(), u_id.dim())));
        }
        Ok(Self { u_sy, u_id })
    }

    /// `U_sy = e₁e₁ᵀ`, `U_id = floor·I`: the zero-mean, zero-variance corner.
    pub fn corner(dims: Dims) -> Self {
        let mut u_sy = Array2::zeros((dims.m_sy + 1, dims.m_sy + 1));
        u_sy[[0, 0]] = 1.0;
        Self {
            u_sy,
            u_id: Array2::zeros((dims.m_id, dims.m_id)),
        }
    }

    pub fn dims(&self) -> Dims {
        Dims::new(self.u_sy.nrows() - 1, self.u_id.nrows())
    }

    /// Mean loadings `b = U_sy[1:, 0]`.
    pub fn b(&self) -> Array1<f64> {
        self.u_sy.slice(s![1.., 0]).to_owned()
    }

    /// Second-moment block `V = U_sy[1:, 1:]`.
    pub fn v(&self) -> Array2<f64> {
        self.u_sy.slice(s![1.., 1..]).to_owned()
    }

    /// Schur complement `V − bbᵀ`.
    pub fn schur(&self) -> Array2<f64> {
        let b = self.b();
        self.v() - linalg::outer(b.view(), b.view())
    }

    /// `u = [vech U_sy; vech U_id]`.
    pub fn to_vech(&self) -> Result<Array1<f64>> {
        let a = vech_of(self.u_sy.view())?;
        let b = vech_of(self.u_id.view())?;
        Ok(a.into_iter().chain(b).collect())
    }

    pub fn from_vech(u: ArrayView1<f64>, dims: Dims) -> Result<Self> {
        if u.len() != dims.len() {
            return Err(CocoError::dim(dims.len(), u.len()));
        }
        let k = dims.len_sy();
        Ok(Self {
            u_sy: unvech(u.slice(s![..k]), dims.m_sy + 1)?,
            u_id: unvech(u.slice(s![k..]), dims.m_id)?,
        })
    }

    /// Checks the feasibility invariants, including the Schur complement.
    pub fn check_feasible(&self, eig_floor_sy: f64, floor_id: f64) -> Result<()> {
        if self.u_sy[[0, 0]] != 1.0 {
            return Err(CocoError::Numerical(format!("U_sy[0,0] = {} ≠ 1", self.u_sy[[0, 0]])));
        }
        let lo = linalg::symmetric_eigen(self.u_sy.view())?.min_value();
        if lo < eig_floor_sy - 1e-9 {
            return Err(CocoError::Numerical(format!("λ_min(U_sy) = {lo:e} below floor")));
        }
        if self.u_id.nrows() > 0 {
            let lo = linalg::symmetric_eigen(self.u_id.view())?.min_value();
            if lo < floor_id - 1e-12 {
                return Err(CocoError::Numerical(format!("λ_min(U_id) = {lo:e} below floor")));
            }
        }
        if self.u_sy.nrows() > 1 {
            let lo = linalg::symmetric_eigen(self.schur().view())?.min_value();
            if lo < -1e-8 {
                return Err(CocoError::Numerical(format!("Schur complement λ_min = {lo:e}")));
            }
        }
        Ok(())
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn from_json(s: &str) -> Result<Self> {
        let p: ParamU = serde_json::from_str(s)?;
        Self::new(p.u_sy, p.u_id)
    }
}

/// Options of [`solve`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SolverOptions {
    pub eig_floor_sy: f64,
    pub floor_id: f64,
    /// Stationarity tolerance; `None` means `1e-8 · (1 + ‖b_T‖)`.
    pub tol: Option<f64>,
    pub max_iter: usize,
    pub power_iters: usize,
    pub power_tol: f64,
    pub dykstra_tol: f64,
    pub dykstra_max_iter: usize,
    /// Starting point; projected onto the feasible set before use.
    pub init: Option<ParamU>,
}

impl Default for SolverOptions {
    fn default() -> Self {
        Self {
            eig_floor_sy: 1e-3,
            floor_id: 1e-6,
            tol: None,
            max_iter: 50_000,
            power_iters: 50,
            power_tol: 1e-8,
            dykstra_tol: 1e-12,
            dykstra_max_iter: 10_000,
            init: None,
        }
    }
}

impl SolverOptions {
    /// Options with both eigenvalue floors set to zero.
    pub fn unfloored() -> Self {
        Self {
            eig_floor_sy: 0.0,
            floor_id: 0.0,
            ..Self::default()
        }
    }
}

/// Outcome of [`solve`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SolveReport {
    pub u_star: ParamU,
    pub iterations: usize,
    pub grad_map_norm: f64,
    pub objective: f64,
    pub converged: bool,
    /// Final step-size constant after any backtracking.
    pub lipschitz: f64,
    pub tol: f64,
}

/// Euclidean projection onto `{S : λ_min(S) ≥ floor}`.
pub fn project_psd_floor(s: ArrayView2<f64>, floor: f64) -> Result<Array2<f64>> {
    if s.nrows() == 0 {
        return Ok(s.to_owned());
    }
    let eig = linalg::symmetric_eigen(s)?;
    if eig.min_value() >= floor {
        return Ok(s.to_owned());
    }
    Ok(eig.reconstruct_with(|l| l.max(floor)))
}

/// Euclidean projection onto `{λ_min(U) ≥ floor, U₁₁ = 1}` by Dykstra's
/// alternating projections.
pub fn project_dsy(u: ArrayView2<f64>, eig_floor: f64, tol: f64, max_iter: usize) -> Result<Array2<f64>> {
    let n = u.nrows();
    if n == 0 || u.ncols() != n {
        return Err(CocoError::dim("non-empty square matrix", format!("{:?}", u.dim())));
    }
    if eig_floor > 1.0 {
        return Err(CocoError::InvalidArgument(format!(
            "eigenvalue floor {eig_floor} exceeds the fixed corner entry 1"
        )));
    }
    let mut x = u.to_owned();
    let mut p = Array2::<f64>::zeros((n, n));
    let mut q = Array2::<f64>::zeros((n, n));
    let mut change = f64::INFINITY;
    for _ in 0..max_iter {
        let y = project_psd_floor((&x + &p).view(), eig_floor)?;
        p = &x + &p - &y;
        let mut x_new = &y + &q;
        x_new[[0, 0]] = 1.0;
        q = &y + &q - &x_new;
        // The affine iterate can repeat while the corrections still move,
        // so also require both half-steps to agree.
        change = linalg::frobenius((&x_new - &x).view()).max(linalg::frobenius((&x_new - &y).view()));
        x = x_new;
        if change <= tol * (1.0 + linalg::frobenius(x.view())) {
            let lo = linalg::symmetric_eigen(x.view())?.min_value();
            if lo >= eig_floor - 1e-9 {
                linalg::symmetrize(&mut x);
                return Ok(x);
            }
        }
    }
    Err(CocoError::Numerical(format!(
        "projection did not converge in {max_iter} iterations (last change {change:e})"
    )))
}

/// Diagonal scaling between `vech` and Frobenius-isometric coordinates.
fn svec_scale(dims: Dims) -> Array1<f64> {
    let sq2 = std::f64::consts::SQRT_2;
    let sy = vech_pairs(dims.m_sy + 1).into_iter();
    let id = vech_pairs(dims.m_id).into_iter();
    sy.chain(id).map(|(i, j)| if i == j { 1.0 } else { sq2 }).collect()
}

struct Problem<'a> {
    obj: &'a AggregateObjective,
    a: Array2<f64>,
    b: Array1<f64>,
    scale: Array1<f64>,
    opts: &'a SolverOptions,
}

impl Problem<'_> {
    fn value(&self, x: ArrayView1<f64>) -> f64 {
        0.5 * x.dot(&self.a.dot(&x)) + self.b.dot(&x) + self.obj.c
    }

    fn gradient(&self, x: ArrayView1<f64>) -> Array1<f64> {
        self.a.dot(&x) + &self.b
    }

    fn to_param(&self, x: ArrayView1<f64>) -> Result<ParamU> {
        ParamU::from_vech((&x / &self.scale).view(), self.obj.dims)
    }

    fn from_param(&self, p: &ParamU) -> Result<Array1<f64>> {
        Ok(p.to_vech()? * &self.scale)
    }

    fn project(&self, x: ArrayView1<f64>) -> Result<Array1<f64>> {
        let p = self.to_param(x)?;
        let u_sy = project_dsy(p.u_sy.view(), self.opts.eig_floor_sy, self.opts.dykstra_tol, self.opts.dykstra_max_iter)?;
        let u_id = project_psd_floor(p.u_id.view(), self.opts.floor_id)?;
        self.from_param(&ParamU { u_sy, u_id })
    }

    /// `L ‖x − P(x − ∇F(x)/L)‖` together with the projected point.
    fn grad_map(&self, x: ArrayView1<f64>, l: f64) -> Result<f64> {
        let g = self.gradient(x);
        let z = self.project((&x - &(g / l)).view())?;
        Ok(l * l2(&(&x - &z)))
    }
}

fn l2(v: &Array1<f64>) -> f64 {
    v.dot(v).sqrt()
}

/// Minimizes `½uᵀA_Tu + b_Tᵀu + c_T` over the feasible set with an
/// accelerated projected gradient method and monotone restarts.
pub fn solve(obj: &AggregateObjective, opts: &SolverOptions) -> Result<SolveReport> {
    let dims = obj.dims;
    let m = dims.len();
    if obj.a.dim() != (m, m) || obj.b.len() != m {
        return Err(CocoError::dim(format!("A {m}x{m}, b {m}"), format!("{:?}, {}", obj.a.dim(), obj.b.len())));
    }
    if !(opts.eig_floor_sy >= 0.0) || !(opts.floor_id >= 0.0) {
        return Err(CocoError::InvalidArgument("eigenvalue floors must be non-negative".into()));
    }
    if obj.a.iter().chain(obj.b.iter()).any(|v| !v.is_finite()) || !obj.c.is_finite() {
        return Err(CocoError::Numerical("non-finite objective coefficients".into()));
    }
    let scale = svec_scale(dims);
    let mut a = obj.a.clone();
    for i in 0..m {
        for j in 0..m {
            a[[i, j]] /= scale[i] * scale[j];
        }
    }
    let b = &obj.b / &scale;
    let prob = Problem { obj, a, b, scale, opts };
    let tol = opts.tol.unwrap_or(1e-8 * (1.0 + l2(&obj.b)));

    let start = opts.init.clone().unwrap_or_else(|| ParamU::corner(dims));
    if start.dims() != dims {
        return Err(CocoError::dim(format!("{dims:?}"), format!("{:?}", start.dims())));
    }
    let mut x = prob.project(prob.from_param(&start)?.view())?;
    let mut fx = prob.value(x.view());
    let mut y = x.clone();
    let mut t = 1.0f64;
    let lmax = linalg::power_iteration(prob.a.view(), opts.power_iters, opts.power_tol);
    let mut l = if lmax.is_finite() && lmax > 0.0 { lmax } else { 1.0 };

    let mut iterations = 0;
    let mut grad_map_norm = f64::INFINITY;
    let mut converged = false;
    while iterations < opts.max_iter {
        iterations += 1;
        let fy = prob.value(y.view());
        let gy = prob.gradient(y.view());
        let (z, fz, d) = loop {
            let z = prob.project((&y - &(&gy / l)).view())?;
            let d = &z - &y;
            let fz = prob.value(z.view());
            if !fz.is_finite() {
                return Err(CocoError::Numerical("objective became non-finite".into()));
            }
            let model = fy + gy.dot(&d) + 0.5 * l * d.dot(&d);
            if fz <= model + 1e-12 * (1.0 + fy.abs()) {
                break (z, fz, d);
            }
            l *= 2.0;
            debug!("step-size backtracking: L = {l:e}");
        };
        if fz > fx && t > 1.0 {
            // Momentum overshot: restart from the last accepted point.
            t = 1.0;
            y = x.clone();
            continue;
        }
        let proxy = l * l2(&d);
        let t_next = 0.5 * (1.0 + (1.0 + 4.0 * t * t).sqrt());
        let momentum = (t - 1.0) / t_next;
        let step = &z - &x;
        y = &z + &(step * momentum);
        x = z;
        fx = fz;
        t = t_next;
        if proxy <= tol {
            grad_map_norm = prob.grad_map(x.view(), l)?;
            if grad_map_norm <= tol {
                converged = true;
                break;
            }
        }
    }
    if !converged {
        grad_map_norm = prob.grad_map(x.view(), l)?;
        converged = grad_map_norm <= tol;
    }
    let mut u_star = prob.to_param(x.view())?;
    u_star.u_sy[[0, 0]] = 1.0;
    Ok(SolveReport {
        objective: obj.value(u_star.to_vech()?.view())?,
        u_star,
        iterations,
        grad_map_norm,
        converged,
        lipschitz: l,
        tol,
    })
}

/// Feasibility of the arrow matrix `[[1, bᵀ], [b, diag c]]`.
pub fn check_diag_feasible(b: ArrayView1<f64>, c: ArrayView1<f64>) -> bool {
    if b.len() != c.len() {
        return false;
    }
    let mut ratio = 0.0;
    for (&bi, &ci) in b.iter().zip(c.iter()) {
        if !(ci >= 0.0) {
            return false;
        }
        if ci == 0.0 {
            if bi != 0.0 {
                return false;
            }
        } else {
            ratio += bi * bi / ci;
        }
    }
    ratio <= 1.0
}

/// Closed-form variance of the constant-variance, zero-mean benchmark:
/// `Σ_t w_t ‖x_t‖² / Σ_t w_t N_t`.
pub fn benchmark_sigma(points: &[DataPoint]) -> Result<f64> {
    if points.is_empty() {
        return Err(CocoError::Data("benchmark requires at least one period".into()));
    }
    let (mut num, mut den) = (0.0, 0.0);
    for p in points {
        num += p.weight * p.returns.dot(&p.returns);
        den += p.weight * p.n as f64;
    }
    Ok(num / den)
}

/// Length of the parameter vector for the given dims (convenience).
pub fn param_len(m_sy: usize, m_id: usize) -> usize {
    vech_len(m_sy + 1) + vech_len(m_id)
}
