//! Factored conditional moments: precision, log-determinant, the mean-variance
//! efficient portfolio, factor portfolios, and the Dawid–Sebastiani score.
//!
//! Run with `cargo run --example conditional_moments`.

use coco::evaluation::dawid_sebastiani;
use coco::moments::{cmve, factor_covariance, factor_portfolios, log_det, precision_apply, systematic_ratio};
use coco::MomentEstimate;
use ndarray::{array, Array1, Array2};

fn main() -> coco::Result<()> {
    // Σ = Φ S Φᵀ + diag(d) for five assets and two factors.
    let phi = array![[1.0, 0.2], [0.8, -0.5], [1.2, 0.1], [0.3, 0.9], [0.9, -0.2]];
    let s = array![[0.04, 0.01], [0.01, 0.02]];
    let d = Array1::from(vec![0.03, 0.05, 0.02, 0.04, 0.06]);
    let mu = phi.dot(&array![0.01, 0.004]);
    let est = MomentEstimate::new(mu.clone(), phi.clone(), s, d)?;

    println!("Σ =\n{:.4}", est.assemble_dense());
    println!("log det Σ = {:.6}", log_det(&est)?);
    println!("Σ⁻¹μ = {:.4}", precision_apply(&est, mu.view())?);

    let (w, sharpe) = cmve(&est)?;
    println!("efficient weights {w:.3}, predicted Sharpe per period {sharpe:.4}");

    let x = array![0.02, -0.01, 0.03, 0.00, 0.01];
    let (f, resid) = factor_portfolios(phi.view(), x.view(), None)?;
    println!("factor returns {f:.4}, residuals {resid:.4}");
    let f_cov = factor_covariance(&est, None)?;
    println!("factor share of variance ρᶠ = {:.4}", systematic_ratio(&est, f_cov.view())?);

    let bench = MomentEstimate::new(Array1::zeros(5), Array2::zeros((5, 0)), Array2::zeros((0, 0)), Array1::from_elem(5, 0.06))?;
    println!(
        "score: model {:.4}, constant-variance benchmark {:.4}",
        dawid_sebastiani(x.view(), est.mu.view(), &est)?,
        dawid_sebastiani(x.view(), bench.mu.view(), &bench)?
    );
    Ok(())
}
