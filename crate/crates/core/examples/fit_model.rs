//! Fit the estimator on a simulated panel and compare with the population.
//!
//! Run with `cargo run --release --example fit_model`.

use coco::simulate::{gen_population, simulate_panel, Innovations, PopulationSpec};
use coco::{fit_model, FitSpec, KernelSpec};

fn main() -> coco::Result<()> {
    let pop = gen_population(&PopulationSpec { m: 3, d: 3, ..PopulationSpec::default() }, 1)?;
    // An unbalanced panel: 600 months with 20 to 59 assets each.
    let sizes: Vec<usize> = (0..600).map(|t| 20 + (t * 7) % 40).collect();
    let panel = simulate_panel(&pop, &sizes, 2, Innovations::Normal)?;

    // The population features come from the cosine kernel, so the fitted
    // rank-3 map spans the same functions up to a basis change.
    let spec = FitSpec { kernel_sy: KernelSpec::cosine(), m_sy: 3, ..FitSpec::default() };
    let model = fit_model(&panel.data_points()?, &spec)?;
    let r = &model.report;
    println!(
        "solver: {} iterations, converged = {}, objective {:.6}",
        r.iterations, r.converged, r.objective
    );
    let u = &r.u_star;
    println!("fitted idiosyncratic variance {:.4} (population {:.4})", u.u_id[[0, 0]], pop.u_id_pop);

    // Compare implied moments on a fresh cross section, which is basis-free.
    let test = simulate_panel(&pop, &[8], 99, Innovations::Normal)?;
    let xi = &test.data_points()?[0];
    let fit = model.moments(xi)?;
    let truth = coco::simulate::population_moments(&pop, xi)?;
    println!("conditional means, fitted vs population:");
    for (a, b) in fit.mu.iter().zip(truth.mu.iter()) {
        println!("  {a:+.4}  {b:+.4}");
    }
    let (sf, st) = (fit.assemble_dense(), truth.assemble_dense());
    let rel = (&sf - &st).mapv(|v| v * v).sum().sqrt() / st.mapv(|v| v * v).sum().sqrt();
    println!("relative Frobenius error of the covariance: {rel:.4}");
    Ok(())
}
