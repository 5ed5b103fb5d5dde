//! The feasible set: projections and a solve on a hand-built objective.
//!
//! Run with `cargo run --example projection`.

use coco::objective::{aggregate, section_coefficients_from_features, Lambdas};
use coco::solver::{project_dsy, project_psd_floor, solve, SolverOptions};
use ndarray::{array, Array2};

fn main() -> coco::Result<()> {
    // Nearest PSD matrix with unit corner to an indefinite input.
    let u = array![[2.0, 1.5, 0.0], [1.5, -1.0, 0.3], [0.0, 0.3, 0.5]];
    let p = project_dsy(u.view(), 0.0, 1e-12, 10_000)?;
    println!("projection onto the unit-corner PSD set:\n{p:.4}");
    println!("eigenvalue clamp at 0.1:\n{:.4}", project_psd_floor(u.view(), 0.1)?);

    // Two tiny cross sections with a constant feature.
    let lambdas = Lambdas::default();
    let sections = [array![0.5, 1.5, 1.0], array![-0.2, 0.4, 0.1]]
        .iter()
        .map(|x| {
            let ones = Array2::ones((x.len(), 1));
            section_coefficients_from_features(
                x.view(),
                1.0 / x.len() as f64,
                ones.view(),
                ones.view(),
                Array2::eye(1).view(),
                Array2::eye(1).view(),
                lambdas,
            )
        })
        .collect::<coco::Result<Vec<_>>>()?;
    let obj = aggregate(&sections, lambdas)?;
    let rep = solve(&obj, &SolverOptions::unfloored())?;
    println!(
        "U_sy =\n{:.4}\nu_id = {:.4} after {} iterations",
        rep.u_star.u_sy, rep.u_star.u_id[[0, 0]], rep.iterations
    );
    Ok(())
}
