//! Draw a population factor model and simulate panels from it.
//!
//! Run with `cargo run --example simulate_panel`.

use coco::panel::save_panel;
use coco::simulate::{gen_population, simulate_panel, Innovations, PopulationSpec};

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let spec = PopulationSpec { m: 5, d: 5, ..PopulationSpec::default() };
    let pop = gen_population(&spec, 42)?;
    println!("population rank {}, mean loadings {:.3}", pop.m(), pop.b_pop);
    println!("factor covariance:\n{:.3}", pop.factor_cov());

    let sizes = [30, 35, 40, 45];
    let normal = simulate_panel(&pop, &sizes, 7, Innovations::Normal)?;
    let heavy = simulate_panel(&pop, &sizes, 7, Innovations::StudentT { dof: 5.0 })?;
    for (p, q) in normal.periods.iter().zip(&heavy.periods) {
        let sd = |x: &ndarray::Array1<f64>| (x.mapv(|v| v * v).sum() / x.len() as f64).sqrt();
        println!("{}: N = {}, rms return normal {:.3}, student-t {:.3}", p.date, p.len(), sd(&p.returns), sd(&q.returns));
    }

    // Month streams are keyed by index, so a longer horizon keeps earlier months.
    let longer = simulate_panel(&pop, &[30, 35, 40, 45, 50], 7, Innovations::Normal)?;
    assert_eq!(longer.periods[..4], normal.periods[..]);

    let path = std::env::temp_dir().join("coco-simulated-panel.csv");
    save_panel(&normal, &path)?;
    std::fs::write(std::env::temp_dir().join("coco-population.json"), pop.to_json()?)?;
    println!("wrote {}", path.display());
    Ok(())
}
