//! Parameter-consistency experiment: with the population features held fixed,
//! the median squared deviation of the fitted parameters shrinks like 1/T.
//!
//! Run with `cargo run --release --example rate_experiment`.

use coco::simulate::{
    asymptotics_experiment, gen_population, medians_by_t, rate_slope, AsymptoticsSpec, PopulationSpec, RateFeatures,
};
use coco::KernelSpec;

fn main() -> coco::Result<()> {
    // With a cosine population the re-selected map spans the population
    // features exactly and both modes agree. Under a Gaussian kernel the
    // re-selected map only approximates them, so its deviation levels off at
    // the approximation bias instead of decaying.
    let spec = PopulationSpec { m: 3, d: 2, kernel: KernelSpec::gaussian(2.0), ..PopulationSpec::default() };
    let pop = gen_population(&spec, 1)?;
    for features in [RateFeatures::Population, RateFeatures::Reselect] {
        let spec = AsymptoticsSpec {
            t_list: vec![100, 200, 400, 800],
            reps: 20,
            n_assets: 30,
            features,
            ..AsymptoticsSpec::default()
        };
        let rows = asymptotics_experiment(&pop, &spec, 5)?;
        println!("{features:?} features");
        for (t, m) in medians_by_t(&rows, &spec.t_list) {
            println!("  T = {t:>4}: median log deviation {m:+.3}");
        }
        println!("  slope on log T: {:.3}", rate_slope(&rows, &spec.t_list)?);
    }
    Ok(())
}
