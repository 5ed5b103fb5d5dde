//! Write a small unbalanced panel to CSV, read it back, and preprocess it.
//!
//! Run with `cargo run --example ingest_panel`.

use coco::panel::{load_panel, preprocess, save_panel, PeriodRecord, PreprocessOptions, Schema};
use coco::Panel;
use ndarray::{array, Array1};

fn main() -> Result<(), Box<dyn std::error::Error>> {
    // Three months with two, three, and one asset; one covariate is missing.
    let periods = vec![
        PeriodRecord {
            date: "2020-01".into(),
            asset_ids: vec!["AAA".into(), "BBB".into()],
            returns: Array1::from(vec![0.012, -0.004]),
            covariates: array![[0.3, 1.2], [-0.7, 0.4]],
        },
        PeriodRecord {
            date: "2020-02".into(),
            asset_ids: vec!["AAA".into(), "BBB".into(), "CCC".into()],
            returns: Array1::from(vec![-0.021, 0.008, 0.015]),
            covariates: array![[0.1, f64::NAN], [-0.2, 0.9], [1.4, -0.3]],
        },
        PeriodRecord {
            date: "2020-03".into(),
            asset_ids: vec!["CCC".into()],
            returns: Array1::from(vec![0.031]),
            covariates: array![[1.1, -0.6]],
        },
    ];
    let panel = Panel::new(periods, vec!["size".into(), "value".into()])?;

    let dir = std::env::temp_dir().join("coco-ingest-example");
    std::fs::create_dir_all(&dir)?;
    let path = dir.join("panel.csv");
    save_panel(&panel, &path)?;
    println!("wrote {}", path.display());

    let raw = load_panel(&path, &Schema::default())?;
    let opts = PreprocessOptions { rank_transform: true, ..PreprocessOptions::default() };
    let clean = preprocess(&raw, &opts)?;
    for line in &clean.meta.log {
        println!("preprocess: {line}");
    }
    for (t, xi) in clean.data_points()?.iter().enumerate() {
        println!(
            "{}: N = {}, weight = {:.3}, covariates = {:?}",
            clean.periods[t].date,
            xi.n,
            xi.weight,
            xi.covariates().rows().into_iter().map(|r| r.to_vec()).collect::<Vec<_>>()
        );
    }
    Ok(())
}
