//! Command-line surface: `ingest`, `fit`, `backtest`, `simulate`,
//! `asymptotics`, and `report`.
//!
//! Exit codes: 0 success, 1 usage error, 2 data error, 3 numerical failure.

use std::io::Write;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use log::info;
use serde::Serialize;

use crate::backtest::run_backtest;
use crate::config::RunConfig;
use crate::error::{CocoError, Result};
use crate::features::{median_heuristic_rho, KernelKind};
use crate::model::{fit_model, stack_covariates, FittedModel};
use crate::panel::{load_panel, preprocess, write_panel, Panel};
use crate::simulate::{
    asymptotics_experiment, gen_population, medians_by_t, rate_slope, simulate_panel, write_asymptotics_csv,
    PopulationModel, PopulationSpec,
};
use crate::solver::benchmark_sigma;

/// Accepted range of the rate-experiment slope.
pub const SLOPE_RANGE: (f64, f64) = (-1.3, -0.7);

#[derive(Debug, Parser)]
#[command(name = "coco", version, about = "Joint conditional mean and covariance estimation for unbalanced panels")]
pub struct Cli {
    #[command(flatten)]
    pub global: GlobalOpts,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Args, Clone, Default)]
pub struct GlobalOpts {
    /// JSON run configuration.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Worker threads (0 = all cores).
    #[arg(long, global = true)]
    pub threads: Option<usize>,
    /// Output directory.
    #[arg(long, global = true)]
    pub out: Option<PathBuf>,
    /// Systematic kernel: cosine, gaussian, laplace, or imq.
    #[arg(long, global = true)]
    pub kernel: Option<String>,
    /// Systematic rank (replaces the configured list).
    #[arg(long = "m-sy", global = true)]
    pub m_sy: Option<usize>,
    /// Kernel length-scale (base of the validation grid).
    #[arg(long, global = true)]
    pub rho: Option<f64>,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Load, preprocess, and normalize a long-format panel.
    Ingest { panel: PathBuf },
    /// Fit the model on the full panel.
    Fit { panel: PathBuf },
    /// Rolling out-of-sample evaluation.
    Backtest {
        panel: PathBuf,
        /// Population parameters to score alongside the fitted model.
        #[arg(long)]
        population: Option<PathBuf>,
    },
    /// Draw a population model and simulate a panel from it.
    Simulate,
    /// Parameter-consistency rate experiment.
    Asymptotics,
    /// Merge the metrics of several run directories.
    Report {
        #[arg(required = true)]
        runs: Vec<PathBuf>,
    },
}

/// Maps an error to its exit status.
pub fn exit_code(e: &CocoError) -> i32 {
    match e {
        CocoError::InvalidArgument(_) => 1,
        CocoError::Numerical(_) => 3,
        _ => 2,
    }
}

/// Resolves the configuration file and flag overrides; flags win.
pub fn resolve_config(g: &GlobalOpts) -> Result<RunConfig> {
    let mut cfg = match &g.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    if let Some(s) = g.seed {
        cfg.seed = s;
    }
    if let Some(t) = g.threads {
        cfg.threads = t;
    }
    if let Some(o) = &g.out {
        cfg.output_dir = o.display().to_string();
    }
    if let Some(k) = &g.kernel {
        cfg.kernel_sy.kind = k.parse::<KernelKind>()?;
    }
    if let Some(m) = g.m_sy {
        if m == 0 {
            return Err(CocoError::InvalidArgument("--m-sy must be ≥ 1".into()));
        }
        cfg.ranks.m_sy = vec![m];
    }
    if let Some(r) = g.rho {
        if !(r > 0.0) {
            return Err(CocoError::InvalidArgument("--rho must be positive".into()));
        }
        cfg.backtest.rho = Some(r);
        cfg.kernel_sy.rho = r;
    }
    Ok(cfg)
}

/// Parses `args` and runs the command; returns the exit status.
pub fn run_from_args<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let code = match e.kind() {
                clap::error::ErrorKind::DisplayHelp | clap::error::ErrorKind::DisplayVersion => 0,
                _ => 1,
            };
            let _ = e.print();
            return code;
        }
    };
    match run(&cli) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            exit_code(&e)
        }
    }
}

pub fn run(cli: &Cli) -> Result<()> {
    let cfg = resolve_config(&cli.global)?;
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(cfg.threads)
        .build()
        .map_err(|e| CocoError::InvalidArgument(format!("thread pool: {e}")))?;
    pool.install(|| dispatch(&cli.command, &cfg))
}

fn dispatch(cmd: &Command, cfg: &RunConfig) -> Result<()> {
    let out = PathBuf::from(&cfg.output_dir);
    match cmd {
        Command::Ingest { panel } => cmd_ingest(panel, cfg, &out),
        Command::Fit { panel } => cmd_fit(panel, cfg, &out),
        Command::Backtest { panel, population } => cmd_backtest(panel, population.as_deref(), cfg, &out),
        Command::Simulate => cmd_simulate(cfg, &out),
        Command::Asymptotics => cmd_asymptotics(cfg, &out),
        Command::Report { runs } => cmd_report(runs, cfg, &out),
    }
}

fn prepare_out(out: &Path, cfg: &RunConfig) -> Result<String> {
    std::fs::create_dir_all(out).map_err(|e| CocoError::io(out, e))?;
    let hash = cfg.hash()?;
    let resolved = out.join("config.resolved.json");
    std::fs::write(&resolved, cfg.to_json()?).map_err(|e| CocoError::io(&resolved, e))?;
    Ok(hash)
}

fn write_file(path: &Path, contents: impl AsRef<[u8]>) -> Result<()> {
    std::fs::write(path, contents).map_err(|e| CocoError::io(path, e))
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    write_file(path, serde_json::to_string_pretty(value)?)
}

fn load_prepared(path: &Path, cfg: &RunConfig) -> Result<Panel> {
    let raw = load_panel(path, &cfg.panel.schema)?;
    let panel = preprocess(&raw, &cfg.panel.preprocess)?;
    for line in &panel.meta.log {
        info!("{line}");
    }
    Ok(panel)
}

fn panel_csv(panel: &Panel, hash: &str) -> Result<Vec<u8>> {
    let mut buf = Vec::new();
    writeln!(buf, "# config-sha256: {hash}").map_err(|e| CocoError::Serde(e.to_string()))?;
    write_panel(panel, &mut buf).map_err(|e| CocoError::Serde(e.to_string()))?;
    Ok(buf)
}

#[derive(Serialize)]
struct IngestSummary<'a> {
    config_sha256: &'a str,
    periods: usize,
    observations: usize,
    covariates: &'a [String],
    first_date: Option<String>,
    last_date: Option<String>,
    log: &'a [String],
}

fn cmd_ingest(path: &Path, cfg: &RunConfig, out: &Path) -> Result<()> {
    let panel = load_prepared(path, cfg)?;
    let hash = prepare_out(out, cfg)?;
    write_file(&out.join("panel.csv"), panel_csv(&panel, &hash)?)?;
    let mut sizes = format!("# config-sha256: {hash}\ndate,n\n");
    for (d, n) in panel.dates().iter().zip(panel.sizes()) {
        sizes.push_str(&format!("{d},{n}\n"));
    }
    write_file(&out.join("sizes.csv"), sizes)?;
    let dates = panel.dates();
    write_json(
        &out.join("summary.json"),
        &IngestSummary {
            config_sha256: &hash,
            periods: panel.len(),
            observations: panel.sizes().iter().sum(),
            covariates: &panel.covariate_names,
            first_date: dates.first().cloned(),
            last_date: dates.last().cloned(),
            log: &panel.meta.log,
        },
    )?;
    println!("{} periods, {} observations", panel.len(), panel.sizes().iter().sum::<usize>());
    Ok(())
}

#[derive(Serialize)]
struct FitOutput<'a> {
    config_sha256: &'a str,
    periods: usize,
    sigma_bm: f64,
    rho: Option<f64>,
    model: &'a FittedModel,
}

fn cmd_fit(path: &Path, cfg: &RunConfig, out: &Path) -> Result<()> {
    let panel = load_prepared(path, cfg)?;
    let points = panel.data_points()?;
    let mut spec = cfg.fit_spec()?;
    if spec.kernel_sy.uses_rho() {
        spec.kernel_sy.rho = match cfg.backtest.rho {
            Some(r) => r,
            None => median_heuristic_rho(stack_covariates(&points)?.view(), cfg.backtest.median_rows)?,
        };
    }
    let model = fit_model(&points, &spec)?;
    let hash = prepare_out(out, cfg)?;
    let r = &model.report;
    write_json(
        &out.join("fit.json"),
        &FitOutput {
            config_sha256: &hash,
            periods: points.len(),
            sigma_bm: benchmark_sigma(&points)?,
            rho: spec.kernel_sy.uses_rho().then_some(spec.kernel_sy.rho),
            model: &model,
        },
    )?;
    println!(
        "rank {}: objective {:.6e}, {} iterations, converged = {}",
        model.phi_sy.rank, r.objective, r.iterations, r.converged
    );
    Ok(())
}

fn load_population(path: &Path) -> Result<PopulationModel> {
    let text = std::fs::read_to_string(path).map_err(|e| CocoError::io(path, e))?;
    PopulationModel::from_json(&text)
}

fn cmd_backtest(path: &Path, population: Option<&Path>, cfg: &RunConfig, out: &Path) -> Result<()> {
    let panel = load_prepared(path, cfg)?;
    let pop = population.map(load_population).transpose()?;
    let mut report = run_backtest(&panel, &cfg.backtest_config(), pop.as_ref())?;
    report.config_sha256 = prepare_out(out, cfg)?;
    report.write_dir(out)?;
    for run in &report.runs {
        let sd = run.summary.get("score_differential").copied().unwrap_or(f64::NAN);
        let r2 = run.summary.get("r2").copied().unwrap_or(f64::NAN);
        println!("m_sy = {}: {} windows, score differential {sd:.4}, R² {r2:.4}", run.m_sy, run.windows.len());
    }
    Ok(())
}

fn population_for(cfg: &RunConfig, spec: &PopulationSpec) -> Result<PopulationModel> {
    match &cfg.simulate.population_file {
        Some(f) => load_population(Path::new(f)),
        None => gen_population(spec, cfg.seed),
    }
}

/// `population.json`: the model plus the hash, which loaders ignore.
#[derive(Serialize)]
struct PopulationDoc<'a> {
    config_sha256: &'a str,
    #[serde(flatten)]
    model: &'a PopulationModel,
}

fn cmd_simulate(cfg: &RunConfig, out: &Path) -> Result<()> {
    let pop = population_for(cfg, &cfg.simulate.population)?;
    let sim = &cfg.simulate;
    let panel = simulate_panel(&pop, &vec![sim.n_assets; sim.months], cfg.seed, sim.innovations)?;
    let hash = prepare_out(out, cfg)?;
    write_file(&out.join("panel.csv"), panel_csv(&panel, &hash)?)?;
    write_json(
        &out.join("population.json"),
        &PopulationDoc {
            config_sha256: &hash,
            model: &pop,
        },
    )?;
    println!("simulated {} months × {} assets (population rank {})", sim.months, sim.n_assets, pop.m());
    Ok(())
}

#[derive(Serialize)]
struct AsymptoticsSummary {
    config_sha256: String,
    medians: Vec<(usize, f64)>,
    slope: f64,
    range: (f64, f64),
    pass: bool,
    failed_cells: usize,
}

fn cmd_asymptotics(cfg: &RunConfig, out: &Path) -> Result<()> {
    let sim = &cfg.simulate;
    let m = sim.asymptotics_rank;
    let spec = PopulationSpec {
        m,
        d: m,
        ..sim.population
    };
    let pop = population_for(cfg, &spec)?;
    let rows = asymptotics_experiment(&pop, &sim.asymptotics, cfg.seed)?;
    let hash = prepare_out(out, cfg)?;
    let mut buf = Vec::new();
    write_asymptotics_csv(&rows, &[format!("config-sha256: {hash}")], &mut buf)?;
    write_file(&out.join("asymptotics.csv"), buf)?;
    let slope = rate_slope(&rows, &sim.asymptotics.t_list)?;
    let pass = (SLOPE_RANGE.0..=SLOPE_RANGE.1).contains(&slope);
    let summary = AsymptoticsSummary {
        config_sha256: hash,
        medians: medians_by_t(&rows, &sim.asymptotics.t_list),
        slope,
        range: SLOPE_RANGE,
        pass,
        failed_cells: rows.iter().filter(|r| r.log_dev.is_none()).count(),
    };
    write_json(&out.join("asymptotics_summary.json"), &summary)?;
    println!(
        "slope of median log deviation on log T: {slope:.4} — {} (accepted range [{}, {}])",
        if pass { "PASS" } else { "FAIL" },
        SLOPE_RANGE.0,
        SLOPE_RANGE.1
    );
    Ok(())
}

fn cmd_report(runs: &[PathBuf], cfg: &RunConfig, out: &Path) -> Result<()> {
    let hash = prepare_out(out, cfg)?;
    let mut merged = format!("# config-sha256: {hash}\n");
    let mut header_seen = false;
    for dir in runs {
        let path = dir.join("metrics.csv");
        let text = std::fs::read_to_string(&path).map_err(|e| CocoError::io(&path, e))?;
        let label = dir
            .file_name()
            .map(|s| s.to_string_lossy().into_owned())
            .unwrap_or_else(|| dir.display().to_string());
        merged.push_str(&format!("# source {label}: {}\n", source_hash(&text).unwrap_or("unknown")));
        let mut lines = text.lines().filter(|l| !l.starts_with('#'));
        match lines.next() {
            Some("date,metric,window,value") => {}
            other => {
                return Err(CocoError::Parse {
                    path: path.display().to_string(),
                    line: 1,
                    message: format!("unexpected header {other:?}"),
                })
            }
        }
        if !header_seen {
            merged.push_str("run,date,metric,window,value\n");
            header_seen = true;
        }
        for l in lines {
            merged.push_str(&format!("{label},{l}\n"));
        }
    }
    let target = out.join("report.csv");
    write_file(&target, merged)?;
    println!("merged {} runs into {}", runs.len(), target.display());
    Ok(())
}

fn source_hash(text: &str) -> Option<&str> {
    text.lines().find_map(|l| l.strip_prefix("# config-sha256: "))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn flags_override_config() {
        let g = GlobalOpts {
            seed: Some(9),
            kernel: Some("gaussian".into()),
            m_sy: Some(7),
            rho: Some(0.5),
            ..GlobalOpts::default()
        };
        let c = resolve_config(&g).unwrap();
        assert_eq!(c.seed, 9);
        assert_eq!(c.kernel_sy.kind, KernelKind::Gaussian);
        assert_eq!(c.ranks.m_sy, vec![7]);
        assert_eq!(c.backtest.rho, Some(0.5));
        let bad = GlobalOpts {
            kernel: Some("rbf2".into()),
            ..GlobalOpts::default()
        };
        assert_eq!(exit_code(&resolve_config(&bad).unwrap_err()), 1);
    }

    #[test]
    fn usage_errors_exit_one() {
        assert_eq!(run_from_args(["coco", "frobnicate"]), 1);
        assert_eq!(run_from_args(["coco", "fit"]), 1);
        assert_eq!(run_from_args(["coco", "--help"]), 0);
    }

    #[test]
    fn missing_panel_is_a_data_error() {
        assert_eq!(run_from_args(["coco", "ingest", "/nonexistent/panel.csv"]), 2);
    }
}
