//! Unbalanced panels in long format: loading, preprocessing, and per-period
//! cross sections.
//!
//! A panel row `(date, asset_id, ret, z_1, …, z_d)` pairs the covariates
//! observed at `date` with the asset's excess return over the following
//! period, so one period record carries everything needed for one data point.

use std::collections::{BTreeMap, HashSet};
use std::path::Path;

use ndarray::{Array1, Array2, ArrayView2};
use serde::{Deserialize, Serialize};

use crate::error::{CocoError, Result};

/// Column mapping of the long CSV format.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Schema {
    pub date: String,
    pub asset_id: String,
    pub ret: String,
    /// Explicit covariate columns; `None` takes every remaining column.
    pub covariates: Option<Vec<String>>,
}

impl Default for Schema {
    fn default() -> Self {
        Self {
            date: "date".into(),
            asset_id: "asset_id".into(),
            ret: "ret".into(),
            covariates: None,
        }
    }
}

/// One cross section: assets alive at `date`, their covariates, and their
/// returns over the following period. Missing covariates are `NaN`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PeriodRecord {
    pub date: String,
    pub asset_ids: Vec<String>,
    pub returns: Array1<f64>,
    pub covariates: Array2<f64>,
}

impl PeriodRecord {
    pub fn len(&self) -> usize {
        self.asset_ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.asset_ids.is_empty()
    }

    fn observed_fraction(&self) -> f64 {
        let total = self.covariates.len();
        if total == 0 {
            return 1.0;
        }
        let observed = self.covariates.iter().filter(|v| !v.is_nan()).count();
        observed as f64 / total as f64
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct PanelMeta {
    pub source: Option<String>,
    /// Human-readable record of every preprocessing step applied.
    pub log: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Panel {
    pub periods: Vec<PeriodRecord>,
    pub covariate_names: Vec<String>,
    pub meta: PanelMeta,
}

/// A single data point: returns, covariates, and the cross-section weight.
#[derive(Debug, Clone, PartialEq)]
pub struct DataPoint {
    pub n: usize,
    pub returns: Array1<f64>,
    pub covariates: Array2<f64>,
    pub weight: f64,
}

impl DataPoint {
    /// Builds a data point with the default weight `1/n`.
    pub fn new(returns: Array1<f64>, covariates: Array2<f64>) -> Result<Self> {
        let n = returns.len();
        if n == 0 {
            return Err(CocoError::Data("cross section has no assets".into()));
        }
        if covariates.nrows() != n {
            return Err(CocoError::dim(
                format!("{n} covariate rows"),
                covariates.nrows(),
            ));
        }
        if returns.iter().chain(covariates.iter()).any(|v| !v.is_finite()) {
            return Err(CocoError::Data("cross section contains non-finite values".into()));
        }
        Ok(Self {
            n,
            returns,
            covariates,
            weight: 1.0 / n as f64,
        })
    }

    pub fn covariates(&self) -> ArrayView2<'_, f64> {
        self.covariates.view()
    }
}

/// Options of [`preprocess`].
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PreprocessOptions {
    /// Periods whose fraction of observed covariate cells is below this are dropped.
    pub min_observed: f64,
    /// Per-period cross-sectional rank transform of every covariate to `[-1, 1]`.
    pub rank_transform: bool,
}

impl Default for PreprocessOptions {
    fn default() -> Self {
        Self {
            min_observed: 0.30,
            rank_transform: false,
        }
    }
}

impl Panel {
    /// Validates the panel invariants: strictly increasing dates, non-empty
    /// periods, unique identifiers within a period, common covariate width.
    pub fn new(periods: Vec<PeriodRecord>, covariate_names: Vec<String>) -> Result<Self> {
        let panel = Self {
            periods,
            covariate_names,
            meta: PanelMeta::default(),
        };
        panel.validate()?;
        Ok(panel)
    }

    pub fn validate(&self) -> Result<()> {
        let d = self.covariate_names.len();
        for (k, p) in self.periods.iter().enumerate() {
            if p.is_empty() {
                return Err(CocoError::Data(format!("period {} has no assets", p.date)));
            }
            if k > 0 && self.periods[k - 1].date >= p.date {
                return Err(CocoError::Data(format!(
                    "periods not strictly increasing: {} then {}",
                    self.periods[k - 1].date, p.date
                )));
            }
            if p.returns.len() != p.len() || p.covariates.nrows() != p.len() {
                return Err(CocoError::dim(
                    format!("{} rows in period {}", p.len(), p.date),
                    format!("{} returns / {} covariate rows", p.returns.len(), p.covariates.nrows()),
                ));
            }
            if p.covariates.ncols() != d {
                return Err(CocoError::dim(format!("{d} covariates"), p.covariates.ncols()));
            }
            let mut seen = HashSet::with_capacity(p.len());
            for id in &p.asset_ids {
                if !seen.insert(id.as_str()) {
                    return Err(CocoError::Data(format!(
                        "duplicate asset {id} in period {}",
                        p.date
                    )));
                }
            }
        }
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.periods.len()
    }

    pub fn is_empty(&self) -> bool {
        self.periods.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.covariate_names.len()
    }

    pub fn dates(&self) -> Vec<String> {
        self.periods.iter().map(|p| p.date.clone()).collect()
    }

    /// Cross-section sizes `N_t`.
    pub fn sizes(&self) -> Vec<usize> {
        self.periods.iter().map(PeriodRecord::len).collect()
    }

    /// Contiguous sub-panel of periods `range`.
    pub fn slice(&self, range: std::ops::Range<usize>) -> Panel {
        Panel {
            periods: self.periods[range].to_vec(),
            covariate_names: self.covariate_names.clone(),
            meta: self.meta.clone(),
        }
    }

    /// All data points of the panel in period order.
    pub fn data_points(&self) -> Result<Vec<DataPoint>> {
        (0..self.len()).map(|t| cross_section(self, t)).collect()
    }
}

/// Reads a long-format CSV panel.
pub fn load_panel(path: impl AsRef<Path>, schema: &Schema) -> Result<Panel> {
    let path = path.as_ref();
    let shown = path.display().to_string();
    let file = std::fs::File::open(path).map_err(|e| CocoError::io(path, e))?;
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(true)
        .trim(csv::Trim::All)
        .comment(Some(b'#'))
        .from_reader(file);
    let headers = reader
        .headers()
        .map_err(|e| CocoError::Parse {
            path: shown.clone(),
            line: 1,
            message: e.to_string(),
        })?
        .clone();
    if headers.is_empty() || (headers.len() == 1 && headers[0].is_empty()) {
        return Err(CocoError::Data(format!("{shown}: empty file")));
    }
    let col = |name: &str| -> Result<usize> {
        headers.iter().position(|h| h == name).ok_or_else(|| CocoError::Parse {
            path: shown.clone(),
            line: 1,
            message: format!("missing required column `{name}`"),
        })
    };
    let date_col = col(&schema.date)?;
    let id_col = col(&schema.asset_id)?;
    let ret_col = col(&schema.ret)?;
    let cov_cols: Vec<usize> = match &schema.covariates {
        Some(names) => names.iter().map(|n| col(n)).collect::<Result<_>>()?,
        None => (0..headers.len())
            .filter(|&i| i != date_col && i != id_col && i != ret_col)
            .collect(),
    };
    let covariate_names: Vec<String> = cov_cols.iter().map(|&i| headers[i].to_string()).collect();

    struct Row {
        id: String,
        ret: f64,
        z: Vec<f64>,
    }
    let mut grouped: BTreeMap<String, Vec<Row>> = BTreeMap::new();
    let mut seen: HashSet<(String, String)> = HashSet::new();
    let mut rows = 0usize;
    for record in reader.records() {
        let record = record.map_err(|e| CocoError::Parse {
            path: shown.clone(),
            line: e.position().map(|p| p.line() as usize).unwrap_or(0),
            message: e.to_string(),
        })?;
        let line = record.position().map(|p| p.line() as usize).unwrap_or(rows + 2);
        let parse_err = |message: String| CocoError::Parse {
            path: shown.clone(),
            line,
            message,
        };
        let date = record.get(date_col).unwrap_or("").to_string();
        let id = record.get(id_col).unwrap_or("").to_string();
        if date.is_empty() || id.is_empty() {
            return Err(parse_err("empty date or asset_id".into()));
        }
        let ret_raw = record.get(ret_col).unwrap_or("");
        let ret: f64 = ret_raw
            .parse()
            .map_err(|_| parse_err(format!("non-numeric return `{ret_raw}`")))?;
        if !ret.is_finite() {
            return Err(parse_err(format!("non-finite return `{ret_raw}`")));
        }
        let mut z = Vec::with_capacity(cov_cols.len());
        for (&c, name) in cov_cols.iter().zip(&covariate_names) {
            let raw = record.get(c).unwrap_or("");
            let v = if is_missing(raw) {
                f64::NAN
            } else {
                let v: f64 = raw
                    .parse()
                    .map_err(|_| parse_err(format!("non-numeric value `{raw}` in column `{name}`")))?;
                if !v.is_finite() {
                    return Err(parse_err(format!("non-finite value `{raw}` in column `{name}`")));
                }
                v
            };
            z.push(v);
        }
        if !seen.insert((date.clone(), id.clone())) {
            return Err(parse_err(format!("duplicate (date, asset_id) = ({date}, {id})")));
        }
        grouped.entry(date).or_default().push(Row { id, ret, z });
        rows += 1;
    }
    if rows == 0 {
        return Err(CocoError::Data(format!("{shown}: no data rows")));
    }

    let d = covariate_names.len();
    let periods = grouped
        .into_iter()
        .map(|(date, rows)| {
            let n = rows.len();
            let mut covariates = Array2::<f64>::zeros((n, d));
            let mut returns = Array1::<f64>::zeros(n);
            let mut asset_ids = Vec::with_capacity(n);
            for (i, row) in rows.into_iter().enumerate() {
                returns[i] = row.ret;
                for (j, v) in row.z.into_iter().enumerate() {
                    covariates[[i, j]] = v;
                }
                asset_ids.push(row.id);
            }
            PeriodRecord {
                date,
                asset_ids,
                returns,
                covariates,
            }
        })
        .collect();
    let mut panel = Panel::new(periods, covariate_names)?;
    panel.meta.source = Some(shown.clone());
    panel
        .meta
        .log
        .push(format!("loaded {rows} rows in {} periods from {shown}", panel.len()));
    Ok(panel)
}

fn is_missing(raw: &str) -> bool {
    raw.is_empty() || raw == "."
}

/// Writes the panel in the long CSV format read by [`load_panel`]. Numbers are
/// written in shortest round-trip form, so loading the file reproduces every
/// value bit for bit.
pub fn save_panel(panel: &Panel, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let file = std::fs::File::create(path).map_err(|e| CocoError::io(path, e))?;
    write_panel(panel, file).map_err(|e| CocoError::io(path, e))
}

pub fn write_panel<W: std::io::Write>(panel: &Panel, out: W) -> std::io::Result<()> {
    let mut w = csv::Writer::from_writer(out);
    let mut header = vec!["date".to_string(), "asset_id".into(), "ret".into()];
    header.extend(panel.covariate_names.iter().cloned());
    w.write_record(&header)?;
    for p in &panel.periods {
        for i in 0..p.len() {
            let mut rec = Vec::with_capacity(header.len());
            rec.push(p.date.clone());
            rec.push(p.asset_ids[i].clone());
            rec.push(format!("{}", p.returns[i]));
            for &v in p.covariates.row(i) {
                rec.push(if v.is_nan() { String::new() } else { format!("{v}") });
            }
            w.write_record(&rec)?;
        }
    }
    w.flush()
}

/// Filters sparse periods, optionally rank-transforms, and imputes missing cells.
pub fn preprocess(panel: &Panel, opts: &PreprocessOptions) -> Result<Panel> {
    if panel.is_empty() {
        return Err(CocoError::Data("cannot preprocess an empty panel".into()));
    }
    let mut out = panel.clone();
    let before = out.len();
    let mut dropped = Vec::new();
    out.periods.retain(|p| {
        let keep = p.observed_fraction() >= opts.min_observed;
        if !keep {
            dropped.push(p.date.clone());
        }
        keep
    });
    if out.is_empty() {
        return Err(CocoError::Data(format!(
            "all {before} periods have fewer than {:.0}% observed covariates",
            100.0 * opts.min_observed
        )));
    }
    out.meta.log.push(format!(
        "dropped {} of {before} periods with observed covariate fraction < {}{}",
        dropped.len(),
        opts.min_observed,
        if dropped.is_empty() { String::new() } else { format!(": {}", dropped.join(",")) }
    ));

    let mut imputed = 0usize;
    for p in &mut out.periods {
        for mut column in p.covariates.columns_mut() {
            if opts.rank_transform {
                let ranked = rank_to_unit_interval(&column.to_vec());
                column.assign(&Array1::from(ranked));
            }
            let fill = if opts.rank_transform {
                0.0
            } else {
                median_observed(column.iter().copied()).unwrap_or(0.0)
            };
            for v in column.iter_mut() {
                if v.is_nan() {
                    *v = fill;
                    imputed += 1;
                }
            }
        }
    }
    if opts.rank_transform {
        out.meta
            .log
            .push("cross-sectional rank transform of covariates to [-1, 1]".into());
    }
    out.meta.log.push(format!(
        "imputed {imputed} missing covariate cells with the cross-sectional {}",
        if opts.rank_transform { "median rank (0)" } else { "median" }
    ));
    Ok(out)
}

/// Maps observed values to `2·rank/(n−1) − 1` with average ranks for ties;
/// `NaN` entries stay `NaN`. A single observation maps to 0.
pub fn rank_to_unit_interval(values: &[f64]) -> Vec<f64> {
    let mut idx: Vec<usize> = (0..values.len()).filter(|&i| !values[i].is_nan()).collect();
    let n = idx.len();
    let mut out = vec![f64::NAN; values.len()];
    if n == 0 {
        return out;
    }
    if n == 1 {
        out[idx[0]] = 0.0;
        return out;
    }
    idx.sort_by(|&a, &b| values[a].total_cmp(&values[b]));
    let mut start = 0;
    while start < n {
        let mut end = start + 1;
        while end < n && values[idx[end]] == values[idx[start]] {
            end += 1;
        }
        let avg_rank = (start + end - 1) as f64 / 2.0;
        let mapped = 2.0 * avg_rank / (n - 1) as f64 - 1.0;
        for &i in &idx[start..end] {
            out[i] = mapped;
        }
        start = end;
    }
    out
}

fn median_observed(values: impl Iterator<Item = f64>) -> Option<f64> {
    let mut v: Vec<f64> = values.filter(|x| !x.is_nan()).collect();
    if v.is_empty() {
        return None;
    }
    v.sort_by(f64::total_cmp);
    let n = v.len();
    Some(if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    })
}

/// Data point of period `t` with weight `1/N_t`.
pub fn cross_section(panel: &Panel, t: usize) -> Result<DataPoint> {
    let p = panel.periods.get(t).ok_or_else(|| {
        CocoError::InvalidArgument(format!(
            "period index {t} out of range for panel with {} periods",
            panel.len()
        ))
    })?;
    if p.covariates.iter().any(|v| v.is_nan()) {
        return Err(CocoError::Data(format!(
            "period {} has missing covariates; run preprocess first",
            p.date
        )));
    }
    DataPoint::new(p.returns.clone(), p.covariates.clone())
}
