//! Test-grid metrics, aggregation across runs and CSV emission.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use crate::decompose::UncertaintyEstimate;
use crate::dgp::{f_true, sigma2_true};
use crate::error::{Error, Result};
use crate::methods::MethodKind;

/// Normal quantile of the 95% bands.
pub const BAND_QUANTILE: f64 = 1.96;

/// Name of the reference-distribution row.
pub const REFERENCE: &str = "reference";

/// Decimal float with 17 significant digits.
pub fn fmt_f64(v: f64) -> String {
    format!("{v:.16e}")
}

/// Method output at one test input.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct GridPoint {
    pub x: f64,
    /// Mixture-mean prediction.
    pub pred_mean: f64,
    pub estimate: UncertaintyEstimate,
}

#[derive(Clone, Debug, PartialEq)]
pub struct RunMetrics {
    pub method: String,
    pub n: usize,
    pub run_seed: u64,
    pub mean_aleatoric: f64,
    pub mean_epistemic: f64,
    /// Mean absolute deviation of the mixture mean from the true mean.
    pub mean_bias: f64,
    /// Mean `|sigma_hat - sigma|` in standard-deviation units.
    pub mean_sigma_distance: f64,
}

fn check_point(p: &GridPoint) -> Result<()> {
    let ok = p.x.is_finite()
        && p.pred_mean.is_finite()
        && p.estimate.aleatoric.is_finite()
        && p.estimate.epistemic.is_finite()
        && p.estimate.aleatoric >= 0.0
        && p.estimate.epistemic >= 0.0;
    if ok {
        Ok(())
    } else {
        Err(Error::Report {
            x: p.x,
            reason: format!("non-finite or negative prediction {p:?}"),
        })
    }
}

pub fn compute_run_metrics(method: &str, n: usize, run_seed: u64, points: &[GridPoint]) -> Result<RunMetrics> {
    if points.is_empty() {
        return Err(Error::contract("metrics need a nonempty test grid"));
    }
    points.iter().try_for_each(check_point)?;
    let avg = |f: &dyn Fn(&GridPoint) -> f64| points.iter().map(f).sum::<f64>() / points.len() as f64;
    Ok(RunMetrics {
        method: method.to_string(),
        n,
        run_seed,
        mean_aleatoric: avg(&|p| p.estimate.aleatoric),
        mean_epistemic: avg(&|p| p.estimate.epistemic),
        mean_bias: avg(&|p| (p.pred_mean - f_true(p.x)).abs()),
        mean_sigma_distance: avg(&|p| (p.estimate.aleatoric.sqrt() - sigma2_true(p.x).sqrt()).abs()),
    })
}

/// Mean and sample standard deviation of one metric.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Summary {
    pub mean: f64,
    pub std: f64,
}

pub fn summarize(values: &[f64]) -> Result<Summary> {
    if values.is_empty() {
        return Err(Error::contract("cannot summarize an empty group"));
    }
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let std = if values.len() == 1 {
        0.0
    } else {
        (values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0)).sqrt()
    };
    Ok(Summary { mean, std })
}

/// One Table-1 row.
#[derive(Clone, Debug, PartialEq)]
pub struct AggregateRow {
    pub method: String,
    pub n: usize,
    pub runs: usize,
    pub aleatoric: Summary,
    pub epistemic: Summary,
    pub bias: Summary,
    pub sigma_distance: Summary,
}

impl AggregateRow {
    /// Set when the standard deviations rest on a single run.
    pub fn single_run(&self) -> bool {
        self.runs == 1
    }
}

/// Table order: reference first, then the methods in their canonical order.
pub fn method_rank(method: &str) -> usize {
    if method == REFERENCE {
        0
    } else {
        MethodKind::from_name(method).map_or(usize::MAX, |m| m as usize + 1)
    }
}

/// Groups runs by `(method, N)` in table order.
pub fn aggregate_runs(runs: &[RunMetrics]) -> Result<Vec<AggregateRow>> {
    let mut keys: Vec<(usize, String, usize)> = runs
        .iter()
        .map(|r| (method_rank(&r.method), r.method.clone(), r.n))
        .collect();
    keys.sort();
    keys.dedup();
    keys.into_iter()
        .map(|(_, method, n)| {
            let group: Vec<&RunMetrics> = runs.iter().filter(|r| r.method == method && r.n == n).collect();
            let col = |f: fn(&RunMetrics) -> f64| summarize(&group.iter().map(|r| f(r)).collect::<Vec<_>>());
            Ok(AggregateRow {
                method,
                n,
                runs: group.len(),
                aleatoric: col(|r| r.mean_aleatoric)?,
                epistemic: col(|r| r.mean_epistemic)?,
                bias: col(|r| r.mean_bias)?,
                sigma_distance: col(|r| r.mean_sigma_distance)?,
            })
        })
        .collect()
}

/// Per-input series behind one figure.
#[derive(Clone, Debug, PartialEq)]
pub struct FigureSeries {
    pub method: String,
    pub n: usize,
    pub xs: Vec<f64>,
    pub pred_mean: Vec<f64>,
    pub alea_halfwidth: Vec<f64>,
    pub true_mean: Vec<f64>,
    pub true_halfwidth: Vec<f64>,
    pub epistemic: Vec<f64>,
}

impl FigureSeries {
    pub fn from_points(method: &str, n: usize, points: &[GridPoint]) -> Self {
        FigureSeries {
            method: method.to_string(),
            n,
            xs: points.iter().map(|p| p.x).collect(),
            pred_mean: points.iter().map(|p| p.pred_mean).collect(),
            alea_halfwidth: points
                .iter()
                .map(|p| BAND_QUANTILE * p.estimate.aleatoric.sqrt())
                .collect(),
            true_mean: points.iter().map(|p| f_true(p.x)).collect(),
            true_halfwidth: points.iter().map(|p| BAND_QUANTILE * sigma2_true(p.x).sqrt()).collect(),
            epistemic: points.iter().map(|p| p.estimate.epistemic).collect(),
        }
    }

    pub fn file_name(&self) -> String {
        format!("figure_{}_{}.csv", self.method, self.n)
    }
}

/// Averages over the inputs on one side of the region threshold.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct RegionStats {
    pub count: usize,
    pub aleatoric: f64,
    pub true_variance: f64,
    pub epistemic: f64,
    pub bias: f64,
}

/// `x < threshold` on the left, the rest on the right.
pub fn region_stats(points: &[GridPoint], threshold: f64) -> (RegionStats, RegionStats) {
    let stats = |sel: &dyn Fn(f64) -> bool| {
        let pts: Vec<&GridPoint> = points.iter().filter(|p| sel(p.x)).collect();
        let n = pts.len() as f64;
        let avg = |f: &dyn Fn(&GridPoint) -> f64| {
            if pts.is_empty() {
                0.0
            } else {
                pts.iter().map(|p| f(p)).sum::<f64>() / n
            }
        };
        RegionStats {
            count: pts.len(),
            aleatoric: avg(&|p| p.estimate.aleatoric),
            true_variance: avg(&|p| sigma2_true(p.x)),
            epistemic: avg(&|p| p.estimate.epistemic),
            bias: avg(&|p| (p.pred_mean - f_true(p.x)).abs()),
        }
    };
    (stats(&|x| x < threshold), stats(&|x| x >= threshold))
}

pub const TABLE_HEADER: &str = "method,N,aleatoric_mean,aleatoric_std,epistemic_mean,epistemic_std,bias_mean,bias_std,sigma_dist_mean,sigma_dist_std";
pub const FIGURE_HEADER: &str = "x,pred_mean,alea_halfwidth,true_mean,true_halfwidth,epistemic";
pub const RUNS_HEADER: &str = "method,N,run_seed,aleatoric,epistemic,bias,sigma_dist";
pub const REGIONS_HEADER: &str = "method,N,run_seed,region,count,aleatoric,true_variance,epistemic,bias";

pub fn table_csv(rows: &[AggregateRow]) -> String {
    let mut out = format!("{TABLE_HEADER}\n");
    for r in rows {
        let _ = writeln!(
            out,
            "{},{},{},{},{},{},{},{},{},{}",
            r.method,
            r.n,
            fmt_f64(r.aleatoric.mean),
            fmt_f64(r.aleatoric.std),
            fmt_f64(r.epistemic.mean),
            fmt_f64(r.epistemic.std),
            fmt_f64(r.bias.mean),
            fmt_f64(r.bias.std),
            fmt_f64(r.sigma_distance.mean),
            fmt_f64(r.sigma_distance.std)
        );
    }
    out
}

fn data_lines<'a>(text: &'a str, header: &str) -> Result<impl Iterator<Item = (usize, Vec<&'a str>)>> {
    let mut lines = text.lines();
    if lines.next().map(str::trim) != Some(header) {
        return Err(Error::Parse(format!("expected header `{header}`")));
    }
    Ok(lines
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| (i + 2, l.split(',').collect())))
}

fn field<T: std::str::FromStr>(f: &[&str], i: usize, line: usize) -> Result<T> {
    f.get(i)
        .and_then(|s| s.parse().ok())
        .ok_or_else(|| Error::Parse(format!("line {line}, column {}", i + 1)))
}

/// Inverse of [`table_csv`]; run counts are not stored and read back as 0.
pub fn parse_table_csv(text: &str) -> Result<Vec<AggregateRow>> {
    data_lines(text, TABLE_HEADER)?
        .map(|(line, f)| {
            if f.len() != 10 {
                return Err(Error::Parse(format!("line {line}: expected 10 fields")));
            }
            let s = |i| -> Result<Summary> {
                Ok(Summary {
                    mean: field(&f, i, line)?,
                    std: field(&f, i + 1, line)?,
                })
            };
            Ok(AggregateRow {
                method: f[0].to_string(),
                n: field(&f, 1, line)?,
                runs: 0,
                aleatoric: s(2)?,
                epistemic: s(4)?,
                bias: s(6)?,
                sigma_distance: s(8)?,
            })
        })
        .collect()
}

pub fn figure_csv(fig: &FigureSeries) -> String {
    let mut out = format!("{FIGURE_HEADER}\n");
    for i in 0..fig.xs.len() {
        let _ = writeln!(
            out,
            "{},{},{},{},{},{}",
            fmt_f64(fig.xs[i]),
            fmt_f64(fig.pred_mean[i]),
            fmt_f64(fig.alea_halfwidth[i]),
            fmt_f64(fig.true_mean[i]),
            fmt_f64(fig.true_halfwidth[i]),
            fmt_f64(fig.epistemic[i])
        );
    }
    out
}

pub fn parse_figure_csv(method: &str, n: usize, text: &str) -> Result<FigureSeries> {
    let mut fig = FigureSeries {
        method: method.to_string(),
        n,
        xs: vec![],
        pred_mean: vec![],
        alea_halfwidth: vec![],
        true_mean: vec![],
        true_halfwidth: vec![],
        epistemic: vec![],
    };
    for (line, f) in data_lines(text, FIGURE_HEADER)? {
        if f.len() != 6 {
            return Err(Error::Parse(format!("line {line}: expected 6 fields")));
        }
        fig.xs.push(field(&f, 0, line)?);
        fig.pred_mean.push(field(&f, 1, line)?);
        fig.alea_halfwidth.push(field(&f, 2, line)?);
        fig.true_mean.push(field(&f, 3, line)?);
        fig.true_halfwidth.push(field(&f, 4, line)?);
        fig.epistemic.push(field(&f, 5, line)?);
    }
    Ok(fig)
}

pub fn runs_csv(runs: &[RunMetrics]) -> String {
    let mut out = format!("{RUNS_HEADER}\n");
    for r in runs {
        let _ = writeln!(
            out,
            "{},{},{},{},{},{},{}",
            r.method,
            r.n,
            r.run_seed,
            fmt_f64(r.mean_aleatoric),
            fmt_f64(r.mean_epistemic),
            fmt_f64(r.mean_bias),
            fmt_f64(r.mean_sigma_distance)
        );
    }
    out
}

pub fn parse_runs_csv(text: &str) -> Result<Vec<RunMetrics>> {
    data_lines(text, RUNS_HEADER)?
        .map(|(line, f)| {
            if f.len() != 7 {
                return Err(Error::Parse(format!("line {line}: expected 7 fields")));
            }
            Ok(RunMetrics {
                method: f[0].to_string(),
                n: field(&f, 1, line)?,
                run_seed: field(&f, 2, line)?,
                mean_aleatoric: field(&f, 3, line)?,
                mean_epistemic: field(&f, 4, line)?,
                mean_bias: field(&f, 5, line)?,
                mean_sigma_distance: field(&f, 6, line)?,
            })
        })
        .collect()
}

/// One row of the region report.
#[derive(Clone, Debug, PartialEq)]
pub struct RegionRow {
    pub method: String,
    pub n: usize,
    pub run_seed: u64,
    pub left: RegionStats,
    pub right: RegionStats,
}

pub fn regions_csv(rows: &[RegionRow]) -> String {
    let mut out = format!("{REGIONS_HEADER}\n");
    for r in rows {
        for (name, s) in [("left", &r.left), ("right", &r.right)] {
            let _ = writeln!(
                out,
                "{},{},{},{name},{},{},{},{},{}",
                r.method,
                r.n,
                r.run_seed,
                s.count,
                fmt_f64(s.aleatoric),
                fmt_f64(s.true_variance),
                fmt_f64(s.epistemic),
                fmt_f64(s.bias)
            );
        }
    }
    out
}

pub(crate) fn write_file(dir: &Path, name: &str, contents: &str) -> Result<PathBuf> {
    let path = dir.join(name);
    std::fs::write(&path, contents).map_err(|e| Error::io(&path, e))?;
    Ok(path)
}

/// Writes `table1.csv` and one figure file per series into `dir`.
pub fn emit_outputs(rows: &[AggregateRow], figures: &[FigureSeries], dir: &Path) -> Result<Vec<PathBuf>> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut written = vec![write_file(dir, "table1.csv", &table_csv(rows))?];
    for fig in figures {
        written.push(write_file(dir, &fig.file_name(), &figure_csv(fig))?);
    }
    Ok(written)
}
