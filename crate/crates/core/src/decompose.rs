//! Aleatoric/epistemic splits, the procedural/data split and the
//! bias-variance terms, plus the reference-distribution estimator.

use std::fmt::Write as _;
use std::path::Path;

use rayon::prelude::*;

use crate::dgp::{derive_seed, f_true, generate_dataset, DgpSpec};
use crate::error::{Error, Result};
use crate::methods::{EnsembleConfig, NigParams, SecondOrderSample};
use crate::nn::{train_mlp, FirstOrderPrediction, TrainConfig};
use crate::report::fmt_f64;

/// Both components are in variance units.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct UncertaintyEstimate {
    pub aleatoric: f64,
    pub epistemic: f64,
}

impl UncertaintyEstimate {
    pub fn total(&self) -> f64 {
        self.aleatoric + self.epistemic
    }
}

fn mean(xs: impl ExactSizeIterator<Item = f64>) -> f64 {
    let n = xs.len() as f64;
    xs.sum::<f64>() / n
}

/// Population variance (divides by the count). Values are shifted by the
/// first element so identical inputs give exactly zero.
pub fn population_variance(xs: &[f64]) -> f64 {
    let Some(&shift) = xs.first() else {
        return f64::NAN;
    };
    let m = mean(xs.iter().map(|x| x - shift));
    mean(xs.iter().map(|x| (x - shift - m) * (x - shift - m)))
}

/// Mean member variance and population variance of member means.
pub fn variance_decomposition(sample: &SecondOrderSample) -> Result<UncertaintyEstimate> {
    if sample.members.is_empty() {
        return Err(Error::contract("variance decomposition of an empty sample"));
    }
    let means: Vec<f64> = sample.members.iter().map(|m| m.mean).collect();
    Ok(UncertaintyEstimate {
        aleatoric: mean(sample.members.iter().map(|m| m.variance)),
        epistemic: population_variance(&means),
    })
}

/// Closed forms `beta / (alpha - 1)` and `beta / (nu (alpha - 1))`.
pub fn der_decomposition(p: &NigParams) -> Result<UncertaintyEstimate> {
    p.validate()?;
    let aleatoric = p.beta / (p.alpha - 1.0);
    Ok(UncertaintyEstimate {
        aleatoric,
        epistemic: aleatoric / p.nu,
    })
}

/// `n_d x n_gamma` first-order predictions at one query point, row `d` per
/// dataset draw and column `gamma` per procedural draw.
#[derive(Clone, Debug, PartialEq)]
pub struct ReferenceGrid {
    pub query_x: f64,
    pub n_d: usize,
    pub n_gamma: usize,
    /// Row-major.
    pub predictions: Vec<FirstOrderPrediction>,
}

impl ReferenceGrid {
    pub fn new(query_x: f64, n_d: usize, n_gamma: usize, predictions: Vec<FirstOrderPrediction>) -> Result<Self> {
        if n_d == 0 || n_gamma == 0 || predictions.len() != n_d * n_gamma {
            return Err(Error::contract(format!(
                "grid {n_d} x {n_gamma} needs {} predictions, got {}",
                n_d * n_gamma,
                predictions.len()
            )));
        }
        Ok(ReferenceGrid {
            query_x,
            n_d,
            n_gamma,
            predictions,
        })
    }

    pub fn get(&self, d: usize, gamma: usize) -> FirstOrderPrediction {
        self.predictions[d * self.n_gamma + gamma]
    }

    pub fn row_means(&self, d: usize) -> Vec<f64> {
        (0..self.n_gamma).map(|g| self.get(d, g).mean).collect()
    }

    /// The whole grid viewed as one Dirac mixture.
    pub fn as_sample(&self) -> Result<SecondOrderSample> {
        SecondOrderSample::new(self.query_x, self.predictions.clone())
    }
}

/// Law-of-total-variance split of the member-mean spread.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct VarianceSplit {
    pub procedural: f64,
    pub data: f64,
    pub total: f64,
}

/// Signed bias of the grand mean and the mean squared deviation from truth.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct BiasTerms {
    pub bias: f64,
    pub squared_bias: f64,
    pub mean_squared_deviation: f64,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct EpistemicBreakdown {
    pub procedural: f64,
    pub data: f64,
    pub total: f64,
    pub bias: f64,
    pub squared_bias: f64,
}

impl EpistemicBreakdown {
    pub fn from_parts(split: VarianceSplit, bias: BiasTerms) -> Self {
        EpistemicBreakdown {
            procedural: split.procedural,
            data: split.data,
            total: split.total,
            bias: bias.bias,
            squared_bias: bias.squared_bias,
        }
    }
}

fn close(a: f64, b: f64, rel: f64) -> bool {
    (a - b).abs() <= rel * a.abs().max(b.abs()).max(1.0)
}

pub fn total_variance_split(grid: &ReferenceGrid) -> Result<VarianceSplit> {
    if grid.n_d < 2 || grid.n_gamma < 2 {
        return Err(Error::contract(format!(
            "variance split needs n_d >= 2 and n_gamma >= 2, got {} x {}",
            grid.n_d, grid.n_gamma
        )));
    }
    let rows: Vec<Vec<f64>> = (0..grid.n_d).map(|d| grid.row_means(d)).collect();
    let procedural = mean(rows.iter().map(|r| population_variance(r)));
    let row_means: Vec<f64> = rows.iter().map(|r| mean(r.iter().copied())).collect();
    let data = population_variance(&row_means);
    let all: Vec<f64> = grid.predictions.iter().map(|p| p.mean).collect();
    let total = population_variance(&all);
    if !(procedural.is_finite() && data.is_finite() && total.is_finite()) {
        return Err(Error::Numeric {
            op: "total_variance_split",
        });
    }
    Ok(VarianceSplit {
        procedural,
        data,
        total,
    })
}

pub fn bias_terms(grid: &ReferenceGrid, truth_mean: f64) -> Result<BiasTerms> {
    let means: Vec<f64> = grid.predictions.iter().map(|p| p.mean).collect();
    let bias = mean(means.iter().copied()) - truth_mean;
    let mean_squared_deviation = mean(means.iter().map(|m| (truth_mean - m).powi(2)));
    let terms = BiasTerms {
        bias,
        squared_bias: bias * bias,
        mean_squared_deviation,
    };
    let total = population_variance(&means);
    if !close(mean_squared_deviation, total + terms.squared_bias, 1e-9) {
        return Err(Error::contract(format!(
            "bias-variance identity violated at x = {}: {} vs {}",
            grid.query_x,
            mean_squared_deviation,
            total + terms.squared_bias
        )));
    }
    Ok(terms)
}

/// Checks the three decomposition identities on one grid. Returns a
/// description of the first violation.
pub fn check_identities(grid: &ReferenceGrid, truth_mean: f64) -> std::result::Result<(), String> {
    let est = grid
        .as_sample()
        .and_then(|s| variance_decomposition(&s))
        .map_err(|e| e.to_string())?;
    let mixture = {
        let m = mean(grid.predictions.iter().map(|p| p.mean));
        mean(grid.predictions.iter().map(|p| p.variance + p.mean * p.mean)) - m * m
    };
    if !close(est.total(), mixture, 1e-9) {
        return Err(format!(
            "aleatoric + epistemic {} != mixture variance {mixture}",
            est.total()
        ));
    }
    if grid.n_d >= 2 && grid.n_gamma >= 2 {
        let s = total_variance_split(grid).map_err(|e| e.to_string())?;
        if !close(s.procedural + s.data, s.total, 1e-9) {
            return Err(format!(
                "procedural {} + data {} != total {}",
                s.procedural, s.data, s.total
            ));
        }
    }
    bias_terms(grid, truth_mean).map(|_| ()).map_err(|e| e.to_string())
}

/// Training protocol for the reference distribution.
#[derive(Clone, Debug, PartialEq)]
pub struct ReferenceSpec {
    pub dgp: DgpSpec,
    pub n: usize,
    pub n_d: usize,
    pub n_gamma: usize,
    pub training: EnsembleConfig,
    /// Seeds of the dataset draws; rows beyond the list use derived seeds.
    pub dataset_seeds: Vec<u64>,
    /// Parent of all procedural seeds.
    pub run_seed: u64,
}

impl ReferenceSpec {
    pub fn dataset_seed(&self, d: usize) -> u64 {
        self.dataset_seeds
            .get(d)
            .copied()
            .unwrap_or_else(|| derive_seed(self.run_seed, "reference-dataset", d as u64))
    }

    pub fn procedural_seed(&self, d: usize, gamma: usize) -> u64 {
        derive_seed(
            derive_seed(self.run_seed, "reference-row", d as u64),
            "reference-procedural",
            gamma as u64,
        )
    }
}

/// A `(d, gamma)` training that failed.
#[derive(Clone, Debug, PartialEq)]
pub struct CellFailure {
    pub d: usize,
    pub gamma: usize,
    pub reason: String,
}

#[derive(Clone, Debug)]
pub struct ReferenceEstimate {
    pub grids: Vec<ReferenceGrid>,
    pub breakdowns: Vec<EpistemicBreakdown>,
    pub failures: Vec<CellFailure>,
    /// Dataset rows kept in the grids.
    pub rows: Vec<usize>,
}

/// Minimum share of completed trainings for a usable reference.
pub const MIN_COMPLETION: f64 = 0.9;

/// Trains `n_d * n_gamma` networks and evaluates them on `query_points`.
///
/// Rows containing a failed cell are dropped so every kept grid stays
/// balanced; the estimate is an error below 90% completion or with fewer
/// than two rows left.
pub fn estimate_reference(spec: &ReferenceSpec, query_points: &[f64]) -> Result<ReferenceEstimate> {
    if spec.n_d < 2 || spec.n_gamma < 2 {
        return Err(Error::contract(format!(
            "reference needs n_d >= 2 and n_gamma >= 2, got {} x {}",
            spec.n_d, spec.n_gamma
        )));
    }
    if query_points.is_empty() {
        return Err(Error::contract("reference needs at least one query point"));
    }
    let datasets = (0..spec.n_d)
        .map(|d| generate_dataset(&spec.dgp, spec.n, spec.dataset_seed(d)))
        .collect::<Result<Vec<_>>>()?;
    let cells: Vec<(usize, usize)> = (0..spec.n_d)
        .flat_map(|d| (0..spec.n_gamma).map(move |g| (d, g)))
        .collect();
    let outcomes: Vec<std::result::Result<Vec<FirstOrderPrediction>, String>> = cells
        .par_iter()
        .map(|&(d, g)| {
            let tcfg = TrainConfig {
                learning_rate: spec.training.learning_rate,
                epochs: spec.training.epochs,
                batch_size: spec.training.batch_size,
                seed: spec.procedural_seed(d, g),
            };
            train_mlp(&datasets[d], &spec.training.mlp, &tcfg)
                .map(|m| m.predict_deterministic(query_points))
                .map_err(|e| e.to_string())
        })
        .collect();

    let mut failures = Vec::new();
    let mut failed_rows = vec![false; spec.n_d];
    for (&(d, gamma), out) in cells.iter().zip(&outcomes) {
        if let Err(reason) = out {
            failures.push(CellFailure {
                d,
                gamma,
                reason: reason.clone(),
            });
            failed_rows[d] = true;
        }
    }
    let completion = 1.0 - failures.len() as f64 / cells.len() as f64;
    let rows: Vec<usize> = (0..spec.n_d).filter(|&d| !failed_rows[d]).collect();
    if completion < MIN_COMPLETION || rows.len() < 2 {
        return Err(Error::method(
            "reference",
            format!(
                "only {:.1}% of trainings completed ({} usable rows)",
                100.0 * completion,
                rows.len()
            ),
        ));
    }

    let mut grids = Vec::with_capacity(query_points.len());
    let mut breakdowns = Vec::with_capacity(query_points.len());
    for (i, &x) in query_points.iter().enumerate() {
        let preds = rows
            .iter()
            .flat_map(|&d| (0..spec.n_gamma).map(move |g| (d, g)))
            .map(|(d, g)| match &outcomes[d * spec.n_gamma + g] {
                Ok(p) => p[i],
                Err(_) => unreachable!("failed rows are dropped"),
            })
            .collect();
        let grid = ReferenceGrid::new(x, rows.len(), spec.n_gamma, preds)?;
        let split = total_variance_split(&grid)?;
        let bias = bias_terms(&grid, f_true(x))?;
        breakdowns.push(EpistemicBreakdown::from_parts(split, bias));
        grids.push(grid);
    }
    Ok(ReferenceEstimate {
        grids,
        breakdowns,
        failures,
        rows,
    })
}

pub const GRID_CSV_HEADER: &str = "x,d_index,gamma_index,mean,variance";

pub fn grids_to_csv(grids: &[ReferenceGrid]) -> String {
    let mut out = String::from(GRID_CSV_HEADER);
    out.push('\n');
    for g in grids {
        for d in 0..g.n_d {
            for k in 0..g.n_gamma {
                let p = g.get(d, k);
                let _ = writeln!(
                    out,
                    "{},{d},{k},{},{}",
                    fmt_f64(g.query_x),
                    fmt_f64(p.mean),
                    fmt_f64(p.variance)
                );
            }
        }
    }
    out
}

/// Parses grids written by [`grids_to_csv`]; rows of one grid must be
/// contiguous and in row-major order.
pub fn grids_from_csv(text: &str) -> Result<Vec<ReferenceGrid>> {
    let mut lines = text.lines();
    if lines.next().map(str::trim) != Some(GRID_CSV_HEADER) {
        return Err(Error::Parse(format!("grid CSV must start with `{GRID_CSV_HEADER}`")));
    }
    type Row = (f64, usize, usize, f64, f64);
    let mut rows: Vec<Row> = Vec::new();
    for (lineno, line) in lines.enumerate().filter(|(_, l)| !l.trim().is_empty()) {
        let bad = || Error::Parse(format!("grid CSV line {}: `{line}`", lineno + 2));
        let f: Vec<&str> = line.split(',').collect();
        if f.len() != 5 {
            return Err(bad());
        }
        rows.push((
            f[0].parse().map_err(|_| bad())?,
            f[1].parse().map_err(|_| bad())?,
            f[2].parse().map_err(|_| bad())?,
            f[3].parse().map_err(|_| bad())?,
            f[4].parse().map_err(|_| bad())?,
        ));
    }
    let mut grids = Vec::new();
    let mut start = 0;
    while start < rows.len() {
        let x = rows[start].0;
        let end = rows[start..]
            .iter()
            .position(|r| r.0.to_bits() != x.to_bits())
            .map_or(rows.len(), |p| start + p);
        let block = &rows[start..end];
        let n_d = block.iter().map(|r| r.1).max().unwrap_or(0) + 1;
        let n_gamma = block.iter().map(|r| r.2).max().unwrap_or(0) + 1;
        for (k, r) in block.iter().enumerate() {
            if r.1 != k / n_gamma || r.2 != k % n_gamma {
                return Err(Error::Parse(format!(
                    "grid at x = {x} is not a complete row-major matrix"
                )));
            }
        }
        let preds = block
            .iter()
            .map(|r| FirstOrderPrediction {
                mean: r.3,
                variance: r.4,
            })
            .collect();
        grids.push(ReferenceGrid::new(x, n_d, n_gamma, preds)?);
        start = end;
    }
    Ok(grids)
}

pub fn write_grids_csv(grids: &[ReferenceGrid], path: &Path) -> Result<()> {
    std::fs::write(path, grids_to_csv(grids)).map_err(|e| Error::io(path, e))
}

pub const BREAKDOWN_CSV_HEADER: &str = "x,procedural,data,total,bias,squared_bias,mean_squared_deviation";

/// Stored epistemic breakdown at one query point.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct BreakdownRow {
    pub x: f64,
    pub breakdown: EpistemicBreakdown,
    pub mean_squared_deviation: f64,
}

pub fn breakdown_row(grid: &ReferenceGrid, truth_mean: f64) -> Result<BreakdownRow> {
    let bias = bias_terms(grid, truth_mean)?;
    Ok(BreakdownRow {
        x: grid.query_x,
        mean_squared_deviation: bias.mean_squared_deviation,
        breakdown: EpistemicBreakdown::from_parts(total_variance_split(grid)?, bias),
    })
}

pub fn breakdowns_to_csv(rows: &[BreakdownRow]) -> String {
    let mut out = String::from(BREAKDOWN_CSV_HEADER);
    out.push('\n');
    for r in rows {
        let b = &r.breakdown;
        let _ = writeln!(
            out,
            "{},{},{},{},{},{},{}",
            fmt_f64(r.x),
            fmt_f64(b.procedural),
            fmt_f64(b.data),
            fmt_f64(b.total),
            fmt_f64(b.bias),
            fmt_f64(b.squared_bias),
            fmt_f64(r.mean_squared_deviation)
        );
    }
    out
}

pub fn breakdowns_from_csv(text: &str) -> Result<Vec<BreakdownRow>> {
    let mut lines = text.lines();
    if lines.next().map(str::trim) != Some(BREAKDOWN_CSV_HEADER) {
        return Err(Error::Parse(format!(
            "breakdown CSV must start with `{BREAKDOWN_CSV_HEADER}`"
        )));
    }
    lines
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(lineno, line)| {
            let bad = || Error::Parse(format!("breakdown CSV line {}: `{line}`", lineno + 2));
            let f = line
                .split(',')
                .map(|v| v.parse::<f64>().map_err(|_| bad()))
                .collect::<Result<Vec<_>>>()?;
            if f.len() != 7 {
                return Err(bad());
            }
            Ok(BreakdownRow {
                x: f[0],
                breakdown: EpistemicBreakdown {
                    procedural: f[1],
                    data: f[2],
                    total: f[3],
                    bias: f[4],
                    squared_bias: f[5],
                },
                mean_squared_deviation: f[6],
            })
        })
        .collect()
}

/// Checks the identities among the stored components and, with `grid`,
/// their agreement with a recomputation from the stored cells.
pub fn check_breakdown(
    row: &BreakdownRow,
    grid: Option<&ReferenceGrid>,
    truth_mean: f64,
) -> std::result::Result<(), String> {
    let b = &row.breakdown;
    if !close(b.procedural + b.data, b.total, 1e-9) {
        return Err(format!(
            "procedural {} + data {} != total {}",
            b.procedural, b.data, b.total
        ));
    }
    if !close(b.squared_bias, b.bias * b.bias, 1e-9) {
        return Err(format!("squared bias {} != bias^2 {}", b.squared_bias, b.bias * b.bias));
    }
    if !close(row.mean_squared_deviation, b.total + b.squared_bias, 1e-9) {
        return Err(format!(
            "mean squared deviation {} != total {} + squared bias {}",
            row.mean_squared_deviation, b.total, b.squared_bias
        ));
    }
    if let Some(g) = grid {
        let fresh = breakdown_row(g, truth_mean).map_err(|e| e.to_string())?;
        let pairs = [
            ("procedural", b.procedural, fresh.breakdown.procedural),
            ("data", b.data, fresh.breakdown.data),
            ("bias", b.bias, fresh.breakdown.bias),
        ];
        for (name, stored, recomputed) in pairs {
            if !close(stored, recomputed, 1e-9) {
                return Err(format!(
                    "stored {name} {stored} != {recomputed} recomputed from the grid"
                ));
            }
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn breakdown_round_trip_and_perturbation() {
        let g = grid(&[&[1.0, 2.0, 4.0], &[0.5, 3.0, 3.5]]);
        let row = breakdown_row(&g, 1.5).unwrap();
        let back = breakdowns_from_csv(&breakdowns_to_csv(&[row])).unwrap();
        assert_eq!(back, vec![row]);
        assert!(check_breakdown(&row, Some(&g), 1.5).is_ok());
        let mut bad = row;
        bad.breakdown.data += 0.1;
        let err = check_breakdown(&bad, None, 1.5).unwrap_err();
        assert!(err.contains("procedural"), "{err}");
        let mut shifted = row;
        shifted.breakdown.procedural += 0.1;
        shifted.breakdown.total += 0.1;
        shifted.mean_squared_deviation += 0.1;
        assert!(check_breakdown(&shifted, None, 1.5).is_ok());
        assert!(check_breakdown(&shifted, Some(&g), 1.5).is_err());
    }

    fn pred(mean: f64, variance: f64) -> FirstOrderPrediction {
        FirstOrderPrediction { mean, variance }
    }

    fn grid(rows: &[&[f64]]) -> ReferenceGrid {
        let n_gamma = rows[0].len();
        let preds = rows.iter().flat_map(|r| r.iter().map(|&m| pred(m, 1.0))).collect();
        ReferenceGrid::new(0.5, rows.len(), n_gamma, preds).unwrap()
    }

    #[test]
    fn two_member_example() {
        let s = SecondOrderSample::new(0.1, vec![pred(0.0, 1.0), pred(2.0, 3.0)]).unwrap();
        let e = variance_decomposition(&s).unwrap();
        assert_eq!((e.aleatoric, e.epistemic), (2.0, 1.0));
        let single = SecondOrderSample::new(0.1, vec![pred(0.3, 0.7)]).unwrap();
        let e = variance_decomposition(&single).unwrap();
        assert_eq!((e.aleatoric, e.epistemic), (0.7, 0.0));
    }

    #[test]
    fn der_closed_forms() {
        let e = der_decomposition(&NigParams::new(0.0, 1.0, 3.0, 2.0).unwrap()).unwrap();
        assert_eq!((e.aleatoric, e.epistemic), (1.0, 1.0));
        let e = der_decomposition(&NigParams::new(0.0, 4.0, 2.0, 1.0).unwrap()).unwrap();
        assert_eq!((e.aleatoric, e.epistemic), (1.0, 0.25));
        let bad = NigParams {
            gamma: 0.0,
            nu: 1.0,
            alpha: 1.0,
            beta: 1.0,
        };
        assert!(der_decomposition(&bad).is_err());
    }

    #[test]
    fn split_examples() {
        let s = total_variance_split(&grid(&[&[1.0, 3.0], &[1.0, 3.0]])).unwrap();
        assert_eq!((s.procedural, s.data, s.total), (1.0, 0.0, 1.0));
        let s = total_variance_split(&grid(&[&[1.0, 1.0], &[3.0, 3.0]])).unwrap();
        assert_eq!((s.procedural, s.data, s.total), (0.0, 1.0, 1.0));
        let s = total_variance_split(&grid(&[&[2.0, 2.0], &[2.0, 2.0]])).unwrap();
        assert_eq!((s.procedural, s.data, s.total), (0.0, 0.0, 0.0));
        assert!(total_variance_split(&grid(&[&[1.0, 2.0]])).is_err());
    }

    #[test]
    fn bias_examples() {
        let b = bias_terms(&grid(&[&[1.0, 1.0], &[1.0, 1.0]]), 0.9).unwrap();
        assert!((b.bias - 0.1).abs() < 1e-15);
        assert!((b.squared_bias - 0.01).abs() < 1e-15);
        let b = bias_terms(&grid(&[&[0.0, 2.0]]), 1.0).unwrap();
        assert_eq!((b.bias, b.mean_squared_deviation), (0.0, 1.0));
    }

    #[test]
    fn csv_round_trip() {
        let g1 = grid(&[&[0.1, 0.2, 0.3], &[1.0 / 3.0, 0.5, -7.25e-9]]);
        let mut g2 = grid(&[&[4.0, 5.0], &[6.0, 7.0]]);
        g2.query_x = 0.75;
        let text = grids_to_csv(&[g1.clone(), g2.clone()]);
        assert_eq!(grids_from_csv(&text).unwrap(), vec![g1, g2]);
        assert!(grids_from_csv("x,y\n").is_err());
    }

    #[test]
    fn identities_detect_perturbation() {
        let g = grid(&[&[0.1, 0.4], &[0.3, 0.9]]);
        assert!(check_identities(&g, 0.2).is_ok());
    }
}
