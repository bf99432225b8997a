//! Orchestration of a full experiment: task dispatch, aggregation, artifact
//! persistence and artifact verification.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::config::ExperimentConfig;
use crate::decompose::{
    breakdown_row, breakdowns_from_csv, breakdowns_to_csv, check_breakdown, check_identities, der_decomposition,
    estimate_reference, grids_from_csv, grids_to_csv, variance_decomposition, ReferenceGrid,
};
use crate::dgp::{derive_seed, f_true, generate_dataset};
use crate::error::{Error, Result};
use crate::methods::{
    fit_bootstrap_ensemble, fit_deep_ensemble, fit_der, fit_hetero_gp, fit_hmc, fit_laplace, fit_mc_dropout, fit_vi,
    MethodKind, SecondOrderPredictor,
};
use crate::report::{
    aggregate_runs, compute_run_metrics, figure_csv, fmt_f64, method_rank, parse_figure_csv, parse_runs_csv,
    parse_table_csv, region_stats, regions_csv, runs_csv, table_csv, write_file, FigureSeries, GridPoint, RegionRow,
    RunMetrics, REFERENCE,
};

/// Identifies one `(method, N, run seed)` task.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct TaskKey {
    pub method: String,
    pub n: usize,
    pub run_seed: u64,
}

impl TaskKey {
    pub fn label(&self) -> String {
        format!("{}_{}_{}", self.method, self.n, self.run_seed)
    }
}

/// Grid means of the reference breakdown for one task.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ReferenceSummary {
    pub aleatoric: f64,
    pub epistemic: f64,
    pub procedural: f64,
    pub data: f64,
    pub bias: f64,
    pub squared_bias: f64,
}

#[derive(Clone, Debug)]
pub struct TaskResult {
    pub key: TaskKey,
    pub points: Vec<GridPoint>,
    pub metrics: RunMetrics,
    pub regions: RegionRow,
    pub warnings: Vec<String>,
    pub grids: Option<Vec<ReferenceGrid>>,
    pub reference: Option<ReferenceSummary>,
}

/// Seed of the training sample shared by all methods of one run.
pub fn run_dataset_seed(run_seed: u64, n: usize) -> u64 {
    derive_seed(run_seed, "run-dataset", n as u64)
}

/// Procedural seed of a method within one run.
pub fn method_seed(run_seed: u64, method: MethodKind, n: usize) -> u64 {
    derive_seed(run_seed, method.name(), n as u64)
}

fn member_seeds(seed: u64, count: usize) -> Vec<u64> {
    (0..count).map(|j| derive_seed(seed, "member", j as u64)).collect()
}

pub fn fit_method(
    cfg: &ExperimentConfig,
    kind: MethodKind,
    n: usize,
    run_seed: u64,
) -> Result<Box<dyn SecondOrderPredictor>> {
    let data = generate_dataset(&cfg.dgp_spec(), n, run_dataset_seed(run_seed, n))?;
    let seed = method_seed(run_seed, kind, n);
    Ok(match kind {
        MethodKind::DeepEnsemble => Box::new(fit_deep_ensemble(
            &data,
            &member_seeds(seed, cfg.deep_ensemble.members),
            &cfg.deep_ensemble_config(n),
        )?),
        MethodKind::BootstrapEnsemble => Box::new(fit_bootstrap_ensemble(
            &data,
            &member_seeds(seed, cfg.bootstrap_ensemble.members),
            &cfg.bootstrap_config(n),
            cfg.bootstrap_ensemble.fraction,
        )?),
        MethodKind::McDropout => Box::new(fit_mc_dropout(&data, &cfg.dropout_config(n), seed)?),
        MethodKind::Vi => Box::new(fit_vi(&data, &cfg.vi_config(n), seed)?),
        MethodKind::Laplace => Box::new(fit_laplace(&data, &cfg.laplace_config(n), seed)?),
        MethodKind::Hmc => Box::new(fit_hmc(&data, &cfg.hmc_config(n), seed)?),
        MethodKind::Der => Box::new(fit_der(&data, &cfg.der_config(n), seed)?),
        MethodKind::HeteroGp => Box::new(fit_hetero_gp(&data, &cfg.gp_config(n), seed)?),
    })
}

/// Number of second-order members drawn per test input.
pub fn inference_members(cfg: &ExperimentConfig, kind: MethodKind) -> usize {
    match kind {
        MethodKind::DeepEnsemble => cfg.deep_ensemble.members,
        MethodKind::BootstrapEnsemble => cfg.bootstrap_ensemble.members,
        MethodKind::McDropout => cfg.mc_dropout.passes,
        MethodKind::Vi => cfg.vi.test_mc,
        MethodKind::Laplace => cfg.laplace.posterior_samples,
        MethodKind::Hmc => cfg.hmc.inference_samples - cfg.hmc.inference_burn,
        MethodKind::Der => cfg.der.samples,
        MethodKind::HeteroGp => cfg.hetero_gp.samples,
    }
}

/// Test-grid outputs of a fitted predictor; NIG methods use their closed
/// forms.
pub fn evaluate_predictor(predictor: &mut dyn SecondOrderPredictor, xs: &[f64], d: usize) -> Result<Vec<GridPoint>> {
    if let Some(nig) = predictor.nig_grid(xs) {
        return xs
            .iter()
            .zip(nig)
            .map(|(&x, p)| {
                Ok(GridPoint {
                    x,
                    pred_mean: p.gamma,
                    estimate: der_decomposition(&p)?,
                })
            })
            .collect();
    }
    predictor
        .sample_grid(xs, d)?
        .iter()
        .map(|s| {
            Ok(GridPoint {
                x: s.query_x,
                pred_mean: s.mixture_mean(),
                estimate: variance_decomposition(s)?,
            })
        })
        .collect()
}

fn finish(
    cfg: &ExperimentConfig,
    key: TaskKey,
    points: Vec<GridPoint>,
    warnings: Vec<String>,
    grids: Option<Vec<ReferenceGrid>>,
    reference: Option<ReferenceSummary>,
) -> Result<TaskResult> {
    let metrics = compute_run_metrics(&key.method, key.n, key.run_seed, &points)?;
    let (left, right) = region_stats(&points, cfg.region_threshold);
    Ok(TaskResult {
        regions: RegionRow {
            method: key.method.clone(),
            n: key.n,
            run_seed: key.run_seed,
            left,
            right,
        },
        key,
        points,
        metrics,
        warnings,
        grids,
        reference,
    })
}

pub fn run_reference_task(cfg: &ExperimentConfig, n: usize, run_seed: u64) -> Result<TaskResult> {
    let xs = cfg.test_grid.points();
    let est = estimate_reference(&cfg.reference_spec(n, run_seed), &xs)?;
    let points = est
        .grids
        .iter()
        .map(|g| {
            let s = g.as_sample()?;
            Ok(GridPoint {
                x: g.query_x,
                pred_mean: s.mixture_mean(),
                estimate: variance_decomposition(&s)?,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    let m = xs.len() as f64;
    let avg = |f: &dyn Fn(usize) -> f64| (0..xs.len()).map(f).sum::<f64>() / m;
    let summary = ReferenceSummary {
        aleatoric: avg(&|i| points[i].estimate.aleatoric),
        epistemic: avg(&|i| est.breakdowns[i].total),
        procedural: avg(&|i| est.breakdowns[i].procedural),
        data: avg(&|i| est.breakdowns[i].data),
        bias: avg(&|i| est.breakdowns[i].bias.abs()),
        squared_bias: avg(&|i| est.breakdowns[i].squared_bias),
    };
    let warnings = est
        .failures
        .iter()
        .map(|f| format!("cell (d={}, gamma={}) failed: {}", f.d, f.gamma, f.reason))
        .collect();
    let key = TaskKey {
        method: REFERENCE.into(),
        n,
        run_seed,
    };
    finish(cfg, key, points, warnings, Some(est.grids), Some(summary))
}

pub fn run_method_task(cfg: &ExperimentConfig, kind: MethodKind, n: usize, run_seed: u64) -> Result<TaskResult> {
    let mut predictor = fit_method(cfg, kind, n, run_seed)?;
    let points = evaluate_predictor(
        predictor.as_mut(),
        &cfg.test_grid.points(),
        inference_members(cfg, kind),
    )?;
    let key = TaskKey {
        method: kind.name().into(),
        n,
        run_seed,
    };
    finish(cfg, key, points, predictor.warnings(), None, None)
}

pub fn run_task(cfg: &ExperimentConfig, key: &TaskKey) -> Result<TaskResult> {
    if key.method == REFERENCE {
        return run_reference_task(cfg, key.n, key.run_seed);
    }
    let kind = MethodKind::from_name(&key.method)
        .ok_or_else(|| Error::contract(format!("unknown method `{}`", key.method)))?;
    run_method_task(cfg, kind, key.n, key.run_seed)
}

/// All tasks of a configuration in canonical order.
pub fn task_keys(cfg: &ExperimentConfig) -> Vec<TaskKey> {
    let mut methods = cfg.methods.clone();
    methods.sort_by_key(|m| method_rank(m));
    let mut keys = Vec::new();
    for m in &methods {
        for &n in &cfg.sample_sizes {
            for &run_seed in &cfg.run_seeds {
                keys.push(TaskKey {
                    method: m.clone(),
                    n,
                    run_seed,
                });
            }
        }
    }
    keys
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FileEntry {
    pub path: String,
    pub sha256: String,
    pub bytes: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FailureEntry {
    pub task: String,
    pub error: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub created_unix: u64,
    pub rng: String,
    pub files: Vec<FileEntry>,
    #[serde(default)]
    pub failures: Vec<FailureEntry>,
}

pub const MANIFEST: &str = "manifest.toml";

#[derive(Clone, Debug)]
pub struct RunArtifact {
    pub dir: PathBuf,
    pub manifest: Manifest,
    pub results: Vec<TaskResult>,
}

impl RunArtifact {
    pub fn failed(&self) -> bool {
        !self.manifest.failures.is_empty()
    }
}

fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

fn error_chain(e: &Error) -> String {
    let mut s = e.to_string();
    let mut source = std::error::Error::source(e);
    while let Some(inner) = source {
        let _ = write!(s, "\n  caused by: {inner}");
        source = inner.source();
    }
    s
}

fn reference_csv(results: &[&TaskResult]) -> String {
    let mut out = String::from("N,run_seed,aleatoric,epistemic,procedural,data,bias,squared_bias\n");
    for r in results {
        if let Some(s) = r.reference {
            let _ = writeln!(
                out,
                "{},{},{},{},{},{},{},{}",
                r.key.n,
                r.key.run_seed,
                fmt_f64(s.aleatoric),
                fmt_f64(s.epistemic),
                fmt_f64(s.procedural),
                fmt_f64(s.data),
                fmt_f64(s.bias),
                fmt_f64(s.squared_bias)
            );
        }
    }
    out
}

fn task_log(cfg: &ExperimentConfig, key: &TaskKey, outcome: &std::result::Result<TaskResult, String>) -> String {
    let mut log = format!("task {}\n", key.label());
    if key.method == REFERENCE {
        let _ = writeln!(log, "n_d {} n_gamma {}", cfg.n_d, cfg.n_gamma);
    } else if let Some(kind) = MethodKind::from_name(&key.method) {
        let _ = writeln!(
            log,
            "dataset_seed {}\nprocedural_seed {}",
            run_dataset_seed(key.run_seed, key.n),
            method_seed(key.run_seed, kind, key.n)
        );
    }
    match outcome {
        Ok(r) => {
            let m = &r.metrics;
            let _ = writeln!(
                log,
                "status ok\naleatoric {}\nepistemic {}\nbias {}\nsigma_dist {}",
                fmt_f64(m.mean_aleatoric),
                fmt_f64(m.mean_epistemic),
                fmt_f64(m.mean_bias),
                fmt_f64(m.mean_sigma_distance)
            );
            for w in &r.warnings {
                let _ = writeln!(log, "warning {w}");
            }
        }
        Err(e) => {
            let _ = writeln!(log, "status failed\nerror {e}");
        }
    }
    log
}

/// Runs every task of `cfg`, writes all outputs into `dir` and returns the
/// artifact. Task failures are recorded, not raised.
pub fn run_experiment(cfg: &ExperimentConfig, dir: &Path) -> Result<RunArtifact> {
    cfg.validate()?;
    std::fs::create_dir_all(dir.join("logs")).map_err(|e| Error::io(dir, e))?;
    let keys = task_keys(cfg);
    let threads = cfg
        .parallelism
        .unwrap_or_else(|| std::thread::available_parallelism().map_or(1, |n| n.get()));
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(threads)
        .build()
        .map_err(|e| Error::contract(format!("thread pool: {e}")))?;
    let outcomes: Vec<std::result::Result<TaskResult, String>> = pool.install(|| {
        keys.par_iter()
            .map(|k| run_task(cfg, k).map_err(|e| error_chain(&e)))
            .collect()
    });

    let mut written: Vec<(String, Vec<u8>)> = Vec::new();
    let mut emit = |name: String, contents: String| -> Result<()> {
        write_file(dir, &name, &contents)?;
        written.push((name, contents.into_bytes()));
        Ok(())
    };
    emit("config.toml".into(), cfg.to_toml())?;

    let ok: Vec<&TaskResult> = outcomes.iter().filter_map(|o| o.as_ref().ok()).collect();
    let runs: Vec<RunMetrics> = ok.iter().map(|r| r.metrics.clone()).collect();
    emit("table1.csv".into(), table_csv(&aggregate_runs(&runs)?))?;
    emit("runs.csv".into(), runs_csv(&runs))?;
    emit(
        "regions.csv".into(),
        regions_csv(&ok.iter().map(|r| r.regions.clone()).collect::<Vec<_>>()),
    )?;

    // figures and stored grids come from the first successful run seed
    let mut first: BTreeMap<(usize, String, usize), &TaskResult> = BTreeMap::new();
    for r in &ok {
        first
            .entry((method_rank(&r.key.method), r.key.method.clone(), r.key.n))
            .or_insert(r);
    }
    for r in first.values() {
        let fig = FigureSeries::from_points(&r.key.method, r.key.n, &r.points);
        emit(fig.file_name(), figure_csv(&fig))?;
        if let Some(grids) = &r.grids {
            emit(format!("grid_{}_{}.csv", r.key.method, r.key.n), grids_to_csv(grids))?;
            let rows = grids
                .iter()
                .map(|g| breakdown_row(g, f_true(g.query_x)))
                .collect::<Result<Vec<_>>>()?;
            emit(
                format!("breakdown_{}_{}.csv", r.key.method, r.key.n),
                breakdowns_to_csv(&rows),
            )?;
        }
    }
    let refs: Vec<&TaskResult> = ok.iter().copied().filter(|r| r.reference.is_some()).collect();
    if !refs.is_empty() {
        emit("reference_summary.csv".into(), reference_csv(&refs))?;
    }
    let mut failures = Vec::new();
    for (key, outcome) in keys.iter().zip(&outcomes) {
        emit(format!("logs/{}.log", key.label()), task_log(cfg, key, outcome))?;
        if let Err(e) = outcome {
            failures.push(FailureEntry {
                task: key.label(),
                error: e.clone(),
            });
        }
    }

    let manifest = Manifest {
        created_unix: std::time::SystemTime::now()
            .duration_since(std::time::UNIX_EPOCH)
            .map_or(0, |d| d.as_secs()),
        rng: crate::dgp::ALGORITHM.into(),
        files: written
            .iter()
            .map(|(path, bytes)| FileEntry {
                path: path.clone(),
                sha256: sha256_hex(bytes),
                bytes: bytes.len() as u64,
            })
            .collect(),
        failures,
    };
    let text = toml::to_string(&manifest).map_err(|e| Error::Parse(e.to_string()))?;
    write_file(dir, MANIFEST, &text)?;
    Ok(RunArtifact {
        dir: dir.to_path_buf(),
        manifest,
        results: outcomes.into_iter().filter_map(|o| o.ok()).collect(),
    })
}

#[derive(Clone, Debug, PartialEq)]
pub struct VerifyEntry {
    pub file: String,
    pub passed: bool,
    pub detail: String,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct VerifyReport {
    pub entries: Vec<VerifyEntry>,
}

impl VerifyReport {
    pub fn passed(&self) -> bool {
        self.entries.iter().all(|e| e.passed)
    }

    pub fn render(&self) -> String {
        let mut out = String::new();
        for e in &self.entries {
            let status = if e.passed { "PASS" } else { "FAIL" };
            let _ = writeln!(out, "{status} {} {}", e.file, e.detail);
        }
        out
    }
}

fn check_content(dir: &Path, name: &str, text: &str) -> std::result::Result<String, String> {
    let base = name.rsplit('/').next().unwrap_or(name);
    if let Some(suffix) = base.strip_prefix("breakdown_") {
        let rows = breakdowns_from_csv(text).map_err(|e| e.to_string())?;
        // the companion grid, when present, is replayed as well
        let grids = std::fs::read_to_string(dir.join(format!("grid_{suffix}")))
            .ok()
            .and_then(|t| grids_from_csv(&t).ok())
            .unwrap_or_default();
        for r in &rows {
            let g = grids.iter().find(|g| g.query_x.to_bits() == r.x.to_bits());
            check_breakdown(r, g, f_true(r.x)).map_err(|e| format!("identity failure at x = {}: {e}", r.x))?;
        }
        return Ok(format!("checksum ok, identities hold at {} points", rows.len()));
    }
    if base.starts_with("grid_") {
        let grids = grids_from_csv(text).map_err(|e| e.to_string())?;
        for g in &grids {
            check_identities(g, f_true(g.query_x))
                .map_err(|e| format!("identity failure at x = {}: {e}", g.query_x))?;
        }
        return Ok(format!("checksum ok, identities hold on {} grids", grids.len()));
    }
    let parsed = match base {
        "table1.csv" => parse_table_csv(text).map(|_| ()),
        "runs.csv" => parse_runs_csv(text).map(|_| ()),
        b if b.starts_with("figure_") => parse_figure_csv("", 0, text).map(|_| ()),
        _ => Ok(()),
    };
    parsed.map(|_| "checksum ok".into()).map_err(|e| e.to_string())
}

/// Recomputes checksums and replays the decomposition identities on stored
/// grids.
pub fn verify_artifact(dir: &Path) -> Result<VerifyReport> {
    let path = dir.join(MANIFEST);
    let text = std::fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    let manifest: Manifest = toml::from_str(&text).map_err(|e| Error::Parse(format!("{}: {e}", path.display())))?;
    let mut report = VerifyReport::default();
    for f in &manifest.files {
        let entry = match std::fs::read(dir.join(&f.path)) {
            Err(e) => VerifyEntry {
                file: f.path.clone(),
                passed: false,
                detail: format!("missing: {e}"),
            },
            Ok(bytes) if sha256_hex(&bytes) != f.sha256 => VerifyEntry {
                file: f.path.clone(),
                passed: false,
                detail: "checksum mismatch".into(),
            },
            Ok(bytes) => {
                let outcome = String::from_utf8(bytes)
                    .map_err(|_| "not UTF-8".to_string())
                    .and_then(|t| check_content(dir, &f.path, &t));
                VerifyEntry {
                    file: f.path.clone(),
                    passed: outcome.is_ok(),
                    detail: outcome.unwrap_or_else(|e| e),
                }
            }
        };
        report.entries.push(entry);
    }
    for f in &manifest.failures {
        report.entries.push(VerifyEntry {
            file: format!("task {}", f.task),
            passed: false,
            detail: f.error.lines().next().unwrap_or("").to_string(),
        });
    }
    Ok(report)
}

/// Replays the identities on a grid CSV without a manifest.
pub fn check_grid_text(text: &str) -> Result<Vec<(f64, std::result::Result<(), String>)>> {
    Ok(grids_from_csv(text)?
        .iter()
        .map(|g| (g.query_x, check_identities(g, f_true(g.query_x))))
        .collect())
}
