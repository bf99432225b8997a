//! Command-line surface.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};

use crate::config::{parse_config, ExperimentConfig};
use crate::decompose::{bias_terms, grids_from_csv, total_variance_split};
use crate::dgp::f_true;
use crate::error::{Error, Result};
use crate::experiment::{check_grid_text, run_experiment, verify_artifact};
use crate::report::{fmt_f64, REFERENCE};

pub const OUTPUT_DIR_ENV: &str = "UQSIM_OUTPUT_DIR";
pub const DEFAULT_OUTPUT_DIR: &str = "uqsim-output";

pub const EXIT_OK: i32 = 0;
pub const EXIT_TASK_FAILURE: i32 = 1;
pub const EXIT_CONFIG: i32 = 2;

#[derive(Debug, Parser)]
#[command(
    name = "uqsim",
    version,
    about = "Aleatoric/epistemic uncertainty simulation harness"
)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Run the configured experiment.
    Run(RunArgs),
    /// Check the checksums and decomposition identities of a run directory.
    Verify { dir: PathBuf },
    /// Estimate only the reference distribution.
    Reference(RunArgs),
    /// Print the epistemic breakdown of a stored reference grid CSV.
    Decompose {
        #[arg(long)]
        grid: PathBuf,
    },
}

#[derive(Debug, Args, Clone, Default)]
pub struct RunArgs {
    /// Configuration file; defaults apply to missing keys.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long, env = OUTPUT_DIR_ENV)]
    pub output_dir: Option<PathBuf>,
    /// Maximum number of concurrent trainings.
    #[arg(long)]
    pub parallelism: Option<usize>,
    /// Comma-separated method names.
    #[arg(long, value_delimiter = ',')]
    pub methods: Option<Vec<String>>,
    /// Replaces the run seed list with a single seed.
    #[arg(long)]
    pub seed: Option<u64>,
}

/// Loads the configuration and applies command-line overrides.
pub fn resolve_config(args: &RunArgs, reference_only: bool) -> Result<ExperimentConfig> {
    let mut cfg = match &args.config {
        Some(path) => parse_config(path)?,
        None => ExperimentConfig::default(),
    };
    if let Some(dir) = &args.output_dir {
        cfg.output_dir = Some(dir.clone());
    }
    if let Some(p) = args.parallelism {
        cfg.parallelism = Some(p);
    }
    if let Some(m) = &args.methods {
        cfg.methods = m.iter().map(|s| s.trim().to_string()).collect();
    }
    if reference_only {
        cfg.methods = vec![REFERENCE.into()];
    }
    if let Some(seed) = args.seed {
        cfg.run_seeds = vec![seed];
    }
    cfg.validate()?;
    Ok(cfg)
}

fn output_dir(cfg: &ExperimentConfig) -> PathBuf {
    cfg.output_dir
        .clone()
        .unwrap_or_else(|| PathBuf::from(DEFAULT_OUTPUT_DIR))
}

fn exit_code(e: &Error) -> i32 {
    match e {
        Error::Config { .. } => EXIT_CONFIG,
        _ => EXIT_TASK_FAILURE,
    }
}

fn run(args: &RunArgs, reference_only: bool, out: &mut dyn std::io::Write) -> Result<i32> {
    let cfg = resolve_config(args, reference_only)?;
    let dir = output_dir(&cfg);
    let artifact = run_experiment(&cfg, &dir)?;
    let _ = writeln!(
        out,
        "wrote {} files to {}",
        artifact.manifest.files.len(),
        dir.display()
    );
    for f in &artifact.manifest.failures {
        let _ = writeln!(out, "task {} failed: {}", f.task, f.error);
    }
    Ok(if artifact.failed() { EXIT_TASK_FAILURE } else { EXIT_OK })
}

/// Per-x breakdown table of a grid CSV.
pub fn decompose_grid_file(path: &Path) -> Result<(String, bool)> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let checks = check_grid_text(&text)?;
    let mut table = String::from("x,procedural,data,total,bias,squared_bias,identities\n");
    let mut ok = true;
    for (g, (_, check)) in grids_from_csv(&text)?.iter().zip(checks) {
        let split = total_variance_split(g)?;
        let truth = f_true(g.query_x);
        let status = match &check {
            Ok(()) => "ok".to_string(),
            Err(e) => {
                ok = false;
                format!("\"{e}\"")
            }
        };
        let bias = bias_terms(g, truth).map_or((f64::NAN, f64::NAN), |b| (b.bias, b.squared_bias));
        let _ = writeln!(
            table,
            "{},{},{},{},{},{},{}",
            fmt_f64(g.query_x),
            fmt_f64(split.procedural),
            fmt_f64(split.data),
            fmt_f64(split.total),
            fmt_f64(bias.0),
            fmt_f64(bias.1),
            status
        );
    }
    Ok((table, ok))
}

/// Executes a parsed command and returns the process exit code.
pub fn execute(cli: Cli, out: &mut dyn std::io::Write) -> i32 {
    let outcome = match &cli.command {
        Command::Run(args) => run(args, false, out),
        Command::Reference(args) => run(args, true, out),
        Command::Verify { dir } => verify_artifact(dir).map(|report| {
            let _ = write!(out, "{}", report.render());
            if report.passed() {
                EXIT_OK
            } else {
                EXIT_TASK_FAILURE
            }
        }),
        Command::Decompose { grid } => decompose_grid_file(grid).map(|(table, ok)| {
            let _ = write!(out, "{table}");
            if ok {
                EXIT_OK
            } else {
                EXIT_TASK_FAILURE
            }
        }),
    };
    outcome.unwrap_or_else(|e| {
        eprintln!("error: {e}");
        exit_code(&e)
    })
}

/// Parses `args` (including the program name) and runs the command.
pub fn main_with_args<I, T>(args: I, out: &mut dyn std::io::Write) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    match Cli::try_parse_from(args) {
        Ok(cli) => execute(cli, out),
        Err(e) => {
            let _ = e.print();
            if e.use_stderr() {
                EXIT_CONFIG
            } else {
                EXIT_OK
            }
        }
    }
}
