//! Configuration-driven experiment runner for the contact-process library.

pub mod config;
pub mod output;
pub mod pipelines;
pub mod report;

use std::path::PathBuf;
use std::time::Instant;

use clap::{Args, Parser, Subcommand};
use serde::Serialize;
use thiserror::Error;

use config::{load_config, ConfigError, ExperimentConfig};
use output::{unix_now, Artifacts, Check, Manifest};

pub const EXIT_PASS: i32 = 0;
pub const EXIT_CHECK_FAILED: i32 = 1;
pub const EXIT_USAGE: i32 = 2;
pub const EXIT_RUNTIME: i32 = 3;

#[derive(Debug, Error)]
pub enum CliError {
    #[error("usage error: {0}")]
    Usage(String),
    #[error("configuration error at {0}")]
    Config(#[from] ConfigError),
    #[error("{module} failed: {message}")]
    Runtime { module: &'static str, message: String },
}

#[derive(Serialize)]
struct ErrorBody<'a> {
    kind: &'a str,
    #[serde(skip_serializing_if = "Option::is_none")]
    module: Option<&'a str>,
    #[serde(skip_serializing_if = "Option::is_none")]
    path: Option<&'a str>,
    message: String,
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            Self::Usage(_) | Self::Config(_) => EXIT_USAGE,
            Self::Runtime { .. } => EXIT_RUNTIME,
        }
    }

    /// Machine-readable form printed on standard error.
    pub fn to_json(&self) -> String {
        let body = match self {
            Self::Usage(m) => ErrorBody {
                kind: "usage",
                module: None,
                path: None,
                message: m.clone(),
            },
            Self::Config(e) => ErrorBody {
                kind: "config",
                module: None,
                path: Some(&e.path),
                message: e.message.clone(),
            },
            Self::Runtime { module, message } => ErrorBody {
                kind: "runtime",
                module: Some(module),
                path: None,
                message: message.clone(),
            },
        };
        serde_json::json!({ "error": body }).to_string()
    }
}

#[derive(Debug, Parser)]
#[command(name = "contact-lab", version, about = "Contact process experiments on graphs and the continuum")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Pipeline {
    Simulate,
    Hierarchy,
    Transience,
    Heatkernel,
    Validate,
}

impl Pipeline {
    pub fn name(self) -> &'static str {
        match self {
            Self::Simulate => "simulate",
            Self::Hierarchy => "hierarchy",
            Self::Transience => "transience",
            Self::Heatkernel => "heatkernel",
            Self::Validate => "validate",
        }
    }
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Run a contact-process ensemble and estimate correlation functions.
    Simulate(RunArgs),
    /// Integrate the first two correlation equations and the stationary pair.
    Hierarchy(RunArgs),
    /// Estimate and classify the two-walker pair integral.
    Transience(RunArgs),
    /// Estimate return probabilities of the walk and fit their decay.
    Heatkernel(RunArgs),
    /// Check criticality, positivity and duality on the configured model.
    Validate(RunArgs),
    /// Summarize the reports found in an output directory.
    Report(ReportArgs),
}

#[derive(Debug, Clone, Args)]
pub struct RunArgs {
    #[arg(long)]
    pub config: PathBuf,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[arg(long)]
    pub replicas: Option<usize>,
    #[arg(long)]
    pub threads: Option<usize>,
}

#[derive(Debug, Clone, Args)]
pub struct ReportArgs {
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

/// Applies command-line overrides; `--replicas` targets the Monte Carlo
/// stage of the chosen pipeline.
pub fn apply_overrides(cfg: &mut ExperimentConfig, pipeline: Pipeline, args: &RunArgs) -> Result<(), ConfigError> {
    if let Some(seed) = args.seed {
        cfg.seed = seed;
    }
    if let Some(out) = &args.out {
        cfg.out = out.clone();
    }
    if let Some(t) = args.threads {
        cfg.threads = Some(t);
    }
    if let Some(r) = args.replicas {
        match pipeline {
            Pipeline::Simulate | Pipeline::Hierarchy => cfg.dynamics.replicas = r,
            Pipeline::Transience => cfg.transience.replicas = r,
            Pipeline::Heatkernel => cfg.heatkernel.replicas = r,
            Pipeline::Validate => cfg.validate.duality_replicas = r,
        }
    }
    cfg.validate()
}

fn configure_threads(threads: Option<usize>) {
    if let Some(n) = threads {
        // A pool may already exist when called twice in one process.
        let _ = rayon::ThreadPoolBuilder::new().num_threads(n).build_global();
    }
}

/// Result of one pipeline run.
pub struct Outcome {
    pub passes: bool,
    pub checks: Vec<Check>,
    pub out: PathBuf,
}

fn write_report<T: Serialize>(out: &mut Artifacts, name: &str, report: &output::ModuleReport<T>) -> Result<Outcome, CliError> {
    out.json(&format!("{name}_report.json"), report)?;
    Ok(Outcome {
        passes: report.passes,
        checks: report.checks.clone(),
        out: out.dir.clone(),
    })
}

/// Runs one pipeline on a parsed configuration and writes its artifacts.
pub fn run_pipeline(pipeline: Pipeline, mut cfg: ExperimentConfig) -> Result<Outcome, CliError> {
    let started = Instant::now();
    let started_unix = unix_now();
    configure_threads(cfg.threads);
    cfg.resolve();
    let built = pipelines::build_model(&cfg)?;
    pipelines::resolve_for_space(&mut cfg, &built);
    let mut out = Artifacts::create(&cfg.out)?;
    let echo = cfg.to_toml();
    out.text("config.resolved.toml", &echo)?;
    let outcome = match pipeline {
        Pipeline::Simulate => {
            let r = pipelines::simulate(&cfg, &built, &mut out)?;
            write_report(&mut out, "simulate", &r)
        }
        Pipeline::Hierarchy => {
            let r = pipelines::hierarchy(&cfg, &built, &mut out)?;
            write_report(&mut out, "hierarchy", &r)
        }
        Pipeline::Transience => {
            let r = pipelines::transience(&cfg, &built, &mut out)?;
            write_report(&mut out, "transience", &r)
        }
        Pipeline::Heatkernel => {
            let r = pipelines::heatkernel(&cfg, &built, &mut out)?;
            write_report(&mut out, "heatkernel", &r)
        }
        Pipeline::Validate => {
            let r = pipelines::validate(&cfg, &built, &mut out)?;
            write_report(&mut out, "validate", &r)
        }
    }?;
    let manifest = Manifest {
        tool: "contact-lab",
        version: env!("CARGO_PKG_VERSION"),
        command: pipeline.name().to_string(),
        master_seed: cfg.seed,
        environment_seed: match &cfg.model {
            contact_core::space::ModelSpec::Conductance { seed, .. }
            | contact_core::space::ModelSpec::Percolation { seed, .. } => *seed,
            _ => None,
        },
        threads: rayon::current_num_threads(),
        started_unix_seconds: started_unix,
        wall_clock_seconds: started.elapsed().as_secs_f64(),
        config: echo,
        outputs: out.written.clone(),
        exit_code: if outcome.passes { EXIT_PASS } else { EXIT_CHECK_FAILED },
    };
    out.json(&format!("{}.manifest.json", pipeline.name()), &manifest)?;
    Ok(outcome)
}

fn print_checks(module: &str, checks: &[Check]) {
    for c in checks {
        let mark = if c.passed { "PASS" } else { "FAIL" };
        println!("{mark}  {module:<11} {:<24} {}", c.name, c.detail);
    }
}

fn dispatch(cli: Cli) -> Result<i32, CliError> {
    let (pipeline, args) = match cli.command {
        Command::Report(args) => {
            let dir = match (&args.out, &args.config) {
                (Some(out), _) => out.clone(),
                (None, Some(path)) => load_config(path)?.out,
                (None, None) => return Err(CliError::Usage("`report` needs --out or --config".into())),
            };
            let mut out = Artifacts::create(&dir)?;
            let summary = report::emit_report(&mut out)?;
            print!("{}", report::render(&summary));
            return Ok(if summary.passes() { EXIT_PASS } else { EXIT_CHECK_FAILED });
        }
        Command::Simulate(a) => (Pipeline::Simulate, a),
        Command::Hierarchy(a) => (Pipeline::Hierarchy, a),
        Command::Transience(a) => (Pipeline::Transience, a),
        Command::Heatkernel(a) => (Pipeline::Heatkernel, a),
        Command::Validate(a) => (Pipeline::Validate, a),
    };
    let mut cfg = load_config(&args.config)?;
    apply_overrides(&mut cfg, pipeline, &args)?;
    let outcome = run_pipeline(pipeline, cfg)?;
    print_checks(pipeline.name(), &outcome.checks);
    Ok(if outcome.passes { EXIT_PASS } else { EXIT_CHECK_FAILED })
}

/// Entry point shared by the binary and the tests; returns the exit code.
pub fn run_cli<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { EXIT_USAGE } else { EXIT_PASS };
            let _ = e.print();
            return code;
        }
    };
    match dispatch(cli) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("{}", e.to_json());
            e.exit_code()
        }
    }
}
