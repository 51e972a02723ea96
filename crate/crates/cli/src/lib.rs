//! Spec-driven experiment runner: `dwsim --spec FILE --out DIR`.

pub mod output;
pub mod runner;
pub mod spec;

use std::fs;
use std::path::{Path, PathBuf};

use clap::Parser;
use serde_json::json;
use thiserror::Error;

use spec::{parse_spec, LoadedSpec};

#[derive(Debug, Error)]
pub enum CliError {
    #[error("validation failed: {0}")]
    Validation(String),
    #[error("resource limit: {0}")]
    Resource(String),
    #[error("i/o: {0}")]
    Io(String),
    #[error(transparent)]
    Core(dwsim::Error),
}

impl From<dwsim::Error> for CliError {
    fn from(e: dwsim::Error) -> Self {
        if e.is_resource() {
            CliError::Resource(e.to_string())
        } else {
            CliError::Core(e)
        }
    }
}

pub const EXIT_OK: u8 = 0;
pub const EXIT_VALIDATION: u8 = 2;
pub const EXIT_RESOURCE: u8 = 3;
pub const EXIT_LOW_POWER: u8 = 4;

impl CliError {
    pub fn exit_code(&self) -> u8 {
        match self {
            CliError::Resource(_) => EXIT_RESOURCE,
            CliError::Core(dwsim::Error::InsufficientData(_)) => EXIT_LOW_POWER,
            _ => EXIT_VALIDATION,
        }
    }
}

#[derive(Debug, Parser)]
#[command(name = "dwsim", version, about = "Run a Dawson-Watanabe superprocess experiment from a spec file")]
pub struct Args {
    /// Experiment spec (TOML).
    #[arg(long)]
    pub spec: PathBuf,
    /// Output directory; overrides `out` in the spec.
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Root seed; overrides `seed` in the spec.
    #[arg(long)]
    pub seed: Option<u64>,
    /// Worker threads (default: all cores). Results do not depend on it.
    #[arg(long)]
    pub threads: Option<usize>,
    /// Also write a gnuplot script `plot.script`.
    #[arg(long)]
    pub emit_plot_script: bool,
    /// Check the spec and regime guards without simulating; prints a JSON report.
    #[arg(long)]
    pub validate: bool,
}

fn load(path: &Path) -> Result<LoadedSpec, CliError> {
    let text = fs::read_to_string(path).map_err(|e| CliError::Io(format!("{}: {e}", path.display())))?;
    parse_spec(&text)
}

/// Runs the CLI and returns the process exit code.
pub fn run(args: &Args) -> u8 {
    match run_inner(args) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("dwsim: {e}");
            e.exit_code()
        }
    }
}

fn run_inner(args: &Args) -> Result<u8, CliError> {
    let loaded = load(&args.spec)?;
    let spec = &loaded.spec;
    let report = spec.validate(args.seed);
    if args.validate {
        println!("{}", serde_json::to_string_pretty(&report).expect("serializable report"));
        return Ok(if report.is_ok() { EXIT_OK } else { EXIT_VALIDATION });
    }
    if !report.is_ok() {
        let msg: Vec<String> = report.violations.iter().map(|v| format!("{}: {}", v.key, v.message)).collect();
        return Err(CliError::Validation(msg.join("; ")));
    }
    let seed = args.seed.or(spec.seed).expect("validated seed");
    let out = args
        .out
        .clone()
        .or_else(|| spec.out.clone())
        .ok_or_else(|| CliError::Validation("out: no output directory (use --out or `out`)".into()))?;
    if let Some(k) = args.threads {
        if k == 0 {
            return Err(CliError::Validation("--threads must be positive".into()));
        }
        rayon::ThreadPoolBuilder::new()
            .num_threads(k)
            .build_global()
            .map_err(|e| CliError::Io(format!("thread pool: {e}")))?;
    }
    let outcome = runner::execute(spec, seed).map_err(|e| match e {
        CliError::Resource(m) => CliError::Resource(format!("{} run: {m}", spec.subcommand)),
        other => other,
    })?;

    fs::create_dir_all(&out).map_err(|e| CliError::Io(format!("{}: {e}", out.display())))?;
    let d = spec.dimension;
    output::write_csv(&out.join("results.csv"), &spec.subcommand, d, seed, &loaded.hash, &outcome.rows)?;
    let low_power = outcome.low_power();
    let summary = json!({
        "experiment_id": spec.subcommand,
        "seed": seed,
        "spec_hash": loaded.hash,
        "spec": spec,
        "low_power": low_power,
        "results": outcome.results,
    });
    output::write_json(&out.join("summary.json"), &summary)?;
    output::write_json(&out.join("schema.json"), &output::schema(&spec.subcommand, d))?;
    if args.emit_plot_script {
        output::write_plot_script(&out.join("plot.script"), &spec.subcommand, d)?;
    }
    Ok(if low_power { EXIT_LOW_POWER } else { EXIT_OK })
}
