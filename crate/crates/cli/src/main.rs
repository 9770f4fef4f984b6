//! `mziforge` command-line front end.

mod config;
mod io;
mod run;

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::Context;
use clap::{Parser, Subcommand};
use mziforge::linalg::unitarity_error;
use mziforge::mesh::{clements_decompose, mesh_to_unitary, rvd, MeshPlan};
use mziforge::network::DECOMPOSE_TOLERANCE;

use crate::config::Config;
use crate::io::{read_json, read_text, read_unitary, InputError};

/// Rebuild RVD below which `verify` accepts a plan.
const VERIFY_TOLERANCE: f64 = 1e-6;

#[derive(Parser)]
#[command(
    name = "mziforge",
    version,
    about = "Imperfection-aware MZI-mesh photonic neural network simulator"
)]
struct Cli {
    /// Worker threads (default: config `threads`, then all cores).
    #[arg(long, global = true, env = "MZIFORGE_THREADS")]
    threads: Option<usize>,
    /// Suppress the summary on standard output.
    #[arg(long, global = true)]
    quiet: bool,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run the experiment described by a JSON config.
    Run { config: PathBuf },
    /// Decompose a unitary into a Clements mesh plan.
    Decompose {
        unitary: PathBuf,
        #[arg(short, long)]
        output: PathBuf,
    },
    /// Rebuild a plan and compare it with a reference unitary.
    Verify { plan: PathBuf, unitary: PathBuf },
}

enum Failure {
    Usage(String),
    Runtime(anyhow::Error),
}

impl From<anyhow::Error> for Failure {
    fn from(e: anyhow::Error) -> Self {
        match e.downcast::<InputError>() {
            Ok(input) => Failure::Usage(input.0),
            Err(e) => Failure::Runtime(e),
        }
    }
}

impl From<InputError> for Failure {
    fn from(e: InputError) -> Self {
        Failure::Usage(e.0)
    }
}

fn thread_pool(threads: Option<usize>) -> Result<rayon::ThreadPool, Failure> {
    let mut builder = rayon::ThreadPoolBuilder::new();
    if let Some(n) = threads {
        if n == 0 {
            return Err(Failure::Usage("--threads must be positive".into()));
        }
        builder = builder.num_threads(n);
    }
    builder.build().map_err(|e| Failure::Runtime(e.into()))
}

fn run(path: &Path, threads: Option<usize>) -> Result<String, Failure> {
    let text = read_text(path)?;
    let mut cfg = Config::parse(&text).map_err(|e| Failure::Usage(format!("{}: {e}", path.display())))?;
    let base = path
        .parent()
        .filter(|p| !p.as_os_str().is_empty())
        .unwrap_or(Path::new("."));
    let base = std::path::absolute(base).map_err(|e| Failure::Runtime(e.into()))?;
    cfg.resolve_paths(&base);
    let pool = thread_pool(threads.or(cfg.threads))?;
    Ok(pool.install(|| run::execute(&cfg))?)
}

fn decompose(unitary: &Path, output: &Path) -> Result<String, Failure> {
    let u = read_unitary(unitary)?;
    let plan = clements_decompose(&u, DECOMPOSE_TOLERANCE).map_err(|e| Failure::Runtime(e.into()))?;
    let mut body = serde_json::to_string_pretty(&plan).map_err(|e| Failure::Runtime(e.into()))?;
    body.push('\n');
    std::fs::write(output, body)
        .with_context(|| format!("writing {}", output.display()))
        .map_err(Failure::Runtime)?;
    Ok(format!("{} MZIs written to {}", plan.nodes.len(), output.display()))
}

/// Prints the comparison; `Ok(false)` when the RVD is too large.
fn verify(plan: &Path, unitary: &Path, quiet: bool) -> Result<bool, Failure> {
    let plan: MeshPlan = read_json(plan)?;
    plan.validate().map_err(|e| Failure::Usage(format!("plan: {e}")))?;
    let u = read_unitary(unitary)?;
    let rebuilt = mesh_to_unitary(&plan);
    let unitarity = unitarity_error(&rebuilt).map_err(|e| Failure::Runtime(e.into()))?;
    let dist = rvd(&rebuilt, &u).map_err(|e| Failure::Runtime(e.into()))?;
    if !quiet {
        println!("unitarity error: {unitarity:e}");
        println!("rvd: {dist:e}");
    }
    Ok(dist < VERIFY_TOLERANCE)
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let outcome = match &cli.command {
        Command::Run { config } => run(config, cli.threads).map(Some),
        Command::Decompose { unitary, output } => decompose(unitary, output).map(Some),
        Command::Verify { plan, unitary } => match verify(plan, unitary, cli.quiet) {
            Ok(true) => Ok(None),
            Ok(false) => {
                eprintln!("error: rebuilt plan deviates from the unitary (RVD >= {VERIFY_TOLERANCE:e})");
                return ExitCode::from(1);
            }
            Err(e) => Err(e),
        },
    };
    match outcome {
        Ok(summary) => {
            if let (Some(s), false) = (summary, cli.quiet) {
                println!("{s}");
            }
            ExitCode::SUCCESS
        }
        Err(Failure::Usage(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(2)
        }
        Err(Failure::Runtime(e)) => {
            eprintln!("error: {e:#}");
            ExitCode::from(1)
        }
    }
}
