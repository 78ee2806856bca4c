mod commands;
mod config;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use far::FarError;

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("{0}")]
    Config(String),
    #[error("{0}")]
    Io(String),
    #[error("{0}")]
    Numerical(String),
}

impl CliError {
    fn kind(&self) -> &'static str {
        match self {
            CliError::Config(_) => "config",
            CliError::Io(_) => "io",
            CliError::Numerical(_) => "numerical",
        }
    }

    fn code(&self) -> u8 {
        match self {
            CliError::Config(_) => 2,
            CliError::Io(_) => 3,
            CliError::Numerical(_) => 4,
        }
    }
}

impl From<FarError> for CliError {
    fn from(e: FarError) -> Self {
        let msg = e.to_string();
        if e.is_numerical() {
            CliError::Numerical(msg)
        } else {
            match e {
                FarError::Io(_) | FarError::Format(_) => CliError::Io(msg),
                _ => CliError::Config(msg),
            }
        }
    }
}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        CliError::Io(e.to_string())
    }
}

#[derive(Parser)]
#[command(name = "far", version, about = "Attribution attacks and attributionally robust training")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train the configured stages; writes checkpoints and training logs.
    Train(Common),
    /// Evaluate NA, AA, IN and CO; writes report.csv and report.json.
    Evaluate(Common),
    /// Attack one test image; writes the perturbed image and both attributions.
    Attack(Indexed),
    /// Export the attribution map of one test image.
    Explain(Indexed),
    /// Train and evaluate over a parameter grid; writes sweep.csv.
    Sweep(Common),
}

#[derive(Args, Clone)]
pub struct Common {
    /// Run configuration (TOML).
    #[arg(long)]
    pub config: PathBuf,
    /// Overrides the configured seed.
    #[arg(long)]
    pub seed: Option<u64>,
    /// Worker threads; all available cores by default.
    #[arg(long)]
    pub workers: Option<usize>,
    /// Output directory; overrides the configured one.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Args, Clone)]
pub struct Indexed {
    #[command(flatten)]
    pub common: Common,
    /// Test-set image index.
    #[arg(long, default_value_t = 0)]
    pub index: usize,
}

fn run(cli: Cli) -> Result<(), CliError> {
    let common = match &cli.command {
        Command::Train(c) | Command::Evaluate(c) | Command::Sweep(c) => c,
        Command::Attack(i) | Command::Explain(i) => &i.common,
    };
    if let Some(n) = common.workers {
        if n == 0 {
            return Err(CliError::Config("--workers must be positive".into()));
        }
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .map_err(|e| CliError::Config(format!("cannot start {n} workers: {e}")))?;
    }
    let ctx = commands::Context::new(common)?;
    match &cli.command {
        Command::Train(_) => commands::train(&ctx),
        Command::Evaluate(_) => commands::evaluate(&ctx),
        Command::Attack(i) => commands::attack(&ctx, i.index),
        Command::Explain(i) => commands::explain(&ctx, i.index),
        Command::Sweep(_) => commands::sweep(&ctx),
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            let msg = e.to_string().replace(['\n', '\r'], " ");
            eprintln!("far: error[{}]: {msg}", e.kind());
            ExitCode::from(e.code())
        }
    }
}
