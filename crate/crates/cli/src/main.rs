use std::path::PathBuf;
use std::process::ExitCode;

use biaslab::experiments::{run_mode, Mode, RunConfig};
use biaslab::Error;
use clap::error::ErrorKind;
use clap::Parser;

/// Simulate scorecard sampling bias, train bias-corrected scorecards and
/// evaluate them. Log verbosity follows RUST_LOG.
#[derive(Debug, Parser)]
#[command(name = "biaslab", version)]
struct Cli {
    /// simulate | experiment1 | experiment2 | sensitivity | impact | basl-train | evaluate
    mode: String,
    /// JSON run configuration.
    #[arg(long)]
    config: PathBuf,
    #[arg(long)]
    seed: Option<u64>,
    /// Output directory (overrides `output_dir`).
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long)]
    trials: Option<usize>,
}

const CONFIG_ERROR: u8 = 1;
const RUNTIME_ERROR: u8 = 2;

fn load(cli: &Cli) -> Result<RunConfig, Error> {
    let mut cfg = RunConfig::load(&cli.config)?;
    cfg.mode = cli.mode.parse::<Mode>()?;
    if let Some(s) = cli.seed {
        cfg.seed = s;
    }
    if let Some(t) = cli.trials {
        cfg.trials = t;
    }
    if let Some(o) = &cli.out {
        cfg.output_dir = o.clone();
    }
    cfg.validate()?;
    Ok(cfg)
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) if matches!(e.kind(), ErrorKind::DisplayHelp | ErrorKind::DisplayVersion) => {
            e.exit()
        }
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(CONFIG_ERROR);
        }
    };
    let cfg = match load(&cli) {
        Ok(c) => c,
        Err(e) => {
            eprintln!("biaslab: {e}");
            return ExitCode::from(CONFIG_ERROR);
        }
    };
    match run_mode(&cfg, &cfg.output_dir) {
        Ok(paths) => {
            for p in paths {
                println!("{}", p.display());
            }
            ExitCode::SUCCESS
        }
        Err(e) => {
            eprintln!("biaslab: {e}");
            ExitCode::from(RUNTIME_ERROR)
        }
    }
}
