//! `entcal`: reproducible runner for the entropy-calibration experiments.
//!
//! Exit status: 0 on success, 1 when a run fails its own check or hits a
//! runtime error, 2 for usage and configuration errors.

mod commands;
mod config;
mod output;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use commands::Status;
use config::Config;
use output::OutputDir;

#[derive(Parser)]
#[command(
    name = "entcal",
    version,
    about = "Entropy-calibration experiments on small exact models"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// JSON config file; defaults are used for absent fields.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Master seed; every random stream in the run is derived from it.
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Output directory.
    #[arg(long, default_value = "out")]
    out: PathBuf,
    /// Worker threads (defaults to the number of cores). Results do not depend on it.
    #[arg(long)]
    jobs: Option<usize>,
}

#[derive(Subcommand)]
enum Command {
    /// Calibrate a sweep of random instances and check the EntCE and log-loss bounds.
    TheoremCheck(Common),
    /// Singleton mass of power-law urns against training-set size.
    Urn(Common),
    /// Entropy blow-up under the two-regime derailing model.
    Derail(Common),
    /// Entropy and log loss along a truncation sweep.
    Tradeoff(Common),
    /// Zipf exponent of a corpus, or of a synthetic power-law corpus.
    Zipf(Common),
    /// Log-log fit of measured scaling data.
    ScalingFit(Common),
    /// Calibrate one instance and write the models and per-step reports.
    CalibrateDemo(Common),
}

fn execute<T: Config>(
    name: &str,
    common: &Common,
    run: fn(&T, u64, &mut OutputDir) -> entcal::Result<Status>,
) -> ExitCode {
    let loaded = match config::load::<T>(common.config.as_deref()) {
        Ok(l) => l,
        Err(e) => {
            eprintln!("entcal {name}: config error: {e}");
            return ExitCode::from(2);
        }
    };
    if let Some(jobs) = common.jobs {
        if jobs == 0 {
            eprintln!("entcal {name}: --jobs must be at least 1");
            return ExitCode::from(2);
        }
        if let Err(e) = rayon::ThreadPoolBuilder::new()
            .num_threads(jobs)
            .build_global()
        {
            eprintln!("entcal {name}: cannot start thread pool: {e}");
            return ExitCode::from(1);
        }
    }
    let result = OutputDir::create(&common.out)
        .map_err(entcal::Error::from)
        .and_then(|mut out| {
            out.write_bytes("config.json", &loaded.echo)?;
            let status = run(&loaded.config, common.seed, &mut out)?;
            out.finish(name, common.seed)?;
            Ok(status)
        });
    match result {
        Ok(Status::Passed) => ExitCode::SUCCESS,
        Ok(Status::Failed(msg)) => {
            eprintln!("entcal {name}: {msg}");
            ExitCode::from(1)
        }
        Err(e) => {
            eprintln!("entcal {name}: {e}");
            ExitCode::from(1)
        }
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match &cli.command {
        Command::TheoremCheck(c) => execute("theorem-check", c, commands::theorem_check),
        Command::Urn(c) => execute("urn", c, commands::urn),
        Command::Derail(c) => execute("derail", c, commands::derail),
        Command::Tradeoff(c) => execute("tradeoff", c, commands::tradeoff),
        Command::Zipf(c) => execute("zipf", c, commands::zipf),
        Command::ScalingFit(c) => execute("scaling-fit", c, commands::scaling_fit),
        Command::CalibrateDemo(c) => execute("calibrate-demo", c, commands::calibrate_demo),
    }
}
