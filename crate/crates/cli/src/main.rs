//! `tollsense`: simulate, ingest, estimate, recover, train, predict, evaluate.

mod commands;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use tollsense::config::RunConfig;

#[derive(Parser)]
#[command(name = "tollsense", version, about = "Mobility modeling from toll-station transactions")]
struct Cli {
    /// Config file of `key=value` lines.
    #[arg(long, global = true, value_name = "FILE")]
    config: Option<PathBuf>,
    /// Override one config key; repeatable, applied after the file.
    #[arg(long = "set", global = true, value_name = "KEY=VALUE")]
    set: Vec<String>,
    /// Run seed, applied last.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Working directory for inputs and outputs (default `out`).
    #[arg(long, global = true, value_name = "DIR")]
    out: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic network and write graph, transactions, context and traces.
    Simulate {
        /// Seconds between trace samples.
        #[arg(long, default_value_t = 60)]
        trace_step: i64,
    },
    /// Validate transactions and split them into training and test windows.
    Ingest,
    /// Estimate the crowd speed map from unambiguous training trips.
    Speedmap,
    /// Recover routes and speed profiles of the training trips.
    Recover,
    /// Train the destination, route and speed predictors.
    Train,
    /// Predict locations for one query, or for every test transaction.
    Predict(PredictArgs),
    /// Score the trained bundle and the Emp baseline on held-out ground truth.
    Evaluate,
    /// Write descriptive mobility statistics as delimited tables.
    Stats,
}

#[derive(Args)]
pub struct PredictArgs {
    #[arg(long, requires_all = ["entrance", "time"])]
    pub vehicle: Option<String>,
    /// Entry station id.
    #[arg(long)]
    pub entrance: Option<String>,
    /// Entry time, `YYYY-MM-DD HH:MM:SS`.
    #[arg(long)]
    pub time: Option<String>,
    #[arg(long, default_value = "Car")]
    pub vehicle_type: String,
}

fn load_config(cli: &Cli) -> tollsense::Result<RunConfig> {
    let mut cfg = match &cli.config {
        Some(path) => {
            let text = std::fs::read_to_string(path)
                .map_err(|e| tollsense::Error::Missing(format!("{}: {e}", path.display())))?;
            RunConfig::parse(&text)?
        }
        None => RunConfig::default(),
    };
    for kv in &cli.set {
        let (k, v) = kv
            .split_once('=')
            .ok_or_else(|| tollsense::Error::Domain(format!("expected KEY=VALUE, got `{kv}`")))?;
        cfg.set(k, v)?;
    }
    if let Some(seed) = cli.seed {
        cfg.seed = seed;
    }
    if let Some(out) = &cli.out {
        cfg.paths.output = Some(out.clone());
    }
    cfg.finish()
}

fn run(cli: &Cli) -> Result<(), commands::Failure> {
    let cfg = load_config(cli)?;
    let ctx = commands::Context::new(cfg);
    match &cli.command {
        Command::Simulate { trace_step } => ctx.simulate(*trace_step),
        Command::Ingest => ctx.ingest(),
        Command::Speedmap => ctx.speedmap(),
        Command::Recover => ctx.recover(),
        Command::Train => ctx.train(),
        Command::Predict(args) => ctx.predict(args),
        Command::Evaluate => ctx.evaluate(),
        Command::Stats => ctx.stats(),
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            let line = serde_json::json!({ "error": f.kind, "message": f.message });
            eprintln!("{line}");
            ExitCode::FAILURE
        }
    }
}
