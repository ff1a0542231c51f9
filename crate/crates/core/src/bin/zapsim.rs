use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};

use zapsim::engine::{run_episode_with, DetectorKind, RunOptions};
use zapsim::harness::{
    bench, fires_csv, load_config, render_dump, sweep, tracks_csv, BenchSpec, SimConfig,
    DEFAULT_TRIALS,
};
use zapsim::tracking::PredictorMode;
use zapsim::{Error, Result};

#[derive(Parser)]
#[command(
    name = "zapsim",
    version,
    about = "Closed-loop laser mosquito-neutralization simulator"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// Config file of `key = value` lines; defaults apply when omitted.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Seed, or seed base for multi-trial runs.
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = DEFAULT_TRIALS)]
    trials: u32,
    /// Output directory. Reports go to stdout when omitted.
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long, value_enum, default_value_t = Format::Csv)]
    format: Format,
}

#[derive(Clone, Copy, PartialEq, ValueEnum)]
enum Format {
    Csv,
    Json,
}

#[derive(Subcommand)]
enum Command {
    /// Run one episode and print its event log.
    Simulate {
        #[command(flatten)]
        common: Common,
    },
    /// Run the method x prediction-mode grid.
    Bench {
        #[command(flatten)]
        common: Common,
        /// Comma-separated methods; all four when omitted.
        #[arg(long, value_delimiter = ',')]
        methods: Vec<DetectorKind>,
        /// Comma-separated prediction modes; flight_model and none when omitted.
        #[arg(long, value_delimiter = ',')]
        modes: Vec<PredictorMode>,
    },
    /// Dump rendered frames, intermediates and true centroids.
    Render {
        #[command(flatten)]
        common: Common,
        #[arg(long, default_value_t = 30)]
        frames: u32,
    },
    /// Bench the configured method over values of one parameter.
    Sweep {
        #[command(flatten)]
        common: Common,
        /// Config key, e.g. pipeline.dwell
        #[arg(long)]
        param: String,
        #[arg(long, value_delimiter = ',', required = true)]
        values: Vec<f64>,
    },
}

fn config(common: &Common) -> Result<SimConfig> {
    match &common.config {
        Some(path) => load_config(path),
        None => Ok(SimConfig::default()),
    }
}

/// Writes `text` to `dir/name`, or to stdout without a directory.
fn emit(out: Option<&Path>, name: &str, text: &str) -> Result<()> {
    match out {
        Some(dir) => {
            fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
            let path = dir.join(name);
            fs::write(&path, text).map_err(|e| Error::io(&path, e))?;
            eprintln!("wrote {}", path.display());
        }
        None => print!("{text}"),
    }
    Ok(())
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Simulate { common } => {
            let cfg = config(&common)?;
            let ep = run_episode_with(
                &cfg.scenario,
                &cfg.pipeline,
                common.seed,
                None,
                RunOptions { record: true },
            )?;
            for entry in &ep.log {
                println!("{:9.4}  {}", entry.time, entry.message);
            }
            println!(
                "seed {}: {} kills, {} fires, {} hits, {} lost-track events, first kill {}",
                ep.seed,
                ep.kills(),
                ep.fires.len(),
                ep.hits,
                ep.lost_track_events,
                ep.first_kill()
                    .map_or("none".into(), |t| format!("{t:.4} s")),
            );
            if let Some(dir) = common.out.as_deref() {
                let episodes = std::slice::from_ref(&ep);
                emit(Some(dir), "tracks.csv", &tracks_csv(episodes))?;
                emit(Some(dir), "fires.csv", &fires_csv(episodes))?;
            }
        }
        Command::Bench {
            common,
            methods,
            modes,
        } => {
            let cfg = config(&common)?;
            let mut spec = BenchSpec {
                trials: common.trials,
                seed_base: common.seed,
                ..Default::default()
            };
            if !methods.is_empty() {
                spec.methods = methods;
            }
            if !modes.is_empty() {
                spec.modes = modes;
            }
            let report = bench(&cfg, &spec)?;
            match common.format {
                Format::Csv => emit(common.out.as_deref(), "bench.csv", &report.to_csv())?,
                Format::Json => emit(common.out.as_deref(), "bench.json", &report.to_json())?,
            }
        }
        Command::Render { common, frames } => {
            let cfg = config(&common)?;
            let dir = common.out.unwrap_or_else(|| PathBuf::from("render_out"));
            let files = render_dump(&cfg, frames, &dir, common.seed)?;
            eprintln!("wrote {} files to {}", files.len(), dir.display());
        }
        Command::Sweep {
            common,
            param,
            values,
        } => {
            let cfg = config(&common)?;
            let report = sweep(&cfg, &param, &values, common.trials, common.seed)?;
            match common.format {
                Format::Csv => emit(common.out.as_deref(), "sweep.csv", &report.to_csv())?,
                Format::Json => emit(common.out.as_deref(), "sweep.json", &report.to_json())?,
            }
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
