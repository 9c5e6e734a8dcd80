//! `karyo` binary: subcommand dispatch, thread-pool setup, and exit codes.

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use karyo::{Error, Result};
use karyo_cli::commands::{
    cmd_detect, cmd_evaluate, cmd_fcn_convert, cmd_measure, cmd_synth, cmd_train, TrainMode,
};
use karyo_cli::config::{Profile, RunConfig};

#[derive(Parser)]
#[command(
    name = "karyo",
    version,
    about = "Segmentation-free nuclear area measurement on synthetic histology cohorts"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,

    /// Flat key=value configuration file applied over the profile defaults.
    #[arg(long, global = true, value_name = "PATH")]
    config: Option<PathBuf>,

    /// Global random seed (overrides profile and config file).
    #[arg(long, global = true, value_name = "N")]
    seed: Option<u64>,

    /// Constant profile: paper (full scale) or desk (CPU scale).
    #[arg(long, global = true, default_value = "desk")]
    profile: String,

    /// Output directory for artifacts and the run manifest.
    #[arg(long, global = true, value_name = "DIR")]
    out: Option<PathBuf>,

    /// Cap the worker thread count.
    #[arg(long, global = true, value_name = "N")]
    threads: Option<usize>,

    /// Single-threaded reductions for byte-reproducible reruns.
    #[arg(long, global = true)]
    deterministic: bool,

    /// Allow writing into a non-empty output directory.
    #[arg(long, global = true)]
    force: bool,
}

#[derive(Subcommand)]
enum Command {
    /// Generate the synthetic cohort (images, annotations, manifest).
    Synth,
    /// Train the area (20-class) or combined (21-class) model.
    Train {
        /// area | combined
        #[arg(long)]
        mode: String,
        /// Cohort directory produced by synth.
        #[arg(long, value_name = "DIR")]
        cohort: PathBuf,
    },
    /// Measure nuclear areas at annotated locations over subset B.
    Measure {
        /// Trained 20-class weights (NNW1).
        #[arg(long, value_name = "PATH")]
        weights: PathBuf,
        #[arg(long, value_name = "DIR")]
        cohort: PathBuf,
    },
    /// Detect nuclei and measure areas over subset B (τ optimized on A2).
    Detect {
        /// Trained 21-class weights (NNW1).
        #[arg(long, value_name = "PATH")]
        weights: PathBuf,
        #[arg(long, value_name = "DIR")]
        cohort: PathBuf,
        /// Also write per-region probability maps (NNW1).
        #[arg(long)]
        dump_maps: bool,
    },
    /// Compute agreement statistics, the report CSV, and SVG plots.
    Evaluate {
        /// Output directory of a measure run.
        #[arg(long, value_name = "DIR")]
        measure: Option<PathBuf>,
        /// Output directory of a detect run.
        #[arg(long, value_name = "DIR")]
        detect: Option<PathBuf>,
    },
    /// Convert trained weights to the fully convolutional form.
    FcnConvert {
        #[arg(long, value_name = "PATH")]
        weights: PathBuf,
    },
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}

fn run(cli: Cli) -> Result<()> {
    let profile = Profile::parse(&cli.profile)?;
    let config = RunConfig::load(profile, cli.config.as_deref(), cli.seed)?;

    let threads = if cli.deterministic {
        Some(1)
    } else {
        cli.threads
    };
    if let Some(n) = threads {
        if n == 0 {
            return Err(Error::Config("--threads must be ≥ 1".into()));
        }
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .map_err(|e| Error::Config(format!("thread pool: {e}")))?;
    }

    let out = cli
        .out
        .ok_or_else(|| Error::Config("--out DIR is required".into()))?;
    match &cli.command {
        Command::Synth => cmd_synth(&config, &out, cli.force),
        Command::Train { mode, cohort } => {
            cmd_train(&config, TrainMode::parse(mode)?, cohort, &out, cli.force)
        }
        Command::Measure { weights, cohort } => {
            cmd_measure(&config, weights, cohort, &out, cli.force)
        }
        Command::Detect {
            weights,
            cohort,
            dump_maps,
        } => cmd_detect(&config, weights, cohort, &out, cli.force, *dump_maps),
        Command::Evaluate { measure, detect } => cmd_evaluate(
            &config,
            measure.as_deref(),
            detect.as_deref(),
            &out,
            cli.force,
        ),
        Command::FcnConvert { weights } => cmd_fcn_convert(&config, weights, &out, cli.force),
    }
}
