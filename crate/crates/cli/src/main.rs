use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::{Context, Result};
use clap::{Args, Parser, Subcommand};
use normdiff::pipeline::{self, PipelineConfig, RunManifest};
use normdiff::Error;

/// Normative diffusion-autoencoder pipeline on synthetic brain phantoms.
#[derive(Parser)]
#[command(version, about)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// TOML configuration file; built-in defaults when omitted.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Run directory, overriding `out_dir` from the config.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Master seed, overriding `seed` from the config.
    #[arg(long)]
    seed: Option<u64>,
    /// Suppress progress output.
    #[arg(long, short)]
    quiet: bool,
}

#[derive(Subcommand)]
enum Command {
    /// Write healthy and patient phantom cohorts.
    Generate(Common),
    /// Train the diffusion autoencoder on the healthy cohort.
    Train(Common),
    /// Train the age-regression baseline used for brain-PAD.
    TrainAgeBaseline(Common),
    /// Score patients against the healthy latent mean.
    Score(Common),
    /// Relate scores to survival: correlations, Cox fits, Kaplan-Meier curves.
    Survival(Common),
    /// Summarise run manifests into report.md and report.csv.
    Report {
        #[command(flatten)]
        common: Common,
        /// Manifest files or run directories; defaults to the output directory.
        manifests: Vec<PathBuf>,
    },
    /// Print the default configuration as TOML.
    Config,
}

fn load(common: &Common) -> Result<PipelineConfig> {
    let mut cfg = match &common.config {
        Some(path) => PipelineConfig::load(path)?,
        None => PipelineConfig::default(),
    };
    if let Some(out) = &common.out {
        cfg.out_dir = out.clone();
    }
    if let Some(seed) = common.seed {
        cfg.seed = seed;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn print_manifest(m: &RunManifest) {
    for (k, v) in &m.metrics {
        println!("{k}\t{v}");
    }
    for w in &m.warnings {
        eprintln!("warning: {w}");
    }
}

fn run(cli: Cli) -> Result<()> {
    type Step = fn(&PipelineConfig, pipeline::Log<'_>) -> normdiff::Result<RunManifest>;
    let (common, step): (&Common, Step) = match &cli.command {
        Command::Config => {
            print!("{}", PipelineConfig::default().to_toml()?);
            return Ok(());
        }
        Command::Report { common, manifests } => {
            let cfg = load(common)?;
            let quiet = common.quiet;
            let mut log = |s: &str| {
                if !quiet {
                    eprintln!("{s}");
                }
            };
            let report = pipeline::report(&cfg, manifests, &mut log)?;
            for w in &report.skipped {
                eprintln!("warning: {w}");
            }
            return Ok(());
        }
        Command::Generate(c) => (c, pipeline::generate),
        Command::Train(c) => (c, pipeline::train),
        Command::TrainAgeBaseline(c) => (c, pipeline::train_age_baseline),
        Command::Score(c) => (c, pipeline::score),
        Command::Survival(c) => (c, pipeline::survival),
    };
    let cfg = load(common)?;
    let quiet = common.quiet;
    let mut log = |s: &str| {
        if !quiet {
            eprintln!("{s}");
        }
    };
    let manifest = step(&cfg, &mut log)
        .with_context(|| format!("run directory {}", cfg.out_dir.display()))?;
    print_manifest(&manifest);
    Ok(())
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            let code = e.downcast_ref::<Error>().map_or(1, Error::exit_code);
            ExitCode::from(code as u8)
        }
    }
}
