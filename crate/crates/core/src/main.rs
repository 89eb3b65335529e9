use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use log::error;

use qcml::data::Regime;
use qcml::experiment::{cmd_evaluate, cmd_mds, cmd_proximity, cmd_synth, cmd_train, ExperimentConfig};
use qcml::mds::{MdsConfig, MdsInit};
use qcml::proximity::ProximityMetric;
use qcml::{QcmlError, Result};

#[derive(Parser)]
#[command(name = "qcml", version, about = "Supervised distance-metric learning experiments")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct ConfigArgs {
    /// Experiment config (TOML or JSON).
    #[arg(long, conflicts_with = "preset")]
    config: Option<PathBuf>,
    /// Built-in experiment: diabetes, hyg or igsb.
    #[arg(long)]
    preset: Option<String>,
    /// Overrides the master seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Overrides the output directory.
    #[arg(long)]
    output_dir: Option<PathBuf>,
}

impl ConfigArgs {
    fn resolve(&self) -> Result<ExperimentConfig> {
        let mut cfg = match (&self.config, &self.preset) {
            (Some(p), _) => ExperimentConfig::load(p)?,
            (None, Some(name)) => ExperimentConfig::preset(name)?,
            (None, None) => return Err(QcmlError::usage("pass --config or --preset")),
        };
        if let Some(s) = self.seed {
            cfg.seed = s;
        }
        if let Some(d) = &self.output_dir {
            cfg.output_dir = d.clone();
        }
        Ok(cfg)
    }
}

#[derive(Subcommand)]
enum Command {
    /// Cross-validate (optional) and fit the configured models.
    Train(ConfigArgs),
    /// Write proximity matrices from a train run.
    Proximity {
        #[command(flatten)]
        config: ConfigArgs,
        /// Directory produced by `qcml train`.
        #[arg(long)]
        models: PathBuf,
        /// Comma-separated metrics (qcml, rf-breiman, rf-oob, rf-gap, euclidean).
        #[arg(long, value_delimiter = ',', default_value = "qcml,rf-breiman,rf-oob,rf-gap,euclidean")]
        metrics: Vec<String>,
    },
    /// Regression table, KNN curves, histograms and MDS figures.
    Evaluate(ConfigArgs),
    /// Generate a synthetic bond-like dataset.
    Synth {
        #[arg(long, default_value = "high-yield")]
        regime: String,
        #[arg(long, default_value_t = 1000)]
        n: usize,
        #[arg(long)]
        seed: u64,
        #[arg(long, default_value = ".")]
        out: PathBuf,
    },
    /// Two-dimensional MDS of a square proximity file.
    Mds {
        proximity: PathBuf,
        /// One color value per line (e.g. targets); defaults to zeros.
        #[arg(long)]
        colors: Option<PathBuf>,
        #[arg(long)]
        reference: Option<usize>,
        #[arg(long, default_value_t = 10)]
        top_k: usize,
        #[arg(long, default_value_t = 300)]
        max_iter: usize,
        #[arg(long, default_value_t = 1e-6)]
        tol: f64,
        #[arg(long)]
        seed: u64,
        /// Start from classical scaling instead of random positions.
        #[arg(long)]
        classical_init: bool,
        #[arg(long, default_value = ".")]
        out: PathBuf,
    },
}

fn read_colors(path: &Path) -> Result<Vec<f64>> {
    let text = std::fs::read_to_string(path).map_err(|e| QcmlError::io(path, e))?;
    text.lines()
        .filter(|l| !l.trim().is_empty())
        .enumerate()
        .map(|(i, l)| {
            l.trim()
                .parse::<f64>()
                .map_err(|_| QcmlError::data(format!("{}: line {}: not a number", path.display(), i + 1)))
        })
        .collect()
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Train(args) => {
            let out = cmd_train(&args.resolve()?)?;
            println!("{}", out.dir.display());
        }
        Command::Proximity {
            config,
            models,
            metrics,
        } => {
            let metrics = metrics
                .iter()
                .map(|m| m.parse::<ProximityMetric>())
                .collect::<Result<Vec<_>>>()?;
            let out = cmd_proximity(&config.resolve()?, &models, &metrics)?;
            println!("{}", out.dir.display());
        }
        Command::Evaluate(args) => {
            let out = cmd_evaluate(&args.resolve()?)?;
            println!("{}", out.dir.display());
        }
        Command::Synth { regime, n, seed, out } => {
            let regime: Regime = regime.parse()?;
            for p in cmd_synth(seed, n, regime, &out)? {
                println!("{}", p.display());
            }
        }
        Command::Mds {
            proximity,
            colors,
            reference,
            top_k,
            max_iter,
            tol,
            seed,
            classical_init,
            out,
        } => {
            let colors = colors.as_deref().map(read_colors).transpose()?;
            let cfg = MdsConfig {
                max_iter,
                tol,
                seed,
                init: if classical_init { MdsInit::Classical } else { MdsInit::Random },
            };
            for p in cmd_mds(&proximity, colors.as_deref(), reference, top_k, &cfg, &out)? {
                println!("{}", p.display());
            }
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info"))
        .format_timestamp(None)
        .init();
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            error!("{e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
