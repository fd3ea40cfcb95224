use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::Context;
use clap::{Args, Parser, Subcommand};

use probreg::cli::commands::{self, CodeSource, Mode};
use probreg::cli::config::RunConfig;
use probreg::cli::dataset::{self, PairFiles, Split};
use probreg::cli::exit_code;
use probreg::synth_data::DatasetConfig;

/// Learned diffeomorphic registration with a probabilistic deformation code.
#[derive(Parser)]
#[command(name = "probreg", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic dataset of labelled image pairs.
    Synth(SynthArgs),
    /// Train a model on the train split of a dataset.
    Train {
        #[arg(long)]
        config: PathBuf,
        /// Dataset directory holding manifest.csv.
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Register a moving image onto a fixed image.
    Register(RegisterArgs),
    /// Exponentiate a velocity field.
    Exp {
        #[arg(long)]
        velocity: PathBuf,
        /// Squaring steps; chosen from the field's magnitude when omitted.
        #[arg(long)]
        n: Option<u32>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Draw deformations from the prior, conditioned on an image.
    Sample {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        conditioning: PathBuf,
        #[arg(long)]
        count: usize,
        #[arg(long)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Apply a code from one subject to another subject's image.
    Transport(TransportArgs),
    /// Register a manifest and summarise metrics and code structure.
    Eval {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        manifest: PathBuf,
        /// Only evaluate entries of this split.
        #[arg(long)]
        split: Option<String>,
        #[arg(long)]
        out: PathBuf,
    },
}

#[derive(Args)]
struct SynthArgs {
    #[arg(long, value_delimiter = ',', default_value = "64,64")]
    dims: Vec<usize>,
    #[arg(long, default_value_t = 50)]
    per_class: usize,
    #[arg(long, default_value_t = 0.02)]
    noise_sigma: f64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct RegisterArgs {
    #[arg(long)]
    model: PathBuf,
    #[arg(long)]
    moving: PathBuf,
    #[arg(long)]
    fixed: PathBuf,
    #[arg(long, requires = "fixed_labels")]
    moving_labels: Option<PathBuf>,
    #[arg(long, requires = "moving_labels")]
    fixed_labels: Option<PathBuf>,
    /// Decode a sample of the posterior instead of its mean.
    #[arg(long, requires = "seed")]
    stochastic: bool,
    #[arg(long, requires = "stochastic")]
    seed: Option<u64>,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct TransportArgs {
    #[arg(long)]
    model: PathBuf,
    /// Container with the code, or a latent archive written by `register`.
    #[arg(long, required_unless_present = "source_pair", conflicts_with = "source_pair")]
    zcode: Option<PathBuf>,
    /// Moving and fixed image of the pair to encode.
    #[arg(long, num_args = 2, value_names = ["MOVING", "FIXED"])]
    source_pair: Option<Vec<PathBuf>>,
    #[arg(long)]
    target: PathBuf,
    #[arg(long)]
    out: PathBuf,
}

fn load_image(path: &Path) -> probreg::Result<probreg::grid_field::ScalarImage> {
    dataset::load_image(path)
}

fn run(cli: Cli) -> anyhow::Result<()> {
    match cli.command {
        Command::Synth(a) => {
            let cfg = DatasetConfig {
                dims: a.dims,
                per_class: a.per_class,
                noise_sigma: a.noise_sigma,
                seed: a.seed,
                ..DatasetConfig::default()
            };
            let entries = commands::synth(&cfg, &a.out)?;
            println!("wrote {} pairs to {}", entries.len(), a.out.display());
        }
        Command::Train { config, data, out } => {
            let cfg = RunConfig::load(&config)?;
            let outcome = commands::train(&cfg, &data, &out)?;
            println!(
                "trained {} steps; checkpoints: {}",
                outcome.log.len(),
                outcome.checkpoints.len()
            );
        }
        Command::Register(a) => {
            let pair = PairFiles {
                moving: load_image(&a.moving)?,
                fixed: load_image(&a.fixed)?,
                moving_labels: a.moving_labels.as_deref().map(load_image).transpose()?,
                fixed_labels: a.fixed_labels.as_deref().map(load_image).transpose()?,
            };
            let mode = match a.seed {
                Some(seed) if a.stochastic => Mode::Stochastic { seed },
                _ => Mode::Deterministic,
            };
            print!("{}", commands::register(&a.model, &pair, &mode, &a.out)?);
        }
        Command::Exp { velocity, n, out } => {
            print!("{}", commands::exp(&velocity, n, &out)?);
        }
        Command::Sample {
            model,
            conditioning,
            count,
            seed,
            out,
        } => {
            let image = load_image(&conditioning)?;
            let reports = commands::sample(&model, &image, count, seed, &out)?;
            println!("wrote {} samples", reports.len());
        }
        Command::Transport(a) => {
            let source = match (a.zcode, a.source_pair) {
                (Some(p), _) => CodeSource::File(p),
                (None, Some(pair)) => CodeSource::Pair {
                    moving: load_image(&pair[0])?,
                    fixed: load_image(&pair[1])?,
                },
                (None, None) => anyhow::bail!("either --zcode or --source-pair is required"),
            };
            let target = load_image(&a.target)?;
            print!("{}", commands::transport(&a.model, &source, &target, &a.out)?);
        }
        Command::Eval {
            model,
            manifest,
            split,
            out,
        } => {
            let split = split.map(|s| s.parse::<Split>()).transpose()?;
            let rep = commands::eval(&model, &manifest, split, &out)
                .with_context(|| format!("evaluating {}", manifest.display()))?;
            print!("{rep}");
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(err) => {
            eprintln!("error: {err:#}");
            let code = err.downcast_ref::<probreg::Error>().map_or(2, exit_code);
            ExitCode::from(code as u8)
        }
    }
}
