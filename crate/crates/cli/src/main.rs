use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use focus_unet::attention::GateType;
use focus_unet::losses::LossKind;
use focus_unet_cli::commands::{self, AblationGrid, EvalSource, PredictOptions};
use focus_unet_cli::{exit_code, CliError, CliResult, RunConfig};

/// Focus U-Net segmentation: training, evaluation, prediction and ablation.
///
/// Exit codes: 0 success, 1 internal error, 2 invalid arguments or
/// configuration, 3 data or I/O error, 4 checkpoint error, 5 training
/// diverged, 6 a self-check failed.
#[derive(Parser, Debug)]
#[command(name = "focus-unet", version)]
struct Cli {
    /// Worker threads; 1 makes every run bit-reproducible.
    #[arg(long, global = true)]
    threads: Option<usize>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Debug)]
struct ConfigArgs {
    /// Flat `key = value` config file.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Override one key, e.g. `--set net.depth=4` (repeatable).
    #[arg(long = "set", value_name = "KEY=VALUE")]
    sets: Vec<String>,
}

impl ConfigArgs {
    fn load(&self) -> CliResult<RunConfig> {
        Ok(RunConfig::load(self.config.as_deref(), &self.sets)?)
    }
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Train on `data.dir` (single split or k-fold) and report test metrics.
    Train(ConfigArgs),
    /// Score a checkpoint (or saved masks) on one or more datasets.
    Eval {
        #[arg(
            long,
            required_unless_present = "predictions",
            conflicts_with = "predictions"
        )]
        checkpoint: Option<PathBuf>,
        /// Directories of predicted `<id>.png` masks, one per `--data`.
        #[arg(long, num_args = 1..)]
        predictions: Vec<PathBuf>,
        /// Dataset directories with `images/` and `masks/`.
        #[arg(long, required = true, num_args = 1..)]
        data: Vec<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 8)]
        batch_size: usize,
    },
    /// Write predicted masks and contour overlays for a directory of images.
    Predict {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        images: PathBuf,
        /// Ground-truth masks, drawn in green when given.
        #[arg(long)]
        masks: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        /// Also overlay the deepest supervision head's prediction.
        #[arg(long)]
        intermediate: bool,
        #[arg(long, default_value_t = 8)]
        batch_size: usize,
    },
    /// Render gate coefficient heatmaps for a sweep of focal parameters.
    InspectAttention {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        image: PathBuf,
        #[arg(long, value_delimiter = ',', default_value = "1,1.25,2,3")]
        lambdas: Vec<f64>,
        /// Gate levels to render (default: all).
        #[arg(long, value_delimiter = ',')]
        levels: Option<Vec<usize>>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Run the 64-bit finite-difference gradient suite.
    Gradcheck {
        #[arg(long, default_value_t = 20)]
        trials: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Only run cases whose name contains this string.
        #[arg(long)]
        filter: Option<String>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Generate a synthetic polyp-like dataset.
    Synth {
        #[arg(long, default_value_t = 50)]
        n: usize,
        #[arg(long, default_value_t = 64)]
        height: usize,
        #[arg(long, default_value_t = 64)]
        width: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train a grid of architecture and loss variants and tabulate them.
    Ablate {
        #[command(flatten)]
        config: ConfigArgs,
        #[arg(long, value_delimiter = ',', default_value = "none,additive,focus")]
        gates: Vec<GateType>,
        #[arg(long, value_delimiter = ',', default_value = "1,1.25,1.5,2,3")]
        lambdas: Vec<f64>,
        #[arg(long, value_delimiter = ',', default_value = "dsc_ce,hfl")]
        losses: Vec<LossKind>,
        #[arg(long, value_delimiter = ',', default_value = "false,true")]
        short_skips: Vec<bool>,
        #[arg(long, value_delimiter = ',', default_value = "false,true")]
        deep_supervision: Vec<bool>,
    },
}

fn run(cli: Cli) -> CliResult<()> {
    match cli.command {
        Command::Train(args) => {
            commands::cmd_train(&args.load()?)?;
        }
        Command::Eval {
            checkpoint,
            predictions,
            data,
            out,
            batch_size,
        } => {
            let source = match checkpoint {
                Some(c) => EvalSource::Checkpoint(c),
                None => EvalSource::Predictions(predictions),
            };
            commands::cmd_eval(&source, &data, &out, batch_size)?;
        }
        Command::Predict {
            checkpoint,
            images,
            masks,
            out,
            intermediate,
            batch_size,
        } => {
            let opts = PredictOptions {
                masks,
                intermediate,
                batch_size,
            };
            commands::cmd_predict(&checkpoint, &images, &out, &opts)?;
        }
        Command::InspectAttention {
            checkpoint,
            image,
            lambdas,
            levels,
            out,
        } => {
            commands::cmd_inspect_attention(
                &checkpoint,
                &image,
                &lambdas,
                levels.as_deref(),
                &out,
            )?;
        }
        Command::Gradcheck {
            trials,
            seed,
            filter,
            out,
        } => {
            commands::cmd_gradcheck(trials, seed, filter.as_deref(), out.as_deref())?;
        }
        Command::Synth {
            n,
            height,
            width,
            seed,
            out,
        } => commands::cmd_synth(n, height, width, seed, &out)?,
        Command::Ablate {
            config,
            gates,
            lambdas,
            losses,
            short_skips,
            deep_supervision,
        } => {
            let grid = AblationGrid {
                gates,
                lambdas,
                losses,
                short_skips,
                deep_supervision,
            };
            commands::cmd_ablate(&config.load()?, &grid)?;
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    if let Some(n) = cli.threads {
        if let Err(e) = rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
        {
            eprintln!("error: cannot set up {n} threads: {e}");
            return ExitCode::from(1);
        }
    }
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            let code = exit_code(&e);
            if let CliError::Core(focus_unet::Error::Config { .. }) = e {
                eprintln!("(run with --help for usage)");
            }
            ExitCode::from(code)
        }
    }
}
