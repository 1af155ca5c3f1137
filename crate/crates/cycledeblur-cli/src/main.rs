//! `cycledeblur`: blur synthesis, adversarial training, deblurring,
//! quality evaluation, and architecture comparison behind one binary.

mod commands;
mod config;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};

use commands::CliError;
use config::RunConfig;
use cycledeblur::networks::GeneratorKind;

const CONFIG_HELP: &str = "\
Config keys and defaults (TOML file via --config, dotted keys via --set):
  seed = 0                     master seed, also the --seed flag
  [image]   height, width      unset; working resolution applied at load
  [synth]   kernel_size = 31, noise_sigma = 0.01, num_steps = 2000,
            exposure_fraction = 1.0, impulse_prob = 0.005, anxiety = 0.005,
            max_extent = 23.25, n_train / n_test (unset: everything trains)
  [model]   generator = \"unet\" | \"resblock\", base = 64, depth = 8,
            blocks = 9, disc_base = 64, disc_n_down = 3
  [loss]    alpha = 10.0, adv = \"least_squares\" | \"cross_entropy\",
            cycle_dist = \"l2\" | \"l1\",
            cycle_mode = \"paired\" | \"reconstruction\" | \"both\",
            extractor = \"reduced\" | \"vgg19\", vgg_path (unset),
            tap_block = 3, tap_conv = 3, extractor_seed = 0
  [train]   lr0 = 0.002, epochs = 50, decay_start = 40, batch_size = 2,
            d_steps_per_g = 10, checkpoint_every = 10,
            adam_beta1 = 0.5, adam_beta2 = 0.999
  [eval]    metrics = [\"psnr\", \"ssim\"] (also ms_ssim, vif), grid = false

Environment overrides: CYCLEDEBLUR_<SECTION>_<KEY>, e.g.
CYCLEDEBLUR_TRAIN_EPOCHS=5 or CYCLEDEBLUR_SEED=7. Precedence:
config file < environment < --set < dedicated flags.

Exit codes: 0 success, 1 usage or data error, 2 numerical divergence.";

#[derive(Parser)]
#[command(
    name = "cycledeblur",
    version,
    about = "Blind motion deblurring via cycle-consistent adversarial training",
    after_help = CONFIG_HELP,
    propagate_version = true
)]
struct Cli {
    /// TOML configuration file.
    #[arg(long, global = true, value_name = "FILE")]
    config: Option<PathBuf>,

    /// Master seed (overrides the config file).
    #[arg(long, global = true, value_name = "N")]
    seed: Option<u64>,

    /// Override one config key, e.g. --set train.epochs=3 (repeatable).
    #[arg(long, global = true, value_name = "SECTION.KEY=VALUE")]
    set: Vec<String>,

    /// Element type for synthesis, training, and benchmarking.
    #[arg(long, global = true, value_enum, default_value_t = Precision::F32)]
    precision: Precision,

    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
enum Precision {
    F32,
    F64,
}

#[derive(Subcommand)]
enum Command {
    /// Build a blurred dataset plus manifest from a directory of sharp images.
    Synth(SynthArgs),
    /// Train the two generators and two discriminators from a manifest.
    Train(TrainArgs),
    /// Run the blur-to-sharp generator over a directory of images.
    Deblur(DeblurArgs),
    /// Score result images against ground truth (CSV, table, optional grids).
    Eval(EvalArgs),
    /// Train every generator x cycle-distance combination and compare.
    Bench(BenchArgs),
}

#[derive(clap::Args)]
struct SynthArgs {
    /// Directory of sharp source images (PNG).
    #[arg(long, value_name = "DIR")]
    sharp: PathBuf,
    /// Output root; gets blur/, kernels/, and manifest.jsonl.
    #[arg(long, value_name = "DIR")]
    out: PathBuf,
    /// Pair with existing blurred images by stem instead of synthesizing.
    #[arg(long, value_name = "DIR")]
    blur: Option<PathBuf>,
    /// Blur kernel side length (odd). [synth.kernel_size]
    #[arg(long, value_name = "N")]
    kernel_size: Option<usize>,
    /// Additive Gaussian noise level. [synth.noise_sigma]
    #[arg(long, value_name = "SIGMA")]
    noise_sigma: Option<f64>,
    /// Training split size. [synth.n_train]
    #[arg(long, value_name = "N")]
    n_train: Option<usize>,
    /// Held-out split size. [synth.n_test]
    #[arg(long, value_name = "N")]
    n_test: Option<usize>,
}

#[derive(clap::Args)]
struct TrainArgs {
    /// Manifest produced by synth.
    #[arg(long, value_name = "FILE")]
    manifest: PathBuf,
    /// Output directory for checkpoints and loss.jsonl.
    #[arg(long, value_name = "DIR")]
    out: PathBuf,
    /// Epoch count. [train.epochs]
    #[arg(long, value_name = "N")]
    epochs: Option<usize>,
    /// Pairs per step. [train.batch_size]
    #[arg(long, value_name = "N")]
    batch_size: Option<usize>,
    /// Generator architecture: unet or resblock. [model.generator]
    #[arg(long, value_name = "KIND")]
    generator: Option<String>,
    /// Continue from a checkpoint; appends to the existing loss log.
    #[arg(long, value_name = "FILE")]
    resume: Option<PathBuf>,
}

#[derive(clap::Args)]
struct DeblurArgs {
    /// Trained checkpoint (precision is detected from the file).
    #[arg(long, value_name = "FILE")]
    checkpoint: PathBuf,
    /// Directory of blurred input images.
    #[arg(long, value_name = "DIR")]
    input: PathBuf,
    /// Output directory; filenames mirror the inputs.
    #[arg(long, value_name = "DIR")]
    out: PathBuf,
}

#[derive(clap::Args)]
struct EvalArgs {
    /// Directory of images to score, paired with --truth by stem.
    #[arg(long, value_name = "DIR", requires = "truth")]
    results: Option<PathBuf>,
    /// Ground-truth directory.
    #[arg(long, value_name = "DIR")]
    truth: Option<PathBuf>,
    /// Score against a manifest instead: sharp paths are the reference,
    /// --results supplies outputs by stem (default: the blurred inputs).
    #[arg(long, value_name = "FILE", conflicts_with = "truth")]
    manifest: Option<PathBuf>,
    /// Write the CSV here instead of stdout.
    #[arg(long, value_name = "FILE")]
    csv: Option<PathBuf>,
    /// Print an aligned table on stdout instead of CSV.
    #[arg(long)]
    table: bool,
    /// Write a side-by-side [reference | distorted] PNG per pair.
    #[arg(long, value_name = "DIR")]
    grid_dir: Option<PathBuf>,
    /// Comma-separated metric list. [eval.metrics]
    #[arg(long, value_name = "LIST")]
    metrics: Option<String>,
}

#[derive(clap::Args)]
struct BenchArgs {
    /// Manifest to train and score on (test split when present).
    #[arg(long, value_name = "FILE")]
    manifest: PathBuf,
    /// Epoch count per combination. [train.epochs]
    #[arg(long, value_name = "N")]
    epochs: Option<usize>,
}

fn parse_generator(name: &str) -> Result<GeneratorKind, CliError> {
    match name {
        "unet" => Ok(GeneratorKind::UNet),
        "resblock" => Ok(GeneratorKind::ResBlock),
        other => Err(CliError::Usage(format!(
            "unknown generator {other:?} (expected unet or resblock)"
        ))),
    }
}

/// Dedicated flags are the outermost override layer.
fn fold_flags(cfg: &mut RunConfig, command: &Command) -> Result<(), CliError> {
    match command {
        Command::Synth(a) => {
            if let Some(v) = a.kernel_size {
                cfg.synth.kernel_size = v;
            }
            if let Some(v) = a.noise_sigma {
                cfg.synth.noise_sigma = v;
            }
            if let Some(v) = a.n_train {
                cfg.synth.n_train = Some(v);
            }
            if let Some(v) = a.n_test {
                cfg.synth.n_test = Some(v);
            }
        }
        Command::Train(a) => {
            if let Some(v) = a.epochs {
                cfg.train.epochs = v;
            }
            if let Some(v) = a.batch_size {
                cfg.train.batch_size = v;
            }
            if let Some(name) = &a.generator {
                cfg.model.generator = parse_generator(name)?;
            }
        }
        Command::Eval(a) => {
            if a.grid_dir.is_some() {
                cfg.eval.grid = true;
            }
            if let Some(list) = &a.metrics {
                cfg.eval.metrics = list.split(',').map(|s| s.trim().to_string()).collect();
            }
        }
        Command::Bench(a) => {
            if let Some(v) = a.epochs {
                cfg.train.epochs = v;
            }
        }
        Command::Deblur(_) => {}
    }
    Ok(())
}

fn run(cli: &Cli) -> Result<(), CliError> {
    let mut cfg = RunConfig::load(cli.config.as_deref(), &cli.set)?;
    if let Some(seed) = cli.seed {
        cfg.seed = seed;
    }
    fold_flags(&mut cfg, &cli.command)?;
    eprintln!("# effective config");
    eprint!("{}", cfg.render());

    match &cli.command {
        Command::Synth(args) => commands::synth(&cfg, args),
        Command::Train(args) => match cli.precision {
            Precision::F32 => commands::train::<f32>(&cfg, args),
            Precision::F64 => commands::train::<f64>(&cfg, args),
        },
        Command::Deblur(args) => commands::deblur(args),
        Command::Eval(args) => commands::eval(&cfg, args),
        Command::Bench(args) => match cli.precision {
            Precision::F32 => commands::bench::<f32>(&cfg, args),
            Precision::F64 => commands::bench::<f64>(&cfg, args),
        },
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            use clap::error::ErrorKind;
            let code = match e.kind() {
                ErrorKind::DisplayHelp | ErrorKind::DisplayVersion => 0,
                _ => 1,
            };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}
