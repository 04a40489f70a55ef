mod commands;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};

/// Haze synthesis, dehazing training and evaluation.
#[derive(Debug, Parser)]
#[command(name = "hazekit", version, about)]
struct Cli {
    #[command(flatten)]
    common: Common,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Clone, Args)]
pub struct Common {
    /// TOML run configuration; unknown keys are rejected.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Overrides the configured seed.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Single-threaded kernels for byte-reproducible artifacts.
    #[arg(long, global = true)]
    pub deterministic: bool,
    /// Output directory.
    #[arg(long, global = true)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum GridArg {
    Modules,
    PatchSize,
    Lambda3,
    All,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Train the haze generator on a paired dataset.
    TrainAhg {
        /// Dataset root with `hazy/` and `clear/`.
        #[arg(long)]
        data: Option<PathBuf>,
        /// Total step budget, overriding `ahg_train.steps`.
        #[arg(long)]
        steps: Option<u64>,
        /// Continue from a haze generator checkpoint.
        #[arg(long)]
        resume: Option<PathBuf>,
    },
    /// Synthesize hazy images from clear/hazy pairs for a sweep of alpha and noise seeds.
    GenHaze {
        #[arg(long)]
        ahg: Option<PathBuf>,
        /// Clear images to haze.
        #[arg(long)]
        clear: PathBuf,
        /// Hazy references, matched to the clear images by file name.
        #[arg(long)]
        hazy: PathBuf,
        /// Blend weights, overriding `gen_haze.alphas`.
        #[arg(long, value_delimiter = ',', allow_hyphen_values = true)]
        alpha: Vec<f64>,
        /// Noise seeds, overriding `gen_haze.seeds`.
        #[arg(long, value_delimiter = ',')]
        noise_seed: Vec<u64>,
    },
    /// Train the dehazing network with the joint loss.
    TrainDhr {
        #[arg(long)]
        data: Option<PathBuf>,
        /// Haze generator checkpoint enabling augmentation and generated negatives.
        #[arg(long)]
        ahg: Option<PathBuf>,
        /// Disable augmentation and generated negatives.
        #[arg(long)]
        no_ahg: bool,
        #[arg(long)]
        patch_size: Option<usize>,
        /// Step budget, overriding the epoch count.
        #[arg(long)]
        steps: Option<u64>,
        #[arg(long)]
        resume: Option<PathBuf>,
    },
    /// Dehaze a PNG file or every PNG in a directory.
    Dehaze {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        input: PathBuf,
    },
    /// Score predictions against ground truth (PSNR, SSIM).
    Eval {
        #[arg(long)]
        pred: PathBuf,
        #[arg(long)]
        gt: PathBuf,
    },
    /// Run the ablation grids and write comparison tables.
    Ablate {
        #[arg(long)]
        data: Option<PathBuf>,
        /// Evaluation pairs; defaults to the training set.
        #[arg(long)]
        eval_data: Option<PathBuf>,
        /// Haze generator checkpoint; one is trained when omitted.
        #[arg(long)]
        ahg: Option<PathBuf>,
        #[arg(long, value_enum, default_value = "all")]
        grid: GridArg,
        /// DHR steps per row, overriding `ablate.steps`.
        #[arg(long)]
        steps: Option<u64>,
    },
    /// Write a small procedural hazy/clear dataset.
    GenMicroDataset {
        #[arg(long, default_value_t = 8)]
        pairs: usize,
        #[arg(long, default_value_t = 128)]
        size: u32,
    },
}

fn exit_code(err: &anyhow::Error) -> u8 {
    use hazekit::Error as E;
    match err.chain().find_map(|e| e.downcast_ref::<hazekit::Error>()) {
        Some(E::Config(_) | E::InvalidParameter(_) | E::DatasetIntegrity(_)) => 2,
        _ => match err.downcast_ref::<commands::UsageError>() {
            Some(_) => 2,
            None => 1,
        },
    }
}

fn main() -> ExitCode {
    let args = Cli::parse();
    if args.common.deterministic {
        // Read by the tensor kernels on every call; set before any work starts.
        std::env::set_var("RAYON_NUM_THREADS", "1");
        std::env::set_var("CANDLE_NUM_THREADS", "1");
    }
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info"))
        .format_timestamp(None)
        .init();
    match commands::run(&args.common, args.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(err) => {
            log::error!("{err:#}");
            ExitCode::from(exit_code(&err))
        }
    }
}
