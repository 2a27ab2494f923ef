//! Command-line front end: filter export, feature extraction, training,
//! numerical verification and timing.

mod commands;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

#[derive(Debug, Parser)]
#[command(name = "phasecollapse", version, about = "Complex wavelet scattering networks with phase collapses")]
struct Cli {
    /// Worker threads; 0 uses every core.
    #[arg(long, global = true, default_value_t = 0)]
    threads: usize,
    /// Single-threaded execution.
    #[arg(long, global = true)]
    deterministic: bool,
    /// Dataset root, overriding $PHASECOLLAPSE_DATA.
    #[arg(long, global = true)]
    data: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Write the filter banks as PGM images and a tensor container.
    GenFilters(GenFiltersArgs),
    /// Run a network forward and store the output features.
    Scatter(ScatterArgs),
    /// Train a network and classifier from a run configuration.
    Train(TrainArgs),
    /// Run the numerical checks.
    Verify(VerifyArgs),
    /// Time the convolution paths and a forward pass.
    Bench(BenchArgs),
}

#[derive(Debug, Args)]
pub struct GenFiltersArgs {
    #[arg(long, default_value_t = 4)]
    pub angles: usize,
    #[arg(long, default_value_t = 15)]
    pub grid: usize,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct ScatterArgs {
    /// Network configuration file; the desk configuration when absent.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Trained checkpoint whose network weights replace the initialization.
    #[arg(long)]
    pub checkpoint: Option<PathBuf>,
    /// A PGM image, or a tensor container holding a real `image` tensor of dims [c, h, w].
    #[arg(long, conflicts_with = "dataset")]
    pub input: Option<PathBuf>,
    /// Dataset to read instead of a single image.
    #[arg(long, value_enum)]
    pub dataset: Option<commands::DatasetName>,
    /// Number of dataset images.
    #[arg(long, default_value_t = 16)]
    pub count: usize,
    /// Read the test split.
    #[arg(long)]
    pub test_split: bool,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    /// Run configuration: network keys and optimizer keys.
    #[arg(long)]
    pub config: PathBuf,
    #[arg(long, value_enum)]
    pub dataset: commands::DatasetName,
    /// Use the first N training images.
    #[arg(long)]
    pub train_count: Option<usize>,
    /// Use the first N test images.
    #[arg(long)]
    pub test_count: Option<usize>,
    /// Side of the synthetic texture images.
    #[arg(long, default_value_t = 32)]
    pub texture_size: usize,
    /// Seed for initialization, shuffling and augmentation; overrides the config seed.
    #[arg(long)]
    pub seed: Option<u64>,
    /// Checkpoint every N epochs; 0 keeps only the final one.
    #[arg(long, default_value_t = 0)]
    pub checkpoint_period: usize,
    /// Output directory for metrics.csv, checkpoints and model.pct.
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long)]
    pub quiet: bool,
}

#[derive(Debug, Args)]
pub struct VerifyArgs {
    /// Every check.
    #[arg(long)]
    pub all: bool,
    /// Fourier shift identity and translation bound.
    #[arg(long)]
    pub thm1: bool,
    /// ReLU phase integral and four-phase sandwich.
    #[arg(long)]
    pub eq3: bool,
    /// Soft thresholding as a proximal operator.
    #[arg(long)]
    pub prox: bool,
    /// Phase entropy lower bound.
    #[arg(long)]
    pub thm2: bool,
    /// ℓ¹ sparsification floor.
    #[arg(long)]
    pub thm3: bool,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Overrides the primary trial count of each check.
    #[arg(long)]
    pub trials: Option<usize>,
    /// Append one row per report to this CSV.
    #[arg(long)]
    pub csv: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct BenchArgs {
    /// Map sizes for the convolution timings.
    #[arg(long, value_delimiter = ',', default_value = "16,32,64")]
    pub sizes: Vec<usize>,
    #[arg(long, default_value_t = 15)]
    pub grid: usize,
    #[arg(long, default_value_t = 3)]
    pub repeats: usize,
    /// Network configuration for the forward timing; the desk configuration when absent.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Images per forward batch.
    #[arg(long, default_value_t = 4)]
    pub batch: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long)]
    pub out: PathBuf,
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 2 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    let threads = if cli.deterministic { 1 } else { cli.threads };
    if let Err(e) = rayon::ThreadPoolBuilder::new().num_threads(threads).build_global() {
        eprintln!("error: {e}");
        return ExitCode::from(2);
    }
    let data = cli.data.as_deref();
    let outcome = match &cli.command {
        Command::GenFilters(a) => commands::gen_filters(a),
        Command::Scatter(a) => commands::scatter(a, data),
        Command::Train(a) => commands::train(a, data),
        Command::Verify(a) => commands::verify(a),
        Command::Bench(a) => commands::bench(a),
    };
    match outcome {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}
