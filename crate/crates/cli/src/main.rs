//! `sganc` command-line entry point.

mod commands;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

#[derive(Parser, Debug)]
#[command(name = "sganc", version, about = "Latent-space codec: training, coding, evaluation")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

/// Options every training-related command accepts.
#[derive(Args, Debug, Clone)]
pub struct TrainOpts {
    /// Flat `key = value` training configuration file.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// RNG seed; overrides the config file.
    #[arg(long, env = "SGANC_SEED")]
    pub seed: Option<u64>,
    /// Rate-distortion trade-off.
    #[arg(long)]
    pub lambda: Option<f64>,
    /// Stage split such as `0-8,8-13,13-18`.
    #[arg(long)]
    pub stages: Option<String>,
    #[arg(long)]
    pub steps: Option<usize>,
    #[arg(long)]
    pub learning_rate: Option<f64>,
    /// Image size used to convert rate to bits per pixel.
    #[arg(long)]
    pub width: Option<u32>,
    #[arg(long)]
    pub height: Option<u32>,
}

/// Where the model files of a bundle live.
#[derive(Args, Debug, Clone)]
pub struct ModelOpts {
    /// Model directory written by `train-intra` or `train-inter`.
    #[arg(long)]
    pub model: PathBuf,
    /// Overrides the primary entropy model file of the directory.
    #[arg(long)]
    pub entropy_model: Option<PathBuf>,
    /// Overrides the intra entropy model file of the directory.
    #[arg(long)]
    pub intra_model: Option<PathBuf>,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Generate synthetic latents (AR(1) video, or i.i.d. frames with --iid).
    Synth {
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 100)]
        frames: usize,
        #[arg(long, default_value_t = 0.99)]
        rho: f64,
        #[arg(long, default_value_t = 4)]
        layers: usize,
        #[arg(long, default_value_t = 32)]
        channels: usize,
        /// Draw independent frames instead of a correlated sequence.
        #[arg(long)]
        iid: bool,
        #[arg(long, env = "SGANC_SEED", default_value_t = 0)]
        seed: u64,
    },
    /// Train flow and entropy model on independent frames.
    TrainIntra {
        /// Latent files (.sglat); every frame is a training sample.
        #[arg(long, required = true, num_args = 1..)]
        input: Vec<PathBuf>,
        /// Output model directory.
        #[arg(long)]
        out: PathBuf,
        #[command(flatten)]
        train: TrainOpts,
    },
    /// Train on sequences, then fit intra tables on the learned flow.
    TrainInter {
        /// Latent files (.sglat); each file is one sequence.
        #[arg(long, required = true, num_args = 1..)]
        input: Vec<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        /// Entropy-only steps spent fitting the intra tables.
        #[arg(long)]
        intra_steps: Option<usize>,
        #[command(flatten)]
        train: TrainOpts,
    },
    /// Intra-code every frame of a latent file.
    EncodeIntra {
        #[arg(long)]
        input: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[command(flatten)]
        model: ModelOpts,
        #[arg(long, default_value_t = 1024)]
        width: u32,
        #[arg(long, default_value_t = 1024)]
        height: u32,
    },
    /// Inter-code a latent sequence.
    EncodeInter {
        #[arg(long)]
        input: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[command(flatten)]
        model: ModelOpts,
        /// Residual gap.
        #[arg(long, default_value_t = 10)]
        g: u32,
        /// Intra refresh instead of a residual every g frames.
        #[arg(long)]
        refresh: bool,
        #[arg(long, default_value_t = 1024)]
        width: u32,
        #[arg(long, default_value_t = 1024)]
        height: u32,
    },
    /// Decode a container back to a latent file.
    Decode {
        #[arg(long)]
        input: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[command(flatten)]
        model: ModelOpts,
        /// Keep the complete frames of a truncated container.
        #[arg(long)]
        lenient: bool,
    },
    /// Code a latent file and report rate and distortion.
    Eval {
        #[arg(long)]
        input: PathBuf,
        #[command(flatten)]
        model: ModelOpts,
        /// Inter-code with this residual gap; intra when absent.
        #[arg(long)]
        g: Option<u32>,
        #[arg(long)]
        refresh: bool,
        /// Also write the report as CSV.
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long, default_value_t = 1024)]
        width: u32,
        #[arg(long, default_value_t = 1024)]
        height: u32,
    },
    /// Train one intra model per lambda and write lambda,bpp,latent_mse.
    RdCurve {
        #[arg(long, required = true, num_args = 1..)]
        input: Vec<PathBuf>,
        /// Held-out latents; defaults to the last fifth of the input frames.
        #[arg(long)]
        test: Option<PathBuf>,
        #[arg(long, value_delimiter = ',', default_value = "1e-4,1e-5,1e-6")]
        lambdas: Vec<f64>,
        #[arg(long)]
        out: PathBuf,
        #[command(flatten)]
        train: TrainOpts,
    },
    /// Monte Carlo check of the residual law against the Irwin-Hall CDF.
    #[command(alias = "verify-lemma1")]
    VerifyResidualLaw {
        #[arg(long, default_value_t = 1)]
        g: u32,
        #[arg(long, default_value_t = 1_000_000)]
        samples: usize,
        #[arg(long, env = "SGANC_SEED", default_value_t = 0)]
        seed: u64,
        /// Largest KS statistic accepted.
        #[arg(long, default_value_t = 0.005)]
        threshold: f64,
    },
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { commands::EXIT_USAGE } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match commands::run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("{}", e.line());
            ExitCode::from(e.code)
        }
    }
}
