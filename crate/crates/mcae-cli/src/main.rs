//! `mcae` — one entry point for the whole pipeline: synthetic data,
//! two-stage pre-training, fine-tuning, cross-domain evaluation, sweeps,
//! ablations, visualization, and the numerical theory checks.
//!
//! Conventions shared by every subcommand:
//! - settings resolve as defaults, then `--config FILE`, then individual
//!   flags (flags win);
//! - the fully-resolved configuration is echoed to stdout and written as
//!   `resolved.cfg` under the output directory;
//! - outputs land under `--out-dir` (or `$MCAE_OUT_DIR`), contain no
//!   timestamps, and are bit-reproducible for a fixed command line;
//! - exit code 0 on success, 1 on a configuration problem, 2 on a runtime
//!   failure.

mod commands;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use mcae::Error;

#[derive(Parser)]
#[command(
    name = "mcae",
    version,
    about = "Masked contrastive autoencoder for cross-domain face anti-spoofing"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate synthetic face-liveness domains in the standard layout
    SynthData(SynthDataArgs),
    /// Two-stage pre-training (reconstruction, then + contrastive)
    Pretrain(TrainDataArgs),
    /// Supervised fine-tuning of the classifier head (and encoder)
    Finetune(FinetuneArgs),
    /// Leave-one-domain-out evaluation over every fold
    EvalLoo(TrainDataArgs),
    /// Train on two source domains, score each remaining target
    EvalLimited(EvalLimitedArgs),
    /// Leave-one-out metrics across a grid of masking ratios
    SweepMaskRatio(SweepMaskRatioArgs),
    /// Leave-one-out metrics across a grid of decoder sizes
    SweepDecoder(SweepDecoderArgs),
    /// Pre-training ablation rows: none, external encoder, full
    Ablate(AblateArgs),
    /// Render reconstructions, class heatmaps, or a feature embedding
    Visualize(VisualizeArgs),
    /// Run the information-theory and likelihood-equivalence checks
    VerifyTheory(CommonOpts),
}

/// Flags shared by every subcommand. Each one overrides the matching
/// config-file key; unset flags leave the file (or default) value alone.
#[derive(Args, Clone)]
struct CommonOpts {
    /// Configuration file (flat key = value lines)
    #[arg(long, value_name = "FILE")]
    config: Option<PathBuf>,

    /// Output directory root
    #[arg(long, env = "MCAE_OUT_DIR", default_value = "out", value_name = "DIR")]
    out_dir: PathBuf,

    /// Random seed for data, initialization, and masking [default: 0]
    #[arg(long, value_name = "N")]
    seed: Option<u64>,

    /// Training epochs (pre-training, or fine-tuning for `finetune`)
    /// [default: 100 / 20]
    #[arg(long, value_name = "N")]
    epochs: Option<usize>,

    /// Batch size (pre-training, or fine-tuning for `finetune`)
    /// [default: 8 / 16]
    #[arg(long, value_name = "N")]
    batch_size: Option<usize>,

    /// Fraction of tokens hidden from the encoder [default: 0.85]
    #[arg(long, value_name = "R")]
    mask_ratio: Option<f64>,

    /// Decoder embedding width [default: 512]
    #[arg(long, value_name = "N")]
    decoder_width: Option<usize>,

    /// Decoder depth in blocks [default: 8]
    #[arg(long, value_name = "N")]
    decoder_depth: Option<usize>,

    /// Contrastive softmax temperature [default: 0.1]
    #[arg(long, value_name = "T")]
    tau: Option<f64>,

    /// Weight of cross-domain live positive pairs [default: 2.0]
    #[arg(long, value_name = "W")]
    lambda_cross: Option<f64>,

    /// Weight of same-domain live positive pairs [default: 1.0]
    #[arg(long, value_name = "W")]
    lambda_same: Option<f64>,

    /// Weight of spoof positive pairs [default: 1.0]
    #[arg(long, value_name = "W")]
    lambda_spoof: Option<f64>,

    /// Contrastive term weight after the stage switch [default: 1.0]
    #[arg(long, value_name = "B")]
    beta: Option<f64>,

    /// Reconstruction-loss threshold for the stage switch [default: 0.01]
    #[arg(long, value_name = "E")]
    epsilon: Option<f64>,

    /// Epoch trigger for the stage switch, or "none" [default: 50]
    #[arg(long, value_name = "EPOCH|none")]
    switch_epoch: Option<String>,

    /// Stage-switch rule: loss_threshold, epoch, or either [default: either]
    #[arg(long, value_name = "MODE")]
    gate_mode: Option<String>,

    /// Run evaluation folds in parallel instead of serially
    #[arg(long)]
    parallel_folds: bool,
}

#[derive(Args)]
struct SynthDataArgs {
    #[command(flatten)]
    common: CommonOpts,
    /// How many domains to generate [default: 4]
    #[arg(long, default_value_t = 4, value_name = "N")]
    domains: usize,
    /// Samples per class per domain [default: 50]
    #[arg(long, default_value_t = 50, value_name = "N")]
    per_class: usize,
    /// Image side length; defaults to the configured encoder input size
    #[arg(long, value_name = "PX")]
    image_size: Option<usize>,
    /// Where to write the domain directories [default: <out-dir>/data]
    #[arg(long, value_name = "DIR")]
    out: Option<PathBuf>,
}

/// Commands that train on a directory of domain folders.
#[derive(Args)]
struct TrainDataArgs {
    #[command(flatten)]
    common: CommonOpts,
    /// Root directory holding one subdirectory per domain
    #[arg(long, value_name = "DIR")]
    data: PathBuf,
    /// Comma-separated domain names to use (default: every subdirectory)
    #[arg(long, value_name = "A,B,...")]
    only: Option<String>,
}

#[derive(Args)]
struct FinetuneArgs {
    #[command(flatten)]
    data: TrainDataArgs,
    /// Pre-trained checkpoint to start the encoder from (default: random
    /// initialization)
    #[arg(long, value_name = "DIR")]
    checkpoint: Option<PathBuf>,
}

#[derive(Args)]
struct EvalLimitedArgs {
    #[command(flatten)]
    data: TrainDataArgs,
    /// Exactly two training domains, comma-separated
    #[arg(long, value_name = "A,B")]
    sources: String,
    /// Target domains to score (default: every non-source domain)
    #[arg(long, value_name = "A,B,...")]
    targets: Option<String>,
}

#[derive(Args)]
struct SweepMaskRatioArgs {
    #[command(flatten)]
    data: TrainDataArgs,
    /// Masking ratios to sweep [default: 0.55,0.65,0.75,0.85,0.95]
    #[arg(
        long,
        default_value = "0.55,0.65,0.75,0.85,0.95",
        value_name = "R,R,..."
    )]
    ratios: String,
}

#[derive(Args)]
struct SweepDecoderArgs {
    #[command(flatten)]
    data: TrainDataArgs,
    /// Decoder widths to sweep [default: 256,512]
    #[arg(long, default_value = "256,512", value_name = "N,N,...")]
    widths: String,
    /// Decoder depths to sweep [default: 4,8]
    #[arg(long, default_value = "4,8", value_name = "N,N,...")]
    depths: String,
}

#[derive(Args)]
struct AblateArgs {
    #[command(flatten)]
    data: TrainDataArgs,
    /// Which rows to produce: no-pretrain, imagenet-free, full, or all
    #[arg(long, default_value = "all", value_name = "MODE")]
    mode: String,
    /// Externally pre-trained encoder checkpoint for the imagenet-free
    /// row (default: fall back to random initialization)
    #[arg(long, value_name = "DIR")]
    init_checkpoint: Option<PathBuf>,
}

#[derive(Args)]
struct VisualizeArgs {
    #[command(flatten)]
    data: TrainDataArgs,
    /// What to render: recon, attention, or tsne
    #[arg(long, value_name = "KIND")]
    kind: String,
    /// Checkpoint to visualize
    #[arg(long, value_name = "DIR")]
    checkpoint: PathBuf,
    /// How many images to render (recon and attention) [default: 4]
    #[arg(long, default_value_t = 4, value_name = "N")]
    count: usize,
    /// Embedding perplexity (tsne) [default: 12]
    #[arg(long, default_value_t = 12.0, value_name = "P")]
    perplexity: f64,
    /// Embedding optimization steps (tsne) [default: 500]
    #[arg(long, default_value_t = 500, value_name = "N")]
    iters: usize,
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    let result = match cli.command {
        Command::SynthData(args) => commands::synth_data(args),
        Command::Pretrain(args) => commands::pretrain(args),
        Command::Finetune(args) => commands::finetune(args),
        Command::EvalLoo(args) => commands::eval_loo(args),
        Command::EvalLimited(args) => commands::eval_limited(args),
        Command::SweepMaskRatio(args) => commands::sweep_mask_ratio(args),
        Command::SweepDecoder(args) => commands::sweep_decoder(args),
        Command::Ablate(args) => commands::ablate(args),
        Command::Visualize(args) => commands::visualize(args),
        Command::VerifyTheory(common) => commands::verify_theory(common),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e @ Error::Config(_)) => {
            eprintln!("configuration error: {e}");
            ExitCode::from(1)
        }
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(2)
        }
    }
}
