//! `latedit`: train, apply and evaluate latent editors.

mod commands;
mod models;

use std::path::PathBuf;

use clap::{Args, Parser, Subcommand};

#[derive(Debug, Parser)]
#[command(name = "latedit", version, about = "Instruction-driven editing of 3D asset latents")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Args)]
struct ModelArgs {
    /// Configuration file (TOML). `LATEDIT_CONFIG` takes precedence.
    #[arg(long)]
    config: Option<PathBuf>,
    /// `toy` or the path of a codec adapter spec (JSON).
    #[arg(long, default_value = models::TOY)]
    codec: String,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Write a synthetic data directory for the toy shift task.
    GenToy {
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 64)]
        train: usize,
        #[arg(long, default_value_t = 8)]
        held_out: usize,
        #[arg(long, default_value_t = 1)]
        seed: u64,
    },
    /// Train an editor; step metrics go to stdout as JSON lines.
    Train {
        #[command(flatten)]
        model: ModelArgs,
        /// Data directory containing `dataset.json`.
        #[arg(long)]
        data: PathBuf,
        /// Checkpoint output directory.
        #[arg(long)]
        out: PathBuf,
        /// Restrict training to these instructions (repeatable).
        #[arg(long)]
        prompt: Vec<String>,
        /// File with one instruction per line.
        #[arg(long)]
        prompt_file: Option<PathBuf>,
        /// Checkpoint directory to continue from.
        #[arg(long)]
        resume: Option<PathBuf>,
    },
    /// Optimize one latent directly under the editing loss (per-instance baseline).
    OptimizeLatent {
        #[command(flatten)]
        model: ModelArgs,
        #[arg(long)]
        latent: PathBuf,
        #[arg(long)]
        prompt: String,
        /// Full target description; makes the instruction a local edit.
        #[arg(long, requires = "token")]
        target: Option<String>,
        /// Word whose attention map becomes the edit mask.
        #[arg(long, requires = "target")]
        token: Option<String>,
        /// Data directory or standalone JSON file naming the priors.
        #[arg(long)]
        priors: PathBuf,
        #[arg(long)]
        steps: Option<usize>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Apply a trained editor to one latent.
    Edit {
        #[command(flatten)]
        model: ModelArgs,
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        latent: PathBuf,
        #[arg(long)]
        prompt: String,
        #[arg(long, default_value_t = 1.0, allow_negative_numbers = true)]
        eta: f64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Latent arithmetic.
    LatentOp {
        #[command(subcommand)]
        op: LatentOp,
    },
    /// Render a latent as a turntable PNG strip.
    Render {
        #[command(flatten)]
        model: ModelArgs,
        #[arg(long)]
        latent: PathBuf,
        #[arg(long, default_value_t = 12)]
        frames: usize,
        #[arg(long, default_value_t = 256)]
        res: usize,
        #[arg(long)]
        out: PathBuf,
    },
    /// Score an editor on an evaluation set; writes JSON, CSV and charts.
    Evaluate {
        #[command(flatten)]
        model: ModelArgs,
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        eval_set: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// `toy` or an image-text embedder adapter spec.
        #[arg(long, default_value = models::TOY)]
        embedder: String,
        /// `toy` or a self-similarity backbone adapter spec.
        #[arg(long, default_value = models::TOY)]
        backbone: String,
    },
    /// Serve the `/v1` HTTP API.
    Serve {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long, default_value = models::TOY)]
        codec: String,
        #[arg(long, default_value_t = 8080)]
        port: u16,
        #[arg(long, default_value = "127.0.0.1")]
        host: std::net::IpAddr,
        /// Session database and latent directory.
        #[arg(long, default_value = "latedit-sessions")]
        store: PathBuf,
    },
}

#[derive(Debug, Subcommand)]
enum LatentOp {
    /// `(1 - eta) * src + eta * edit`.
    Scale {
        #[arg(long)]
        src: PathBuf,
        #[arg(long)]
        edit: PathBuf,
        #[arg(long, allow_negative_numbers = true)]
        eta: f64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Apply instructions one after another, saving every intermediate latent.
    Chain {
        #[command(flatten)]
        model: ModelArgs,
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        latent: PathBuf,
        #[arg(long, required = true)]
        prompt: Vec<String>,
        #[arg(long)]
        out_dir: PathBuf,
    },
    /// Mean edit residual over source/edited pairs (given in matching order).
    ExtractVector {
        #[arg(long, required = true)]
        src: Vec<PathBuf>,
        #[arg(long, required = true)]
        edit: Vec<PathBuf>,
        #[arg(long)]
        prompt: String,
        #[arg(long)]
        out: PathBuf,
    },
    /// `latent + eta * vector`.
    ApplyVector {
        #[arg(long)]
        latent: PathBuf,
        #[arg(long)]
        vector: PathBuf,
        #[arg(long, default_value_t = 1.0, allow_negative_numbers = true)]
        eta: f64,
        #[arg(long)]
        out: PathBuf,
    },
}

fn main() -> anyhow::Result<()> {
    tracing_subscriber::fmt()
        .with_env_filter(
            tracing_subscriber::EnvFilter::try_from_default_env().unwrap_or_else(|_| "info".into()),
        )
        .with_writer(std::io::stderr)
        .init();
    commands::run(Cli::parse().command)
}
