//! `capformer` CLI: reproducible caption-engine workflows.
//!
//! Exit codes: 0 success, 1 check/assertion failure, 2 input error.

mod commands;

use clap::{Parser, Subcommand};
use std::path::PathBuf;
use std::process::ExitCode;

#[derive(Parser)]
#[command(name = "capformer", version, about = "Transformer image-caption engine")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Tokenize manifest captions and write a vocabulary file.
    BuildVocab {
        #[arg(long)]
        manifest: PathBuf,
        /// Keep tokens whose corpus frequency is at least this.
        #[arg(long, default_value_t = 1)]
        min_freq: usize,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train a model; writes checkpoints, loss.csv, and config.lock.json.
    Train {
        /// JSON run config ({"model": {...}, "train": {...}}); flags win.
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long)]
        vocab: PathBuf,
        #[arg(long)]
        out_dir: PathBuf,
        /// Resume from an existing checkpoint.
        #[arg(long)]
        resume: Option<PathBuf>,
        #[arg(long)]
        max_steps: Option<usize>,
        #[arg(long)]
        batch_size: Option<usize>,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        lr_base: Option<f64>,
        #[arg(long)]
        warmup_steps: Option<usize>,
        #[arg(long)]
        checkpoint_every: Option<usize>,
        #[arg(long)]
        label: Option<String>,
        #[arg(long)]
        d_model: Option<usize>,
        #[arg(long)]
        n_heads: Option<usize>,
        #[arg(long)]
        enc_layers: Option<usize>,
        #[arg(long)]
        dec_layers: Option<usize>,
        #[arg(long)]
        d_ff: Option<usize>,
        #[arg(long)]
        dropout: Option<f64>,
        #[arg(long)]
        max_len: Option<usize>,
    },
    /// Caption one CAPF feature file with a trained checkpoint.
    Caption {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        features: PathBuf,
        #[arg(long)]
        vocab: PathBuf,
        /// Beam width; 1 means greedy decoding.
        #[arg(long, default_value_t = 1)]
        beam: usize,
        #[arg(long)]
        max_len: Option<usize>,
        #[arg(long, default_value_t = 0.7)]
        length_alpha: f64,
    },
    /// Score candidate captions against references (corpus JSON to stdout).
    Evaluate {
        /// JSON-lines {"candidate": str, "references": [str, ...]}.
        #[arg(long, conflicts_with_all = ["checkpoint", "manifest", "vocab"])]
        pairs: Option<PathBuf>,
        /// Caption every manifest image with this checkpoint, then score
        /// against the manifest captions.
        #[arg(long, requires = "manifest", requires = "vocab")]
        checkpoint: Option<PathBuf>,
        #[arg(long)]
        manifest: Option<PathBuf>,
        #[arg(long)]
        vocab: Option<PathBuf>,
        #[arg(long, default_value_t = 1)]
        beam: usize,
        #[arg(long)]
        max_len: Option<usize>,
        #[arg(long, default_value_t = 0.7)]
        length_alpha: f64,
        /// Also write report.json and per_sentence.csv here.
        #[arg(long)]
        out_dir: Option<PathBuf>,
    },
    /// Check model gradients against central finite differences.
    Gradcheck {
        /// JSON run config; the model section sizes the checked model.
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long, default_value_t = 7)]
        seed: u64,
    },
    /// Generate a synthetic dataset (features + manifest) on disk.
    SynthData {
        #[arg(long, default_value_t = 16)]
        n: usize,
        #[arg(long)]
        out_dir: PathBuf,
        #[arg(long, default_value_t = 7)]
        seed: u64,
        #[arg(long, default_value_t = 8)]
        grid_len: usize,
        #[arg(long, default_value_t = 32)]
        feature_dim: usize,
        /// Number of distinct synthetic words.
        #[arg(long, default_value_t = 24)]
        tokens: usize,
    },
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match commands::run(cli.command) {
        Ok(code) => code,
        Err(err) => {
            eprintln!("error: {err}");
            ExitCode::from(commands::exit_code_for(&err))
        }
    }
}
