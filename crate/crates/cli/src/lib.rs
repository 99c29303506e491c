//! `mcbmt` command line: `train`, `translate`, `bleu`, `bench-sketch` and
//! `gen-synthetic`.
//!
//! Exit codes: 0 success, 1 usage or configuration error, 2 data error,
//! 3 numeric failure.

mod commands;
mod manifest;

use std::ffi::OsString;
use std::path::PathBuf;

use clap::{Args, Parser, Subcommand, ValueEnum};
use mcbmt::FusionKind;

pub use commands::{cmd_bench_sketch, cmd_bleu, cmd_gen_synthetic, cmd_train, cmd_translate, RunSummary};
pub use manifest::{DataSource, RunManifest};

pub const EXIT_OK: i32 = 0;
pub const EXIT_USAGE: i32 = 1;
pub const EXIT_DATA: i32 = 2;
pub const EXIT_NUMERIC: i32 = 3;

#[derive(Debug)]
pub struct CliError {
    pub code: i32,
    pub message: String,
}

impl CliError {
    pub fn usage(message: impl Into<String>) -> Self {
        CliError {
            code: EXIT_USAGE,
            message: message.into(),
        }
    }

    pub fn data(message: impl Into<String>) -> Self {
        CliError {
            code: EXIT_DATA,
            message: message.into(),
        }
    }
}

impl From<mcbmt::Error> for CliError {
    fn from(e: mcbmt::Error) -> Self {
        use mcbmt::Error as E;
        let code = match &e {
            _ if e.is_numeric() => EXIT_NUMERIC,
            E::InvalidArgument(_) => EXIT_USAGE,
            _ => EXIT_DATA,
        };
        CliError {
            code,
            message: e.to_string(),
        }
    }
}

impl std::fmt::Display for CliError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.message)
    }
}

pub type CliResult<T> = Result<T, CliError>;

#[derive(Parser, Debug)]
#[command(name = "mcbmt", version, about = "Multimodal translation with compact bilinear pooling")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Train one model per seed and report averaged metrics.
    Train(TrainArgs),
    /// Greedy-decode a source file with a trained checkpoint.
    Translate(TranslateArgs),
    /// Corpus BLEU-4 of a hypothesis file against a reference file.
    Bleu(BleuArgs),
    /// Tensor Sketch approximation error across sketch dimensions.
    BenchSketch(BenchArgs),
    /// Write the synthetic task as text and MMFM files.
    GenSynthetic(GenArgs),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum Toggle {
    On,
    Off,
}

#[derive(Args, Debug, Clone, Default)]
pub struct TrainArgs {
    /// JSON file with optional "model", "train" and "synthetic" sections.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Train on a synthetic preset (default, small, unambiguous).
    #[arg(long, num_args = 0..=1, default_missing_value = "default")]
    pub synthetic: Option<String>,
    #[arg(long)]
    pub train_src: Option<PathBuf>,
    #[arg(long)]
    pub train_tgt: Option<PathBuf>,
    #[arg(long)]
    pub train_features: Option<PathBuf>,
    #[arg(long)]
    pub val_src: Option<PathBuf>,
    #[arg(long)]
    pub val_tgt: Option<PathBuf>,
    #[arg(long)]
    pub val_features: Option<PathBuf>,
    #[arg(long, value_parser = parse_fusion)]
    pub fusion: Option<FusionKind>,
    #[arg(long, value_enum)]
    pub pre_attention: Option<Toggle>,
    #[arg(long)]
    pub sketch_dim: Option<usize>,
    /// Encoder/decoder size L.
    #[arg(long)]
    pub hidden: Option<usize>,
    /// Embedding size E.
    #[arg(long)]
    pub embed: Option<usize>,
    #[arg(long)]
    pub attn_dim: Option<usize>,
    /// Hidden channels of the pre-attention convolution.
    #[arg(long)]
    pub pre_hidden: Option<usize>,
    #[arg(long)]
    pub max_decode_len: Option<usize>,
    /// Bypass the image entirely.
    #[arg(long)]
    pub text_only: bool,
    /// Train seeds seed, seed+1, …, seed+runs-1.
    #[arg(long, default_value_t = 1)]
    pub runs: usize,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub steps: Option<usize>,
    #[arg(long)]
    pub patience: Option<usize>,
    #[arg(long)]
    pub batch: Option<usize>,
    #[arg(long)]
    pub lr: Option<f64>,
    #[arg(long)]
    pub l2: Option<f64>,
    #[arg(long)]
    pub eval_interval: Option<usize>,
    /// Disable gradient-norm clipping.
    #[arg(long)]
    pub no_clip: bool,
    #[arg(long, default_value_t = 1)]
    pub min_count: usize,
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Re-run exactly what a previous manifest.json describes.
    #[arg(long, conflicts_with_all = ["config", "synthetic", "train_src", "fusion", "seed", "runs"])]
    pub from_manifest: Option<PathBuf>,
    #[arg(long)]
    pub quiet: bool,
}

#[derive(Args, Debug, Clone)]
pub struct TranslateArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long)]
    pub src: PathBuf,
    /// MMFM file aligned with the source lines; optional for text-only models.
    #[arg(long)]
    pub features: Option<PathBuf>,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Args, Debug, Clone)]
pub struct BleuArgs {
    #[arg(long)]
    pub hyp: PathBuf,
    #[arg(long = "ref")]
    pub reference: PathBuf,
}

#[derive(Args, Debug, Clone)]
pub struct BenchArgs {
    #[arg(long, value_delimiter = ',', default_values_t = [64usize, 256, 1024])]
    pub dims: Vec<usize>,
    #[arg(long, default_value_t = 1000)]
    pub trials: usize,
    #[arg(long, default_value_t = 256)]
    pub n1: usize,
    #[arg(long, default_value_t = 256)]
    pub n2: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Line-delimited JSON records, one per dimension.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Args, Debug, Clone)]
pub struct GenArgs {
    #[arg(long, default_value = "default")]
    pub synthetic: String,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub out: PathBuf,
}

fn parse_fusion(s: &str) -> Result<FusionKind, String> {
    s.parse().map_err(|e: mcbmt::Error| e.to_string())
}

/// Parses arguments and runs the command, returning the process exit code.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { EXIT_USAGE } else { EXIT_OK };
        }
    };
    let result = match cli.command {
        Command::Train(a) => cmd_train(&a).map(|_| ()),
        Command::Translate(a) => cmd_translate(&a),
        Command::Bleu(a) => cmd_bleu(&a).map(|score| println!("BLEU = {score:.2}")),
        Command::BenchSketch(a) => cmd_bench_sketch(&a).map(|_| ()),
        Command::GenSynthetic(a) => cmd_gen_synthetic(&a),
    };
    match result {
        Ok(()) => EXIT_OK,
        Err(e) => {
            eprintln!("error: {e}");
            e.code
        }
    }
}
