use std::path::PathBuf;

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::Serialize;

use scfreg_core::scf::HeadMode;
use scfreg_core::synth::Modality;

#[derive(Debug, Parser)]
#[command(name = "scfreg", version, about = "Region-conditioned deformable registration toolkit")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a synthetic registration dataset.
    Synth(SynthArgs),
    /// Train a model on a dataset directory.
    Train(TrainArgs),
    /// Register one pair with a trained checkpoint.
    Register(RegisterArgs),
    /// Score a displacement field against segmentations.
    Eval(EvalArgs),
    /// Correlate SDlogJ with folding fraction over a sweep of fields.
    SweepCorrelation(SweepArgs),
    /// Normalise raw embeddings and prepend the background row.
    BackgroundVector(BackgroundArgs),
    /// Parameter and multiply-add counts of a configuration.
    Complexity(ComplexityArgs),
}

// Fields parsed into a whole Vec are spelled `::std::vec::Vec` so clap does
// not treat them as repeated flags.

/// `64x64` or `32x32x32`.
pub fn parse_shape(s: &str) -> Result<Vec<usize>, String> {
    let dims: Result<Vec<usize>, _> = s.split(['x', 'X']).map(str::parse).collect();
    match dims {
        Ok(d) if (2..=3).contains(&d.len()) && d.iter().all(|&n| n > 0) => Ok(d),
        _ => Err(format!("expected 2 or 3 positive sizes like 64x64, got `{s}`")),
    }
}

/// Comma-separated floats, e.g. `1,1,2.5`.
pub fn parse_floats(s: &str) -> Result<Vec<f64>, String> {
    s.split(',')
        .map(|p| p.trim().parse::<f64>().map_err(|e| format!("`{p}`: {e}")))
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Serialize)]
#[serde(rename_all = "kebab-case")]
pub enum ModalityArg {
    Generic,
    CtLike,
}

impl From<ModalityArg> for Modality {
    fn from(m: ModalityArg) -> Self {
        match m {
            ModalityArg::Generic => Modality::Generic,
            ModalityArg::CtLike => Modality::CtLike,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Serialize)]
#[serde(rename_all = "kebab-case")]
pub enum HeadArg {
    Textscf,
    UniformOnly,
}

impl From<HeadArg> for HeadMode {
    fn from(h: HeadArg) -> Self {
        match h {
            HeadArg::Textscf => HeadMode::Textscf,
            HeadArg::UniformOnly => HeadMode::UniformOnly,
        }
    }
}

#[derive(Debug, Clone, Args, Serialize)]
pub struct SynthArgs {
    #[arg(long, value_parser = parse_shape)]
    pub shape: ::std::vec::Vec<usize>,
    #[arg(long, default_value_t = 4)]
    pub regions: usize,
    #[arg(long, default_value_t = 10)]
    pub pairs: usize,
    /// Largest velocity norm in voxels.
    #[arg(long, default_value_t = 6.0)]
    pub amp: f64,
    /// Smoothing of the velocity noise in voxels.
    #[arg(long, default_value_t = 12.0)]
    pub sigma: f64,
    #[arg(long, default_value_t = 0.02)]
    pub noise_sd: f64,
    #[arg(long, env = "SCFREG_SEED", default_value_t = 0)]
    pub seed: u64,
    #[arg(long, value_enum, default_value = "generic")]
    pub modality: ModalityArg,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Clone, Args, Serialize)]
#[command(group = clap::ArgGroup::new("emb").required(true).args(["embeddings", "one_hot"]))]
pub struct TrainArgs {
    #[arg(long)]
    pub data: PathBuf,
    /// Embedding file (`<stem>.scft` + `<stem>.json`).
    #[arg(long)]
    pub embeddings: Option<PathBuf>,
    /// Identity embeddings sized to the dataset's labels.
    #[arg(long)]
    pub one_hot: bool,
    #[arg(long, default_value_t = 0.1)]
    pub lambda: f64,
    #[arg(long, default_value_t = 100)]
    pub epochs: usize,
    #[arg(long, default_value_t = 1e-4)]
    pub lr: f64,
    /// Start channels of the backbone.
    #[arg(long, default_value_t = 16)]
    pub ns: usize,
    #[arg(long, default_value_t = 3)]
    pub levels: usize,
    #[arg(long, default_value_t = 3)]
    pub kernel: usize,
    /// Backbone output channels.
    #[arg(long, default_value_t = 16)]
    pub c2: usize,
    /// Hidden width of the implicit MLP.
    #[arg(long, default_value_t = 256)]
    pub cphi: usize,
    #[arg(long)]
    pub integrate: bool,
    #[arg(long, default_value_t = 7)]
    pub steps: u32,
    #[arg(long, value_enum, default_value = "textscf")]
    pub head: HeadArg,
    /// Pairs held out (from the end of the dataset) for validation Dice.
    #[arg(long, default_value_t = 0)]
    pub val_pairs: usize,
    #[arg(long)]
    pub checkpoint_every: Option<usize>,
    #[arg(long, env = "SCFREG_SEED", default_value_t = 0)]
    pub seed: u64,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Clone, Args, Serialize)]
pub struct RegisterArgs {
    #[arg(long)]
    pub ckpt: PathBuf,
    #[arg(long)]
    pub moving: PathBuf,
    #[arg(long)]
    pub fixed: PathBuf,
    #[arg(long)]
    pub fixed_seg: PathBuf,
    /// Per-voxel confidence of the fixed mask; 1 everywhere when omitted.
    #[arg(long)]
    pub fixed_probs: Option<PathBuf>,
    /// Moving mask to warp (nearest neighbour) alongside the image.
    #[arg(long)]
    pub moving_seg: Option<PathBuf>,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Clone, Args, Serialize)]
pub struct EvalArgs {
    #[arg(long)]
    pub field: PathBuf,
    #[arg(long)]
    pub fixed_seg: PathBuf,
    #[arg(long)]
    pub moving_seg: PathBuf,
    /// Voxel spacing per axis (default 1 on every axis).
    #[arg(long, value_parser = parse_floats)]
    pub spacing: Option<::std::vec::Vec<f64>>,
    /// Labels to score (default: every foreground label present).
    #[arg(long, value_delimiter = ',')]
    pub labels: Option<Vec<i32>>,
    /// Write the report here instead of standard output.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Clone, Args, Serialize)]
pub struct SweepArgs {
    #[arg(long, value_parser = parse_shape, default_value = "32x32")]
    pub shape: ::std::vec::Vec<usize>,
    #[arg(long, value_parser = parse_floats, default_value = "1,2,3,4,5,6")]
    pub amps: ::std::vec::Vec<f64>,
    #[arg(long, value_parser = parse_floats, default_value = "2,3,4,6")]
    pub sigmas: ::std::vec::Vec<f64>,
    /// Use every `.scft` displacement field in this directory instead of
    /// generating a sweep.
    #[arg(long)]
    pub fields: Option<PathBuf>,
    #[arg(long, env = "SCFREG_SEED", default_value_t = 0)]
    pub seed: u64,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Clone, Args, Serialize)]
pub struct BackgroundArgs {
    /// Raw embeddings without a background row.
    #[arg(long)]
    pub embeddings: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Clone, Args, Serialize)]
pub struct ComplexityArgs {
    #[arg(long, default_value_t = 16)]
    pub ns: usize,
    #[arg(long, default_value_t = 256)]
    pub cphi: usize,
    #[arg(long, value_parser = parse_shape, default_value = "64x64")]
    pub shape: ::std::vec::Vec<usize>,
    #[arg(long, default_value_t = 3)]
    pub levels: usize,
    #[arg(long, default_value_t = 3)]
    pub kernel: usize,
    #[arg(long, default_value_t = 16)]
    pub c2: usize,
    /// Regions including background.
    #[arg(long, default_value_t = 5)]
    pub regions: usize,
    /// Embedding width (default: one-hot, equal to --regions).
    #[arg(long)]
    pub emb_dim: Option<usize>,
    /// Report inference with the region filter bank precomputed.
    #[arg(long)]
    pub cached: bool,
    #[arg(long)]
    pub out: Option<PathBuf>,
}
