use std::path::PathBuf;

use clap::{Args, Parser, Subcommand, ValueEnum};

#[derive(Debug, Parser)]
#[command(name = "synthrad", version, about = "Synthetic chest X-ray generation and evaluation")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Build a prepared dataset directory from a toy spec or metadata CSVs.
    PrepareData(PrepareArgs),
    /// Train a diffusion model, a progressive GAN or a classifier.
    Train(TrainArgs),
    /// Generate images from a checkpoint.
    Sample(SampleArgs),
    /// Run the real versus real+synthetic classifier experiment.
    Experiment(ExperimentArgs),
    /// Print per-class counts and co-occurrences.
    ReportBalance(BalanceArgs),
}

#[derive(Debug, Clone, Args)]
pub struct Common {
    /// TOML run configuration; flags override its values.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Falls back to the config file, then SYNTHRAD_SEED, then 0.
    #[arg(long)]
    pub seed: Option<u64>,
}

#[derive(Debug, Args)]
pub struct PrepareArgs {
    #[command(flatten)]
    pub common: Common,
    #[arg(long)]
    pub out: PathBuf,
    /// Generate the procedural toy dataset.
    #[arg(long, conflicts_with_all = ["metadata", "images"])]
    pub toy: bool,
    #[arg(long, requires = "images")]
    pub metadata: Option<PathBuf>,
    #[arg(long, requires = "metadata")]
    pub bboxes: Option<PathBuf>,
    /// Directory holding the images named in the metadata (PGM, or PNG).
    #[arg(long, requires = "metadata")]
    pub images: Option<PathBuf>,
    /// Keep only images that have a bounding box.
    #[arg(long, requires = "bboxes")]
    pub bbox_subset: bool,
    #[arg(long, default_value_t = 28)]
    pub resolution: usize,
    #[arg(long, default_value_t = 64)]
    pub per_class: usize,
    /// Comma-separated dataset labels for the toy classes.
    #[arg(long, default_value = "No Finding,Edema,Mass,Nodule")]
    pub toy_classes: String,
    #[arg(long)]
    pub no_positions: bool,
    #[arg(long, default_value_t = 0.1)]
    pub noise_level: f32,
    #[arg(long, default_value_t = 1.2)]
    pub amplitude: f32,
    #[arg(long, default_value_t = 0.8, conflicts_with = "test_manifest")]
    pub train_ratio: f64,
    /// Newline-delimited image ids forming the test partition.
    #[arg(long)]
    pub test_manifest: Option<PathBuf>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum ModelKind {
    Diffusion,
    Pggan,
    Classifier,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    #[command(flatten)]
    pub common: Common,
    #[arg(long, value_enum)]
    pub kind: ModelKind,
    /// Prepared dataset directory.
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    /// Total steps, counted from the start of training.
    #[arg(long)]
    pub steps: Option<u64>,
    #[arg(long)]
    pub batch_size: Option<usize>,
    #[arg(long)]
    pub lr: Option<f32>,
    /// Write a checkpoint every K steps in addition to the final one.
    #[arg(long)]
    pub ckpt_every: Option<u64>,
    /// Continue from a checkpoint; its model and schedule settings win.
    #[arg(long)]
    pub resume: Option<PathBuf>,
    /// Diffusion steps T; betas are rescaled from the 1000-step schedule.
    #[arg(long)]
    pub timesteps: Option<usize>,
    /// Comma-separated channel widths of the denoiser or GAN.
    #[arg(long)]
    pub widths: Option<String>,
    #[arg(long)]
    pub steps_fade: Option<u64>,
    #[arg(long)]
    pub steps_stable: Option<u64>,
    #[arg(long)]
    pub epochs: Option<usize>,
    /// Comma-separated classifier classes; defaults to every single-finding class present.
    #[arg(long)]
    pub classes: Option<String>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum ImageFormat {
    Pgm,
    Png,
}

#[derive(Debug, Args)]
pub struct SampleArgs {
    #[command(flatten)]
    pub common: Common,
    #[arg(long)]
    pub checkpoint: PathBuf,
    /// Comma-separated tokens, e.g. "edema, top left".
    #[arg(long, default_value = "")]
    pub prompt: String,
    #[arg(long, default_value_t = 4)]
    pub count: usize,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, value_enum, default_value_t = ImageFormat::Pgm)]
    pub format: ImageFormat,
    /// Classifier checkpoint used to find class latents for a GAN prompt.
    #[arg(long)]
    pub scorer: Option<PathBuf>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum SynthSource {
    Diffusion,
    Pggan,
    /// Real training images of the requested class, drawn with replacement.
    Replay,
    /// Clamped Gaussian noise.
    Noise,
}

#[derive(Debug, Args)]
pub struct ExperimentArgs {
    #[command(flatten)]
    pub common: Common,
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    /// Rows as real:synthetic pairs, e.g. "1000:0,500:500".
    #[arg(long)]
    pub rows: Option<String>,
    #[arg(long)]
    pub test_size: Option<usize>,
    #[arg(long)]
    pub disease: Option<String>,
    #[arg(long, value_enum, default_value_t = SynthSource::Diffusion)]
    pub synth_source: SynthSource,
    /// Generator checkpoint for the diffusion and pggan sources.
    #[arg(long)]
    pub checkpoint: Option<PathBuf>,
    /// Classifier checkpoint for pggan class latents.
    #[arg(long)]
    pub scorer: Option<PathBuf>,
    /// Append a uniformly drawn position token to diffusion prompts.
    #[arg(long)]
    pub positions: bool,
    #[arg(long)]
    pub epochs: Option<usize>,
}

#[derive(Debug, Args)]
pub struct BalanceArgs {
    /// Metadata CSV in the dataset layout.
    #[arg(long, conflicts_with = "data", required_unless_present = "data")]
    pub metadata: Option<PathBuf>,
    /// Prepared dataset directory.
    #[arg(long)]
    pub data: Option<PathBuf>,
    /// Also write the report as CSV.
    #[arg(long)]
    pub out: Option<PathBuf>,
}
