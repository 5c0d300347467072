//! `locdiff`: encode/decode locations, train and sample the diffusion
//! geolocator, and run the evaluation protocols.
//!
//! Machine-readable results go to stdout (or `-o`); logs go to stderr.
//! `SHDD_THREADS` caps the worker pool.

mod commands;
mod io;

use std::path::PathBuf;

use clap::{Args, Parser, Subcommand, ValueEnum};

#[derive(Parser, Debug)]
#[command(
    name = "locdiff",
    version,
    about = "Spherical-harmonics location encoding and latent diffusion geolocation"
)]
pub struct Cli {
    /// Seed for every random choice. Defaults to 0, or to the config
    /// file's seed for `train`.
    #[arg(long, global = true)]
    pub seed: Option<u64>,

    #[command(subcommand)]
    pub cmd: Cmd,
}

#[derive(Subcommand, Debug)]
pub enum Cmd {
    /// Write the SHDD encoding of a location, one coefficient per line.
    Encode(EncodeArgs),
    /// Decode an encoding file to the most likely location (lat,lon).
    Decode(DecodeArgs),
    /// Train a denoiser on a JSON-lines dataset.
    Train(TrainArgs),
    /// Sample location predictions for each condition.
    Sample(SampleArgs),
    /// Evaluation protocols.
    Eval {
        #[command(subcommand)]
        mode: EvalMode,
    },
    /// Time the main operations or dump coefficient magnitudes.
    Bench(BenchArgs),
    /// Write a synthetic JSON-lines dataset.
    GenData(GenDataArgs),
}

#[derive(Copy, Clone, Debug, PartialEq, Eq, ValueEnum)]
pub enum DataKind {
    /// Well-separated cities, each with its own condition embedding.
    Cities,
    /// Uniform locations with a projected low-degree encoding as condition.
    Embedded,
}

#[derive(Args, Debug)]
pub struct GenDataArgs {
    #[arg(long, value_enum, default_value_t = DataKind::Cities)]
    pub kind: DataKind,
    /// Number of cities.
    #[arg(long, default_value_t = 8)]
    pub k: usize,
    /// Records per city (cities) or total records (embedded).
    #[arg(long, default_value_t = 500)]
    pub n: usize,
    /// Condition width.
    #[arg(long, default_value_t = 32)]
    pub cond_dim: usize,
    /// Location spread around each city, km.
    #[arg(long, default_value_t = 25.0)]
    pub noise_km: f64,
    /// Std-dev of condition noise.
    #[arg(long, default_value_t = 0.1)]
    pub cond_noise: f64,
    /// Source degree of the embedded task.
    #[arg(long, default_value_t = 4)]
    pub source_degree: u32,
    #[arg(short, long)]
    pub out: PathBuf,
}

fn parse_lat(s: &str) -> Result<f64, String> {
    let v: f64 = s.parse().map_err(|e| format!("{e}"))?;
    if (-90.0..=90.0).contains(&v) {
        Ok(v)
    } else {
        Err(format!("latitude {v} outside [-90, 90]"))
    }
}

fn parse_lon(s: &str) -> Result<f64, String> {
    let v: f64 = s.parse().map_err(|e| format!("{e}"))?;
    if (-180.0..=180.0).contains(&v) {
        Ok(v)
    } else {
        Err(format!("longitude {v} outside [-180, 180]"))
    }
}

#[derive(Args, Debug)]
pub struct EncodeArgs {
    #[arg(long, allow_hyphen_values = true, value_parser = parse_lat)]
    pub lat: f64,
    #[arg(long, allow_hyphen_values = true, value_parser = parse_lon)]
    pub lon: f64,
    /// Maximum SH degree L (0..=63).
    #[arg(long, short = 'L', value_parser = clap::value_parser!(u32).range(0..=63))]
    pub degree: u32,
    /// Output file; stdout when omitted.
    #[arg(short, long)]
    pub out: Option<PathBuf>,
}

#[derive(Args, Debug)]
pub struct DecodeArgs {
    #[arg(long)]
    pub encoding_file: PathBuf,
    /// `fibonacci:N`, `even_grid:N`, `random:N`, `clustered:N` or
    /// `gallery:<csv path>`.
    #[arg(long, default_value = "fibonacci:100000")]
    pub anchors_spec: String,
    /// Mode window radius in radians; default π/(2L).
    #[arg(long)]
    pub rho: Option<f64>,
}

#[derive(Args, Debug)]
pub struct TrainArgs {
    /// TOML or JSON training config; every field is optional.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// JSON-lines dataset; only `train` records are used.
    #[arg(long)]
    pub dataset: PathBuf,
    /// Checkpoint path; the config is written next to it as `<out>.json`.
    #[arg(short, long)]
    pub out: PathBuf,
    /// Loss log CSV; default `<out>.loss.csv`.
    #[arg(long)]
    pub loss_log: Option<PathBuf>,
    /// Directory for the cached encoding table.
    #[arg(long)]
    pub cache_dir: Option<PathBuf>,
    /// Override the config's epoch count.
    #[arg(long)]
    pub epochs: Option<usize>,
    /// Stop after this many optimizer steps.
    #[arg(long)]
    pub max_steps: Option<usize>,
}

#[derive(Args, Debug, Clone)]
pub struct SamplingArgs {
    /// Ensemble size per condition.
    #[arg(long, default_value_t = 16)]
    pub ensemble: usize,
    /// Reverse diffusion steps.
    #[arg(long, default_value_t = 200)]
    pub steps: usize,
    /// Std-dev of Gaussian jitter applied to each member's condition.
    #[arg(long, default_value_t = 0.05)]
    pub jitter: f64,
    /// Decode window radius in radians; default π/(2L).
    #[arg(long)]
    pub rho: Option<f64>,
}

#[derive(Args, Debug)]
pub struct SampleArgs {
    #[arg(long)]
    pub ckpt: PathBuf,
    /// JSON lines, each either an array of numbers or an object with a
    /// `condition` field (dataset records qualify).
    #[arg(long)]
    pub condition_file: PathBuf,
    #[command(flatten)]
    pub sampling: SamplingArgs,
    #[arg(long, default_value = "fibonacci:100000")]
    pub anchors_spec: String,
    /// Predictions file (JSON lines); stdout when omitted.
    #[arg(short, long)]
    pub out: Option<PathBuf>,
}

#[derive(Copy, Clone, Debug, PartialEq, Eq, ValueEnum)]
pub enum ReportFormat {
    Csv,
    Table,
}

#[derive(Subcommand, Debug)]
pub enum EvalMode {
    /// Accuracy at 1/25/200/750/2500 km plus median and mean error.
    Metrics {
        /// JSON lines with `lat` and `lon` fields.
        #[arg(long)]
        preds: PathBuf,
        /// JSON lines with `lat` and `lon` fields, row-aligned with preds.
        #[arg(long)]
        truths: PathBuf,
        #[arg(long, default_value = "model")]
        label: String,
        #[arg(long, value_enum, default_value_t = ReportFormat::Csv)]
        format: ReportFormat,
    },
    /// Round-trip decode error of clean encodings per degree.
    ResolutionSweep {
        #[arg(long, value_delimiter = ',', default_value = "15,23,31")]
        degrees: Vec<u32>,
        #[arg(long, default_value_t = 1000)]
        points: usize,
        #[arg(long, default_value = "fibonacci:100000")]
        anchors_spec: String,
    },
    /// Decode drift under Gaussian coefficient noise.
    Drift {
        #[arg(long, default_value_t = 47)]
        degree: u32,
        /// Noise variances; repeat or comma-separate.
        #[arg(long, value_delimiter = ',', default_value = "0.01")]
        sigma2: Vec<f64>,
        #[arg(long, default_value_t = 200)]
        trials: usize,
        #[arg(long, default_value = "fibonacci:100000")]
        anchors_spec: String,
    },
    /// Decode one set of sampled latents under several anchor sets.
    AnchorRobustness {
        #[arg(long)]
        ckpt: PathBuf,
        /// Dataset whose `test` records supply conditions and truths.
        #[arg(long)]
        dataset: PathBuf,
        /// At least two anchor specs; repeat the flag.
        #[arg(long = "anchors-spec", required = true, num_args = 1)]
        anchors_specs: Vec<String>,
        #[command(flatten)]
        sampling: SamplingArgs,
    },
}

#[derive(Copy, Clone, Debug, PartialEq, Eq, ValueEnum)]
pub enum BenchWhat {
    Encode,
    Decode,
    Kl,
    CoeffMagnitude,
    Sample,
}

#[derive(Args, Debug)]
pub struct BenchArgs {
    #[arg(long, value_enum)]
    pub what: BenchWhat,
    #[arg(long, short = 'L', default_value_t = 23, value_parser = clap::value_parser!(u32).range(0..=63))]
    pub degree: u32,
    /// Batch size for decode and kl.
    #[arg(long, default_value_t = 512)]
    pub batch: usize,
    #[arg(long, default_value_t = 3)]
    pub reps: usize,
    /// Anchors for decode (default 100k Fibonacci) and kl (2048 random).
    #[arg(long)]
    pub anchors_spec: Option<String>,
    /// Checkpoint for sample timing; a freshly initialized network of the
    /// same shape is used otherwise.
    #[arg(long)]
    pub ckpt: Option<PathBuf>,
    /// Condition width of the fresh network.
    #[arg(long, default_value_t = 768)]
    pub cond_dim: usize,
    /// Lattice size for coefficient magnitudes.
    #[arg(long, default_value_t = 20000)]
    pub grid_points: usize,
}

fn init_threads() {
    if let Some(n) = std::env::var("SHDD_THREADS")
        .ok()
        .and_then(|v| v.parse::<usize>().ok())
    {
        if let Err(e) = rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
        {
            log::warn!("could not size thread pool: {e}");
        }
    }
}

fn main() {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info"))
        .target(env_logger::Target::Stderr)
        .init();
    let cli = Cli::parse();
    init_threads();
    if let Err(e) = commands::run(cli) {
        eprintln!("error: {e:#}");
        std::process::exit(1);
    }
}
