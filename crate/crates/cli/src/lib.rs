//! Command-line front end: subcommands for every pipeline stage plus
//! `pipeline`, which chains them inside one run directory.

use std::ffi::OsString;
use std::path::PathBuf;

use citylike_core::geo::BBox;
use citylike_core::imagery::Source;
use citylike_core::Error;
use clap::{Args, Parser, Subcommand};

pub mod commands;
pub mod config;
pub mod pipeline;
pub mod provenance;

pub use config::{LoadedConfig, RunConfig};
pub use pipeline::{run_pipeline, RunLayout};

#[derive(Debug, Parser)]
#[command(name = "citylike", version, about = "Sample city imagery, train a city classifier and map which cities a held-out city resembles")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Draw disk sample locations for cities, or an evaluation grid.
    Sample(SampleArgs),
    /// Write the offline synthetic benchmark (one city per style).
    Synth(SynthArgs),
    /// Fetch imagery into per-city directories.
    Fetch(FetchArgs),
    /// Mean-shift segment every PNG under a directory.
    Segment(SegmentArgs),
    /// Build a train/val manifest from per-city image directories.
    Dataset(DatasetArgs),
    /// Train a classifier from a manifest.
    Train(TrainArgs),
    /// Top-1/top-5 accuracy of a checkpoint on a manifest split.
    Eval(EvalArgs),
    /// Predict the most similar training city for each location.
    Infer(InferArgs),
    /// Likeness report and top-K table from prediction records.
    Report(ReportArgs),
    /// Draw prediction maps and image galleries.
    #[command(subcommand)]
    Render(RenderCommand),
    /// Run every stage from a config file.
    Pipeline(PipelineArgs),
}

#[derive(Debug, Args)]
pub struct SampleArgs {
    #[arg(long)]
    pub cities: Option<PathBuf>,
    /// Points per city.
    #[arg(long, default_value_t = 1000)]
    pub n: usize,
    #[arg(long)]
    pub water_mask: Option<PathBuf>,
    /// Grid mode: city id of the evaluation grid.
    #[arg(long, requires = "bbox")]
    pub grid: Option<String>,
    /// Grid mode: `lat_min,lon_min,lat_max,lon_max`.
    #[arg(long)]
    pub bbox: Option<BBox>,
    /// Grid mode: spacing in metres.
    #[arg(long, default_value_t = 400.0)]
    pub spacing: f64,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct SynthArgs {
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value_t = 10)]
    pub styles: usize,
    #[arg(long, default_value_t = 100)]
    pub images_per_style: usize,
    #[arg(long, default_value_t = 72)]
    pub tile: u32,
    #[arg(long, default_value = "map")]
    pub source: Source,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
}

#[derive(Debug, Args)]
pub struct FetchArgs {
    /// Provider config JSON.
    #[arg(long)]
    pub provider: PathBuf,
    /// Disk-sample these cities with replacement of unusable images.
    #[arg(long, conflicts_with = "locations")]
    pub cities: Option<PathBuf>,
    /// Fetch exactly these locations; missing imagery is skipped.
    #[arg(long)]
    pub locations: Option<PathBuf>,
    #[arg(long, default_value_t = 1000)]
    pub n: usize,
    #[arg(long, default_value = "map")]
    pub source: Source,
    #[arg(long, default_value_t = 256)]
    pub tile: u32,
    #[arg(long)]
    pub water_mask: Option<PathBuf>,
    #[arg(long)]
    pub cache: Option<PathBuf>,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct SegmentArgs {
    #[arg(long = "in")]
    pub input: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value_t = 6.0)]
    pub spatial: f64,
    #[arg(long, default_value_t = 4.5)]
    pub range: f64,
    #[arg(long, default_value_t = 50)]
    pub min_density: usize,
}

#[derive(Debug, Args)]
pub struct DatasetArgs {
    /// Directories holding one `<city_id>/` folder per city.
    #[arg(long = "images", required = true)]
    pub images: Vec<PathBuf>,
    #[arg(long)]
    pub cities: PathBuf,
    /// City ids kept out of the manifest.
    #[arg(long)]
    pub exclude: Vec<String>,
    #[arg(long, default_value_t = 0.25)]
    pub val_fraction: f64,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    #[arg(long)]
    pub manifest: PathBuf,
    /// `toy`, `full` or a JSON architecture file.
    #[arg(long, default_value = "toy")]
    pub arch: String,
    /// Optimizer JSON; flags below override its fields.
    #[arg(long)]
    pub optimizer: Option<PathBuf>,
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub batch_size: Option<usize>,
    #[arg(long)]
    pub lr: Option<f64>,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long)]
    pub manifest: PathBuf,
    #[arg(long, default_value = "val")]
    pub split: citylike_core::dataset::Split,
    #[arg(long, default_value_t = 64)]
    pub batch_size: usize,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct InferArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    /// Locations CSV, usually an evaluation grid.
    #[arg(long)]
    pub locations: PathBuf,
    #[arg(long, default_value = "map")]
    pub source: Source,
    /// Provider config JSON used to fetch the imagery.
    #[arg(long)]
    pub provider: PathBuf,
    #[arg(long, default_value_t = 256)]
    pub tile: u32,
    #[arg(long)]
    pub cache: Option<PathBuf>,
    /// Held-out city; refused if it is a training class.
    #[arg(long)]
    pub eval_city: Option<String>,
    #[arg(long, default_value_t = 0.5)]
    pub threshold: f64,
    #[arg(long, default_value_t = 64)]
    pub batch_size: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct ReportArgs {
    #[arg(long)]
    pub records: PathBuf,
    #[arg(long)]
    pub target: String,
    #[arg(long, default_value_t = 0.5)]
    pub threshold: f64,
    #[arg(long, default_value_t = 20)]
    pub k: usize,
    /// City table for display names.
    #[arg(long)]
    pub cities: Option<PathBuf>,
    /// Checkpoint whose SHA-256 is recorded in the report.
    #[arg(long)]
    pub checkpoint: Option<PathBuf>,
    /// Report JSON; printed to stdout when absent.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Subcommand)]
pub enum RenderCommand {
    /// White map with one 3 px dot per filtered prediction, colored by
    /// city, and a 7 px black star on every filtered target match.
    Map(RenderMapArgs),
    /// Grid of same-sized images with a 4 px white gutter.
    Gallery(RenderGalleryArgs),
}

#[derive(Debug, Args)]
pub struct RenderMapArgs {
    #[arg(long)]
    pub records: PathBuf,
    #[arg(long)]
    pub cities: PathBuf,
    /// Map extent; defaults to the records' bounding box.
    #[arg(long)]
    pub bbox: Option<BBox>,
    #[arg(long)]
    pub target: Option<String>,
    #[arg(long, default_value_t = 800)]
    pub width: u32,
    #[arg(long, default_value_t = 800)]
    pub height: u32,
    #[arg(long, default_value_t = 3)]
    pub dot_radius: u32,
    #[arg(long, default_value_t = 7)]
    pub marker_radius: u32,
    /// Legend CSV (`city_id,name,r,g,b`).
    #[arg(long)]
    pub legend: Option<PathBuf>,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct RenderGalleryArgs {
    #[arg(long)]
    pub dir: PathBuf,
    #[arg(long, default_value_t = 3)]
    pub cols: u32,
    /// At most this many images, in file-name order.
    #[arg(long, default_value_t = 12)]
    pub max: usize,
    #[arg(long, default_value = "gallery.png")]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct PipelineArgs {
    #[arg(long)]
    pub config: PathBuf,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Defaults to `runs/<timestamp>-<config hash>/`.
    #[arg(long)]
    pub run_dir: Option<PathBuf>,
}

/// Process exit code for an error.
pub fn exit_code(e: &Error) -> i32 {
    match e {
        Error::ProviderUnavailable(_) | Error::NoImagery { .. } | Error::SamplingExhausted(_) => 2,
        Error::DivergedTraining { .. } => 3,
        Error::Contamination(_) => 4,
        _ => 1,
    }
}

/// Parses `argv` (program name first), runs the command and returns the
/// process exit code.
pub fn run<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let _ = env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).try_init();
    let cli = match Cli::try_parse_from(argv) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return code;
        }
    };
    match commands::dispatch(cli.command) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            exit_code(&e)
        }
    }
}
