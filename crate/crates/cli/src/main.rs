mod commands;

use clap::{Args, Parser, Subcommand};
use serde::{Deserialize, Serialize};
use std::path::PathBuf;
use std::process::ExitCode;

/// Region- and point-weighted local features: extraction, attention
/// training, location datasets and matching benchmarks.
#[derive(Debug, Parser)]
#[command(
    name = "rapnet",
    version,
    arg_required_else_help = true,
    args_conflicts_with_subcommands = true
)]
struct Cli {
    /// Maximum worker threads (defaults to all cores).
    #[arg(long, global = true)]
    threads: Option<usize>,

    /// Re-run the command recorded in an echoed config file.
    #[arg(long, value_name = "CONFIG")]
    replay: Option<PathBuf>,

    #[command(subcommand)]
    command: Option<Command>,
}

#[derive(Debug, Clone, Subcommand, Serialize, Deserialize, PartialEq)]
#[serde(tag = "command", rename_all = "kebab-case")]
pub enum Command {
    /// Extract keypoints and descriptors from one image into a RAPF file.
    Extract(ExtractArgs),
    /// Train the attention head on a location manifest.
    Train(TrainArgs),
    /// Cluster a TUM pose file into locations and write a manifest.
    Locations(LocationsArgs),
    /// Mutual nearest-neighbour matching of two RAPF files.
    Match(MatchArgs),
    /// Run the HPatches-style mean matching accuracy benchmark.
    EvalMma(EvalArgs),
    /// List the tensors of a RAPW weight file.
    InspectWeights(InspectArgs),
    /// Write freshly initialized weights.
    InitWeights(InitArgs),
    /// Write the synthetic occluder dataset and its manifest.
    SynthDataset(SynthArgs),
}

#[derive(Debug, Clone, Args, Serialize, Deserialize, PartialEq)]
pub struct ModelArgs {
    /// Backbone weights (a directory means `<dir>/backbone.rapw`).
    #[arg(long, env = "RAPNET_WEIGHTS")]
    pub weights: PathBuf,
    /// Attention weights; by default taken from the backbone file when present.
    #[arg(long)]
    pub attention: Option<PathBuf>,
    /// Ignore attention weights and rank by point weights alone.
    #[arg(long)]
    pub no_attention: bool,
    #[arg(long, default_value_t = 500)]
    pub top_k: usize,
    #[arg(long, default_value_t = 640)]
    pub max_edge: u32,
    #[arg(long, default_value_t = 8)]
    pub border: usize,
}

#[derive(Debug, Clone, Args, Serialize, Deserialize, PartialEq)]
pub struct ExtractArgs {
    #[command(flatten)]
    #[serde(flatten)]
    pub model: ModelArgs,
    #[arg(long)]
    pub image: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    /// Write one `x y score d...` line per keypoint instead of RAPF.
    #[arg(long)]
    pub text: bool,
}

#[derive(Debug, Clone, Args, Serialize, Deserialize, PartialEq)]
pub struct TrainArgs {
    /// Lines of `<relative_path> <scene> <location_id>`.
    #[arg(long)]
    pub manifest: PathBuf,
    /// Directory the manifest paths are relative to (defaults to the manifest's directory).
    #[arg(long)]
    pub image_root: Option<PathBuf>,
    #[arg(long, env = "RAPNET_WEIGHTS")]
    pub weights: PathBuf,
    /// Seeds triplet mining and attention initialization.
    #[arg(long)]
    pub seed: u64,
    #[arg(long, default_value_t = 200)]
    pub steps: usize,
    /// Train for whole epochs instead of `--steps`.
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long, default_value_t = 1e-3)]
    pub learning_rate: f64,
    #[arg(long, default_value_t = 0.9)]
    pub momentum: f64,
    #[arg(long, default_value_t = 1)]
    pub batch_size: usize,
    #[arg(long, default_value_t = 640)]
    pub max_edge: u32,
    /// Attention weights to start from instead of a fresh initialization.
    #[arg(long)]
    pub init: Option<PathBuf>,
    /// Per-step loss trace as CSV.
    #[arg(long)]
    pub loss_csv: Option<PathBuf>,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Clone, Args, Serialize, Deserialize, PartialEq)]
pub struct LocationsArgs {
    /// TUM trajectory: `timestamp tx ty tz qx qy qz qw` per line.
    #[arg(long)]
    pub poses: PathBuf,
    #[arg(long, default_value_t = rapnet::locdata::DEFAULT_DIST_THRESH)]
    pub dist_thresh: f64,
    #[arg(long, default_value_t = rapnet::locdata::DEFAULT_ANGLE_THRESH)]
    pub angle_thresh: f64,
    #[arg(long, default_value = "scene")]
    pub scene: String,
    /// Image file extension; image names are `<timestamp>.<ext>`.
    #[arg(long, default_value = "png")]
    pub ext: String,
    /// Copy `<images>/<timestamp>.<ext>` into the dataset layout next to the manifest.
    #[arg(long)]
    pub images: Option<PathBuf>,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Clone, Args, Serialize, Deserialize, PartialEq)]
pub struct MatchArgs {
    #[arg(long)]
    pub a: PathBuf,
    #[arg(long)]
    pub b: PathBuf,
    /// Matches as `index_a,index_b,distance`.
    #[arg(long)]
    pub out: PathBuf,
    /// Ground-truth homography from a to b; enables `--curve`.
    #[arg(long, requires = "curve")]
    pub homography: Option<PathBuf>,
    /// Matching-accuracy curve as `threshold,accuracy,matches`.
    #[arg(long, requires = "homography")]
    pub curve: Option<PathBuf>,
}

#[derive(Debug, Clone, Args, Serialize, Deserialize, PartialEq)]
pub struct EvalArgs {
    #[command(flatten)]
    #[serde(flatten)]
    pub model: ModelArgs,
    /// Root holding one directory per sequence.
    #[arg(long)]
    pub dataset: PathBuf,
    /// Output directory for `mma.csv`, `mma.svg` and `config.json`.
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Clone, Args, Serialize, Deserialize, PartialEq)]
pub struct InspectArgs {
    #[arg(long, env = "RAPNET_WEIGHTS")]
    pub weights: PathBuf,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, clap::ValueEnum, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum InitKind {
    /// Random toy backbone `[[c, c], [c, c]]`.
    Toy,
    /// Random full-scale backbone (VGG to conv4_3).
    Full,
    /// Hand-built hue-selective toy backbone.
    Hue,
}

#[derive(Debug, Clone, Args, Serialize, Deserialize, PartialEq)]
pub struct InitArgs {
    #[arg(long, value_enum, default_value_t = InitKind::Toy)]
    pub kind: InitKind,
    #[arg(long, default_value_t = 8)]
    pub channels: usize,
    #[arg(long)]
    pub seed: u64,
    /// Also include freshly initialized attention weights.
    #[arg(long)]
    pub with_attention: bool,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Clone, Args, Serialize, Deserialize, PartialEq)]
pub struct SynthArgs {
    #[arg(long, default_value_t = 10)]
    pub locations: usize,
    #[arg(long, default_value_t = 6)]
    pub per_location: usize,
    #[arg(long, default_value_t = 32)]
    pub size: u32,
    #[arg(long, default_value_t = 42)]
    pub seed: u64,
    /// Output directory; receives the images and `manifest.txt`.
    #[arg(long)]
    pub out: PathBuf,
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(1) } else { ExitCode::SUCCESS };
        }
    };
    if let Some(n) = cli.threads {
        if let Err(e) = rayon::ThreadPoolBuilder::new().num_threads(n).build_global() {
            eprintln!("error: {e}");
            return ExitCode::from(1);
        }
    }
    let command = match (cli.command, cli.replay) {
        (Some(c), _) => c,
        (None, Some(path)) => match commands::read_config(&path) {
            Ok(c) => c,
            Err(e) => {
                eprintln!("error: {e:#}");
                return ExitCode::from(1);
            }
        },
        (None, None) => {
            eprintln!("error: a subcommand or --replay is required");
            return ExitCode::from(1);
        }
    };
    match commands::run(command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(2)
        }
    }
}
