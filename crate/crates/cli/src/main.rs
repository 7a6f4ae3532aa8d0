//! `viewfuse` command-line tool.
//!
//! Exit codes: 0 success, 1 configuration or input error, 2 verification
//! failure (a gradient check or evaluation threshold was not met).

mod commands;
mod manifest;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};

#[derive(Parser, Debug)]
#[command(name = "viewfuse", version, about = "Multi-view label fusion and consistency training for RGB-D sequences")]
pub struct Cli {
    /// Worker threads; 0 picks one per core.
    #[arg(long, global = true, default_value_t = 0)]
    pub threads: usize,
    /// Seed for every random choice. Scene specs carry their own unless this is given.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Overwrite existing outputs.
    #[arg(long, global = true)]
    pub force: bool,
    /// Only log warnings and errors.
    #[arg(short, long, global = true)]
    pub quiet: bool,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Render a scene from a JSON spec, or the domain-shift benchmark.
    Synth(SynthArgs),
    /// Inverse-warp one frame's prediction into another frame.
    Warp(WarpArgs),
    /// Fuse per-frame probability maps into pseudo-labels.
    Fuse(FuseArgs),
    /// Pseudo-labels for a sequence from a toy model or PMAP files.
    Pseudolabel(PseudolabelArgs),
    /// Per-frame probability maps and labels from a toy model.
    Predict(PredictArgs),
    /// Train the linear toy segmenter.
    TrainToy(TrainToyArgs),
    /// Segmentation metrics of predicted labels against ground truth.
    Eval(EvalArgs),
    /// Depth RMS error of predicted depth maps.
    DepthEval(DepthEvalArgs),
    /// Compare analytic loss gradients with finite differences.
    Gradcheck(GradcheckArgs),
}

#[derive(Clone, Copy, Debug, ValueEnum)]
pub enum BenchmarkKind {
    DomainShift,
}

#[derive(Args, Debug)]
#[command(group = clap::ArgGroup::new("source").required(true).args(["spec", "benchmark"]))]
pub struct SynthArgs {
    /// JSON scene spec.
    #[arg(long)]
    pub spec: Option<PathBuf>,
    #[arg(long, value_enum)]
    pub benchmark: Option<BenchmarkKind>,
    /// Output scene directory (benchmark: parent of source/, target/, target_gt/, eval/).
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Args, Debug, Clone)]
pub struct FusionArgs {
    /// Frame step of the neighbor scan.
    #[arg(long, default_value_t = viewfuse::fusion::DEFAULT_STRIDE)]
    pub stride: usize,
    /// Minimum covisibility for a neighbor.
    #[arg(long, default_value_t = viewfuse::fusion::DEFAULT_MIN_COVIS)]
    pub min_covis: f64,
    #[arg(long, default_value_t = viewfuse::fusion::DEFAULT_MAX_NEIGHBORS)]
    pub max_neighbors: usize,
    /// Leave the target's own prediction out of the merge.
    #[arg(long)]
    pub no_self: bool,
    /// Depth disagreement (meters) beyond which a pixel is occluded.
    #[arg(long, default_value_t = viewfuse::warp::DEFAULT_OCCLUSION_THRESHOLD)]
    pub occl_threshold: f64,
    /// Boundary mask radius in pixels; default scales with image width.
    #[arg(long)]
    pub boundary_radius: Option<usize>,
}

#[derive(Args, Debug)]
pub struct WarpArgs {
    #[arg(long)]
    pub scene: PathBuf,
    /// Scene holding the target frame, when it differs from --scene.
    #[arg(long)]
    pub target_scene: Option<PathBuf>,
    /// Source frame index.
    #[arg(long)]
    pub source: usize,
    /// Target frame index.
    #[arg(long)]
    pub target: usize,
    /// Source PMAP; one-hot ground-truth labels when omitted.
    #[arg(long)]
    pub probs: Option<PathBuf>,
    #[arg(long, default_value_t = viewfuse::warp::DEFAULT_OCCLUSION_THRESHOLD)]
    pub occl_threshold: f64,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Args, Debug)]
pub struct FuseArgs {
    #[arg(long)]
    pub scene: PathBuf,
    /// Directory of `%06d.pmap` files, one per frame.
    #[arg(long)]
    pub probs_dir: PathBuf,
    #[command(flatten)]
    pub fusion: FusionArgs,
    #[arg(long)]
    pub out_labels: PathBuf,
    #[arg(long)]
    pub out_probs: Option<PathBuf>,
}

#[derive(Args, Debug)]
#[command(group = clap::ArgGroup::new("predictions").required(true).args(["probs_dir", "model"]))]
pub struct PseudolabelArgs {
    #[arg(long)]
    pub scene: PathBuf,
    #[arg(long)]
    pub probs_dir: Option<PathBuf>,
    /// Toy model file.
    #[arg(long)]
    pub model: Option<PathBuf>,
    #[command(flatten)]
    pub fusion: FusionArgs,
    /// Receives label/, probs/ and mask/.
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Args, Debug)]
pub struct PredictArgs {
    #[arg(long)]
    pub scene: PathBuf,
    #[arg(long)]
    pub model: PathBuf,
    /// Receives probs/ and label/.
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Args, Debug)]
pub struct TrainToyArgs {
    /// Labeled scene directory.
    #[arg(long)]
    pub labeled: PathBuf,
    /// Unlabeled target scene directory.
    #[arg(long)]
    pub target: PathBuf,
    /// Weight of the consistency term; 0 trains the supervised baseline.
    #[arg(long, default_value_t = viewfuse::losses::DEFAULT_LAMBDA)]
    pub lambda: f64,
    #[arg(long, default_value_t = viewfuse::toytrain::DEFAULT_ITERATIONS)]
    pub iters: usize,
    #[arg(long, default_value_t = viewfuse::toytrain::DEFAULT_LEARNING_RATE)]
    pub lr: f64,
    #[arg(long, default_value_t = viewfuse::toytrain::DEFAULT_SNAPSHOT_PERIOD)]
    pub snapshot_period: usize,
    /// Supervised-only iterations before the consistency term starts.
    #[arg(long, default_value_t = viewfuse::toytrain::DEFAULT_WARMUP)]
    pub warmup: usize,
    /// Do not mirror labeled frames.
    #[arg(long)]
    pub no_mirror: bool,
    #[command(flatten)]
    pub fusion: FusionArgs,
    #[arg(long)]
    pub out_model: PathBuf,
    /// Per-iteration loss CSV.
    #[arg(long)]
    pub log: Option<PathBuf>,
}

#[derive(Args, Debug)]
pub struct EvalArgs {
    /// Label PNGs, or a scene directory with label/.
    #[arg(long)]
    pub gt: PathBuf,
    /// Label PNGs, or a directory with label/.
    #[arg(long)]
    pub pred: PathBuf,
    /// Label-space size; defaults to classes.txt next to the labels, else 37.
    #[arg(long)]
    pub classes: Option<usize>,
    #[arg(long)]
    pub csv: Option<PathBuf>,
    /// Exit 2 when mIoU is below this value.
    #[arg(long)]
    pub min_miou: Option<f64>,
}

#[derive(Args, Debug)]
pub struct DepthEvalArgs {
    /// Depth PNGs, or a scene directory with depth/.
    #[arg(long)]
    pub gt: PathBuf,
    #[arg(long)]
    pub pred: PathBuf,
    /// Exit 2 when the RMS error exceeds this value (meters).
    #[arg(long)]
    pub max_rms: Option<f64>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum TermArg {
    Wce,
    Cons,
    Depth,
    Photo,
    PhotoDepth,
    All,
}

#[derive(Args, Debug)]
pub struct GradcheckArgs {
    #[arg(long, value_enum, default_value_t = TermArg::All)]
    pub term: TermArg,
    #[arg(long, default_value_t = viewfuse::gradchecks::GRADCHECK_PROBES)]
    pub probes: usize,
}

/// A check ran and failed; maps to exit code 2.
#[derive(Debug)]
pub struct VerificationFailure(pub String);

impl std::fmt::Display for VerificationFailure {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for VerificationFailure {}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return match e.kind() {
                clap::error::ErrorKind::DisplayHelp | clap::error::ErrorKind::DisplayVersion => ExitCode::SUCCESS,
                _ => ExitCode::from(1),
            };
        }
    };
    let level = if cli.quiet { "warn" } else { "info" };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level))
        .format_timestamp(None)
        .init();
    if let Err(e) = rayon::ThreadPoolBuilder::new().num_threads(cli.threads).build_global() {
        eprintln!("error: --threads {}: {e}", cli.threads);
        return ExitCode::from(1);
    }
    match commands::run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            if e.downcast_ref::<VerificationFailure>().is_some() {
                ExitCode::from(2)
            } else {
                ExitCode::from(1)
            }
        }
    }
}
