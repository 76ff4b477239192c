mod commands;
mod config;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, CommandFactory, Parser, Subcommand, ValueEnum};
use posematch::evalkit::{BenchMode, Level, RefineMode};

#[derive(Parser, Debug)]
#[command(name = "posematch", version, about = "Rotation- and scale-aware template matching")]
pub struct Cli {
    /// Seed for every random draw.
    #[arg(long, global = true, default_value_t = 0)]
    pub seed: u64,
    /// JSON file of flag values; command-line flags take precedence.
    #[arg(long, global = true, value_name = "FILE")]
    pub config: Option<PathBuf>,
    /// More log output (repeatable).
    #[arg(short, long, global = true, action = clap::ArgAction::Count)]
    pub verbose: u8,
    /// Only log errors.
    #[arg(short, long, global = true)]
    pub quiet: bool,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Write a procedural source-image corpus and its manifest.
    MakeCorpus(MakeCorpusArgs),
    /// Generate training pairs with labels from a corpus.
    SynthData(SynthDataArgs),
    /// Train a model.
    Train(TrainArgs),
    /// Locate a template in an image.
    Match(MatchArgs),
    /// Run a matcher over a synthetic benchmark and report accuracy.
    Bench(BenchArgs),
    /// Refine predictions produced by another matcher.
    RefineExternal(RefineExternalArgs),
}

pub fn parse_size(s: &str) -> Result<(usize, usize), String> {
    let parse = |t: &str| t.trim().parse::<usize>().map_err(|_| format!("bad size {s:?}; expected WxH or N"));
    let (w, h) = match s.split_once(['x', 'X']) {
        Some((w, h)) => (parse(w)?, parse(h)?),
        None => {
            let n = parse(s)?;
            (n, n)
        }
    };
    if w == 0 || h == 0 {
        return Err(format!("size {s:?} has a zero side"));
    }
    Ok((w, h))
}

fn parse_template_size(s: &str) -> Result<(usize, usize), String> {
    let (w, h) = parse_size(s)?;
    if !posematch::synth::is_valid_size(w) || !posematch::synth::is_valid_size(h) {
        return Err(format!("template sides must be 8n+4 (e.g. 20, 28, 36, 44), got {w}x{h}"));
    }
    Ok((w, h))
}

#[derive(Args, Debug)]
pub struct MakeCorpusArgs {
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value_t = 20)]
    pub count: usize,
    /// Side length of each square image.
    #[arg(long, default_value_t = 320)]
    pub size: usize,
}

#[derive(Args, Debug)]
pub struct SynthDataArgs {
    #[arg(long)]
    pub manifest: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value = "S1")]
    pub level: Level,
    #[arg(long, default_value_t = 100)]
    pub count: usize,
    #[arg(long, default_value = "36x36", value_parser = parse_template_size)]
    pub template_size: (usize, usize),
    #[arg(long, default_value = "128x128", value_parser = parse_size)]
    pub search_size: (usize, usize),
    /// Rotations are drawn from [-max-angle, max-angle] degrees.
    #[arg(long, default_value_t = 180.0)]
    pub max_angle: f64,
}

#[derive(Args, Debug)]
#[command(group(clap::ArgGroup::new("source").required(true).args(["data", "manifest"])))]
pub struct TrainArgs {
    /// Directory written by `synth-data`.
    #[arg(long)]
    pub data: Option<PathBuf>,
    /// Source-image manifest; pairs are generated on the fly.
    #[arg(long)]
    pub manifest: Option<PathBuf>,
    /// Final weights file.
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value_t = 2000)]
    pub steps: usize,
    #[arg(long, default_value_t = 8)]
    pub batch: usize,
    #[arg(long, default_value_t = 1e-3)]
    pub lr: f64,
    #[arg(long, default_value = "S1")]
    pub level: Level,
    #[arg(long, default_value = "36x36", value_parser = parse_template_size)]
    pub template_size: (usize, usize),
    #[arg(long, default_value = "128x128", value_parser = parse_size)]
    pub search_size: (usize, usize),
    #[arg(long, default_value_t = 180.0)]
    pub max_angle: f64,
    /// Training log (JSONL); defaults to the weights path with `.log.jsonl`.
    #[arg(long)]
    pub log: Option<PathBuf>,
    #[arg(long, default_value_t = 0)]
    pub checkpoint_every: usize,
    /// Defaults to the weights path with `.ckpt`.
    #[arg(long)]
    pub checkpoint_dir: Option<PathBuf>,
    /// Checkpoint to continue from.
    #[arg(long)]
    pub resume: Option<PathBuf>,
}

#[derive(Args, Debug, Clone)]
pub struct RefineArgs {
    /// Refinement angle step (degrees).
    #[arg(long, default_value_t = 1.0)]
    pub refine_step: f64,
    /// Refinement half-range (degrees).
    #[arg(long, default_value_t = 20.0)]
    pub refine_radius: f64,
    /// Minimum masked cosine for accepting a refined pose.
    #[arg(long, default_value_t = 0.9)]
    pub accept_thresh: f64,
}

impl RefineArgs {
    pub fn config(&self) -> posematch::refine::RefineConfig {
        posematch::refine::RefineConfig {
            step: self.refine_step,
            radius: self.refine_radius,
            accept_thresh: self.accept_thresh,
        }
    }
}

#[derive(Args, Debug)]
pub struct MatchArgs {
    #[arg(long)]
    pub weights: PathBuf,
    #[arg(long)]
    pub template: PathBuf,
    #[arg(long)]
    pub search: PathBuf,
    /// Refine the angle of each detection.
    #[arg(long)]
    pub refine: bool,
    /// Report every instance instead of the single best.
    #[arg(long)]
    pub multi: bool,
    /// Write the search image with predicted footprints drawn on it.
    #[arg(long)]
    pub overlay: Option<PathBuf>,
    #[arg(long, default_value_t = 0.5)]
    pub score_thresh: f64,
    #[arg(long, default_value_t = 0.3)]
    pub nms_iou: f64,
    #[arg(long, default_value_t = 32)]
    pub max_det: usize,
    #[command(flatten)]
    pub refine_args: RefineArgs,
}

#[derive(ValueEnum, Clone, Copy, Debug, PartialEq, Eq)]
pub enum BenchMethod {
    Ncc,
    Model,
    #[value(name = "model+refine")]
    ModelRefine,
}

#[derive(Args, Debug)]
pub struct BenchArgs {
    #[arg(long, value_enum)]
    pub method: BenchMethod,
    #[arg(long, default_value = "S1")]
    pub level: Level,
    #[arg(long, default_value_t = 100)]
    pub count: usize,
    /// CSV report; Markdown, JSONL records and timings are written beside it.
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long)]
    pub manifest: PathBuf,
    #[arg(long, default_value = "paste")]
    pub mode: BenchMode,
    #[arg(long, default_value = "36x36", value_parser = parse_template_size)]
    pub template_size: (usize, usize),
    #[arg(long, default_value = "320x320", value_parser = parse_size)]
    pub search_size: (usize, usize),
    /// Required for the model methods.
    #[arg(long)]
    pub weights: Option<PathBuf>,
    /// NCC grid angle step (degrees).
    #[arg(long, default_value_t = 2.0)]
    pub angle_step: f64,
    /// NCC grid scale step.
    #[arg(long, default_value_t = 0.1)]
    pub scale_step: f64,
    /// Timed runs per sample; the median is reported.
    #[arg(long, default_value_t = 1)]
    pub repeats: usize,
    /// Write a prediction overlay PNG for the first N samples.
    #[arg(long, default_value_t = 0)]
    pub overlays: usize,
    #[command(flatten)]
    pub refine_args: RefineArgs,
}

#[derive(Args, Debug)]
pub struct RefineExternalArgs {
    /// JSONL of predictions: `{"image", "x", "y", "theta_deg", "sx", "sy", "score"}`.
    #[arg(long)]
    pub pred: PathBuf,
    /// Template for lines without their own `template` field.
    #[arg(long)]
    pub template: Option<PathBuf>,
    /// Directory that `image` (and per-line `template`) paths are relative to.
    #[arg(long)]
    pub search_dir: PathBuf,
    #[arg(long, default_value = "angle")]
    pub mode: RefineMode,
    /// Output JSONL; stdout when omitted.
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Position mode search radius (pixels).
    #[arg(long, default_value_t = 3)]
    pub radius_px: usize,
    #[command(flatten)]
    pub refine_args: RefineArgs,
}

/// An error that should exit with the usage status.
#[derive(Debug)]
pub struct UsageError(pub String);

impl std::fmt::Display for UsageError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for UsageError {}

fn main() -> ExitCode {
    let subs: Vec<String> = Cli::command()
        .get_subcommands()
        .map(|c| c.get_name().to_string())
        .collect();
    let argv = match config::expand(std::env::args_os().collect(), &subs) {
        Ok(a) => a,
        Err(e) => {
            eprintln!("error: {e:#}");
            return ExitCode::from(2);
        }
    };
    let cli = match Cli::try_parse_from(argv) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(e.exit_code() as u8);
        }
    };
    let level = match (cli.quiet, cli.verbose) {
        (true, _) => "error",
        (false, 0) => "info",
        (false, 1) => "debug",
        _ => "trace",
    };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level))
        .format_timestamp(None)
        .init();
    match commands::run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            if e.is::<UsageError>() {
                ExitCode::from(2)
            } else {
                ExitCode::from(1)
            }
        }
    }
}
