//! `crashseq`: synthetic data, optical flow, features, training, evaluation
//! and reporting for video-level accident detection.

// `!(x > 0.0)` is used on purpose so NaN fails validation.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

mod commands;
mod config;
mod data;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};

use config::{ModalityChoice, Overrides};

#[derive(Debug, Parser)]
#[command(name = "crashseq", version, about = "Video-level traffic accident detection with motion cues")]
struct Cli {
    /// TOML run config; flags override its values.
    #[arg(long, global = true, value_name = "FILE")]
    config: Option<PathBuf>,

    /// Seed for every random stream.
    #[arg(long, global = true)]
    seed: Option<u64>,

    /// Worker threads (default: all cores; 1 = single-threaded).
    #[arg(long, global = true, env = "CRASHSEQ_THREADS")]
    threads: Option<usize>,

    #[command(subcommand)]
    cmd: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Generate a labelled synthetic dataset with a manifest.
    Synth(SynthArgs),
    /// Compute optical flow for one frame directory.
    Flow(FlowArgs),
    /// Extract per-frame feature files for every clip of a manifest.
    Features(FeaturesArgs),
    /// Train a model per modality.
    Train(TrainArgs),
    /// Score checkpoints on a manifest split.
    Eval(EvalArgs),
    /// Export frame-wise attention profiles.
    Attention(AttentionArgs),
    /// Query a vision-language model endpoint as a baseline.
    VlmCompare(VlmArgs),
    /// Render metrics files as a comparison table.
    Report(ReportArgs),
}

#[derive(Debug, Args)]
struct SynthArgs {
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    per_class: Option<usize>,
    #[arg(long)]
    frames: Option<usize>,
}

#[derive(Debug, Args)]
struct FlowArgs {
    #[arg(long)]
    frames_dir: PathBuf,
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    alpha: Option<f32>,
    #[arg(long)]
    iters: Option<usize>,
    #[arg(long)]
    levels: Option<usize>,
    /// Also write flow-colour PNGs.
    #[arg(long)]
    render: bool,
}

#[derive(Debug, Args)]
struct FeaturesArgs {
    #[arg(long)]
    manifest: PathBuf,
    #[arg(long)]
    modality: Option<ModalityChoice>,
    /// Existing feature files to reuse instead of recomputing.
    #[arg(long)]
    features_dir: Option<PathBuf>,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Debug, Args)]
struct TrainArgs {
    #[arg(long)]
    manifest: PathBuf,
    #[arg(long)]
    modality: Option<ModalityChoice>,
    #[arg(long)]
    out: PathBuf,
    /// Read features from AVFX files here instead of the frames.
    #[arg(long)]
    features_dir: Option<PathBuf>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    batch: Option<usize>,
    #[arg(long)]
    d_model: Option<usize>,
    #[arg(long)]
    layers: Option<usize>,
    #[arg(long)]
    heads: Option<usize>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum SplitArg {
    Train,
    Test,
    All,
}

#[derive(Debug, Args)]
struct EvalArgs {
    /// Checkpoint file, or a training output directory.
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    manifest: PathBuf,
    #[arg(long, value_enum, default_value = "test")]
    split: SplitArg,
    #[arg(long)]
    modality: Option<ModalityChoice>,
    /// Per-clip predictions as JSON lines.
    #[arg(long)]
    dump_predictions: Option<PathBuf>,
    /// Metrics as JSON, readable by `report`.
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long)]
    features_dir: Option<PathBuf>,
}

#[derive(Debug, Args)]
struct AttentionArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    manifest: PathBuf,
    /// Clip ids; defaults to every clip of `--split`.
    #[arg(long)]
    clip: Vec<String>,
    #[arg(long, value_enum, default_value = "test")]
    split: SplitArg,
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    features_dir: Option<PathBuf>,
}

#[derive(Debug, Args)]
struct VlmArgs {
    #[arg(long)]
    manifest: PathBuf,
    #[arg(long)]
    endpoint: String,
    #[arg(long)]
    model: String,
    /// Metrics as JSON, readable by `report`.
    #[arg(long)]
    out: PathBuf,
    #[arg(long, value_enum, default_value = "test")]
    split: SplitArg,
    #[arg(long)]
    dump_predictions: Option<PathBuf>,
    /// Requests in flight at once.
    #[arg(long, default_value_t = 4)]
    concurrency: usize,
    /// Per-request timeout in seconds.
    #[arg(long, default_value_t = 60.0)]
    timeout: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum ReportFormat {
    Text,
    Csv,
}

#[derive(Debug, Args)]
struct ReportArgs {
    /// Metrics JSON files from `eval` / `vlm-compare`, or report CSVs.
    #[arg(long = "in", required = true, num_args = 1..)]
    inputs: Vec<PathBuf>,
    #[arg(long, value_enum, default_value = "text")]
    format: ReportFormat,
    /// Write here instead of standard output.
    #[arg(long)]
    out: Option<PathBuf>,
}

/// Failure classes mapped to exit codes.
#[derive(Debug)]
pub enum Failure {
    /// Bad flags or configuration: exit 1.
    Usage(String),
    /// Anything that went wrong while running: exit 2.
    Runtime(crashseq_core::Error),
}

impl From<crashseq_core::Error> for Failure {
    fn from(e: crashseq_core::Error) -> Self {
        Failure::Runtime(e)
    }
}

fn overrides(cli: &Cli) -> Overrides {
    let mut ov = Overrides { seed: cli.seed, threads: cli.threads, ..Overrides::default() };
    match &cli.cmd {
        Command::Synth(a) => {
            ov.per_class = a.per_class;
            ov.frames = a.frames;
        }
        Command::Flow(a) => {
            ov.alpha = a.alpha;
            ov.iters = a.iters;
            ov.levels = a.levels;
        }
        Command::Features(a) => ov.modality = a.modality,
        Command::Train(a) => {
            ov.modality = a.modality;
            ov.epochs = a.epochs;
            ov.lr = a.lr;
            ov.batch = a.batch;
            ov.d_model = a.d_model;
            ov.layers = a.layers;
            ov.heads = a.heads;
        }
        Command::Eval(a) => ov.modality = a.modality,
        Command::Attention(_) | Command::VlmCompare(_) | Command::Report(_) => {}
    }
    ov
}

fn run(cli: Cli) -> Result<(), Failure> {
    let file = match &cli.config {
        Some(p) => config::read_file(p).map_err(Failure::Usage)?,
        None => config::FileConfig::default(),
    };
    let cfg = config::resolve(file, &overrides(&cli)).map_err(Failure::Usage)?;
    if let Some(n) = cfg.threads {
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .map_err(|e| Failure::Usage(format!("cannot set up {n} threads: {e}")))?;
    }
    log::info!("resolved config:\n{}", cfg.echo());
    match cli.cmd {
        Command::Synth(a) => commands::synth(&cfg, &a.out),
        Command::Flow(a) => commands::flow(&cfg, &a.frames_dir, &a.out, a.render),
        Command::Features(a) => commands::features(&cfg, &a.manifest, a.features_dir.as_deref(), &a.out),
        Command::Train(a) => commands::train(&cfg, &a.manifest, a.features_dir.as_deref(), &a.out),
        Command::Eval(a) => commands::eval(
            &cfg,
            &commands::EvalJob {
                checkpoint: a.checkpoint,
                manifest: a.manifest,
                split: a.split,
                modality: a.modality,
                dump_predictions: a.dump_predictions,
                out: a.out,
                features_dir: a.features_dir,
            },
        ),
        Command::Attention(a) => {
            commands::attention(&a.checkpoint, &a.manifest, &a.clip, a.split, &a.out, a.features_dir.as_deref())
        }
        Command::VlmCompare(a) => commands::vlm_compare(
            &cfg,
            &commands::VlmJob {
                manifest: a.manifest,
                endpoint: a.endpoint,
                model: a.model,
                out: a.out,
                split: a.split,
                dump_predictions: a.dump_predictions,
                concurrency: a.concurrency,
                timeout: a.timeout,
            },
        ),
        Command::Report(a) => commands::report(&a.inputs, a.format, a.out.as_deref()),
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info"))
        .format_timestamp_millis()
        .init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(1) } else { ExitCode::SUCCESS };
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Usage(msg)) => {
            eprintln!("error: {msg}");
            eprintln!("Run `crashseq --help` for usage.");
            ExitCode::from(1)
        }
        Err(Failure::Runtime(e)) => {
            eprintln!("error: {e}");
            ExitCode::from(2)
        }
    }
}
