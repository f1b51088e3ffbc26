//! `mvhgnn`: generate data, train, embed, retrieve and score from the shell.
//!
//! Exit codes: 0 on success, 1 on a failed check or a numeric error,
//! 2 on an invalid configuration or argument, 3 on an unreadable or
//! malformed file.

mod commands;
mod config;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use mvhgnn::encoder::Pooling;
use mvhgnn::pipeline::Mode;
use mvhgnn::train::Strategy;
use mvhgnn::{Error, Execution};

#[derive(Parser, Debug)]
#[command(name = "mvhgnn", version, about = "Sketch-to-shape retrieval with a multi-view hierarchical graph encoder")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Write a synthetic dataset (shapes, sketches, prototypes) as MVHF archives.
    GenData(GenDataArgs),
    /// Train a model from a run configuration and write a checkpoint and log.
    Train(TrainArgs),
    /// Embed the items of a shape or sketch archive with a checkpoint.
    Encode(EncodeArgs),
    /// Rank a gallery archive for every query and print the top matches as JSON.
    Retrieve(RetrieveArgs),
    /// Score labelled query embeddings against a labelled gallery.
    Eval(EvalArgs),
    /// Compare analytic gradients with central differences.
    Gradcheck(GradcheckArgs),
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum ExecArg {
    Sequential,
    Parallel,
}

impl From<ExecArg> for Execution {
    fn from(e: ExecArg) -> Self {
        match e {
            ExecArg::Sequential => Execution::Sequential,
            ExecArg::Parallel => Execution::Parallel,
        }
    }
}

#[derive(Args, Debug)]
struct GenDataArgs {
    /// Number of classes.
    #[arg(long, default_value_t = 8)]
    classes: usize,
    /// Shapes per class.
    #[arg(long, default_value_t = 30)]
    per_class: usize,
    /// Sketches per class.
    #[arg(long, default_value_t = 20)]
    sketches_per_class: usize,
    /// Cameras on the ring rig.
    #[arg(long, default_value_t = 12)]
    views: usize,
    /// Width of each view descriptor.
    #[arg(long, default_value_t = 64)]
    feature_dim: usize,
    /// Width of each sketch descriptor.
    #[arg(long, default_value_t = 64)]
    sketch_dim: usize,
    /// Width of the class prototypes.
    #[arg(long, default_value_t = 32)]
    prototype_dim: usize,
    /// Sketch corruption level in [0, 1].
    #[arg(long, default_value_t = 0.05)]
    noise: f64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Output directory.
    #[arg(long)]
    out: PathBuf,
    /// Execution mode (default: parallel when built with it).
    #[arg(long, value_enum)]
    execution: Option<ExecArg>,
}

#[derive(Args, Debug)]
struct TrainArgs {
    /// TOML run configuration; built-in defaults when omitted.
    #[arg(long, env = "MVHGNN_CONFIG")]
    config: Option<PathBuf>,
    /// Dataset directory written by gen-data (overrides `dataset`).
    #[arg(long)]
    data: Option<PathBuf>,
    /// Output directory (overrides `out`).
    #[arg(long)]
    out: Option<PathBuf>,
    /// Split protocol (overrides `split.mode`).
    #[arg(long, value_enum)]
    mode: Option<ModeArg>,
    /// Run only stage 1 or stage 2 of the two-stage strategy.
    #[arg(long)]
    stage: Option<u8>,
    /// Stage-1 checkpoint to continue from with `--stage 2`.
    #[arg(long)]
    init: Option<PathBuf>,
    /// Training strategy (overrides `strategy`).
    #[arg(long, value_enum)]
    strategy: Option<StrategyArg>,
    /// Sets the data, split and training seeds at once.
    #[arg(long)]
    seed: Option<u64>,
    /// Epochs per stage (overrides `train.epochs`).
    #[arg(long)]
    epochs: Option<usize>,
    /// Hierarchy depth (overrides `model.levels`).
    #[arg(long)]
    levels: Option<usize>,
    /// Use only the first N cameras (overrides `model.views`).
    #[arg(long)]
    views: Option<usize>,
    /// Readout pooling (overrides `model.pooling`).
    #[arg(long, value_enum)]
    pooling: Option<PoolingArg>,
    /// Drop the quadruplet term.
    #[arg(long)]
    no_quad: bool,
    /// Drop the classification term.
    #[arg(long)]
    no_cls: bool,
    /// Drop the prototype-alignment term.
    #[arg(long)]
    no_sem: bool,
    /// Execution mode (overrides `execution`).
    #[arg(long, value_enum)]
    execution: Option<ExecArg>,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum ModeArg {
    Category,
    Zeroshot,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum StrategyArg {
    TwoStage,
    OneStage,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum PoolingArg {
    Max,
    Mean,
}

#[derive(Args, Debug)]
struct EncodeArgs {
    /// Model checkpoint written by train.
    #[arg(long)]
    ckpt: PathBuf,
    /// Archive of view-feature or sketch-descriptor items.
    #[arg(long = "in")]
    input: PathBuf,
    /// Output archive of embeddings; labels carry over.
    #[arg(long)]
    out: PathBuf,
    /// Item kind; detected from the item shapes when omitted.
    #[arg(long, value_enum)]
    kind: Option<commands::Kind>,
    /// Execution mode (default: parallel when built with it).
    #[arg(long, value_enum)]
    execution: Option<ExecArg>,
}

#[derive(Args, Debug)]
struct RetrieveArgs {
    /// Query embedding archive.
    #[arg(long)]
    query: PathBuf,
    /// Gallery embedding archive.
    #[arg(long)]
    gallery: PathBuf,
    /// Matches listed per query.
    #[arg(long, default_value_t = 10)]
    top: usize,
    /// Write the JSON here instead of standard output.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct EvalArgs {
    /// Labelled query embedding archive.
    #[arg(long)]
    query: PathBuf,
    /// Labelled gallery embedding archive.
    #[arg(long)]
    gallery: PathBuf,
    /// Write relevant and irrelevant distance histograms as CSV.
    #[arg(long)]
    hist: Option<PathBuf>,
    /// Histogram bins.
    #[arg(long, default_value_t = 20)]
    bins: usize,
    /// Also write the metrics as JSON.
    #[arg(long)]
    json: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct GradcheckArgs {
    /// Which functions to check.
    #[arg(long, value_enum, default_value_t = commands::GradModule::All)]
    module: commands::GradModule,
    /// Random instances per function.
    #[arg(long, default_value_t = 20)]
    seeds: usize,
    /// Execution mode (default: parallel when built with it).
    #[arg(long, value_enum)]
    execution: Option<ExecArg>,
}

/// Maps an error to the documented exit status.
fn exit_status(e: &Error) -> u8 {
    if e.is_file_error() {
        3
    } else if matches!(e, Error::Config(_) | Error::Argument(_)) {
        2
    } else {
        1
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::GenData(a) => commands::gen_data(a),
        Command::Train(a) => commands::train(a),
        Command::Encode(a) => commands::encode(a),
        Command::Retrieve(a) => commands::retrieve(a),
        Command::Eval(a) => commands::eval(a),
        Command::Gradcheck(a) => commands::gradcheck(a),
    };
    match result {
        Ok(commands::Outcome::Success) => ExitCode::SUCCESS,
        Ok(commands::Outcome::CheckFailed) => ExitCode::from(1),
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_status(&e))
        }
    }
}

impl From<ModeArg> for Mode {
    fn from(m: ModeArg) -> Self {
        match m {
            ModeArg::Category => Mode::Category,
            ModeArg::Zeroshot => Mode::ZeroShot,
        }
    }
}

impl From<StrategyArg> for Strategy {
    fn from(s: StrategyArg) -> Self {
        match s {
            StrategyArg::TwoStage => Strategy::TwoStage,
            StrategyArg::OneStage => Strategy::OneStage,
        }
    }
}

impl From<PoolingArg> for Pooling {
    fn from(p: PoolingArg) -> Self {
        match p {
            PoolingArg::Max => Pooling::Max,
            PoolingArg::Mean => Pooling::Mean,
        }
    }
}
