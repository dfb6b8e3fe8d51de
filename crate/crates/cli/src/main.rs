mod commands;
mod output;
mod report;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};

use crate::output::Failure;

#[derive(Parser, Debug)]
#[command(name = "ddcl", version, about = "Distortion-disentangled contrastive pretraining and evaluation")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Pretrain an encoder; writes checkpoints, training logs and the resolved config.
    Pretrain(PretrainArgs),
    /// Run an evaluation protocol against a checkpoint; writes CSV and JSON tables.
    Eval(EvalArgs),
    /// Render plots from a directory of runs and evaluation results.
    Report(ReportArgs),
    /// Generate the procedural shapes dataset as an image directory.
    Synth(SynthArgs),
    /// Print a checkpoint summary as JSON.
    Inspect(InspectArgs),
}

#[derive(Clone, Copy, Debug, ValueEnum)]
pub enum TrainModeArg {
    Symmetric,
    Asymmetric,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum EvalMode {
    Linear,
    Knn,
    Robustness,
    Brick,
    Transfer,
    Attention,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
pub enum PartArg {
    Full,
    Dir,
    Dvr,
}

#[derive(clap::Args, Debug)]
pub struct PretrainArgs {
    #[arg(long)]
    pub config: PathBuf,
    /// Output directory; overrides `output_dir` in the config.
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long, value_enum)]
    pub mode: Option<TrainModeArg>,
    /// Continue from an epoch checkpoint of the same run.
    #[arg(long)]
    pub resume: Option<PathBuf>,
}

#[derive(clap::Args, Debug)]
pub struct EvalArgs {
    #[arg(long)]
    pub config: PathBuf,
    /// Defaults to `final.ckpt` under the config's output directory.
    #[arg(long)]
    pub checkpoint: Option<PathBuf>,
    #[arg(long, value_enum)]
    pub mode: EvalMode,
    /// Restrict to one part of the representation.
    #[arg(long, value_enum)]
    pub part: Option<PartArg>,
    /// Distortion suites for `robustness` (comma separated); defaults to all four.
    #[arg(long, value_delimiter = ',')]
    pub suite: Vec<String>,
    /// Defaults to `eval/` under the config's output directory.
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Number of test images rendered by `attention`.
    #[arg(long, default_value_t = 4)]
    pub count: usize,
}

#[derive(clap::Args, Debug)]
pub struct ReportArgs {
    /// Directory searched recursively for training logs and result files.
    pub results: PathBuf,
    /// Defaults to `report/` inside the results directory.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(clap::Args, Debug)]
pub struct SynthArgs {
    /// Take the dataset parameters from this config's synth source.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub n_per_class: Option<usize>,
    #[arg(long)]
    pub size: Option<usize>,
}

#[derive(clap::Args, Debug)]
pub struct InspectArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
}

fn configure_threads() -> Result<(), Failure> {
    let Ok(raw) = std::env::var("DDCL_THREADS") else {
        return Ok(());
    };
    let n: usize = raw
        .trim()
        .parse()
        .ok()
        .filter(|&n| n > 0)
        .ok_or_else(|| Failure::validation(format!("DDCL_THREADS must be a positive integer, got '{raw}'")))?;
    rayon::ThreadPoolBuilder::new()
        .num_threads(n)
        .build_global()
        .map_err(|e| Failure::runtime(format!("cannot size the worker pool: {e}")))
}

fn run(cli: Cli) -> Result<(), Failure> {
    configure_threads()?;
    match cli.command {
        Command::Pretrain(a) => commands::pretrain(&a),
        Command::Eval(a) => commands::eval(&a),
        Command::Report(a) => report::run(&a),
        Command::Synth(a) => commands::synth(&a),
        Command::Inspect(a) => commands::inspect(&a),
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("error: {}", f.message);
            ExitCode::from(f.code)
        }
    }
}
