mod commands;
mod manifest;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};

use saod::{Error, PredictorError};

#[derive(Parser)]
#[command(name = "saod", version, about = "Dense self-training for sparsely annotated oriented object detection")]
struct Cli {
    /// Worker threads (0 = all cores).
    #[arg(long, global = true, default_value_t = 0)]
    jobs: usize,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic corpus.
    Gen(GenArgs),
    /// Thin out the annotations of a corpus.
    Sparsify(SparsifyArgs),
    /// Ask a category predictor which classes each scene contains.
    Prompt(PromptArgs),
    /// Train a detector (burn-in, then teacher/student distillation).
    Train(TrainArgs),
    /// Score a checkpoint on a corpus.
    Eval(EvalArgs),
    /// Run every training strategy and tabulate the results.
    Compare(CompareArgs),
    /// Export the teacher's pseudo-label selections as text and PGM images.
    Selmap(SelmapArgs),
}

#[derive(Args)]
pub struct GenArgs {
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Overrides the scene count of the config.
    #[arg(long)]
    pub scenes: Option<usize>,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum SamplingArg {
    PerScene,
    Pooled,
}

#[derive(Args)]
pub struct SparsifyArgs {
    #[arg(long)]
    pub corpus: PathBuf,
    #[arg(long)]
    pub rate: f64,
    #[arg(long)]
    pub at_least_one_per_class: bool,
    #[arg(long, value_enum, default_value_t = SamplingArg::PerScene)]
    pub sampling: SamplingArg,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Output annotation file.
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Args)]
pub struct PromptArgs {
    #[arg(long)]
    pub corpus: PathBuf,
    /// Use the seeded mock predictor.
    #[arg(long, conflicts_with = "endpoint", required_unless_present = "endpoint")]
    pub mock: bool,
    /// Per-scene accuracy of the mock predictor.
    #[arg(long, default_value_t = 0.9)]
    pub accuracy: f64,
    /// Remote predictor URL; the token is read from SAOD_PREDICTOR_TOKEN.
    #[arg(long)]
    pub endpoint: Option<String>,
    /// Also report statistics after refinement with these annotations.
    #[arg(long)]
    pub annotations: Option<PathBuf>,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Output prompt file.
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Args)]
pub struct TrainArgs {
    /// Training config (TOML, keys of the training configuration).
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub corpus: PathBuf,
    #[arg(long)]
    pub annotations: PathBuf,
    #[arg(long)]
    pub prompts: Option<PathBuf>,
    /// Held-out corpus for evaluation snapshots.
    #[arg(long)]
    pub eval_corpus: Option<PathBuf>,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Iterations between state checkpoints.
    #[arg(long, default_value_t = 500)]
    pub checkpoint_every: usize,
    /// Continue the run in --out from its last checkpoint.
    #[arg(long)]
    pub resume: bool,
    /// Run directory.
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum ReportFormat {
    Text,
    Csv,
    Json,
}

#[derive(Args)]
pub struct EvalArgs {
    /// Model or training-state checkpoint.
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long)]
    pub corpus: PathBuf,
    #[arg(long, default_value_t = 0.05)]
    pub score_thr: f64,
    #[arg(long, default_value_t = 0.3)]
    pub nms_thr: f64,
    #[arg(long, value_enum, default_value_t = ReportFormat::Text)]
    pub format: ReportFormat,
    /// Write the report here instead of stdout.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Args)]
pub struct CompareArgs {
    /// Experiment config (TOML).
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Replaces the seed list of the config with this single seed.
    #[arg(long)]
    pub seed: Option<u64>,
    /// Directory for report.txt, runs.csv and report.json.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Args)]
pub struct SelmapArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long)]
    pub corpus: PathBuf,
    /// Comma-separated scene ids.
    #[arg(long, value_delimiter = ',', required = true)]
    pub scenes: Vec<u64>,
    /// Training config supplying the assignment settings.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Annotations; scenes with kept instances use the sparse assignment.
    #[arg(long)]
    pub annotations: Option<PathBuf>,
    /// Prompts for predictor mode.
    #[arg(long)]
    pub prompts: Option<PathBuf>,
    /// Pixel size of one grid cell in the PGM output.
    #[arg(long, default_value_t = 8)]
    pub scale: usize,
    #[arg(long)]
    pub out: PathBuf,
}

/// Failure carrying the process exit code.
pub struct Failure {
    pub code: u8,
    pub message: String,
}

impl Failure {
    pub fn validation(message: impl Into<String>) -> Self {
        Self {
            code: 2,
            message: message.into(),
        }
    }
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        let code = match &e {
            Error::InvalidArgument(_) | Error::Format { .. } => 2,
            Error::Predictor(PredictorError::Config(_)) => 2,
            Error::Predictor(_) => 3,
            Error::Numerical(_) => 4,
            Error::Io { .. } => 1,
        };
        Self {
            code,
            message: e.to_string(),
        }
    }
}

pub type CliResult<T = ()> = Result<T, Failure>;

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    if cli.jobs > 0 {
        if let Err(e) = rayon::ThreadPoolBuilder::new().num_threads(cli.jobs).build_global() {
            eprintln!("error: {e}");
            return ExitCode::from(1);
        }
    }
    let result = match cli.command {
        Command::Gen(a) => commands::gen(a),
        Command::Sparsify(a) => commands::sparsify(a),
        Command::Prompt(a) => commands::prompt(a, cli.jobs),
        Command::Train(a) => commands::train(a),
        Command::Eval(a) => commands::eval(a),
        Command::Compare(a) => commands::compare(a),
        Command::Selmap(a) => commands::selmap(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("error: {}", f.message);
            ExitCode::from(f.code)
        }
    }
}
