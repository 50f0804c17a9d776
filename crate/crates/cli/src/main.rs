//! `ictool`: batch front-end for the internal-consistency toolkit.
//!
//! Exit codes: 0 on success, 1 when an input fails validation or a
//! command fails, 2 on usage errors.

mod commands;
mod svg;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};

#[derive(Parser)]
#[command(name = "ictool", version, about = "Logit-lens internal consistency for reasoning paths")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Trace file utilities
    #[command(subcommand)]
    Trace(TraceCmd),
    /// Per-layer p̂ matrix, thresholds and latent predictions
    Lens(LensArgs),
    /// Per-path internal consistency and agreement curves
    Ic(LensArgs),
    /// Compare voting methods, averaged over seeds
    Vote(VoteArgs),
    /// Fit layer weights for weighted internal consistency
    Tune(TuneArgs),
    /// Linear-probe accuracy per reasoning step and layer
    Probe(ProbeArgs),
    /// Attention and FFN value-vector analysis
    Anatomy(AnatomyArgs),
    /// Toy transformer: task generation, training, sampling
    #[command(subcommand)]
    Toy(ToyCmd),
    /// Derived reports
    #[command(subcommand)]
    Report(ReportCmd),
}

#[derive(Subcommand)]
enum TraceCmd {
    /// Check every trace invariant; lists violations on stderr
    Validate { trace: PathBuf },
}

#[derive(Args, Clone)]
pub struct Common {
    /// Input trace (ICT1)
    pub trace: PathBuf,
    /// Output directory
    #[arg(short, long, default_value = "out")]
    pub out: PathBuf,
}

#[derive(Args, Clone)]
pub struct LensOpts {
    /// Thresholds JSON (as written by `lens`); fitted on the input when absent
    #[arg(long)]
    pub thresholds: Option<PathBuf>,
    /// Take the final-layer label from the raw two-token argmax
    #[arg(long)]
    pub raw_final: bool,
}

#[derive(Args)]
pub struct LensArgs {
    #[command(flatten)]
    pub common: Common,
    #[command(flatten)]
    pub lens: LensOpts,
}

#[derive(Clone, Copy, ValueEnum)]
pub enum DeltaAgg {
    Sum,
    Mean,
    Max,
}

#[derive(Args)]
pub struct VoteArgs {
    #[command(flatten)]
    pub common: Common,
    #[command(flatten)]
    pub lens: LensOpts,
    /// Comma-separated sampling seeds
    #[arg(long, value_delimiter = ',', default_value = "0,1,2,3,4,5,6,7,8,9")]
    pub seeds: Vec<u64>,
    /// Paths drawn per question and seed
    #[arg(long, default_value_t = 10)]
    pub votes: usize,
    #[arg(long, value_enum, default_value_t = DeltaAgg::Sum)]
    pub delta: DeltaAgg,
    /// Add an SC+IC (tune) row, tuned on a held-out share of the questions
    #[arg(long)]
    pub tune: bool,
    #[arg(long, default_value_t = 0.5)]
    pub heldout_fraction: f64,
    #[command(flatten)]
    pub tuning: TuningOpts,
    /// Layer weights JSON for an SC+IC (transfer) row
    #[arg(long)]
    pub transfer: Option<PathBuf>,
}

#[derive(Args, Clone, Copy)]
pub struct TuningOpts {
    #[arg(long, default_value_t = 0.01)]
    pub lr: f64,
    #[arg(long, default_value_t = 1000)]
    pub iterations: usize,
    #[arg(long, default_value_t = 500)]
    pub n_heldout: usize,
    /// Pull towards uniform weights
    #[arg(long, default_value_t = 0.0)]
    pub l2: f64,
}

#[derive(Args)]
pub struct TuneArgs {
    #[command(flatten)]
    pub common: Common,
    #[command(flatten)]
    pub lens: LensOpts,
    #[command(flatten)]
    pub tuning: TuningOpts,
    /// Seeds the choice of held-out questions
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Name stored as the weights' source dataset
    #[arg(long, default_value = "heldout")]
    pub source: String,
}

#[derive(Args)]
pub struct ProbeArgs {
    #[command(flatten)]
    pub common: Common,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Draw a separate train/validation split for every cell
    #[arg(long)]
    pub per_cell_split: bool,
}

#[derive(Args)]
pub struct AnatomyArgs {
    #[command(flatten)]
    pub common: Common,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Length of the ranked value-vector list
    #[arg(long, default_value_t = 100)]
    pub top_k: usize,
    /// Rank value vectors within each layer instead of globally
    #[arg(long)]
    pub per_layer: bool,
    /// Tokens listed per vocabulary projection
    #[arg(long, default_value_t = 10)]
    pub vocab_k: usize,
}

#[derive(Subcommand)]
pub enum ToyCmd {
    /// Generate a coin-flip task
    Gen(ToyGenArgs),
    /// Train the toy transformer on a task
    Train(ToyTrainArgs),
    /// Sample reasoning paths and write a trace
    Sample(ToySampleArgs),
}

#[derive(Args)]
pub struct ToyGenArgs {
    #[arg(short, long, default_value = "out")]
    pub out: PathBuf,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, default_value_t = 500)]
    pub questions: usize,
    #[arg(long, default_value_t = 3)]
    pub max_flips: usize,
    /// Output file name inside the output directory
    #[arg(long, default_value = "task.json")]
    pub name: String,
}

#[derive(Args)]
pub struct ToyTrainArgs {
    /// Task JSON from `toy gen`
    #[arg(long)]
    pub task: PathBuf,
    #[arg(short, long, default_value = "out")]
    pub out: PathBuf,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, default_value_t = 2000)]
    pub steps: usize,
    #[arg(long, default_value_t = 1e-3)]
    pub lr: f64,
    #[arg(long, default_value_t = 16)]
    pub batch_size: usize,
    /// Per-step probability of a corrupted face in training rationales
    #[arg(long, default_value_t = 0.2)]
    pub rationale_noise: f64,
    /// Probability that the answer target follows the corrupted rationale
    #[arg(long, default_value_t = 0.7)]
    pub answer_from_rationale: f64,
    #[arg(long, default_value_t = 4)]
    pub layers: usize,
    #[arg(long, default_value_t = 32)]
    pub hidden: usize,
    #[arg(long, default_value_t = 4)]
    pub heads: usize,
    #[arg(long, default_value_t = 64)]
    pub ffn: usize,
    #[arg(long, default_value_t = 64)]
    pub max_seq: usize,
    /// Use the block equation without layer normalization
    #[arg(long)]
    pub no_pre_norm: bool,
    /// Zero every block weight after training (control model)
    #[arg(long)]
    pub zero_blocks: bool,
}

#[derive(Args)]
pub struct ToySampleArgs {
    /// Parameters from `toy train`
    #[arg(long)]
    pub params: PathBuf,
    /// Task JSON whose questions are sampled
    #[arg(long)]
    pub task: PathBuf,
    #[arg(short, long, default_value = "out")]
    pub out: PathBuf,
    /// Use only the first N questions
    #[arg(long)]
    pub questions: Option<usize>,
    #[arg(long, default_value_t = 20)]
    pub paths: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, default_value_t = 0.7)]
    pub temperature: f64,
    #[arg(long, default_value_t = 0.95)]
    pub top_p: f64,
    /// Skip the extra greedy path per question
    #[arg(long)]
    pub no_greedy: bool,
    #[arg(long)]
    pub no_attention: bool,
    #[arg(long)]
    pub no_ffn: bool,
    #[arg(long, default_value = "trace.ict1")]
    pub name: String,
}

#[derive(Subcommand)]
enum ReportCmd {
    /// Accuracy of sampled paths binned by internal consistency
    Calibration(CalibrationArgs),
}

#[derive(Args)]
pub struct CalibrationArgs {
    #[command(flatten)]
    pub common: Common,
    #[command(flatten)]
    pub lens: LensOpts,
    #[arg(long, default_value_t = 10)]
    pub bins: usize,
}

/// An invalid combination of arguments found after parsing.
#[derive(Debug)]
pub struct UsageError(pub String);

impl std::fmt::Display for UsageError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for UsageError {}

fn configure_threads() -> Result<(), UsageError> {
    let Ok(v) = std::env::var("ICTOOL_THREADS") else {
        return Ok(());
    };
    let n: usize = v
        .parse()
        .ok()
        .filter(|&n| n > 0)
        .ok_or_else(|| UsageError(format!("ICTOOL_THREADS must be a positive integer, got {v:?}")))?;
    rayon::ThreadPoolBuilder::new()
        .num_threads(n)
        .build_global()
        .map_err(|e| UsageError(format!("cannot configure {n} threads: {e}")))
}

fn run(cli: Cli) -> anyhow::Result<bool> {
    match cli.command {
        Command::Trace(TraceCmd::Validate { trace }) => commands::validate(&trace),
        Command::Lens(a) => commands::lens(&a).map(|_| true),
        Command::Ic(a) => commands::ic(&a).map(|_| true),
        Command::Vote(a) => commands::vote(&a).map(|_| true),
        Command::Tune(a) => commands::tune(&a).map(|_| true),
        Command::Probe(a) => commands::probe(&a).map(|_| true),
        Command::Anatomy(a) => commands::anatomy(&a).map(|_| true),
        Command::Toy(ToyCmd::Gen(a)) => commands::toy_gen(&a).map(|_| true),
        Command::Toy(ToyCmd::Train(a)) => commands::toy_train(&a).map(|_| true),
        Command::Toy(ToyCmd::Sample(a)) => commands::toy_sample(&a).map(|_| true),
        Command::Report(ReportCmd::Calibration(a)) => commands::calibration(&a).map(|_| true),
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 2 } else { 0 });
        }
    };
    if let Err(e) = configure_threads() {
        eprintln!("error: {e}");
        return ExitCode::from(2);
    }
    match run(cli) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::from(1),
        Err(e) => {
            eprintln!("error: {e:#}");
            if e.downcast_ref::<UsageError>().is_some() {
                ExitCode::from(2)
            } else {
                ExitCode::from(1)
            }
        }
    }
}
