mod commands;
mod config;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use otpe_core::Error;

pub const OUTPUT_ROOT_ENV: &str = "OTPE_OUTPUT_ROOT";

#[derive(Parser, Debug)]
#[command(name = "otpe", version, about = "Online gradient approximations for spiking networks")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Write a seeded Randman spike raster plus a JSON sidecar.
    Generate(GenerateArgs),
    /// Train one model and log per-minibatch metrics.
    Train(RunArgs),
    /// Cosine of each algorithm's gradient against BPTT along the BPTT trajectory.
    Compare(RunArgs),
    /// Loss surface on the plane through three checkpoints.
    Landscape(LandscapeArgs),
}

#[derive(ValueEnum, Clone, Copy, Debug, PartialEq, Eq)]
pub enum GenKind {
    TRandman,
    RRandman,
}

#[derive(Args, Debug)]
pub struct GenerateArgs {
    #[arg(long, value_enum, default_value = "t-randman")]
    pub kind: GenKind,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, default_value_t = 1000)]
    pub examples: usize,
    /// Batch index the examples are drawn from.
    #[arg(long, default_value_t = 0)]
    pub batch_index: u64,
    /// Raster path; defaults to `<output root>/<kind>-seed<seed>.raster`.
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[arg(long, default_value_t = 3)]
    pub dim: usize,
    #[arg(long, default_value_t = 10)]
    pub classes: usize,
    #[arg(long, default_value_t = 50)]
    pub neurons: usize,
    #[arg(long, default_value_t = 1.0, allow_negative_numbers = true)]
    pub alpha: f64,
    #[arg(long, default_value_t = 4)]
    pub harmonics: usize,
    #[arg(long, default_value_t = 50)]
    pub time_steps: usize,
    /// Per-neuron spike cap for rate encoding (defaults to T).
    #[arg(long)]
    pub max_spikes: Option<usize>,
}

#[derive(Args, Debug, Default)]
pub struct RunArgs {
    /// Flat `key = value` config file.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Extra `key=value` assignment, applied after the file.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    pub overrides: Vec<String>,
    #[arg(long)]
    pub algorithm: Option<String>,
    #[arg(long)]
    pub mode: Option<String>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub minibatches: Option<usize>,
    #[arg(long)]
    pub batch_size: Option<usize>,
    #[arg(long)]
    pub lr: Option<f64>,
    /// Comma-separated algorithm list for `compare`.
    #[arg(long)]
    pub algorithms: Option<String>,
    #[arg(long)]
    pub output: Option<PathBuf>,
    /// Print persistent trace elements per layer before training.
    #[arg(long)]
    pub report_memory: bool,
    /// Compute BPTT side by side on every offline minibatch.
    #[arg(long)]
    pub cosine_vs_bptt: bool,
}

#[derive(Args, Debug)]
pub struct LandscapeArgs {
    /// Config describing the evaluation data and loss.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long = "set", value_name = "KEY=VALUE")]
    pub overrides: Vec<String>,
    /// Checkpoint at the origin of the plane.
    #[arg(long)]
    pub center: PathBuf,
    /// Checkpoint defining the first direction.
    #[arg(long)]
    pub delta: PathBuf,
    /// Checkpoint defining the second direction.
    #[arg(long)]
    pub nu: PathBuf,
    /// Checkpoints to project onto the plane.
    #[arg(long, num_args = 1..)]
    pub trajectory: Vec<PathBuf>,
    /// Points per axis.
    #[arg(long, default_value_t = 21)]
    pub grid: usize,
    #[arg(long, default_value = "-0.5:1.5", allow_hyphen_values = true)]
    pub alpha_range: String,
    #[arg(long, default_value = "-0.5:1.5", allow_hyphen_values = true)]
    pub beta_range: String,
    #[arg(long)]
    pub output: Option<PathBuf>,
}

/// 2 config, 3 data format, 4 resource cap, 1 anything else.
fn exit_code(err: &anyhow::Error) -> u8 {
    for cause in err.chain() {
        if let Some(e) = cause.downcast_ref::<Error>() {
            return match e {
                Error::Config(_) | Error::Dimension { .. } | Error::Io { .. } => 2,
                Error::Format { .. } | Error::Label { .. } => 3,
                Error::ResourceCap { .. } => 4,
            };
        }
    }
    1
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Generate(a) => commands::generate(&a),
        Command::Train(a) => commands::train(&a),
        Command::Compare(a) => commands::compare(&a),
        Command::Landscape(a) => commands::landscape(&a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}
