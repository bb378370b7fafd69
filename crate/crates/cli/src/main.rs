use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use vik_core::Error;

mod commands;
mod phi;

/// Train, evaluate, certify and inspect ViK backbones.
#[derive(Parser, Debug)]
#[command(name = "vik", version, about)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Train a model and write metrics.csv plus checkpoints.
    Train(TrainArgs),
    /// Top-1 accuracy of a checkpoint on a dataset split.
    Eval(EvalArgs),
    /// Compare analytic gradients with central finite differences.
    Gradcheck(GradcheckArgs),
    /// Analytic cost report and mixer linearity table.
    Flops(FlopsArgs),
    /// Export learned KAN edge functions as CSV curves.
    DumpPhi(DumpPhiArgs),
}

#[derive(Args, Debug)]
pub struct TrainArgs {
    #[arg(long)]
    pub config: PathBuf,
    /// `synth` or `cifar10:DIR`.
    #[arg(long, default_value = "synth")]
    pub data: String,
    #[arg(long, default_value_t = 30)]
    pub epochs: usize,
    /// Overrides the config seed; drives weights, synthetic data and shuffling.
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value_t = 64)]
    pub batch_size: usize,
    /// Peak learning rate.
    #[arg(long, default_value_t = 1e-3)]
    pub lr: f64,
    /// Synthetic training images per class.
    #[arg(long, default_value_t = 500)]
    pub per_class: usize,
}

#[derive(Args, Debug)]
pub struct EvalArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long, default_value = "synth")]
    pub data: String,
    #[arg(long, value_enum, default_value_t = SplitArg::Val)]
    pub split: SplitArg,
    /// Synthetic data seed; defaults to the seed stored in the checkpoint.
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long, default_value_t = 500)]
    pub per_class: usize,
    /// Config the checkpoint must have been trained with.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Load even if the stored config differs from `--config`.
    #[arg(long)]
    pub allow_config_mismatch: bool,
}

#[derive(clap::ValueEnum, Clone, Copy, Debug)]
pub enum SplitArg {
    Train,
    Val,
}

#[derive(Args, Debug)]
pub struct GradcheckArgs {
    #[arg(long)]
    pub config: PathBuf,
    /// `all` or `layer NAME`.
    #[arg(long, num_args = 1..=2, value_names = ["SCOPE", "NAME"], default_values_t = ["all".to_string()])]
    pub scope: Vec<String>,
    /// Relative step: ε = eps·max(1, |θ|).
    #[arg(long, default_value_t = 1e-5)]
    pub eps: f64,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Corrupts the analytic gradient of one layer (checker self-test).
    #[arg(long, hide = true)]
    pub inject_fault: Option<String>,
}

#[derive(Args, Debug)]
pub struct FlopsArgs {
    #[arg(long)]
    pub config: PathBuf,
    /// Square token-grid sides for the linearity probe.
    #[arg(long, default_value = "56,112,224")]
    pub resolutions: String,
    /// Add the N²·C attention-map cost for comparison.
    #[arg(long)]
    pub attention_reference: bool,
    /// Also count multiplies by executing the forward pass.
    #[arg(long)]
    pub instrumented: bool,
    /// Directory for flops.csv, linearity.csv and instrumented.csv.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Args, Debug)]
pub struct DumpPhiArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    /// Stage number, 1 to 4.
    #[arg(long)]
    pub stage: usize,
    /// Block index within the stage, from 0.
    #[arg(long, default_value_t = 0)]
    pub block: usize,
    /// KAN channel group, from 0.
    #[arg(long, default_value_t = 0)]
    pub group: usize,
    /// `i,j` pairs separated by `;`, or `sample:K`.
    #[arg(long, default_value = "sample:32")]
    pub edges: String,
    /// `lo,hi,n`.
    #[arg(long, default_value = "-2,2,101", allow_hyphen_values = true)]
    pub grid: String,
    /// Seed for `sample:K`.
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long)]
    pub out: PathBuf,
}

/// An error tagged with the part of the system that raised it.
#[derive(Debug)]
pub struct Failure {
    pub module: &'static str,
    pub error: Error,
}

pub trait Context<T> {
    fn during(self, module: &'static str) -> Result<T, Failure>;
}

impl<T> Context<T> for Result<T, Error> {
    fn during(self, module: &'static str) -> Result<T, Failure> {
        self.map_err(|error| Failure { module, error })
    }
}

/// Stable exit classes: 2 config, 3 data, 4 numerical.
fn exit_code(e: &Error) -> u8 {
    match e {
        Error::Config(_) | Error::Dimension(_) | Error::Shape(_) | Error::Parameter(_) | Error::Usage(_) => 2,
        Error::Data(_) | Error::Format(_) | Error::Io { .. } => 3,
        Error::Numerical(_) => 4,
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info"))
        .format_timestamp(None)
        .init();
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Train(a) => commands::train(&a),
        Command::Eval(a) => commands::eval(&a),
        Command::Gradcheck(a) => commands::gradcheck(&a),
        Command::Flops(a) => commands::flops(&a),
        Command::DumpPhi(a) => phi::dump_phi(&a),
    };
    match result {
        Ok(code) => ExitCode::from(code),
        Err(f) => {
            eprintln!("vik: {}: {}", f.module, f.error);
            ExitCode::from(exit_code(&f.error))
        }
    }
}
