mod commands;
mod run_config;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::{Deserialize, Serialize};
use swinq::engine::{Kernel, Precision};
use swinq::quant::CalibrationMethod;

pub const OUT_ENV: &str = "SWINQ_OUT";

#[derive(Debug, Parser)]
#[command(name = "swinq", version, about = "Train, quantize and benchmark shifted-window vision transformers")]
pub struct Cli {
    #[command(flatten)]
    pub global: Global,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Clone, Args, Serialize, Deserialize)]
pub struct Global {
    /// Run directory holding every artifact
    #[arg(long, global = true, env = OUT_ENV, default_value = "swinq-run")]
    pub out: PathBuf,
    #[arg(long, global = true, default_value_t = 0)]
    pub seed: u64,
    /// Worker threads for data loading, training and evaluation
    #[arg(long, global = true, default_value_t = 1)]
    pub threads: usize,
    /// Resolved configuration of an earlier run (its run.json); flags win
    #[arg(long, global = true)]
    #[serde(skip)]
    pub config: Option<PathBuf>,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Write a separable synthetic image corpus
    SynthData(SynthArgs),
    /// Index a class-per-directory corpus and assign the 70/20/10 split
    Split(SplitArgs),
    /// Train a model on the split manifest
    Train(TrainArgs),
    /// Compute activation quantization parameters
    Calibrate(CalibrateArgs),
    /// Commit the trained model to a precision mode
    BuildEngine(EngineArgs),
    /// Score an engine on the test split
    Evaluate(EvaluateArgs),
    /// Measure single-image latency of an engine
    Bench(BenchArgs),
    /// Combine evaluate and bench results into report.csv / report.md
    Report(ReportArgs),
    /// Build, evaluate and time every method and emit one report
    Ablate(AblateArgs),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Preset {
    Micro,
    Tiny,
    SwinT,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum PreprocessKind {
    Synthetic,
    Imagenet,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum KernelArg {
    Integer,
    FakeQuant,
}

impl From<KernelArg> for Kernel {
    fn from(k: KernelArg) -> Self {
        match k {
            KernelArg::Integer => Kernel::Integer,
            KernelArg::FakeQuant => Kernel::FakeQuant,
        }
    }
}

#[derive(Debug, Clone, Args, Serialize, Deserialize)]
pub struct SynthArgs {
    #[arg(long, default_value_t = 4)]
    pub classes: usize,
    #[arg(long, default_value_t = 500)]
    pub per_class: usize,
    /// Image side in pixels
    #[arg(long, default_value_t = 32)]
    pub size: usize,
    /// Corpus directory (default: <out>/data)
    #[arg(long)]
    pub data: Option<PathBuf>,
}

#[derive(Debug, Clone, Args, Serialize, Deserialize)]
pub struct SplitArgs {
    /// Corpus root (default: <out>/data)
    #[arg(long)]
    pub data: Option<PathBuf>,
}

#[derive(Debug, Clone, Args, Serialize, Deserialize)]
pub struct ModelArgs {
    #[arg(long, value_enum, default_value_t = Preset::Tiny)]
    pub model: Preset,
    /// ModelConfig JSON overriding --model
    #[arg(long)]
    pub model_config: Option<PathBuf>,
    #[arg(long, value_enum, default_value_t = PreprocessKind::Synthetic)]
    pub preprocess: PreprocessKind,
}

#[derive(Debug, Clone, Args, Serialize, Deserialize)]
pub struct TrainArgs {
    #[command(flatten)]
    #[serde(flatten)]
    pub model: ModelArgs,
    #[arg(long, default_value_t = 10)]
    pub epochs: usize,
    #[arg(long, default_value_t = 32)]
    pub batch_size: usize,
    #[arg(long, default_value_t = 1e-3)]
    pub lr: f32,
}

#[derive(Debug, Clone, Args, Serialize, Deserialize)]
pub struct CalibrateArgs {
    #[arg(long)]
    pub method: CalibrationMethod,
    #[arg(long, value_enum, default_value_t = PreprocessKind::Synthetic)]
    pub preprocess: PreprocessKind,
}

#[derive(Debug, Clone, Args, Serialize, Deserialize)]
pub struct EngineArgs {
    #[arg(long)]
    pub precision: Precision,
    /// Calibration method (int8 only)
    #[arg(long)]
    pub method: Option<CalibrationMethod>,
    #[arg(long, value_enum, default_value_t = PreprocessKind::Synthetic)]
    pub preprocess: PreprocessKind,
}

#[derive(Debug, Clone, Args, Serialize, Deserialize)]
pub struct EvaluateArgs {
    #[command(flatten)]
    #[serde(flatten)]
    pub engine: EngineArgs,
    #[arg(long, value_enum, default_value_t = KernelArg::Integer)]
    pub kernel: KernelArg,
}

#[derive(Debug, Clone, Args, Serialize, Deserialize)]
pub struct BenchArgs {
    #[command(flatten)]
    #[serde(flatten)]
    pub engine: EngineArgs,
    #[arg(long, value_enum, default_value_t = KernelArg::Integer)]
    pub kernel: KernelArg,
    #[arg(long, default_value_t = swinq::bench::DEFAULT_WARMUP)]
    pub warmup: usize,
    #[arg(long, default_value_t = swinq::bench::DEFAULT_ITERS)]
    pub iters: usize,
}

#[derive(Debug, Clone, Args, Serialize, Deserialize)]
pub struct ReportArgs {
    /// Dataset label for the report rows
    #[arg(long, default_value = "synthetic")]
    pub dataset: String,
}

#[derive(Debug, Clone, Args, Serialize, Deserialize)]
pub struct AblateArgs {
    #[arg(long, default_value = "synthetic")]
    pub dataset: String,
    #[arg(long, value_enum, default_value_t = PreprocessKind::Synthetic)]
    pub preprocess: PreprocessKind,
    #[arg(long, default_value_t = swinq::bench::DEFAULT_WARMUP)]
    pub warmup: usize,
    #[arg(long, default_value_t = swinq::bench::DEFAULT_ITERS)]
    pub iters: usize,
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info"))
        .format_timestamp(None)
        .init();
    let argv: Vec<String> = std::env::args().collect();
    let cli = match run_config::parse(&argv) {
        Ok(c) => c,
        Err(run_config::ParseError::Clap(e)) => e.exit(),
        Err(run_config::ParseError::Config(msg)) => {
            eprintln!("error: {msg}");
            return ExitCode::from(2);
        }
    };
    match commands::dispatch(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) if e.is::<commands::UsageError>() => {
            eprintln!("error: {e}\n\nFor more information, try '--help'.");
            ExitCode::from(2)
        }
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(1)
        }
    }
}
