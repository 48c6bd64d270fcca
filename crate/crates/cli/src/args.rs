use std::path::PathBuf;

use clap::{Args, Parser, Subcommand};
use nriqa_core::attack::{DEFAULT_GAMMA, DEFAULT_ITERATIONS};
use nriqa_core::quality::training::DEFAULT_SEED;
use nriqa_core::study::DEFAULT_REPETITIONS;
use nriqa_core::{AscentNorm, MeasureKind, ModelKind};
use serde::Serialize;

#[derive(Debug, Parser)]
#[command(name = "nriqa", version, about = "Perceptually imperceptible counterexamples for no-reference IQA models")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Sweep λ and write a candidate set.
    Attack(AttackArgs),
    /// Ascend the quality score alone.
    Enhance(EnhanceArgs),
    /// Transfer matrix over candidate sets with selected counterexamples.
    Evaluate(EvaluateArgs),
    /// Serve the yes-no study API.
    Serve(ServeArgs),
    /// Fit the logistic mapping of raw scores to a 0-10 scale.
    Calibrate(CalibrateArgs),
    /// Retrain the shipped weights from scratch.
    GenWeights(GenWeightsArgs),
    /// Write synthetically distorted images with proxy opinion scores.
    Synth(SynthArgs),
    /// Screen a candidate set with a simulated observer.
    Simulate(SimulateArgs),
    /// Select a counterexample from a recorded study session.
    Select(SelectArgs),
}

#[derive(Debug, Args, Serialize)]
pub struct AttackArgs {
    #[arg(long)]
    pub image: PathBuf,
    #[arg(long)]
    pub model: ModelKind,
    #[arg(long)]
    pub measure: MeasureKind,
    /// Comma-separated multipliers; defaults to 32 log-spaced values over [1e-3, 1e3].
    #[arg(long, value_delimiter = ',')]
    pub lambdas: Vec<f64>,
    #[arg(long, default_value_t = DEFAULT_GAMMA)]
    pub gamma: f64,
    #[arg(long, default_value_t = DEFAULT_ITERATIONS)]
    pub iters: usize,
    /// Defaults to the measure's natural norm.
    #[arg(long)]
    pub norm: Option<AscentNorm>,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Quality to push away from; defaults to the model's score of the image.
    #[arg(long)]
    pub target: Option<f64>,
    /// Use the raw model output in the objective instead of the calibrated score.
    #[arg(long)]
    pub raw: bool,
    #[serde(skip)]
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args, Serialize)]
pub struct EnhanceArgs {
    #[arg(long)]
    pub image: PathBuf,
    #[arg(long)]
    pub model: ModelKind,
    #[arg(long, default_value_t = DEFAULT_ITERATIONS)]
    pub iters: usize,
    #[arg(long, default_value_t = DEFAULT_GAMMA)]
    pub gamma: f64,
    #[arg(long, default_value_t = AscentNorm::Linf)]
    pub norm: AscentNorm,
    /// Amplification of the residual map.
    #[arg(long, default_value_t = 10.0)]
    pub gain: f64,
    #[serde(skip)]
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args, Serialize)]
pub struct EvaluateArgs {
    /// Candidate-set directories (repeatable).
    #[arg(long = "set", required = true)]
    pub sets: Vec<PathBuf>,
    /// Models to score with; defaults to all shipped models.
    #[arg(long = "model", value_delimiter = ',')]
    pub models: Vec<ModelKind>,
    /// Tab-separated `image<TAB>score` lines, paths relative to the file.
    #[arg(long)]
    pub proxy_mos: PathBuf,
    #[arg(long, default_value_t = 10.0)]
    pub gain: f64,
    #[serde(skip)]
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args, Serialize)]
pub struct ServeArgs {
    /// Candidate-set directories to expose (repeatable).
    #[arg(long = "set")]
    pub sets: Vec<PathBuf>,
    #[arg(long, default_value = "127.0.0.1")]
    pub host: String,
    #[arg(long, default_value_t = 8080)]
    pub port: u16,
    #[arg(long, default_value_t = DEFAULT_REPETITIONS)]
    pub repetitions: usize,
    /// State directory holding the session log.
    #[serde(skip)]
    #[arg(long, default_value = "study")]
    pub out: PathBuf,
}

#[derive(Debug, Args, Serialize)]
pub struct CalibrateArgs {
    #[arg(long)]
    pub model: ModelKind,
    /// Raw scores, one per line; when absent the images in the targets file are scored.
    #[arg(long)]
    pub raw_scores: Option<PathBuf>,
    /// Targets, the last field of each line.
    #[arg(long)]
    pub proxy_mos: PathBuf,
    #[serde(skip)]
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args, Serialize)]
pub struct GenWeightsArgs {
    #[arg(long, default_value_t = DEFAULT_SEED)]
    pub seed: u64,
    #[serde(skip)]
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args, Serialize)]
pub struct SynthArgs {
    #[arg(long, default_value_t = 12)]
    pub count: usize,
    #[arg(long, default_value_t = 64)]
    pub size: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[serde(skip)]
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args, Serialize)]
pub struct SimulateArgs {
    #[arg(long)]
    pub set: PathBuf,
    /// Visibility threshold on the set's own distance; defaults to the
    /// smallest candidate distance, so at least one candidate passes.
    #[arg(long)]
    pub tau: Option<f64>,
    /// Probability of flipping each answer.
    #[arg(long, default_value_t = 0.0)]
    pub eta: f64,
    #[arg(long, default_value_t = DEFAULT_REPETITIONS)]
    pub repetitions: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
}

#[derive(Debug, Args, Serialize)]
pub struct SelectArgs {
    #[arg(long)]
    pub set: PathBuf,
    /// Session log written by `serve`.
    #[arg(long)]
    pub log: PathBuf,
    #[arg(long)]
    pub session: String,
}
