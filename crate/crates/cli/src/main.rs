//! `fmmhead`: preprocessing, FMM fitting, autoencoder training, scoring and
//! evaluation of single-lead heartbeats.

mod commands;
mod config;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use fmmhead_core::train::Architecture;
use fmmhead_core::Error;

use crate::config::Config;

#[derive(Debug, Parser)]
#[command(name = "fmmhead", version, about = "FMM heartbeat modelling and anomaly detection")]
struct Cli {
    /// Seed for every random stream; overrides the config file.
    #[arg(long, global = true)]
    seed: Option<u64>,

    /// JSON configuration file.
    #[arg(long, global = true)]
    config: Option<PathBuf>,

    /// Worker threads for parallel fitting; 1 makes every run reproducible.
    #[arg(long, global = true)]
    threads: Option<usize>,

    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum Arch {
    Dense,
    Fmm,
}

impl From<Arch> for Architecture {
    fn from(a: Arch) -> Self {
        match a {
            Arch::Dense => Architecture::DenseAe,
            Arch::Fmm => Architecture::FmmAe,
        }
    }
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Segment raw records into a beats file, or convert the ECG5000 files.
    Preprocess(PreprocessArgs),
    /// Fit FMM coefficients to every beat by direct optimisation.
    Fit(FitArgs),
    /// Regress the FMM head onto reference coefficients.
    Warmup(WarmupArgs),
    /// Train an autoencoder on normal beats.
    Train(TrainArgs),
    /// Write per-beat anomaly scores.
    Score(ScoreArgs),
    /// ROC, AUROC and coefficient correlations.
    Eval(EvalArgs),
    /// Predict FMM coefficients with a trained FMM head.
    Extract(ExtractArgs),
    /// Generate a synthetic beats file and its true coefficients.
    Synth(SynthArgs),
    /// Reconstruction overlay and ROC data for external plotting.
    Plot(PlotArgs),
}

#[derive(Debug, Args)]
#[command(group = clap::ArgGroup::new("source").required(true).args(["record", "ecg5000"]))]
struct PreprocessArgs {
    /// Raw record CSV with a `.json` sidecar; may be repeated.
    #[arg(long)]
    record: Vec<PathBuf>,
    /// Directory holding ECG5000_TRAIN and ECG5000_TEST.
    #[arg(long)]
    ecg5000: Option<PathBuf>,
    /// Label for every beat of the records, overriding the sidecars.
    #[arg(long)]
    label: Option<String>,
    /// Output beats file (records) or directory (ECG5000).
    #[arg(long)]
    out: PathBuf,
}

#[derive(Debug, Args)]
struct FitArgs {
    #[arg(long)]
    beats: PathBuf,
    /// Coefficients JSON-lines output.
    #[arg(long)]
    out: PathBuf,
    /// Per-beat summary CSV (beat_id, r2, rmse, wall_time_ms).
    #[arg(long)]
    summary: Option<PathBuf>,
}

#[derive(Debug, Args)]
struct WarmupArgs {
    #[arg(long)]
    beats: PathBuf,
    /// Reference coefficients, matched to beats by id.
    #[arg(long)]
    coefficients: PathBuf,
    /// Start from this checkpoint instead of a fresh FMM autoencoder.
    #[arg(long)]
    init: Option<PathBuf>,
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    report: Option<PathBuf>,
}

#[derive(Debug, Args)]
struct TrainArgs {
    #[arg(long)]
    beats: PathBuf,
    /// Start from this checkpoint, e.g. the warm-up result.
    #[arg(long, conflicts_with = "arch")]
    init: Option<PathBuf>,
    #[arg(long, value_enum)]
    arch: Option<Arch>,
    /// Drop beats not labelled normal instead of rejecting the file.
    #[arg(long)]
    normal_only: bool,
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    report: Option<PathBuf>,
}

#[derive(Debug, Args)]
struct ScoreArgs {
    #[arg(long)]
    model: PathBuf,
    #[arg(long)]
    beats: PathBuf,
    /// Scores CSV (beat_id, label, score).
    #[arg(long)]
    out: PathBuf,
}

#[derive(Debug, Args)]
#[command(group = clap::ArgGroup::new("coeffs").multiple(true).requires_all(["predicted", "reference"]))]
struct EvalArgs {
    #[arg(long)]
    scores: PathBuf,
    /// Predicted coefficients for the correlation table.
    #[arg(long, group = "coeffs")]
    predicted: Option<PathBuf>,
    /// Reference coefficients for the correlation table.
    #[arg(long, group = "coeffs")]
    reference: Option<PathBuf>,
    /// Directory for roc.csv, summary.json and correlations.csv.
    #[arg(long)]
    out_dir: PathBuf,
}

#[derive(Debug, Args)]
struct ExtractArgs {
    #[arg(long)]
    model: PathBuf,
    #[arg(long)]
    beats: PathBuf,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Debug, Args)]
struct SynthArgs {
    #[arg(long)]
    n_beats: Option<usize>,
    /// missing-P, wide-QRS or st-shift.
    #[arg(long)]
    anomaly: Option<String>,
    #[arg(long)]
    anomaly_fraction: Option<f64>,
    /// Split tag; different tags give independent beats.
    #[arg(long, default_value = "train")]
    split: String,
    #[arg(long)]
    out: PathBuf,
    /// True coefficients JSON-lines output.
    #[arg(long)]
    truth: Option<PathBuf>,
}

#[derive(Debug, Args)]
#[command(group = clap::ArgGroup::new("fit_source").required(true).args(["model", "coefficients"]))]
struct PlotArgs {
    #[arg(long)]
    beats: PathBuf,
    #[arg(long)]
    beat_id: String,
    #[arg(long)]
    model: Option<PathBuf>,
    #[arg(long)]
    coefficients: Option<PathBuf>,
    /// Overlay CSV (t, input, reconstruction, wave_P..wave_T).
    #[arg(long)]
    out: PathBuf,
    /// Scores CSV to turn into ROC points.
    #[arg(long, requires = "roc_out")]
    scores: Option<PathBuf>,
    #[arg(long)]
    roc_out: Option<PathBuf>,
}

fn exit_code(e: &Error) -> u8 {
    if e.is_validation() {
        1
    } else {
        2
    }
}

fn kind(e: &Error) -> &'static str {
    match e {
        Error::Validation(_) => "validation",
        Error::Structural(_) => "structural",
        Error::Ingest { .. } => "ingest",
        Error::NonFinite { .. } => "non-finite",
        Error::UndefinedMean(_) => "undefined-mean",
        Error::Io(_) => "io",
        Error::Json(_) => "json",
    }
}

fn run(cli: Cli) -> fmmhead_core::Result<()> {
    if let Some(n) = cli.threads {
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .map_err(|e| Error::validation(e.to_string()))?;
    }
    let cfg = Config::load(cli.config.as_deref(), cli.seed)?;
    match cli.command {
        Command::Preprocess(a) => commands::preprocess(&cfg, &a.record, a.ecg5000.as_deref(), a.label.as_deref(), &a.out),
        Command::Fit(a) => commands::fit(&cfg, &a.beats, &a.out, a.summary.as_deref()),
        Command::Warmup(a) => {
            commands::warmup(&cfg, &a.beats, &a.coefficients, a.init.as_deref(), &a.out, a.report.as_deref())
        }
        Command::Train(a) => commands::train(
            &cfg,
            &a.beats,
            a.init.as_deref(),
            a.arch.map(Into::into),
            a.normal_only,
            &a.out,
            a.report.as_deref(),
        ),
        Command::Score(a) => commands::score(&cfg, &a.model, &a.beats, &a.out),
        Command::Eval(a) => commands::eval(&cfg, &a.scores, a.predicted.as_deref(), a.reference.as_deref(), &a.out_dir),
        Command::Extract(a) => commands::extract(&cfg, &a.model, &a.beats, &a.out),
        Command::Synth(a) => commands::synth(
            &cfg,
            a.n_beats,
            a.anomaly.as_deref(),
            a.anomaly_fraction,
            &a.split,
            &a.out,
            a.truth.as_deref(),
        ),
        Command::Plot(a) => commands::plot(
            &cfg,
            &a.beats,
            &a.beat_id,
            a.model.as_deref(),
            a.coefficients.as_deref(),
            &a.out,
            a.scores.as_deref().zip(a.roc_out.as_deref()),
        ),
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("{}", serde_json::json!({ "error": kind(&e), "message": e.to_string() }));
            ExitCode::from(exit_code(&e))
        }
    }
}
