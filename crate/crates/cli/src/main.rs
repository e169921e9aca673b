use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

mod commands;

const WORKERS_ENV: &str = "OVRESCORE_WORKERS";

#[derive(Parser)]
#[command(name = "ovrescore", version, about = "Re-score and re-filter two-stage open-vocabulary detector outputs")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Build a prototype bank from the labeled base-class proposals of a dump.
    Calibrate(CalibrateArgs),
    /// Post-process every image of a dump into detections.
    Run(RunArgs),
    /// Score detections against ground truth.
    Eval(EvalArgs),
    /// Evaluate all eight switch combinations.
    Ablate(AblateArgs),
    /// Generate a synthetic dump and its ground truth.
    Synth(SynthArgs),
    /// Measure the time the enabled switches add per image.
    Bench(BenchArgs),
    /// Compare a baseline and an aggregated eval report.
    Report(ReportArgs),
}

#[derive(Args)]
struct CalibrateArgs {
    #[arg(long)]
    dump: PathBuf,
    /// random:N or topk:K
    #[arg(long, default_value = "random:300")]
    strategy: String,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Build against the raw rather than L2-normalized text embeddings.
    #[arg(long)]
    no_normalize: bool,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args, Default, Clone)]
struct PipelineArgs {
    /// coco or lvis
    #[arg(long)]
    profile: Option<String>,
    /// TOML or JSON file with pipeline settings.
    #[arg(long)]
    config: Option<PathBuf>,
    /// dense or sparse
    #[arg(long)]
    mode: Option<String>,
    #[arg(long)]
    k: Option<usize>,
    #[arg(long)]
    alpha: Option<f64>,
    #[arg(long)]
    gamma: Option<f64>,
    #[arg(long)]
    temperature: Option<f64>,
    #[arg(long)]
    proposal_nms: Option<f64>,
    #[arg(long)]
    class_nms: Option<f64>,
    #[arg(long)]
    keep_max: Option<usize>,
    #[arg(long)]
    detections_per_image: Option<usize>,
    #[arg(long)]
    score_threshold: Option<f64>,
    #[arg(long)]
    no_arp_lq: bool,
    #[arg(long)]
    no_aoc_vs: bool,
    #[arg(long)]
    no_aoc_lq: bool,
    #[arg(long)]
    no_normalize: bool,
    /// Add a constant to novel similarities instead of prototype aggregation.
    #[arg(long)]
    trivial_offset: Option<f64>,
}

#[derive(Args)]
struct RunArgs {
    #[arg(long)]
    dump: PathBuf,
    #[arg(long)]
    bank: Option<PathBuf>,
    #[command(flatten)]
    pipeline: PipelineArgs,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct EvalArgs {
    #[arg(long)]
    dets: PathBuf,
    #[arg(long)]
    gt: PathBuf,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct AblateArgs {
    #[arg(long)]
    dump: PathBuf,
    #[arg(long)]
    bank: PathBuf,
    #[arg(long)]
    gt: PathBuf,
    #[command(flatten)]
    pipeline: PipelineArgs,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct SynthArgs {
    /// TOML or JSON scene spec; defaults apply to missing fields.
    #[arg(long)]
    spec: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long, default_value_t = 200)]
    images: usize,
    #[arg(long)]
    out: PathBuf,
    /// Ground-truth output; defaults to the dump path with `.gt.json` appended.
    #[arg(long)]
    gt: Option<PathBuf>,
}

#[derive(Args)]
struct BenchArgs {
    #[arg(long)]
    dump: PathBuf,
    #[arg(long)]
    bank: PathBuf,
    #[arg(long, default_value_t = 5)]
    reps: usize,
    /// Benchmark at most this many images.
    #[arg(long)]
    images: Option<usize>,
    #[command(flatten)]
    pipeline: PipelineArgs,
    /// Also write the summary here; it is always printed.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct ReportArgs {
    /// Baseline report first, aggregated second.
    #[arg(long = "eval", num_args = 1, required = true)]
    evals: Vec<PathBuf>,
    #[arg(long)]
    out: Option<PathBuf>,
}

/// Failure of a command: a usage problem or a library error.
enum Failure {
    Usage(String),
    Lib(ovrescore::Error),
}

impl From<ovrescore::Error> for Failure {
    fn from(e: ovrescore::Error) -> Self {
        Failure::Lib(e)
    }
}

fn one_line(s: &str) -> String {
    s.split_whitespace().collect::<Vec<_>>().join(" ")
}

fn report_failure(f: Failure) -> ExitCode {
    let (kind, message, code) = match f {
        Failure::Usage(m) => ("usage", m, 2),
        Failure::Lib(e) => (e.kind(), e.to_string(), 1),
    };
    let line = serde_json::json!({ "error": kind, "message": one_line(&message) });
    eprintln!("{line}");
    ExitCode::from(code)
}

fn configure_workers() -> Result<(), Failure> {
    let Ok(value) = std::env::var(WORKERS_ENV) else { return Ok(()) };
    let n: usize = value
        .trim()
        .parse()
        .ok()
        .filter(|&n| n > 0)
        .ok_or_else(|| Failure::Usage(format!("{WORKERS_ENV} must be a positive integer, got '{value}'")))?;
    rayon::ThreadPoolBuilder::new()
        .num_threads(n)
        .build_global()
        .map_err(|e| Failure::Usage(format!("cannot configure {n} workers: {e}")))
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) if !e.use_stderr() => {
            let _ = e.print();
            return ExitCode::SUCCESS;
        }
        Err(e) => {
            let rendered = e.to_string();
            let first = rendered.lines().next().unwrap_or("invalid arguments");
            return report_failure(Failure::Usage(first.trim_start_matches("error: ").to_string()));
        }
    };
    let result = configure_workers().and_then(|_| match cli.command {
        Command::Calibrate(a) => commands::calibrate(a),
        Command::Run(a) => commands::run(a),
        Command::Eval(a) => commands::eval(a),
        Command::Ablate(a) => commands::ablate(a),
        Command::Synth(a) => commands::synth(a),
        Command::Bench(a) => commands::bench(a),
        Command::Report(a) => commands::report(a),
    });
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => report_failure(f),
    }
}
