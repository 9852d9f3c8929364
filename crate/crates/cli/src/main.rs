//! `ensemble-vqa`: paraphrase-and-vote visual question answering from the
//! command line.

mod commands;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

#[derive(Debug, Parser)]
#[command(
    name = "ensemble-vqa",
    version,
    about = "Self-ensemble visual question answering runner"
)]
struct Cli {
    /// Log filter, e.g. `info` or `ensemble_vqa=debug` (RUST_LOG also works)
    #[arg(long, global = true, value_name = "FILTER")]
    log: Option<String>,

    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Run the pipeline over a dataset and write a ledger
    Run(RunArgs),
    /// Score a finished run against its dataset
    Eval(EvalArgs),
    /// Run the dataset once per n and write an accuracy table
    Sweep(SweepArgs),
    /// Vote-success simulator: closed form and optional Monte-Carlo
    Sim(SimArgs),
    /// Print the question-generation prompt and parsed paraphrases for one question
    GenQuestions(GenQuestionsArgs),
    /// Inspect or clear the response cache
    Cache(CacheArgs),
}

#[derive(Debug, Clone, Args)]
struct DatasetArgs {
    /// Dataset file (A-OKVQA JSON or canonical JSONL)
    #[arg(long, value_name = "PATH")]
    dataset: PathBuf,

    /// Dataset format [default: inferred, .json is aokvqa, anything else jsonl]
    #[arg(long, value_name = "aokvqa|jsonl")]
    format: Option<String>,

    /// Directory image references resolve against [default: the dataset's directory]
    #[arg(long, value_name = "DIR")]
    images: Option<PathBuf>,

    /// A-OKVQA image file name pattern
    #[arg(long, value_name = "PATTERN", default_value = ensemble_vqa::dataset::DEFAULT_AOKVQA_PATTERN)]
    image_pattern: String,

    /// Dataset tag recorded on JSONL samples
    #[arg(long, value_name = "TAG", default_value = "custom")]
    tag: String,
}

#[derive(Debug, Clone, Args)]
struct BackendArgs {
    /// Backend configuration file
    #[arg(long, value_name = "PATH", default_value = "ensemble-vqa.toml")]
    config: PathBuf,

    /// Response cache directory; enables caching [default: $ENSEMBLE_VQA_CACHE_DIR, then [run].cache_dir, then .ensemble-vqa-cache]
    #[arg(long, value_name = "DIR")]
    cache_dir: Option<PathBuf>,

    /// Disable the response cache
    #[arg(long)]
    no_cache: bool,
}

#[derive(Debug, Clone, Args)]
struct PipelineArgs {
    #[command(flatten)]
    backend: BackendArgs,

    #[command(flatten)]
    data: DatasetArgs,

    /// Global seed for the random fallback [default: [run].seed, else 0]
    #[arg(long)]
    seed: Option<u64>,

    /// Voter: llm asks the SE backend, oracle clusters by normalized equality [default: [run].voter, else llm]
    #[arg(long, value_name = "llm|oracle")]
    voter: Option<String>,

    /// Samples processed concurrently [default: [run].concurrency, else 4]
    #[arg(long, value_name = "N")]
    concurrency: Option<usize>,

    /// Output directory
    #[arg(long, value_name = "DIR")]
    out: PathBuf,

    /// Backend section for question generation [default: [roles].qg, else qg]
    #[arg(long, value_name = "NAME")]
    qg_backend: Option<String>,

    /// Backend section for answering [default: [roles].vlm, else vlm]
    #[arg(long, value_name = "NAME")]
    vlm_backend: Option<String>,

    /// Backend section for the self-ensemble vote [default: [roles].se, else se]
    #[arg(long, value_name = "NAME")]
    se_backend: Option<String>,

    /// Question-generation template file [default: built-in 2-shot template]
    #[arg(long, value_name = "PATH")]
    template: Option<PathBuf>,

    /// Self-ensemble exemplar file [default: built-in exemplars]
    #[arg(long, value_name = "PATH")]
    se_exemplars: Option<PathBuf>,

    /// Use only the first N template exemplars [default: all]
    #[arg(long, value_name = "N")]
    shots: Option<usize>,
}

#[derive(Debug, Clone, Args)]
struct RunArgs {
    #[command(flatten)]
    pipeline: PipelineArgs,

    /// Paraphrases per question; 0 is the single-question baseline [default: [run].n, else 2]
    #[arg(long)]
    n: Option<usize>,
}

#[derive(Debug, Clone, Args)]
struct SweepArgs {
    #[command(flatten)]
    pipeline: PipelineArgs,

    /// Comma-separated n values
    #[arg(long, value_name = "LIST", value_delimiter = ',', default_value = "0,1,2,3,4")]
    n_values: Vec<usize>,
}

#[derive(Debug, Clone, Args)]
struct EvalArgs {
    /// Run directory holding ledger.jsonl and manifest.json
    #[arg(long, value_name = "DIR")]
    run: PathBuf,

    #[command(flatten)]
    data: DatasetArgs,

    /// Where report.json goes [default: the run directory]
    #[arg(long, value_name = "DIR")]
    out: Option<PathBuf>,
}

#[derive(Debug, Clone, Args)]
struct SimArgs {
    /// Comma-separated per-answer correctness probabilities
    #[arg(long, value_name = "LIST", value_delimiter = ',', default_value = "0.7")]
    p: Vec<f64>,

    /// Comma-separated answer-set sizes
    #[arg(long, value_name = "LIST", value_delimiter = ',', default_value = "1,3,5,7")]
    k: Vec<usize>,

    /// Wrong-answer model: distinct, or mc:M for M shared choices
    #[arg(long, value_name = "MODE", default_value = "distinct")]
    mode: String,

    /// Monte-Carlo trials per cell; 0 skips the simulation
    #[arg(long, value_name = "N", default_value_t = 0)]
    trials: u64,

    /// Monte-Carlo seed
    #[arg(long, default_value_t = 0)]
    seed: u64,

    /// Write sim.csv into this directory as well as printing it
    #[arg(long, value_name = "DIR")]
    out: Option<PathBuf>,
}

#[derive(Debug, Clone, Args)]
struct GenQuestionsArgs {
    #[command(flatten)]
    backend: BackendArgs,

    /// Backend section to query [default: [roles].qg, else qg]
    #[arg(long = "backend", value_name = "NAME")]
    backend_name: Option<String>,

    /// Original question
    #[arg(long)]
    question: String,

    /// Paraphrases to request
    #[arg(long, default_value_t = 2)]
    n: usize,

    /// Question-generation template file [default: built-in 2-shot template]
    #[arg(long, value_name = "PATH")]
    template: Option<PathBuf>,

    /// Use only the first N template exemplars [default: all]
    #[arg(long, value_name = "N")]
    shots: Option<usize>,
}

#[derive(Debug, Clone, Args)]
struct CacheArgs {
    #[command(subcommand)]
    action: CacheAction,

    /// Configuration file consulted for [run].cache_dir; optional
    #[arg(long, value_name = "PATH", global = true)]
    config: Option<PathBuf>,

    /// Cache directory [default: $ENSEMBLE_VQA_CACHE_DIR, then [run].cache_dir, then .ensemble-vqa-cache]
    #[arg(long, value_name = "DIR", global = true)]
    cache_dir: Option<PathBuf>,
}

#[derive(Debug, Clone, Copy, Subcommand)]
enum CacheAction {
    /// Entry count and total size
    Stats,
    /// Delete every cached response
    Clear,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let filter = cli.log.clone().or_else(|| std::env::var("RUST_LOG").ok());
    env_logger::Builder::new()
        .parse_filters(filter.as_deref().unwrap_or("warn,ensemble_vqa=info"))
        .format_timestamp(None)
        .init();

    let result = match cli.command {
        Command::Run(a) => commands::run(a),
        Command::Eval(a) => commands::eval(a),
        Command::Sweep(a) => commands::sweep(a),
        Command::Sim(a) => commands::sim(a),
        Command::GenQuestions(a) => commands::gen_questions(a),
        Command::Cache(a) => commands::cache(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(commands::Failure::Usage(msg)) => {
            eprintln!("error: {msg}");
            eprintln!("For more information, try '--help'.");
            ExitCode::from(2)
        }
        Err(commands::Failure::Fatal(e)) => {
            eprintln!("error: {e:#}");
            ExitCode::from(1)
        }
    }
}
