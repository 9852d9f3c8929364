use std::path::{Path, PathBuf};
use std::sync::Arc;

use anyhow::{anyhow, Context};

use ensemble_vqa::config::{Config, Role};
use ensemble_vqa::dataset::{self, DatasetFormat};
use ensemble_vqa::eval::{self, REPORT_FILE};
use ensemble_vqa::gateway::{resolve_cache_dir, ChatBackend, ResponseStore};
use ensemble_vqa::pipeline::{run_dataset, Backends, RunConfig, VoterKind, DEFAULT_SYSTEM_PROMPT};
use ensemble_vqa::qg::{build_qg_prompt, generate_questions, QgTemplate};
use ensemble_vqa::sim::{majority_success_prob, monte_carlo_success, sim_csv, ClusterModel, SimRow, WrongMode};
use ensemble_vqa::voter::{default_se_exemplars, load_se_exemplars};
use ensemble_vqa::Sample;

use crate::{
    BackendArgs, CacheAction, CacheArgs, DatasetArgs, EvalArgs, GenQuestionsArgs, PipelineArgs, RunArgs, SimArgs,
    SweepArgs,
};

pub const SIM_CSV: &str = "sim.csv";

pub enum Failure {
    /// Bad flag values; exit code 2.
    Usage(String),
    Fatal(anyhow::Error),
}

impl<E: Into<anyhow::Error>> From<E> for Failure {
    fn from(e: E) -> Self {
        Failure::Fatal(e.into())
    }
}

type CmdResult = Result<(), Failure>;

fn usage(msg: impl Into<String>) -> Failure {
    Failure::Usage(msg.into())
}

fn load_config(path: &Path) -> Result<Config, Failure> {
    Ok(Config::load(path)?)
}

fn cache_for(args: &BackendArgs, config: &Config) -> Option<Arc<ResponseStore>> {
    // An explicit --cache-dir turns caching back on over `[run].cache = false`.
    if args.no_cache || (config.run.cache == Some(false) && args.cache_dir.is_none()) {
        return None;
    }
    let configured = config.run.cache_dir.as_deref().map(|d| config.resolve(d));
    let dir = resolve_cache_dir(args.cache_dir.as_deref(), configured.as_deref());
    log::debug!("response cache at {}", dir.display());
    Some(Arc::new(ResponseStore::new(dir)))
}

fn gateway(
    config: &Config,
    name: Option<&str>,
    role: Role,
    cache: Option<&Arc<ResponseStore>>,
) -> Result<Arc<dyn ChatBackend>, Failure> {
    let name = name.unwrap_or_else(|| config.role_backend(role));
    let gw = config
        .gateway(name, role, cache)
        .with_context(|| format!("{} backend", role.as_str()))?;
    Ok(Arc::new(gw))
}

fn load_template(config: &Config, flag: Option<&Path>, shots: Option<usize>) -> Result<QgTemplate, Failure> {
    let path = flag
        .map(Path::to_path_buf)
        .or_else(|| config.run.qg_template.as_deref().map(|p| config.resolve(p)));
    let template = match path {
        Some(p) => QgTemplate::load(&p)?,
        None => QgTemplate::default(),
    };
    Ok(match shots.or(config.run.shots) {
        Some(s) if s > template.shot_count() => {
            return Err(usage(format!(
                "--shots {s} exceeds the template's {} exemplars",
                template.shot_count()
            )))
        }
        Some(s) => template.with_shots(s),
        None => template,
    })
}

fn load_samples(args: &DatasetArgs) -> Result<Vec<Sample>, Failure> {
    let format = match &args.format {
        Some(f) => f.parse::<DatasetFormat>().map_err(usage)?,
        None => dataset::infer_format(&args.dataset),
    };
    let images = args.images.clone().unwrap_or_else(|| {
        args.dataset
            .parent()
            .map(Path::to_path_buf)
            .unwrap_or_else(|| PathBuf::from("."))
    });
    let loaded = dataset::load(&args.dataset, format, &images, &args.tag, &args.image_pattern)
        .with_context(|| format!("loading {}", args.dataset.display()))?;
    if !loaded.missing_images.is_empty() {
        log::warn!(
            "{} samples reference missing images and will be skipped",
            loaded.missing_images.len()
        );
    }
    Ok(loaded.samples)
}

struct Prepared {
    backends: Backends,
    config: RunConfig,
    samples: Vec<Sample>,
}

fn prepare(args: &PipelineArgs, n: Option<usize>) -> Result<Prepared, Failure> {
    if args.concurrency == Some(0) {
        return Err(usage("--concurrency must be at least 1"));
    }
    let file = load_config(&args.backend.config)?;
    let voter = match (&args.voter, &file.run.voter) {
        (Some(v), _) => v.parse::<VoterKind>().map_err(usage)?,
        (None, Some(v)) => v.parse::<VoterKind>().map_err(|e| anyhow!("config [run].voter: {e}"))?,
        (None, None) => VoterKind::default(),
    };
    let cache = cache_for(&args.backend, &file);
    let backends = Backends {
        qg: gateway(&file, args.qg_backend.as_deref(), Role::Qg, cache.as_ref())?,
        vlm: gateway(&file, args.vlm_backend.as_deref(), Role::Vlm, cache.as_ref())?,
        se: gateway(&file, args.se_backend.as_deref(), Role::Se, cache.as_ref())?,
    };

    let se_path = args
        .se_exemplars
        .clone()
        .or_else(|| file.run.se_exemplars.as_deref().map(|p| file.resolve(p)));
    let se_exemplars = match se_path {
        Some(p) => load_se_exemplars(&p)?,
        None => default_se_exemplars(),
    };
    let config = RunConfig {
        n: n.or(file.run.n).unwrap_or(2),
        seed: args.seed.or(file.run.seed).unwrap_or(0),
        voter,
        max_concurrency: args.concurrency.or(file.run.concurrency).unwrap_or(4),
        template: load_template(&file, args.template.as_deref(), args.shots)?,
        se_exemplars,
        system_prompt: file
            .run
            .system_prompt
            .clone()
            .unwrap_or_else(|| DEFAULT_SYSTEM_PROMPT.to_string()),
    };
    let samples = load_samples(&args.data)?;
    Ok(Prepared {
        backends,
        config,
        samples,
    })
}

pub fn run(args: RunArgs) -> CmdResult {
    let p = prepare(&args.pipeline, args.n)?;
    let summary = run_dataset(&p.backends, &p.config, &p.samples, &args.pipeline.out)?;
    println!(
        "run complete: {} completed, {} skipped, {} resumed; ledger {}",
        summary.completed,
        summary.skipped,
        summary.resumed,
        summary.ledger_path.display()
    );
    Ok(())
}

pub fn sweep(args: SweepArgs) -> CmdResult {
    if args.n_values.is_empty() {
        return Err(usage("--n-values needs at least one value"));
    }
    let p = prepare(&args.pipeline, None)?;
    let report = eval::sweep_n(&p.backends, &p.config, &p.samples, &args.n_values, &args.pipeline.out)?;
    print!("{}", eval::sweep_csv(&report.rows()));
    for f in &report.failures {
        eprintln!("n={} failed: {}", f.n, f.error);
    }
    Ok(())
}

pub fn eval(args: EvalArgs) -> CmdResult {
    let samples = load_samples(&args.data)?;
    let report = eval::evaluate_run(&args.run, &samples)?;
    let out = args.out.unwrap_or_else(|| args.run.clone());
    eval::write_file(&out.join(REPORT_FILE), &(serde_json::to_string_pretty(&report)? + "\n"))?;
    println!("{report}");
    Ok(())
}

pub fn sim(args: SimArgs) -> CmdResult {
    let mode: WrongMode = args.mode.parse().map_err(|e| usage(format!("--mode: {e}")))?;
    let mut rows = Vec::new();
    for &p in &args.p {
        for &k in &args.k {
            let model = ClusterModel { p, k, wrong_mode: mode };
            model.validate().map_err(|e| usage(e.to_string()))?;
            let analytic = majority_success_prob(&model)?;
            let mc = match args.trials {
                0 => None,
                t => Some(monte_carlo_success(&model, t, args.seed)?),
            };
            rows.push(SimRow {
                p,
                k,
                mode,
                analytic,
                mc,
            });
        }
    }
    let csv = sim_csv(&rows);
    if let Some(dir) = &args.out {
        eval::write_file(&dir.join(SIM_CSV), &csv)?;
    }
    print!("{csv}");
    Ok(())
}

pub fn gen_questions(args: GenQuestionsArgs) -> CmdResult {
    if args.n == 0 {
        return Err(usage("--n must be at least 1"));
    }
    if args.question.trim().is_empty() {
        return Err(usage("--question must not be empty"));
    }
    let file = load_config(&args.backend.config)?;
    let cache = cache_for(&args.backend, &file);
    let backend = gateway(&file, args.backend_name.as_deref(), Role::Qg, cache.as_ref())?;
    let template = load_template(&file, args.template.as_deref(), args.shots)?;

    let sample = Sample {
        id: "gen-questions".into(),
        image_ref: String::new(),
        question: args.question.clone(),
        choices: None,
        correct_choice_idx: None,
        gold_answers: None,
        dataset_tag: String::new(),
    };
    let prompt = build_qg_prompt(&template, &args.question, args.n)?;
    let questions = generate_questions(backend.as_ref(), &template, &sample, args.n)?;
    println!("--- prompt ---\n{prompt}\n--- questions ---");
    for (i, q) in questions.items.iter().enumerate() {
        println!("{i}. {q}");
    }
    if questions.degraded {
        eprintln!(
            "note: {} of {} requested paraphrases were usable",
            questions.len() - 1,
            args.n
        );
    }
    Ok(())
}

pub fn cache(args: CacheArgs) -> CmdResult {
    let configured = match &args.config {
        Some(path) => {
            let file = load_config(path)?;
            file.run.cache_dir.as_deref().map(|d| file.resolve(d))
        }
        None => None,
    };
    let store = ResponseStore::new(resolve_cache_dir(args.cache_dir.as_deref(), configured.as_deref()));
    match args.action {
        CacheAction::Stats => {
            let stats = store.stats()?;
            println!(
                "entries={} bytes={} dir={}",
                stats.entries,
                stats.bytes,
                store.dir().display()
            );
        }
        CacheAction::Clear => {
            let removed = store.clear()?;
            println!("removed {removed} entries from {}", store.dir().display());
        }
    }
    Ok(())
}
