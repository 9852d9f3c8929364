//! Per-sample two-stage flow and the batch driver.
//!
//! Stage one paraphrases the question and answers every variant against the
//! image. Stage two votes over the answers. The batch driver fans samples out
//! over a bounded worker pool and writes the run ledger in dataset order, so
//! output never depends on scheduling.

use std::collections::{BTreeMap, HashSet};
use std::fs::{File, OpenOptions};
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicBool, AtomicUsize, Ordering};
use std::sync::{mpsc, Arc};
use std::time::Instant;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::gateway::{BackendSpec, ChatBackend, ChatRequest, GatewayError, Message, Part, Role};
use crate::model::{
    AnswerEntry, AnswerSet, BackendIds, ModelError, PredictionRecord, QuestionSet, Sample, StageTimings, VoteDecision,
    VoteMethod,
};
use crate::normalize::mc_select;
use crate::qg::{generate_questions, QgError, QgTemplate};
use crate::rng::mix_seed;
use crate::voter::{oracle_vote, self_ensemble, VoteError};

pub const DEFAULT_SYSTEM_PROMPT: &str = "Answer the question in a few words.";
pub const MC_INSTRUCTION: &str = "Answer with exactly one of the choices.";

pub const LEDGER_FILE: &str = "ledger.jsonl";
pub const MANIFEST_FILE: &str = "manifest.json";
pub const TIMINGS_FILE: &str = "timings.jsonl";

#[derive(Debug, Error)]
pub enum PipelineError {
    #[error("image load failure: {image_ref}: {reason}")]
    ImageLoad { image_ref: String, reason: String },
    #[error("precondition failed: question is empty")]
    EmptyQuestion,
    #[error("all {0} questions failed; first error: {1}")]
    AllQuestionsFailed(usize, GatewayError),
    #[error(transparent)]
    Qg(#[from] QgError),
    #[error(transparent)]
    Vote(#[from] VoteError),
    #[error(transparent)]
    Backend(#[from] GatewayError),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error("ledger {path}: {reason}")]
    Ledger { path: String, reason: String },
    #[error("invalid run configuration: {0}")]
    Config(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum VoterKind {
    #[default]
    Llm,
    Oracle,
}

impl std::str::FromStr for VoterKind {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "llm" => Ok(VoterKind::Llm),
            "oracle" => Ok(VoterKind::Oracle),
            other => Err(format!("unknown voter {other:?} (expected llm or oracle)")),
        }
    }
}

/// The three models of the flow.
#[derive(Clone)]
pub struct Backends {
    pub qg: Arc<dyn ChatBackend>,
    pub vlm: Arc<dyn ChatBackend>,
    pub se: Arc<dyn ChatBackend>,
}

impl Backends {
    pub fn ids(&self) -> BackendIds {
        BackendIds {
            qg: self.qg.spec().backend_id.clone(),
            vlm: self.vlm.spec().backend_id.clone(),
            se: self.se.spec().backend_id.clone(),
        }
    }
}

#[derive(Debug, Clone)]
pub struct RunConfig {
    /// Paraphrases requested per question.
    pub n: usize,
    pub seed: u64,
    pub voter: VoterKind,
    pub max_concurrency: usize,
    pub template: QgTemplate,
    pub se_exemplars: Vec<String>,
    pub system_prompt: String,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            n: 2,
            seed: 0,
            voter: VoterKind::Llm,
            max_concurrency: 4,
            template: QgTemplate::default(),
            se_exemplars: crate::voter::default_se_exemplars(),
            system_prompt: DEFAULT_SYSTEM_PROMPT.to_string(),
        }
    }
}

impl RunConfig {
    pub fn validate(&self) -> Result<(), PipelineError> {
        if self.max_concurrency == 0 {
            return Err(PipelineError::Config("max_concurrency must be >= 1".into()));
        }
        Ok(())
    }
}

/// Loads an image reference into a request part. URLs pass through.
pub fn load_image(image_ref: &str) -> Result<Part, PipelineError> {
    if ["http://", "https://", "data:"]
        .iter()
        .any(|p| image_ref.starts_with(p))
    {
        return Ok(Part::image_url(image_ref));
    }
    let bytes = std::fs::read(image_ref).map_err(|e| PipelineError::ImageLoad {
        image_ref: image_ref.to_string(),
        reason: e.to_string(),
    })?;
    Ok(Part::image_bytes(media_type_for(image_ref), &bytes))
}

fn media_type_for(path: &str) -> &'static str {
    let ext = Path::new(path)
        .extension()
        .and_then(|e| e.to_str())
        .map(str::to_ascii_lowercase);
    match ext.as_deref() {
        Some("png") => "image/png",
        Some("jpg" | "jpeg") => "image/jpeg",
        Some("gif") => "image/gif",
        Some("webp") => "image/webp",
        Some("bmp") => "image/bmp",
        _ => "application/octet-stream",
    }
}

/// Question text sent to the VLM, with the choice list in multiple-choice mode.
pub fn vlm_question_text(question: &str, choices: Option<&[String]>) -> String {
    match choices {
        Some(c) if !c.is_empty() => format!("{question}\nChoices: {}\n{MC_INSTRUCTION}", c.join("; ")),
        _ => question.to_string(),
    }
}

pub fn vlm_request(
    spec: &BackendSpec,
    system_prompt: &str,
    image: Part,
    question: &str,
    choices: Option<&[String]>,
) -> ChatRequest {
    ChatRequest {
        backend_id: spec.backend_id.clone(),
        model: spec.model.clone(),
        messages: vec![
            Message::system(system_prompt),
            Message {
                role: Role::User,
                parts: vec![image, Part::text(vlm_question_text(question, choices))],
            },
        ],
        temperature: spec.temperature,
        max_tokens: spec.max_tokens,
    }
}

fn ask(
    backend: &dyn ChatBackend,
    system_prompt: &str,
    image: &Part,
    question: &str,
    choices: Option<&[String]>,
) -> Result<(String, String), GatewayError> {
    let req = vlm_request(backend.spec(), system_prompt, image.clone(), question, choices);
    let resp = backend.complete(&req)?;
    Ok((resp.text.trim().to_string(), resp.request_digest))
}

/// One VLM call: returns the trimmed answer and the request digest.
pub fn answer_question(
    backend: &dyn ChatBackend,
    image_ref: &str,
    question: &str,
    choices: Option<&[String]>,
) -> Result<(String, String), PipelineError> {
    if question.trim().is_empty() {
        return Err(PipelineError::EmptyQuestion);
    }
    let image = load_image(image_ref)?;
    Ok(ask(backend, DEFAULT_SYSTEM_PROMPT, &image, question, choices)?)
}

/// Answers of an [`answer_all`] call plus the indices that failed.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct AnsweredSet {
    pub answers: AnswerSet,
    pub failed: Vec<usize>,
}

/// Answers every question concurrently; entries come back in question order.
/// A failed question leaves an empty sentinel answer and is listed in `failed`.
pub fn answer_all(
    backend: &dyn ChatBackend,
    sample: &Sample,
    questions: &QuestionSet,
    system_prompt: &str,
) -> Result<AnsweredSet, PipelineError> {
    questions.validate()?;
    if questions.sample_id != sample.id || questions.original() != sample.question {
        return Err(PipelineError::Config(format!(
            "question set {} does not belong to sample {}",
            questions.sample_id, sample.id
        )));
    }
    let image = load_image(&sample.image_ref)?;
    let choices = sample.choices.as_deref();

    let results: Vec<Result<(String, String), GatewayError>> = if questions.len() == 1 {
        vec![ask(backend, system_prompt, &image, questions.original(), choices)]
    } else {
        std::thread::scope(|s| {
            let handles: Vec<_> = questions
                .items
                .iter()
                .map(|q| s.spawn(|| ask(backend, system_prompt, &image, q, choices)))
                .collect();
            handles
                .into_iter()
                .map(|h| h.join().expect("answer thread panicked"))
                .collect()
        })
    };

    let mut entries = Vec::with_capacity(results.len());
    let mut failed = Vec::new();
    let mut first_error = None;
    for (i, r) in results.into_iter().enumerate() {
        let (answer_text, response_digest) = match r {
            Ok(ok) => ok,
            Err(e) => {
                log::warn!("sample {}: question {i} failed: {e}", sample.id);
                failed.push(i);
                first_error.get_or_insert(e);
                (String::new(), String::new())
            }
        };
        entries.push(AnswerEntry {
            question_index: i,
            answer_text,
            response_digest,
        });
    }
    if failed.len() == entries.len() {
        return Err(PipelineError::AllQuestionsFailed(
            entries.len(),
            first_error.expect("at least one failure"),
        ));
    }
    let answers = AnswerSet {
        sample_id: sample.id.clone(),
        entries,
    };
    answers.check_aligned(questions)?;
    Ok(AnsweredSet { answers, failed })
}

/// Full two-stage flow for one sample. `global_seed` is mixed with the
/// sample id to seed the random fallback.
pub fn run_sample(backends: &Backends, config: &RunConfig, sample: &Sample) -> Result<PredictionRecord, PipelineError> {
    let seed = mix_seed(config.seed, &sample.id);

    let t0 = Instant::now();
    let question_set = generate_questions(backends.qg.as_ref(), &config.template, sample, config.n)?;
    let qg_ms = t0.elapsed().as_millis() as u64;

    let t1 = Instant::now();
    let AnsweredSet { answers, failed } =
        answer_all(backends.vlm.as_ref(), sample, &question_set, &config.system_prompt)?;
    let vlm_ms = t1.elapsed().as_millis() as u64;

    let t2 = Instant::now();
    // Failed questions are excluded from voting; indices map back into the answer set.
    let voted: Vec<usize> = (0..answers.len()).filter(|i| !failed.contains(i)).collect();
    let texts: Vec<&str> = voted.iter().map(|&i| answers.entries[i].answer_text.as_str()).collect();

    let (decision, verdict) = if texts.len() == 1 {
        let decision = VoteDecision {
            final_answer: texts[0].to_string(),
            method: VoteMethod::RandomFallback,
            cluster_size: 1,
            seed_used: seed,
        };
        (decision, None)
    } else {
        match config.voter {
            VoterKind::Oracle => (oracle_vote(&texts, seed)?, None),
            VoterKind::Llm => {
                let (decision, mut verdict) = self_ensemble(backends.se.as_ref(), &texts, &config.se_exemplars, seed)?;
                for idx in &mut verdict.subset_indices {
                    *idx = voted[*idx];
                }
                (decision, Some(verdict))
            }
        }
    };
    let vote_ms = t2.elapsed().as_millis() as u64;

    let mc_choice_idx = match &sample.choices {
        Some(choices) if !choices.is_empty() => {
            Some(mc_select(&decision.final_answer, choices).map(|m| m.index).unwrap_or(0))
        }
        _ => None,
    };

    Ok(PredictionRecord {
        sample_id: sample.id.clone(),
        question_set,
        answer_set: answers,
        verdict,
        decision,
        mc_choice_idx,
        backend_ids: backends.ids(),
        n_used: config.n,
        failed_questions: failed,
        timings: StageTimings { qg_ms, vlm_ms, vote_ms },
    })
}

/// One line of the run ledger.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "status", rename_all = "snake_case")]
#[allow(clippy::large_enum_variant)]
pub enum LedgerEntry {
    Ok(PredictionRecord),
    Skipped { sample_id: String, error: String },
}

impl LedgerEntry {
    pub fn sample_id(&self) -> &str {
        match self {
            LedgerEntry::Ok(r) => &r.sample_id,
            LedgerEntry::Skipped { sample_id, .. } => sample_id,
        }
    }

    pub fn record(&self) -> Option<&PredictionRecord> {
        match self {
            LedgerEntry::Ok(r) => Some(r),
            LedgerEntry::Skipped { .. } => None,
        }
    }

    pub fn to_line(&self) -> String {
        serde_json::to_string(self).expect("ledger entry serializes")
    }
}

fn ledger_err(path: &Path, reason: impl ToString) -> PipelineError {
    PipelineError::Ledger {
        path: path.display().to_string(),
        reason: reason.to_string(),
    }
}

pub fn read_ledger(path: &Path) -> Result<Vec<LedgerEntry>, PipelineError> {
    let file = File::open(path).map_err(|e| ledger_err(path, e))?;
    let mut entries = Vec::new();
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| ledger_err(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let entry = serde_json::from_str(&line).map_err(|e| ledger_err(path, format!("line {}: {e}", i + 1)))?;
        entries.push(entry);
    }
    Ok(entries)
}

/// Ledger lines sorted by sample id.
pub fn canonical_ledger(path: &Path) -> Result<String, PipelineError> {
    let mut entries = read_ledger(path)?;
    entries.sort_by(|a, b| a.sample_id().cmp(b.sample_id()));
    Ok(entries.iter().map(|e| e.to_line() + "\n").collect())
}

/// Sidecar describing how a run was produced.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub config_digest: String,
    pub seed: u64,
    pub n: usize,
    pub voter: VoterKind,
    pub max_concurrency: usize,
    pub backends: Vec<BackendSpec>,
    pub qg_template_digest: String,
    pub se_exemplars_digest: String,
    pub system_prompt: String,
    pub samples: usize,
}

fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

impl RunManifest {
    pub fn new(backends: &Backends, config: &RunConfig, samples: usize) -> Self {
        let specs = vec![
            backends.qg.spec().clone(),
            backends.vlm.spec().clone(),
            backends.se.spec().clone(),
        ];
        let qg_template_digest = sha256_hex(config.template.to_file_format().as_bytes());
        let se_exemplars_digest = sha256_hex(crate::template::join_sections(&config.se_exemplars).as_bytes());
        // Everything that can change the ledger; concurrency cannot.
        let digest_input = serde_json::json!({
            "seed": config.seed,
            "n": config.n,
            "voter": config.voter,
            "backends": specs,
            "qg_template_digest": qg_template_digest,
            "se_exemplars_digest": se_exemplars_digest,
            "system_prompt": config.system_prompt,
        });
        Self {
            config_digest: sha256_hex(digest_input.to_string().as_bytes()),
            seed: config.seed,
            n: config.n,
            voter: config.voter,
            max_concurrency: config.max_concurrency,
            backends: specs,
            qg_template_digest,
            se_exemplars_digest,
            system_prompt: config.system_prompt.clone(),
            samples,
        }
    }

    pub fn load(path: &Path) -> Result<Self, PipelineError> {
        let text = std::fs::read_to_string(path).map_err(|e| ledger_err(path, e))?;
        serde_json::from_str(&text).map_err(|e| ledger_err(path, e))
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct RunSummary {
    /// Samples already present in the ledger from a previous run.
    pub resumed: usize,
    pub completed: usize,
    pub skipped: usize,
    pub ledger_path: PathBuf,
}

#[derive(Serialize)]
struct TimingLine<'a> {
    sample_id: &'a str,
    #[serde(flatten)]
    timings: StageTimings,
}

/// Processes `samples` into `out_dir/ledger.jsonl`, resuming from any records
/// already there. Lines are appended in dataset order as soon as every
/// earlier sample has finished.
pub fn run_dataset(
    backends: &Backends,
    config: &RunConfig,
    samples: &[Sample],
    out_dir: &Path,
) -> Result<RunSummary, PipelineError> {
    config.validate()?;
    std::fs::create_dir_all(out_dir).map_err(|e| ledger_err(out_dir, e))?;
    let ledger_path = out_dir.join(LEDGER_FILE);

    // Keep completed records; previously skipped samples are retried.
    let kept: Vec<LedgerEntry> = if ledger_path.exists() {
        read_ledger(&ledger_path)?
            .into_iter()
            .filter(|e| e.record().is_some())
            .collect()
    } else {
        Vec::new()
    };
    let manifest = RunManifest::new(backends, config, samples.len());
    let manifest_path = out_dir.join(MANIFEST_FILE);
    if !kept.is_empty() && manifest_path.exists() {
        let previous = RunManifest::load(&manifest_path)?;
        if previous.config_digest != manifest.config_digest {
            return Err(PipelineError::Config(format!(
                "{} holds a run with a different configuration; use a fresh --out directory",
                out_dir.display()
            )));
        }
    }
    let done: HashSet<String> = kept.iter().map(|e| e.sample_id().to_string()).collect();
    write_atomically(
        &ledger_path,
        &kept.iter().map(|e| e.to_line() + "\n").collect::<String>(),
    )?;

    write_atomically(
        &manifest_path,
        &(serde_json::to_string_pretty(&manifest).expect("manifest serializes") + "\n"),
    )?;

    let pending: Vec<&Sample> = samples.iter().filter(|s| !done.contains(&s.id)).collect();
    let mut summary = RunSummary {
        resumed: samples.len() - pending.len(),
        ledger_path: ledger_path.clone(),
        ..RunSummary::default()
    };

    let open_append = |p: &Path| {
        OpenOptions::new()
            .create(true)
            .append(true)
            .open(p)
            .map(BufWriter::new)
            .map_err(|e| ledger_err(p, e))
    };
    let mut ledger = open_append(&ledger_path)?;
    let mut timings = open_append(&out_dir.join(TIMINGS_FILE))?;

    let next = AtomicUsize::new(0);
    let abort = AtomicBool::new(false);
    let workers = config.max_concurrency.min(pending.len()).max(1);
    let (tx, rx) = mpsc::channel::<(usize, Result<PredictionRecord, PipelineError>)>();

    let write_result = std::thread::scope(|s| {
        for _ in 0..workers {
            let tx = tx.clone();
            let (next, abort, pending) = (&next, &abort, &pending);
            s.spawn(move || loop {
                if abort.load(Ordering::SeqCst) {
                    break;
                }
                let i = next.fetch_add(1, Ordering::SeqCst);
                let Some(sample) = pending.get(i) else { break };
                let result = run_sample(backends, config, sample);
                if tx.send((i, result)).is_err() {
                    break;
                }
            });
        }
        drop(tx);

        let mut buffer: BTreeMap<usize, Result<PredictionRecord, PipelineError>> = BTreeMap::new();
        let mut cursor = 0usize;
        for (i, result) in rx {
            buffer.insert(i, result);
            while let Some(result) = buffer.remove(&cursor) {
                let sample_id = &pending[cursor].id;
                let entry = match result {
                    Ok(record) => {
                        let line = TimingLine {
                            sample_id,
                            timings: record.timings,
                        };
                        let t = serde_json::to_string(&line).expect("timings serialize");
                        writeln!(timings, "{t}").map_err(|e| ledger_err(out_dir, e))?;
                        summary.completed += 1;
                        LedgerEntry::Ok(record)
                    }
                    Err(e) => {
                        log::warn!("sample {sample_id} skipped: {e}");
                        summary.skipped += 1;
                        LedgerEntry::Skipped {
                            sample_id: sample_id.clone(),
                            error: e.to_string(),
                        }
                    }
                };
                log::info!(
                    "[{}/{}] {sample_id} {}",
                    cursor + 1,
                    pending.len(),
                    entry_status(&entry)
                );
                let res = writeln!(ledger, "{}", entry.to_line()).and_then(|_| ledger.flush());
                if let Err(e) = res {
                    abort.store(true, Ordering::SeqCst);
                    return Err(ledger_err(&ledger_path, e));
                }
                cursor += 1;
            }
        }
        Ok(())
    });
    write_result?;
    timings.flush().map_err(|e| ledger_err(out_dir, e))?;
    Ok(summary)
}

fn entry_status(entry: &LedgerEntry) -> String {
    match entry {
        LedgerEntry::Ok(r) => format!("{} ({})", r.decision.final_answer, r.decision.method.as_str()),
        LedgerEntry::Skipped { .. } => "skipped".to_string(),
    }
}

fn write_atomically(path: &Path, contents: &str) -> Result<(), PipelineError> {
    let dir = path
        .parent()
        .filter(|p| !p.as_os_str().is_empty())
        .unwrap_or(Path::new("."));
    let mut tmp = tempfile::NamedTempFile::new_in(dir).map_err(|e| ledger_err(path, e))?;
    tmp.write_all(contents.as_bytes()).map_err(|e| ledger_err(path, e))?;
    tmp.persist(path).map_err(|e| ledger_err(path, e.error))?;
    Ok(())
}
