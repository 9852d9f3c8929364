//! Question generation: few-shot paraphrase prompt, backend call, and
//! recovery of the numbered paraphrase list from free-form model output.

use std::path::Path;
use std::sync::LazyLock;

use regex::Regex;
use thiserror::Error;

use crate::gateway::{BackendSpec, ChatBackend, ChatRequest, GatewayError, Message};
use crate::model::{ModelError, QuestionSet, Sample};
use crate::normalize::normalize_answer;
use crate::template::{self, TemplateError};

pub const N_PLACEHOLDER: &str = "{N}";
pub const DEFAULT_INSTRUCTION: &str =
    "Please rewrite the above question into {N} other questions but keep the same semantics.";

#[derive(Debug, Error)]
pub enum QgError {
    #[error("configuration error: {0}")]
    Template(#[from] TemplateError),
    #[error("question is empty")]
    EmptyQuestion,
    #[error("n must be >= 1 for prompt construction")]
    ZeroN,
    #[error("unparseable QG output")]
    Unparseable,
    #[error(transparent)]
    Backend(#[from] GatewayError),
    #[error(transparent)]
    Model(#[from] ModelError),
}

/// One in-context example: an original question and its numbered rewrites.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Exemplar {
    pub original: String,
    /// Lines `1. ...`, `2. ...`, verbatim.
    pub paraphrases: String,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct QgTemplate {
    exemplars: Vec<Exemplar>,
    instruction: String,
}

impl QgTemplate {
    pub fn new(exemplars: Vec<Exemplar>, instruction: impl Into<String>) -> Result<Self, QgError> {
        let instruction = instruction.into();
        let count = instruction.matches(N_PLACEHOLDER).count();
        if count != 1 {
            return Err(TemplateError::Placeholder(count).into());
        }
        Ok(Self { exemplars, instruction })
    }

    pub fn exemplars(&self) -> &[Exemplar] {
        &self.exemplars
    }

    pub fn instruction(&self) -> &str {
        &self.instruction
    }

    pub fn shot_count(&self) -> usize {
        self.exemplars.len()
    }

    /// Keeps only the first `shots` exemplars.
    pub fn with_shots(mut self, shots: usize) -> Self {
        self.exemplars.truncate(shots);
        self
    }

    /// Parses the `---`-separated file format; the last section is the instruction.
    pub fn parse(text: &str) -> Result<Self, QgError> {
        let mut sections = template::split_sections(text);
        let instruction = sections.pop().ok_or(TemplateError::MissingInstruction)?;
        let exemplars = sections
            .iter()
            .enumerate()
            .map(|(i, block)| parse_exemplar(block).ok_or(TemplateError::EmptyExemplar(i)))
            .collect::<Result<Vec<_>, _>>()?;
        Self::new(exemplars, instruction)
    }

    pub fn load(path: &Path) -> Result<Self, QgError> {
        let text = std::fs::read_to_string(path).map_err(|source| TemplateError::Io {
            path: path.display().to_string(),
            source,
        })?;
        Self::parse(&text)
    }

    pub fn to_file_format(&self) -> String {
        let mut sections: Vec<String> = self
            .exemplars
            .iter()
            .map(|e| format!("0. {}\n{}", e.original, e.paraphrases))
            .collect();
        sections.push(self.instruction.clone());
        template::join_sections(&sections)
    }
}

impl Default for QgTemplate {
    /// Two-shot template built from known-good paraphrase pairs.
    fn default() -> Self {
        let exemplars = vec![
            Exemplar {
                original: "Where are the people laying?".into(),
                paraphrases: "1. What is the location where the people are resting?\n\
                              2. Where are the people stretched out?"
                    .into(),
            },
            Exemplar {
                original: "How many bicycles are there in the image?".into(),
                paraphrases: "1. How many bicycles are evident in the photograph?\n\
                              2. What\u{2019}s the count of bicycles that appear in the image?"
                    .into(),
            },
        ];
        Self::new(exemplars, DEFAULT_INSTRUCTION).expect("default instruction has one placeholder")
    }
}

fn parse_exemplar(block: &str) -> Option<Exemplar> {
    let mut lines = block.lines();
    let first = lines.next()?.trim();
    let original = ENUMERATOR
        .captures(first)
        .filter(|c| &c[1] == "0")
        .map(|c| c[2].trim().to_string())
        .unwrap_or_else(|| first.to_string());
    if original.is_empty() {
        return None;
    }
    let paraphrases = lines.collect::<Vec<_>>().join("\n").trim().to_string();
    Some(Exemplar { original, paraphrases })
}

static ENUMERATOR: LazyLock<Regex> =
    LazyLock::new(|| Regex::new(r"^\s*(\d+)\s*[.)]\s*(.*?)\s*$").expect("valid regex"));

/// Exemplar blocks, then `0. <q0>`, then the instruction with `{N}` replaced
/// literally by `n`.
pub fn build_qg_prompt(template: &QgTemplate, q0: &str, n: usize) -> Result<String, QgError> {
    if n == 0 {
        return Err(QgError::ZeroN);
    }
    if q0.trim().is_empty() {
        return Err(QgError::EmptyQuestion);
    }
    let mut prompt = String::new();
    for e in &template.exemplars {
        prompt.push_str("0. ");
        prompt.push_str(&e.original);
        prompt.push('\n');
        if !e.paraphrases.is_empty() {
            prompt.push_str(&e.paraphrases);
            prompt.push('\n');
        }
        prompt.push('\n');
    }
    prompt.push_str("0. ");
    prompt.push_str(q0);
    prompt.push('\n');
    prompt.push_str(&template.instruction.replace(N_PLACEHOLDER, &n.to_string()));
    Ok(prompt)
}

/// Extracts enumerated lines (`1.` / `1)`) in order, skipping prose, items
/// equal to `q0` after normalization, and repeats. At most `n` are returned.
pub fn parse_generated_questions(raw: &str, n: usize, q0: &str) -> Result<Vec<String>, QgError> {
    let q0_norm = normalize_answer(q0);
    let mut seen = vec![q0_norm];
    let mut out = Vec::new();
    for line in raw.lines() {
        if out.len() == n {
            break;
        }
        let Some(caps) = ENUMERATOR.captures(line) else {
            continue;
        };
        let text = caps[2].trim();
        if text.is_empty() {
            continue;
        }
        let norm = normalize_answer(text);
        if seen.contains(&norm) {
            continue;
        }
        seen.push(norm);
        out.push(text.to_string());
    }
    if out.is_empty() {
        return Err(QgError::Unparseable);
    }
    Ok(out)
}

/// The request sent to the QG backend for one question.
pub fn qg_request(spec: &BackendSpec, template: &QgTemplate, q0: &str, n: usize) -> Result<ChatRequest, QgError> {
    Ok(ChatRequest {
        backend_id: spec.backend_id.clone(),
        model: spec.model.clone(),
        messages: vec![Message::user(build_qg_prompt(template, q0, n)?)],
        temperature: spec.temperature,
        max_tokens: spec.max_tokens,
    })
}

/// Original question plus up to `n` paraphrases. `n == 0` makes no backend
/// call; unparseable output degrades to the original question alone.
pub fn generate_questions(
    backend: &dyn ChatBackend,
    template: &QgTemplate,
    sample: &Sample,
    n: usize,
) -> Result<QuestionSet, QgError> {
    if sample.question.trim().is_empty() {
        return Err(QgError::EmptyQuestion);
    }
    if n == 0 {
        return Ok(QuestionSet::new(&sample.id, &sample.question, Vec::new(), 0)?);
    }
    let req = qg_request(backend.spec(), template, &sample.question, n)?;
    let resp = backend.complete(&req)?;
    let paraphrases = match parse_generated_questions(&resp.text, n, &sample.question) {
        Ok(p) => p,
        Err(QgError::Unparseable) => {
            log::warn!(
                "sample {}: unparseable QG output, using the original question only",
                sample.id
            );
            Vec::new()
        }
        Err(e) => return Err(e),
    };
    Ok(QuestionSet::new(&sample.id, &sample.question, paraphrases, n)?)
}
