//! Shared domain types.
//!
//! Everything here is an immutable value once constructed. Constructors and
//! `validate` methods enforce the invariants that downstream modules assume.

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum ModelError {
    #[error("sample id is empty")]
    EmptyId,
    #[error("sample {0}: correct_choice_idx without choices")]
    IndexWithoutChoices(String),
    #[error("sample {id}: correct_choice_idx {idx} out of range for {len} choices")]
    ChoiceIndexOutOfRange { id: String, idx: usize, len: usize },
    #[error("sample {0}: unscorable sample (no correct_choice_idx and no gold answers)")]
    Unscorable(String),
    #[error("question set for {0}: {1}")]
    QuestionSet(String, &'static str),
    #[error("answer set for {0} is not aligned with its question set")]
    Misaligned(String),
}

/// One benchmark item.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Sample {
    pub id: String,
    /// Filesystem path or URL of the image.
    pub image_ref: String,
    pub question: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub choices: Option<Vec<String>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub correct_choice_idx: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub gold_answers: Option<Vec<String>>,
    pub dataset_tag: String,
}

impl Sample {
    /// Checks the structural invariants and that the sample can be scored.
    pub fn validate(&self) -> Result<(), ModelError> {
        if self.id.is_empty() {
            return Err(ModelError::EmptyId);
        }
        if let Some(idx) = self.correct_choice_idx {
            let len = self
                .choices
                .as_ref()
                .map(Vec::len)
                .ok_or_else(|| ModelError::IndexWithoutChoices(self.id.clone()))?;
            if idx >= len {
                return Err(ModelError::ChoiceIndexOutOfRange {
                    id: self.id.clone(),
                    idx,
                    len,
                });
            }
        }
        if !self.is_scorable() {
            return Err(ModelError::Unscorable(self.id.clone()));
        }
        Ok(())
    }

    pub fn is_scorable(&self) -> bool {
        self.correct_choice_idx.is_some() || self.gold_answers.as_ref().is_some_and(|g| !g.is_empty())
    }

    /// Multiple-choice mode is active whenever choices are present.
    pub fn is_multiple_choice(&self) -> bool {
        self.choices.as_ref().is_some_and(|c| !c.is_empty())
    }
}

/// The original question followed by its generated paraphrases.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct QuestionSet {
    pub sample_id: String,
    /// `items[0]` is always the original question, verbatim.
    pub items: Vec<String>,
    pub requested_n: usize,
    /// Fewer than `requested_n` paraphrases were recovered.
    pub degraded: bool,
}

impl QuestionSet {
    pub fn new(
        sample_id: impl Into<String>,
        original: impl Into<String>,
        paraphrases: Vec<String>,
        requested_n: usize,
    ) -> Result<Self, ModelError> {
        let mut items = Vec::with_capacity(paraphrases.len() + 1);
        items.push(original.into());
        let degraded = paraphrases.len() < requested_n;
        items.extend(paraphrases);
        let set = Self {
            sample_id: sample_id.into(),
            items,
            requested_n,
            degraded,
        };
        set.validate()?;
        Ok(set)
    }

    pub fn validate(&self) -> Result<(), ModelError> {
        let err = |m| Err(ModelError::QuestionSet(self.sample_id.clone(), m));
        if self.items.is_empty() {
            return err("no items");
        }
        if self.items.len() > self.requested_n + 1 {
            return err("more items than requested");
        }
        if self.items.iter().any(|q| q.trim().is_empty()) {
            return err("empty question");
        }
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.items.len()
    }

    pub fn is_empty(&self) -> bool {
        self.items.is_empty()
    }

    pub fn original(&self) -> &str {
        &self.items[0]
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct AnswerEntry {
    pub question_index: usize,
    pub answer_text: String,
    /// Digest of the request that produced this answer, i.e. its cache/replay key.
    /// Empty for failed questions.
    pub response_digest: String,
}

/// Answers aligned index-for-index with a [`QuestionSet`].
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct AnswerSet {
    pub sample_id: String,
    pub entries: Vec<AnswerEntry>,
}

impl AnswerSet {
    pub fn from_texts<S: Into<String>>(sample_id: &str, answers: impl IntoIterator<Item = S>) -> Self {
        let entries = answers
            .into_iter()
            .enumerate()
            .map(|(i, a)| AnswerEntry {
                question_index: i,
                answer_text: a.into(),
                response_digest: String::new(),
            })
            .collect();
        Self {
            sample_id: sample_id.to_string(),
            entries,
        }
    }

    pub fn check_aligned(&self, questions: &QuestionSet) -> Result<(), ModelError> {
        let aligned = self.sample_id == questions.sample_id
            && self.entries.len() == questions.items.len()
            && self.entries.iter().enumerate().all(|(i, e)| e.question_index == i);
        if aligned {
            Ok(())
        } else {
            Err(ModelError::Misaligned(self.sample_id.clone()))
        }
    }

    pub fn texts(&self) -> Vec<&str> {
        self.entries.iter().map(|e| e.answer_text.as_str()).collect()
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }
}

/// Parsed `(num, subset)` output of the self-ensemble model.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SeVerdict {
    pub num: usize,
    pub subset_indices: Vec<usize>,
    pub raw_text: String,
    pub parse_ok: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum VoteMethod {
    Majority,
    RandomFallback,
    OracleFallback,
}

impl VoteMethod {
    pub fn as_str(self) -> &'static str {
        match self {
            VoteMethod::Majority => "majority",
            VoteMethod::RandomFallback => "random_fallback",
            VoteMethod::OracleFallback => "oracle_fallback",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct VoteDecision {
    pub final_answer: String,
    pub method: VoteMethod,
    pub cluster_size: usize,
    pub seed_used: u64,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct BackendIds {
    pub qg: String,
    pub vlm: String,
    pub se: String,
}

/// Wall-clock milliseconds per stage. Not serialized into the ledger so that
/// ledgers stay byte-identical across runs; the batch driver writes them to a
/// separate timings file.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct StageTimings {
    pub qg_ms: u64,
    pub vlm_ms: u64,
    pub vote_ms: u64,
}

/// Everything computed for one sample.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PredictionRecord {
    pub sample_id: String,
    pub question_set: QuestionSet,
    pub answer_set: AnswerSet,
    #[serde(default)]
    pub verdict: Option<SeVerdict>,
    pub decision: VoteDecision,
    #[serde(default)]
    pub mc_choice_idx: Option<usize>,
    pub backend_ids: BackendIds,
    pub n_used: usize,
    /// Question indices whose VLM call failed and carry an empty sentinel answer.
    #[serde(default)]
    pub failed_questions: Vec<usize>,
    #[serde(skip)]
    pub timings: StageTimings,
}
