//! Benchmark ingestion.
//!
//! Two formats are understood: the A-OKVQA annotation array and a canonical
//! JSONL form (`id`, `image`, `question`, `answers?`, `choices?`,
//! `correct_choice_idx?`) that other benchmarks are converted into once.
//! Question text is carried through byte for byte.

use std::collections::HashSet;
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::model::{ModelError, Sample};

pub const DEFAULT_AOKVQA_PATTERN: &str = "{image_id:012}.jpg";

#[derive(Debug, Error)]
pub enum DatasetError {
    #[error("reading {path}: {source}")]
    Io { path: String, source: std::io::Error },
    #[error("{path}: not a JSON array of records: {reason}")]
    NotAnArray { path: String, reason: String },
    #[error("malformed record at index {index}: {reason}")]
    Record { index: usize, reason: String },
    #[error("correct_choice_idx out of range at record {0}")]
    IndexOutOfRange(usize),
    #[error("line {line}: {reason}")]
    Line { line: usize, reason: String },
    #[error("line {line}: unscorable sample")]
    Unscorable { line: usize },
    #[error("duplicate sample id {0:?}")]
    DuplicateId(String),
    #[error("invalid image pattern {0:?}")]
    Pattern(String),
}

/// Loaded samples plus the ones whose image file was not found.
#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct Dataset {
    pub samples: Vec<Sample>,
    pub missing_images: Vec<String>,
}

#[derive(Debug, Deserialize)]
struct AokvqaRecord {
    question_id: String,
    image_id: u64,
    question: String,
    choices: Vec<String>,
    #[serde(default)]
    correct_choice_idx: Option<usize>,
    #[serde(default)]
    direct_answers: Option<Vec<String>>,
    #[serde(default)]
    split: Option<String>,
}

/// Expands `{image_id}`, `{image_id:0W}` (zero-padded to width W) and `{split}`.
pub fn expand_image_pattern(pattern: &str, image_id: u64, split: Option<&str>) -> Result<String, DatasetError> {
    let mut out = String::new();
    let mut rest = pattern;
    while let Some(start) = rest.find('{') {
        out.push_str(&rest[..start]);
        let end = rest[start..]
            .find('}')
            .map(|e| start + e)
            .ok_or_else(|| DatasetError::Pattern(pattern.to_string()))?;
        let field = &rest[start + 1..end];
        match field.split_once(':') {
            None if field == "image_id" => out.push_str(&image_id.to_string()),
            None if field == "split" => out.push_str(split.unwrap_or_default()),
            Some(("image_id", spec)) if spec.starts_with('0') => {
                let width: usize = spec[1..]
                    .parse()
                    .map_err(|_| DatasetError::Pattern(pattern.to_string()))?;
                out.push_str(&format!("{image_id:0width$}"));
            }
            _ => return Err(DatasetError::Pattern(pattern.to_string())),
        }
        rest = &rest[end + 1..];
    }
    out.push_str(rest);
    Ok(out)
}

fn read(path: &Path) -> Result<String, DatasetError> {
    std::fs::read_to_string(path).map_err(|source| DatasetError::Io {
        path: path.display().to_string(),
        source,
    })
}

/// Loads the A-OKVQA annotation array. `direct_answers` become gold answers.
pub fn load_aokvqa(annotations: &Path, images_root: &Path, pattern: &str) -> Result<Dataset, DatasetError> {
    let text = read(annotations)?;
    let raw: Vec<serde_json::Value> = serde_json::from_str(&text).map_err(|e| DatasetError::NotAnArray {
        path: annotations.display().to_string(),
        reason: e.to_string(),
    })?;

    let mut dataset = Dataset::default();
    let mut ids = HashSet::new();
    for (index, value) in raw.into_iter().enumerate() {
        let rec: AokvqaRecord = serde_json::from_value(value).map_err(|e| DatasetError::Record {
            index,
            reason: e.to_string(),
        })?;
        let file = expand_image_pattern(pattern, rec.image_id, rec.split.as_deref())?;
        let image_path = images_root.join(file);
        let sample = Sample {
            id: rec.question_id,
            image_ref: image_path.display().to_string(),
            question: rec.question,
            choices: Some(rec.choices),
            correct_choice_idx: rec.correct_choice_idx,
            gold_answers: rec.direct_answers,
            dataset_tag: "aokvqa".to_string(),
        };
        sample.validate().map_err(|e| match e {
            ModelError::ChoiceIndexOutOfRange { .. } => DatasetError::IndexOutOfRange(index),
            other => DatasetError::Record {
                index,
                reason: other.to_string(),
            },
        })?;
        if !ids.insert(sample.id.clone()) {
            return Err(DatasetError::DuplicateId(sample.id));
        }
        if !image_path.exists() {
            log::warn!("sample {}: image {} not found", sample.id, image_path.display());
            dataset.missing_images.push(sample.id.clone());
        }
        dataset.samples.push(sample);
    }
    Ok(dataset)
}

/// One line of the canonical JSONL format.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CanonicalRecord {
    pub id: String,
    pub image: String,
    pub question: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub answers: Option<Vec<String>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub choices: Option<Vec<String>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub correct_choice_idx: Option<usize>,
}

fn resolve_image(images_root: &Path, image: &str) -> String {
    if image.contains("://") || image.starts_with("data:") {
        image.to_string()
    } else {
        images_root.join(image).display().to_string()
    }
}

/// Loads canonical JSONL. Relative image paths resolve against `images_root`.
pub fn load_jsonl(path: &Path, images_root: &Path, dataset_tag: &str) -> Result<Dataset, DatasetError> {
    let text = read(path)?;
    let mut dataset = Dataset::default();
    let mut ids = HashSet::new();
    for (i, line) in text.lines().enumerate() {
        let line_no = i + 1;
        if line.trim().is_empty() {
            continue;
        }
        let rec: CanonicalRecord = serde_json::from_str(line).map_err(|e| DatasetError::Line {
            line: line_no,
            reason: e.to_string(),
        })?;
        let sample = Sample {
            id: rec.id,
            image_ref: resolve_image(images_root, &rec.image),
            question: rec.question,
            choices: rec.choices,
            correct_choice_idx: rec.correct_choice_idx,
            gold_answers: rec.answers,
            dataset_tag: dataset_tag.to_string(),
        };
        sample.validate().map_err(|e| match e {
            ModelError::Unscorable(_) => DatasetError::Unscorable { line: line_no },
            other => DatasetError::Line {
                line: line_no,
                reason: other.to_string(),
            },
        })?;
        if !ids.insert(sample.id.clone()) {
            return Err(DatasetError::DuplicateId(sample.id));
        }
        if !sample.image_ref.contains("://") && !Path::new(&sample.image_ref).exists() {
            log::warn!("sample {}: image {} not found", sample.id, sample.image_ref);
            dataset.missing_images.push(sample.id.clone());
        }
        dataset.samples.push(sample);
    }
    Ok(dataset)
}

/// Inverse of [`load_jsonl`]: image paths under `images_root` are written
/// relative to it.
pub fn to_canonical(sample: &Sample, images_root: &Path) -> CanonicalRecord {
    let image = Path::new(&sample.image_ref)
        .strip_prefix(images_root)
        .ok()
        .filter(|_| !images_root.as_os_str().is_empty())
        .map(|p| p.display().to_string())
        .unwrap_or_else(|| sample.image_ref.clone());
    CanonicalRecord {
        id: sample.id.clone(),
        image,
        question: sample.question.clone(),
        answers: sample.gold_answers.clone(),
        choices: sample.choices.clone(),
        correct_choice_idx: sample.correct_choice_idx,
    }
}

pub fn export_jsonl(samples: &[Sample], images_root: &Path, out: &Path) -> Result<(), DatasetError> {
    let io = |source| DatasetError::Io {
        path: out.display().to_string(),
        source,
    };
    let mut file = std::io::BufWriter::new(std::fs::File::create(out).map_err(io)?);
    for s in samples {
        let line = serde_json::to_string(&to_canonical(s, images_root)).expect("record serializes");
        writeln!(file, "{line}").map_err(io)?;
    }
    file.flush().map_err(io)
}

/// Dataset format selector used by the CLI.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DatasetFormat {
    Aokvqa,
    Jsonl,
}

impl std::str::FromStr for DatasetFormat {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "aokvqa" => Ok(Self::Aokvqa),
            "jsonl" => Ok(Self::Jsonl),
            other => Err(format!("unknown dataset format {other:?} (expected aokvqa or jsonl)")),
        }
    }
}

/// Guesses the format from the extension: `.json` is A-OKVQA, anything else JSONL.
pub fn infer_format(path: &Path) -> DatasetFormat {
    match path.extension().and_then(|e| e.to_str()) {
        Some("json") => DatasetFormat::Aokvqa,
        _ => DatasetFormat::Jsonl,
    }
}

pub fn load(
    path: &Path,
    format: DatasetFormat,
    images_root: &Path,
    dataset_tag: &str,
    image_pattern: &str,
) -> Result<Dataset, DatasetError> {
    match format {
        DatasetFormat::Aokvqa => load_aokvqa(path, images_root, image_pattern),
        DatasetFormat::Jsonl => load_jsonl(path, images_root, dataset_tag),
    }
}
