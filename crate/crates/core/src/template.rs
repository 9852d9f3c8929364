//! The `---`-separated plain-text format shared by QG templates and SE
//! exemplar files.
//!
//! A file is a sequence of sections separated by lines consisting only of
//! `---`. For QG templates every section but the last is an exemplar block
//! (first line the original question, optionally prefixed `0.`, remaining
//! lines its numbered paraphrases) and the last section is the instruction.
//! SE exemplar files are exemplar blocks only.

use std::path::Path;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum TemplateError {
    #[error("reading template {path}: {source}")]
    Io { path: String, source: std::io::Error },
    #[error("template has no instruction section")]
    MissingInstruction,
    #[error("instruction must contain the {{N}} placeholder exactly once (found {0})")]
    Placeholder(usize),
    #[error("exemplar block {0} is empty")]
    EmptyExemplar(usize),
}

/// Splits text into trimmed, non-empty `---` sections.
pub fn split_sections(text: &str) -> Vec<String> {
    let mut sections = Vec::new();
    let mut current = String::new();
    for line in text.lines() {
        if line.trim() == "---" {
            sections.push(std::mem::take(&mut current));
        } else {
            current.push_str(line);
            current.push('\n');
        }
    }
    sections.push(current);
    sections
        .into_iter()
        .map(|s| s.trim().to_string())
        .filter(|s| !s.is_empty())
        .collect()
}

pub fn read_sections(path: &Path) -> Result<Vec<String>, TemplateError> {
    let text = std::fs::read_to_string(path).map_err(|source| TemplateError::Io {
        path: path.display().to_string(),
        source,
    })?;
    Ok(split_sections(&text))
}

/// Renders sections back into the file format.
pub fn join_sections<S: AsRef<str>>(sections: &[S]) -> String {
    let mut out = String::new();
    for (i, s) in sections.iter().enumerate() {
        if i > 0 {
            out.push_str("---\n");
        }
        out.push_str(s.as_ref().trim());
        out.push('\n');
    }
    out
}
