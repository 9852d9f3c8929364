//! Canonical answer normalization and multiple-choice mapping.
//!
//! `normalize_answer` is the single notion of answer equality in the crate:
//! the oracle voter clusters by it, the scorer compares against gold answers
//! with it, and `mc_select` maps free-form output onto choices through it.

use std::collections::BTreeSet;

use thiserror::Error;
use unicode_normalization::char::is_combining_mark;
use unicode_normalization::UnicodeNormalization;

const ARTICLES: [&str; 3] = ["a", "an", "the"];
const NUMBER_WORDS: [&str; 11] = [
    "zero", "one", "two", "three", "four", "five", "six", "seven", "eight", "nine", "ten",
];

/// Normalizes a raw answer for comparison.
///
/// Steps, in order: NFKC, lowercase, punctuation to spaces (apostrophes
/// between two alphanumerics survive), whitespace collapse and trim, leading
/// article removal, then digit tokens `0`..=`10` become English words.
///
/// Leading articles are removed while another token follows, so `"the a cat"`
/// becomes `"cat"` but a bare `"a"` is kept. This makes the function
/// idempotent.
pub fn normalize_answer(text: &str) -> String {
    let cleaned = if text.is_ascii() {
        clean_ascii(text.as_bytes())
    } else {
        let lower: String = text.nfkc().flat_map(char::to_lowercase).collect();
        let folded: String = lower.nfkc().collect();
        if folded.is_ascii() {
            clean_ascii(folded.as_bytes())
        } else {
            clean_unicode(&folded)
        }
    };

    let mut tokens = cleaned.split_whitespace().peekable();
    while let Some(t) = tokens.next_if(|t| ARTICLES.contains(t)) {
        if tokens.peek().is_none() {
            return t.to_string();
        }
    }
    let mut out = String::with_capacity(cleaned.len());
    for t in tokens {
        if !out.is_empty() {
            out.push(' ');
        }
        out.push_str(number_word(t).unwrap_or(t));
    }
    out
}

fn clean_ascii(bytes: &[u8]) -> String {
    let mut cleaned = String::with_capacity(bytes.len());
    for (i, &b) in bytes.iter().enumerate() {
        let keep = b.is_ascii_alphanumeric()
            || (b == b'\''
                && i > 0
                && bytes[i - 1].is_ascii_alphanumeric()
                && bytes.get(i + 1).is_some_and(u8::is_ascii_alphanumeric));
        cleaned.push(if keep { b.to_ascii_lowercase() as char } else { ' ' });
    }
    cleaned
}

fn clean_unicode(folded: &str) -> String {
    let chars: Vec<char> = folded.chars().collect();
    let mut cleaned = String::with_capacity(folded.len());
    for (i, &c) in chars.iter().enumerate() {
        if c.is_alphanumeric() || is_combining_mark(c) {
            cleaned.push(c);
        } else if c == '\'' || c == '\u{2019}' {
            let prev = i.checked_sub(1).map(|j| chars[j]);
            let next = chars.get(i + 1).copied();
            if prev.is_some_and(char::is_alphanumeric) && next.is_some_and(char::is_alphanumeric) {
                cleaned.push('\'');
            } else {
                cleaned.push(' ');
            }
        } else {
            cleaned.push(' ');
        }
    }
    cleaned
}

fn number_word(token: &str) -> Option<&'static str> {
    match token.as_bytes() {
        [d @ b'0'..=b'9'] => Some(NUMBER_WORDS[(d - b'0') as usize]),
        b"10" => Some(NUMBER_WORDS[10]),
        _ => None,
    }
}

/// Token-set Jaccard similarity of two already-normalized strings.
pub fn jaccard(a: &str, b: &str) -> f64 {
    let sa: BTreeSet<&str> = a.split_whitespace().collect();
    let sb: BTreeSet<&str> = b.split_whitespace().collect();
    let union = sa.union(&sb).count();
    if union == 0 {
        return 0.0;
    }
    sa.intersection(&sb).count() as f64 / union as f64
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct McSelection {
    pub index: usize,
    /// False when nothing overlapped and index 0 was returned by default.
    pub confident: bool,
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum McError {
    #[error("no choices")]
    NoChoices,
}

/// Maps a free-form answer onto one of `choices`.
///
/// An exact normalized match wins outright; otherwise the choice with the
/// highest token-set Jaccard overlap is picked, lowest index on ties.
pub fn mc_select<S: AsRef<str>>(answer: &str, choices: &[S]) -> Result<McSelection, McError> {
    if choices.is_empty() {
        return Err(McError::NoChoices);
    }
    let answer = normalize_answer(answer);
    let normalized: Vec<String> = choices.iter().map(|c| normalize_answer(c.as_ref())).collect();

    if let Some(index) = normalized.iter().position(|c| *c == answer) {
        return Ok(McSelection { index, confident: true });
    }

    let mut best = (0usize, 0.0f64);
    for (i, c) in normalized.iter().enumerate() {
        let score = jaccard(&answer, c);
        if score > best.1 {
            best = (i, score);
        }
    }
    Ok(McSelection {
        index: best.0,
        confident: best.1 > 0.0,
    })
}
