//! Answer selection over a self-ensemble answer set.
//!
//! [`self_ensemble`] asks a language model for the size and members of the
//! largest same-meaning group (`num`, `subset`). If `num > 1` the lowest-index
//! member of `subset` wins. If `num == 1` there is no majority and one answer
//! is drawn uniformly from the whole set. Unparseable verdicts fall back to
//! [`oracle_vote`], which clusters by [`normalize_answer`] equality.

use std::path::Path;
use std::sync::LazyLock;

use regex::Regex;
use thiserror::Error;

use crate::gateway::{BackendSpec, ChatBackend, ChatRequest, GatewayError, Message};
use crate::model::{SeVerdict, VoteDecision, VoteMethod};
use crate::normalize::normalize_answer;
use crate::rng::pick_uniform;
use crate::template::{self, TemplateError};

pub const SE_INSTRUCTION: &str =
    "let give me the number of answers above that have the most similar meaning and subset of those answers.";

#[derive(Debug, Error)]
pub enum VoteError {
    #[error("cannot vote over an empty answer set")]
    EmptyAnswers,
    #[error(transparent)]
    Backend(#[from] GatewayError),
}

/// In-context examples teaching the `num:` / `subset:` reply format.
pub fn default_se_exemplars() -> Vec<String> {
    vec![
        format!("0. two dogs\n1. a cat\n2. 2 dogs\n3. three dogs\n{SE_INSTRUCTION}\nnum: 2\nsubset: [0, 2]"),
        format!("0. red\n1. blue\n2. green\n{SE_INSTRUCTION}\nnum: 1\nsubset: [0]"),
    ]
}

/// Reads an SE exemplar file: every `---` section is one exemplar block.
pub fn load_se_exemplars(path: &Path) -> Result<Vec<String>, TemplateError> {
    template::read_sections(path)
}

/// Exemplars, then the answers as `0. <a0>` ... `k. <ak>`, then the instruction.
pub fn build_se_prompt<S: AsRef<str>>(answers: &[S], exemplars: &[String]) -> Result<String, VoteError> {
    if answers.is_empty() {
        return Err(VoteError::EmptyAnswers);
    }
    if exemplars.is_empty() {
        log::debug!("building a zero-shot SE prompt");
    }
    let mut prompt = String::new();
    for e in exemplars {
        prompt.push_str(e.trim());
        prompt.push_str("\n\n");
    }
    for (i, a) in answers.iter().enumerate() {
        let flat = a.as_ref().split_whitespace().collect::<Vec<_>>().join(" ");
        prompt.push_str(&format!("{i}. {flat}\n"));
    }
    prompt.push_str(SE_INSTRUCTION);
    Ok(prompt)
}

pub fn se_request<S: AsRef<str>>(
    spec: &BackendSpec,
    answers: &[S],
    exemplars: &[String],
) -> Result<ChatRequest, VoteError> {
    Ok(ChatRequest {
        backend_id: spec.backend_id.clone(),
        model: spec.model.clone(),
        messages: vec![Message::user(build_se_prompt(answers, exemplars)?)],
        temperature: spec.temperature,
        max_tokens: spec.max_tokens,
    })
}

static NUM_FIELD: LazyLock<Regex> = LazyLock::new(|| Regex::new(r"(?i)\bnum\w*\s*[:=]?\s*(\d+)").expect("valid regex"));
static SUBSET_FIELD: LazyLock<Regex> =
    LazyLock::new(|| Regex::new(r"(?i)subset\w*\s*[:=]?\s*\[([^\]]*)\]").expect("valid regex"));
static BRACKETS: LazyLock<Regex> = LazyLock::new(|| Regex::new(r"\[([^\]]*)\]").expect("valid regex"));
static INTEGER: LazyLock<Regex> = LazyLock::new(|| Regex::new(r"\b(\d+)\b").expect("valid regex"));

/// Tolerant extraction of `(num, subset)` from SE output. Never fails; a bad
/// verdict has `parse_ok == false`.
pub fn parse_se_verdict(raw: &str, k: usize) -> SeVerdict {
    let num = NUM_FIELD
        .captures(raw)
        .and_then(|c| c[1].parse::<usize>().ok())
        .or_else(|| {
            let outside = BRACKETS.replace_all(raw, " ");
            INTEGER.captures(&outside).and_then(|c| c[1].parse::<usize>().ok())
        });
    let list = SUBSET_FIELD
        .captures(raw)
        .or_else(|| BRACKETS.captures(raw))
        .map(|c| c[1].to_string());
    let parsed: Option<Vec<usize>> = list.as_deref().and_then(|l| {
        l.split(|c: char| c == ',' || c.is_whitespace())
            .filter(|t| !t.is_empty())
            .map(|t| t.parse::<usize>().ok())
            .collect()
    });

    let mut subset_indices = Vec::new();
    let mut well_formed = parsed.is_some();
    for i in parsed.unwrap_or_default() {
        if i >= k || subset_indices.contains(&i) {
            well_formed = false;
        } else {
            subset_indices.push(i);
        }
    }
    let parse_ok = well_formed && num.is_some_and(|n| n >= 1 && n == subset_indices.len());
    SeVerdict {
        num: num.unwrap_or(subset_indices.len()).max(1),
        subset_indices,
        raw_text: raw.to_string(),
        parse_ok,
    }
}

/// Applies the decision rule to an already-parsed verdict.
///
/// Returns `None` when the verdict did not parse, so the caller can fall back.
pub fn decide_from_verdict<S: AsRef<str>>(answers: &[S], verdict: &SeVerdict, seed: u64) -> Option<VoteDecision> {
    if !verdict.parse_ok || answers.is_empty() {
        return None;
    }
    if verdict.num > 1 {
        let winner = *verdict.subset_indices.iter().min()?;
        Some(VoteDecision {
            final_answer: answers[winner].as_ref().to_string(),
            method: VoteMethod::Majority,
            cluster_size: verdict.num,
            seed_used: seed,
        })
    } else {
        Some(random_pick(answers, seed))
    }
}

fn random_pick<S: AsRef<str>>(answers: &[S], seed: u64) -> VoteDecision {
    VoteDecision {
        final_answer: answers[pick_uniform(seed, answers.len())].as_ref().to_string(),
        method: VoteMethod::RandomFallback,
        cluster_size: 1,
        seed_used: seed,
    }
}

/// One SE call, then the decision rule. Returns the verdict alongside the
/// decision so it can be recorded.
pub fn self_ensemble<S: AsRef<str>>(
    backend: &dyn ChatBackend,
    answers: &[S],
    exemplars: &[String],
    seed: u64,
) -> Result<(VoteDecision, SeVerdict), VoteError> {
    let req = se_request(backend.spec(), answers, exemplars)?;
    let resp = backend.complete(&req)?;
    let verdict = parse_se_verdict(&resp.text, answers.len());
    let decision = decide_from_verdict(answers, &verdict, seed).unwrap_or_else(|| {
        log::debug!("SE verdict did not parse, using oracle vote: {:?}", verdict.raw_text);
        let mut d = oracle_vote_unchecked(answers, seed);
        d.method = VoteMethod::OracleFallback;
        d
    });
    Ok((decision, verdict))
}

/// Normalized-equality clusters in order of first occurrence; each cluster
/// lists answer indices ascending.
pub fn clusters<S: AsRef<str>>(answers: &[S]) -> Vec<Vec<usize>> {
    let mut keys: Vec<String> = Vec::new();
    let mut groups: Vec<Vec<usize>> = Vec::new();
    for (i, a) in answers.iter().enumerate() {
        let key = normalize_answer(a.as_ref());
        match keys.iter().position(|k| *k == key) {
            Some(g) => groups[g].push(i),
            None => {
                keys.push(key);
                groups.push(vec![i]);
            }
        }
    }
    groups
}

/// Deterministic majority vote with normalized string equality as "same
/// meaning". Among equally large clusters the one seen first wins.
pub fn oracle_vote<S: AsRef<str>>(answers: &[S], seed: u64) -> Result<VoteDecision, VoteError> {
    if answers.is_empty() {
        return Err(VoteError::EmptyAnswers);
    }
    Ok(oracle_vote_unchecked(answers, seed))
}

fn oracle_vote_unchecked<S: AsRef<str>>(answers: &[S], seed: u64) -> VoteDecision {
    let keys: Vec<String> = answers.iter().map(|a| normalize_answer(a.as_ref())).collect();
    // (first index, size) of the largest cluster; earlier clusters win ties.
    let mut best = (0, 0);
    for (i, key) in keys.iter().enumerate() {
        if keys[..i].contains(key) {
            continue;
        }
        let size = keys[i..].iter().filter(|k| *k == key).count();
        if size > best.1 {
            best = (i, size);
        }
    }
    match best {
        (first, size) if size >= 2 => VoteDecision {
            final_answer: answers[first].as_ref().to_string(),
            method: VoteMethod::Majority,
            cluster_size: size,
            seed_used: seed,
        },
        _ => random_pick(answers, seed),
    }
}

/// Recovers the numbered answer list from an SE prompt built by
/// [`build_se_prompt`]: the numbered lines directly above the instruction.
pub fn answers_from_se_prompt(prompt: &str) -> Vec<String> {
    let body = prompt.strip_suffix(SE_INSTRUCTION).unwrap_or(prompt);
    let mut answers: Vec<String> = Vec::new();
    for line in body.lines().rev() {
        let Some((idx, rest)) = line.split_once(". ") else {
            break;
        };
        let Ok(idx) = idx.parse::<usize>() else { break };
        answers.push(rest.to_string());
        if idx == 0 {
            break;
        }
    }
    answers.reverse();
    answers
}

/// SE reply a perfect "same meaning = normalized equality" model would give:
/// the first largest cluster, or `num: 1` with a singleton when no answers agree.
pub fn clustering_verdict<S: AsRef<str>>(answers: &[S]) -> String {
    let groups = clusters(answers);
    let mut best: Option<&Vec<usize>> = None;
    for g in &groups {
        if best.is_none_or(|b| g.len() > b.len()) {
            best = Some(g);
        }
    }
    let subset = best.cloned().unwrap_or_default();
    let listed = subset.iter().map(usize::to_string).collect::<Vec<_>>().join(", ");
    format!("num: {}\nsubset: [{listed}]", subset.len())
}

/// Responder for a scripted SE mock that clusters by normalized equality.
pub fn clustering_se_responder() -> impl Fn(&ChatRequest) -> Result<String, GatewayError> + Send + Sync + 'static {
    |req: &ChatRequest| Ok(clustering_verdict(&answers_from_se_prompt(&req.last_user_text())))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gateway::{BackendKind, Gateway};

    fn se_mock(reply: &'static str) -> Gateway {
        Gateway::mock(BackendSpec::new("se", BackendKind::ScriptedMock, "m"), move |_| {
            Ok(reply.to_string())
        })
    }

    #[test]
    fn prompt_layout() {
        let p = build_se_prompt(&["chinese", "japanese", "japanese"], &[]).unwrap();
        assert_eq!(p, format!("0. chinese\n1. japanese\n2. japanese\n{SE_INSTRUCTION}"));
        let single = build_se_prompt(&["octopus"], &default_se_exemplars()).unwrap();
        assert!(single.ends_with(&format!("\n\n0. octopus\n{SE_INSTRUCTION}")));
        let empty: [&str; 0] = [];
        assert!(matches!(build_se_prompt(&empty, &[]), Err(VoteError::EmptyAnswers)));
    }

    #[test]
    fn prompt_answers_recoverable() {
        let answers = ["a b", "multi\nline", "", "3"];
        let p = build_se_prompt(&answers, &default_se_exemplars()).unwrap();
        assert_eq!(answers_from_se_prompt(&p), vec!["a b", "multi line", "", "3"]);
    }

    #[test]
    fn verdict_parsing() {
        let v = parse_se_verdict("num: 2\nsubset: [1, 2]", 3);
        assert_eq!((v.num, v.subset_indices.clone(), v.parse_ok), (2, vec![1, 2], true));
        let v = parse_se_verdict("I think num: 3, subset: [0,2,4]", 5);
        assert_eq!((v.num, v.subset_indices.clone(), v.parse_ok), (3, vec![0, 2, 4], true));
        assert!(!parse_se_verdict("all different", 3).parse_ok);
    }

    #[test]
    fn verdict_failures() {
        assert!(!parse_se_verdict("num: 3\nsubset: [0, 1]", 3).parse_ok);
        assert!(!parse_se_verdict("num: 2\nsubset: [0, 5]", 3).parse_ok);
        assert!(!parse_se_verdict("num: 2\nsubset: [1, 1]", 3).parse_ok);
        assert!(!parse_se_verdict("num: 0\nsubset: []", 3).parse_ok);
        assert!(!parse_se_verdict("num: 2\nsubset: [a, b]", 3).parse_ok);
        let v = parse_se_verdict("num: 2\nsubset: [0, 7]", 3);
        assert_eq!(v.subset_indices, vec![0]);
        // First standalone integer outside brackets stands in for num.
        assert!(parse_se_verdict("2 of them: [0, 1]", 3).parse_ok);
    }

    #[test]
    fn figure_three_majority() {
        let (d, v) = self_ensemble(
            &se_mock("num: 2\nsubset: [1, 2]"),
            &["chinese", "japanese", "japanese"],
            &default_se_exemplars(),
            1,
        )
        .unwrap();
        assert!(v.parse_ok);
        assert_eq!(d.final_answer, "japanese");
        assert_eq!(d.method, VoteMethod::Majority);
        assert_eq!(d.cluster_size, 2);
    }

    #[test]
    fn chairs_majority() {
        let answers = ["four", "five", "five", "four", "five"];
        let (d, _) = self_ensemble(&se_mock("num: 3\nsubset: [1, 2, 4]"), &answers, &[], 0).unwrap();
        assert_eq!(d.final_answer, "five");
        assert_eq!(d.cluster_size, 3);
    }

    #[test]
    fn single_answer_random_branch() {
        for seed in [0, 1, 99, u64::MAX] {
            let (d, _) = self_ensemble(&se_mock("num: 1\nsubset: [0]"), &["octopus"], &[], seed).unwrap();
            assert_eq!(d.final_answer, "octopus");
            assert_eq!(d.method, VoteMethod::RandomFallback);
            assert_eq!(d.cluster_size, 1);
        }
    }

    #[test]
    fn num_one_draws_over_all_answers() {
        let answers = ["x", "y", "z"];
        let mut seen = std::collections::BTreeSet::new();
        for seed in 0..64 {
            let (d, _) = self_ensemble(&se_mock("num: 1\nsubset: [2]"), &answers, &[], seed).unwrap();
            assert_eq!(d.final_answer, answers[pick_uniform(seed, 3)]);
            seen.insert(d.final_answer);
        }
        assert_eq!(seen.len(), 3);
    }

    #[test]
    fn unparseable_falls_back_to_oracle() {
        let (d, v) = self_ensemble(&se_mock("they all differ"), &["Dog", "cat", "dog."], &[], 3).unwrap();
        assert!(!v.parse_ok);
        assert_eq!(d.method, VoteMethod::OracleFallback);
        assert_eq!(d.final_answer, "Dog");
        assert_eq!(d.cluster_size, 2);
    }

    #[test]
    fn oracle_examples() {
        let d = oracle_vote(&["Don't walk", "don't walk!", "proceed"], 0).unwrap();
        assert_eq!(d.final_answer, "Don't walk");
        assert_eq!(d.cluster_size, 2);
        assert_eq!(d.method, VoteMethod::Majority);

        let d = oracle_vote(&["a", "b", "a", "b"], 0).unwrap();
        assert_eq!(d.final_answer, "a");

        let d = oracle_vote(&["x", "y", "z"], 17).unwrap();
        assert_eq!(d.method, VoteMethod::RandomFallback);
        assert_eq!(d, oracle_vote(&["x", "y", "z"], 17).unwrap());
        assert!(matches!(oracle_vote::<&str>(&[], 0), Err(VoteError::EmptyAnswers)));
    }

    #[test]
    fn oracle_tie_prefers_earliest_cluster() {
        assert_eq!(oracle_vote(&["b", "a", "a", "b"], 0).unwrap().final_answer, "b");
        assert_eq!(oracle_vote(&["c", "a", "b", "b", "a"], 0).unwrap().final_answer, "a");
    }

    #[test]
    fn clustering_stub_agrees_with_oracle() {
        let gw = Gateway::mock(
            BackendSpec::new("se", BackendKind::ScriptedMock, "m"),
            clustering_se_responder(),
        );
        let answers = ["The cat", "dog", "cat!", "dog", "bird"];
        let (d, _) = self_ensemble(&gw, &answers, &default_se_exemplars(), 5).unwrap();
        assert_eq!(d, oracle_vote(&answers, 5).unwrap());
    }

    #[test]
    fn majority_winners_permutation_equivariant() {
        let answers = vec!["five", "four", "Five", "six", "5"];
        let base = normalize_answer(&oracle_vote(&answers, 0).unwrap().final_answer);
        let mut perm = answers.clone();
        for _ in 0..answers.len() {
            perm.rotate_left(1);
            let got = oracle_vote(&perm, 0).unwrap();
            assert_eq!(normalize_answer(&got.final_answer), base);
        }
    }
}
