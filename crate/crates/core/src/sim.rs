//! Probability that the vote picks the correct answer, under a simple
//! independent-error model.
//!
//! Each of the `k` answers is correct with probability `p`. A wrong answer
//! is either unique (`Distinct`, every error scatters) or one of `m - 1`
//! distractors chosen uniformly (`Mc`, the multiple-choice setting). The
//! exact value comes from enumeration; the Monte-Carlo estimate runs the
//! real [`oracle_vote`] on synthesized answers.

use std::fmt;
use std::str::FromStr;

use rand::{Rng, RngCore};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::rng::{mix_seed, rng_from_seed};
use crate::voter::oracle_vote;

/// Largest `m^k` the multiple-choice enumerator will walk.
pub const MAX_ENUMERATION: u64 = 1 << 24;
const SHARD_TRIALS: u64 = 1 << 16;

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum SimError {
    #[error("p must lie in [0, 1]")]
    BadProbability,
    #[error("k must be >= 1")]
    ZeroVotes,
    #[error("mc mode needs m >= 2")]
    TooFewChoices,
    #[error("enumeration of {0} outcomes exceeds the limit")]
    TooLarge(u64),
    #[error("trials must be >= 1")]
    NoTrials,
    #[error("unknown mode {0:?} (expected distinct or mc:<m>)")]
    BadMode(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum WrongMode {
    Distinct,
    /// Wrong answers uniform over `m - 1` distractors.
    Mc(usize),
}

impl fmt::Display for WrongMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            WrongMode::Distinct => f.write_str("distinct"),
            WrongMode::Mc(m) => write!(f, "mc:{m}"),
        }
    }
}

impl FromStr for WrongMode {
    type Err = SimError;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        if s == "distinct" {
            return Ok(WrongMode::Distinct);
        }
        s.strip_prefix("mc:")
            .and_then(|m| m.parse().ok())
            .map(WrongMode::Mc)
            .ok_or_else(|| SimError::BadMode(s.to_string()))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ClusterModel {
    pub p: f64,
    pub k: usize,
    pub wrong_mode: WrongMode,
}

impl ClusterModel {
    pub fn distinct(p: f64, k: usize) -> Self {
        Self {
            p,
            k,
            wrong_mode: WrongMode::Distinct,
        }
    }

    pub fn validate(&self) -> Result<(), SimError> {
        if !(0.0..=1.0).contains(&self.p) {
            return Err(SimError::BadProbability);
        }
        if self.k == 0 {
            return Err(SimError::ZeroVotes);
        }
        if let WrongMode::Mc(m) = self.wrong_mode {
            if m < 2 {
                return Err(SimError::TooFewChoices);
            }
        }
        Ok(())
    }
}

fn binomial(n: usize, r: usize) -> f64 {
    (0..r).fold(1.0, |acc, i| acc * (n - i) as f64 / (i + 1) as f64)
}

/// Exact success probability.
///
/// Distinct mode: wrong answers never cluster, so two or more correct answers
/// always win, exactly one wins the uniform fallback with probability `1/k`,
/// and none cannot win. Mc mode walks all `m^k` answer sequences and applies
/// the full rule, including wrong-cluster wins and earliest-cluster ties.
pub fn majority_success_prob(model: &ClusterModel) -> Result<f64, SimError> {
    model.validate()?;
    let (p, k) = (model.p, model.k);
    match model.wrong_mode {
        WrongMode::Distinct => Ok((0..=k)
            .map(|c| {
                let weight = binomial(k, c) * p.powi(c as i32) * (1.0 - p).powi((k - c) as i32);
                let win = match c {
                    0 => 0.0,
                    1 => 1.0 / k as f64,
                    _ => 1.0,
                };
                weight * win
            })
            .sum()),
        WrongMode::Mc(m) => enumerate_mc(p, k, m),
    }
}

fn enumerate_mc(p: f64, k: usize, m: usize) -> Result<f64, SimError> {
    let outcomes = (m as u64).checked_pow(k as u32).unwrap_or(u64::MAX);
    if outcomes > MAX_ENUMERATION {
        return Err(SimError::TooLarge(outcomes));
    }
    let wrong_each = (1.0 - p) / (m - 1) as f64;

    let mut seq = vec![0usize; k];
    let mut counts = vec![0usize; m];
    let mut total = 0.0;
    for code in 0..outcomes {
        let mut rest = code;
        for slot in seq.iter_mut() {
            *slot = (rest % m as u64) as usize;
            rest /= m as u64;
        }
        counts.iter_mut().for_each(|c| *c = 0);
        for &s in &seq {
            counts[s] += 1;
        }
        let correct = counts[0];
        let weight = p.powi(correct as i32) * wrong_each.powi((k - correct) as i32);
        if weight == 0.0 {
            continue;
        }
        let largest = *counts.iter().max().expect("m >= 2");
        let win = if largest >= 2 {
            // Earliest-occurring symbol among the largest clusters.
            let winner = seq.iter().find(|&&s| counts[s] == largest).expect("non-empty");
            if *winner == 0 {
                1.0
            } else {
                0.0
            }
        } else {
            correct as f64 / k as f64
        };
        total += weight * win;
    }
    Ok(total)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct McEstimate {
    pub estimate: f64,
    pub stderr: f64,
    pub trials: u64,
}

const CORRECT: &str = "correct";

fn run_shard(model: &ClusterModel, trials: u64, seed: u64) -> u64 {
    // Distinct mode gives every slot its own wrong answer; mc mode shares distractors.
    let wrong: Vec<String> = match model.wrong_mode {
        WrongMode::Distinct => (0..model.k).map(|i| format!("wrong {i}")).collect(),
        WrongMode::Mc(m) => (0..m).map(|d| format!("distractor {d}")).collect(),
    };
    let mut rng = rng_from_seed(seed);
    let mut answers: Vec<&str> = vec![CORRECT; model.k];
    let mut wins = 0;
    for _ in 0..trials {
        for (slot, answer) in answers.iter_mut().enumerate() {
            *answer = if rng.random_bool(model.p) {
                CORRECT
            } else {
                match model.wrong_mode {
                    WrongMode::Mc(m) => &wrong[rng.random_range(1..m)],
                    WrongMode::Distinct => &wrong[slot],
                }
            };
        }
        let vote_seed = rng.next_u64();
        let decision = oracle_vote(&answers, vote_seed).expect("k >= 1");
        if decision.final_answer == CORRECT {
            wins += 1;
        }
    }
    wins
}

/// Seeded Monte-Carlo estimate through the real oracle vote.
///
/// Trials are split into fixed-size shards with derived seeds, so the result
/// depends only on `(model, trials, seed)`, not on how many threads ran.
pub fn monte_carlo_success(model: &ClusterModel, trials: u64, seed: u64) -> Result<McEstimate, SimError> {
    model.validate()?;
    if trials == 0 {
        return Err(SimError::NoTrials);
    }
    let shards: Vec<(u64, u64)> = (0..trials.div_ceil(SHARD_TRIALS))
        .map(|i| {
            let len = SHARD_TRIALS.min(trials - i * SHARD_TRIALS);
            (len, mix_seed(seed, &format!("shard-{i}")))
        })
        .collect();
    let threads = std::thread::available_parallelism()
        .map(|n| n.get())
        .unwrap_or(1)
        .min(shards.len());
    let wins: u64 = if threads <= 1 {
        shards.iter().map(|&(len, s)| run_shard(model, len, s)).sum()
    } else {
        std::thread::scope(|scope| {
            let handles: Vec<_> = (0..threads)
                .map(|t| {
                    let shards = &shards;
                    scope.spawn(move || {
                        shards
                            .iter()
                            .skip(t)
                            .step_by(threads)
                            .map(|&(len, s)| run_shard(model, len, s))
                            .sum::<u64>()
                    })
                })
                .collect();
            handles.into_iter().map(|h| h.join().expect("shard panicked")).sum()
        })
    };
    let estimate = wins as f64 / trials as f64;
    Ok(McEstimate {
        estimate,
        stderr: (estimate * (1.0 - estimate) / trials as f64).sqrt(),
        trials,
    })
}

impl McEstimate {
    /// Standard error of `trials` Bernoulli draws at success rate `p`.
    pub fn stderr_at(&self, p: f64) -> f64 {
        (p * (1.0 - p) / self.trials as f64).sqrt()
    }

    /// Whether the estimate lies within `sigmas` standard errors of `exact`,
    /// with the standard error taken at `exact`. The sample stderr collapses
    /// to zero when every trial agrees.
    pub fn agrees_with(&self, exact: f64, sigmas: f64) -> bool {
        (self.estimate - exact).abs() <= sigmas * self.stderr_at(exact) + f64::EPSILON
    }
}

/// One simulator CSV row.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimRow {
    pub p: f64,
    pub k: usize,
    pub mode: WrongMode,
    pub analytic: f64,
    pub mc: Option<McEstimate>,
}

pub const SIM_CSV_HEADER: &str = "p,k,mode,analytic,mc_estimate,mc_stderr";

pub fn sim_csv(rows: &[SimRow]) -> String {
    let mut out = format!("{SIM_CSV_HEADER}\n");
    for r in rows {
        let (est, se) = match r.mc {
            Some(m) => (format!("{:.6}", m.estimate), format!("{:.6}", m.stderr)),
            None => (String::new(), String::new()),
        };
        out.push_str(&format!("{},{},{},{:.6},{est},{se}\n", r.p, r.k, r.mode, r.analytic));
    }
    out
}
