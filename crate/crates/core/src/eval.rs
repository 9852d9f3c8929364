//! Scoring, aggregation and the N-sweep.

use std::collections::{BTreeMap, HashMap};
use std::fmt;
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::model::{PredictionRecord, Sample};
use crate::normalize::normalize_answer;
use crate::pipeline::{
    read_ledger, run_dataset, Backends, LedgerEntry, PipelineError, RunConfig, RunManifest, LEDGER_FILE,
};

pub const SWEEP_CSV: &str = "sweep.csv";
pub const SWEEP_REPORT: &str = "sweep_report.json";
pub const REPORT_FILE: &str = "report.json";

#[derive(Debug, Error)]
pub enum EvalError {
    #[error("record {record} does not match sample {sample}")]
    IdMismatch { record: String, sample: String },
    #[error("ledger record {0} has no matching sample")]
    UnknownSample(String),
    #[error("duplicate ledger record for sample {0}")]
    DuplicateRecord(String),
    #[error("sample {0} is not scorable")]
    Unscorable(String),
    #[error("n_values must be non-empty")]
    NoNValues,
    #[error("writing {path}: {reason}")]
    Io { path: String, reason: String },
    #[error(transparent)]
    Pipeline(#[from] PipelineError),
}

/// 1 if the record answers the sample correctly, else 0.
///
/// Multiple-choice samples compare choice indices; free-form samples compare
/// the normalized final answer against every normalized gold answer.
pub fn score_record(record: &PredictionRecord, sample: &Sample) -> Result<u8, EvalError> {
    if record.sample_id != sample.id {
        return Err(EvalError::IdMismatch {
            record: record.sample_id.clone(),
            sample: sample.id.clone(),
        });
    }
    if let Some(correct) = sample.correct_choice_idx {
        return Ok(u8::from(record.mc_choice_idx == Some(correct)));
    }
    let gold = sample
        .gold_answers
        .as_ref()
        .filter(|g| !g.is_empty())
        .ok_or_else(|| EvalError::Unscorable(sample.id.clone()))?;
    let predicted = normalize_answer(&record.decision.final_answer);
    Ok(u8::from(gold.iter().any(|g| normalize_answer(g) == predicted)))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub dataset_tag: String,
    pub n: usize,
    pub total: usize,
    pub correct: usize,
    /// `None` when nothing was scored.
    pub accuracy: Option<f64>,
    pub skipped: usize,
    pub method_histogram: BTreeMap<String, usize>,
    pub config_digest: String,
}

impl fmt::Display for EvalReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self.accuracy {
            Some(a) => write!(f, "accuracy={a:.4} total={}", self.total),
            None => write!(f, "accuracy=undefined total={}", self.total),
        }
    }
}

/// Scores every completed ledger record. Samples without a completed record
/// count as skipped.
pub fn aggregate(
    ledger: &[LedgerEntry],
    samples: &[Sample],
    n: usize,
    config_digest: &str,
) -> Result<EvalReport, EvalError> {
    let by_id: HashMap<&str, &Sample> = samples.iter().map(|s| (s.id.as_str(), s)).collect();
    let mut scored = std::collections::HashSet::new();
    let mut correct = 0usize;
    let mut method_histogram = BTreeMap::new();
    for record in ledger.iter().filter_map(LedgerEntry::record) {
        let sample = by_id
            .get(record.sample_id.as_str())
            .ok_or_else(|| EvalError::UnknownSample(record.sample_id.clone()))?;
        if !scored.insert(record.sample_id.as_str()) {
            return Err(EvalError::DuplicateRecord(record.sample_id.clone()));
        }
        correct += usize::from(score_record(record, sample)?);
        *method_histogram
            .entry(record.decision.method.as_str().to_string())
            .or_insert(0) += 1;
    }
    let total = scored.len();
    Ok(EvalReport {
        dataset_tag: samples.first().map(|s| s.dataset_tag.clone()).unwrap_or_default(),
        n,
        total,
        correct,
        accuracy: (total > 0).then(|| correct as f64 / total as f64),
        skipped: samples.len() - total,
        method_histogram,
        config_digest: config_digest.to_string(),
    })
}

/// Aggregates a run directory written by [`run_dataset`], using its manifest.
pub fn evaluate_run(run_dir: &Path, samples: &[Sample]) -> Result<EvalReport, EvalError> {
    let ledger = read_ledger(&run_dir.join(LEDGER_FILE))?;
    let manifest_path = run_dir.join(crate::pipeline::MANIFEST_FILE);
    let (n, digest) = if manifest_path.exists() {
        let m = RunManifest::load(&manifest_path)?;
        (m.n, m.config_digest)
    } else {
        let n = ledger
            .iter()
            .filter_map(LedgerEntry::record)
            .map(|r| r.n_used)
            .next()
            .unwrap_or(0);
        (n, String::new())
    };
    aggregate(&ledger, samples, n, &digest)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub n: usize,
    pub accuracy: Option<f64>,
    pub total: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepFailure {
    pub n: usize,
    pub error: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepReport {
    pub reports: Vec<EvalReport>,
    pub failures: Vec<SweepFailure>,
}

impl SweepReport {
    pub fn rows(&self) -> Vec<SweepRow> {
        self.reports
            .iter()
            .map(|r| SweepRow {
                n: r.n,
                accuracy: r.accuracy,
                total: r.total,
            })
            .collect()
    }
}

/// `n,accuracy,total` with LF endings; undefined accuracy is an empty field.
pub fn sweep_csv(rows: &[SweepRow]) -> String {
    let mut out = String::from("n,accuracy,total\n");
    for r in rows {
        let acc = r.accuracy.map(|a| format!("{a:.6}")).unwrap_or_default();
        out.push_str(&format!("{},{acc},{}\n", r.n, r.total));
    }
    out
}

/// Runs the dataset once per distinct `n` (ascending) under `out_dir/n<N>/`
/// and writes `sweep.csv` plus `sweep_report.json`. Backends keep their cache
/// across cells, so repeated VLM requests are only paid for once.
pub fn sweep_n(
    backends: &Backends,
    base: &RunConfig,
    samples: &[Sample],
    n_values: &[usize],
    out_dir: &Path,
) -> Result<SweepReport, EvalError> {
    if n_values.is_empty() {
        return Err(EvalError::NoNValues);
    }
    let mut ns = n_values.to_vec();
    ns.sort_unstable();
    ns.dedup();

    let mut report = SweepReport {
        reports: Vec::new(),
        failures: Vec::new(),
    };
    for n in ns {
        let config = RunConfig { n, ..base.clone() };
        let cell = out_dir.join(format!("n{n}"));
        let outcome = run_dataset(backends, &config, samples, &cell)
            .map_err(EvalError::from)
            .and_then(|_| evaluate_run(&cell, samples));
        match outcome {
            Ok(r) => report.reports.push(r),
            Err(e) => {
                log::error!("sweep cell n={n} failed: {e}");
                report.failures.push(SweepFailure {
                    n,
                    error: e.to_string(),
                });
            }
        }
    }

    write_file(&out_dir.join(SWEEP_CSV), &sweep_csv(&report.rows()))?;
    write_file(
        &out_dir.join(SWEEP_REPORT),
        &(serde_json::to_string_pretty(&report).expect("report serializes") + "\n"),
    )?;
    Ok(report)
}

pub fn write_file(path: &Path, contents: &str) -> Result<(), EvalError> {
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        std::fs::create_dir_all(parent).map_err(|e| EvalError::Io {
            path: parent.display().to_string(),
            reason: e.to_string(),
        })?;
    }
    std::fs::write(path, contents).map_err(|e| EvalError::Io {
        path: path.display().to_string(),
        reason: e.to_string(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{AnswerSet, BackendIds, QuestionSet, StageTimings, VoteDecision, VoteMethod};
    use proptest::prelude::*;

    fn sample(id: &str, gold: &[&str], correct_idx: Option<usize>) -> Sample {
        Sample {
            id: id.into(),
            image_ref: "i.png".into(),
            question: "q?".into(),
            choices: correct_idx.map(|_| vec!["four".into(), "five".into(), "six".into()]),
            correct_choice_idx: correct_idx,
            gold_answers: (!gold.is_empty()).then(|| gold.iter().map(|g| g.to_string()).collect()),
            dataset_tag: "t".into(),
        }
    }

    fn record(id: &str, answer: &str, mc: Option<usize>, method: VoteMethod) -> PredictionRecord {
        PredictionRecord {
            sample_id: id.into(),
            question_set: QuestionSet::new(id, "q?", vec![], 0).unwrap(),
            answer_set: AnswerSet::from_texts(id, [answer]),
            verdict: None,
            decision: VoteDecision {
                final_answer: answer.into(),
                method,
                cluster_size: 1,
                seed_used: 0,
            },
            mc_choice_idx: mc,
            backend_ids: BackendIds {
                qg: "qg".into(),
                vlm: "vlm".into(),
                se: "se".into(),
            },
            n_used: 0,
            failed_questions: vec![],
            timings: StageTimings::default(),
        }
    }

    #[test]
    fn score_examples() {
        let m = VoteMethod::Majority;
        assert_eq!(
            score_record(&record("a", "Japanese", None, m), &sample("a", &["japanese"], None)).unwrap(),
            1
        );
        assert_eq!(
            score_record(&record("a", "x", Some(1), m), &sample("a", &[], Some(1))).unwrap(),
            1
        );
        assert_eq!(
            score_record(&record("a", "proceed", None, m), &sample("a", &["don't walk"], None)).unwrap(),
            0
        );
        assert!(matches!(
            score_record(&record("a", "x", None, m), &sample("b", &["x"], None)),
            Err(EvalError::IdMismatch { .. })
        ));
    }

    #[test]
    fn aggregate_counts() {
        let samples: Vec<Sample> = (0..10).map(|i| sample(&format!("s{i}"), &["yes"], None)).collect();
        let ledger: Vec<LedgerEntry> = (0..10)
            .map(|i| {
                let answer = if i < 7 { "yes" } else { "no" };
                let method = if i % 2 == 0 {
                    VoteMethod::Majority
                } else {
                    VoteMethod::RandomFallback
                };
                LedgerEntry::Ok(record(&format!("s{i}"), answer, None, method))
            })
            .collect();
        let r = aggregate(&ledger, &samples, 2, "d").unwrap();
        assert_eq!((r.total, r.correct, r.skipped), (10, 7, 0));
        assert_eq!(r.accuracy, Some(0.7));
        assert_eq!(r.method_histogram.values().sum::<usize>(), r.total);
        assert_eq!(r.to_string(), "accuracy=0.7000 total=10");

        let empty = aggregate(&[], &samples, 2, "d").unwrap();
        assert_eq!((empty.total, empty.skipped, empty.accuracy), (0, 10, None));
        assert_eq!(empty.to_string(), "accuracy=undefined total=0");
    }

    #[test]
    fn aggregate_rejects_unknown_and_duplicates() {
        let samples = vec![sample("a", &["x"], None)];
        let unknown = vec![LedgerEntry::Ok(record("zzz", "x", None, VoteMethod::Majority))];
        assert!(matches!(
            aggregate(&unknown, &samples, 0, ""),
            Err(EvalError::UnknownSample(_))
        ));
        let dup = vec![
            LedgerEntry::Ok(record("a", "x", None, VoteMethod::Majority)),
            LedgerEntry::Ok(record("a", "x", None, VoteMethod::Majority)),
        ];
        assert!(matches!(
            aggregate(&dup, &samples, 0, ""),
            Err(EvalError::DuplicateRecord(_))
        ));
    }

    #[test]
    fn skip_entries_count_as_skipped() {
        let samples = vec![sample("a", &["x"], None), sample("b", &["x"], None)];
        let ledger = vec![
            LedgerEntry::Ok(record("a", "x", None, VoteMethod::Majority)),
            LedgerEntry::Skipped {
                sample_id: "b".into(),
                error: "boom".into(),
            },
        ];
        let r = aggregate(&ledger, &samples, 0, "").unwrap();
        assert_eq!((r.total, r.correct, r.skipped), (1, 1, 1));
    }

    #[test]
    fn csv_format() {
        let rows = vec![
            SweepRow {
                n: 0,
                accuracy: Some(0.5),
                total: 2,
            },
            SweepRow {
                n: 2,
                accuracy: None,
                total: 0,
            },
        ];
        assert_eq!(sweep_csv(&rows), "n,accuracy,total\n0,0.500000,2\n2,,0\n");
    }

    proptest! {
        #[test]
        fn shuffle_invariant_and_bounded(
            outcomes in proptest::collection::vec((any::<bool>(), any::<bool>()), 0..30),
            rotate in 0usize..30,
        ) {
            let samples: Vec<Sample> = (0..outcomes.len()).map(|i| sample(&format!("s{i}"), &["yes"], None)).collect();
            let mut ledger: Vec<LedgerEntry> = outcomes
                .iter()
                .enumerate()
                .filter(|(_, (present, _))| *present)
                .map(|(i, (_, ok))| LedgerEntry::Ok(record(&format!("s{i}"), if *ok { "yes" } else { "no" }, None, VoteMethod::Majority)))
                .collect();
            let a = aggregate(&ledger, &samples, 1, "d").unwrap();
            if !ledger.is_empty() {
                let k = rotate % ledger.len();
                ledger.rotate_left(k);
                ledger.reverse();
            }
            let b = aggregate(&ledger, &samples, 1, "d").unwrap();
            prop_assert_eq!(&a, &b);
            if let Some(acc) = a.accuracy {
                prop_assert!((0.0..=1.0).contains(&acc));
                prop_assert_eq!(acc, a.correct as f64 / a.total as f64);
            }
            prop_assert_eq!(a.correct + (a.total - a.correct), a.total);
            prop_assert_eq!(a.total + a.skipped, samples.len());
        }
    }
}
