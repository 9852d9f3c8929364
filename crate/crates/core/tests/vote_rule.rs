//! Self-ensemble decisions checked against an independent reading of the
//! vote rule, exhaustively over small answer sets.

use ensemble_vqa::gateway::{BackendKind, BackendSpec, Gateway};
use ensemble_vqa::rng::pick_uniform;
use ensemble_vqa::voter::{decide_from_verdict, default_se_exemplars, oracle_vote, parse_se_verdict, self_ensemble};
use ensemble_vqa::{normalize_answer, SeVerdict, VoteMethod};
use proptest::prelude::*;

/// Three meanings, each with surface forms that normalize together.
const ALPHABET: [&[&str]; 3] = [
    &["two dogs", "Two dogs.", "2 dogs"],
    &["red", "Red!", " red "],
    &["the bench", "bench", "Bench"],
];

fn sequences(k: usize) -> Vec<Vec<usize>> {
    let mut out = vec![vec![]];
    for _ in 0..k {
        out = out
            .into_iter()
            .flat_map(|p| (0..ALPHABET.len()).map(move |s| [p.clone(), vec![s]].concat()))
            .collect();
    }
    out
}

fn render(symbols: &[usize], form_shift: usize) -> Vec<String> {
    symbols
        .iter()
        .enumerate()
        .map(|(i, &s)| {
            let forms = ALPHABET[s];
            forms[(i + form_shift) % forms.len()].to_string()
        })
        .collect()
}

/// Largest symbol group, earliest first occurrence winning ties, from the
/// symbol labels rather than from normalization.
fn designated_cluster(symbols: &[usize]) -> Vec<usize> {
    let mut best: Vec<usize> = Vec::new();
    let mut seen = Vec::new();
    for &s in symbols {
        if seen.contains(&s) {
            continue;
        }
        seen.push(s);
        let members: Vec<usize> = (0..symbols.len()).filter(|&i| symbols[i] == s).collect();
        if members.len() > best.len() {
            best = members;
        }
    }
    best
}

fn scripted_se(reply: String) -> Gateway {
    Gateway::mock(BackendSpec::new("se", BackendKind::ScriptedMock, "judge"), move |_| {
        Ok(reply.clone())
    })
}

fn verdict_text(num: usize, subset: &[usize]) -> String {
    let listed: Vec<String> = subset.iter().map(usize::to_string).collect();
    format!("num: {num}\nsubset: [{}]", listed.join(", "))
}

#[test]
fn surface_forms_cluster_as_intended() {
    for forms in ALPHABET {
        let keys: Vec<String> = forms.iter().map(|f| normalize_answer(f)).collect();
        assert!(keys.iter().all(|k| *k == keys[0]), "{forms:?} -> {keys:?}");
    }
}

#[test]
fn self_ensemble_agrees_with_oracle_exhaustively() {
    let exemplars = default_se_exemplars();
    let mut checked = 0;
    for k in 1..=5 {
        for symbols in sequences(k) {
            for shift in 0..3 {
                let answers = render(&symbols, shift);
                let cluster = designated_cluster(&symbols);
                let verdicts: Vec<(usize, Vec<usize>)> = if cluster.len() >= 2 {
                    vec![(cluster.len(), cluster.clone())]
                } else {
                    (0..k).map(|i| (1, vec![i])).collect()
                };
                for (num, subset) in verdicts {
                    for seed in [0, 1, 0xdead_beef] {
                        let se = scripted_se(verdict_text(num, &subset));
                        let (decision, verdict) = self_ensemble(&se, &answers, &exemplars, seed).unwrap();
                        let oracle = oracle_vote(&answers, seed).unwrap();
                        assert!(verdict.parse_ok);
                        assert_eq!(decision, oracle, "answers={answers:?} num={num} subset={subset:?}");
                        checked += 1;
                    }
                }
            }
        }
    }
    assert!(checked > 3000);
}

/// Every (num, subset) for k <= 4: consistent verdicts decide as a function of
/// (answers, num, subset, seed) alone; inconsistent ones do not parse.
#[test]
fn every_verdict_follows_the_rule() {
    for k in 1..=4usize {
        let answers: Vec<String> = (0..k).map(|i| format!("answer {i}")).collect();
        for mask in 1u32..(1 << k) {
            let subset: Vec<usize> = (0..k).filter(|i| mask & (1 << i) != 0).collect();
            for num in 1..=k {
                let raw = verdict_text(num, &subset);
                let verdict = parse_se_verdict(&raw, k);
                if num != subset.len() {
                    assert!(!verdict.parse_ok, "{raw}");
                    assert_eq!(decide_from_verdict(&answers, &verdict, 1), None);
                    continue;
                }
                assert!(verdict.parse_ok, "{raw}");
                for seed in [3u64, 99] {
                    let d = decide_from_verdict(&answers, &verdict, seed).unwrap();
                    if num > 1 {
                        assert_eq!(d.final_answer, answers[subset[0]]);
                        assert_eq!(d.method, VoteMethod::Majority);
                        assert_eq!(d.cluster_size, num);
                    } else {
                        assert_eq!(d.final_answer, answers[pick_uniform(seed, k)]);
                        assert_eq!(d.method, VoteMethod::RandomFallback);
                    }
                    assert_eq!(d.seed_used, seed);
                }
            }
        }
    }
}

#[test]
fn unparseable_verdicts_fall_back_to_oracle() {
    let answers = ["four", "five", "five", "four", "five"];
    for raw in ["I am not sure", "num: 9\nsubset: [0, 1]", "num: 2\nsubset: [7]", ""] {
        let (decision, verdict) = self_ensemble(&scripted_se(raw.into()), &answers, &[], 4).unwrap();
        assert!(!verdict.parse_ok, "{raw:?}");
        assert_eq!(decision.method, VoteMethod::OracleFallback);
        assert_eq!(decision.final_answer, "five");
        assert_eq!(decision.cluster_size, 3);
    }
}

fn answers_strategy() -> impl Strategy<Value = Vec<String>> {
    proptest::collection::vec(
        prop_oneof![
            Just("cat"),
            Just("Cat."),
            Just("dog"),
            Just("1"),
            Just("one"),
            Just("bird")
        ],
        1..7,
    )
    .prop_map(|v| v.into_iter().map(String::from).collect())
}

proptest! {
    #[test]
    fn oracle_majority_is_permutation_equivariant(
        answers in answers_strategy(),
        perm_seed in any::<u64>(),
        seed in any::<u64>(),
    ) {
        let d = oracle_vote(&answers, seed).unwrap();
        prop_assume!(d.method == VoteMethod::Majority);
        let mut permuted = answers.clone();
        let mut rng = ensemble_vqa::rng::rng_from_seed(perm_seed);
        use rand::seq::SliceRandom;
        permuted.shuffle(&mut rng);
        let p = oracle_vote(&permuted, seed).unwrap();
        // Ties may resolve to another equally large cluster; its size must match.
        prop_assert_eq!(p.cluster_size, d.cluster_size);
        let sizes = |a: &[String], key: &str| a.iter().filter(|x| normalize_answer(x) == key).count();
        prop_assert_eq!(sizes(&answers, &normalize_answer(&p.final_answer)), d.cluster_size);
        let unique_max = ensemble_vqa::voter::clusters(&answers)
            .iter()
            .filter(|c| c.len() == d.cluster_size)
            .count() == 1;
        if unique_max {
            prop_assert_eq!(normalize_answer(&p.final_answer), normalize_answer(&d.final_answer));
        }
    }

    #[test]
    fn decisions_are_seed_deterministic(
        answers in answers_strategy(),
        num in 1usize..7,
        mask in 1u32..64,
        seed in any::<u64>(),
    ) {
        let k = answers.len();
        let subset: Vec<usize> = (0..k).filter(|i| mask & (1 << i) != 0).collect();
        let verdict = parse_se_verdict(&verdict_text(num, &subset), k);
        let a = decide_from_verdict(&answers, &verdict, seed);
        let b = std::thread::scope(|s| s.spawn(|| decide_from_verdict(&answers, &verdict, seed)).join().unwrap());
        prop_assert_eq!(a, b);
    }

    #[test]
    fn verdict_parse_is_total(raw in ".{0,80}", k in 1usize..8) {
        let v: SeVerdict = parse_se_verdict(&raw, k);
        if v.parse_ok {
            prop_assert!(v.num >= 1 && v.num <= k);
            prop_assert!(v.subset_indices.iter().all(|&i| i < k));
        }
    }
}
