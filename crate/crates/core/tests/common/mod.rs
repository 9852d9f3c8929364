//! Synthetic world shared by the integration tests: mock backends whose
//! replies are pure functions of the request.

#![allow(dead_code)]

use std::path::Path;
use std::sync::Arc;
use std::time::Duration;

use ensemble_vqa::gateway::{BackendKind, BackendSpec, ChatBackend, ChatRequest, Gateway};
use ensemble_vqa::pipeline::Backends;
use ensemble_vqa::rng::mix_seed;
use ensemble_vqa::voter::clustering_se_responder;
use ensemble_vqa::Sample;

pub struct Mocks {
    pub qg: Arc<Gateway>,
    pub vlm: Arc<Gateway>,
    pub se: Arc<Gateway>,
}

impl Mocks {
    pub fn backends(&self) -> Backends {
        Backends {
            qg: Arc::clone(&self.qg) as Arc<dyn ChatBackend>,
            vlm: Arc::clone(&self.vlm) as Arc<dyn ChatBackend>,
            se: Arc::clone(&self.se) as Arc<dyn ChatBackend>,
        }
    }

    pub fn calls(&self) -> (usize, usize, usize) {
        (self.qg.calls(), self.vlm.calls(), self.se.calls())
    }
}

fn spec(id: &str) -> BackendSpec {
    BackendSpec::new(id, BackendKind::ScriptedMock, format!("{id}-model"))
}

/// One PNG-ish file shared by every synthetic sample.
pub fn write_image(dir: &Path) -> String {
    let p = dir.join("synthetic.png");
    std::fs::write(&p, [0x89, b'P', b'N', b'G', 0, 1, 2, 3]).unwrap();
    p.display().to_string()
}

pub fn question_for(id: &str) -> String {
    format!("Question {id}: what is shown?")
}

pub fn gold_for(id: &str) -> String {
    format!("answer {id}")
}

pub fn samples(image: &str, count: usize) -> Vec<Sample> {
    (0..count)
        .map(|i| {
            let id = format!("s{i:04}");
            Sample {
                question: question_for(&id),
                gold_answers: Some(vec![gold_for(&id)]),
                id,
                image_ref: image.to_string(),
                choices: None,
                correct_choice_idx: None,
                dataset_tag: "synthetic".into(),
            }
        })
        .collect()
}

/// Sample id embedded in a question or paraphrase.
fn sample_id_of(text: &str) -> &str {
    let start = text
        .find("Question ")
        .map(|i| i + "Question ".len())
        .expect("synthetic question");
    let rest = &text[start..];
    &rest[..rest.find(':').expect("synthetic question")]
}

/// QG mock: six numbered rewordings of the question above the instruction.
pub fn qg_mock() -> Gateway {
    Gateway::mock(spec("qg"), |req: &ChatRequest| {
        let prompt = req.last_user_text();
        let q0 = prompt
            .lines()
            .rev()
            .find_map(|l| l.strip_prefix("0. "))
            .expect("prompt lists q0")
            .to_string();
        Ok((1..=6).map(|j| format!("{j}. {q0} (rewording {j})\n")).collect())
    })
}

fn unit(x: u64) -> f64 {
    (x >> 11) as f64 / (1u64 << 53) as f64
}

/// VLM mock that is right with probability `p`, independently per question.
/// Wrong answers never coincide. `max_delay_ms > 0` adds a request-dependent
/// sleep to scramble completion order.
pub fn bernoulli_vlm(p: f64, seed: u64, max_delay_ms: u64) -> Gateway {
    Gateway::mock(spec("vlm"), move |req: &ChatRequest| {
        let question = req.last_user_text();
        let h = mix_seed(seed, &question);
        if max_delay_ms > 0 {
            std::thread::sleep(Duration::from_millis(h % (max_delay_ms + 1)));
        }
        let id = sample_id_of(&question);
        Ok(if unit(h) < p {
            gold_for(id)
        } else {
            format!("wrong {h:016x}")
        })
    })
}

pub fn clustering_se() -> Gateway {
    Gateway::mock(spec("se"), clustering_se_responder())
}

pub fn mocks(p: f64, seed: u64, max_delay_ms: u64) -> Mocks {
    Mocks {
        qg: Arc::new(qg_mock()),
        vlm: Arc::new(bernoulli_vlm(p, seed, max_delay_ms)),
        se: Arc::new(clustering_se()),
    }
}
