//! Fixtures for driving the binary: a temp directory holding a config with
//! replay backends, images, datasets and scripted replies keyed by the same
//! request builders the pipeline uses.

#![allow(dead_code)]

use std::path::{Path, PathBuf};
use std::process::{Command, Output};
use std::sync::Arc;
use std::time::Duration;

use ensemble_vqa::config::{Config, Role};
use ensemble_vqa::dataset::CanonicalRecord;
use ensemble_vqa::gateway::{
    request_digest, BackendKind, BackendSpec, ChatBackend, ChatRequest, Gateway, ResponseStore,
};
use ensemble_vqa::pipeline::{load_image, vlm_request, Backends, DEFAULT_SYSTEM_PROMPT};
use ensemble_vqa::qg::{qg_request, QgTemplate};
use ensemble_vqa::rng::mix_seed;
use ensemble_vqa::voter::{clustering_se_responder, default_se_exemplars, se_request};
use ensemble_vqa::Sample;

pub const BIN: &str = env!("CARGO_BIN_EXE_ensemble-vqa");

const CONFIG: &str = r#"[run]
cache = false

[backend.qg]
kind = "replay"
model = "question-writer"
replay_dir = "replies"

[backend.vlm]
kind = "replay"
model = "vision-answerer"
replay_dir = "replies"

[backend.se]
kind = "replay"
model = "answer-judge"
replay_dir = "replies"
"#;

pub struct ReplayFixture {
    pub dir: tempfile::TempDir,
    store: ResponseStore,
}

impl Default for ReplayFixture {
    fn default() -> Self {
        Self::new()
    }
}

impl ReplayFixture {
    pub fn new() -> Self {
        let dir = tempfile::tempdir().unwrap();
        let config_path = dir.path().join("ensemble-vqa.toml");
        std::fs::write(&config_path, CONFIG).unwrap();
        std::fs::create_dir_all(dir.path().join("images")).unwrap();
        let store = ResponseStore::new(dir.path().join("replies"));
        Self { dir, store }
    }

    pub fn config_path(&self) -> PathBuf {
        self.path("ensemble-vqa.toml")
    }

    pub fn append_config(&self, text: &str) {
        let mut current = std::fs::read_to_string(self.config_path()).unwrap();
        current.push_str(text);
        std::fs::write(self.config_path(), current).unwrap();
    }

    pub fn path(&self, rel: &str) -> PathBuf {
        self.dir.path().join(rel)
    }

    pub fn spec_of(&self, name: &str, role: Role) -> BackendSpec {
        Config::load(&self.config_path())
            .unwrap()
            .backend_spec(name, role)
            .unwrap()
    }

    fn spec(&self, role: Role) -> BackendSpec {
        self.spec_of(role.as_str(), role)
    }

    pub fn put(&self, req: &ChatRequest, reply: &str) {
        self.store.put(&request_digest(req), reply).unwrap();
    }

    /// Writes `images/<name>` with content unique to the name.
    pub fn image(&self, name: &str) -> PathBuf {
        let p = self.path("images").join(name);
        let mut bytes = vec![0xff, 0xd8, 0xff, 0xe0];
        bytes.extend_from_slice(name.as_bytes());
        std::fs::write(&p, bytes).unwrap();
        p
    }

    pub fn script_qg(&self, q0: &str, n: usize, reply: &str) {
        let req = qg_request(&self.spec(Role::Qg), &QgTemplate::default(), q0, n).unwrap();
        self.put(&req, reply);
    }

    pub fn script_vlm(&self, image: &Path, question: &str, choices: Option<&[String]>, reply: &str) {
        let part = load_image(&image.display().to_string()).unwrap();
        let req = vlm_request(&self.spec(Role::Vlm), DEFAULT_SYSTEM_PROMPT, part, question, choices);
        self.put(&req, reply);
    }

    pub fn script_se(&self, answers: &[&str], reply: &str) {
        let req = se_request(&self.spec(Role::Se), answers, &default_se_exemplars()).unwrap();
        self.put(&req, reply);
    }

    /// Scripts one open-ended sample end to end: paraphrases, one answer per
    /// question (original first) and, when given, the SE verdict.
    pub fn script_sample(&self, image: &Path, q0: &str, paraphrases: &[&str], answers: &[&str], se: Option<&str>) {
        assert_eq!(paraphrases.len() + 1, answers.len());
        if !paraphrases.is_empty() {
            let listed: String = paraphrases
                .iter()
                .enumerate()
                .map(|(i, p)| format!("{}. {p}\n", i + 1))
                .collect();
            self.script_qg(q0, paraphrases.len(), &listed);
        }
        let questions = std::iter::once(q0).chain(paraphrases.iter().copied());
        for (q, a) in questions.zip(answers) {
            self.script_vlm(image, q, None, a);
        }
        if let Some(verdict) = se {
            self.script_se(answers, verdict);
        }
    }

    pub fn write_jsonl(&self, name: &str, records: &[CanonicalRecord]) -> PathBuf {
        let p = self.path(name);
        let text: String = records
            .iter()
            .map(|r| serde_json::to_string(r).unwrap() + "\n")
            .collect();
        std::fs::write(&p, text).unwrap();
        p
    }

    pub fn cli(&self, args: &[&str]) -> Output {
        Command::new(BIN)
            .args(args)
            .current_dir(self.dir.path())
            .env_remove("ENSEMBLE_VQA_CACHE_DIR")
            .env_remove("RUST_LOG")
            .output()
            .unwrap()
    }

    pub fn read(&self, rel: &str) -> String {
        std::fs::read_to_string(self.path(rel)).unwrap()
    }
}

pub fn record(id: &str, image: &str, question: &str, answers: &[&str]) -> CanonicalRecord {
    CanonicalRecord {
        id: id.into(),
        image: image.into(),
        question: question.into(),
        answers: Some(answers.iter().map(|a| a.to_string()).collect()),
        choices: None,
        correct_choice_idx: None,
    }
}

pub fn stdout(out: &Output) -> String {
    String::from_utf8_lossy(&out.stdout).into_owned()
}

pub fn describe(out: &Output) -> String {
    format!(
        "status {:?}; stdout: {}; stderr: {}",
        out.status.code(),
        String::from_utf8_lossy(&out.stdout).trim(),
        String::from_utf8_lossy(&out.stderr).trim()
    )
}

// Synthetic world: mock backends whose replies are pure functions of the request.

pub struct Mocks {
    pub qg: Arc<Gateway>,
    pub vlm: Arc<Gateway>,
    pub se: Arc<Gateway>,
}

impl Mocks {
    pub fn new(p: f64, seed: u64) -> Self {
        Self {
            qg: Arc::new(qg_mock()),
            vlm: Arc::new(bernoulli_vlm(p, seed)),
            se: Arc::new(Gateway::mock(mock_spec("se"), clustering_se_responder())),
        }
    }

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

fn mock_spec(id: &str) -> BackendSpec {
    BackendSpec::new(id, BackendKind::ScriptedMock, format!("{id}-model"))
}

pub fn synthetic_samples(dir: &Path, count: usize) -> Vec<Sample> {
    let image = dir.join("synthetic.png");
    std::fs::write(&image, [0x89, b'P', b'N', b'G']).unwrap();
    (0..count)
        .map(|i| {
            let id = format!("s{i:04}");
            Sample {
                question: format!("Question {id}: what is shown?"),
                gold_answers: Some(vec![format!("answer {id}")]),
                id,
                image_ref: image.display().to_string(),
                choices: None,
                correct_choice_idx: None,
                dataset_tag: "synthetic".into(),
            }
        })
        .collect()
}

fn qg_mock() -> Gateway {
    Gateway::mock(mock_spec("qg"), |req: &ChatRequest| {
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

/// Right with probability `p`, independently per question; wrong answers never coincide.
fn bernoulli_vlm(p: f64, seed: u64) -> Gateway {
    Gateway::mock(mock_spec("vlm"), move |req: &ChatRequest| {
        let question = req.last_user_text();
        let h = mix_seed(seed, &question);
        let start = question.find("Question ").expect("synthetic question") + "Question ".len();
        let id = &question[start..start + question[start..].find(':').expect("synthetic question")];
        let u = (h >> 11) as f64 / (1u64 << 53) as f64;
        Ok(if u < p {
            format!("answer {id}")
        } else {
            format!("wrong {h:016x}")
        })
    })
}

pub fn elapsed_ok(started: std::time::Instant, budget: Duration) -> Result<Duration, String> {
    let took = started.elapsed();
    if took < budget {
        Ok(took)
    } else {
        Err(format!("took {took:?}, budget {budget:?}"))
    }
}
