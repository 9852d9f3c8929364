//! Training-free self-ensemble for visual question answering.
//!
//! Each question is paraphrased N ways by a question-generator model, every
//! variant is answered by a vision-language backend, and the final answer is
//! chosen by a language-model-mediated majority vote over the answer set.
//!
//! The crate is organised bottom-up:
//!
//! * [`model`] and [`normalize`]: shared domain types and answer equality.
//! * [`gateway`]: chat-completion transport (HTTP, replay, scripted mocks) and
//!   the content-addressed response cache.
//! * [`qg`]: paraphrase prompt construction and output parsing.
//! * [`voter`]: the self-ensemble vote and its deterministic oracle.
//! * [`pipeline`]: per-sample orchestration and the batch driver.
//! * [`dataset`], [`eval`]: benchmark ingestion, scoring, sweeps.
//! * [`sim`]: analytic and Monte-Carlo models of the vote.

pub mod config;
pub mod dataset;
pub mod eval;
pub mod gateway;
pub mod model;
pub mod normalize;
pub mod pipeline;
pub mod qg;
pub mod rng;
pub mod sim;
pub mod template;
pub mod voter;

pub use model::{
    AnswerEntry, AnswerSet, PredictionRecord, QuestionSet, Sample, SeVerdict, StageTimings, VoteDecision, VoteMethod,
};
pub use normalize::{mc_select, normalize_answer, McSelection};
