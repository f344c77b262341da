//! Running calls: mock handlers for the demo functions, scoring of any
//! call-producing system against oracle calls, and latency measurement.

mod eval;
mod handlers;
mod latency;

pub use eval::{calls_match, evaluate, record_outputs, BreakdownRow, EvalReport, RecordedOutputs};
pub use handlers::{dispatch, Handler, HandlerResult, HandlerTable};
pub use latency::{
    benchmark_latency, hardware_note, ConditionReport, LatencyReport, Stats, MIN_LATENCY_SAMPLES,
};

use thiserror::Error;

use crate::model::ModelError;
use crate::tokenizer::TokenizerError;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum AgentError {
    #[error("no handler registered for `{0}`")]
    NoHandler(String),
    #[error("malformed recorded-output file: {0}")]
    MalformedRecordedFile(String),
    #[error("latency benchmark needs at least {needed} samples, got {got}")]
    TooFewSamples { needed: usize, got: usize },
    #[error("io: {0}")]
    Io(String),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Tokenizer(#[from] TokenizerError),
}
