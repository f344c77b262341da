use serde::{Deserialize, Serialize};

use crate::decoder::parse_text;
use crate::registry::{ArgValue, FunctionalCall, Registry};
use crate::tokenizer::Vocabulary;

use super::TrainingError;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct RewardConfig {
    pub w_func: f32,
    pub w_args: f32,
    pub parse_failure_reward: f32,
}

impl Default for RewardConfig {
    fn default() -> Self {
        Self {
            w_func: 0.6,
            w_args: 0.4,
            parse_failure_reward: 0.0,
        }
    }
}

impl RewardConfig {
    pub fn check(&self) -> Result<(), TrainingError> {
        let ok = self.w_func >= 0.0
            && self.w_args >= 0.0
            && (self.w_func + self.w_args - 1.0).abs() < 1e-6
            && (0.0..=1.0).contains(&self.parse_failure_reward);
        if ok {
            Ok(())
        } else {
            Err(TrainingError::InvalidConfig(format!(
                "reward weights {self:?} must be non-negative and sum to 1"
            )))
        }
    }
}

/// Collapses whitespace runs to single spaces and trims the ends.
pub fn normalize_whitespace(s: &str) -> String {
    s.split_whitespace().collect::<Vec<_>>().join(" ")
}

fn arg_matches(a: &ArgValue, b: &ArgValue) -> bool {
    match (a, b) {
        (ArgValue::Str(x), ArgValue::Str(y)) => normalize_whitespace(x) == normalize_whitespace(y),
        (ArgValue::Int(x), ArgValue::Int(y)) => x == y,
        _ => false,
    }
}

/// Scores generated call text against the oracle: `w_func` for the right
/// function plus `w_args` times the fraction of positionally matching
/// arguments. Text that does not parse and validate earns `parse_failure_reward`.
pub fn reward(
    generated: &str,
    oracle: &FunctionalCall,
    config: &RewardConfig,
    registry: &Registry,
    vocab: &Vocabulary,
) -> f32 {
    let Ok(call) = parse_text(generated, vocab, registry) else {
        return config.parse_failure_reward;
    };
    if call.name() != oracle.name() {
        return 0.0;
    }
    let fraction = if oracle.args.is_empty() {
        1.0
    } else {
        let hits = call
            .args
            .iter()
            .zip(&oracle.args)
            .filter(|(a, b)| arg_matches(a, b))
            .count();
        hits as f32 / oracle.args.len() as f32
    };
    config.w_func + config.w_args * fraction
}
