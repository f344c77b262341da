use std::collections::HashMap;
use std::fmt;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::AgentError;
use crate::decoder::{parse_text, CallDecoder};
use crate::model::{Constraint, GenerationConfig, Model};
use crate::numerics::{Rng, SeedStream};
use crate::registry::{ArgValue, FunctionalCall, Registry};
use crate::tokenizer::Vocabulary;
use crate::training::{normalize_whitespace, reward, RewardConfig, TaskItem};
use crate::world::Language;

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
struct RecordedLine {
    example_id: String,
    output_text: String,
}

/// Call texts produced by some system, keyed by example id.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct RecordedOutputs {
    order: Vec<String>,
    texts: HashMap<String, String>,
}

impl RecordedOutputs {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, id: &str, text: &str) -> Result<(), AgentError> {
        if self
            .texts
            .insert(id.to_string(), text.to_string())
            .is_some()
        {
            return Err(AgentError::MalformedRecordedFile(format!(
                "duplicate example_id `{id}`"
            )));
        }
        self.order.push(id.to_string());
        Ok(())
    }

    pub fn get(&self, id: &str) -> Option<&str> {
        self.texts.get(id).map(String::as_str)
    }

    pub fn len(&self) -> usize {
        self.order.len()
    }

    pub fn is_empty(&self) -> bool {
        self.order.is_empty()
    }

    /// Parses JSON lines of `{example_id, output_text}`.
    pub fn parse(text: &str) -> Result<Self, AgentError> {
        let mut out = Self::new();
        for (n, line) in text.lines().enumerate() {
            if line.trim().is_empty() {
                continue;
            }
            let r: RecordedLine = serde_json::from_str(line)
                .map_err(|e| AgentError::MalformedRecordedFile(format!("line {}: {e}", n + 1)))?;
            out.insert(&r.example_id, &r.output_text)?;
        }
        Ok(out)
    }

    pub fn load(path: &Path) -> Result<Self, AgentError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| AgentError::Io(format!("{}: {e}", path.display())))?;
        Self::parse(&text)
    }

    pub fn to_jsonl(&self) -> String {
        let mut s = String::new();
        for id in &self.order {
            let line = RecordedLine {
                example_id: id.clone(),
                output_text: self.texts[id].clone(),
            };
            s.push_str(&serde_json::to_string(&line).expect("strings serialize"));
            s.push('\n');
        }
        s
    }
}

/// Runs the model on every example and keeps the decoded output text. With
/// the grammar constraint on, decoding is masked by the registry's decoder.
pub fn record_outputs(
    model: &Model,
    items: &[TaskItem],
    registry: &Registry,
    vocab: &Vocabulary,
    config: &GenerationConfig,
    seed: u64,
) -> Result<RecordedOutputs, AgentError> {
    let decoder = CallDecoder::constrained(vocab, registry);
    let grammar = (config.constraint == Constraint::GrammarMask).then_some(&decoder);
    let mut rng = Rng::new(seed, SeedStream::Sampling);
    let mut out = RecordedOutputs::new();
    for item in items {
        let tokens = model.generate(Some(&item.pixels), &item.prompt, config, grammar, &mut rng)?;
        out.insert(&item.id, &vocab.decode(&tokens)?)?;
    }
    Ok(out)
}

/// Same function, and every argument equal (strings after whitespace normalization).
pub fn calls_match(a: &FunctionalCall, b: &FunctionalCall) -> bool {
    a.name() == b.name()
        && a.args.len() == b.args.len()
        && a.args.iter().zip(&b.args).all(|(x, y)| match (x, y) {
            (ArgValue::Str(x), ArgValue::Str(y)) => {
                normalize_whitespace(x) == normalize_whitespace(y)
            }
            (ArgValue::Int(x), ArgValue::Int(y)) => x == y,
            _ => false,
        })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BreakdownRow {
    pub key: String,
    pub n: usize,
    pub selection_accuracy: f64,
    pub exact_accuracy: f64,
    pub mean_reward: f64,
}

#[derive(Default, Clone, Copy)]
struct Tally {
    n: usize,
    selected: usize,
    exact: usize,
    reward: f64,
}

impl Tally {
    fn add(&mut self, selected: bool, exact: bool, reward: f32) {
        self.n += 1;
        self.selected += usize::from(selected);
        self.exact += usize::from(exact);
        self.reward += f64::from(reward);
    }

    fn ratio(x: usize, n: usize) -> f64 {
        if n == 0 {
            0.0
        } else {
            x as f64 / n as f64
        }
    }

    fn row(&self, key: &str) -> BreakdownRow {
        BreakdownRow {
            key: key.to_string(),
            n: self.n,
            selection_accuracy: Self::ratio(self.selected, self.n),
            exact_accuracy: Self::ratio(self.exact, self.n),
            mean_reward: if self.n == 0 {
                0.0
            } else {
                self.reward / self.n as f64
            },
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub n_examples: usize,
    pub function_selection_accuracy: f64,
    pub full_call_exact_accuracy: f64,
    pub mean_reward: f64,
    pub parse_failures: usize,
    /// One row per registered function, in registry order.
    pub per_function: Vec<BreakdownRow>,
    /// `en` then `zh`.
    pub per_language: Vec<BreakdownRow>,
}

impl EvalReport {
    pub fn language(&self, language: Language) -> &BreakdownRow {
        &self.per_language[match language {
            Language::En => 0,
            Language::Zh => 1,
        }]
    }
}

/// Scores recorded outputs against the oracle calls of `eval_set`. Outputs that
/// fail to parse or validate count as wrong on every measure.
pub fn evaluate(
    outputs: &RecordedOutputs,
    eval_set: &[TaskItem],
    registry: &Registry,
    vocab: &Vocabulary,
    reward_config: &RewardConfig,
) -> Result<EvalReport, AgentError> {
    let mut total = Tally::default();
    let mut per_fn = vec![Tally::default(); registry.len()];
    let mut per_lang = [Tally::default(); 2];
    let mut parse_failures = 0;
    for item in eval_set {
        let text = outputs.get(&item.id).ok_or_else(|| {
            AgentError::MalformedRecordedFile(format!("no output for example `{}`", item.id))
        })?;
        let parsed = parse_text(text, vocab, registry).ok();
        parse_failures += usize::from(parsed.is_none());
        let selected = parsed
            .as_ref()
            .is_some_and(|c| c.name() == item.target.name());
        let exact = parsed
            .as_ref()
            .is_some_and(|c| calls_match(c, &item.target));
        let r = reward(text, &item.target, reward_config, registry, vocab);
        total.add(selected, exact, r);
        let f = registry
            .index_of(item.target.name())
            .expect("oracle calls come from this registry");
        per_fn[f].add(selected, exact, r);
        per_lang[usize::from(item.language == Language::Zh)].add(selected, exact, r);
    }
    let t = total.row("all");
    Ok(EvalReport {
        n_examples: total.n,
        function_selection_accuracy: t.selection_accuracy,
        full_call_exact_accuracy: t.exact_accuracy,
        mean_reward: t.mean_reward,
        parse_failures,
        per_function: registry
            .schemas()
            .iter()
            .zip(&per_fn)
            .map(|(s, t)| t.row(&s.name))
            .collect(),
        per_language: vec![per_lang[0].row("en"), per_lang[1].row("zh")],
    })
}

impl fmt::Display for EvalReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(
            f,
            "examples {}  selection {:.3}  exact {:.3}  mean reward {:.3}  parse failures {}",
            self.n_examples,
            self.function_selection_accuracy,
            self.full_call_exact_accuracy,
            self.mean_reward,
            self.parse_failures
        )?;
        writeln!(
            f,
            "{:<20} {:>5} {:>10} {:>8} {:>8}",
            "group", "n", "selection", "exact", "reward"
        )?;
        for r in self.per_function.iter().chain(&self.per_language) {
            writeln!(
                f,
                "{:<20} {:>5} {:>10.3} {:>8.3} {:>8.3}",
                r.key, r.n, r.selection_accuracy, r.exact_accuracy, r.mean_reward
            )?;
        }
        Ok(())
    }
}
