use std::fmt;
use std::time::Instant;

use serde::{Deserialize, Serialize};

use super::AgentError;
use crate::decoder::CallDecoder;
use crate::model::{Constraint, GenerationConfig, Model};
use crate::numerics::{Rng, SeedStream};
use crate::registry::Registry;
use crate::tokenizer::{Vocabulary, NEXA_END};
use crate::training::TaskItem;

pub const MIN_LATENCY_SAMPLES: usize = 10;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Stats {
    pub mean: f64,
    pub p50: f64,
    pub p95: f64,
}

impl Stats {
    /// Mean and nearest-rank percentiles; `None` for an empty sample.
    pub fn of(values: &[f64]) -> Option<Self> {
        if values.is_empty() {
            return None;
        }
        let mut v = values.to_vec();
        v.sort_by(f64::total_cmp);
        let rank = |q: f64| v[((q * v.len() as f64).ceil() as usize).clamp(1, v.len()) - 1];
        Some(Self {
            mean: v.iter().sum::<f64>() / v.len() as f64,
            p50: rank(0.5),
            p95: rank(0.95),
        })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ConditionReport {
    pub condition: String,
    pub samples: usize,
    pub tokens_per_second: Stats,
    /// Absent only if no sample produced a functional token.
    pub time_to_first_functional_token_ms: Option<Stats>,
    /// Time to `<nexa_end>`, or to the end of generation when it never came.
    pub time_to_end_token_ms: Stats,
    pub reached_end: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LatencyReport {
    pub with_image: ConditionReport,
    pub without_image: ConditionReport,
    pub hardware: String,
}

/// Architecture, logical CPU count and, where the OS exposes it, the CPU model.
pub fn hardware_note() -> String {
    let cpus = std::thread::available_parallelism().map_or(1, |n| n.get());
    let model = std::fs::read_to_string("/proc/cpuinfo").ok().and_then(|s| {
        s.lines()
            .find(|l| l.starts_with("model name"))
            .and_then(|l| l.split(':').nth(1))
            .map(|m| m.trim().to_string())
    });
    match model {
        Some(m) => format!("{} {} logical cpu(s), {m}", std::env::consts::ARCH, cpus),
        None => format!("{} {} logical cpu(s)", std::env::consts::ARCH, cpus),
    }
}

fn run_condition(
    model: &Model,
    items: &[TaskItem],
    with_image: bool,
    config: &GenerationConfig,
    grammar: Option<&CallDecoder>,
    vocab: &Vocabulary,
    seed: u64,
) -> Result<ConditionReport, AgentError> {
    let mut rng = Rng::new(seed, SeedStream::Sampling);
    let (mut tps, mut first, mut end) = (Vec::new(), Vec::new(), Vec::new());
    let mut reached_end = 0;
    for item in items {
        let (pixels, prompt) = if with_image {
            (Some(item.pixels.as_slice()), &item.prompt[..])
        } else {
            (None, &item.prompt[1..])
        };
        let start = Instant::now();
        let mut first_functional = None;
        let mut end_at = None;
        let out = model.generate_observed(pixels, prompt, config, grammar, &mut rng, &mut |t| {
            if first_functional.is_none() && vocab.functional_index(t).is_some() {
                first_functional = Some(start.elapsed());
            }
            if t == NEXA_END && end_at.is_none() {
                end_at = Some(start.elapsed());
            }
        })?;
        let total = start.elapsed();
        tps.push(out.len() as f64 / total.as_secs_f64().max(1e-9));
        if let Some(t) = first_functional {
            first.push(t.as_secs_f64() * 1e3);
        }
        reached_end += usize::from(end_at.is_some());
        end.push(end_at.unwrap_or(total).as_secs_f64() * 1e3);
    }
    Ok(ConditionReport {
        condition: if with_image {
            "with_image"
        } else {
            "without_image"
        }
        .to_string(),
        samples: items.len(),
        tokens_per_second: Stats::of(&tps).expect("non-empty"),
        time_to_first_functional_token_ms: Stats::of(&first),
        time_to_end_token_ms: Stats::of(&end).expect("non-empty"),
        reached_end,
    })
}

/// Times generation on every sample, first with the image prefix (encoder cost
/// included), then text-only. Runs strictly one generation at a time.
pub fn benchmark_latency(
    model: &Model,
    items: &[TaskItem],
    registry: &Registry,
    vocab: &Vocabulary,
    config: &GenerationConfig,
    seed: u64,
) -> Result<LatencyReport, AgentError> {
    if items.len() < MIN_LATENCY_SAMPLES {
        return Err(AgentError::TooFewSamples {
            needed: MIN_LATENCY_SAMPLES,
            got: items.len(),
        });
    }
    let decoder = CallDecoder::constrained(vocab, registry);
    let grammar = (config.constraint == Constraint::GrammarMask).then_some(&decoder);
    // one untimed pass warms caches and the allocator
    model.generate(
        Some(&items[0].pixels),
        &items[0].prompt,
        config,
        grammar,
        &mut Rng::new(seed, SeedStream::Sampling),
    )?;
    Ok(LatencyReport {
        with_image: run_condition(model, items, true, config, grammar, vocab, seed)?,
        without_image: run_condition(model, items, false, config, grammar, vocab, seed)?,
        hardware: hardware_note(),
    })
}

impl fmt::Display for LatencyReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "hardware: {}", self.hardware)?;
        writeln!(
            f,
            "{:<14} {:>7} {:>26} {:>26} {:>26}",
            "condition",
            "samples",
            "tok/s mean/p50/p95",
            "first fn ms mean/p50/p95",
            "end ms mean/p50/p95"
        )?;
        for c in [&self.with_image, &self.without_image] {
            let s = |x: Option<Stats>| {
                x.map_or("n/a".to_string(), |x| {
                    format!("{:.2}/{:.2}/{:.2}", x.mean, x.p50, x.p95)
                })
            };
            writeln!(
                f,
                "{:<14} {:>7} {:>26} {:>26} {:>26}",
                c.condition,
                c.samples,
                s(Some(c.tokens_per_second)),
                s(c.time_to_first_functional_token_ms),
                s(Some(c.time_to_end_token_ms))
            )?;
        }
        Ok(())
    }
}
