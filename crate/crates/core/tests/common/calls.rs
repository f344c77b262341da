//! Randomized call generation and the parser property checks built on it.

#![allow(dead_code)]

use octofunc::decoder::{parse_complete, CallDecoder, DecodeError, DecoderState, Event};
use octofunc::numerics::{Rng, SeedStream};
use octofunc::registry::{ArgValue, CallStyle, FunctionalCall, ParamKind, Registry};
use octofunc::tokenizer::{Vocabulary, BOS, EOS, FIRST_FUNCTIONAL, IMG, NEXA_END, PAD};

const CHAR_POOL: &[char] = &[
    'a', 'Z', '7', ' ', ',', '(', ')', '\'', '\\', '"', '-', 'é', '同', '济', '大', '学', '🍍',
    '\n',
];

pub fn random_string(rng: &mut Rng) -> String {
    let len = rng.below(13);
    (0..len)
        .map(|_| CHAR_POOL[rng.below(CHAR_POOL.len())])
        .collect()
}

pub fn random_int(rng: &mut Rng) -> i64 {
    match rng.below(4) {
        0 => rng.below(10) as i64,
        1 => -(rng.below(1000) as i64),
        2 => [i64::MIN, i64::MAX, 0, -1][rng.below(4)],
        _ => ((rng.uniform() as f64 - 0.5) * 2e15) as i64,
    }
}

/// A schema-valid call on a random registered function.
pub fn random_call(rng: &mut Rng, registry: &Registry) -> FunctionalCall {
    let schema = registry.schemas()[rng.below(registry.len())].clone();
    let args = schema
        .params
        .iter()
        .map(|p| match p.kind {
            ParamKind::String => ArgValue::Str(random_string(rng)),
            ParamKind::Integer => ArgValue::Int(random_int(rng)),
            ParamKind::Enum => ArgValue::Str(p.enum_values[rng.below(p.enum_values.len())].clone()),
        })
        .collect();
    FunctionalCall { schema, args }
}

pub fn call_tokens(call: &FunctionalCall, registry: &Registry, vocab: &Vocabulary) -> Vec<u32> {
    vocab.encode(&registry.render_call(call, CallStyle::Token))
}

/// Number of calls that survived render, tokenize, parse unchanged.
pub fn round_trips(n: usize, seed: u64, registry: &Registry, vocab: &Vocabulary) -> usize {
    let mut rng = Rng::new(seed, SeedStream::Custom(31));
    (0..n)
        .filter(|_| {
            let call = random_call(&mut rng, registry);
            let tokens = call_tokens(&call, registry, vocab);
            parse_complete(&tokens, vocab, registry).as_ref() == Ok(&call)
        })
        .count()
}

/// A corrupted stream together with the position the error must be reported at.
pub struct Corruption {
    pub tokens: Vec<u32>,
    pub expected_position: usize,
    pub kind: &'static str,
}

fn is_in_string(tokens: &[u32], upto: usize) -> bool {
    let mut inside = false;
    let mut escaped = false;
    for &t in &tokens[..upto] {
        if inside && escaped {
            escaped = false;
        } else if inside && t == u32::from(b'\\') {
            escaped = true;
        } else if t == u32::from(b'\'') {
            inside = !inside;
        }
    }
    inside
}

/// Applies one of several corruptions that can never yield a valid call.
pub fn corrupt(rng: &mut Rng, tokens: &[u32], vocab: &Vocabulary) -> Corruption {
    let mut t = tokens.to_vec();
    let n = t.len();
    match rng.below(8) {
        0 => {
            let cut = rng.below(n);
            t.truncate(cut);
            Corruption {
                tokens: t,
                expected_position: cut,
                kind: "truncate",
            }
        }
        1 => {
            t[0] = u32::from(b'a' + rng.below(26) as u8);
            Corruption {
                tokens: t,
                expected_position: 0,
                kind: "byte_first",
            }
        }
        2 => {
            t.remove(1);
            Corruption {
                tokens: t,
                expected_position: 1,
                kind: "drop_open",
            }
        }
        3 => {
            // functional and control tokens are never legal after position 0
            let specials = [PAD, BOS, EOS, IMG];
            let bad = if rng.below(2) == 0 {
                FIRST_FUNCTIONAL + rng.below(vocab.functional_count()) as u32
            } else {
                specials[rng.below(specials.len())]
            };
            let at = 1 + rng.below(n - 1);
            t.insert(at, bad);
            Corruption {
                tokens: t,
                expected_position: at,
                kind: "stray_special",
            }
        }
        4 => {
            t.push(tokens[rng.below(n)]);
            Corruption {
                tokens: t,
                expected_position: n,
                kind: "trailing",
            }
        }
        5 => {
            let at = n - 1;
            t.insert(at, u32::from(b'x'));
            Corruption {
                tokens: t,
                expected_position: at,
                kind: "junk_before_end",
            }
        }
        6 => {
            // a lone continuation byte or 0xFF is invalid UTF-8 wherever it lands
            let at = 1 + rng.below(n - 1);
            let bad = if rng.below(2) == 0 {
                0xFF
            } else {
                0x80 + rng.below(0x40) as u32
            };
            let in_multibyte = (0x80..0xC0).contains(&t[at]);
            if in_multibyte && bad != 0xFF {
                t.insert(at, 0xFF);
            } else {
                t.insert(at, bad);
            }
            Corruption {
                tokens: t,
                expected_position: at,
                kind: "bad_utf8",
            }
        }
        _ => {
            let at = (2 + rng.below(n.saturating_sub(3).max(1))).min(n - 1);
            if is_in_string(&t, at) {
                t.insert(at, NEXA_END);
                Corruption {
                    tokens: t,
                    expected_position: at,
                    kind: "end_in_string",
                }
            } else {
                t.insert(at, u32::from(b'"'));
                Corruption {
                    tokens: t,
                    expected_position: at,
                    kind: "double_quote",
                }
            }
        }
    }
}

/// Number of corrupted streams rejected with a `ParseFailure` at the expected position.
pub fn corruptions_rejected(
    n: usize,
    seed: u64,
    registry: &Registry,
    vocab: &Vocabulary,
) -> Result<usize, String> {
    let mut rng = Rng::new(seed, SeedStream::Custom(32));
    let mut rejected = 0;
    for _ in 0..n {
        let call = random_call(&mut rng, registry);
        let tokens = call_tokens(&call, registry, vocab);
        let c = corrupt(&mut rng, &tokens, vocab);
        match parse_complete(&c.tokens, vocab, registry) {
            Err(DecodeError::ParseFailure { position, .. }) if position == c.expected_position => {
                rejected += 1
            }
            other => {
                return Err(format!(
                    "{} corruption of {:?} at {}: got {:?}",
                    c.kind,
                    vocab.decode(&c.tokens).unwrap_or_default(),
                    c.expected_position,
                    other
                ))
            }
        }
    }
    Ok(rejected)
}

/// Walks random trajectories and compares the mask against `feed` for every vocabulary id.
/// Returns the number of (state, token) pairs checked.
pub fn mask_agrees_with_feed(
    trajectories: usize,
    seed: u64,
    decoder: &CallDecoder,
    registry: &Registry,
) -> Result<usize, String> {
    let vocab = decoder.vocab();
    let mut rng = Rng::new(seed, SeedStream::Custom(33));
    let mut checked = 0;
    for _ in 0..trajectories {
        let target = call_tokens(&random_call(&mut rng, registry), registry, vocab);
        let wander = [0.0, 0.05, 0.3][rng.below(3)];
        let mut state = DecoderState::new();
        for step in 0..target.len().max(1) + 8 {
            if state.is_done() || state.is_failed() {
                break;
            }
            let mask = decoder.allowed_next(&state);
            for id in 0..vocab.size() as u32 {
                let mut probe = state.clone();
                let ok = !matches!(decoder.feed(&mut probe, id), Event::ParseError(_));
                if ok != mask[id as usize] {
                    return Err(format!(
                        "token {id} after {:?}: mask {} but feed {}",
                        state,
                        mask[id as usize],
                        if ok { "accepts" } else { "rejects" }
                    ));
                }
                checked += 1;
            }
            let allowed: Vec<u32> = (0..vocab.size() as u32)
                .filter(|&i| mask[i as usize])
                .collect();
            if allowed.is_empty() {
                return Err(format!("dead end in {:?}", state));
            }
            let follow = step < target.len()
                && mask[target[step] as usize]
                && rng.uniform() as f64 >= wander;
            let next = if follow {
                target[step]
            } else {
                allowed[rng.below(allowed.len())]
            };
            decoder.feed(&mut state, next);
        }
    }
    Ok(checked)
}
