mod common;

use common::calls;
use octofunc::decoder::{parse_text, CallDecoder, DecoderState, Event, Phase};
use octofunc::registry::{ArgValue, CallStyle, Registry};
use octofunc::tokenizer::Vocabulary;
use serde::Deserialize;

const GOLDEN: &str = include_str!("fixtures/golden_calls.jsonl");

#[derive(Deserialize)]
struct GoldenRow {
    language: String,
    function: String,
    text: String,
}

fn setup() -> (Registry, Vocabulary) {
    let reg = Registry::demo();
    let vocab = Vocabulary::new()
        .extend_with_functional_tokens(reg.len())
        .unwrap();
    (reg, vocab)
}

#[test]
fn golden_outputs_parse_and_validate() {
    let (reg, vocab) = setup();
    let rows: Vec<GoldenRow> = GOLDEN
        .lines()
        .map(|l| serde_json::from_str(l).unwrap())
        .collect();
    assert_eq!(rows.len(), 20);
    assert_eq!(rows.iter().filter(|r| r.language == "zh").count(), 10);
    for row in &rows {
        let call =
            parse_text(&row.text, &vocab, &reg).unwrap_or_else(|e| panic!("{}: {e:?}", row.text));
        assert_eq!(call.name(), row.function);
        // rendering back in name form reproduces the printed text
        assert_eq!(reg.render_call(&call, CallStyle::Name), row.text);
    }
    let doordash = parse_text(&rows[17].text, &vocab, &reg).unwrap();
    assert_eq!(doordash.args[1], ArgValue::Str("同济大学".into()));
}

#[test]
fn random_calls_round_trip() {
    let (reg, vocab) = setup();
    assert_eq!(calls::round_trips(2000, 7, &reg, &vocab), 2000);
}

#[test]
fn corrupted_streams_are_rejected_at_the_right_position() {
    let (reg, vocab) = setup();
    assert_eq!(calls::corruptions_rejected(2000, 8, &reg, &vocab), Ok(2000));
}

#[test]
fn masks_match_feed_in_both_modes() {
    let (reg, vocab) = setup();
    let grammar = CallDecoder::new(&vocab);
    let constrained = CallDecoder::constrained(&vocab, &reg);
    assert!(calls::mask_agrees_with_feed(60, 9, &grammar, &reg).unwrap() > 10_000);
    assert!(calls::mask_agrees_with_feed(60, 10, &constrained, &reg).unwrap() > 10_000);
}

#[test]
fn constrained_generation_always_reaches_a_valid_call() {
    // following random allowed tokens (biased toward closing) must end in a schema-valid call
    let (reg, vocab) = setup();
    let dec = CallDecoder::constrained(&vocab, &reg);
    let mut rng = octofunc::numerics::Rng::new(4, octofunc::numerics::SeedStream::Custom(5));
    for _ in 0..200 {
        let mut state = DecoderState::new();
        let mut tokens = Vec::new();
        for _ in 0..400 {
            let mask = dec.allowed_next(&state);
            let allowed: Vec<u32> = (0..mask.len() as u32)
                .filter(|&i| mask[i as usize])
                .collect();
            let closers: Vec<u32> = allowed
                .iter()
                .copied()
                .filter(|&t| t < 256 && b"',)".contains(&(t as u8)))
                .collect();
            let pick = if !closers.is_empty() && rng.below(3) == 0 {
                closers[rng.below(closers.len())]
            } else if state.phase() == Phase::InString
                && rng.below(2) == 0
                && mask[usize::from(b'a')]
            {
                u32::from(b'a')
            } else {
                allowed[rng.below(allowed.len())]
            };
            tokens.push(pick);
            if dec.feed(&mut state, pick) == Event::CallComplete {
                break;
            }
        }
        if state.is_done() {
            octofunc::decoder::parse_complete(&tokens, &vocab, &reg).unwrap();
        }
        assert!(!state.is_failed());
    }
}
