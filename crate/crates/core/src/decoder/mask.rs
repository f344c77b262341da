//! Grammar masks for constrained generation.

use super::state::{CallDecoder, DecoderState, Phase};
use crate::tokenizer::{FIRST_FUNCTIONAL, NEXA_END};

/// Bytes that may begin a multi-byte UTF-8 character.
const LEAD_BYTES: std::ops::RangeInclusive<u8> = 0xC2..=0xF4;

impl CallDecoder<'_> {
    /// Token ids that `feed` would accept from `state`, as a boolean mask over the vocabulary.
    pub fn allowed_next(&self, state: &DecoderState) -> Vec<bool> {
        let mut mask = vec![false; self.vocab.size()];
        let mut allow = |b: u8| mask[usize::from(b)] = true;
        match state.phase() {
            Phase::Done | Phase::Failed => {}
            Phase::AwaitFunc => {
                for i in 0..self.function_limit() {
                    mask[FIRST_FUNCTIONAL as usize + i] = true;
                }
            }
            Phase::AwaitOpen => allow(b'('),
            Phase::AwaitEnd => mask[NEXA_END as usize] = true,
            Phase::InArgs => {
                if state.at_list_start() && self.separator_allows(state, 0, true) {
                    allow(b')');
                }
                if state.after_comma() {
                    allow(b' ');
                }
                if self.next_arg_allows(state, true) {
                    allow(b'\'');
                }
                if self.next_arg_allows(state, false) {
                    allow(b'-');
                    (b'0'..=b'9').for_each(&mut allow);
                }
            }
            Phase::AwaitSeparator => {
                let n = state.args().len();
                if self.separator_allows(state, n, false) {
                    allow(b',');
                }
                if self.separator_allows(state, n, true) {
                    allow(b')');
                }
            }
            Phase::InInt => {
                let (value, negative) = state.int_parts();
                for d in 0..=9u8 {
                    let fits = value.checked_mul(10).and_then(|x| {
                        if negative {
                            x.checked_sub(i64::from(d))
                        } else {
                            x.checked_add(i64::from(d))
                        }
                    });
                    if fits.is_some() {
                        allow(b'0' + d);
                    }
                }
                if !state.pending_literal().is_empty() {
                    let n = state.args().len() + 1;
                    if self.separator_allows(state, n, false) {
                        allow(b',');
                    }
                    if self.separator_allows(state, n, true) {
                        allow(b')');
                    }
                }
            }
            Phase::InString => self.string_mask(state, &mut mask),
        }
        mask
    }

    fn string_mask(&self, state: &DecoderState, mask: &mut [bool]) {
        let trie = self.trie(state).zip(state.trie_node_index());
        let on_path = |b: u8| trie.map_or(true, |(t, n)| t.child(n, b).is_some());
        if state.in_escape() {
            for b in [b'\'', b'\\'] {
                mask[usize::from(b)] = on_path(b);
            }
            return;
        }
        if let Some((lo, hi)) = state.continuation_range() {
            for b in lo..=hi {
                mask[usize::from(b)] = on_path(b);
            }
            return;
        }
        match trie {
            Some((t, n)) => {
                mask[usize::from(b'\'')] = t.is_terminal(n);
                for b in t.children(n) {
                    // quote and backslash inside a value must be written escaped
                    let first = if b == b'\'' || b == b'\\' { b'\\' } else { b };
                    mask[usize::from(first)] = true;
                }
            }
            None => {
                for b in (0u8..0x80).chain(LEAD_BYTES) {
                    mask[usize::from(b)] = true;
                }
            }
        }
    }
}
