//! Single-token state machine for the call grammar
//!
//! ```text
//! CALL     := FUNC_TOKEN '(' ARG_LIST? ')' END_TOKEN
//! ARG_LIST := ARG (',' ' '? ARG)*
//! ARG      := STRING | INTEGER
//! STRING   := '\'' (char | '\\\'' | '\\\\')* '\''
//! INTEGER  := '-'? digit+
//! ```

use std::collections::HashMap;

use crate::registry::{ArgValue, ParamKind, Registry};
use crate::tokenizer::{Vocabulary, NEXA_END};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Phase {
    AwaitFunc,
    AwaitOpen,
    InArgs,
    InString,
    InInt,
    AwaitSeparator,
    AwaitEnd,
    Done,
    Failed,
}

/// Where inside an argument list an `InArgs` state sits.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum Slot {
    First,
    AfterComma,
    AfterSpace,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Default)]
struct Utf8Expect {
    remaining: u8,
    lo: u8,
    hi: u8,
}

impl Utf8Expect {
    /// Continuation requirements after a lead byte, or `None` if `b` cannot start a character.
    fn lead(b: u8) -> Option<Self> {
        let (remaining, lo, hi) = match b {
            0x00..=0x7F => (0, 0, 0),
            0xC2..=0xDF => (1, 0x80, 0xBF),
            0xE0 => (2, 0xA0, 0xBF),
            0xED => (2, 0x80, 0x9F),
            0xE1..=0xEF => (2, 0x80, 0xBF),
            0xF0 => (3, 0x90, 0xBF),
            0xF1..=0xF3 => (3, 0x80, 0xBF),
            0xF4 => (3, 0x80, 0x8F),
            _ => return None,
        };
        Some(Self { remaining, lo, hi })
    }

    fn accepts(&self, b: u8) -> bool {
        self.remaining > 0 && (self.lo..=self.hi).contains(&b)
    }

    fn advance(self) -> Self {
        match self.remaining {
            0 | 1 => Self::default(),
            r => Self {
                remaining: r - 1,
                lo: 0x80,
                hi: 0xBF,
            },
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ParseError {
    /// Zero-based index of the offending token in the stream.
    pub position: usize,
    pub message: String,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub enum Event {
    None,
    CallComplete,
    ParseError(ParseError),
}

/// Per-stream decoding state. Memory is bounded by the longest literal.
#[derive(Clone, Debug)]
pub struct DecoderState {
    phase: Phase,
    slot: Slot,
    func: Option<usize>,
    args: Vec<ArgValue>,
    buf: Vec<u8>,
    escape: bool,
    utf8: Utf8Expect,
    int_value: i64,
    negative: bool,
    trie_node: Option<usize>,
    consumed: usize,
    error: Option<ParseError>,
}

impl Default for DecoderState {
    fn default() -> Self {
        Self::new()
    }
}

impl DecoderState {
    pub fn new() -> Self {
        Self {
            phase: Phase::AwaitFunc,
            slot: Slot::First,
            func: None,
            args: Vec::new(),
            buf: Vec::new(),
            escape: false,
            utf8: Utf8Expect::default(),
            int_value: 0,
            negative: false,
            trie_node: None,
            consumed: 0,
            error: None,
        }
    }

    pub fn phase(&self) -> Phase {
        self.phase
    }

    /// Functional-token index of the call being decoded.
    pub fn function(&self) -> Option<usize> {
        self.func
    }

    pub fn args(&self) -> &[ArgValue] {
        &self.args
    }

    pub fn consumed(&self) -> usize {
        self.consumed
    }

    pub fn error(&self) -> Option<&ParseError> {
        self.error.as_ref()
    }

    pub fn is_done(&self) -> bool {
        self.phase == Phase::Done
    }

    pub fn is_failed(&self) -> bool {
        self.phase == Phase::Failed
    }

    /// Bytes of the literal currently being read.
    pub fn pending_literal(&self) -> &[u8] {
        &self.buf
    }

    pub(crate) fn at_list_start(&self) -> bool {
        self.slot == Slot::First
    }

    pub(crate) fn after_comma(&self) -> bool {
        self.slot == Slot::AfterComma
    }

    pub(crate) fn trie_node_index(&self) -> Option<usize> {
        self.trie_node
    }

    pub(crate) fn in_escape(&self) -> bool {
        self.escape
    }

    /// Legal byte range for the next UTF-8 continuation byte, if one is pending.
    pub(crate) fn continuation_range(&self) -> Option<(u8, u8)> {
        (self.utf8.remaining > 0).then_some((self.utf8.lo, self.utf8.hi))
    }

    pub(crate) fn int_parts(&self) -> (i64, bool) {
        (self.int_value, self.negative)
    }
}

/// Prefix trie over the legal values of one enum parameter.
#[derive(Clone, Debug, Default)]
pub struct EnumTrie {
    nodes: Vec<TrieNode>,
}

#[derive(Clone, Debug, Default)]
struct TrieNode {
    children: Vec<(u8, usize)>,
    terminal: bool,
}

impl EnumTrie {
    pub fn new<S: AsRef<str>>(values: &[S]) -> Self {
        let mut t = Self {
            nodes: vec![TrieNode::default()],
        };
        for v in values {
            let mut n = 0;
            for &b in v.as_ref().as_bytes() {
                n = match t.child(n, b) {
                    Some(c) => c,
                    None => {
                        t.nodes.push(TrieNode::default());
                        let c = t.nodes.len() - 1;
                        t.nodes[n].children.push((b, c));
                        c
                    }
                };
            }
            t.nodes[n].terminal = true;
        }
        t
    }

    pub fn child(&self, node: usize, b: u8) -> Option<usize> {
        self.nodes[node]
            .children
            .iter()
            .find(|(k, _)| *k == b)
            .map(|&(_, c)| c)
    }

    pub fn children(&self, node: usize) -> impl Iterator<Item = u8> + '_ {
        self.nodes[node].children.iter().map(|&(b, _)| b)
    }

    pub fn is_terminal(&self, node: usize) -> bool {
        self.nodes[node].terminal
    }
}

/// Drives [`DecoderState`] transitions.
///
/// In grammar-only mode (`CallDecoder::new`) every syntactically valid call is
/// accepted and schema checks are left to validation. In constrained mode
/// (`CallDecoder::constrained`) arity, argument kinds, and enum membership are
/// enforced token by token, which is what the generation mask relies on.
#[derive(Clone, Debug)]
pub struct CallDecoder<'a> {
    pub(crate) vocab: &'a Vocabulary,
    pub(crate) registry: Option<&'a Registry>,
    pub(crate) tries: HashMap<(usize, usize), EnumTrie>,
}

pub(crate) fn is_digit(b: u8) -> bool {
    b.is_ascii_digit()
}

impl<'a> CallDecoder<'a> {
    pub fn new(vocab: &'a Vocabulary) -> Self {
        Self {
            vocab,
            registry: None,
            tries: HashMap::new(),
        }
    }

    pub fn constrained(vocab: &'a Vocabulary, registry: &'a Registry) -> Self {
        let mut tries = HashMap::new();
        for (f, s) in registry.schemas().iter().enumerate() {
            for (p, spec) in s.params.iter().enumerate() {
                if spec.kind == ParamKind::Enum {
                    tries.insert((f, p), EnumTrie::new(&spec.enum_values));
                }
            }
        }
        Self {
            vocab,
            registry: Some(registry),
            tries,
        }
    }

    pub fn vocab(&self) -> &Vocabulary {
        self.vocab
    }

    pub fn is_constrained(&self) -> bool {
        self.registry.is_some()
    }

    pub(crate) fn arity(&self, func: usize) -> Option<usize> {
        self.registry
            .and_then(|r| r.schema(func))
            .map(|s| s.params.len())
    }

    pub(crate) fn param_kind(&self, func: usize, index: usize) -> Option<ParamKind> {
        self.registry
            .and_then(|r| r.schema(func))
            .and_then(|s| s.params.get(index))
            .map(|p| p.kind)
    }

    pub(crate) fn function_limit(&self) -> usize {
        match self.registry {
            Some(r) => r.len().min(self.vocab.functional_count()),
            None => self.vocab.functional_count(),
        }
    }

    pub(crate) fn trie(&self, state: &DecoderState) -> Option<&EnumTrie> {
        state
            .func
            .and_then(|f| self.tries.get(&(f, state.args.len())))
    }

    /// Whether the argument at `state.args.len()` may start with a quote (`true`) or
    /// a sign/digit (`false`).
    pub(crate) fn next_arg_allows(&self, state: &DecoderState, string: bool) -> bool {
        match (self.registry, state.func) {
            (Some(_), Some(f)) => match self.param_kind(f, state.args.len()) {
                Some(ParamKind::Integer) => !string,
                Some(_) => string,
                None => false,
            },
            _ => true,
        }
    }

    /// Whether `,` (more args) or `)` (close) is legal after `completed` args.
    pub(crate) fn separator_allows(
        &self,
        state: &DecoderState,
        completed: usize,
        close: bool,
    ) -> bool {
        match state.func.and_then(|f| self.arity(f)) {
            Some(n) if close => completed == n,
            Some(n) => completed < n,
            None => true,
        }
    }

    /// Consumes one token. Errors move the state to the absorbing `Failed` phase.
    pub fn feed(&self, state: &mut DecoderState, token: u32) -> Event {
        let position = state.consumed;
        state.consumed += 1;
        match self.step(state, token) {
            Ok(complete) => {
                if complete {
                    Event::CallComplete
                } else {
                    Event::None
                }
            }
            Err(message) => {
                let err = ParseError { position, message };
                if state.phase != Phase::Failed {
                    state.phase = Phase::Failed;
                    state.error = Some(err.clone());
                }
                Event::ParseError(err)
            }
        }
    }

    fn step(&self, s: &mut DecoderState, token: u32) -> Result<bool, String> {
        let byte = Vocabulary::is_byte(token).then_some(token as u8);
        let expect = |what: &str| -> String {
            match self.vocab.surface(token) {
                Some(sp) => format!("expected {what}, found {sp}"),
                None if Vocabulary::is_byte(token) => {
                    format!("expected {what}, found byte 0x{token:02x}")
                }
                None => format!("expected {what}, found invalid id {token}"),
            }
        };
        match s.phase {
            Phase::Done => Err("token after <nexa_end>".into()),
            Phase::Failed => Err("decoder already failed".into()),
            Phase::AwaitFunc => match self.vocab.functional_index(token) {
                Some(i) if i < self.function_limit() => {
                    s.func = Some(i);
                    s.phase = Phase::AwaitOpen;
                    Ok(false)
                }
                Some(i) => Err(format!(
                    "functional token <nexa_{i}> has no registered schema"
                )),
                None => Err(expect("a functional token")),
            },
            Phase::AwaitOpen => match byte {
                Some(b'(') => {
                    s.phase = Phase::InArgs;
                    s.slot = Slot::First;
                    Ok(false)
                }
                _ => Err(expect("'('")),
            },
            Phase::InArgs => match byte {
                Some(b')') if s.slot == Slot::First && self.separator_allows(s, 0, true) => {
                    s.phase = Phase::AwaitEnd;
                    Ok(false)
                }
                Some(b' ') if s.slot == Slot::AfterComma => {
                    s.slot = Slot::AfterSpace;
                    Ok(false)
                }
                Some(b'\'') if self.next_arg_allows(s, true) => {
                    s.phase = Phase::InString;
                    s.buf.clear();
                    s.escape = false;
                    s.utf8 = Utf8Expect::default();
                    s.trie_node = self.trie(s).map(|_| 0);
                    Ok(false)
                }
                Some(b) if (b == b'-' || is_digit(b)) && self.next_arg_allows(s, false) => {
                    s.phase = Phase::InInt;
                    s.buf.clear();
                    s.negative = b == b'-';
                    s.int_value = 0;
                    if is_digit(b) {
                        s.buf.push(b);
                        s.int_value = i64::from(b - b'0');
                    }
                    Ok(false)
                }
                _ => Err(expect("an argument")),
            },
            Phase::InString => {
                let b = byte.ok_or_else(|| expect("a string byte"))?;
                self.string_byte(s, b).map(|()| false)
            }
            Phase::InInt => match byte {
                Some(d) if is_digit(d) => {
                    let v = i64::from(d - b'0');
                    let next = s.int_value.checked_mul(10).and_then(|x| {
                        if s.negative {
                            x.checked_sub(v)
                        } else {
                            x.checked_add(v)
                        }
                    });
                    s.int_value = next.ok_or("integer literal overflows 64 bits")?;
                    s.buf.push(d);
                    Ok(false)
                }
                Some(b @ (b',' | b')')) if !s.buf.is_empty() => {
                    s.args.push(ArgValue::Int(s.int_value));
                    s.buf.clear();
                    s.phase = Phase::AwaitSeparator;
                    self.separator(s, b)
                }
                _ => Err(expect("a digit")),
            },
            Phase::AwaitSeparator => match byte {
                Some(b @ (b',' | b')')) => self.separator(s, b),
                _ => Err(expect("',' or ')'")),
            },
            Phase::AwaitEnd => {
                if token == NEXA_END {
                    s.phase = Phase::Done;
                    Ok(true)
                } else {
                    Err(expect("<nexa_end>"))
                }
            }
        }
    }

    fn separator(&self, s: &mut DecoderState, b: u8) -> Result<bool, String> {
        let done = s.args.len();
        if b == b',' && self.separator_allows(s, done, false) {
            s.phase = Phase::InArgs;
            s.slot = Slot::AfterComma;
            Ok(false)
        } else if b == b')' && self.separator_allows(s, done, true) {
            s.phase = Phase::AwaitEnd;
            Ok(false)
        } else {
            Err(format!(
                "unexpected '{}' after {done} argument(s)",
                b as char
            ))
        }
    }

    fn string_byte(&self, s: &mut DecoderState, b: u8) -> Result<(), String> {
        let trie = self.trie(s);
        let push = |s: &mut DecoderState, b: u8| -> Result<(), String> {
            if let (Some(t), Some(n)) = (trie, s.trie_node) {
                s.trie_node = Some(
                    t.child(n, b)
                        .ok_or("value is not a prefix of any allowed enum value")?,
                );
            }
            s.buf.push(b);
            Ok(())
        };
        if s.escape {
            if b != b'\'' && b != b'\\' {
                return Err(format!("invalid escape \\{}", b as char));
            }
            s.escape = false;
            return push(s, b);
        }
        if s.utf8.remaining > 0 {
            if !s.utf8.accepts(b) {
                return Err(format!("invalid UTF-8 continuation byte 0x{b:02x}"));
            }
            s.utf8 = s.utf8.advance();
            return push(s, b);
        }
        match b {
            b'\\' => {
                if let (Some(t), Some(n)) = (trie, s.trie_node) {
                    if t.child(n, b'\'').is_none() && t.child(n, b'\\').is_none() {
                        return Err("escape cannot continue any allowed enum value".into());
                    }
                }
                s.escape = true;
                Ok(())
            }
            b'\'' => {
                if let (Some(t), Some(n)) = (trie, s.trie_node) {
                    if !t.is_terminal(n) {
                        return Err("string is not one of the allowed enum values".into());
                    }
                }
                let text =
                    String::from_utf8(std::mem::take(&mut s.buf)).map_err(|e| e.to_string())?;
                s.args.push(ArgValue::Str(text));
                s.trie_node = None;
                s.phase = Phase::AwaitSeparator;
                Ok(())
            }
            _ => {
                let u = Utf8Expect::lead(b)
                    .ok_or_else(|| format!("byte 0x{b:02x} cannot start a UTF-8 character"))?;
                s.utf8 = u;
                push(s, b)
            }
        }
    }
}
