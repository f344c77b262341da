//! Streaming call parser, schema validation, and grammar masks.

mod mask;
mod state;

pub use state::{CallDecoder, DecoderState, EnumTrie, Event, ParseError, Phase};

use std::fmt;

use once_cell::sync::Lazy;
use regex::Regex;
use thiserror::Error;

use crate::registry::{ArgValue, FunctionalCall, ParamKind, Registry};
use crate::tokenizer::{Vocabulary, NEXA_END};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum ViolationKind {
    ArityMismatch,
    TypeMismatch,
    EnumViolation,
    UnknownFunction,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Violation {
    pub kind: ViolationKind,
    /// Zero-based parameter position, when the violation concerns one argument.
    pub param_index: Option<usize>,
    pub detail: String,
}

#[derive(Clone, Debug, PartialEq, Eq, Default)]
pub struct ValidationReport {
    pub ok: bool,
    pub violations: Vec<Violation>,
}

impl fmt::Display for ValidationReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        if self.ok {
            return write!(f, "ok");
        }
        let parts: Vec<String> = self
            .violations
            .iter()
            .map(|v| match v.param_index {
                Some(i) => format!("{:?} on param {}: {}", v.kind, i + 1, v.detail),
                None => format!("{:?}: {}", v.kind, v.detail),
            })
            .collect();
        write!(f, "{}", parts.join("; "))
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub enum FunctionRef {
    Index(usize),
    Name(String),
}

/// A syntactically parsed call not yet checked against schemas.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct RawCall {
    pub function: FunctionRef,
    pub args: Vec<ArgValue>,
}

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum DecodeError {
    #[error("parse failure at token {position}: {message}")]
    ParseFailure { position: usize, message: String },
    #[error("validation failure: {0}")]
    ValidationFailure(ValidationReport),
}

/// Checks function existence, arity, argument kinds and enum membership,
/// reporting every violation found.
pub fn validate(raw: &RawCall, registry: &Registry) -> ValidationReport {
    let schema = match &raw.function {
        FunctionRef::Index(i) => registry.schema(*i),
        FunctionRef::Name(n) => registry.index_of(n).and_then(|i| registry.schema(i)),
    };
    let Some(schema) = schema else {
        let detail = match &raw.function {
            FunctionRef::Index(i) => format!("<nexa_{i}> is not registered"),
            FunctionRef::Name(n) => format!("`{n}` is not registered"),
        };
        return ValidationReport {
            ok: false,
            violations: vec![Violation {
                kind: ViolationKind::UnknownFunction,
                param_index: None,
                detail,
            }],
        };
    };
    let mut violations = Vec::new();
    if raw.args.len() != schema.params.len() {
        violations.push(Violation {
            kind: ViolationKind::ArityMismatch,
            param_index: None,
            detail: format!(
                "`{}` takes {} argument(s), got {}",
                schema.name,
                schema.params.len(),
                raw.args.len()
            ),
        });
    }
    for (i, (arg, spec)) in raw.args.iter().zip(&schema.params).enumerate() {
        match (spec.kind, arg) {
            (ParamKind::Integer, ArgValue::Int(_)) | (ParamKind::String, ArgValue::Str(_)) => {}
            (ParamKind::Enum, ArgValue::Str(s)) => {
                if !spec.enum_values.iter().any(|v| v == s) {
                    violations.push(Violation {
                        kind: ViolationKind::EnumViolation,
                        param_index: Some(i),
                        detail: format!(
                            "`{}` must be one of {:?}, got {s:?}",
                            spec.name, spec.enum_values
                        ),
                    });
                }
            }
            (kind, _) => violations.push(Violation {
                kind: ViolationKind::TypeMismatch,
                param_index: Some(i),
                detail: format!("`{}` expects {kind:?}", spec.name),
            }),
        }
    }
    ValidationReport {
        ok: violations.is_empty(),
        violations,
    }
}

/// Resolves a validated raw call into a typed call.
pub fn bind(raw: RawCall, registry: &Registry) -> Result<FunctionalCall, DecodeError> {
    let report = validate(&raw, registry);
    if !report.ok {
        return Err(DecodeError::ValidationFailure(report));
    }
    let index = match &raw.function {
        FunctionRef::Index(i) => *i,
        FunctionRef::Name(n) => registry.index_of(n).expect("validated"),
    };
    let schema = registry.schema(index).expect("validated").clone();
    Ok(FunctionalCall {
        schema,
        args: raw.args,
    })
}

/// Runs the grammar over a complete token stream, without schema checks.
pub fn parse_tokens(tokens: &[u32], vocab: &Vocabulary) -> Result<RawCall, DecodeError> {
    let dec = CallDecoder::new(vocab);
    let mut state = DecoderState::new();
    for &t in tokens {
        if state.is_done() {
            return Err(DecodeError::ParseFailure {
                position: state.consumed(),
                message: "trailing tokens after <nexa_end>".into(),
            });
        }
        if let Event::ParseError(e) = dec.feed(&mut state, t) {
            return Err(DecodeError::ParseFailure {
                position: e.position,
                message: e.message,
            });
        }
    }
    if !state.is_done() {
        return Err(DecodeError::ParseFailure {
            position: tokens.len(),
            message: "incomplete call".into(),
        });
    }
    Ok(RawCall {
        function: FunctionRef::Index(state.function().expect("done implies function")),
        args: state.args().to_vec(),
    })
}

/// Parses and validates a token-form call.
pub fn parse_complete(
    tokens: &[u32],
    vocab: &Vocabulary,
    registry: &Registry,
) -> Result<FunctionalCall, DecodeError> {
    bind(parse_tokens(tokens, vocab)?, registry)
}

static NAME_HEAD: Lazy<Regex> = Lazy::new(|| Regex::new(r"^([A-Za-z_][A-Za-z0-9_]*)\(").unwrap());

/// Parses call text in either token form (`<nexa_i>(...)<nexa_end>`) or name form
/// (`name(...)`, terminator optional), e.g. recorded outputs of other systems.
pub fn parse_text(
    text: &str,
    vocab: &Vocabulary,
    registry: &Registry,
) -> Result<FunctionalCall, DecodeError> {
    let text = text.trim();
    if let Some(c) = NAME_HEAD.captures(text) {
        let name = &c[1];
        let Some(index) = registry.index_of(name) else {
            return Err(DecodeError::ValidationFailure(validate(
                &RawCall {
                    function: FunctionRef::Name(name.to_string()),
                    args: Vec::new(),
                },
                registry,
            )));
        };
        let id = vocab
            .functional_id(index)
            .ok_or_else(|| DecodeError::ParseFailure {
                position: 0,
                message: format!("vocabulary has no functional token for `{name}`"),
            })?;
        let mut tokens = vec![id];
        tokens.extend(vocab.encode(&text[name.len()..]));
        if tokens.last() != Some(&NEXA_END) {
            tokens.push(NEXA_END);
        }
        return parse_complete(&tokens, vocab, registry);
    }
    parse_complete(&vocab.encode(text), vocab, registry)
}
