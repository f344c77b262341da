//! Function schemas, functional-token assignment, and call rendering.
//!
//! Schemas are registered in order; the i-th registration owns `<nexa_i>`.
//! After [`Registry::freeze`] the registry is read-only and may be shared.

use std::collections::HashMap;
use std::fmt;
use std::path::Path;

use once_cell::sync::Lazy;
use regex::Regex;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::tokenizer::{functional_surface, Vocabulary, FIRST_FUNCTIONAL};

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum RegistryError {
    #[error("malformed declaration: {0}")]
    MalformedDeclaration(String),
    #[error("unsupported parameter kind `{kind}` for `{param}`")]
    UnsupportedParamKind { param: String, kind: String },
    #[error("function `{0}` is already registered")]
    DuplicateName(String),
    #[error("registry is frozen")]
    RegistryFrozen,
    #[error("registry must be frozen first")]
    NotFrozen,
    #[error("unknown function {0}")]
    UnknownFunction(String),
    #[error("invalid schema: {0}")]
    InvalidSchema(String),
    #[error("vocabulary holds {vocab} functional tokens but registry has {registry} schemas")]
    VocabularyMismatch { vocab: usize, registry: usize },
    #[error("manifest line {line}: {msg}")]
    Manifest { line: usize, msg: String },
    #[error("io: {0}")]
    Io(String),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ParamKind {
    String,
    Integer,
    Enum,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ParamSpec {
    pub name: String,
    pub kind: ParamKind,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub enum_values: Vec<String>,
    pub description: String,
}

impl ParamSpec {
    /// Enum and string parameters are both written as quoted literals.
    pub fn takes_string(&self) -> bool {
        matches!(self.kind, ParamKind::String | ParamKind::Enum)
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct FunctionSchema {
    pub name: String,
    pub description: String,
    pub params: Vec<ParamSpec>,
    #[serde(rename = "returns")]
    pub returns_description: String,
}

fn is_identifier(s: &str) -> bool {
    let mut chars = s.chars();
    matches!(chars.next(), Some(c) if c.is_ascii_alphabetic() || c == '_')
        && chars.all(|c| c.is_ascii_alphanumeric() || c == '_')
}

impl FunctionSchema {
    pub fn check(&self) -> Result<(), RegistryError> {
        let bad = |m: String| Err(RegistryError::InvalidSchema(m));
        if !is_identifier(&self.name) {
            return bad(format!("function name `{}`", self.name));
        }
        let mut seen = std::collections::HashSet::new();
        for p in &self.params {
            if !is_identifier(&p.name) {
                return bad(format!("parameter name `{}`", p.name));
            }
            if !seen.insert(p.name.as_str()) {
                return bad(format!(
                    "duplicate parameter `{}` in `{}`",
                    p.name, self.name
                ));
            }
            let uniq: std::collections::HashSet<_> = p.enum_values.iter().collect();
            if uniq.len() != p.enum_values.len() {
                return bad(format!("duplicate enum value in `{}`", p.name));
            }
            if (p.kind == ParamKind::Enum) == p.enum_values.is_empty() {
                return bad(format!(
                    "`{}`: enum values present iff kind is enum",
                    p.name
                ));
            }
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct TokenAssignment {
    pub schema_name: String,
    pub token_index: usize,
    /// Vocabulary id; filled in when the registry is frozen.
    pub token_id: Option<u32>,
}

impl TokenAssignment {
    pub fn surface(&self) -> String {
        functional_surface(self.token_index)
    }
}

/// Positional argument value.
#[derive(Clone, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(untagged)]
pub enum ArgValue {
    Str(String),
    Int(i64),
}

impl fmt::Display for ArgValue {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            ArgValue::Str(s) => write!(f, "'{}'", escape_literal(s)),
            ArgValue::Int(n) => write!(f, "{n}"),
        }
    }
}

pub fn escape_literal(s: &str) -> String {
    let mut out = String::with_capacity(s.len() + 2);
    for c in s.chars() {
        if c == '\'' || c == '\\' {
            out.push('\\');
        }
        out.push(c);
    }
    out
}

/// A parsed call bound to its schema.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct FunctionalCall {
    pub schema: FunctionSchema,
    pub args: Vec<ArgValue>,
}

impl FunctionalCall {
    pub fn name(&self) -> &str {
        &self.schema.name
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum CallStyle {
    /// `<nexa_i>(...)<nexa_end>`
    Token,
    /// `name(...)<nexa_end>`
    Name,
}

#[derive(Clone, Copy, Debug)]
pub enum Key<'a> {
    Index(usize),
    Name(&'a str),
}

impl From<usize> for Key<'_> {
    fn from(i: usize) -> Self {
        Key::Index(i)
    }
}

impl<'a> From<&'a str> for Key<'a> {
    fn from(s: &'a str) -> Self {
        Key::Name(s)
    }
}

#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct Registry {
    schemas: Vec<FunctionSchema>,
    assignments: Vec<TokenAssignment>,
    by_name: HashMap<String, usize>,
    frozen: bool,
}

impl Registry {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn register(&mut self, schema: FunctionSchema) -> Result<TokenAssignment, RegistryError> {
        if self.frozen {
            return Err(RegistryError::RegistryFrozen);
        }
        schema.check()?;
        if self.by_name.contains_key(&schema.name) {
            return Err(RegistryError::DuplicateName(schema.name));
        }
        let index = self.schemas.len();
        let a = TokenAssignment {
            schema_name: schema.name.clone(),
            token_index: index,
            token_id: None,
        };
        self.by_name.insert(schema.name.clone(), index);
        self.schemas.push(schema);
        self.assignments.push(a.clone());
        Ok(a)
    }

    /// Binds token ids from `vocab` and makes the registry immutable.
    pub fn freeze(&mut self, vocab: &Vocabulary) -> Result<(), RegistryError> {
        if self.frozen {
            return Err(RegistryError::RegistryFrozen);
        }
        if vocab.functional_count() != self.schemas.len() {
            return Err(RegistryError::VocabularyMismatch {
                vocab: vocab.functional_count(),
                registry: self.schemas.len(),
            });
        }
        for a in &mut self.assignments {
            a.token_id = vocab.functional_id(a.token_index);
        }
        self.frozen = true;
        Ok(())
    }

    /// Freezes against the standard layout (`<nexa_i>` = 261 + i).
    pub fn freeze_standard(&mut self) -> Result<Vocabulary, RegistryError> {
        let vocab = Vocabulary::new()
            .extend_with_functional_tokens(self.schemas.len())
            .expect("fresh vocabulary");
        self.freeze(&vocab)?;
        Ok(vocab)
    }

    pub fn is_frozen(&self) -> bool {
        self.frozen
    }

    pub fn len(&self) -> usize {
        self.schemas.len()
    }

    pub fn is_empty(&self) -> bool {
        self.schemas.is_empty()
    }

    pub fn schemas(&self) -> &[FunctionSchema] {
        &self.schemas
    }

    pub fn assignments(&self) -> &[TokenAssignment] {
        &self.assignments
    }

    pub fn index_of(&self, name: &str) -> Option<usize> {
        self.by_name.get(name).copied()
    }

    pub fn schema(&self, index: usize) -> Option<&FunctionSchema> {
        self.schemas.get(index)
    }

    pub fn lookup<'a>(
        &self,
        key: impl Into<Key<'a>>,
    ) -> Result<(usize, &FunctionSchema), RegistryError> {
        if !self.frozen {
            return Err(RegistryError::NotFrozen);
        }
        let idx = match key.into() {
            Key::Index(i) => (i < self.schemas.len())
                .then_some(i)
                .ok_or_else(|| RegistryError::UnknownFunction(functional_surface(i))),
            Key::Name(n) => self
                .index_of(n)
                .ok_or_else(|| RegistryError::UnknownFunction(n.to_string())),
        }?;
        Ok((idx, &self.schemas[idx]))
    }

    pub fn token_id(&self, index: usize) -> Option<u32> {
        self.assignments
            .get(index)
            .map(|a| a.token_id.unwrap_or(FIRST_FUNCTIONAL + index as u32))
    }

    pub fn render_call(&self, call: &FunctionalCall, style: CallStyle) -> String {
        let head = match style {
            CallStyle::Name => call.schema.name.clone(),
            CallStyle::Token => {
                let i = self
                    .index_of(&call.schema.name)
                    .expect("call validated against this registry");
                functional_surface(i)
            }
        };
        let args: Vec<String> = call.args.iter().map(ToString::to_string).collect();
        format!("{head}({})<nexa_end>", args.join(", "))
    }

    pub fn to_manifest(&self) -> String {
        let mut out = String::new();
        for s in &self.schemas {
            out.push_str(&serde_json::to_string(s).expect("schema serializes"));
            out.push('\n');
        }
        out
    }

    /// Builds (unfrozen) from JSON lines; blank lines are skipped.
    pub fn from_manifest(text: &str) -> Result<Self, RegistryError> {
        let mut reg = Registry::new();
        for (i, line) in text.lines().enumerate() {
            if line.trim().is_empty() {
                continue;
            }
            let schema: FunctionSchema =
                serde_json::from_str(line).map_err(|e| RegistryError::Manifest {
                    line: i + 1,
                    msg: e.to_string(),
                })?;
            reg.register(schema)?;
        }
        Ok(reg)
    }

    pub fn load_manifest(path: &Path) -> Result<Self, RegistryError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| RegistryError::Io(format!("{}: {e}", path.display())))?;
        Self::from_manifest(&text)
    }

    /// The ten smartphone functions shipped with the crate, frozen with the standard layout.
    pub fn demo() -> Self {
        let mut reg = Self::from_manifest(DEMO_MANIFEST).expect("bundled manifest is valid");
        reg.freeze_standard().expect("fresh registry");
        reg
    }
}

/// Appendix-style declarations of the ten demo functions.
pub const DEMO_DECLARATIONS: &str = include_str!("../data/demo_functions.txt");
/// The same functions as a manifest.
pub const DEMO_MANIFEST: &str = include_str!("../data/demo_functions.jsonl");

static SIGNATURE: Lazy<Regex> =
    Lazy::new(|| Regex::new(r"(?m)^\s*def\s+([A-Za-z_][A-Za-z0-9_]*)\s*\(([^)]*)\)\s*:").unwrap());
static PARAM_LINE: Lazy<Regex> =
    Lazy::new(|| Regex::new(r"^-\s*([A-Za-z_][A-Za-z0-9_]*)\s*\(([^)]*)\)\s*:\s*(.*)$").unwrap());
static ENUM_PHRASE: Lazy<Regex> = Lazy::new(|| {
    Regex::new(r#"must choose (?:one )?from\s+((?:"[^"]*"\s*,\s*)*"[^"]*")"#).unwrap()
});
static QUOTED: Lazy<Regex> = Lazy::new(|| Regex::new(r#""([^"]*)""#).unwrap());

fn join_lines(lines: &[&str]) -> String {
    lines
        .iter()
        .map(|l| l.trim())
        .filter(|l| !l.is_empty())
        .collect::<Vec<_>>()
        .join(" ")
}

/// Parses one `def name(...):` declaration with a docstring carrying
/// `Parameters:` and `Returns:` sections.
pub fn parse_declaration(source: &str) -> Result<FunctionSchema, RegistryError> {
    let malformed = |m: &str| RegistryError::MalformedDeclaration(m.to_string());
    let caps = SIGNATURE
        .captures(source)
        .ok_or_else(|| malformed("no `def name(...):` signature"))?;
    let name = caps[1].to_string();
    let sig_params: Vec<String> = caps[2]
        .split(',')
        .map(|p| p.trim().to_string())
        .filter(|p| !p.is_empty())
        .collect();
    let body = &source[caps.get(0).unwrap().end()..];
    let doc = match body.find("\"\"\"") {
        Some(open) => {
            let rest = &body[open + 3..];
            let close = rest
                .find("\"\"\"")
                .ok_or_else(|| malformed("unterminated docstring"))?;
            &rest[..close]
        }
        None => "",
    };

    #[derive(PartialEq)]
    enum Section {
        Description,
        Parameters,
        Returns,
    }
    let mut section = Section::Description;
    let mut description = Vec::new();
    let mut returns = Vec::new();
    let mut params: Vec<(String, String, Vec<String>)> = Vec::new();
    let mut saw_params = false;
    for raw in doc.lines() {
        let line = raw.trim();
        if line == "Parameters:" {
            section = Section::Parameters;
            saw_params = true;
            continue;
        }
        if line == "Returns:" {
            section = Section::Returns;
            continue;
        }
        match section {
            Section::Description => description.push(line),
            Section::Returns => returns.push(line.trim_start_matches("- ")),
            Section::Parameters => {
                if let Some(c) = PARAM_LINE.captures(line) {
                    params.push((
                        c[1].to_string(),
                        c[2].trim().to_string(),
                        vec![c[3].to_string()],
                    ));
                } else if !line.is_empty() {
                    let last = params
                        .last_mut()
                        .ok_or_else(|| malformed("text before first parameter entry"))?;
                    last.2.push(line.to_string());
                }
            }
        }
    }
    if !saw_params && !sig_params.is_empty() {
        return Err(malformed("missing Parameters section"));
    }
    let declared: Vec<&str> = params.iter().map(|p| p.0.as_str()).collect();
    if declared != sig_params.iter().map(String::as_str).collect::<Vec<_>>() {
        return Err(RegistryError::MalformedDeclaration(format!(
            "signature parameters {sig_params:?} disagree with documented {declared:?}"
        )));
    }

    let mut specs = Vec::with_capacity(params.len());
    for (pname, annot, lines) in params {
        let desc = lines.iter().map(|l| l.trim()).collect::<Vec<_>>().join(" ");
        let enum_values: Vec<String> = ENUM_PHRASE
            .captures(&desc)
            .map(|c| {
                QUOTED
                    .captures_iter(&c[1])
                    .map(|q| q[1].to_string())
                    .collect()
            })
            .unwrap_or_default();
        let kind = match annot.as_str() {
            "str" if !enum_values.is_empty() => ParamKind::Enum,
            "str" => ParamKind::String,
            "int" => ParamKind::Integer,
            other => {
                return Err(RegistryError::UnsupportedParamKind {
                    param: pname,
                    kind: other.to_string(),
                })
            }
        };
        specs.push(ParamSpec {
            name: pname,
            kind,
            enum_values,
            description: desc,
        });
    }
    let schema = FunctionSchema {
        name,
        description: join_lines(&description),
        params: specs,
        returns_description: join_lines(&returns),
    };
    schema
        .check()
        .map_err(|e| RegistryError::MalformedDeclaration(e.to_string()))?;
    Ok(schema)
}

/// Splits a text file into `def` blocks and parses each one.
pub fn import_declarations(text: &str) -> Result<Vec<FunctionSchema>, RegistryError> {
    let starts: Vec<usize> = SIGNATURE.find_iter(text).map(|m| m.start()).collect();
    if starts.is_empty() {
        return Err(RegistryError::MalformedDeclaration(
            "no declarations found".into(),
        ));
    }
    starts
        .iter()
        .enumerate()
        .map(|(i, &s)| {
            let end = starts.get(i + 1).copied().unwrap_or(text.len());
            parse_declaration(&text[s..end])
        })
        .collect()
}
