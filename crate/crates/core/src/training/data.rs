use crate::decoder::parse_text;
use crate::registry::{CallStyle, FunctionalCall, Registry};
use crate::tokenizer::{Vocabulary, BOS, EOS, IMG};
use crate::world::{
    caption, pixels_to_f32, Language, PairRecord, Scene, TaskExample, TaskRecord, TextRecord,
};

use super::TrainingError;

fn bytes(text: &str) -> impl Iterator<Item = u32> + '_ {
    text.bytes().map(u32::from)
}

/// `<bos> text <eos>`, with the text taken byte by byte so user input can
/// never smuggle in special tokens.
pub fn text_tokens(text: &str) -> Vec<u32> {
    let mut out = vec![BOS];
    out.extend(bytes(text));
    out.push(EOS);
    out
}

/// `<img> <bos> query <eos>`: the prompt the call is generated after.
pub fn prompt_tokens(query: &str) -> Vec<u32> {
    let mut out = vec![IMG, BOS];
    out.extend(bytes(query));
    out.push(EOS);
    out
}

#[derive(Clone, Debug, PartialEq)]
pub struct TextExample {
    pub tokens: Vec<u32>,
}

impl TextExample {
    pub fn new(text: &str) -> Self {
        Self {
            tokens: text_tokens(text),
        }
    }
}

impl From<&TextRecord> for TextExample {
    fn from(r: &TextRecord) -> Self {
        Self::new(&r.text)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct PairExample {
    pub pixels: Vec<f32>,
    pub caption: String,
    pub tokens: Vec<u32>,
}

impl PairExample {
    pub fn new(pixels: Vec<f32>, caption: String) -> Self {
        let tokens = text_tokens(&caption);
        Self {
            pixels,
            caption,
            tokens,
        }
    }

    pub fn from_scene(scene: &Scene, language: Language) -> Self {
        Self::new(scene.pixels_f32(), caption(scene, language))
    }

    pub fn from_record(r: &PairRecord) -> Result<Self, TrainingError> {
        Ok(Self::new(pixels_to_f32(&r.pixels()?), r.caption.clone()))
    }
}

/// A task ready for the model: prompt tokens, the token-form target, and the
/// oracle call for scoring.
#[derive(Clone, Debug, PartialEq)]
pub struct TaskItem {
    pub id: String,
    pub pixels: Vec<f32>,
    pub language: Language,
    pub query: String,
    pub prompt: Vec<u32>,
    pub target: FunctionalCall,
    /// `<nexa_i>(...)<nexa_end>` tokens.
    pub response: Vec<u32>,
}

impl TaskItem {
    pub fn new(
        id: String,
        pixels: Vec<f32>,
        language: Language,
        query: String,
        target: FunctionalCall,
        registry: &Registry,
        vocab: &Vocabulary,
    ) -> Self {
        let response = vocab.encode(&registry.render_call(&target, CallStyle::Token));
        Self {
            id,
            pixels,
            language,
            prompt: prompt_tokens(&query),
            query,
            target,
            response,
        }
    }

    pub fn from_example(
        id: String,
        t: &TaskExample,
        registry: &Registry,
        vocab: &Vocabulary,
    ) -> Self {
        Self::new(
            id,
            t.scene.pixels_f32(),
            t.language,
            t.query.clone(),
            t.target_call.clone(),
            registry,
            vocab,
        )
    }

    pub fn from_record(
        r: &TaskRecord,
        registry: &Registry,
        vocab: &Vocabulary,
    ) -> Result<Self, TrainingError> {
        let target = parse_text(&r.target, vocab, registry).map_err(|e| {
            TrainingError::World(crate::world::WorldError::MalformedRecord(format!(
                "{}: {e}",
                r.id
            )))
        })?;
        Ok(Self::new(
            r.id.clone(),
            pixels_to_f32(&r.pixels()?),
            r.language,
            r.query.clone(),
            target,
            registry,
            vocab,
        ))
    }

    /// Prompt followed by the response.
    pub fn sequence(&self) -> Vec<u32> {
        let mut s = self.prompt.clone();
        s.extend_from_slice(&self.response);
        s
    }
}
