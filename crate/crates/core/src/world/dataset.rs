use std::fs;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use base64::engine::general_purpose::STANDARD as B64;
use base64::Engine as _;
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use super::{
    caption, generate_scene, generate_task, templates, Language, Scene, Split, TaskExample,
    WorldError, PIXEL_BYTES,
};
use crate::numerics::{Rng, SeedStream};
use crate::registry::{CallStyle, Registry};

/// What a block of seeds is used for. Seeds are laid out as
/// `base << 40 | purpose << 32 | index`, so blocks never overlap.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Purpose {
    Lm = 1,
    Contrastive = 2,
    Alignment = 3,
    Functional = 4,
    Rl = 5,
    Eval = 6,
    EvalPairs = 7,
}

const MAX_BASE: u64 = 1 << 24;
const MAX_INDEX: u64 = 1 << 32;

pub fn task_seed(base: u64, purpose: Purpose, index: u64) -> u64 {
    assert!(base < MAX_BASE && index < MAX_INDEX, "seed layout overflow");
    base << 40 | (purpose as u64) << 32 | index
}

/// Held-out seeds are exactly the evaluation purposes.
pub fn split_of(seed: u64) -> Split {
    match (seed >> 32) & 0xff {
        6 | 7 => Split::Eval,
        _ => Split::Train,
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct TextRecord {
    pub text: String,
    pub language: Language,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct PairRecord {
    pub id: String,
    pub seed: u64,
    pub language: Language,
    pub caption: String,
    /// Base-64 of the raw 32×32×3 bytes.
    pub pixels: String,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct TaskRecord {
    pub id: String,
    pub seed: u64,
    pub language: Language,
    pub query: String,
    pub function: String,
    /// Name-form call text.
    pub target: String,
    pub split: Split,
    pub pixels: String,
}

fn decode_pixels(b64: &str) -> Result<Vec<u8>, WorldError> {
    let bytes = B64
        .decode(b64)
        .map_err(|e| WorldError::MalformedRecord(format!("pixels: {e}")))?;
    if bytes.len() != PIXEL_BYTES {
        return Err(WorldError::MalformedRecord(format!(
            "pixels hold {} bytes, want {PIXEL_BYTES}",
            bytes.len()
        )));
    }
    Ok(bytes)
}

impl PairRecord {
    pub fn new(id: String, scene: &Scene, language: Language) -> Self {
        Self {
            id,
            seed: scene.seed,
            language,
            caption: caption(scene, language),
            pixels: B64.encode(&scene.pixels),
        }
    }

    pub fn pixels(&self) -> Result<Vec<u8>, WorldError> {
        decode_pixels(&self.pixels)
    }
}

impl TaskRecord {
    pub fn new(id: String, task: &TaskExample, registry: &Registry) -> Self {
        Self {
            id,
            seed: task.scene.seed,
            language: task.language,
            query: task.query.clone(),
            function: task.function().to_string(),
            target: registry.render_call(&task.target_call, CallStyle::Name),
            split: task.split,
            pixels: B64.encode(&task.scene.pixels),
        }
    }

    pub fn pixels(&self) -> Result<Vec<u8>, WorldError> {
        decode_pixels(&self.pixels)
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct DatasetConfig {
    pub seed: u64,
    pub lm_lines: usize,
    pub contrastive_pairs: usize,
    pub alignment_pairs: usize,
    pub functional_tasks: usize,
    pub rl_prompts: usize,
    pub eval_tasks: usize,
    pub eval_pairs: usize,
}

impl Default for DatasetConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            lm_lines: 20_000,
            contrastive_pairs: 8_000,
            alignment_pairs: 8_000,
            functional_tasks: 12_000,
            rl_prompts: 2_000,
            eval_tasks: 500,
            eval_pairs: 512,
        }
    }
}

impl DatasetConfig {
    pub fn check(&self) -> Result<(), WorldError> {
        let sizes = [
            self.lm_lines,
            self.contrastive_pairs,
            self.alignment_pairs,
            self.functional_tasks,
            self.rl_prompts,
            self.eval_tasks,
            self.eval_pairs,
        ];
        if sizes.iter().any(|&n| n == 0) {
            return Err(WorldError::InvalidSpec(
                "every dataset size must be at least 1".into(),
            ));
        }
        if self.seed >= MAX_BASE {
            return Err(WorldError::InvalidSpec(format!(
                "dataset seed must be below {MAX_BASE}"
            )));
        }
        Ok(())
    }
}

/// Tasks for seeds `index` in `0..n` of one purpose block.
pub fn tasks(
    base: u64,
    purpose: Purpose,
    n: usize,
    registry: &Registry,
) -> Result<Vec<TaskExample>, WorldError> {
    (0..n as u64)
        .map(|i| generate_task(task_seed(base, purpose, i), registry))
        .collect()
}

/// Scenes with captions in a seed-chosen language.
pub fn caption_pairs(base: u64, purpose: Purpose, n: usize) -> Vec<(Scene, Language)> {
    (0..n as u64)
        .map(|i| {
            let seed = task_seed(base, purpose, i);
            let language = if Rng::new(seed, SeedStream::Custom(3)).below(2) == 0 {
                Language::En
            } else {
                Language::Zh
            };
            (generate_scene(seed), language)
        })
        .collect()
}

/// Captions and queries for language-model pretraining.
pub fn lm_texts(base: u64, n: usize, registry: &Registry) -> Result<Vec<TextRecord>, WorldError> {
    let mut out = Vec::with_capacity(n);
    for i in 0..n as u64 {
        let seed = task_seed(base, Purpose::Lm, i);
        if i % 2 == 0 {
            let language = if Rng::new(seed, SeedStream::Custom(3)).below(2) == 0 {
                Language::En
            } else {
                Language::Zh
            };
            out.push(TextRecord {
                text: caption(&generate_scene(seed), language),
                language,
            });
        } else {
            let t = generate_task(seed, registry)?;
            out.push(TextRecord {
                text: t.query,
                language: t.language,
            });
        }
    }
    Ok(out)
}

pub fn write_jsonl<T: Serialize>(path: &Path, rows: &[T]) -> Result<(), WorldError> {
    let io = |e: std::io::Error| WorldError::IoFailure(format!("{}: {e}", path.display()));
    let mut w = BufWriter::new(fs::File::create(path).map_err(io)?);
    for r in rows {
        let line = serde_json::to_string(r).map_err(|e| WorldError::IoFailure(e.to_string()))?;
        writeln!(w, "{line}").map_err(io)?;
    }
    w.flush().map_err(io)
}

pub fn read_jsonl<T: DeserializeOwned>(path: &Path) -> Result<Vec<T>, WorldError> {
    let file = fs::File::open(path)
        .map_err(|e| WorldError::IoFailure(format!("{}: {e}", path.display())))?;
    let mut out = Vec::new();
    for (n, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| WorldError::IoFailure(format!("{}: {e}", path.display())))?;
        if line.trim().is_empty() {
            continue;
        }
        out.push(serde_json::from_str(&line).map_err(|e| {
            WorldError::MalformedRecord(format!("{} line {}: {e}", path.display(), n + 1))
        })?);
    }
    Ok(out)
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub template_version: u32,
    pub config: DatasetConfig,
    pub files: Vec<(String, usize)>,
}

impl DatasetManifest {
    pub const FILE: &'static str = "manifest.json";
    pub const LM: &'static str = "lm_corpus.jsonl";
    pub const CONTRASTIVE: &'static str = "contrastive.jsonl";
    pub const ALIGNMENT: &'static str = "alignment.jsonl";
    pub const FUNCTIONAL: &'static str = "functional.jsonl";
    pub const RL: &'static str = "rl_prompts.jsonl";
    pub const EVAL: &'static str = "eval.jsonl";
    pub const EVAL_PAIRS: &'static str = "eval_pairs.jsonl";

    pub fn path(dir: &Path, file: &str) -> PathBuf {
        dir.join(file)
    }
}

fn pair_records(base: u64, purpose: Purpose, n: usize, prefix: &str) -> Vec<PairRecord> {
    caption_pairs(base, purpose, n)
        .iter()
        .enumerate()
        .map(|(i, (scene, lang))| PairRecord::new(format!("{prefix}-{i}"), scene, *lang))
        .collect()
}

fn task_records(
    base: u64,
    purpose: Purpose,
    n: usize,
    prefix: &str,
    registry: &Registry,
) -> Result<Vec<TaskRecord>, WorldError> {
    Ok(tasks(base, purpose, n, registry)?
        .iter()
        .enumerate()
        .map(|(i, t)| TaskRecord::new(format!("{prefix}-{i}"), t, registry))
        .collect())
}

/// Writes every corpus into `dir`. Output depends only on `config` and the
/// template table, so rebuilding gives byte-identical files.
pub fn build_datasets(
    config: &DatasetConfig,
    dir: &Path,
    registry: &Registry,
) -> Result<DatasetManifest, WorldError> {
    config.check()?;
    fs::create_dir_all(dir)
        .map_err(|e| WorldError::IoFailure(format!("{}: {e}", dir.display())))?;
    let b = config.seed;
    let mut files = Vec::new();
    let mut put = |name: &str, n: usize| files.push((name.to_string(), n));

    let lm = lm_texts(b, config.lm_lines, registry)?;
    write_jsonl(&dir.join(DatasetManifest::LM), &lm)?;
    put(DatasetManifest::LM, lm.len());
    for (name, purpose, n, prefix) in [
        (
            DatasetManifest::CONTRASTIVE,
            Purpose::Contrastive,
            config.contrastive_pairs,
            "con",
        ),
        (
            DatasetManifest::ALIGNMENT,
            Purpose::Alignment,
            config.alignment_pairs,
            "aln",
        ),
        (
            DatasetManifest::EVAL_PAIRS,
            Purpose::EvalPairs,
            config.eval_pairs,
            "evp",
        ),
    ] {
        write_jsonl(&dir.join(name), &pair_records(b, purpose, n, prefix))?;
        put(name, n);
    }
    for (name, purpose, n, prefix) in [
        (
            DatasetManifest::FUNCTIONAL,
            Purpose::Functional,
            config.functional_tasks,
            "fn",
        ),
        (DatasetManifest::RL, Purpose::Rl, config.rl_prompts, "rl"),
        (
            DatasetManifest::EVAL,
            Purpose::Eval,
            config.eval_tasks,
            "eval",
        ),
    ] {
        write_jsonl(
            &dir.join(name),
            &task_records(b, purpose, n, prefix, registry)?,
        )?;
        put(name, n);
    }
    let manifest = DatasetManifest {
        template_version: templates().version,
        config: config.clone(),
        files,
    };
    let text = serde_json::to_string_pretty(&manifest)
        .map_err(|e| WorldError::IoFailure(e.to_string()))?;
    fs::write(dir.join(DatasetManifest::FILE), text + "\n")
        .map_err(|e| WorldError::IoFailure(e.to_string()))?;
    Ok(manifest)
}
