use std::fs;
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{Stage, StageConfig, TrainingError};
use crate::model::{Model, ModelConfig};
use crate::numerics::Tensor;
use crate::registry::Registry;
use crate::tokenizer::Vocabulary;

pub const CHECKPOINT_MAGIC: &[u8; 5] = b"OCTO3";
pub const CHECKPOINT_VERSION: u32 = 1;
/// Standard deviation of the noise added to new functional-token rows.
pub const EXTENSION_NOISE: f32 = 0.02;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ProvenanceEntry {
    pub stage: Stage,
    pub config: StageConfig,
    /// Training loss at the last step; absent when the stage ran zero steps.
    pub final_loss: Option<f32>,
}

#[derive(Serialize, Deserialize)]
struct TensorHeader {
    name: String,
    shape: Vec<usize>,
}

#[derive(Serialize, Deserialize)]
struct Header {
    model_config: ModelConfig,
    specials: Vec<String>,
    extended: bool,
    provenance: Vec<ProvenanceEntry>,
    tensors: Vec<TensorHeader>,
}

/// A model with its vocabulary and the stages that produced it.
#[derive(Clone, Debug)]
pub struct Checkpoint {
    pub model: Model,
    pub vocab: Vocabulary,
    pub provenance: Vec<ProvenanceEntry>,
}

fn check_order(provenance: &[ProvenanceEntry]) -> Result<(), TrainingError> {
    for w in provenance.windows(2) {
        if w[1].stage < w[0].stage {
            return Err(TrainingError::StageOrder {
                stage: w[1].stage,
                last: w[0].stage,
            });
        }
    }
    Ok(())
}

impl Checkpoint {
    /// A freshly initialized model over the base vocabulary.
    pub fn initial(mut config: ModelConfig, seed: u64) -> Result<Self, TrainingError> {
        let vocab = Vocabulary::new();
        config.vocab_size = vocab.size();
        Ok(Self {
            model: Model::new(config, seed)?,
            vocab,
            provenance: Vec::new(),
        })
    }

    pub fn has_stage(&self, stage: Stage) -> bool {
        self.provenance.iter().any(|p| p.stage == stage)
    }

    pub fn last_stage(&self) -> Option<Stage> {
        self.provenance.last().map(|p| p.stage)
    }

    /// Fails if `stage` would break the A ≤ B ≤ C ≤ D ≤ E order.
    pub fn check_can_run(&self, stage: Stage) -> Result<(), TrainingError> {
        match self.last_stage() {
            Some(last) if stage < last => Err(TrainingError::StageOrder { stage, last }),
            _ => Ok(()),
        }
    }

    pub fn record(&mut self, entry: ProvenanceEntry) -> Result<(), TrainingError> {
        self.check_can_run(entry.stage)?;
        self.provenance.push(entry);
        Ok(())
    }

    /// Adds one functional token per registered function. New embedding rows
    /// start at the mean of the existing rows plus small Gaussian noise.
    pub fn extend_vocabulary(
        &mut self,
        registry: &Registry,
        seed: u64,
    ) -> Result<(), TrainingError> {
        if !registry.is_frozen() {
            return Err(TrainingError::Registry(
                crate::registry::RegistryError::NotFrozen,
            ));
        }
        let vocab = self.vocab.extend_with_functional_tokens(registry.len())?;
        self.model
            .resize_vocab(vocab.size(), EXTENSION_NOISE, seed)?;
        self.vocab = vocab;
        Ok(())
    }

    pub fn is_extended_for(&self, registry: &Registry) -> bool {
        self.vocab.is_extended() && self.vocab.functional_count() == registry.len()
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>, TrainingError> {
        let params = &self.model.params;
        let header = Header {
            model_config: self.model.config().clone(),
            specials: self.vocab.specials().to_vec(),
            extended: self.vocab.is_extended(),
            provenance: self.provenance.clone(),
            tensors: (0..params.len())
                .map(|i| TensorHeader {
                    name: params.name(i).to_string(),
                    shape: params.tensors[i].shape().to_vec(),
                })
                .collect(),
        };
        let json =
            serde_json::to_vec(&header).map_err(|e| TrainingError::Checkpoint(e.to_string()))?;
        let mut out = Vec::with_capacity(json.len() + 4 * params.count() + 17);
        out.extend_from_slice(CHECKPOINT_MAGIC);
        out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
        out.extend_from_slice(&(json.len() as u64).to_le_bytes());
        out.extend_from_slice(&json);
        for t in &params.tensors {
            for v in t.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self, TrainingError> {
        let bad = |m: &str| TrainingError::Checkpoint(m.to_string());
        if bytes.len() < 17 || &bytes[..5] != CHECKPOINT_MAGIC {
            return Err(bad("missing OCTO3 magic"));
        }
        let version = u32::from_le_bytes(bytes[5..9].try_into().expect("4 bytes"));
        if version != CHECKPOINT_VERSION {
            return Err(TrainingError::UnsupportedVersion(version));
        }
        let len = u64::from_le_bytes(bytes[9..17].try_into().expect("8 bytes")) as usize;
        let body = &bytes[17..];
        if body.len() < len {
            return Err(bad("truncated header"));
        }
        let header: Header = serde_json::from_slice(&body[..len])
            .map_err(|e| TrainingError::Checkpoint(e.to_string()))?;
        check_order(&header.provenance)?;
        let vocab = Vocabulary::from_specials(&header.specials, header.extended)?;
        if vocab.size() != header.model_config.vocab_size {
            return Err(bad("vocabulary size disagrees with model config"));
        }
        let mut raw = &body[len..];
        let mut named = Vec::with_capacity(header.tensors.len());
        for th in header.tensors {
            let n: usize = th.shape.iter().product();
            if raw.len() < 4 * n {
                return Err(bad("truncated tensor data"));
            }
            let data = raw[..4 * n]
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
                .collect();
            raw = &raw[4 * n..];
            named.push((th.name, Tensor::new(&th.shape, data)?));
        }
        if !raw.is_empty() {
            return Err(bad("trailing bytes after tensors"));
        }
        let model = Model::from_named(header.model_config, named)?;
        Ok(Self {
            model,
            vocab,
            provenance: header.provenance,
        })
    }

    pub fn save(&self, path: &Path) -> Result<(), TrainingError> {
        let bytes = self.to_bytes()?;
        let io = |e: std::io::Error| TrainingError::Io(format!("{}: {e}", path.display()));
        let mut f = fs::File::create(path).map_err(io)?;
        f.write_all(&bytes).map_err(io)
    }

    pub fn load(path: &Path) -> Result<Self, TrainingError> {
        let bytes =
            fs::read(path).map_err(|e| TrainingError::Io(format!("{}: {e}", path.display())))?;
        Self::from_bytes(&bytes)
    }
}
