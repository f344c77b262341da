//! The staged pipeline: LM pretraining (A), contrastive encoder training (B),
//! projector alignment (C), functional-token fine-tuning (D) and policy-gradient
//! refinement (E), plus the checkpoint format and the oracle reward.

mod checkpoint;
mod data;
mod reward;
mod stages;

pub use checkpoint::{Checkpoint, ProvenanceEntry, CHECKPOINT_MAGIC, CHECKPOINT_VERSION};
pub use data::{prompt_tokens, text_tokens, PairExample, TaskItem, TextExample};
pub use reward::{normalize_whitespace, reward, RewardConfig};
pub use stages::{
    caption_loss, image_sensitivity, retrieval_top1, stage_a_pretrain, stage_b_contrastive,
    stage_c_align, stage_d_functional, stage_e_rl, MetricRecord, RlSettings, StageReport,
};

use std::fmt;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::model::{ModelError, ParamGroup};
use crate::numerics::NumericsError;
use crate::registry::RegistryError;
use crate::tokenizer::TokenizerError;
use crate::world::WorldError;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum TrainingError {
    #[error("training corpus is empty")]
    EmptyCorpus,
    #[error("contrastive training needs at least 2 pairs per batch, got {0}")]
    BatchTooSmall(usize),
    #[error("stage {stage} requires completed stage {missing}")]
    MissingPrerequisiteStage { stage: Stage, missing: Stage },
    #[error("vocabulary lacks functional tokens for the registry")]
    VocabularyNotExtended,
    #[error("stage {stage} cannot follow stage {last}")]
    StageOrder { stage: Stage, last: Stage },
    #[error("invalid stage config: {0}")]
    InvalidConfig(String),
    #[error("checkpoint: {0}")]
    Checkpoint(String),
    #[error("unsupported checkpoint version {0}")]
    UnsupportedVersion(u32),
    #[error("io: {0}")]
    Io(String),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Numerics(#[from] NumericsError),
    #[error(transparent)]
    World(#[from] WorldError),
    #[error(transparent)]
    Registry(#[from] RegistryError),
    #[error(transparent)]
    Tokenizer(#[from] TokenizerError),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum Stage {
    A,
    B,
    C,
    D,
    E,
}

impl Stage {
    pub const ALL: [Stage; 5] = [Stage::A, Stage::B, Stage::C, Stage::D, Stage::E];

    pub fn parse(s: &str) -> Option<Self> {
        match s.to_ascii_uppercase().as_str() {
            "A" => Some(Stage::A),
            "B" => Some(Stage::B),
            "C" => Some(Stage::C),
            "D" => Some(Stage::D),
            "E" => Some(Stage::E),
            _ => None,
        }
    }

    /// Groups the stage leaves untouched by default.
    pub fn default_freeze(self) -> Vec<ParamGroup> {
        use ParamGroup::*;
        match self {
            Stage::A => vec![Encoder, Projector, ContrastHead, Temperature],
            Stage::B => vec![Lm, Projector],
            Stage::C => vec![Lm, Encoder, ContrastHead, Temperature],
            Stage::D | Stage::E => vec![ContrastHead, Temperature],
        }
    }
}

impl fmt::Display for Stage {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{self:?}")
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StageConfig {
    pub stage: Stage,
    pub steps: usize,
    pub batch_size: usize,
    /// Peak learning rate; the schedule warms up linearly, then decays by cosine to a tenth.
    pub lr: f32,
    pub seed: u64,
    pub freeze: Vec<ParamGroup>,
    /// Metrics are recorded every `log_every` steps and at the last step.
    pub log_every: usize,
}

impl StageConfig {
    /// Settings used by the reference pipeline.
    pub fn default_for(stage: Stage) -> Self {
        let (steps, batch_size, lr) = match stage {
            Stage::A => (2000, 16, 2e-3),
            Stage::B => (5000, 64, 2e-3),
            Stage::C => (600, 16, 2e-3),
            Stage::D => (1500, 16, 1e-3),
            Stage::E => (150, 4, 5e-5),
        };
        Self {
            stage,
            steps,
            batch_size,
            lr,
            seed: 0,
            freeze: stage.default_freeze(),
            log_every: 50,
        }
    }

    pub fn check(&self, expected: Stage) -> Result<(), TrainingError> {
        if self.stage != expected {
            return Err(TrainingError::InvalidConfig(format!(
                "config is for stage {}, running {expected}",
                self.stage
            )));
        }
        if self.batch_size == 0 {
            return Err(TrainingError::InvalidConfig(
                "batch_size must be at least 1".into(),
            ));
        }
        if !(self.lr.is_finite() && self.lr >= 0.0) {
            return Err(TrainingError::InvalidConfig(format!(
                "learning rate {}",
                self.lr
            )));
        }
        if self.log_every == 0 {
            return Err(TrainingError::InvalidConfig(
                "log_every must be at least 1".into(),
            ));
        }
        Ok(())
    }

    /// Learning rate at `step` (0-based).
    pub fn lr_at(&self, step: usize) -> f32 {
        let warmup = (self.steps / 10).clamp(1, 100);
        if step < warmup {
            return self.lr * (step + 1) as f32 / warmup as f32;
        }
        let span = (self.steps - warmup).max(1) as f32;
        let progress = ((step - warmup) as f32 / span).min(1.0);
        let floor = 0.1;
        self.lr * (floor + (1.0 - floor) * 0.5 * (1.0 + (std::f32::consts::PI * progress).cos()))
    }
}
