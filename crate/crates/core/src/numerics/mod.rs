//! Dense tensors, a reverse-mode tape, and the Adam optimizer.

mod adam;
mod graph;
pub mod kernels;
mod rng;
mod tensor;

pub use adam::{AdamConfig, AdamState};
pub use graph::{Gradients, Graph, NodeId};
pub use rng::{Rng, SeedStream};
pub use tensor::Tensor;

use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum NumericsError {
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("loss must be a single value, got shape {0:?}")]
    NotScalarLoss(Vec<usize>),
    #[error("every position is masked out")]
    AllMasked,
}

impl Graph {
    /// Mean next-token cross-entropy over positions whose mask is 1.
    pub fn cross_entropy(
        &mut self,
        logits: NodeId,
        targets: &[usize],
        mask: &[f32],
    ) -> Result<NodeId, NumericsError> {
        if mask.iter().any(|&m| m != 0.0 && m != 1.0) {
            return Err(NumericsError::ShapeMismatch(
                "mask values must be 0 or 1".into(),
            ));
        }
        let active: f32 = mask.iter().sum();
        if active == 0.0 {
            return Err(NumericsError::AllMasked);
        }
        self.token_nll(logits, targets, mask, active)
    }
}
