//! Dense 2D tensors with reverse-mode automatic differentiation.
//!
//! A [`Graph`] is an append-only tape of nodes; every operation records
//! its inputs and enough forward state to run the chain rule backwards.
//! Parameters are trainable leaves created before a watermark; each
//! training step rewinds the tape to the watermark, rebuilds the forward
//! pass, and calls [`Graph::backward`]. Gradients accumulate on leaves
//! until explicitly cleared.
//!
//! All arithmetic is 64-bit; training at desk scale favors verifiable
//! gradients over throughput. The optimizer is AdamW with decoupled
//! weight decay and global-norm gradient clipping, and the checkpoint
//! format is a self-describing manifest plus little-endian f64 payload.

mod check;
mod checkpoint;
mod optim;
mod tensor;

#[cfg(test)]
mod tests;

pub use check::finite_diff_check;
pub use checkpoint::{load_checkpoint, restore_registry, save_checkpoint, CheckpointData};
pub use optim::{adamw_step, lr_at, AdamWConfig, LrSchedule, OptimState};
pub use tensor::{concat_cols, concat_rows, Graph, Tensor, ATTENTION_MASK_VALUE};

use thiserror::Error;

#[derive(Debug, Error)]
pub enum NumericsError {
    #[error("shape error in {op}: {detail}")]
    Shape { op: &'static str, detail: String },
    #[error("backward requires a scalar loss, got {rows}x{cols}")]
    NonScalarLoss { rows: usize, cols: usize },
    #[error("tensors belong to different graphs (op {0})")]
    GraphMismatch(&'static str),
    #[error("non-finite gradient on parameter '{0}'")]
    NonFiniteGrad(String),
    #[error("non-finite value in {0}")]
    NonFinite(String),
    #[error("checkpoint I/O failed for {path}: {source}")]
    CheckpointIo {
        path: String,
        source: std::io::Error,
    },
    #[error("corrupt checkpoint: {0}")]
    CheckpointCorrupt(String),
}

/// Named trainable parameters in registration order.
///
/// Registration order is the serialization order, which keeps checkpoint
/// bytes reproducible for a fixed seed and config.
#[derive(Debug, Clone, Default)]
pub struct ParamRegistry {
    entries: Vec<(String, Tensor)>,
}

impl ParamRegistry {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn register(&mut self, name: impl Into<String>, tensor: Tensor) -> Tensor {
        let name = name.into();
        assert!(
            !self.entries.iter().any(|(n, _)| n == &name),
            "duplicate parameter name {name}"
        );
        self.entries.push((name, tensor.clone()));
        tensor
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.entries.iter().map(|(n, t)| (n.as_str(), t))
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.entries.iter().find(|(n, _)| n == name).map(|(_, t)| t)
    }

    /// Total number of scalar parameters.
    pub fn scalar_count(&self) -> usize {
        self.entries.iter().map(|(_, t)| t.elem_count()).sum()
    }
}
