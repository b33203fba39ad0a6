//! Two-stage training, evaluation, rendering and the CLI surface.
//!
//! Stage 1 trains detector and generator jointly with teacher forcing
//! (ground-truth keypoints condition the generator). Stage 2 fine-tunes
//! with the keypoints of each ground truth's Hungarian-matched query as
//! generator conditions, closing the train/inference gap. Evaluation
//! runs full inference per scene and reports Chamfer/Fréchet AP.

mod ablate;
mod config;
mod eval;
mod svg;
mod train;

#[cfg(test)]
mod tests;

pub use ablate::{run_ablation, AblationResult};
pub use config::{RunConfig, SamplingSpec, Stage};
pub use eval::{evaluate, oracle_eval, EvalDiagnostics, EvalOutput, EvalRun, SceneDiagnostics};
pub use svg::render_svg;
pub use train::{
    measure_generator_nll, train, train_stage1, train_stage2, ConditionSource, TrainLogEntry,
    TrainOutcome,
};

use thiserror::Error;

#[derive(Debug, Error)]
pub enum PipelineError {
    #[error("config error: {0}")]
    Config(String),
    #[error(transparent)]
    Data(#[from] crate::synthdata::DataError),
    #[error(transparent)]
    Numerics(#[from] crate::numerics::NumericsError),
    #[error(transparent)]
    Eval(#[from] crate::metrics::EvalError),
    #[error(transparent)]
    Matching(#[from] crate::matching::MatchingError),
    #[error(transparent)]
    Geometry(#[from] crate::geometry::GeometryError),
    #[error("non-finite loss at step {step} (det {det}, gen {gen})")]
    NonFiniteLoss { step: u64, det: f64, gen: f64 },
    #[error("I/O error at {path}: {source}")]
    Io {
        path: std::path::PathBuf,
        source: std::io::Error,
    },
}

impl PipelineError {
    /// CLI exit code: 2 config, 3 data, 4 numeric failure, 1 anything else.
    pub fn exit_code(&self) -> u8 {
        match self {
            PipelineError::Config(_) => 2,
            PipelineError::Data(_) | PipelineError::Eval(_) | PipelineError::Io { .. } => 3,
            // a dataset with more elements than the model has queries is
            // a data/config mismatch, not a numeric failure
            PipelineError::Matching(crate::matching::MatchingError::TooManyGroundTruths {
                ..
            }) => 3,
            PipelineError::Numerics(_)
            | PipelineError::NonFiniteLoss { .. }
            | PipelineError::Matching(_) => 4,
            PipelineError::Geometry(_) => 3,
        }
    }
}

pub(crate) fn io_err(path: &std::path::Path, source: std::io::Error) -> PipelineError {
    PipelineError::Io {
        path: path.to_path_buf(),
        source,
    }
}
