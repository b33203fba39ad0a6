//! Curve distances and instance-level average precision.
//!
//! Predictions are matched to ground truth by geometric similarity:
//! Chamfer distance (order-insensitive) or discrete Fréchet distance
//! (order-sensitive). A prediction counts as a true positive when its
//! distance to an unmatched same-scene ground truth of the same class is
//! below the threshold; AP integrates the all-point precision-recall
//! curve and mAP averages over classes and thresholds.

mod ap;
mod distance;

#[cfg(test)]
mod tests;

pub use ap::{evaluate_map_set, instance_ap, APReport, ApCell, ScoredPrediction};
pub use distance::{
    chamfer_distance, chamfer_points, frechet_bruteforce, frechet_distance, frechet_points,
};

use thiserror::Error;

/// Thresholds used throughout evaluation, in meters.
pub const DEFAULT_THRESHOLDS: [f64; 3] = [0.5, 1.0, 1.5];

/// Number of vertices curves are resampled to before distance computation.
pub const DEFAULT_RESAMPLE_PTS: usize = 100;

/// Which curve distance drives matching.
#[derive(
    Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, serde::Serialize, serde::Deserialize,
)]
#[serde(rename_all = "lowercase")]
pub enum MetricKind {
    Chamfer,
    Frechet,
}

impl MetricKind {
    pub const ALL: [MetricKind; 2] = [MetricKind::Chamfer, MetricKind::Frechet];

    pub fn name(self) -> &'static str {
        match self {
            MetricKind::Chamfer => "chamfer",
            MetricKind::Frechet => "frechet",
        }
    }
}

#[derive(Debug, Error)]
pub enum EvalError {
    #[error(transparent)]
    Geometry(#[from] crate::geometry::GeometryError),
    #[error("scene id mismatch: prediction references unknown scene '{0}'")]
    SceneMismatch(String),
    #[error("brute-force Fréchet guard: {0} resampled vertices exceeds the limit of 8")]
    BruteForceGuard(usize),
}
