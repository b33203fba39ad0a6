//! Polyline primitives and preprocessing.
//!
//! Everything in a map is an ordered 2D vertex sequence in meters. This
//! module owns the primitive itself plus the operations the rest of the
//! pipeline needs: Ramer-Douglas-Peucker simplification, arc-length
//! resampling, keypoint extraction (bbox / start-middle-end / extreme
//! points), grid quantization and the flattened coordinate-token encoding
//! consumed by the polyline generator.
//!
//! All functions are pure; types are immutable after construction.

mod keypoints;
mod polyline;
mod tokens;


pub use keypoints::{bbox_iou, extract_keypoints, KeypointSet, ReprKind, IOU_FLOOR_EXTENT};
pub use polyline::{
    rdp_simplify, resample, ElementClass, MapElement, Point, Polyline, ResampleStrategy,
    VectorMap,
};
pub use tokens::{
    dequantize_vertex, flatten_to_tokens, quantize_vertex, tokens_to_polyline, GridSpec,
    VertexTokenSeq,
};

use thiserror::Error;

/// Errors raised by polyline construction and token decoding.
#[derive(Debug, Error)]
pub enum GeometryError {
    #[error("invalid polyline: {0}")]
    InvalidPolyline(String),
    #[error("invalid grid spec: {0}")]
    InvalidGrid(String),
    #[error("token decode error: {0}")]
    Decode(String),
}
