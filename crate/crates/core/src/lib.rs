//! Vectorized map construction at desk scale.
//!
//! A scene is a set of class-labeled polylines (road boundaries, lane
//! dividers, pedestrian crossings). The pipeline rasterizes synthetic
//! scenes into bird's-eye-view occupancy grids, detects map elements as
//! keypoint sets with a transformer set detector, and generates each
//! element's polyline autoregressively as a sequence of quantized
//! coordinate tokens. Evaluation matches predictions to ground truth by
//! Chamfer or discrete Fréchet distance and reports average precision.
//!
//! Module map:
//! - [`geometry`]: polyline primitives, simplification, resampling,
//!   keypoints, coordinate quantization/tokenization.
//! - [`metrics`]: curve distances and instance-level AP evaluation.
//! - [`matching`]: Hungarian assignment and the detector set loss.
//! - [`numerics`]: dense tensors with reverse-mode autodiff, AdamW.
//! - [`model`]: BEV encoder, map element detector, polyline generator.
//! - [`synthdata`]: procedural scenes and BEV rasterization.
//! - [`pipeline`]: two-stage training, evaluation, SVG rendering, CLI.

pub mod geometry;
pub mod matching;
pub mod metrics;
pub mod model;
pub mod numerics;
pub mod pipeline;
pub mod synthdata;
