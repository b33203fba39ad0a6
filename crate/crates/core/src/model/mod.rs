//! The three-stage network: BEV encoder, map element detector, polyline
//! generator.
//!
//! The encoder turns a multi-channel occupancy raster into a grid of
//! feature tokens (patch embedding + 2D sinusoidal positions + self
//! attention). The detector binds learned element queries to map
//! elements through deformable cross-attention with 2D reference points
//! and decodes keypoints plus class logits. The generator emits each
//! element's vertex tokens autoregressively, conditioned on a prompt of
//! class + quantized keypoints and on the BEV features.

mod detector;
mod encoder;
mod generator;
mod layers;


pub use detector::{detector_loss, DetectorOutput};
pub use encoder::BEVFeatureGrid;
pub use generator::{DecodeMode, DecodeOutcome, GeneratorCondition};

use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::geometry::{ElementClass, GridSpec, Polyline, ReprKind};
use crate::matching::DetectionSet;
use crate::metrics::ScoredPrediction;
use crate::numerics::{
    load_checkpoint, restore_registry, save_checkpoint, Graph, NumericsError, ParamRegistry,
};
use crate::synthdata::BEVRaster;

/// Architecture and quantization hyperparameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub hidden: usize,
    pub heads: usize,
    pub enc_layers: usize,
    pub det_layers: usize,
    pub gen_layers: usize,
    pub ffn_mult: usize,
    pub patch: usize,
    pub n_max: usize,
    pub n_v_max: usize,
    pub repr: ReprKind,
    pub deform_points: usize,
    pub dropout: f64,
    pub raster_channels: usize,
    pub grid: GridSpec,
}

impl ModelConfig {
    /// CPU-trainable defaults on the 30 m x 15 m desk extent.
    pub fn desk() -> Self {
        ModelConfig {
            hidden: 64,
            heads: 4,
            enc_layers: 2,
            det_layers: 2,
            gen_layers: 2,
            ffn_mult: 2,
            patch: 10,
            n_max: 12,
            n_v_max: 12,
            repr: ReprKind::Bbox,
            deform_points: 4,
            dropout: 0.2,
            raster_channels: 3,
            grid: GridSpec::desk(),
        }
    }

    /// Dimensions from the reference configuration (not CPU-trainable).
    pub fn paper() -> Self {
        ModelConfig {
            hidden: 256,
            heads: 8,
            enc_layers: 2,
            det_layers: 6,
            gen_layers: 6,
            ffn_mult: 4,
            patch: 4,
            n_max: 100,
            n_v_max: 50,
            repr: ReprKind::Bbox,
            deform_points: 4,
            dropout: 0.2,
            raster_channels: 3,
            grid: GridSpec::paper(),
        }
    }

    pub fn validate(&self) -> Result<(), NumericsError> {
        let ok = self.hidden.is_multiple_of(self.heads)
            && self.hidden.is_multiple_of(4)
            && self.patch > 0
            && self.n_max > 0
            && self.n_v_max >= 2
            && self.deform_points > 0;
        if !ok {
            return Err(NumericsError::Shape {
                op: "model_config",
                detail: format!("{self:?}"),
            });
        }
        Ok(())
    }

    /// Keypoints per element under the configured representation.
    pub fn k(&self) -> usize {
        self.repr.point_count()
    }

    /// Feature-grid width in tokens.
    pub fn feat_w(&self) -> usize {
        self.grid.width_cells.div_ceil(self.patch)
    }

    /// Feature-grid height in tokens.
    pub fn feat_h(&self) -> usize {
        self.grid.height_cells.div_ceil(self.patch)
    }

    /// Coordinate-token count (EOS id).
    pub fn coord_vocab(&self) -> usize {
        self.grid.eos_token() as usize
    }

    /// Generator output vocabulary: coordinate bins plus EOS.
    pub fn out_vocab(&self) -> usize {
        self.coord_vocab() + 1
    }

    /// Generator input vocabulary: output vocab plus class tokens.
    pub fn in_vocab(&self) -> usize {
        self.out_vocab() + ElementClass::ALL.len()
    }

    /// Input token id of a class token.
    pub fn class_token(&self, class: ElementClass) -> usize {
        self.out_vocab() + class.index()
    }

    /// Prompt length: class token plus 2k keypoint coordinate tokens.
    pub fn prompt_len(&self) -> usize {
        1 + 2 * self.k()
    }
}

/// Decode-time incidents worth surfacing in evaluation reports.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct PredictDiagnostics {
    /// Sequences that hit the length cap before emitting EOS.
    pub eos_overflows: usize,
    /// Decoded sequences too short to form a polyline.
    pub degenerate_decodes: usize,
}

/// A predicted map with per-element scores and decode diagnostics.
#[derive(Debug, Clone)]
pub struct PredictedMap {
    pub predictions: Vec<(crate::geometry::MapElement, f64)>,
    pub diagnostics: PredictDiagnostics,
}

/// The full network: graph, parameters and submodules.
pub struct Model {
    pub config: ModelConfig,
    pub graph: Graph,
    pub params: ParamRegistry,
    /// Tape watermark right after parameter creation.
    pub mark: usize,
    pub encoder: encoder::Encoder,
    pub detector: detector::Detector,
    pub generator: generator::Generator,
}

impl Model {
    /// Build a model with freshly initialized parameters. The seed
    /// drives both initialization and dropout noise.
    pub fn new(config: ModelConfig, seed: u64) -> Result<Model, NumericsError> {
        config.validate()?;
        let graph = Graph::new(seed ^ 0xd0_d0);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = ParamRegistry::new();
        let encoder = encoder::Encoder::new(&graph, &mut params, &config, &mut rng);
        let detector = detector::Detector::new(&graph, &mut params, &config, &mut rng);
        let generator = generator::Generator::new(&graph, &mut params, &config, &mut rng);
        let mark = graph.mark();
        Ok(Model {
            config,
            graph,
            params,
            mark,
            encoder,
            detector,
            generator,
        })
    }

    pub fn save(&self, path: &Path) -> Result<(), NumericsError> {
        let config = serde_json::to_value(&self.config)
            .map_err(|e| NumericsError::CheckpointCorrupt(e.to_string()))?;
        save_checkpoint(path, &config, &self.params)
    }

    pub fn load(path: &Path, seed: u64) -> Result<Model, NumericsError> {
        let data = load_checkpoint(path)?;
        let config: ModelConfig = serde_json::from_value(data.model_config.clone())
            .map_err(|e| NumericsError::CheckpointCorrupt(e.to_string()))?;
        let model = Model::new(config, seed)?;
        restore_registry(&data, &model.params)?;
        Ok(model)
    }

    /// Encode a raster into BEV feature tokens.
    pub fn bev_encode(&self, raster: &BEVRaster) -> Result<BEVFeatureGrid, NumericsError> {
        self.encoder.encode(&self.graph, &self.config, raster)
    }

    /// Run the detector over encoded features.
    pub fn detect_elements(
        &self,
        features: &BEVFeatureGrid,
    ) -> Result<DetectorOutput, NumericsError> {
        self.detector.forward(&self.graph, &self.config, features)
    }

    /// Full inference: encode, detect, keep scored elements, generate
    /// each polyline greedily and dequantize back to meters.
    pub fn predict_map(
        &self,
        raster: &BEVRaster,
        score_threshold: f64,
    ) -> Result<PredictedMap, NumericsError> {
        let was_eval = self.graph.is_eval();
        self.graph.set_eval(true);
        let result = self.predict_map_inner(raster, score_threshold);
        self.graph.set_eval(was_eval);
        result
    }

    fn predict_map_inner(
        &self,
        raster: &BEVRaster,
        score_threshold: f64,
    ) -> Result<PredictedMap, NumericsError> {
        self.graph.rewind(self.mark);
        let features = self.bev_encode(raster)?;
        let det = self.detect_elements(&features)?;
        let detections: DetectionSet = det.to_detection_set(&self.config);
        let decode_mark = self.graph.mark();

        let mut predictions = Vec::new();
        let mut diagnostics = PredictDiagnostics::default();
        for element in &detections.elements {
            let score = element.score();
            if score < score_threshold {
                continue;
            }
            let class = element.best_class();
            let cond = GeneratorCondition::new(&self.config, class, &element.keypoints);
            let outcome = self.generator.decode(
                &self.graph,
                &self.config,
                &cond,
                &features,
                DecodeMode::Greedy,
                decode_mark,
            )?;
            if outcome.eos_overflow {
                diagnostics.eos_overflows += 1;
            }
            let Ok(seq) = outcome.into_token_seq(&self.config.grid) else {
                diagnostics.degenerate_decodes += 1;
                continue;
            };
            let Ok(poly) = crate::geometry::tokens_to_polyline(&seq, &self.config.grid) else {
                diagnostics.degenerate_decodes += 1;
                continue;
            };
            let poly = if class.is_closed() && !poly.closed() {
                match close_ring(&poly) {
                    Some(p) => p,
                    None => {
                        diagnostics.degenerate_decodes += 1;
                        continue;
                    }
                }
            } else {
                poly
            };
            predictions.push((crate::geometry::MapElement::new(class, poly), score));
        }
        self.graph.rewind(decode_mark);
        Ok(PredictedMap {
            predictions,
            diagnostics,
        })
    }

    /// Predictions of one scene wrapped for the evaluation pipeline.
    pub fn predict_scored(
        &self,
        raster: &BEVRaster,
        score_threshold: f64,
        scene_id: &str,
    ) -> Result<(Vec<ScoredPrediction>, PredictDiagnostics), NumericsError> {
        let out = self.predict_map(raster, score_threshold)?;
        let preds = out
            .predictions
            .into_iter()
            .map(|(element, score)| ScoredPrediction {
                element,
                score,
                scene_id: scene_id.to_string(),
            })
            .collect();
        Ok((preds, out.diagnostics))
    }
}

/// Close an open ring by appending its first vertex.
fn close_ring(poly: &Polyline) -> Option<Polyline> {
    let mut verts = poly.vertices().to_vec();
    if verts.len() < 3 {
        return None;
    }
    verts.push(verts[0]);
    Polyline::new(verts, true).ok()
}
