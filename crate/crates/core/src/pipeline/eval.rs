use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::geometry::VectorMap;
use crate::metrics::{
    chamfer_distance, evaluate_map_set, APReport, MetricKind, ScoredPrediction,
    DEFAULT_RESAMPLE_PTS,
};
use crate::model::Model;
use crate::synthdata::{load_manifest, load_split};

use super::PipelineError;

type Result<T> = std::result::Result<T, PipelineError>;

/// Matched-distance histogram bin width (meters) and bin count; the
/// last bin collects everything beyond the range.
pub const HIST_BIN_M: f64 = 0.25;
pub const HIST_BINS: usize = 9;

/// One evaluation request.
#[derive(Debug, Clone)]
pub struct EvalRun {
    pub checkpoint: PathBuf,
    pub data_dir: PathBuf,
    pub split: String,
    pub thresholds: Vec<f64>,
    pub metrics: Vec<MetricKind>,
    pub score_threshold: f64,
}

impl EvalRun {
    pub fn validate(&self) -> Result<()> {
        if self.thresholds.is_empty()
            || self.thresholds[0] <= 0.0
            || self.thresholds.windows(2).any(|w| w[0] >= w[1])
        {
            return Err(PipelineError::Config(format!(
                "thresholds must be positive ascending, got {:?}",
                self.thresholds
            )));
        }
        if self.metrics.is_empty() {
            return Err(PipelineError::Config("no metric kinds selected".into()));
        }
        Ok(())
    }
}

/// Per-scene decode and matching diagnostics.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SceneDiagnostics {
    pub id: String,
    pub predictions: usize,
    pub eos_overflows: usize,
    pub degenerate_decodes: usize,
    /// Chamfer distance of each prediction to its nearest same-class
    /// ground truth, binned at 0.25 m (last bin = overflow).
    pub matched_distance_hist: Vec<usize>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EvalDiagnostics {
    pub scenes: Vec<SceneDiagnostics>,
    pub total_eos_overflows: usize,
    pub total_degenerate_decodes: usize,
}

#[derive(Debug)]
pub struct EvalOutput {
    pub report: APReport,
    pub diagnostics: EvalDiagnostics,
}

fn distance_histogram(preds: &[ScoredPrediction], gt: &VectorMap) -> Vec<usize> {
    let mut hist = vec![0usize; HIST_BINS];
    for p in preds {
        let mut best = f64::INFINITY;
        for g in gt.of_class(p.element.class) {
            if let Ok(d) = chamfer_distance(&p.element.poly, &g.poly, DEFAULT_RESAMPLE_PTS) {
                best = best.min(d);
            }
        }
        if best.is_finite() {
            let bin = ((best / HIST_BIN_M) as usize).min(HIST_BINS - 1);
            hist[bin] += 1;
        } else {
            hist[HIST_BINS - 1] += 1;
        }
    }
    hist
}

/// Full evaluation: inference per scene, AP report, diagnostics.
pub fn evaluate(run: &EvalRun) -> Result<EvalOutput> {
    run.validate()?;
    let manifest = load_manifest(&run.data_dir)?;
    let records = load_split(&run.data_dir, &manifest, &run.split)?;
    let model = Model::load(&run.checkpoint, 0)?;

    let mut gts: BTreeMap<String, VectorMap> = BTreeMap::new();
    let mut preds: Vec<ScoredPrediction> = Vec::new();
    let mut scenes = Vec::with_capacity(records.len());
    let (mut total_eos, mut total_degenerate) = (0, 0);
    for record in &records {
        let (scene_preds, diag) =
            model.predict_scored(&record.raster, run.score_threshold, &record.id)?;
        total_eos += diag.eos_overflows;
        total_degenerate += diag.degenerate_decodes;
        scenes.push(SceneDiagnostics {
            id: record.id.clone(),
            predictions: scene_preds.len(),
            eos_overflows: diag.eos_overflows,
            degenerate_decodes: diag.degenerate_decodes,
            matched_distance_hist: distance_histogram(&scene_preds, &record.map),
        });
        preds.extend(scene_preds);
        gts.insert(record.id.clone(), record.map.clone());
    }

    let report = evaluate_map_set(&preds, &gts, &run.thresholds, &run.metrics)?;
    Ok(EvalOutput {
        report,
        diagnostics: EvalDiagnostics {
            scenes,
            total_eos_overflows: total_eos,
            total_degenerate_decodes: total_degenerate,
        },
    })
}

/// Sanity baseline: ground truth fed back as predictions with score 1.
pub fn oracle_eval(
    data_dir: &Path,
    split: &str,
    thresholds: &[f64],
    metrics: &[MetricKind],
) -> Result<APReport> {
    let manifest = load_manifest(data_dir)?;
    let records = load_split(data_dir, &manifest, split)?;
    let mut gts: BTreeMap<String, VectorMap> = BTreeMap::new();
    let mut preds = Vec::new();
    for record in records {
        for el in &record.map.elements {
            preds.push(ScoredPrediction {
                element: el.clone(),
                score: 1.0,
                scene_id: record.id.clone(),
            });
        }
        gts.insert(record.id, record.map);
    }
    Ok(evaluate_map_set(&preds, &gts, thresholds, metrics)?)
}
