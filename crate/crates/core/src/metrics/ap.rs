use std::collections::BTreeMap;
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::geometry::{resample, ElementClass, MapElement, Point, ResampleStrategy, VectorMap};

use super::distance::{chamfer_points, frechet_points};
use super::{EvalError, MetricKind, DEFAULT_RESAMPLE_PTS};

/// One scored prediction emitted by the model for a scene.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ScoredPrediction {
    pub element: MapElement,
    pub score: f64,
    pub scene_id: String,
}

/// Average precision of one (class, threshold, metric) slice.
///
/// Predictions are ranked by score globally. Each prediction greedily
/// matches the nearest unmatched ground truth of the same class in its
/// scene; it is a true positive when that distance is within the
/// threshold. AP integrates the precision envelope over recall.
///
/// Conventions: no ground truth and no predictions scores 1.0 (vacuously
/// perfect); ground truth with no predictions scores 0.0, as does the
/// reverse.
pub fn instance_ap(
    preds: &[ScoredPrediction],
    gts: &BTreeMap<String, VectorMap>,
    class: ElementClass,
    threshold_m: f64,
    metric: MetricKind,
) -> Result<f64, EvalError> {
    for p in preds {
        if !gts.contains_key(&p.scene_id) {
            return Err(EvalError::SceneMismatch(p.scene_id.clone()));
        }
    }

    // resample once per element; distances reuse the cached vertices
    let resampled = |e: &MapElement| -> Result<Vec<Point>, EvalError> {
        Ok(resample(&e.poly, ResampleStrategy::Uniform(DEFAULT_RESAMPLE_PTS))?
            .vertices()
            .to_vec())
    };

    let mut gt_pool: BTreeMap<&str, Vec<(Vec<Point>, bool)>> = BTreeMap::new();
    let mut n_gt = 0usize;
    for (scene, map) in gts {
        let mut entries = Vec::new();
        for e in map.of_class(class) {
            entries.push((resampled(e)?, false));
            n_gt += 1;
        }
        gt_pool.insert(scene, entries);
    }

    let mut ranked: Vec<&ScoredPrediction> =
        preds.iter().filter(|p| p.element.class == class).collect();
    ranked.sort_by(|a, b| b.score.partial_cmp(&a.score).unwrap());

    if n_gt == 0 {
        return Ok(if ranked.is_empty() { 1.0 } else { 0.0 });
    }
    if ranked.is_empty() {
        return Ok(0.0);
    }

    let mut tp = 0usize;
    let mut fp = 0usize;
    let mut curve: Vec<(usize, f64)> = Vec::with_capacity(ranked.len()); // (tp count, precision)
    for pred in ranked {
        let pv = resampled(&pred.element)?;
        let pool = gt_pool.get_mut(pred.scene_id.as_str()).unwrap();
        let mut best: Option<(usize, f64)> = None;
        for (idx, (gv, used)) in pool.iter().enumerate() {
            if *used {
                continue;
            }
            let d = match metric {
                MetricKind::Chamfer => chamfer_points(&pv, gv),
                MetricKind::Frechet => frechet_points(&pv, gv),
            };
            if best.is_none_or(|(_, bd)| d < bd) {
                best = Some((idx, d));
            }
        }
        match best {
            Some((idx, d)) if d <= threshold_m => {
                pool[idx].1 = true;
                tp += 1;
            }
            _ => fp += 1,
        }
        curve.push((tp, tp as f64 / (tp + fp) as f64));
    }

    // all-point interpolation: precision envelope from the right,
    // accumulated over integer true-positive increments so a perfect
    // prediction set integrates to exactly 1
    let mut numerator = 0.0f64;
    let mut envelope = 0.0f64;
    let mut next_tp = curve.last().map(|(t, _)| *t).unwrap();
    for &(tp_here, precision) in curve.iter().rev() {
        envelope = envelope.max(precision);
        if tp_here < next_tp {
            numerator += (next_tp - tp_here) as f64 * envelope;
            next_tp = tp_here;
        }
    }
    numerator += next_tp as f64 * envelope;
    Ok(numerator / n_gt as f64)
}

/// One AP value in a report.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ApCell {
    pub metric: MetricKind,
    pub class: ElementClass,
    pub threshold_m: f64,
    pub ap: f64,
}

/// Full AP report over classes, thresholds and metric kinds.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct APReport {
    pub cells: Vec<ApCell>,
    /// mAP per metric kind: mean over classes of mean over thresholds.
    pub maps: BTreeMap<MetricKind, f64>,
}

impl APReport {
    pub fn ap(&self, metric: MetricKind, class: ElementClass, threshold_m: f64) -> Option<f64> {
        self.cells
            .iter()
            .find(|c| c.metric == metric && c.class == class && c.threshold_m == threshold_m)
            .map(|c| c.ap)
    }

    /// Mean AP over classes at one threshold.
    pub fn map_at(&self, metric: MetricKind, threshold_m: f64) -> Option<f64> {
        let vals: Vec<f64> = self
            .cells
            .iter()
            .filter(|c| c.metric == metric && c.threshold_m == threshold_m)
            .map(|c| c.ap)
            .collect();
        (!vals.is_empty()).then(|| vals.iter().sum::<f64>() / vals.len() as f64)
    }

    /// Mean AP over thresholds for one class.
    pub fn class_ap(&self, metric: MetricKind, class: ElementClass) -> Option<f64> {
        let vals: Vec<f64> = self
            .cells
            .iter()
            .filter(|c| c.metric == metric && c.class == class)
            .map(|c| c.ap)
            .collect();
        (!vals.is_empty()).then(|| vals.iter().sum::<f64>() / vals.len() as f64)
    }

    pub fn map(&self, metric: MetricKind) -> Option<f64> {
        self.maps.get(&metric).copied()
    }

    /// Aligned plain-text table, one block per metric kind, columns
    /// AP_ped / AP_divider / AP_boundary / mAP.
    pub fn to_table(&self) -> String {
        let mut out = String::new();
        let thresholds: Vec<f64> = {
            let mut t: Vec<f64> = self.cells.iter().map(|c| c.threshold_m).collect();
            t.sort_by(|a, b| a.partial_cmp(b).unwrap());
            t.dedup();
            t
        };
        for metric in MetricKind::ALL {
            if !self.cells.iter().any(|c| c.metric == metric) {
                continue;
            }
            let _ = writeln!(out, "== {} AP ==", metric.name());
            let _ = writeln!(
                out,
                "{:>10} {:>10} {:>12} {:>12} {:>8}",
                "threshold", "AP_ped", "AP_divider", "AP_boundary", "mAP"
            );
            for &t in &thresholds {
                let row: Vec<f64> = ElementClass::ALL
                    .iter()
                    .map(|&c| self.ap(metric, c, t).unwrap_or(f64::NAN))
                    .collect();
                let _ = writeln!(
                    out,
                    "{:>10.2} {:>10.3} {:>12.3} {:>12.3} {:>8.3}",
                    t,
                    row[0],
                    row[1],
                    row[2],
                    self.map_at(metric, t).unwrap_or(f64::NAN)
                );
            }
            let per_class: Vec<f64> = ElementClass::ALL
                .iter()
                .map(|&c| self.class_ap(metric, c).unwrap_or(f64::NAN))
                .collect();
            let _ = writeln!(
                out,
                "{:>10} {:>10.3} {:>12.3} {:>12.3} {:>8.3}",
                "mean",
                per_class[0],
                per_class[1],
                per_class[2],
                self.map(metric).unwrap_or(f64::NAN)
            );
        }
        out
    }
}

/// Evaluate a prediction set against ground-truth maps for every
/// (class, threshold, metric) combination.
pub fn evaluate_map_set(
    preds: &[ScoredPrediction],
    gts: &BTreeMap<String, VectorMap>,
    thresholds: &[f64],
    metric_kinds: &[MetricKind],
) -> Result<APReport, EvalError> {
    let mut cells = Vec::new();
    let mut maps = BTreeMap::new();
    for &metric in metric_kinds {
        let mut acc = 0.0;
        let mut count = 0usize;
        for class in ElementClass::ALL {
            for &t in thresholds {
                let ap = instance_ap(preds, gts, class, t, metric)?;
                cells.push(ApCell {
                    metric,
                    class,
                    threshold_m: t,
                    ap,
                });
                acc += ap;
                count += 1;
            }
        }
        maps.insert(metric, if count > 0 { acc / count as f64 } else { 0.0 });
    }
    Ok(APReport { cells, maps })
}
