//! Hungarian assignment and the detector's bipartite set loss.
//!
//! Ground truths are padded with no-object slots up to the query count;
//! the optimal permutation minimizes a cost combining class negative
//! log-likelihood, smooth L1 on keypoint coordinates and a box IoU term
//! with coefficients 2 / 0.1 / 1. No-object slots carry only their
//! classification term, down-weighted to 0.1.
//!
//! Everything here is plain `f64`; the differentiable twin of the loss
//! lives in the model layer and reuses the assignment computed here.

use thiserror::Error;

use crate::geometry::{bbox_iou, ElementClass, KeypointSet, ReprKind};

/// Class-NLL coefficient for real ground-truth slots.
pub const CLASS_COEF: f64 = 2.0;
/// Smooth-L1 coefficient for keypoint regression.
pub const KEYPOINT_COEF: f64 = 0.1;
/// IoU-loss coefficient for keypoint regression.
pub const IOU_COEF: f64 = 1.0;
/// Down-weighted classification coefficient for no-object slots.
pub const NO_OBJECT_COEF: f64 = 0.1;

/// Index of the no-object class in detector logits.
pub const NO_OBJECT_INDEX: usize = 3;
/// Number of detector classes including the no-object slot.
pub const NUM_CLASSES: usize = 4;

#[derive(Debug, Error)]
pub enum MatchingError {
    #[error("cost matrix must be square, got {rows}x{cols}")]
    NonSquare { rows: usize, cols: usize },
    #[error("cost matrix entry ({row},{col}) is not finite")]
    NonFinite { row: usize, col: usize },
    #[error("vector length mismatch: {a} vs {b}")]
    LengthMismatch { a: usize, b: usize },
    #[error("keypoint representation mismatch: predictions use {pred:?}, ground truth {gt:?}")]
    ReprMismatch { pred: ReprKind, gt: ReprKind },
    #[error("ground-truth count {gts} exceeds the query count {queries}")]
    TooManyGroundTruths { gts: usize, queries: usize },
}

/// Square cost matrix over (prediction, padded ground-truth slot) pairs.
#[derive(Debug, Clone)]
pub struct CostMatrix {
    n: usize,
    entries: Vec<f64>,
}

impl CostMatrix {
    pub fn new(n: usize, entries: Vec<f64>) -> Result<Self, MatchingError> {
        if entries.len() != n * n {
            return Err(MatchingError::NonSquare {
                rows: entries.len() / n.max(1),
                cols: n,
            });
        }
        for (i, &v) in entries.iter().enumerate() {
            if !v.is_finite() {
                return Err(MatchingError::NonFinite {
                    row: i / n,
                    col: i % n,
                });
            }
        }
        Ok(CostMatrix { n, entries })
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self, MatchingError> {
        let n = rows.len();
        for r in rows {
            if r.len() != n {
                return Err(MatchingError::NonSquare {
                    rows: n,
                    cols: r.len(),
                });
            }
        }
        CostMatrix::new(n, rows.concat())
    }

    pub fn size(&self) -> usize {
        self.n
    }

    pub fn at(&self, row: usize, col: usize) -> f64 {
        self.entries[row * self.n + col]
    }
}

/// A perfect matching: `pred_for_gt[j]` is the prediction row assigned
/// to ground-truth column `j`, with the summed cost of the selection.
#[derive(Debug, Clone, PartialEq)]
pub struct Assignment {
    pub pred_for_gt: Vec<usize>,
    pub cost: f64,
}

/// Minimum-cost perfect matching on a square cost matrix via the
/// potential-based Hungarian algorithm (O(n^3)).
pub fn hungarian(c: &CostMatrix) -> Assignment {
    let n = c.size();
    // potentials over rows/cols; job[w] = row currently assigned to col w,
    // with a virtual extra column n used as the staging slot
    let mut ys = vec![0.0f64; n];
    let mut yt = vec![0.0f64; n + 1];
    let mut job: Vec<Option<usize>> = vec![None; n + 1];

    for row in 0..n {
        let mut w_cur = n;
        job[w_cur] = Some(row);
        let mut min_to = vec![f64::INFINITY; n + 1];
        let mut prv: Vec<usize> = vec![usize::MAX; n + 1];
        let mut in_z = vec![false; n + 1];

        while let Some(j) = job[w_cur] {
            in_z[w_cur] = true;
            let mut delta = f64::INFINITY;
            let mut w_next = 0;
            for w in 0..n {
                if in_z[w] {
                    continue;
                }
                let reduced = c.at(j, w) - ys[j] - yt[w];
                if reduced < min_to[w] {
                    min_to[w] = reduced;
                    prv[w] = w_cur;
                }
                if min_to[w] < delta {
                    delta = min_to[w];
                    w_next = w;
                }
            }
            for w in 0..=n {
                if in_z[w] {
                    ys[job[w].unwrap()] += delta;
                    yt[w] -= delta;
                } else {
                    min_to[w] -= delta;
                }
            }
            w_cur = w_next;
        }
        // augment along the alternating path back to the staging slot
        while w_cur != n {
            let w_prev = prv[w_cur];
            job[w_cur] = job[w_prev];
            w_cur = w_prev;
        }
    }

    let mut pred_for_gt = vec![0usize; n];
    for (w, slot) in pred_for_gt.iter_mut().enumerate() {
        *slot = job[w].expect("perfect matching");
    }
    let cost = (0..n).map(|w| c.at(pred_for_gt[w], w)).sum();
    Assignment { pred_for_gt, cost }
}

/// Smooth L1: mean over coordinates of the Huber-style penalty.
pub fn smooth_l1(pred: &[f64], target: &[f64], beta: f64) -> Result<f64, MatchingError> {
    if pred.len() != target.len() {
        return Err(MatchingError::LengthMismatch {
            a: pred.len(),
            b: target.len(),
        });
    }
    let total: f64 = pred
        .iter()
        .zip(target)
        .map(|(&p, &t)| {
            let d = (p - t).abs();
            if d < beta {
                0.5 * d * d / beta
            } else {
                d - 0.5 * beta
            }
        })
        .sum();
    Ok(total / pred.len() as f64)
}

/// One detector output slot: keypoints in meters plus class probabilities
/// over the four classes (three semantic plus no-object).
#[derive(Debug, Clone)]
pub struct DetectedElement {
    pub keypoints: KeypointSet,
    pub class_probs: [f64; NUM_CLASSES],
}

impl DetectedElement {
    /// Detection score: best non-no-object probability.
    pub fn score(&self) -> f64 {
        self.class_probs[..NO_OBJECT_INDEX]
            .iter()
            .fold(0.0f64, |a, &b| a.max(b))
    }

    pub fn best_class(&self) -> ElementClass {
        let idx = self.class_probs[..NO_OBJECT_INDEX]
            .iter()
            .enumerate()
            .max_by(|(_, a), (_, b)| a.partial_cmp(b).unwrap())
            .map(|(i, _)| i)
            .unwrap();
        ElementClass::from_index(idx).unwrap()
    }
}

/// Fixed cardinality set of detector outputs.
#[derive(Debug, Clone)]
pub struct DetectionSet {
    pub elements: Vec<DetectedElement>,
}

/// One ground-truth slot for matching: keypoints plus class label.
#[derive(Debug, Clone)]
pub struct GtElement {
    pub keypoints: KeypointSet,
    pub class: ElementClass,
}

const PROB_FLOOR: f64 = 1e-12;

fn nll(prob: f64) -> f64 {
    -(prob.max(PROB_FLOOR)).ln()
}

fn real_slot_cost(pred: &DetectedElement, gt: &GtElement) -> Result<f64, MatchingError> {
    let cls = CLASS_COEF * nll(pred.class_probs[gt.class.index()]);
    let sl1 = smooth_l1(&pred.keypoints.flat(), &gt.keypoints.flat(), 1.0)?;
    let iou = 1.0 - bbox_iou(&pred.keypoints, &gt.keypoints);
    Ok(cls + KEYPOINT_COEF * sl1 + IOU_COEF * iou)
}

fn no_object_cost(pred: &DetectedElement) -> f64 {
    NO_OBJECT_COEF * nll(pred.class_probs[NO_OBJECT_INDEX])
}

/// Pairwise matching cost between every prediction and every padded
/// ground-truth slot. Entry (i, j) for a real ground truth j combines
/// class NLL, smooth L1 and IoU loss; no-object columns carry only the
/// down-weighted classification term.
pub fn pairwise_match_cost(
    preds: &DetectionSet,
    gts: &[GtElement],
) -> Result<CostMatrix, MatchingError> {
    let n = preds.elements.len();
    if gts.len() > n {
        return Err(MatchingError::TooManyGroundTruths {
            gts: gts.len(),
            queries: n,
        });
    }
    for gt in gts {
        for p in &preds.elements {
            if p.keypoints.kind != gt.keypoints.kind {
                return Err(MatchingError::ReprMismatch {
                    pred: p.keypoints.kind,
                    gt: gt.keypoints.kind,
                });
            }
        }
    }
    let mut entries = Vec::with_capacity(n * n);
    for pred in &preds.elements {
        for j in 0..n {
            entries.push(match gts.get(j) {
                Some(gt) => real_slot_cost(pred, gt)?,
                None => no_object_cost(pred),
            });
        }
    }
    CostMatrix::new(n, entries)
}

/// Bipartite set loss of the detector: Hungarian matching on the pairwise
/// cost, then the same cost combination summed over the matched pairs.
/// Returns the assignment for downstream fine-tuning use.
pub fn detector_set_loss(
    preds: &DetectionSet,
    gts: &[GtElement],
) -> Result<(f64, Assignment), MatchingError> {
    let costs = pairwise_match_cost(preds, gts)?;
    let assignment = hungarian(&costs);
    let mut loss = 0.0;
    for (j, &i) in assignment.pred_for_gt.iter().enumerate() {
        let pred = &preds.elements[i];
        loss += match gts.get(j) {
            Some(gt) => real_slot_cost(pred, gt)?,
            None => no_object_cost(pred),
        };
    }
    Ok((loss, assignment))
}
