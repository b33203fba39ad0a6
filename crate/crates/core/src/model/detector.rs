use rand_chacha::ChaCha8Rng;

use crate::geometry::{KeypointSet, Point};
use crate::matching::{
    Assignment, DetectedElement, DetectionSet, GtElement, CLASS_COEF, IOU_COEF, KEYPOINT_COEF,
    NO_OBJECT_COEF, NO_OBJECT_INDEX, NUM_CLASSES,
};
use crate::numerics::{Graph, NumericsError, ParamRegistry, Tensor};

use super::encoder::BEVFeatureGrid;
use super::layers::{Attention, FeedForward, LayerNormParams, Linear, MlpHead};
use super::ModelConfig;

type Result<T> = std::result::Result<T, NumericsError>;

/// Offsets predicted by the deformable attention are scaled down so the
/// initial samples stay near the reference points.
const OFFSET_SCALE: f64 = 0.1;

/// Deformable cross-attention: each query predicts S offset/logit pairs
/// per head, samples the feature grid bilinearly at ref + offset and
/// mixes the samples with softmax weights, averaged over heads.
pub struct DeformAttention {
    offsets: Linear,
    logits: Linear,
    out: Linear,
    heads: usize,
    points: usize,
}

impl DeformAttention {
    pub fn new(
        g: &Graph,
        reg: &mut ParamRegistry,
        name: &str,
        d: usize,
        heads: usize,
        points: usize,
        rng: &mut ChaCha8Rng,
    ) -> Self {
        DeformAttention {
            offsets: Linear::new(g, reg, &format!("{name}.offsets"), d, heads * points * 2, rng),
            logits: Linear::new(g, reg, &format!("{name}.logits"), d, heads * points, rng),
            out: Linear::new(g, reg, &format!("{name}.out"), d, d, rng),
            heads,
            points,
        }
    }

    pub fn forward(
        &self,
        _g: &Graph,
        x: &Tensor,
        ref_points: &Tensor,
        features: &BEVFeatureGrid,
    ) -> Result<Tensor> {
        let q = x.rows();
        let hs = self.heads * self.points;
        let offsets = self
            .offsets
            .forward(x)?
            .scale(OFFSET_SCALE)?
            .reshape(q * hs, 2)?;
        let coords = offsets.add(&ref_points.repeat_rows_each(hs)?)?;
        let sampled = features
            .tokens
            .grid_sample(&coords, features.height, features.width)?;
        let weights = self
            .logits
            .forward(x)?
            .reshape(q * self.heads, self.points)?
            .softmax()?
            .reshape(q * hs, 1)?;
        let mixed = sampled
            .scale_rows(&weights)?
            .sum_group_rows(self.points)?
            .sum_group_rows(self.heads)?
            .scale(1.0 / self.heads as f64)?;
        self.out.forward(&mixed)
    }
}

struct DetectorLayer {
    ln1: LayerNormParams,
    self_attn: Attention,
    ln2: LayerNormParams,
    cross: DeformAttention,
    ln3: LayerNormParams,
    ffn: FeedForward,
}

pub struct Detector {
    element_embed: Tensor,
    keypoint_embed: Tensor,
    ref_head: Linear,
    layers: Vec<DetectorLayer>,
    final_norm: LayerNormParams,
    kp_head: MlpHead,
    cls_head: MlpHead,
}

/// Raw detector outputs still attached to the tape.
pub struct DetectorOutput {
    /// Normalized keypoints in [0,1]^2, (n_max * k) x 2.
    pub kp_norm: Tensor,
    /// Keypoints in meters, (n_max * k) x 2.
    pub kp_m: Tensor,
    /// Class logits, n_max x 4.
    pub logits: Tensor,
}

impl Detector {
    pub fn new(
        g: &Graph,
        reg: &mut ParamRegistry,
        cfg: &ModelConfig,
        rng: &mut ChaCha8Rng,
    ) -> Self {
        let d = cfg.hidden;
        Detector {
            element_embed: reg.register(
                "det.element_embed",
                g.param_embedding(cfg.n_max, d, rng),
            ),
            keypoint_embed: reg.register("det.keypoint_embed", g.param_embedding(cfg.k(), d, rng)),
            ref_head: Linear::new(g, reg, "det.ref_head", d, 2, rng),
            layers: (0..cfg.det_layers)
                .map(|i| {
                    let name = format!("det.layer{i}");
                    DetectorLayer {
                        ln1: LayerNormParams::new(g, reg, &format!("{name}.ln1"), d),
                        self_attn: Attention::new(
                            g,
                            reg,
                            &format!("{name}.self_attn"),
                            d,
                            cfg.heads,
                            cfg.dropout,
                            rng,
                        ),
                        ln2: LayerNormParams::new(g, reg, &format!("{name}.ln2"), d),
                        cross: DeformAttention::new(
                            g,
                            reg,
                            &format!("{name}.cross"),
                            d,
                            cfg.heads,
                            cfg.deform_points,
                            rng,
                        ),
                        ln3: LayerNormParams::new(g, reg, &format!("{name}.ln3"), d),
                        ffn: FeedForward::new(
                            g,
                            reg,
                            &format!("{name}.ffn"),
                            d,
                            cfg.ffn_mult,
                            cfg.dropout,
                            rng,
                        ),
                    }
                })
                .collect(),
            final_norm: LayerNormParams::new(g, reg, "det.final_norm", d),
            kp_head: MlpHead::new(g, reg, "det.kp_head", d, d, 2, rng),
            cls_head: MlpHead::new(g, reg, "det.cls_head", d * cfg.k(), d, NUM_CLASSES, rng),
        }
    }

    pub fn forward(
        &self,
        g: &Graph,
        cfg: &ModelConfig,
        features: &BEVFeatureGrid,
    ) -> Result<DetectorOutput> {
        let k = cfg.k();
        // query (i, j) = element embedding i + keypoint-slot embedding j
        let tile: Vec<usize> = (0..cfg.n_max * k).map(|q| q % k).collect();
        let mut x = self
            .element_embed
            .repeat_rows_each(k)?
            .add(&self.keypoint_embed.embed(&tile)?)?;

        // layer-1 reference points come from the element embedding; the
        // following layers refine around the previous keypoint estimates
        let mut ref_points = self
            .ref_head
            .forward(&self.element_embed)?
            .sigmoid()?
            .repeat_rows_each(k)?;

        for layer in &self.layers {
            let normed = layer.ln1.forward(&x)?;
            x = x.add(&layer.self_attn.forward(g, &normed, &normed, false)?)?;
            let normed = layer.ln2.forward(&x)?;
            x = x.add(&layer.cross.forward(g, &normed, &ref_points, features)?)?;
            x = x.add(&layer.ffn.forward(&layer.ln3.forward(&x)?)?)?;
            ref_points = self.kp_head.forward(&x)?.sigmoid()?;
        }
        let x = self.final_norm.forward(&x)?;
        let kp_norm = self.kp_head.forward(&x)?.sigmoid()?;

        // de-normalize to meters over the configured extent
        let (ext_x, ext_y) = cfg.grid.extent_m();
        let rows = cfg.n_max * k;
        let scale_t = g.constant(rows, 2, [ext_x, ext_y].repeat(rows));
        let origin_t = g.constant(rows, 2, [cfg.grid.origin.0, cfg.grid.origin.1].repeat(rows));
        let kp_m = kp_norm.mul(&scale_t)?.add(&origin_t)?;

        let logits = self.cls_head.forward(&x.reshape(cfg.n_max, k * cfg.hidden)?)?;
        Ok(DetectorOutput {
            kp_norm,
            kp_m,
            logits,
        })
    }
}

impl DetectorOutput {
    /// Extract plain-float detections for matching and evaluation.
    pub fn to_detection_set(&self, cfg: &ModelConfig) -> DetectionSet {
        let k = cfg.k();
        let kp = self.kp_m.value();
        let probs = self.logits.softmax().expect("softmax").value();
        let elements = (0..cfg.n_max)
            .map(|i| {
                let points = (0..k)
                    .map(|j| {
                        let r = (i * k + j) * 2;
                        Point::new(kp[r], kp[r + 1])
                    })
                    .collect();
                let mut class_probs = [0.0f64; NUM_CLASSES];
                class_probs.copy_from_slice(&probs[i * NUM_CLASSES..(i + 1) * NUM_CLASSES]);
                DetectedElement {
                    keypoints: KeypointSet {
                        kind: cfg.repr,
                        points,
                    },
                    class_probs,
                }
            })
            .collect();
        DetectionSet { elements }
    }
}

/// Differentiable IoU loss between the box spanned by a predicted
/// keypoint slice and a ground-truth keypoint set, with the same
/// degenerate-axis inflation as the float-space IoU.
fn iou_loss(g: &Graph, pred_kp: &Tensor, gt: &KeypointSet) -> Result<Tensor> {
    const FLOOR: f64 = crate::geometry::IOU_FLOOR_EXTENT;
    let bl = pred_kp.reduce_min0()?;
    let tr = pred_kp.reduce_max0()?;
    let axis = |idx: usize| -> Result<(Tensor, Tensor, Tensor)> {
        let lo = bl.slice_cols(idx, 1)?;
        let hi = tr.slice_cols(idx, 1)?;
        let extent = hi.sub(&lo)?.max2(&g.scalar(FLOOR))?;
        let center = lo.add(&hi)?.scale(0.5)?;
        let lo2 = center.sub(&extent.scale(0.5)?)?;
        let hi2 = center.add(&extent.scale(0.5)?)?;
        Ok((lo2, hi2, extent))
    };
    let (pblx, ptrx, pw) = axis(0)?;
    let (pbly, ptry, ph) = axis(1)?;

    // ground-truth box inflates in plain floats
    let (gbl, gtr) = gt.enclosing_box();
    let (mut gblx, mut gtrx) = (gbl.x, gtr.x);
    if gtrx - gblx < FLOOR {
        let c = 0.5 * (gblx + gtrx);
        gblx = c - 0.5 * FLOOR;
        gtrx = c + 0.5 * FLOOR;
    }
    let (mut gbly, mut gtry) = (gbl.y, gtr.y);
    if gtry - gbly < FLOOR {
        let c = 0.5 * (gbly + gtry);
        gbly = c - 0.5 * FLOOR;
        gtry = c + 0.5 * FLOOR;
    }
    let g_area = (gtrx - gblx) * (gtry - gbly);

    let iw = ptrx
        .min2(&g.scalar(gtrx))?
        .sub(&pblx.max2(&g.scalar(gblx))?)?
        .relu()?;
    let ih = ptry
        .min2(&g.scalar(gtry))?
        .sub(&pbly.max2(&g.scalar(gbly))?)?
        .relu()?;
    let inter = iw.mul(&ih)?;
    let union = pw.mul(&ph)?.add_scalar(g_area)?.sub(&inter)?;
    let iou = inter.div(&union)?;
    g.scalar(1.0).sub(&iou)
}

/// Differentiable twin of the float-space detector set loss, assembled
/// on the matched pairs of a precomputed assignment.
pub fn detector_loss(
    g: &Graph,
    cfg: &ModelConfig,
    out: &DetectorOutput,
    gts: &[GtElement],
    assignment: &Assignment,
) -> Result<Tensor> {
    let k = cfg.k();
    let mut targets = vec![NO_OBJECT_INDEX; cfg.n_max];
    let mut weights = vec![NO_OBJECT_COEF; cfg.n_max];
    for (j, &qi) in assignment.pred_for_gt.iter().enumerate() {
        if let Some(gt) = gts.get(j) {
            targets[qi] = gt.class.index();
            weights[qi] = CLASS_COEF;
        }
    }
    let mut total = out.logits.cross_entropy(&targets, &weights)?;
    for (j, &qi) in assignment.pred_for_gt.iter().enumerate() {
        let Some(gt) = gts.get(j) else { continue };
        let kp = out.kp_m.slice_rows(qi * k, k)?;
        let gt_t = g.constant(k, 2, gt.keypoints.flat());
        let sl1 = kp.smooth_l1(&gt_t, 1.0)?.scale(KEYPOINT_COEF)?;
        let iou = iou_loss(g, &kp, &gt.keypoints)?.scale(IOU_COEF)?;
        total = total.add(&sl1)?.add(&iou)?;
    }
    Ok(total)
}
