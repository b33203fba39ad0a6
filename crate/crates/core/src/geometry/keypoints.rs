use serde::{Deserialize, Serialize};

use super::polyline::{Point, Polyline};

/// Fixed-size keypoint abstraction of a polyline's location and outline.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ReprKind {
    /// Bottom-left and top-right of the smallest enclosing box (k=2).
    Bbox,
    /// Start, arc-length middle, end (k=3).
    Sme,
    /// Left-most, right-most, top-most, bottom-most vertices (k=4).
    Extreme,
}

impl ReprKind {
    pub const ALL: [ReprKind; 3] = [ReprKind::Bbox, ReprKind::Sme, ReprKind::Extreme];

    pub fn point_count(self) -> usize {
        match self {
            ReprKind::Bbox => 2,
            ReprKind::Sme => 3,
            ReprKind::Extreme => 4,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            ReprKind::Bbox => "bbox",
            ReprKind::Sme => "sme",
            ReprKind::Extreme => "extreme",
        }
    }
}

/// Ordered keypoints of one map element under a given representation.
#[derive(Debug, Clone, PartialEq)]
pub struct KeypointSet {
    pub kind: ReprKind,
    pub points: Vec<Point>,
}

impl KeypointSet {
    pub fn new(kind: ReprKind, points: Vec<Point>) -> Self {
        assert_eq!(
            points.len(),
            kind.point_count(),
            "keypoint count must match representation"
        );
        if kind == ReprKind::Bbox {
            debug_assert!(points[0].x <= points[1].x && points[0].y <= points[1].y);
        }
        KeypointSet { kind, points }
    }

    /// Keypoints as a flat [x0, y0, x1, y1, ...] coordinate vector.
    pub fn flat(&self) -> Vec<f64> {
        self.points.iter().flat_map(|p| [p.x, p.y]).collect()
    }

    /// Axis-aligned box spanned by the keypoints: (bottom-left, top-right).
    pub fn enclosing_box(&self) -> (Point, Point) {
        let min_x = self.points.iter().map(|p| p.x).fold(f64::INFINITY, f64::min);
        let max_x = self.points.iter().map(|p| p.x).fold(f64::NEG_INFINITY, f64::max);
        let min_y = self.points.iter().map(|p| p.y).fold(f64::INFINITY, f64::min);
        let max_y = self.points.iter().map(|p| p.y).fold(f64::NEG_INFINITY, f64::max);
        (Point::new(min_x, min_y), Point::new(max_x, max_y))
    }
}

/// Extract the keypoint representation of a polyline.
///
/// Extreme-point ties resolve to the earliest vertex in polyline order.
pub fn extract_keypoints(poly: &Polyline, kind: ReprKind) -> KeypointSet {
    let verts = poly.vertices();
    let points = match kind {
        ReprKind::Bbox => {
            let min_x = verts.iter().map(|p| p.x).fold(f64::INFINITY, f64::min);
            let max_x = verts.iter().map(|p| p.x).fold(f64::NEG_INFINITY, f64::max);
            let min_y = verts.iter().map(|p| p.y).fold(f64::INFINITY, f64::min);
            let max_y = verts.iter().map(|p| p.y).fold(f64::NEG_INFINITY, f64::max);
            vec![Point::new(min_x, min_y), Point::new(max_x, max_y)]
        }
        ReprKind::Sme => {
            let mid = poly.point_at_arc(poly.arc_length() / 2.0);
            vec![verts[0], mid, *verts.last().unwrap()]
        }
        ReprKind::Extreme => {
            let pick = |better: &dyn Fn(&Point, &Point) -> bool| {
                verts
                    .iter()
                    .fold(&verts[0], |best, p| if better(p, best) { p } else { best })
            };
            let left = pick(&|p, b| p.x < b.x);
            let right = pick(&|p, b| p.x > b.x);
            let top = pick(&|p, b| p.y > b.y);
            let bottom = pick(&|p, b| p.y < b.y);
            vec![*left, *right, *top, *bottom]
        }
    };
    KeypointSet { kind, points }
}

/// Width of the degenerate-axis inflation used to keep IoU defined for
/// zero-area boxes (straight lines, single points).
pub const IOU_FLOOR_EXTENT: f64 = 0.01;

/// Inflate any box axis thinner than the floor extent, centered.
fn inflate(bl: Point, tr: Point) -> (Point, Point) {
    let (mut bl, mut tr) = (bl, tr);
    if tr.x - bl.x < IOU_FLOOR_EXTENT {
        let c = 0.5 * (bl.x + tr.x);
        bl.x = c - 0.5 * IOU_FLOOR_EXTENT;
        tr.x = c + 0.5 * IOU_FLOOR_EXTENT;
    }
    if tr.y - bl.y < IOU_FLOOR_EXTENT {
        let c = 0.5 * (bl.y + tr.y);
        bl.y = c - 0.5 * IOU_FLOOR_EXTENT;
        tr.y = c + 0.5 * IOU_FLOOR_EXTENT;
    }
    (bl, tr)
}

/// Intersection-over-union of the axis-aligned boxes spanned by two
/// keypoint sets. Degenerate axes are inflated to a (0.01 m)^2 floor so
/// identical thin boxes score 1 and disjoint ones score 0.
pub fn bbox_iou(a: &KeypointSet, b: &KeypointSet) -> f64 {
    let (abl, atr) = a.enclosing_box();
    let (bbl, btr) = b.enclosing_box();
    let (abl, atr) = inflate(abl, atr);
    let (bbl, btr) = inflate(bbl, btr);
    let iw = (atr.x.min(btr.x) - abl.x.max(bbl.x)).max(0.0);
    let ih = (atr.y.min(btr.y) - abl.y.max(bbl.y)).max(0.0);
    let inter = iw * ih;
    let area_a = (atr.x - abl.x) * (atr.y - abl.y);
    let area_b = (btr.x - bbl.x) * (btr.y - bbl.y);
    let union = area_a + area_b - inter;
    if union <= 0.0 {
        0.0
    } else {
        inter / union
    }
}
