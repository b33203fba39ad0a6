use serde::{Deserialize, Serialize};

use super::GeometryError;

/// 2D point in meters.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(from = "[f64; 2]", into = "[f64; 2]")]
pub struct Point {
    pub x: f64,
    pub y: f64,
}

impl From<[f64; 2]> for Point {
    fn from(v: [f64; 2]) -> Self {
        Point { x: v[0], y: v[1] }
    }
}

impl From<Point> for [f64; 2] {
    fn from(p: Point) -> Self {
        [p.x, p.y]
    }
}

impl Point {
    pub fn new(x: f64, y: f64) -> Self {
        Point { x, y }
    }

    pub fn dist(&self, other: &Point) -> f64 {
        (self.x - other.x).hypot(self.y - other.y)
    }

    pub fn lerp(&self, other: &Point, t: f64) -> Point {
        Point {
            x: self.x + (other.x - self.x) * t,
            y: self.y + (other.y - self.y) * t,
        }
    }
}

/// Distance from `p` to the segment `a`-`b`.
pub(crate) fn point_segment_dist(p: &Point, a: &Point, b: &Point) -> f64 {
    let (dx, dy) = (b.x - a.x, b.y - a.y);
    let len_sq = dx * dx + dy * dy;
    if len_sq == 0.0 {
        return p.dist(a);
    }
    let t = ((p.x - a.x) * dx + (p.y - a.y) * dy) / len_sq;
    let t = t.clamp(0.0, 1.0);
    p.dist(&Point::new(a.x + t * dx, a.y + t * dy))
}

/// Ordered 2D vertex sequence in meters; the universal map primitive.
///
/// Closed polylines store the first vertex again at the end, so the
/// vertex list always spells out every drawn segment.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Polyline {
    vertices: Vec<Point>,
    closed: bool,
}

impl Polyline {
    /// Build a polyline, validating the structural invariants:
    /// at least two vertices, no identical consecutive vertices, and
    /// first == last exactly when closed.
    pub fn new(vertices: Vec<Point>, closed: bool) -> Result<Self, GeometryError> {
        if vertices.len() < 2 {
            return Err(GeometryError::InvalidPolyline(format!(
                "need at least 2 vertices, got {}",
                vertices.len()
            )));
        }
        for w in vertices.windows(2) {
            if w[0] == w[1] {
                return Err(GeometryError::InvalidPolyline(
                    "consecutive identical vertices".into(),
                ));
            }
        }
        if closed && vertices.first() != vertices.last() {
            return Err(GeometryError::InvalidPolyline(
                "closed polyline must repeat its first vertex at the end".into(),
            ));
        }
        Ok(Polyline { vertices, closed })
    }

    pub fn open(vertices: Vec<Point>) -> Result<Self, GeometryError> {
        Self::new(vertices, false)
    }

    /// Build a closed polygon from a ring (no repeated first vertex) in
    /// canonical form: counter-clockwise orientation, start vertex
    /// lexicographically smallest by (x, y), first vertex repeated at
    /// the end. Canonical form keeps token targets deterministic.
    pub fn closed_from_ring(ring: Vec<Point>) -> Result<Self, GeometryError> {
        if ring.len() < 3 {
            return Err(GeometryError::InvalidPolyline(format!(
                "ring needs at least 3 vertices, got {}",
                ring.len()
            )));
        }
        let mut ring = ring;
        // shoelace sign: positive = counter-clockwise
        let area2: f64 = ring
            .iter()
            .zip(ring.iter().cycle().skip(1))
            .map(|(a, b)| a.x * b.y - b.x * a.y)
            .sum();
        if area2 < 0.0 {
            ring.reverse();
        }
        let start = ring
            .iter()
            .enumerate()
            .min_by(|(_, a), (_, b)| (a.x, a.y).partial_cmp(&(b.x, b.y)).unwrap())
            .map(|(i, _)| i)
            .unwrap();
        ring.rotate_left(start);
        let first = ring[0];
        ring.push(first);
        Self::new(ring, true)
    }

    pub fn vertices(&self) -> &[Point] {
        &self.vertices
    }

    pub fn closed(&self) -> bool {
        self.closed
    }

    pub fn len(&self) -> usize {
        self.vertices.len()
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn arc_length(&self) -> f64 {
        self.vertices.windows(2).map(|w| w[0].dist(&w[1])).sum()
    }

    /// Reverse the vertex order (direction flip). Closedness is kept.
    pub fn reversed(&self) -> Polyline {
        let mut v = self.vertices.clone();
        v.reverse();
        Polyline {
            vertices: v,
            closed: self.closed,
        }
    }

    /// Point at arc-length position `s` from the start, clamped to the ends.
    pub fn point_at_arc(&self, s: f64) -> Point {
        if s <= 0.0 {
            return self.vertices[0];
        }
        let mut acc = 0.0;
        for w in self.vertices.windows(2) {
            let seg = w[0].dist(&w[1]);
            if acc + seg >= s {
                let t = if seg > 0.0 { (s - acc) / seg } else { 0.0 };
                return w[0].lerp(&w[1], t);
            }
            acc += seg;
        }
        *self.vertices.last().unwrap()
    }
}

impl<'de> Deserialize<'de> for Polyline {
    fn deserialize<D>(de: D) -> Result<Self, D::Error>
    where
        D: serde::Deserializer<'de>,
    {
        #[derive(Deserialize)]
        struct Raw {
            vertices: Vec<Point>,
            closed: bool,
        }
        let raw = Raw::deserialize(de)?;
        Polyline::new(raw.vertices, raw.closed).map_err(serde::de::Error::custom)
    }
}

/// How to resample a polyline into a new vertex sequence.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum ResampleStrategy {
    /// Exactly `n` points at equal arc-length spacing, endpoints included.
    Uniform(usize),
    /// A point every `d` meters of arc, plus the final endpoint.
    FixedInterval(f64),
    /// Endpoints plus every vertex whose turn angle exceeds the threshold
    /// (radians).
    Curvature(f64),
}

/// Resample a polyline according to `strategy`.
pub fn resample(poly: &Polyline, strategy: ResampleStrategy) -> Result<Polyline, GeometryError> {
    let total = poly.arc_length();
    if total <= 0.0 {
        return Err(GeometryError::InvalidPolyline(
            "zero-length polyline cannot be resampled".into(),
        ));
    }
    let verts = poly.vertices();
    let points = match strategy {
        ResampleStrategy::Uniform(n) => {
            if n < 2 {
                return Err(GeometryError::InvalidPolyline(format!(
                    "uniform resampling needs n >= 2, got {n}"
                )));
            }
            let mut out = Vec::with_capacity(n);
            out.push(verts[0]);
            for i in 1..n - 1 {
                out.push(poly.point_at_arc(total * i as f64 / (n - 1) as f64));
            }
            out.push(*verts.last().unwrap());
            out
        }
        ResampleStrategy::FixedInterval(d) => {
            if d <= 0.0 {
                return Err(GeometryError::InvalidPolyline(format!(
                    "fixed interval must be positive, got {d}"
                )));
            }
            let mut out = vec![verts[0]];
            let mut s = d;
            while s < total {
                out.push(poly.point_at_arc(s));
                s += d;
            }
            let last = *verts.last().unwrap();
            if out.last() != Some(&last) {
                out.push(last);
            }
            out
        }
        ResampleStrategy::Curvature(theta) => {
            if theta <= 0.0 {
                return Err(GeometryError::InvalidPolyline(format!(
                    "curvature threshold must be positive, got {theta}"
                )));
            }
            let mut out = vec![verts[0]];
            for i in 1..verts.len() - 1 {
                if turn_angle(&verts[i - 1], &verts[i], &verts[i + 1]) > theta {
                    out.push(verts[i]);
                }
            }
            out.push(*verts.last().unwrap());
            out
        }
    };
    // Degenerate strategies can collapse onto duplicate points; rebuild as
    // the raw sequence when valid, else fall back to the deduped one.
    match Polyline::new(points.clone(), poly.closed() && points.first() == points.last()) {
        Ok(p) => Ok(p),
        Err(_) => {
            let mut dedup: Vec<Point> = Vec::with_capacity(points.len());
            for p in points {
                if dedup.last() != Some(&p) {
                    dedup.push(p);
                }
            }
            Polyline::new(dedup.clone(), dedup.first() == dedup.last() && dedup.len() > 2)
        }
    }
}

/// Unsigned turn angle at vertex `b` between segments `a->b` and `b->c`.
fn turn_angle(a: &Point, b: &Point, c: &Point) -> f64 {
    let (ux, uy) = (b.x - a.x, b.y - a.y);
    let (vx, vy) = (c.x - b.x, c.y - b.y);
    let dot = ux * vx + uy * vy;
    let cross = ux * vy - uy * vx;
    cross.atan2(dot).abs()
}

/// Ramer-Douglas-Peucker simplification with tolerance `epsilon_m`.
///
/// The output is a subsequence of the input containing both endpoints;
/// every dropped vertex lies within `epsilon_m` of the simplified chain.
pub fn rdp_simplify(poly: &Polyline, epsilon_m: f64) -> Result<Polyline, GeometryError> {
    if epsilon_m < 0.0 {
        return Err(GeometryError::InvalidPolyline(format!(
            "rdp epsilon must be non-negative, got {epsilon_m}"
        )));
    }
    if epsilon_m == 0.0 {
        // zero tolerance keeps every vertex, including exactly collinear ones
        return Ok(poly.clone());
    }
    let verts = poly.vertices();
    let mut keep = vec![false; verts.len()];
    keep[0] = true;
    keep[verts.len() - 1] = true;
    rdp_mark(verts, 0, verts.len() - 1, epsilon_m, &mut keep);
    let kept: Vec<Point> = verts
        .iter()
        .zip(&keep)
        .filter_map(|(p, &k)| k.then_some(*p))
        .collect();
    Polyline::new(kept, poly.closed())
}

fn rdp_mark(verts: &[Point], lo: usize, hi: usize, eps: f64, keep: &mut [bool]) {
    if hi <= lo + 1 {
        return;
    }
    let (mut best, mut best_d) = (lo, -1.0);
    for i in lo + 1..hi {
        let d = point_segment_dist(&verts[i], &verts[lo], &verts[hi]);
        if d > best_d {
            best = i;
            best_d = d;
        }
    }
    if best_d > eps {
        keep[best] = true;
        rdp_mark(verts, lo, best, eps, keep);
        rdp_mark(verts, best, hi, eps, keep);
    }
}

/// Semantic class of a map element.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ElementClass {
    Crossing,
    Divider,
    Boundary,
}

impl ElementClass {
    pub const ALL: [ElementClass; 3] = [
        ElementClass::Crossing,
        ElementClass::Divider,
        ElementClass::Boundary,
    ];

    /// Class index used by the detector head; the no-object slot is 3.
    pub fn index(self) -> usize {
        match self {
            ElementClass::Crossing => 0,
            ElementClass::Divider => 1,
            ElementClass::Boundary => 2,
        }
    }

    pub fn from_index(i: usize) -> Option<ElementClass> {
        ElementClass::ALL.get(i).copied()
    }

    /// Crossings are polygons and therefore closed curves.
    pub fn is_closed(self) -> bool {
        matches!(self, ElementClass::Crossing)
    }

    /// Short column label used in report tables.
    pub fn short_name(self) -> &'static str {
        match self {
            ElementClass::Crossing => "ped",
            ElementClass::Divider => "divider",
            ElementClass::Boundary => "boundary",
        }
    }
}

/// A class-labeled polyline.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MapElement {
    pub class: ElementClass,
    #[serde(flatten)]
    pub poly: Polyline,
}

impl MapElement {
    pub fn new(class: ElementClass, poly: Polyline) -> Self {
        MapElement { class, poly }
    }
}

/// A scene: an unordered set of map elements.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct VectorMap {
    pub elements: Vec<MapElement>,
}

impl VectorMap {
    pub fn new(elements: Vec<MapElement>) -> Self {
        VectorMap { elements }
    }

    pub fn of_class(&self, class: ElementClass) -> impl Iterator<Item = &MapElement> {
        self.elements.iter().filter(move |e| e.class == class)
    }
}
