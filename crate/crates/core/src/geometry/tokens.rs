use serde::{Deserialize, Serialize};

use super::polyline::{Point, Polyline};
use super::GeometryError;

/// Rectangular quantization grid over the map extent.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GridSpec {
    pub width_cells: usize,
    pub height_cells: usize,
    pub cell_m: f64,
    pub origin: (f64, f64),
}

impl GridSpec {
    pub fn new(
        width_cells: usize,
        height_cells: usize,
        cell_m: f64,
        origin: (f64, f64),
    ) -> Result<Self, GeometryError> {
        if width_cells < 2 || height_cells < 2 {
            return Err(GeometryError::InvalidGrid(format!(
                "grid must be at least 2x2, got {width_cells}x{height_cells}"
            )));
        }
        if cell_m <= 0.0 || cell_m.is_nan() {
            return Err(GeometryError::InvalidGrid(format!(
                "cell size must be positive, got {cell_m}"
            )));
        }
        Ok(GridSpec {
            width_cells,
            height_cells,
            cell_m,
            origin,
        })
    }

    /// 200x100 grid of 0.3 m cells (60 m x 30 m extent).
    pub fn paper() -> Self {
        GridSpec::new(200, 100, 0.3, (0.0, 0.0)).unwrap()
    }

    /// 100x50 grid of 0.3 m cells (30 m x 15 m extent).
    pub fn desk() -> Self {
        GridSpec::new(100, 50, 0.3, (0.0, 0.0)).unwrap()
    }

    /// The end-of-sequence token id; coordinate tokens are below it.
    pub fn eos_token(&self) -> u32 {
        self.width_cells.max(self.height_cells) as u32
    }

    /// Extent in meters: (width, height).
    pub fn extent_m(&self) -> (f64, f64) {
        (
            self.width_cells as f64 * self.cell_m,
            self.height_cells as f64 * self.cell_m,
        )
    }

    pub fn x_max(&self) -> f64 {
        self.origin.0 + self.extent_m().0
    }

    pub fn y_max(&self) -> f64 {
        self.origin.1 + self.extent_m().1
    }
}

/// Quantize a point to integer cell coordinates by floor binning,
/// clamping out-of-range points onto the grid.
pub fn quantize_vertex(p: Point, g: &GridSpec) -> (u32, u32) {
    let tx = ((p.x - g.origin.0) / g.cell_m).floor();
    let ty = ((p.y - g.origin.1) / g.cell_m).floor();
    let tx = (tx.max(0.0) as u32).min(g.width_cells as u32 - 1);
    let ty = (ty.max(0.0) as u32).min(g.height_cells as u32 - 1);
    (tx, ty)
}

/// Map cell coordinates back to the cell-center point in meters.
pub fn dequantize_vertex(tx: u32, ty: u32, g: &GridSpec) -> Point {
    Point::new(
        g.origin.0 + (tx as f64 + 0.5) * g.cell_m,
        g.origin.1 + (ty as f64 + 0.5) * g.cell_m,
    )
}

/// Flattened quantized coordinate tokens of one polyline, EOS-terminated.
///
/// Tokens alternate x, y per vertex; the shared vocabulary has
/// `max(W, H)` coordinate bins and EOS is the id after them.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct VertexTokenSeq {
    tokens: Vec<u32>,
}

impl VertexTokenSeq {
    /// Validate a raw token sequence against the grid's vocabulary:
    /// exactly one EOS in the final position, an even number of
    /// coordinate tokens, x tokens under W and y tokens under H.
    pub fn from_tokens(tokens: Vec<u32>, g: &GridSpec) -> Result<Self, GeometryError> {
        let eos = g.eos_token();
        match tokens.last() {
            Some(&t) if t == eos => {}
            _ => {
                return Err(GeometryError::Decode(
                    "sequence must end with the EOS token".into(),
                ))
            }
        }
        if tokens.iter().filter(|&&t| t == eos).count() != 1 {
            return Err(GeometryError::Decode("EOS must appear exactly once".into()));
        }
        let coords = &tokens[..tokens.len() - 1];
        if !coords.len().is_multiple_of(2) {
            return Err(GeometryError::Decode(format!(
                "odd coordinate count {} before EOS",
                coords.len()
            )));
        }
        for (i, &t) in coords.iter().enumerate() {
            let limit = if i % 2 == 0 {
                g.width_cells
            } else {
                g.height_cells
            } as u32;
            if t >= limit {
                return Err(GeometryError::Decode(format!(
                    "token {t} at position {i} exceeds the {} range {limit}",
                    if i % 2 == 0 { "x" } else { "y" }
                )));
            }
        }
        Ok(VertexTokenSeq { tokens })
    }

    pub fn tokens(&self) -> &[u32] {
        &self.tokens
    }

    /// Number of encoded vertices.
    pub fn vertex_count(&self) -> usize {
        (self.tokens.len() - 1) / 2
    }
}

/// Flatten a polyline into its quantized token sequence.
///
/// Closed polylines keep their repeated final vertex, so the ring shape
/// survives the round trip.
pub fn flatten_to_tokens(
    poly: &Polyline,
    g: &GridSpec,
    n_v_max: usize,
) -> Result<VertexTokenSeq, GeometryError> {
    if poly.len() > n_v_max {
        return Err(GeometryError::InvalidPolyline(format!(
            "polyline has {} vertices, above the configured maximum {n_v_max}",
            poly.len()
        )));
    }
    let mut tokens = Vec::with_capacity(poly.len() * 2 + 1);
    for v in poly.vertices() {
        let (tx, ty) = quantize_vertex(*v, g);
        tokens.push(tx);
        tokens.push(ty);
    }
    tokens.push(g.eos_token());
    VertexTokenSeq::from_tokens(tokens, g)
}

/// Decode a token sequence back into a polyline of cell-center vertices.
///
/// Consecutive vertices that landed in the same cell collapse; a closed
/// polyline is recognized when the decoded ring returns to its start.
pub fn tokens_to_polyline(seq: &VertexTokenSeq, g: &GridSpec) -> Result<Polyline, GeometryError> {
    let coords = &seq.tokens()[..seq.tokens().len() - 1];
    let mut verts: Vec<Point> = Vec::with_capacity(coords.len() / 2);
    for pair in coords.chunks_exact(2) {
        let p = dequantize_vertex(pair[0], pair[1], g);
        if verts.last() != Some(&p) {
            verts.push(p);
        }
    }
    if verts.len() < 2 {
        return Err(GeometryError::Decode(format!(
            "decoded {} distinct vertices, need at least 2",
            verts.len()
        )));
    }
    let closed = verts.len() > 2 && verts.first() == verts.last();
    Polyline::new(verts, closed)
}
