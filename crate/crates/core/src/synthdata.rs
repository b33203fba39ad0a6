//! Procedural ground-truth maps and BEV rasterization.
//!
//! Stands in for real sensor data: scenes are generated from a seed
//! (boundaries are smoothed random walks crossing the extent, dividers
//! run parallel-ish to a boundary, crossings are convex quadrilaterals
//! straddling a divider), then drawn into a per-class occupancy raster
//! with optional pixel noise and occlusion rectangles.
//!
//! Every byte of a dataset is a deterministic function of (seed, config).

use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::geometry::{
    rdp_simplify, ElementClass, GridSpec, MapElement, Point, Polyline, VectorMap,
};

#[derive(Debug, Error)]
pub enum DataError {
    #[error("invalid scene config: {0}")]
    Config(String),
    #[error("I/O error at {path}: {source}")]
    Io {
        path: PathBuf,
        source: std::io::Error,
    },
    #[error("corrupt dataset: {0}")]
    Corrupt(String),
    #[error(transparent)]
    Geometry(#[from] crate::geometry::GeometryError),
}

fn io_err(path: &Path, source: std::io::Error) -> DataError {
    DataError::Io {
        path: path.to_path_buf(),
        source,
    }
}

/// Inclusive element-count range.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct CountRange {
    pub min: usize,
    pub max: usize,
}

impl CountRange {
    pub fn new(min: usize, max: usize) -> Self {
        CountRange { min, max }
    }

    fn sample(&self, rng: &mut ChaCha8Rng) -> usize {
        rng.gen_range(self.min..=self.max)
    }
}

/// Procedural scene parameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SceneConfig {
    /// Map extent in meters: (width, height).
    pub extent_m: (f64, f64),
    pub boundaries: CountRange,
    pub dividers: CountRange,
    pub crossings: CountRange,
    /// Random-walk step scale range for boundary curvature, in meters.
    pub curvature_m: (f64, f64),
    /// Simplification tolerance applied to generated polylines.
    pub rdp_epsilon_m: f64,
    /// Vertex cap per polyline; simplification tightens until it holds.
    pub n_v_max: usize,
}

impl Default for SceneConfig {
    fn default() -> Self {
        SceneConfig {
            extent_m: (30.0, 15.0),
            boundaries: CountRange::new(1, 2),
            dividers: CountRange::new(1, 2),
            crossings: CountRange::new(1, 2),
            curvature_m: (0.2, 0.7),
            rdp_epsilon_m: 0.05,
            n_v_max: 12,
        }
    }
}

impl SceneConfig {
    pub fn validate(&self) -> Result<(), DataError> {
        if !(self.extent_m.0 > 0.0 && self.extent_m.1 > 0.0) {
            return Err(DataError::Config(format!(
                "extent must be positive, got {:?}",
                self.extent_m
            )));
        }
        for (name, r) in [
            ("boundaries", self.boundaries),
            ("dividers", self.dividers),
            ("crossings", self.crossings),
        ] {
            if r.min > r.max {
                return Err(DataError::Config(format!(
                    "{name} count range {}..{} is inverted",
                    r.min, r.max
                )));
            }
        }
        if self.n_v_max < 5 {
            return Err(DataError::Config(format!(
                "n_v_max {} cannot hold a closed quadrilateral",
                self.n_v_max
            )));
        }
        Ok(())
    }
}

/// Simplify and enforce the vertex cap by widening the tolerance.
fn simplify_capped(poly: &Polyline, eps: f64, n_v_max: usize) -> Polyline {
    let mut eps = eps;
    let mut out = rdp_simplify(poly, eps).expect("valid polyline");
    while out.len() > n_v_max {
        eps = if eps > 0.0 { eps * 2.0 } else { 0.01 };
        out = rdp_simplify(poly, eps).expect("valid polyline");
    }
    out
}

fn smooth(values: &mut [f64], passes: usize) {
    for _ in 0..passes {
        let snapshot = values.to_vec();
        for i in 1..snapshot.len() - 1 {
            values[i] = (snapshot[i - 1] + snapshot[i] + snapshot[i + 1]) / 3.0;
        }
    }
}

const MARGIN_M: f64 = 0.8;

/// Smoothed random-walk open polyline spanning the extent left to right.
fn gen_boundary(rng: &mut ChaCha8Rng, cfg: &SceneConfig) -> Polyline {
    let (w, h) = cfg.extent_m;
    let step_sigma = rng.gen_range(cfg.curvature_m.0..=cfg.curvature_m.1);
    let stations = 16.max((w / 2.0) as usize);
    let dx = (w - 2.0 * MARGIN_M) / (stations - 1) as f64;
    let mut y = rng.gen_range(h * 0.2..h * 0.8);
    let mut ys = Vec::with_capacity(stations);
    for _ in 0..stations {
        ys.push(y);
        y += rng.gen_range(-step_sigma..=step_sigma) * 2.0;
        y = y.clamp(MARGIN_M, h - MARGIN_M);
    }
    smooth(&mut ys, 2);
    let verts: Vec<Point> = ys
        .iter()
        .enumerate()
        .map(|(i, &yv)| Point::new(MARGIN_M + i as f64 * dx, yv.clamp(MARGIN_M, h - MARGIN_M)))
        .collect();
    let poly = Polyline::open(verts).expect("boundary construction");
    simplify_capped(&poly, cfg.rdp_epsilon_m, cfg.n_v_max)
}

/// Near-straight open polyline offset from a reference boundary.
fn gen_divider(rng: &mut ChaCha8Rng, cfg: &SceneConfig, reference: &Polyline) -> Polyline {
    let (_, h) = cfg.extent_m;
    let offset = rng.gen_range(2.0..5.0) * if rng.gen_bool(0.5) { 1.0 } else { -1.0 };
    let mut ys: Vec<f64> = reference
        .vertices()
        .iter()
        .map(|p| (p.y + offset).clamp(MARGIN_M, h - MARGIN_M))
        .collect();
    // heavy smoothing straightens the copy
    smooth(&mut ys, 6);
    let verts: Vec<Point> = reference
        .vertices()
        .iter()
        .zip(&ys)
        .map(|(p, &yv)| Point::new(p.x, yv))
        .collect();
    let poly = Polyline::open(verts).expect("divider construction");
    simplify_capped(&poly, cfg.rdp_epsilon_m, cfg.n_v_max)
}

/// Convex quadrilateral closed polyline straddling a divider.
fn gen_crossing(rng: &mut ChaCha8Rng, cfg: &SceneConfig, divider: &Polyline) -> Polyline {
    let (w, h) = cfg.extent_m;
    let arc = divider.arc_length();
    let t = rng.gen_range(0.2..0.8) * arc;
    let center = divider.point_at_arc(t);
    let ahead = divider.point_at_arc((t + 0.5).min(arc));
    let behind = divider.point_at_arc((t - 0.5).max(0.0));
    let (mut ux, mut uy) = (ahead.x - behind.x, ahead.y - behind.y);
    let norm = (ux * ux + uy * uy).sqrt().max(1e-9);
    ux /= norm;
    uy /= norm;
    let (nx, ny) = (-uy, ux);

    let along = rng.gen_range(0.8..1.6); // half-width along the divider
    let across = rng.gen_range(1.5..3.0); // half-length across it
    let clamp_pt = |x: f64, y: f64| {
        Point::new(
            x.clamp(MARGIN_M, w - MARGIN_M),
            y.clamp(MARGIN_M, h - MARGIN_M),
        )
    };
    let ring = vec![
        clamp_pt(
            center.x - ux * along - nx * across,
            center.y - uy * along - ny * across,
        ),
        clamp_pt(
            center.x + ux * along - nx * across,
            center.y + uy * along - ny * across,
        ),
        clamp_pt(
            center.x + ux * along + nx * across,
            center.y + uy * along + ny * across,
        ),
        clamp_pt(
            center.x - ux * along + nx * across,
            center.y - uy * along + ny * across,
        ),
    ];
    Polyline::closed_from_ring(ring).expect("crossing construction")
}

/// Deterministic procedural scene.
pub fn gen_scene(seed: u64, cfg: &SceneConfig) -> Result<VectorMap, DataError> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut elements = Vec::new();

    let n_bound = cfg.boundaries.sample(&mut rng).max(1);
    let mut boundaries = Vec::new();
    for _ in 0..n_bound {
        let poly = gen_boundary(&mut rng, cfg);
        boundaries.push(poly.clone());
        elements.push(MapElement::new(ElementClass::Boundary, poly));
    }

    let n_div = cfg.dividers.sample(&mut rng);
    let mut dividers = Vec::new();
    for _ in 0..n_div {
        let reference = &boundaries[rng.gen_range(0..boundaries.len())];
        let poly = gen_divider(&mut rng, cfg, reference);
        dividers.push(poly.clone());
        elements.push(MapElement::new(ElementClass::Divider, poly));
    }

    if !dividers.is_empty() {
        let n_cross = cfg.crossings.sample(&mut rng);
        for _ in 0..n_cross {
            let divider = &dividers[rng.gen_range(0..dividers.len())];
            let poly = gen_crossing(&mut rng, cfg, divider);
            elements.push(MapElement::new(ElementClass::Crossing, poly));
        }
    }

    Ok(VectorMap::new(elements))
}

/// Multi-channel occupancy grid in [0,1]; one channel per element class.
#[derive(Debug, Clone, PartialEq)]
pub struct BEVRaster {
    pub channels: usize,
    pub grid: GridSpec,
    /// Row-major per channel: data[c][row * W + col], row 0 at y_min.
    pub data: Vec<Vec<f32>>,
}

impl BEVRaster {
    pub fn zeros(grid: GridSpec, channels: usize) -> Self {
        let cells = grid.width_cells * grid.height_cells;
        BEVRaster {
            channels,
            grid,
            data: vec![vec![0.0; cells]; channels],
        }
    }

    pub fn at(&self, channel: usize, row: usize, col: usize) -> f32 {
        self.data[channel][row * self.grid.width_cells + col]
    }
}

/// Rasterization noise parameters.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct NoiseConfig {
    pub sigma: f64,
    pub occlusions: usize,
    /// Maximum occlusion rectangle area as a fraction of the extent.
    pub max_occlusion_frac: f64,
}

impl Default for NoiseConfig {
    fn default() -> Self {
        NoiseConfig {
            sigma: 0.05,
            occlusions: 2,
            max_occlusion_frac: 0.15,
        }
    }
}

impl NoiseConfig {
    pub fn clean() -> Self {
        NoiseConfig {
            sigma: 0.0,
            occlusions: 0,
            max_occlusion_frac: 0.0,
        }
    }
}

/// Stroke width of rasterized polylines, in cells.
pub const STROKE_WIDTH_CELLS: f64 = 2.0;

fn draw_segment(channel: &mut [f32], g: &GridSpec, a: Point, b: Point) {
    let half = STROKE_WIDTH_CELLS / 2.0;
    // cell coordinates of the segment, padded by the stroke radius
    let to_cell = |p: Point| ((p.x - g.origin.0) / g.cell_m, (p.y - g.origin.1) / g.cell_m);
    let (ax, ay) = to_cell(a);
    let (bx, by) = to_cell(b);
    let min_cx = (ax.min(bx) - half - 1.0).floor().max(0.0) as usize;
    let max_cx = ((ax.max(bx) + half + 1.0).ceil()).min(g.width_cells as f64 - 1.0) as usize;
    let min_cy = (ay.min(by) - half - 1.0).floor().max(0.0) as usize;
    let max_cy = ((ay.max(by) + half + 1.0).ceil()).min(g.height_cells as f64 - 1.0) as usize;

    let (dx, dy) = (bx - ax, by - ay);
    let len_sq = dx * dx + dy * dy;
    for cy in min_cy..=max_cy {
        for cx in min_cx..=max_cx {
            let (px, py) = (cx as f64 + 0.5, cy as f64 + 0.5);
            let t = if len_sq > 0.0 {
                (((px - ax) * dx + (py - ay) * dy) / len_sq).clamp(0.0, 1.0)
            } else {
                0.0
            };
            let (qx, qy) = (ax + t * dx, ay + t * dy);
            let dist = ((px - qx) * (px - qx) + (py - qy) * (py - qy)).sqrt();
            // anti-aliased coverage: full inside the stroke, linear falloff
            let cover = (half + 0.5 - dist).clamp(0.0, 1.0) as f32;
            let cell = &mut channel[cy * g.width_cells + cx];
            *cell = cell.max(cover);
        }
    }
}

/// Draw a map into per-class channels with optional noise/occlusions.
///
/// Noise draws are keyed by `noise_seed`, so a raster is deterministic
/// for fixed (map, grid, noise config, seed).
pub fn rasterize_scene(
    map: &VectorMap,
    g: &GridSpec,
    noise: &NoiseConfig,
    noise_seed: u64,
) -> BEVRaster {
    let mut raster = BEVRaster::zeros(*g, ElementClass::ALL.len());
    for element in &map.elements {
        let channel = &mut raster.data[element.class.index()];
        for seg in element.poly.vertices().windows(2) {
            draw_segment(channel, g, seg[0], seg[1]);
        }
    }

    if noise.sigma > 0.0 || noise.occlusions > 0 {
        let mut rng = ChaCha8Rng::seed_from_u64(noise_seed);
        if noise.sigma > 0.0 {
            for channel in raster.data.iter_mut() {
                for v in channel.iter_mut() {
                    // Box-Muller keeps the dependency surface small
                    let u1: f64 = rng.gen_range(1e-12..1.0);
                    let u2: f64 = rng.gen_range(0.0..1.0);
                    let n = (-2.0 * u1.ln()).sqrt() * (std::f64::consts::TAU * u2).cos();
                    *v = (*v + (noise.sigma * n) as f32).clamp(0.0, 1.0);
                }
            }
        }
        for _ in 0..noise.occlusions {
            let (w, h) = (g.width_cells, g.height_cells);
            let max_area = (w * h) as f64 * noise.max_occlusion_frac;
            let rw = rng.gen_range(2..=(max_area.sqrt() as usize).max(3));
            let rh = ((max_area / rw as f64) as usize).clamp(2, h);
            let x0 = rng.gen_range(0..w.saturating_sub(rw).max(1));
            let y0 = rng.gen_range(0..h.saturating_sub(rh).max(1));
            for cy in y0..(y0 + rh).min(h) {
                for cx in x0..(x0 + rw).min(w) {
                    for channel in raster.data.iter_mut() {
                        channel[cy * w + cx] = 0.0;
                    }
                }
            }
        }
    }
    raster
}

// ---- dataset on disk ----

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub version: u32,
    pub seed: u64,
    pub scene_cfg: SceneConfig,
    pub grid: GridSpec,
    pub noise: NoiseConfig,
    pub splits: Vec<(String, Vec<String>)>,
}

impl DatasetManifest {
    pub fn split(&self, name: &str) -> Option<&[String]> {
        self.splits
            .iter()
            .find(|(n, _)| n == name)
            .map(|(_, ids)| ids.as_slice())
    }
}

#[derive(Debug, Serialize, Deserialize)]
struct SceneFile {
    scene_id: String,
    elements: Vec<MapElement>,
}

#[derive(Debug, Serialize, Deserialize)]
struct RasterHeader {
    channels: usize,
    height: usize,
    width: usize,
    dtype: String,
    grid: GridSpec,
}

/// One loaded scene: ground truth plus its raster.
#[derive(Debug, Clone)]
pub struct SceneRecord {
    pub id: String,
    pub map: VectorMap,
    pub raster: BEVRaster,
}

fn scene_seed_for(seed: u64, index: usize) -> u64 {
    seed.wrapping_mul(0x9e3779b97f4a7c15)
        .wrapping_add(index as u64)
}

/// Write a dataset directory: manifest.json, scenes/<id>.json and
/// rasters/<id>.f32 with JSON headers. Per-scene seeds are disjoint
/// across splits because they derive from the global scene index.
pub fn build_dataset(
    out_dir: &Path,
    n_scenes: usize,
    seed: u64,
    split_ratios: &[(String, f64)],
    scene_cfg: &SceneConfig,
    grid: &GridSpec,
    noise: &NoiseConfig,
) -> Result<DatasetManifest, DataError> {
    scene_cfg.validate()?;
    let ratio_sum: f64 = split_ratios.iter().map(|(_, r)| r).sum();
    if (ratio_sum - 1.0).abs() > 1e-9 {
        return Err(DataError::Config(format!(
            "split ratios must sum to 1, got {ratio_sum}"
        )));
    }
    let expected_w = (scene_cfg.extent_m.0 / grid.cell_m).round() as usize;
    let expected_h = (scene_cfg.extent_m.1 / grid.cell_m).round() as usize;
    if expected_w != grid.width_cells || expected_h != grid.height_cells {
        return Err(DataError::Config(format!(
            "grid {}x{} does not cover the extent {:?} at cell {}",
            grid.width_cells, grid.height_cells, scene_cfg.extent_m, grid.cell_m
        )));
    }

    let scenes_dir = out_dir.join("scenes");
    let rasters_dir = out_dir.join("rasters");
    fs::create_dir_all(&scenes_dir).map_err(|e| io_err(&scenes_dir, e))?;
    fs::create_dir_all(&rasters_dir).map_err(|e| io_err(&rasters_dir, e))?;

    let mut splits: Vec<(String, Vec<String>)> = split_ratios
        .iter()
        .map(|(name, _)| (name.clone(), Vec::new()))
        .collect();
    let mut boundaries = Vec::new();
    let mut acc = 0.0;
    for (_, r) in split_ratios {
        acc += r;
        boundaries.push((acc * n_scenes as f64).round() as usize);
    }

    for index in 0..n_scenes {
        let id = format!("scene_{index:05}");
        let scene_seed = scene_seed_for(seed, index);
        let map = gen_scene(scene_seed, scene_cfg)?;
        let raster = rasterize_scene(&map, grid, noise, scene_seed ^ 0x5bf0_3635);

        let scene_path = scenes_dir.join(format!("{id}.json"));
        let scene_json = serde_json::to_string_pretty(&SceneFile {
            scene_id: id.clone(),
            elements: map.elements,
        })
        .map_err(|e| DataError::Corrupt(e.to_string()))?;
        fs::write(&scene_path, scene_json).map_err(|e| io_err(&scene_path, e))?;

        let header_path = rasters_dir.join(format!("{id}.hdr.json"));
        let header = RasterHeader {
            channels: raster.channels,
            height: grid.height_cells,
            width: grid.width_cells,
            dtype: "f32le".into(),
            grid: *grid,
        };
        fs::write(
            &header_path,
            serde_json::to_string_pretty(&header)
                .map_err(|e| DataError::Corrupt(e.to_string()))?,
        )
        .map_err(|e| io_err(&header_path, e))?;

        let raster_path = rasters_dir.join(format!("{id}.f32"));
        let mut file = fs::File::create(&raster_path).map_err(|e| io_err(&raster_path, e))?;
        for channel in &raster.data {
            let mut bytes = Vec::with_capacity(channel.len() * 4);
            for v in channel {
                bytes.extend_from_slice(&v.to_le_bytes());
            }
            file.write_all(&bytes)
                .map_err(|e| io_err(&raster_path, e))?;
        }

        let split_idx = boundaries.iter().position(|&b| index < b).unwrap_or(0);
        splits[split_idx].1.push(id);
    }

    let manifest = DatasetManifest {
        version: 1,
        seed,
        scene_cfg: scene_cfg.clone(),
        grid: *grid,
        noise: *noise,
        splits,
    };
    let manifest_path = out_dir.join("manifest.json");
    fs::write(
        &manifest_path,
        serde_json::to_string_pretty(&manifest).map_err(|e| DataError::Corrupt(e.to_string()))?,
    )
    .map_err(|e| io_err(&manifest_path, e))?;
    Ok(manifest)
}

pub fn load_manifest(dir: &Path) -> Result<DatasetManifest, DataError> {
    let path = dir.join("manifest.json");
    let text = fs::read_to_string(&path).map_err(|e| io_err(&path, e))?;
    serde_json::from_str(&text).map_err(|e| DataError::Corrupt(e.to_string()))
}

/// Load one scene (ground truth plus raster) from a dataset directory.
pub fn load_scene(dir: &Path, id: &str) -> Result<SceneRecord, DataError> {
    let scene_path = dir.join("scenes").join(format!("{id}.json"));
    let text = fs::read_to_string(&scene_path).map_err(|e| io_err(&scene_path, e))?;
    let scene: SceneFile =
        serde_json::from_str(&text).map_err(|e| DataError::Corrupt(e.to_string()))?;

    let header_path = dir.join("rasters").join(format!("{id}.hdr.json"));
    let htext = fs::read_to_string(&header_path).map_err(|e| io_err(&header_path, e))?;
    let header: RasterHeader =
        serde_json::from_str(&htext).map_err(|e| DataError::Corrupt(e.to_string()))?;

    let raster_path = dir.join("rasters").join(format!("{id}.f32"));
    let bytes = fs::read(&raster_path).map_err(|e| io_err(&raster_path, e))?;
    let cells = header.width * header.height;
    if bytes.len() != header.channels * cells * 4 {
        return Err(DataError::Corrupt(format!(
            "raster {id} has {} bytes, expected {}",
            bytes.len(),
            header.channels * cells * 4
        )));
    }
    let mut data = Vec::with_capacity(header.channels);
    for c in 0..header.channels {
        let start = c * cells * 4;
        data.push(
            bytes[start..start + cells * 4]
                .chunks_exact(4)
                .map(|b| f32::from_le_bytes(b.try_into().unwrap()))
                .collect(),
        );
    }
    Ok(SceneRecord {
        id: scene.scene_id,
        map: VectorMap::new(scene.elements),
        raster: BEVRaster {
            channels: header.channels,
            grid: header.grid,
            data,
        },
    })
}

/// Load every scene of a split.
pub fn load_split(
    dir: &Path,
    manifest: &DatasetManifest,
    split: &str,
) -> Result<Vec<SceneRecord>, DataError> {
    let ids = manifest
        .split(split)
        .ok_or_else(|| DataError::Corrupt(format!("split '{split}' not in manifest")))?;
    ids.iter().map(|id| load_scene(dir, id)).collect()
}
