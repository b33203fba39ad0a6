use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::geometry::{GridSpec, ReprKind, ResampleStrategy};
use crate::model::ModelConfig;
use crate::synthdata::{CountRange, NoiseConfig, SceneConfig};

use super::PipelineError;

type Result<T> = std::result::Result<T, PipelineError>;

fn cfg_err(msg: impl Into<String>) -> PipelineError {
    PipelineError::Config(msg.into())
}

/// Training stage selector.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Stage {
    One,
    Two,
    Both,
}

impl std::str::FromStr for Stage {
    type Err = PipelineError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "1" => Ok(Stage::One),
            "2" => Ok(Stage::Two),
            "both" => Ok(Stage::Both),
            other => Err(cfg_err(format!("unknown stage '{other}' (want 1, 2 or both)"))),
        }
    }
}

/// How ground-truth polylines are sampled into generator targets.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub enum SamplingSpec {
    /// Keep vertices whose turn angle exceeds the threshold (degrees).
    Curvature { threshold_deg: f64 },
    /// A vertex every `interval_m` meters of arc.
    FixedInterval { interval_m: f64 },
    /// Exactly `n` vertices at uniform arc spacing.
    Uniform { n: usize },
}

impl SamplingSpec {
    pub fn strategy(&self) -> ResampleStrategy {
        match *self {
            SamplingSpec::Curvature { threshold_deg } => {
                ResampleStrategy::Curvature(threshold_deg.to_radians())
            }
            SamplingSpec::FixedInterval { interval_m } => {
                ResampleStrategy::FixedInterval(interval_m)
            }
            SamplingSpec::Uniform { n } => ResampleStrategy::Uniform(n),
        }
    }
}

/// Every knob of the artifact in one flat structure. Parsed from a
/// `key = value` text file; any key can be overridden on the CLI.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunConfig {
    // model
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

    // map extent and quantization
    pub extent_x_m: f64,
    pub extent_y_m: f64,
    pub cell_m: f64,

    // synthetic scenes
    pub boundary_count: CountRange,
    pub divider_count: CountRange,
    pub crossing_count: CountRange,
    pub curvature_m: (f64, f64),
    pub rdp_epsilon_m: f64,
    pub noise_sigma: f64,
    pub occlusions: usize,
    pub occlusion_frac: f64,

    // training
    pub seed: u64,
    pub batch_size: usize,
    pub steps_stage1: u64,
    pub steps_stage2: u64,
    pub base_lr: f64,
    pub warmup_steps: u64,
    /// Learning-rate decay point as a fraction of a stage's steps.
    pub decay_frac: f64,
    pub weight_decay: f64,
    pub clip_norm: f64,
    pub aug_prob: f64,
    pub aug_sigma_m: f64,
    pub sampling: SamplingSpec,

    // evaluation
    pub score_threshold: f64,
    pub thresholds: Vec<f64>,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
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
            extent_x_m: 30.0,
            extent_y_m: 15.0,
            cell_m: 0.3,
            boundary_count: CountRange::new(1, 2),
            divider_count: CountRange::new(1, 2),
            crossing_count: CountRange::new(1, 2),
            curvature_m: (0.2, 0.7),
            rdp_epsilon_m: 0.05,
            noise_sigma: 0.05,
            occlusions: 2,
            occlusion_frac: 0.15,
            seed: 7,
            batch_size: 8,
            steps_stage1: 900,
            steps_stage2: 300,
            base_lr: 3e-3,
            warmup_steps: 200,
            decay_frac: 0.9,
            weight_decay: 1e-4,
            clip_norm: 5.0,
            aug_prob: 0.3,
            aug_sigma_m: 0.15,
            sampling: SamplingSpec::Curvature { threshold_deg: 5.0 },
            score_threshold: 0.5,
            thresholds: vec![0.5, 1.0, 1.5],
        }
    }
}

impl RunConfig {
    /// Parse a flat `key = value` file; '#' starts a comment.
    pub fn from_text(text: &str) -> Result<RunConfig> {
        let mut cfg = RunConfig::default();
        for (lineno, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line
                .split_once('=')
                .ok_or_else(|| cfg_err(format!("line {}: expected key = value", lineno + 1)))?;
            cfg.set(key.trim(), value.trim())?;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn from_file(path: &Path) -> Result<RunConfig> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| cfg_err(format!("cannot read config {}: {e}", path.display())))?;
        RunConfig::from_text(&text)
    }

    /// Apply one `key=value` override.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        fn parse<T: std::str::FromStr>(key: &str, v: &str) -> Result<T> {
            v.parse()
                .map_err(|_| cfg_err(format!("invalid value '{v}' for key '{key}'")))
        }
        fn parse_range(key: &str, v: &str) -> Result<CountRange> {
            let (lo, hi) = v
                .split_once("..")
                .ok_or_else(|| cfg_err(format!("key '{key}' wants 'min..max', got '{v}'")))?;
            Ok(CountRange::new(parse(key, lo.trim())?, parse(key, hi.trim())?))
        }
        match key {
            // architecture bundles; later keys override individual fields
            "preset" => match value {
                "desk" => {
                    let desk = RunConfig::default();
                    self.hidden = desk.hidden;
                    self.heads = desk.heads;
                    self.enc_layers = desk.enc_layers;
                    self.det_layers = desk.det_layers;
                    self.gen_layers = desk.gen_layers;
                    self.ffn_mult = desk.ffn_mult;
                    self.patch = desk.patch;
                    self.n_max = desk.n_max;
                    self.n_v_max = desk.n_v_max;
                    self.extent_x_m = desk.extent_x_m;
                    self.extent_y_m = desk.extent_y_m;
                    self.cell_m = desk.cell_m;
                }
                "paper" => {
                    self.hidden = 256;
                    self.heads = 8;
                    self.enc_layers = 2;
                    self.det_layers = 6;
                    self.gen_layers = 6;
                    self.ffn_mult = 4;
                    self.patch = 4;
                    self.n_max = 100;
                    self.n_v_max = 50;
                    self.extent_x_m = 60.0;
                    self.extent_y_m = 30.0;
                    self.cell_m = 0.3;
                }
                other => return Err(cfg_err(format!("unknown preset '{other}'"))),
            },
            "hidden" => self.hidden = parse(key, value)?,
            "heads" => self.heads = parse(key, value)?,
            "enc_layers" => self.enc_layers = parse(key, value)?,
            "det_layers" => self.det_layers = parse(key, value)?,
            "gen_layers" => self.gen_layers = parse(key, value)?,
            "ffn_mult" => self.ffn_mult = parse(key, value)?,
            "patch" => self.patch = parse(key, value)?,
            "n_max" => self.n_max = parse(key, value)?,
            "n_v_max" => self.n_v_max = parse(key, value)?,
            "repr" => {
                self.repr = match value {
                    "bbox" => ReprKind::Bbox,
                    "sme" => ReprKind::Sme,
                    "extreme" => ReprKind::Extreme,
                    other => return Err(cfg_err(format!("unknown repr '{other}'"))),
                }
            }
            "deform_points" => self.deform_points = parse(key, value)?,
            "dropout" => self.dropout = parse(key, value)?,
            "extent_x_m" => self.extent_x_m = parse(key, value)?,
            "extent_y_m" => self.extent_y_m = parse(key, value)?,
            "cell_m" => self.cell_m = parse(key, value)?,
            "boundary_count" => self.boundary_count = parse_range(key, value)?,
            "divider_count" => self.divider_count = parse_range(key, value)?,
            "crossing_count" => self.crossing_count = parse_range(key, value)?,
            "curvature_min_m" => self.curvature_m.0 = parse(key, value)?,
            "curvature_max_m" => self.curvature_m.1 = parse(key, value)?,
            "rdp_epsilon_m" => self.rdp_epsilon_m = parse(key, value)?,
            "noise_sigma" => self.noise_sigma = parse(key, value)?,
            "occlusions" => self.occlusions = parse(key, value)?,
            "occlusion_frac" => self.occlusion_frac = parse(key, value)?,
            "seed" => self.seed = parse(key, value)?,
            "batch_size" => self.batch_size = parse(key, value)?,
            "steps_stage1" => self.steps_stage1 = parse(key, value)?,
            "steps_stage2" => self.steps_stage2 = parse(key, value)?,
            "base_lr" => self.base_lr = parse(key, value)?,
            "warmup_steps" => self.warmup_steps = parse(key, value)?,
            "decay_frac" => self.decay_frac = parse(key, value)?,
            "weight_decay" => self.weight_decay = parse(key, value)?,
            "clip_norm" => self.clip_norm = parse(key, value)?,
            "aug_prob" => self.aug_prob = parse(key, value)?,
            "aug_sigma_m" => self.aug_sigma_m = parse(key, value)?,
            "sampling" => {
                self.sampling = match (value, self.sampling) {
                    ("curvature", SamplingSpec::Curvature { threshold_deg }) => {
                        SamplingSpec::Curvature { threshold_deg }
                    }
                    ("curvature", _) => SamplingSpec::Curvature { threshold_deg: 5.0 },
                    ("fixed", _) => SamplingSpec::FixedInterval { interval_m: 1.0 },
                    ("uniform", _) => SamplingSpec::Uniform { n: 8 },
                    (other, _) => return Err(cfg_err(format!("unknown sampling '{other}'"))),
                }
            }
            "sampling_param" => {
                self.sampling = match self.sampling {
                    SamplingSpec::Curvature { .. } => SamplingSpec::Curvature {
                        threshold_deg: parse(key, value)?,
                    },
                    SamplingSpec::FixedInterval { .. } => SamplingSpec::FixedInterval {
                        interval_m: parse(key, value)?,
                    },
                    SamplingSpec::Uniform { .. } => SamplingSpec::Uniform {
                        n: parse(key, value)?,
                    },
                }
            }
            "score_threshold" => self.score_threshold = parse(key, value)?,
            "thresholds" => {
                let parsed: Result<Vec<f64>> = value
                    .split(',')
                    .map(|v| parse::<f64>(key, v.trim()))
                    .collect();
                self.thresholds = parsed?;
            }
            other => return Err(cfg_err(format!("unknown config key '{other}'"))),
        }
        Ok(())
    }

    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(cfg_err("batch_size must be positive"));
        }
        if !(self.dropout >= 0.0 && self.dropout < 1.0) {
            return Err(cfg_err(format!("dropout {} outside [0,1)", self.dropout)));
        }
        if !(0.0..=1.0).contains(&self.aug_prob) {
            return Err(cfg_err(format!("aug_prob {} outside [0,1]", self.aug_prob)));
        }
        if self.thresholds.is_empty() {
            return Err(cfg_err("thresholds must be non-empty"));
        }
        let ascending = self
            .thresholds
            .windows(2)
            .all(|w| w[0] < w[1]);
        if !ascending || self.thresholds[0] <= 0.0 {
            return Err(cfg_err(format!(
                "thresholds must be positive ascending, got {:?}",
                self.thresholds
            )));
        }
        if !(self.decay_frac >= 0.0 && self.decay_frac <= 1.0) {
            return Err(cfg_err(format!("decay_frac {} outside [0,1]", self.decay_frac)));
        }
        self.grid()?;
        self.model_config()?.validate().map_err(|e| cfg_err(e.to_string()))?;
        self.scene_config().validate()?;
        Ok(())
    }

    pub fn grid(&self) -> Result<GridSpec> {
        let w = (self.extent_x_m / self.cell_m).round() as usize;
        let h = (self.extent_y_m / self.cell_m).round() as usize;
        GridSpec::new(w, h, self.cell_m, (0.0, 0.0)).map_err(|e| cfg_err(e.to_string()))
    }

    pub fn model_config(&self) -> Result<ModelConfig> {
        Ok(ModelConfig {
            hidden: self.hidden,
            heads: self.heads,
            enc_layers: self.enc_layers,
            det_layers: self.det_layers,
            gen_layers: self.gen_layers,
            ffn_mult: self.ffn_mult,
            patch: self.patch,
            n_max: self.n_max,
            n_v_max: self.n_v_max,
            repr: self.repr,
            deform_points: self.deform_points,
            dropout: self.dropout,
            raster_channels: 3,
            grid: self.grid()?,
        })
    }

    pub fn scene_config(&self) -> SceneConfig {
        SceneConfig {
            extent_m: (self.extent_x_m, self.extent_y_m),
            boundaries: self.boundary_count,
            dividers: self.divider_count,
            crossings: self.crossing_count,
            curvature_m: self.curvature_m,
            rdp_epsilon_m: self.rdp_epsilon_m,
            n_v_max: self.n_v_max,
        }
    }

    pub fn noise_config(&self) -> NoiseConfig {
        NoiseConfig {
            sigma: self.noise_sigma,
            occlusions: self.occlusions,
            max_occlusion_frac: self.occlusion_frac,
        }
    }
}
