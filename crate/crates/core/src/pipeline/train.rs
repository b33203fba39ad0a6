use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};

use rand::{seq::SliceRandom, Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::geometry::{
    extract_keypoints, flatten_to_tokens, quantize_vertex, resample, ElementClass, KeypointSet,
    Point, Polyline, ResampleStrategy,
};
use crate::matching::{detector_set_loss, GtElement};
use crate::model::{detector_loss, GeneratorCondition, Model};
use crate::numerics::{adamw_step, lr_at, AdamWConfig, LrSchedule, OptimState, Tensor};
use crate::synthdata::{load_manifest, load_split, SceneRecord};

use super::config::{RunConfig, Stage};
use super::{io_err, PipelineError};

type Result<T> = std::result::Result<T, PipelineError>;

/// One logged optimization step.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainLogEntry {
    pub stage: u8,
    pub step: u64,
    pub lr: f64,
    pub total: f64,
    pub det: f64,
    pub gen: f64,
}

/// Result of a training invocation.
#[derive(Debug)]
pub struct TrainOutcome {
    pub checkpoint: PathBuf,
    pub log_path: PathBuf,
    pub log: Vec<TrainLogEntry>,
}

/// Per-element training target: detector keypoints from the full
/// ground-truth polyline, generator tokens from the sampled one.
struct ElementTarget {
    class: ElementClass,
    keypoints: KeypointSet,
    /// Vertices behind the token targets (noise augmentation re-derives
    /// input tokens from these).
    verts: Vec<Point>,
    /// Clean target tokens: interleaved coordinates plus EOS.
    tokens: Vec<u32>,
}

struct ScenePrep {
    record: SceneRecord,
    gts: Vec<GtElement>,
    elements: Vec<ElementTarget>,
}

/// Sample a polyline into generator target vertices. Falls back to
/// uniform resampling when the strategy produces more vertices than the
/// token budget allows.
fn target_polyline(
    poly: &Polyline,
    strategy: ResampleStrategy,
    n_v_max: usize,
) -> Result<Polyline> {
    let sampled = resample(poly, strategy)?;
    if sampled.len() <= n_v_max {
        return Ok(sampled);
    }
    Ok(resample(poly, ResampleStrategy::Uniform(n_v_max))?)
}

fn prepare_scene(record: SceneRecord, cfg: &RunConfig) -> Result<ScenePrep> {
    let model_cfg = cfg.model_config()?;
    let strategy = cfg.sampling.strategy();
    let mut gts = Vec::with_capacity(record.map.elements.len());
    let mut elements = Vec::with_capacity(record.map.elements.len());
    for el in &record.map.elements {
        let keypoints = extract_keypoints(&el.poly, cfg.repr);
        gts.push(GtElement {
            keypoints: keypoints.clone(),
            class: el.class,
        });
        let target = target_polyline(&el.poly, strategy, cfg.n_v_max)?;
        let tokens = flatten_to_tokens(&target, &model_cfg.grid, cfg.n_v_max)?;
        elements.push(ElementTarget {
            class: el.class,
            keypoints,
            verts: target.vertices().to_vec(),
            tokens: tokens.tokens().to_vec(),
        });
    }
    Ok(ScenePrep {
        record,
        gts,
        elements,
    })
}

fn gauss(rng: &mut ChaCha8Rng) -> f64 {
    let u1: f64 = rng.gen_range(1e-12..1.0);
    let u2: f64 = rng.gen_range(0.0..1.0);
    (-2.0 * u1.ln()).sqrt() * (std::f64::consts::TAU * u2).cos()
}

/// Teacher-forcing input tokens: each vertex independently receives
/// Gaussian coordinate noise with the configured probability before
/// quantization. Targets stay clean.
fn augmented_inputs(
    target: &ElementTarget,
    cfg: &RunConfig,
    grid: &crate::geometry::GridSpec,
    rng: &mut ChaCha8Rng,
) -> Vec<u32> {
    let mut tokens = Vec::with_capacity(target.verts.len() * 2);
    for v in &target.verts {
        let noised = if cfg.aug_prob > 0.0 && rng.gen_bool(cfg.aug_prob) {
            Point::new(
                v.x + cfg.aug_sigma_m * gauss(rng),
                v.y + cfg.aug_sigma_m * gauss(rng),
            )
        } else {
            *v
        };
        let (tx, ty) = quantize_vertex(noised, grid);
        tokens.push(tx);
        tokens.push(ty);
    }
    tokens
}

fn mean_of(tensors: &[Tensor]) -> Result<Option<Tensor>> {
    let Some(first) = tensors.first() else {
        return Ok(None);
    };
    let mut acc = first.clone();
    for t in &tensors[1..] {
        acc = acc.add(t).map_err(PipelineError::Numerics)?;
    }
    Ok(Some(
        acc.scale(1.0 / tensors.len() as f64)
            .map_err(PipelineError::Numerics)?,
    ))
}

fn run_stage(
    model: &Model,
    cfg: &RunConfig,
    scenes: &[ScenePrep],
    stage: u8,
    steps: u64,
    log: &mut Vec<TrainLogEntry>,
) -> Result<()> {
    if steps == 0 {
        return Ok(());
    }
    let model_cfg = &model.config;
    let schedule = LrSchedule {
        base: cfg.base_lr,
        warmup_steps: cfg.warmup_steps.min(steps / 2),
        decay_step: (steps as f64 * cfg.decay_frac) as u64,
        decay_factor: 0.1,
    };
    let mut optim = OptimState::new(
        &model.params,
        AdamWConfig {
            weight_decay: cfg.weight_decay,
            clip_norm: cfg.clip_norm,
            ..Default::default()
        },
    );
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed.wrapping_add(stage as u64 * 0x9e37));
    let mut pool: Vec<usize> = Vec::new();

    model.graph.set_eval(false);
    for step in 0..steps {
        let mut batch = Vec::with_capacity(cfg.batch_size);
        for _ in 0..cfg.batch_size {
            if pool.is_empty() {
                pool = (0..scenes.len()).collect();
                pool.shuffle(&mut rng);
            }
            batch.push(pool.pop().unwrap());
        }

        model.graph.rewind(model.mark);
        let mut det_losses = Vec::with_capacity(batch.len());
        let mut gen_losses = Vec::new();
        for &idx in &batch {
            let scene = &scenes[idx];
            let features = model.bev_encode(&scene.record.raster)?;
            let det_out = model.detect_elements(&features)?;
            let det_set = det_out.to_detection_set(model_cfg);
            let (_, assignment) = detector_set_loss(&det_set, &scene.gts)?;
            det_losses.push(detector_loss(
                &model.graph,
                model_cfg,
                &det_out,
                &scene.gts,
                &assignment,
            )?);

            for (j, target) in scene.elements.iter().enumerate() {
                // stage 1 teacher-forces with ground-truth keypoints;
                // stage 2 conditions on the matched query's predictions
                let keypoints = if stage == 1 {
                    target.keypoints.clone()
                } else {
                    det_set.elements[assignment.pred_for_gt[j]].keypoints.clone()
                };
                let cond = GeneratorCondition::new(model_cfg, target.class, &keypoints);
                let inputs = augmented_inputs(target, cfg, &model_cfg.grid, &mut rng);
                let nll = model.generator.teacher_nll(
                    &model.graph,
                    model_cfg,
                    &cond,
                    &inputs[..inputs.len()],
                    &target.tokens,
                    &features,
                )?;
                gen_losses.push(nll);
            }
        }

        let det = mean_of(&det_losses)?.expect("batch is never empty");
        let gen = match mean_of(&gen_losses)? {
            Some(t) => t,
            None => model.graph.scalar(0.0),
        };
        let total = det.add(&gen).map_err(PipelineError::Numerics)?;

        let (det_v, gen_v, total_v) = (det.scalar_value(), gen.scalar_value(), total.scalar_value());
        if !total_v.is_finite() {
            return Err(PipelineError::NonFiniteLoss {
                step,
                det: det_v,
                gen: gen_v,
            });
        }

        model.graph.zero_grads();
        model.graph.backward(&total).map_err(PipelineError::Numerics)?;
        let lr = lr_at(step, &schedule);
        adamw_step(&model.params, &mut optim, lr)?;

        log.push(TrainLogEntry {
            stage,
            step,
            lr,
            total: total_v,
            det: det_v,
            gen: gen_v,
        });
    }
    model.graph.rewind(model.mark);
    model.graph.set_eval(true);
    Ok(())
}

fn write_log(path: &Path, log: &[TrainLogEntry]) -> Result<()> {
    let mut file = fs::File::create(path).map_err(|e| io_err(path, e))?;
    for entry in log {
        let line = serde_json::to_string(entry)
            .map_err(|e| PipelineError::Config(format!("log serialization: {e}")))?;
        writeln!(file, "{line}").map_err(|e| io_err(path, e))?;
    }
    Ok(())
}

fn load_scenes(cfg: &RunConfig, data_dir: &Path) -> Result<Vec<ScenePrep>> {
    let manifest = load_manifest(data_dir)?;
    let records = load_split(data_dir, &manifest, "train")?;
    records
        .into_iter()
        .map(|r| prepare_scene(r, cfg))
        .collect()
}

/// Stage 1: teacher forcing with ground-truth keypoint conditions.
pub fn train_stage1(cfg: &RunConfig, data_dir: &Path, out_dir: &Path) -> Result<TrainOutcome> {
    cfg.validate()?;
    fs::create_dir_all(out_dir).map_err(|e| io_err(out_dir, e))?;
    let scenes = load_scenes(cfg, data_dir)?;
    let model = Model::new(cfg.model_config()?, cfg.seed)?;
    let mut log = Vec::new();
    run_stage(&model, cfg, &scenes, 1, cfg.steps_stage1, &mut log)?;
    let checkpoint = out_dir.join("stage1.ckpt");
    model.save(&checkpoint)?;
    let log_path = out_dir.join("train_log.jsonl");
    write_log(&log_path, &log)?;
    Ok(TrainOutcome {
        checkpoint,
        log_path,
        log,
    })
}

/// Stage 2: fine-tune with the Hungarian-matched predicted keypoints as
/// generator conditions; targets stay the ground-truth sequences.
pub fn train_stage2(
    cfg: &RunConfig,
    data_dir: &Path,
    stage1_checkpoint: &Path,
    out_dir: &Path,
) -> Result<TrainOutcome> {
    cfg.validate()?;
    fs::create_dir_all(out_dir).map_err(|e| io_err(out_dir, e))?;
    let scenes = load_scenes(cfg, data_dir)?;
    let model = Model::load(stage1_checkpoint, cfg.seed.wrapping_add(0x51a6e2))?;
    if model.config != cfg.model_config()? {
        return Err(PipelineError::Config(
            "stage-1 checkpoint was trained with a different model config".into(),
        ));
    }
    let mut log = Vec::new();
    run_stage(&model, cfg, &scenes, 2, cfg.steps_stage2, &mut log)?;
    let checkpoint = out_dir.join("stage2.ckpt");
    model.save(&checkpoint)?;
    let log_path = out_dir.join("train_log_stage2.jsonl");
    write_log(&log_path, &log)?;
    Ok(TrainOutcome {
        checkpoint,
        log_path,
        log,
    })
}

/// Which keypoints condition the generator during NLL measurement.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ConditionSource {
    /// Ground-truth keypoints (teacher-forcing conditions).
    GroundTruth,
    /// Keypoints of the Hungarian-matched detector query.
    MatchedPrediction,
}

/// Mean generator NLL over a split, without dropout or augmentation.
/// Measures the exposure gap between teacher-forced and
/// predicted-keypoint conditioning for a fixed checkpoint.
pub fn measure_generator_nll(
    checkpoint: &Path,
    cfg: &RunConfig,
    data_dir: &Path,
    split: &str,
    source: ConditionSource,
) -> Result<f64> {
    let manifest = load_manifest(data_dir)?;
    let records = load_split(data_dir, &manifest, split)?;
    let scenes: Vec<ScenePrep> = records
        .into_iter()
        .map(|r| prepare_scene(r, cfg))
        .collect::<Result<_>>()?;
    let model = Model::load(checkpoint, 0)?;
    model.graph.set_eval(true);

    let mut total = 0.0;
    let mut count = 0usize;
    for scene in &scenes {
        model.graph.rewind(model.mark);
        let features = model.bev_encode(&scene.record.raster)?;
        let det_out = model.detect_elements(&features)?;
        let det_set = det_out.to_detection_set(&model.config);
        let (_, assignment) = detector_set_loss(&det_set, &scene.gts)?;
        for (j, target) in scene.elements.iter().enumerate() {
            let keypoints = match source {
                ConditionSource::GroundTruth => target.keypoints.clone(),
                ConditionSource::MatchedPrediction => {
                    det_set.elements[assignment.pred_for_gt[j]].keypoints.clone()
                }
            };
            let cond = GeneratorCondition::new(&model.config, target.class, &keypoints);
            let inputs = &target.tokens[..target.tokens.len() - 1];
            let nll = model.generator.teacher_nll(
                &model.graph,
                &model.config,
                &cond,
                inputs,
                &target.tokens,
                &features,
            )?;
            total += nll.scalar_value();
            count += 1;
        }
    }
    model.graph.rewind(model.mark);
    Ok(if count == 0 { 0.0 } else { total / count as f64 })
}

/// Run the requested stages; `both` chains stage 2 onto stage 1's
/// checkpoint and merges the logs.
pub fn train(cfg: &RunConfig, data_dir: &Path, out_dir: &Path, stage: Stage) -> Result<TrainOutcome> {
    match stage {
        Stage::One => train_stage1(cfg, data_dir, out_dir),
        Stage::Two => {
            let stage1 = out_dir.join("stage1.ckpt");
            train_stage2(cfg, data_dir, &stage1, out_dir)
        }
        Stage::Both => {
            let first = train_stage1(cfg, data_dir, out_dir)?;
            let second = train_stage2(cfg, data_dir, &first.checkpoint, out_dir)?;
            let mut log = first.log;
            log.extend(second.log.iter().cloned());
            write_log(&first.log_path, &log)?;
            Ok(TrainOutcome {
                checkpoint: second.checkpoint,
                log_path: first.log_path,
                log,
            })
        }
    }
}
