use std::path::Path;

use crate::geometry::{ElementClass, GridSpec, ReprKind};
use crate::metrics::MetricKind;
use crate::synthdata::{build_dataset, gen_scene, NoiseConfig, SceneConfig};

use super::*;

/// Small config that trains in well under a second.
fn tiny_cfg() -> RunConfig {
    RunConfig {
        hidden: 16,
        heads: 2,
        enc_layers: 1,
        det_layers: 1,
        gen_layers: 1,
        patch: 3,
        n_max: 4,
        n_v_max: 6,
        extent_x_m: 18.0,
        extent_y_m: 9.0,
        cell_m: 1.0,
        boundary_count: crate::synthdata::CountRange::new(1, 1),
        divider_count: crate::synthdata::CountRange::new(1, 1),
        crossing_count: crate::synthdata::CountRange::new(1, 1),
        batch_size: 2,
        steps_stage1: 6,
        steps_stage2: 4,
        warmup_steps: 2,
        seed: 5,
        ..RunConfig::default()
    }
}

fn tiny_dataset(dir: &Path, cfg: &RunConfig, n: usize) {
    build_dataset(
        dir,
        n,
        cfg.seed,
        &[("train".to_string(), 1.0)],
        &cfg.scene_config(),
        &cfg.grid().unwrap(),
        &cfg.noise_config(),
    )
    .unwrap();
}

#[test]
fn config_round_trips_through_text() {
    let text = "\
# comment line
hidden = 32
repr = sme
thresholds = 0.5, 1.0, 1.5
boundary_count = 2..3
sampling = fixed
sampling_param = 0.5
";
    let cfg = RunConfig::from_text(text).unwrap();
    assert_eq!(cfg.hidden, 32);
    assert_eq!(cfg.repr, ReprKind::Sme);
    assert_eq!(cfg.boundary_count, crate::synthdata::CountRange::new(2, 3));
    assert_eq!(cfg.sampling, SamplingSpec::FixedInterval { interval_m: 0.5 });
}

#[test]
fn config_rejects_unknown_keys_and_bad_values() {
    assert!(RunConfig::from_text("no_such_key = 1").is_err());
    assert!(RunConfig::from_text("hidden = banana").is_err());
    assert!(RunConfig::from_text("thresholds = 1.5, 0.5").is_err());
    assert!(RunConfig::from_text("dropout = 1.5").is_err());
    let mut cfg = RunConfig::default();
    cfg.set("batch_size", "0").unwrap();
    assert!(cfg.validate().is_err());
}

#[test]
fn grid_is_derived_from_extent_and_cell() {
    let cfg = RunConfig::default();
    let grid = cfg.grid().unwrap();
    assert_eq!((grid.width_cells, grid.height_cells), (100, 50));
    assert_eq!(grid, GridSpec::desk());
}

#[test]
fn paper_preset_sets_reference_dimensions() {
    let cfg = RunConfig::from_text("preset = paper\nn_max = 64").unwrap();
    assert_eq!(cfg.hidden, 256);
    assert_eq!(cfg.det_layers, 6);
    assert_eq!(cfg.n_max, 64); // later keys override the bundle
    let grid = cfg.grid().unwrap();
    assert_eq!((grid.width_cells, grid.height_cells), (200, 100));
    assert!(RunConfig::from_text("preset = huge").is_err());
}

#[test]
fn zero_step_training_preserves_initialization() {
    let data = tempfile::tempdir().unwrap();
    let out = tempfile::tempdir().unwrap();
    let mut cfg = tiny_cfg();
    cfg.steps_stage1 = 0;
    tiny_dataset(data.path(), &cfg, 2);
    let outcome = train_stage1(&cfg, data.path(), out.path()).unwrap();
    assert!(outcome.log.is_empty());

    // an untouched model saved directly has identical bytes
    let fresh = crate::model::Model::new(cfg.model_config().unwrap(), cfg.seed).unwrap();
    let fresh_path = out.path().join("fresh.ckpt");
    fresh.save(&fresh_path).unwrap();
    assert_eq!(
        std::fs::read(&outcome.checkpoint).unwrap(),
        std::fs::read(&fresh_path).unwrap()
    );
}

#[test]
fn logged_total_loss_is_exactly_det_plus_gen() {
    let data = tempfile::tempdir().unwrap();
    let out = tempfile::tempdir().unwrap();
    let cfg = tiny_cfg();
    tiny_dataset(data.path(), &cfg, 3);
    let outcome = train(&cfg, data.path(), out.path(), Stage::Both).unwrap();
    assert_eq!(
        outcome.log.len() as u64,
        cfg.steps_stage1 + cfg.steps_stage2
    );
    for entry in &outcome.log {
        assert_eq!(entry.total, entry.det + entry.gen, "step {}", entry.step);
        assert!(entry.total.is_finite());
    }
}

#[test]
fn training_is_bit_deterministic_for_a_fixed_seed() {
    let run = || {
        let data = tempfile::tempdir().unwrap();
        let out = tempfile::tempdir().unwrap();
        let cfg = tiny_cfg();
        tiny_dataset(data.path(), &cfg, 3);
        let outcome = train(&cfg, data.path(), out.path(), Stage::Both).unwrap();
        let ckpt = std::fs::read(&outcome.checkpoint).unwrap();
        (outcome.log, ckpt)
    };
    let (log_a, ckpt_a) = run();
    let (log_b, ckpt_b) = run();
    assert_eq!(log_a, log_b);
    assert_eq!(ckpt_a, ckpt_b);
}

#[test]
fn stage2_requires_matching_model_config() {
    let data = tempfile::tempdir().unwrap();
    let out = tempfile::tempdir().unwrap();
    let mut cfg = tiny_cfg();
    cfg.steps_stage1 = 1;
    tiny_dataset(data.path(), &cfg, 2);
    let outcome = train_stage1(&cfg, data.path(), out.path()).unwrap();
    cfg.hidden = 32;
    let err = train_stage2(&cfg, data.path(), &outcome.checkpoint, out.path());
    assert!(matches!(err, Err(PipelineError::Config(_))));
}

#[test]
fn evaluation_of_a_fixed_checkpoint_is_idempotent() {
    let data = tempfile::tempdir().unwrap();
    let out = tempfile::tempdir().unwrap();
    let cfg = tiny_cfg();
    tiny_dataset(data.path(), &cfg, 2);
    let outcome = train_stage1(&cfg, data.path(), out.path()).unwrap();
    let run = EvalRun {
        checkpoint: outcome.checkpoint,
        data_dir: data.path().to_path_buf(),
        split: "train".into(),
        thresholds: vec![0.5, 1.0, 1.5],
        metrics: MetricKind::ALL.to_vec(),
        score_threshold: 0.5,
    };
    let a = evaluate(&run).unwrap();
    let b = evaluate(&run).unwrap();
    assert_eq!(a.report, b.report);
    assert_eq!(
        serde_json::to_string(&a.diagnostics.scenes).unwrap(),
        serde_json::to_string(&b.diagnostics.scenes).unwrap()
    );
}

#[test]
fn oracle_eval_is_perfect_on_ground_truth() {
    let data = tempfile::tempdir().unwrap();
    let cfg = tiny_cfg();
    tiny_dataset(data.path(), &cfg, 3);
    let report = oracle_eval(
        data.path(),
        "train",
        &[0.5, 1.0, 1.5],
        &MetricKind::ALL,
    )
    .unwrap();
    for cell in &report.cells {
        assert_eq!(cell.ap, 1.0, "{cell:?}");
    }
}

#[test]
fn eval_run_validates_thresholds() {
    let run = EvalRun {
        checkpoint: "nowhere.ckpt".into(),
        data_dir: "nowhere".into(),
        split: "train".into(),
        thresholds: vec![1.0, 0.5],
        metrics: vec![MetricKind::Chamfer],
        score_threshold: 0.5,
    };
    assert!(matches!(run.validate(), Err(PipelineError::Config(_))));
}

/// Minimal well-formedness check: every opened tag is closed in order.
fn assert_well_formed_xml(text: &str) {
    let mut stack: Vec<String> = Vec::new();
    let mut rest = text;
    while let Some(start) = rest.find('<') {
        let end = rest[start..].find('>').expect("unclosed angle bracket") + start;
        let tag = &rest[start + 1..end];
        rest = &rest[end + 1..];
        if tag.starts_with('?') || tag.starts_with('!') {
            continue;
        }
        if let Some(name) = tag.strip_prefix('/') {
            let open = stack.pop().unwrap_or_else(|| panic!("stray closer {name}"));
            assert_eq!(open, name, "mismatched tag");
        } else if !tag.ends_with('/') {
            let name = tag.split_whitespace().next().unwrap().to_string();
            stack.push(name);
        }
    }
    assert!(stack.is_empty(), "unclosed tags: {stack:?}");
}

#[test]
fn empty_map_renders_frame_and_legend_only() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("empty.svg");
    render_svg(None, None, (18.0, 9.0), &path).unwrap();
    let text = std::fs::read_to_string(&path).unwrap();
    assert_well_formed_xml(&text);
    assert!(text.contains("<rect"));
    assert!(text.contains("ped"));
    assert!(!text.contains("<path"));
}

#[test]
fn rendered_scene_is_well_formed_and_closes_crossings() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("scene.svg");
    let cfg = tiny_cfg();
    let map = gen_scene(3, &cfg.scene_config()).unwrap();
    assert!(map.of_class(ElementClass::Crossing).count() > 0);
    render_svg(Some(&map), None, cfg.scene_config().extent_m, &path).unwrap();
    let text = std::fs::read_to_string(&path).unwrap();
    assert_well_formed_xml(&text);
    // the crossing path ends with a close command
    let closed_paths = text
        .lines()
        .filter(|l| l.contains("stroke=\"#e4572e\"") && l.contains("Z\""))
        .count();
    assert!(closed_paths >= 1, "no closed crossing path in:\n{text}");
    // deterministic output
    let path2 = dir.path().join("scene2.svg");
    render_svg(Some(&map), None, cfg.scene_config().extent_m, &path2).unwrap();
    assert_eq!(
        std::fs::read(&path).unwrap(),
        std::fs::read(&path2).unwrap()
    );
}

#[test]
fn ablation_runs_all_representations_and_tabulates() {
    let data = tempfile::tempdir().unwrap();
    let out = tempfile::tempdir().unwrap();
    let mut cfg = tiny_cfg();
    cfg.steps_stage1 = 2;
    cfg.steps_stage2 = 1;
    tiny_dataset(data.path(), &cfg, 2);
    let result = run_ablation(&cfg, data.path(), out.path()).unwrap();
    assert_eq!(result.rows.len(), 3);
    let table = result.to_table();
    for name in ["bbox", "sme", "extreme", "Fre_mAP", "Cha_mAP"] {
        assert!(table.contains(name), "missing {name} in:\n{table}");
    }
    assert!(out.path().join("ablation.txt").exists());
    assert!(out.path().join("ablation.json").exists());
    // every row carries a full report
    for (_, report) in &result.rows {
        assert_eq!(report.cells.len(), 2 * 3 * 3);
    }
}

#[test]
fn noise_augmentation_defaults_are_wired() {
    let cfg = RunConfig::default();
    assert_eq!(cfg.aug_prob, 0.3);
    assert_eq!(cfg.aug_sigma_m, 0.15);
    assert_eq!(cfg.dropout, 0.2);
    assert_eq!(cfg.clip_norm, 5.0);
    let report = rasterize_probe(&cfg);
    assert!(report);
}

fn rasterize_probe(cfg: &RunConfig) -> bool {
    let map = gen_scene(1, &cfg.scene_config()).unwrap();
    let raster = crate::synthdata::rasterize_scene(
        &map,
        &cfg.grid().unwrap(),
        &NoiseConfig::clean(),
        0,
    );
    raster.data.iter().any(|c| c.iter().any(|&v| v > 0.0))
}

#[test]
fn scene_config_derivation_matches_fields() {
    let cfg = tiny_cfg();
    let sc: SceneConfig = cfg.scene_config();
    assert_eq!(sc.extent_m, (18.0, 9.0));
    assert_eq!(sc.n_v_max, 6);
}

#[test]
fn perfect_detector_makes_stage2_conditions_equal_stage1() {
    use crate::geometry::extract_keypoints;
    use crate::matching::{
        detector_set_loss, DetectedElement, DetectionSet, GtElement, NO_OBJECT_INDEX,
    };
    use crate::model::GeneratorCondition;

    let cfg = tiny_cfg();
    let model_cfg = cfg.model_config().unwrap();
    let map = gen_scene(2, &cfg.scene_config()).unwrap();
    let gts: Vec<GtElement> = map
        .elements
        .iter()
        .map(|e| GtElement {
            keypoints: extract_keypoints(&e.poly, cfg.repr),
            class: e.class,
        })
        .collect();

    // a detector stub that answers every ground truth exactly, with the
    // remaining queries confident in no-object
    let mut elements: Vec<DetectedElement> = gts
        .iter()
        .map(|gt| {
            let mut probs = [0.0; 4];
            probs[gt.class.index()] = 1.0;
            DetectedElement {
                keypoints: gt.keypoints.clone(),
                class_probs: probs,
            }
        })
        .collect();
    while elements.len() < cfg.n_max {
        let mut probs = [0.0; 4];
        probs[NO_OBJECT_INDEX] = 1.0;
        elements.push(DetectedElement {
            keypoints: extract_keypoints(&map.elements[0].poly, cfg.repr),
            class_probs: probs,
        });
    }
    let det_set = DetectionSet { elements };
    let (loss, assignment) = detector_set_loss(&det_set, &gts).unwrap();
    assert!(loss.abs() < 1e-9);

    for (j, gt) in gts.iter().enumerate() {
        let stage1 = GeneratorCondition::new(&model_cfg, gt.class, &gt.keypoints);
        let matched = &det_set.elements[assignment.pred_for_gt[j]];
        let stage2 = GeneratorCondition::new(&model_cfg, gt.class, &matched.keypoints);
        assert_eq!(stage1, stage2, "gt {j}");
    }
}
