use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::geometry::{ElementClass, ReprKind};
use crate::metrics::{APReport, MetricKind};

use super::config::{RunConfig, Stage};
use super::eval::{evaluate, EvalRun};
use super::train::train;
use super::{io_err, PipelineError};

type Result<T> = std::result::Result<T, PipelineError>;

/// Keypoint-representation ablation: the same dataset trained end to
/// end once per representation.
#[derive(Debug, Serialize, Deserialize)]
pub struct AblationResult {
    pub rows: Vec<(ReprKind, APReport)>,
}

impl AblationResult {
    /// Table with one row per keypoint representation and Fréchet /
    /// Chamfer AP columns per class plus mAP.
    pub fn to_table(&self) -> String {
        let mut out = String::new();
        let _ = writeln!(
            out,
            "{:<9} | {:>8} {:>8} {:>8} {:>8} | {:>8} {:>8} {:>8} {:>8}",
            "keypoints",
            "Fre_ped",
            "Fre_div",
            "Fre_bnd",
            "Fre_mAP",
            "Cha_ped",
            "Cha_div",
            "Cha_bnd",
            "Cha_mAP"
        );
        let _ = writeln!(out, "{}", "-".repeat(87));
        for (repr, report) in &self.rows {
            let cell = |metric: MetricKind, class: ElementClass| {
                report
                    .class_ap(metric, class)
                    .map(|v| format!("{v:>8.3}"))
                    .unwrap_or_else(|| format!("{:>8}", "-"))
            };
            let map = |metric: MetricKind| {
                report
                    .map(metric)
                    .map(|v| format!("{v:>8.3}"))
                    .unwrap_or_else(|| format!("{:>8}", "-"))
            };
            let _ = writeln!(
                out,
                "{:<9} | {} {} {} {} | {} {} {} {}",
                repr.name(),
                cell(MetricKind::Frechet, ElementClass::Crossing),
                cell(MetricKind::Frechet, ElementClass::Divider),
                cell(MetricKind::Frechet, ElementClass::Boundary),
                map(MetricKind::Frechet),
                cell(MetricKind::Chamfer, ElementClass::Crossing),
                cell(MetricKind::Chamfer, ElementClass::Divider),
                cell(MetricKind::Chamfer, ElementClass::Boundary),
                map(MetricKind::Chamfer),
            );
        }
        out
    }
}

/// Train and evaluate bbox / sme / extreme on the same dataset with the
/// same budget; writes `ablation.txt` and `ablation.json` to `out_dir`.
pub fn run_ablation(base: &RunConfig, data_dir: &Path, out_dir: &Path) -> Result<AblationResult> {
    let eval_split = {
        let manifest = crate::synthdata::load_manifest(data_dir)?;
        if manifest.split("val").is_some_and(|ids| !ids.is_empty()) {
            "val".to_string()
        } else {
            "train".to_string()
        }
    };

    let mut rows = Vec::new();
    for repr in ReprKind::ALL {
        let mut cfg = base.clone();
        cfg.repr = repr;
        let run_dir = out_dir.join(repr.name());
        fs::create_dir_all(&run_dir).map_err(|e| io_err(&run_dir, e))?;
        let outcome = train(&cfg, data_dir, &run_dir, Stage::Both)?;
        let output = evaluate(&EvalRun {
            checkpoint: outcome.checkpoint,
            data_dir: data_dir.to_path_buf(),
            split: eval_split.clone(),
            thresholds: cfg.thresholds.clone(),
            metrics: MetricKind::ALL.to_vec(),
            score_threshold: cfg.score_threshold,
        })?;
        rows.push((repr, output.report));
    }
    let result = AblationResult { rows };

    let table_path = out_dir.join("ablation.txt");
    fs::write(&table_path, result.to_table()).map_err(|e| io_err(&table_path, e))?;
    let json_path = out_dir.join("ablation.json");
    let json = serde_json::to_string_pretty(&result)
        .map_err(|e| PipelineError::Config(format!("ablation serialization: {e}")))?;
    fs::write(&json_path, json).map_err(|e| io_err(&json_path, e))?;
    Ok(result)
}
