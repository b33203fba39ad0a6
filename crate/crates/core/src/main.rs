//! Command-line entry point: dataset generation, training, evaluation,
//! oracle sanity checks, SVG rendering and the keypoint ablation.

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use polymap::geometry::VectorMap;
use polymap::metrics::MetricKind;
use polymap::model::Model;
use polymap::pipeline::{
    evaluate, oracle_eval, render_svg, run_ablation, train, EvalRun, PipelineError, RunConfig,
    Stage,
};
use polymap::synthdata::{build_dataset, load_scene};

#[derive(Parser)]
#[command(name = "polymap", about = "Vectorized map construction at desk scale")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(clap::Args)]
struct ConfigArgs {
    /// Flat key = value config file; defaults apply when omitted.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Override single config keys: -S key=value (repeatable).
    #[arg(short = 'S', long = "set", value_name = "KEY=VALUE")]
    set: Vec<String>,
}

impl ConfigArgs {
    fn load(&self) -> Result<RunConfig, PipelineError> {
        let mut cfg = match &self.config {
            Some(path) => RunConfig::from_file(path)?,
            None => RunConfig::default(),
        };
        for kv in &self.set {
            let (key, value) = kv.split_once('=').ok_or_else(|| {
                PipelineError::Config(format!("override '{kv}' is not key=value"))
            })?;
            cfg.set(key.trim(), value.trim())?;
        }
        cfg.validate()?;
        Ok(cfg)
    }
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic dataset directory.
    GenData {
        /// Number of scenes.
        #[arg(long)]
        n: usize,
        /// Dataset seed; also seeds the per-scene generators.
        #[arg(long)]
        seed: Option<u64>,
        /// Output directory.
        #[arg(long)]
        out: PathBuf,
        /// Fraction of scenes held out as the validation split.
        #[arg(long, default_value_t = 0.125)]
        val_frac: f64,
        #[command(flatten)]
        config: ConfigArgs,
    },
    /// Train stage 1, stage 2 or both.
    Train {
        /// Dataset directory from gen-data.
        #[arg(long)]
        data: PathBuf,
        /// Training stage: 1, 2 or both.
        #[arg(long, default_value = "both")]
        stage: String,
        /// Output directory for checkpoints and logs.
        #[arg(long)]
        out: PathBuf,
        #[command(flatten)]
        config: ConfigArgs,
    },
    /// Evaluate a checkpoint with Chamfer/Fréchet AP.
    Eval {
        /// Checkpoint path.
        #[arg(long)]
        ckpt: PathBuf,
        /// Dataset directory.
        #[arg(long)]
        data: PathBuf,
        /// Dataset split to evaluate.
        #[arg(long, default_value = "val")]
        split: String,
        /// Metric kind: chamfer, frechet or both.
        #[arg(long, default_value = "both")]
        metric: String,
        /// Comma-separated matching thresholds in meters.
        #[arg(long)]
        thresholds: Option<String>,
        /// Detection score threshold.
        #[arg(long)]
        score_threshold: Option<f64>,
        /// Write the JSON report here.
        #[arg(long)]
        report: Option<PathBuf>,
        #[command(flatten)]
        config: ConfigArgs,
    },
    /// Evaluate ground truth against itself (protocol sanity check).
    OracleEval {
        #[arg(long)]
        data: PathBuf,
        #[arg(long, default_value = "train")]
        split: String,
        #[arg(long)]
        thresholds: Option<String>,
        #[command(flatten)]
        config: ConfigArgs,
    },
    /// Render a scene (and optionally a checkpoint's predictions) to SVG.
    Render {
        #[arg(long)]
        data: PathBuf,
        /// Scene id, e.g. scene_00003.
        #[arg(long)]
        scene: String,
        /// Optional checkpoint; when given, predictions are drawn solid.
        #[arg(long)]
        ckpt: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        #[command(flatten)]
        config: ConfigArgs,
    },
    /// Run the bbox/sme/extreme keypoint ablation end to end.
    Ablate {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[command(flatten)]
        config: ConfigArgs,
    },
}

fn parse_thresholds(arg: &Option<String>, cfg: &RunConfig) -> Result<Vec<f64>, PipelineError> {
    match arg {
        None => Ok(cfg.thresholds.clone()),
        Some(text) => text
            .split(',')
            .map(|v| {
                v.trim()
                    .parse::<f64>()
                    .map_err(|_| PipelineError::Config(format!("bad threshold '{v}'")))
            })
            .collect(),
    }
}

fn parse_metrics(name: &str) -> Result<Vec<MetricKind>, PipelineError> {
    match name {
        "chamfer" => Ok(vec![MetricKind::Chamfer]),
        "frechet" => Ok(vec![MetricKind::Frechet]),
        "both" => Ok(MetricKind::ALL.to_vec()),
        other => Err(PipelineError::Config(format!(
            "unknown metric '{other}' (want chamfer, frechet or both)"
        ))),
    }
}

fn run(cli: Cli) -> Result<(), PipelineError> {
    match cli.command {
        Command::GenData {
            n,
            seed,
            out,
            val_frac,
            config,
        } => {
            let cfg = config.load()?;
            if !(0.0..1.0).contains(&val_frac) {
                return Err(PipelineError::Config(format!(
                    "val_frac {val_frac} outside [0,1)"
                )));
            }
            let seed = seed.unwrap_or(cfg.seed);
            let splits = vec![
                ("train".to_string(), 1.0 - val_frac),
                ("val".to_string(), val_frac),
            ];
            let manifest = build_dataset(
                &out,
                n,
                seed,
                &splits,
                &cfg.scene_config(),
                &cfg.grid()?,
                &cfg.noise_config(),
            )?;
            println!(
                "wrote {n} scenes to {} (train {}, val {})",
                out.display(),
                manifest.split("train").map_or(0, |s| s.len()),
                manifest.split("val").map_or(0, |s| s.len()),
            );
            Ok(())
        }
        Command::Train {
            data,
            stage,
            out,
            config,
        } => {
            let cfg = config.load()?;
            let stage: Stage = stage.parse()?;
            let outcome = train(&cfg, &data, &out, stage)?;
            if let Some(last) = outcome.log.last() {
                println!(
                    "finished at stage {} step {}: total {:.4} (det {:.4}, gen {:.4})",
                    last.stage, last.step, last.total, last.det, last.gen
                );
            }
            println!("checkpoint: {}", outcome.checkpoint.display());
            println!("log: {}", outcome.log_path.display());
            Ok(())
        }
        Command::Eval {
            ckpt,
            data,
            split,
            metric,
            thresholds,
            score_threshold,
            report,
            config,
        } => {
            let cfg = config.load()?;
            let run = EvalRun {
                checkpoint: ckpt,
                data_dir: data,
                split,
                thresholds: parse_thresholds(&thresholds, &cfg)?,
                metrics: parse_metrics(&metric)?,
                score_threshold: score_threshold.unwrap_or(cfg.score_threshold),
            };
            let output = evaluate(&run)?;
            print!("{}", output.report.to_table());
            println!(
                "decode incidents: {} EOS overflows, {} degenerate sequences",
                output.diagnostics.total_eos_overflows,
                output.diagnostics.total_degenerate_decodes
            );
            if let Some(path) = report {
                let payload = serde_json::json!({
                    "report": output.report,
                    "diagnostics": output.diagnostics,
                });
                std::fs::write(
                    &path,
                    serde_json::to_string_pretty(&payload)
                        .map_err(|e| PipelineError::Config(e.to_string()))?,
                )
                .map_err(|e| PipelineError::Io {
                    path: path.clone(),
                    source: e,
                })?;
                println!("report: {}", path.display());
            }
            Ok(())
        }
        Command::OracleEval {
            data,
            split,
            thresholds,
            config,
        } => {
            let cfg = config.load()?;
            let report = oracle_eval(
                &data,
                &split,
                &parse_thresholds(&thresholds, &cfg)?,
                &MetricKind::ALL,
            )?;
            print!("{}", report.to_table());
            Ok(())
        }
        Command::Render {
            data,
            scene,
            ckpt,
            out,
            config,
        } => {
            let cfg = config.load()?;
            let record = load_scene(&data, &scene)?;
            let predictions = match ckpt {
                Some(path) => {
                    let model = Model::load(&path, 0)?;
                    let predicted = model.predict_map(&record.raster, cfg.score_threshold)?;
                    Some(VectorMap::new(
                        predicted.predictions.into_iter().map(|(e, _)| e).collect(),
                    ))
                }
                None => None,
            };
            let extent = record.raster.grid.extent_m();
            render_svg(Some(&record.map), predictions.as_ref(), extent, &out)?;
            println!("wrote {}", out.display());
            Ok(())
        }
        Command::Ablate { data, out, config } => {
            let cfg = config.load()?;
            let result = run_ablation(&cfg, &data, &out)?;
            print!("{}", result.to_table());
            println!("tables: {}", out.display());
            Ok(())
        }
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(err) => {
            eprintln!("error: {err}");
            ExitCode::from(err.exit_code())
        }
    }
}
