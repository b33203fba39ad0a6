//! End-to-end CLI coverage: every subcommand plus the exit-code
//! contract (0 success, 2 config error, 3 data error, 4 numeric
//! failure).

use std::path::Path;
use std::process::Command;

fn polymap() -> Command {
    Command::new(env!("CARGO_BIN_EXE_polymap"))
}

/// Tiny-model overrides shared by the CLI runs.
fn tiny_overrides(cmd: &mut Command) -> &mut Command {
    for kv in [
        "hidden=16",
        "heads=2",
        "enc_layers=1",
        "det_layers=1",
        "gen_layers=1",
        "patch=10",
        "n_max=8",
        "batch_size=2",
        "steps_stage1=6",
        "steps_stage2=3",
        "warmup_steps=2",
    ] {
        cmd.arg("-S").arg(kv);
    }
    cmd
}

#[test]
fn full_cli_workflow_round_trips() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("data");
    let run = dir.path().join("run");
    let report = dir.path().join("report.json");
    let svg = dir.path().join("scene.svg");

    let status = tiny_overrides(
        polymap()
            .args(["gen-data", "--n", "4", "--seed", "9", "--val-frac", "0.25"])
            .arg("--out")
            .arg(&data),
    )
    .status()
    .unwrap();
    assert!(status.success(), "gen-data failed");
    assert!(data.join("manifest.json").exists());
    assert!(data.join("scenes/scene_00000.json").exists());
    assert!(data.join("rasters/scene_00000.f32").exists());

    let status = tiny_overrides(
        polymap()
            .args(["train", "--stage", "both"])
            .arg("--data")
            .arg(&data)
            .arg("--out")
            .arg(&run),
    )
    .status()
    .unwrap();
    assert!(status.success(), "train failed");
    let ckpt = run.join("stage2.ckpt");
    assert!(ckpt.exists());
    assert!(run.join("train_log.jsonl").exists());

    let output = tiny_overrides(
        polymap()
            .args(["eval", "--split", "val", "--metric", "both"])
            .args(["--thresholds", "0.5,1.0,1.5"])
            .arg("--ckpt")
            .arg(&ckpt)
            .arg("--data")
            .arg(&data)
            .arg("--report")
            .arg(&report),
    )
    .output()
    .unwrap();
    assert!(output.status.success(), "eval failed");
    let stdout = String::from_utf8_lossy(&output.stdout);
    for needle in ["AP_ped", "AP_divider", "AP_boundary", "mAP"] {
        assert!(stdout.contains(needle), "eval table lacks {needle}:\n{stdout}");
    }
    let report_json: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(&report).unwrap()).unwrap();
    assert!(report_json.get("report").is_some());
    assert!(report_json.get("diagnostics").is_some());

    let status = tiny_overrides(
        polymap()
            .args(["render", "--scene", "scene_00000"])
            .arg("--data")
            .arg(&data)
            .arg("--ckpt")
            .arg(&ckpt)
            .arg("--out")
            .arg(&svg),
    )
    .status()
    .unwrap();
    assert!(status.success(), "render failed");
    let svg_text = std::fs::read_to_string(&svg).unwrap();
    assert!(svg_text.starts_with("<svg"));
    assert!(svg_text.contains("</svg>"));

    let output = tiny_overrides(
        polymap()
            .args(["oracle-eval", "--split", "train"])
            .arg("--data")
            .arg(&data),
    )
    .output()
    .unwrap();
    assert!(output.status.success(), "oracle-eval failed");
    assert!(String::from_utf8_lossy(&output.stdout).contains("1.000"));
}

#[test]
fn config_errors_exit_with_code_2() {
    let out = polymap()
        .args(["gen-data", "--n", "1", "--out", "/tmp/unused"])
        .args(["-S", "no_such_key=1"])
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(2), "{out:?}");

    let out = polymap()
        .args(["train", "--data", "/tmp/unused", "--out", "/tmp/unused2"])
        .args(["--stage", "seventeen"])
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(2), "{out:?}");
}

#[test]
fn data_errors_exit_with_code_3() {
    let dir = tempfile::tempdir().unwrap();
    let missing = dir.path().join("no_dataset_here");
    let out = polymap()
        .args(["oracle-eval", "--split", "train"])
        .arg("--data")
        .arg(&missing)
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(3), "{out:?}");
}

#[test]
fn numeric_failures_exit_with_code_4() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("data");
    let run = dir.path().join("run");
    let status = tiny_overrides(
        polymap()
            .args(["gen-data", "--n", "2", "--seed", "3", "--val-frac", "0.0"])
            .arg("--out")
            .arg(&data),
    )
    .status()
    .unwrap();
    assert!(status.success());

    // an absurd learning rate with no warmup detonates the loss
    let out = tiny_overrides(
        polymap()
            .args(["train", "--stage", "1"])
            .args(["-S", "base_lr=1e12", "-S", "warmup_steps=0", "-S", "steps_stage1=30"])
            .arg("--data")
            .arg(&data)
            .arg("--out")
            .arg(&run),
    )
    .output()
    .unwrap();
    assert_eq!(out.status.code(), Some(4), "{out:?}");
    assert!(
        String::from_utf8_lossy(&out.stderr).contains("finite"),
        "{out:?}"
    );
}

#[test]
fn render_without_checkpoint_draws_ground_truth_only(){
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("data");
    let svg = dir.path().join("gt.svg");
    let status = tiny_overrides(
        polymap()
            .args(["gen-data", "--n", "1", "--seed", "5", "--val-frac", "0.0"])
            .arg("--out")
            .arg(&data),
    )
    .status()
    .unwrap();
    assert!(status.success());
    let status = polymap()
        .args(["render", "--scene", "scene_00000"])
        .arg("--data")
        .arg(&data)
        .arg("--out")
        .arg(&svg)
        .status()
        .unwrap();
    assert!(status.success());
    assert!(Path::new(&svg).exists());
}
