//! End-to-end tests of the `poseforge` binary: exit codes, error JSON,
//! artifact layout, and the gen → solve → eval pipeline.

use std::fs;
use std::path::Path;
use std::process::{Command, Output};

fn run(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_poseforge"))
        .args(args)
        .output()
        .expect("binary should spawn")
}

fn stdout(out: &Output) -> String {
    String::from_utf8_lossy(&out.stdout).into_owned()
}

fn stderr(out: &Output) -> String {
    String::from_utf8_lossy(&out.stderr).into_owned()
}

/// Parses a CSV written by the binary into (header, rows).
fn read_csv(path: &Path) -> (Vec<String>, Vec<Vec<String>>) {
    let text = fs::read_to_string(path).expect("csv exists");
    let mut lines = text.lines();
    let header = lines
        .next()
        .expect("non-empty csv")
        .split(',')
        .map(str::to_string)
        .collect();
    let rows = lines
        .map(|l| l.split(',').map(str::to_string).collect())
        .collect();
    (header, rows)
}

fn column(header: &[String], rows: &[Vec<String>], name: &str) -> Vec<f64> {
    let idx = header.iter().position(|h| h == name).expect("column exists");
    rows.iter().map(|r| r[idx].parse().expect("numeric cell")).collect()
}

#[test]
fn help_exits_zero_and_documents_defaults() {
    let out = run(&["--help"]);
    assert!(out.status.success());
    let text = stdout(&out);
    assert!(text.contains("gradcheck"), "lists subcommands");
    assert!(text.contains("--tolerance-profile"), "lists global flags");
    // Named defaults are part of the help epilogue.
    assert!(text.contains("0.7"), "documents the confidence threshold");
    assert!(text.contains("15%"), "documents the bbox expansion");
}

#[test]
fn usage_error_exits_one_with_error_json() {
    let out = run(&["gen", "--no-such-flag"]);
    assert_eq!(out.status.code(), Some(1));
    let err: serde_json::Value =
        serde_json::from_str(stderr(&out).trim()).expect("stderr is JSON");
    assert_eq!(err["error"]["kind"], "config");
}

#[test]
fn missing_fixtures_exits_one_with_error_json() {
    let dir = tempfile::tempdir().unwrap();
    let out = run(&["solve", "--out", dir.path().to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(1));
    let err: serde_json::Value =
        serde_json::from_str(stderr(&out).trim()).expect("stderr is JSON");
    assert_eq!(err["error"]["kind"], "invalid_input");
}

#[test]
fn invalid_config_field_exits_one() {
    let dir = tempfile::tempdir().unwrap();
    let config = dir.path().join("config.json");
    fs::write(&config, "{\"sedd\": 7}").unwrap();
    let out = run(&[
        "gen",
        "--out",
        dir.path().join("out").to_str().unwrap(),
        "--config",
        config.to_str().unwrap(),
    ]);
    assert_eq!(out.status.code(), Some(1));
    let err: serde_json::Value =
        serde_json::from_str(stderr(&out).trim()).expect("stderr is JSON");
    assert_eq!(err["error"]["kind"], "config");
}

#[test]
fn gen_solve_eval_pipeline_round_trips() {
    let dir = tempfile::tempdir().unwrap();
    let out_dir = dir.path().to_str().unwrap();

    let gen = run(&["gen", "--out", out_dir, "--seed", "42"]);
    assert!(gen.status.success(), "gen failed: {}", stderr(&gen));
    // Fixture directory layout plus manifest.
    let fixture_dir = dir.path().join("fixtures").join("fixture_000");
    for file in ["mesh.obj", "fixture.json", "gt_mask.pgm", "fields.pftc"] {
        assert!(fixture_dir.join(file).exists(), "missing {file}");
    }
    let manifest: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(dir.path().join("fixtures/manifest.json")).unwrap())
            .unwrap();
    assert_eq!(manifest["count"], 4);
    assert_eq!(manifest["fixtures"].as_array().unwrap().len(), 4);

    // Solving the noiseless fixture keypoints recovers ground truth within
    // round-trip tolerances.
    let solve = run(&["solve", "--out", out_dir]);
    assert!(solve.status.success(), "solve failed: {}", stderr(&solve));
    let (header, rows) = read_csv(&dir.path().join("solve.csv"));
    assert_eq!(rows.len(), 4);
    for rot in column(&header, &rows, "rot_err_rad") {
        assert!(rot < 1e-6, "rotation error {rot:e}");
    }
    for trans in column(&header, &rows, "trans_err") {
        assert!(trans < 1e-8, "translation error {trans:e}");
    }
    assert!(dir.path().join("poses/fixture_000_pose.json").exists());

    // Evaluating those solved poses scores recall 1.0 ...
    let config = dir.path().join("eval-config.json");
    fs::write(
        &config,
        format!(
            "{{\"eval\": {{\"predictions\": {:?}}}}}",
            dir.path().join("poses").to_str().unwrap()
        ),
    )
    .unwrap();
    let eval = run(&["eval", "--out", out_dir, "--config", config.to_str().unwrap()]);
    assert!(eval.status.success(), "eval failed: {}", stderr(&eval));
    let summary: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(dir.path().join("summary.json")).unwrap()).unwrap();
    assert_eq!(summary["recall"], 1.0);
    assert_eq!(summary["count"], 4);

    // ... as does the ground-truth baseline (predictions omitted).
    let eval_gt = run(&["eval", "--out", out_dir]);
    assert!(eval_gt.status.success());
    let summary: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(dir.path().join("summary.json")).unwrap()).unwrap();
    assert_eq!(summary["recall"], 1.0);
    assert_eq!(summary["mean_distance"], 0.0);
}

#[test]
fn resolved_config_is_echoed_with_overrides() {
    let dir = tempfile::tempdir().unwrap();
    let out = run(&["gradcheck", "--out", dir.path().to_str().unwrap(), "--seed", "7"]);
    assert!(out.status.success());
    let echoed: serde_json::Value = serde_json::from_str(
        &fs::read_to_string(dir.path().join("resolved-config.json")).unwrap(),
    )
    .unwrap();
    assert_eq!(echoed["seed"], 7);
    // The worker-thread count is execution detail, not a result parameter.
    assert!(echoed.get("threads").is_none());
}

#[test]
fn gen_is_deterministic_across_runs() {
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    for dir in [&a, &b] {
        let out = run(&["gen", "--out", dir.path().to_str().unwrap(), "--seed", "11"]);
        assert!(out.status.success());
    }
    for file in [
        "fixtures/manifest.json",
        "fixtures/fixture_002/fixture.json",
        "fixtures/fixture_002/gt_mask.pgm",
        "fixtures/fixture_002/fields.pftc",
    ] {
        let left = fs::read(a.path().join(file)).unwrap();
        let right = fs::read(b.path().join(file)).unwrap();
        assert_eq!(left, right, "{file} differs between identical runs");
    }
}

#[test]
fn gradcheck_passes_and_reports() {
    let dir = tempfile::tempdir().unwrap();
    let out = run(&["gradcheck", "--out", dir.path().to_str().unwrap()]);
    assert!(out.status.success(), "gradcheck failed: {}", stderr(&out));
    let text = stdout(&out);
    assert_eq!(text.matches("PASS").count(), 7, "seven checks: {text}");
    assert!(!text.contains("FAIL"));
    let report: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(dir.path().join("gradcheck.json")).unwrap())
            .unwrap();
    assert_eq!(report["failed"], 0);
    assert_eq!(report["checks"].as_array().unwrap().len(), 7);
}

#[test]
fn refine_reduces_pose_error() {
    let dir = tempfile::tempdir().unwrap();
    let out_dir = dir.path().to_str().unwrap();
    let config = dir.path().join("config.json");
    fs::write(
        &config,
        r#"{
            "gen": {"count": 1},
            "refine": {
                "stages": [{"steps": 40, "step_size": 0.1, "tau": 0.5}],
                "svg": true
            }
        }"#,
    )
    .unwrap();
    let gen = run(&["gen", "--out", out_dir, "--config", config.to_str().unwrap()]);
    assert!(gen.status.success(), "gen failed: {}", stderr(&gen));
    let refine = run(&["refine", "--out", out_dir, "--config", config.to_str().unwrap()]);
    assert!(refine.status.success(), "refine failed: {}", stderr(&refine));

    let (header, rows) = read_csv(&dir.path().join("refine.csv"));
    assert_eq!(rows.len(), 1);
    let rot_init = column(&header, &rows, "rot_err_init_deg")[0];
    let rot_final = column(&header, &rows, "rot_err_deg")[0];
    let loss_init = column(&header, &rows, "initial_loss")[0];
    let loss_final = column(&header, &rows, "final_loss")[0];
    assert!((rot_init - 5.0).abs() < 1e-9, "initial rotation error is the knob");
    assert!(rot_final < rot_init, "rotation error should shrink");
    assert!(loss_final < loss_init, "alignment loss should shrink");

    // Trace CSV and SVG plot exist; the trace is non-increasing.
    let (theader, trows) = read_csv(&dir.path().join("traces/fixture_000_seed0.csv"));
    let losses = column(&theader, &trows, "loss");
    assert!(losses.windows(2).all(|w| w[1] <= w[0]), "trace must not increase");
    let svg = fs::read_to_string(dir.path().join("plots/fixture_000_seed0.svg")).unwrap();
    assert!(svg.starts_with("<svg") && svg.contains("polyline"));
}

#[test]
fn pseudolabel_writes_rounds_and_iou_improves() {
    let dir = tempfile::tempdir().unwrap();
    let out_dir = dir.path().to_str().unwrap();
    let config = dir.path().join("config.json");
    fs::write(&config, r#"{"gen": {"count": 2}}"#).unwrap();
    let gen = run(&["gen", "--out", out_dir, "--config", config.to_str().unwrap()]);
    assert!(gen.status.success());
    let labeled = run(&["pseudolabel", "--out", out_dir, "--config", config.to_str().unwrap()]);
    assert!(labeled.status.success(), "pseudolabel failed: {}", stderr(&labeled));

    for round in 0..5 {
        for fixture in ["fixture_000", "fixture_001"] {
            let path = dir.path().join(format!("labels/round_{round}/{fixture}.pgm"));
            assert!(path.exists(), "missing {}", path.display());
        }
    }
    // The label PGMs parse back as trinary maps.
    let labels =
        poseforge_cli::formats::read_pgm_labels(&dir.path().join("labels/round_0/fixture_000.pgm"))
            .unwrap();
    assert_eq!(labels.width(), 128);

    let (_, rows) = read_csv(&dir.path().join("iou.csv"));
    assert_eq!(rows.len(), 5 * 2, "one row per round and fixture");
    let summary: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(dir.path().join("iou_summary.json")).unwrap())
            .unwrap();
    let means: Vec<f64> = summary["mean_iou_per_round"]
        .as_array()
        .unwrap()
        .iter()
        .map(|v| v.as_f64().unwrap())
        .collect();
    assert_eq!(means.len(), 5);
    assert!(
        means.windows(2).all(|w| w[1] >= w[0]),
        "decaying noise must not degrade IoU: {means:?}"
    );
}
