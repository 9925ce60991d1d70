//! End-to-end runs of the installed binary: every subcommand, the exit-code
//! contract, and the file formats the stages exchange.

use std::path::Path;
use std::process::{Command, Output};

fn vinecal(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_vinecal"))
        .current_dir(dir)
        .args(args)
        .output()
        .expect("binary runs")
}

fn assert_success(out: &Output) {
    assert!(
        out.status.success(),
        "stdout:\n{}\nstderr:\n{}",
        String::from_utf8_lossy(&out.stdout),
        String::from_utf8_lossy(&out.stderr)
    );
}

fn stderr(out: &Output) -> String {
    String::from_utf8_lossy(&out.stderr).into_owned()
}

#[test]
fn simulate_calibrate_predict_pipeline() {
    let tmp = tempfile::tempdir().unwrap();
    let dir = tmp.path();

    let out = vinecal(
        dir,
        &["simulate", "--out", "data", "--obs-side", "4", "--run-side", "3", "--test-count", "8", "--seed", "11"],
    );
    assert_success(&out);
    for f in ["obs.csv", "runs.csv", "test.csv", "truth.json", "sim.conf"] {
        assert!(dir.join("data").join(f).exists(), "{f} missing");
    }

    let out = vinecal(
        dir,
        &[
            "calibrate", "--obs", "data/obs.csv", "--runs", "data/runs.csv", "--preset", "sim",
            "--trunc", "2", "--variant", "rbcv", "--samples", "20", "--cv-samples", "5",
            "--max-iters", "150", "--seed", "4", "--out", "fit",
        ],
    );
    assert_success(&out);
    let posterior = std::fs::read_to_string(dir.join("fit/posterior.json")).unwrap();
    let summary: serde_json::Value = serde_json::from_str(&posterior).unwrap();
    assert_eq!(summary["level"], 2);
    assert_eq!(summary["coordinates"].as_array().unwrap().len(), 8);
    assert_eq!(summary["coordinates"][0]["name"], "theta1");
    let trace = std::fs::read_to_string(dir.join("fit/trace.csv")).unwrap();
    assert!(trace.starts_with("iteration,wall_seconds,mean_theta1,"));

    let out = vinecal(
        dir,
        &[
            "predict", "--obs", "data/obs.csv", "--runs", "data/runs.csv", "--test", "data/test.csv",
            "--posterior", "fit/posterior.json", "--preset", "sim", "--draws", "20", "--out", "pred",
        ],
    );
    assert_success(&out);
    let metrics: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(dir.join("pred/metrics.json")).unwrap()).unwrap();
    assert!(metrics["mse"].as_f64().unwrap() > 0.0);
    assert!(metrics["rmse"].as_f64().unwrap() > 0.0);
    assert_eq!(metrics["iterations"], 20);
    let preds = std::fs::read_to_string(dir.join("pred/predictions.csv")).unwrap();
    assert!(preds.starts_with("x1,x2,y_true,y_pred,residual"));
    assert_eq!(preds.lines().count(), 9);
}

#[test]
fn mh_chain_feeds_prediction() {
    let tmp = tempfile::tempdir().unwrap();
    let dir = tmp.path();
    assert_success(&vinecal(
        dir,
        &["simulate", "--out", "data", "--obs-side", "3", "--run-side", "2", "--test-count", "5", "--seed", "9"],
    ));
    let out = vinecal(
        dir,
        &[
            "mh", "--obs", "data/obs.csv", "--runs", "data/runs.csv", "--preset", "sim",
            "--iterations", "400", "--burn-in", "100", "--seed", "1", "--out", "mh",
        ],
    );
    assert_success(&out);
    let summary: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(dir.join("mh/mh_summary.json")).unwrap()).unwrap();
    assert_eq!(summary["iterations"], 500);
    let rate = summary["acceptance_rate"].as_f64().unwrap();
    assert!(rate > 0.0 && rate < 1.0);

    let out = vinecal(
        dir,
        &[
            "predict", "--obs", "data/obs.csv", "--runs", "data/runs.csv", "--test", "data/test.csv",
            "--chain", "mh/chain.csv", "--preset", "sim", "--burn-in", "100", "--thin", "20", "--out", "pred",
        ],
    );
    assert_success(&out);
    let metrics: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(dir.join("pred/metrics.json")).unwrap()).unwrap();
    assert_eq!(metrics["iterations"], 20);
}

#[test]
fn config_file_drives_calibration_and_flags_override() {
    let tmp = tempfile::tempdir().unwrap();
    let dir = tmp.path();
    assert_success(&vinecal(
        dir,
        &["simulate", "--out", "data", "--obs-side", "3", "--run-side", "2", "--test-count", "5", "--seed", "2"],
    ));
    std::fs::write(
        dir.join("run.conf"),
        "preset = sim\nvine = c\ntrunc = 2\nvariant = rb\nsamples = 15\nmax_iters = 60\nseed = 7\n",
    )
    .unwrap();
    let out = vinecal(
        dir,
        &[
            "calibrate", "--obs", "data/obs.csv", "--runs", "data/runs.csv",
            "--config", "run.conf", "--max-iters", "40", "--out", "fit",
        ],
    );
    assert_success(&out);
    let summary: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(dir.join("fit/posterior.json")).unwrap()).unwrap();
    assert_eq!(summary["vine"], "C");
    assert_eq!(summary["variant"]["name"], "rb");
    assert_eq!(summary["seed"], 7);
    assert_eq!(summary["iterations"], 40);
}

#[test]
fn unknown_config_key_is_a_runtime_error() {
    let tmp = tempfile::tempdir().unwrap();
    let dir = tmp.path();
    assert_success(&vinecal(
        dir,
        &["simulate", "--out", "data", "--obs-side", "3", "--run-side", "2", "--test-count", "5", "--seed", "2"],
    ));
    std::fs::write(dir.join("bad.conf"), "preset = sim\nsample = 15\n").unwrap();
    let out = vinecal(
        dir,
        &["calibrate", "--obs", "data/obs.csv", "--runs", "data/runs.csv", "--config", "bad.conf"],
    );
    assert_eq!(out.status.code(), Some(2));
    assert!(stderr(&out).contains("unknown configuration key 'sample'"), "{}", stderr(&out));
}

#[test]
fn prior_override_changes_the_fit_start() {
    let tmp = tempfile::tempdir().unwrap();
    let dir = tmp.path();
    assert_success(&vinecal(
        dir,
        &["simulate", "--out", "data", "--obs-side", "3", "--run-side", "2", "--test-count", "5", "--seed", "2"],
    ));
    std::fs::write(
        dir.join("run.conf"),
        "preset = sim\ntrunc = 1\nsamples = 10\nmax_iters = 1\neta = 0.001\nprior.theta1 = normal(0.9, 0.01)\n",
    )
    .unwrap();
    let out = vinecal(
        dir,
        &[
            "calibrate", "--obs", "data/obs.csv", "--runs", "data/runs.csv",
            "--config", "run.conf", "--out", "fit",
        ],
    );
    assert_success(&out);
    let summary: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(dir.join("fit/posterior.json")).unwrap()).unwrap();
    let theta1 = summary["coordinates"][0]["mean"].as_f64().unwrap();
    assert!((theta1 - 0.9).abs() < 0.2, "prior-match start should sit near the override, got {theta1}");

    std::fs::write(dir.join("bad.conf"), "preset = sim\nprior.nope = normal(0, 1)\n").unwrap();
    let out = vinecal(
        dir,
        &["calibrate", "--obs", "data/obs.csv", "--runs", "data/runs.csv", "--config", "bad.conf"],
    );
    assert_eq!(out.status.code(), Some(2));
    assert!(stderr(&out).contains("unknown prior coordinate 'nope'"), "{}", stderr(&out));
}

#[test]
fn usage_errors_exit_one() {
    let tmp = tempfile::tempdir().unwrap();
    let dir = tmp.path();
    let out = vinecal(dir, &["calibrate", "--obs", "x.csv", "--trunc", "0"]);
    assert_eq!(out.status.code(), Some(1));
    assert!(stderr(&out).contains("truncation level must be at least 1"), "{}", stderr(&out));

    let out = vinecal(dir, &["calibrate"]);
    assert_eq!(out.status.code(), Some(1));

    let out = vinecal(dir, &["--definitely-not-a-flag"]);
    assert_eq!(out.status.code(), Some(1));

    let out = vinecal(dir, &["--help"]);
    assert_eq!(out.status.code(), Some(0));
}

#[test]
fn runtime_errors_exit_two_with_context() {
    let tmp = tempfile::tempdir().unwrap();
    let dir = tmp.path();
    let out = vinecal(dir, &["calibrate", "--obs", "missing.csv"]);
    assert_eq!(out.status.code(), Some(2));
    assert!(stderr(&out).contains("missing.csv"), "{}", stderr(&out));

    std::fs::write(dir.join("mangled.csv"), "x1,x2,y\n1,2\n").unwrap();
    let out = vinecal(dir, &["calibrate", "--obs", "mangled.csv"]);
    assert_eq!(out.status.code(), Some(2));
    assert!(stderr(&out).contains("mangled.csv:2"), "{}", stderr(&out));

    assert_success(&vinecal(
        dir,
        &["simulate", "--out", "data", "--obs-side", "3", "--run-side", "2", "--test-count", "5", "--seed", "2"],
    ));
    let out = vinecal(
        dir,
        &[
            "predict", "--obs", "data/obs.csv", "--runs", "data/runs.csv", "--test", "data/test.csv",
            "--posterior", "never_fit.json", "--preset", "sim",
        ],
    );
    assert_eq!(out.status.code(), Some(2));
    assert!(stderr(&out).contains("no posterior summary found"), "{}", stderr(&out));
}

#[test]
fn posterior_layout_mismatch_is_rejected() {
    let tmp = tempfile::tempdir().unwrap();
    let dir = tmp.path();
    assert_success(&vinecal(
        dir,
        &["simulate", "--out", "data", "--obs-side", "3", "--run-side", "2", "--test-count", "5", "--seed", "2"],
    ));
    std::fs::write(
        dir.join("run.conf"),
        "preset = sim\ntrunc = 1\nsamples = 10\nmax_iters = 1\n",
    )
    .unwrap();
    assert_success(&vinecal(
        dir,
        &["calibrate", "--obs", "data/obs.csv", "--runs", "data/runs.csv", "--config", "run.conf", "--out", "fit"],
    ));
    std::fs::write(dir.join("pred.conf"), "preset = sim\nf_grouping = per_dim\n").unwrap();
    let out = vinecal(
        dir,
        &[
            "predict", "--obs", "data/obs.csv", "--runs", "data/runs.csv", "--test", "data/test.csv",
            "--posterior", "fit/posterior.json", "--config", "pred.conf",
        ],
    );
    assert_eq!(out.status.code(), Some(2), "{}", stderr(&out));
    assert!(stderr(&out).contains("does not match the model layout"), "{}", stderr(&out));
}

#[test]
fn simulate_accepts_a_total_grid_size() {
    let tmp = tempfile::tempdir().unwrap();
    let dir = tmp.path();
    let out = vinecal(dir, &["simulate", "--out", "data", "--n", "25", "--test-count", "4", "--seed", "1"]);
    assert_success(&out);
    let obs = std::fs::read_to_string(dir.join("data/obs.csv")).unwrap();
    let runs = std::fs::read_to_string(dir.join("data/runs.csv")).unwrap();
    assert_eq!(obs.lines().count() - 1 + runs.lines().count() - 1, 25);

    let out = vinecal(dir, &["simulate", "--out", "d2", "--n", "7"]);
    assert_eq!(out.status.code(), Some(2));
    assert!(stderr(&out).contains("two square grids"), "{}", stderr(&out));
}

#[test]
fn ldm_workflow_builds_fits_and_reports() {
    let tmp = tempfile::tempdir().unwrap();
    let dir = tmp.path();
    let out = vinecal(
        dir,
        &["ldm-build", "--synthetic", "30", "--runs", "90", "--seed", "3", "--out", "ldm"],
    );
    assert_success(&out);
    for f in ["obs.csv", "runs.csv", "nuclides.csv", "ldm.conf"] {
        assert!(dir.join("ldm").join(f).exists(), "{f} missing");
    }

    let out = vinecal(dir, &["ldm-ls", "--records", "ldm/nuclides.csv", "--out", "ldm/ls_fit.json"]);
    assert_success(&out);
    let text = String::from_utf8_lossy(&out.stdout).into_owned();
    assert!(text.contains("a_vol"), "{text}");
    assert!(text.contains("rmse"), "{text}");
    let report: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(dir.join("ldm/ls_fit.json")).unwrap()).unwrap();
    assert_eq!(report["coefficients"].as_array().unwrap().len(), 4);
    assert_eq!(report["records"], 30);

    let out = vinecal(dir, &["ldm-build", "--out", "x"]);
    assert_eq!(out.status.code(), Some(1), "source group is required");
}

#[test]
fn emitted_csvs_round_trip_through_the_parsers() {
    let tmp = tempfile::tempdir().unwrap();
    let dir = tmp.path();
    assert_success(&vinecal(
        dir,
        &["simulate", "--out", "data", "--obs-side", "3", "--run-side", "2", "--test-count", "5", "--seed", "8"],
    ));
    let obs = vinecal::data::read_observations_csv(dir.join("data/obs.csv")).unwrap();
    let runs = vinecal::data::read_runs_csv(dir.join("data/runs.csv")).unwrap();
    assert_eq!(obs.len(), 9);
    assert_eq!(runs.len(), 4);
    vinecal::data::write_observations_csv(dir.join("obs2.csv"), &obs).unwrap();
    let again = vinecal::data::read_observations_csv(dir.join("obs2.csv")).unwrap();
    for (a, b) in obs.iter().zip(&again) {
        assert_eq!(a.y.to_bits(), b.y.to_bits());
        for (u, v) in a.x.iter().zip(&b.x) {
            assert_eq!(u.to_bits(), v.to_bits());
        }
    }
}
