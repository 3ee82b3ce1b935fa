//! Black-box tests of the `gazemap` binary: single stages composed by hand,
//! the all-in-one pipeline subcommand, and the failure exit code.

use std::path::{Path, PathBuf};
use std::process::{Command, Output};

fn fixtures() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../../fixtures")
}

fn run(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_gazemap"))
        .args(args)
        .output()
        .expect("binary should spawn")
}

fn run_ok(args: &[&str]) -> Output {
    let out = run(args);
    assert!(
        out.status.success(),
        "gazemap {:?} failed:\n{}",
        args,
        String::from_utf8_lossy(&out.stderr)
    );
    out
}

fn count_files(dir: &Path, ext: &str) -> usize {
    std::fs::read_dir(dir)
        .unwrap()
        .filter(|e| {
            e.as_ref().unwrap().path().extension().is_some_and(|x| x == ext)
        })
        .count()
}

#[test]
fn stages_compose_through_files() {
    let fx = fixtures();
    let tmp = tempfile::tempdir().unwrap();
    let path = |name: &str| tmp.path().join(name).to_string_lossy().into_owned();

    run_ok(&[
        "extract-graph",
        "--osm",
        fx.join("grid_town.osm").to_str().unwrap(),
        "--out",
        &path("graph.json"),
    ]);
    assert!(tmp.path().join("graph.json").is_file());

    run_ok(&["rasterize", "--graph", &path("graph.json"), "--out", &path("map.pgm")]);
    assert!(tmp.path().join("map.pgm").is_file());
    assert!(tmp.path().join("map.json").is_file(), "geo sidecar expected");

    run_ok(&[
        "match",
        "--graph",
        &path("graph.json"),
        "--trace",
        fx.join("trace.csv").to_str().unwrap(),
        "--out",
        &path("matched.csv"),
        "--n-frames",
        "121",
    ]);
    let matched = std::fs::read_to_string(tmp.path().join("matched.csv")).unwrap();
    assert_eq!(matched.lines().count(), 122, "header plus one row per frame");

    run_ok(&[
        "segments",
        "--labels",
        fx.join("labels.csv").to_str().unwrap(),
        "--out",
        &path("segments.json"),
    ]);

    run_ok(&[
        "sample",
        "--raster",
        &path("map.pgm"),
        "--matched",
        &path("matched.csv"),
        "--segments",
        &path("segments.json"),
        "--out-dir",
        &path("patches"),
    ]);
    assert_eq!(count_files(&tmp.path().join("patches"), "bin"), 13);
}

#[test]
fn pipeline_subcommand_writes_predictions_and_report() {
    let fx = fixtures();
    let tmp = tempfile::tempdir().unwrap();
    let out_dir = tmp.path().join("out");

    let out = run_ok(&[
        "--config",
        fx.join("config.toml").to_str().unwrap(),
        "pipeline",
        "--out-dir",
        out_dir.to_str().unwrap(),
    ]);

    // Stdout carries the overall metrics as one JSON object.
    let stdout = String::from_utf8(out.stdout).unwrap();
    let overall: serde_json::Value = serde_json::from_str(stdout.trim()).unwrap();
    for key in ["kld", "cc", "nss", "sim"] {
        assert!(overall.get(key).is_some(), "missing {key} in {overall}");
    }

    assert_eq!(count_files(&out_dir.join("preds"), "bin"), 13);
    let report: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(out_dir.join("report.json")).unwrap())
            .unwrap();
    assert_eq!(report["evaluated"], 13);
    assert_eq!(report["missing_predictions"].as_array().unwrap().len(), 0);
}

#[test]
fn evaluate_exits_nonzero_when_predictions_missing() {
    let fx = fixtures();
    let tmp = tempfile::tempdir().unwrap();
    let path = |name: &str| tmp.path().join(name).to_string_lossy().into_owned();

    run_ok(&[
        "segments",
        "--labels",
        fx.join("labels.csv").to_str().unwrap(),
        "--out",
        &path("segments.json"),
    ]);
    std::fs::create_dir(tmp.path().join("empty")).unwrap();

    let out = run(&[
        "evaluate",
        "--pred-dir",
        &path("empty"),
        "--gt-dir",
        fx.join("gt").to_str().unwrap(),
        "--labels",
        fx.join("labels.csv").to_str().unwrap(),
        "--segments",
        &path("segments.json"),
        "--out",
        &path("report.json"),
    ]);
    assert!(!out.status.success(), "missing predictions must fail the run");
    assert!(tmp.path().join("report.json").is_file(), "report still written");
}
