use std::fs;
use std::path::{Path, PathBuf};
use std::process::Command;

use agct_cli::config::PipelineConfig;
use agct_cli::SNAPSHOT;
use agct_core::evaluation::{read_report_rows, REPORT_CSV, SWEEP_SUMMARY};
use agct_core::fanbeam::GeometryConfig;
use agct_core::phantoms::{generate_phantom, write_volume, MANIFEST_FILE};
use agct_core::training::{RunConfig, CHECKPOINT_DIR};

fn agct(args: &[&str]) -> (i32, String) {
    let out = Command::new(env!("CARGO_BIN_EXE_agct")).args(args).env("AGCT_THREADS", "1").output().unwrap();
    (out.status.code().unwrap(), String::from_utf8_lossy(&out.stderr).into_owned())
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

/// 16^3 smoke configuration rooted at `dir`.
fn smoke_config(dir: &Path) -> PathBuf {
    let mut cfg = PipelineConfig::default();
    cfg.data.seed = 3;
    cfg.data.geometry = GeometryConfig::desk(16);
    cfg.data.recon_train = 2;
    cfg.data.recon_test = 2;
    cfg.data.seg_train = 2;
    cfg.data.seg_test = 1;
    cfg.run = RunConfig::toy(&dir.join("run"));
    cfg.run.corpus = dir.join("corpus").join(MANIFEST_FILE);
    cfg.run.gan.epochs = 1;
    cfg.run.seg.epochs = 1;
    let path = dir.join("smoke.json");
    fs::write(&path, cfg.to_json()).unwrap();
    path
}

#[test]
fn staged_pipeline_runs_end_to_end() {
    let dir = tempfile::tempdir().unwrap();
    let c = smoke_config(dir.path());
    let c = s(&c);
    for stage in ["gen-data", "pretrain-seg", "train", "evaluate"] {
        let (code, err) = agct(&[stage, "--config", c]);
        assert_eq!(code, 0, "{stage}: {err}");
    }
    let run = dir.path().join("run");
    for snap in [dir.path().join("corpus"), run.join("segnet"), run.clone(), run.join("eval")] {
        assert!(snap.join(SNAPSHOT).exists(), "{}", snap.display());
    }
    let rows = read_report_rows(&run.join("eval").join(REPORT_CSV)).unwrap();
    assert_eq!(rows.len(), 2 + 1);

    // Completed stages refuse to overwrite without the flag.
    for stage in ["gen-data", "pretrain-seg", "train", "evaluate"] {
        let (code, err) = agct(&[stage, "--config", c]);
        assert_eq!(code, 1, "{stage}");
        assert!(err.contains("--overwrite"), "{err}");
    }

    // Deterministic re-runs reproduce their outputs byte for byte.
    let manifest = fs::read(dir.path().join("corpus").join(MANIFEST_FILE)).unwrap();
    let blob = run.join(CHECKPOINT_DIR).join("epoch_0001.bin");
    let before = fs::read(&blob).unwrap();
    assert_eq!(agct(&["gen-data", "--config", c, "--overwrite"]).0, 0);
    assert_eq!(agct(&["train", "--config", c, "--overwrite", "--deterministic"]).0, 0);
    assert_eq!(fs::read(dir.path().join("corpus").join(MANIFEST_FILE)).unwrap(), manifest);
    assert_eq!(fs::read(&blob).unwrap(), before);

    // Resuming for one more epoch extends the run.
    assert_eq!(agct(&["train", "--config", c, "--resume", "--set", "run.gan.epochs=2"]).0, 0);
    assert!(run.join(CHECKPOINT_DIR).join("epoch_0002.bin").exists());
}

#[test]
fn usage_and_validation_errors_exit_with_one_before_any_work() {
    let dir = tempfile::tempdir().unwrap();
    let c = smoke_config(dir.path());
    let c = s(&c);
    assert_eq!(agct(&["fly"]).0, 1);
    assert_eq!(agct(&["train"]).0, 1);
    let (code, err) = agct(&["gen-data", "--config", c, "--set", "data.seeed=4"]);
    assert_eq!(code, 1);
    assert!(err.contains("data.seeed"), "{err}");
    let (code, err) = agct(&["train", "--config", c, "--set", "run.gan.lr=-1"]);
    assert_eq!(code, 1);
    assert!(err.contains("gan.lr"), "{err}");
    assert_eq!(agct(&["gen-data", "--config", "/nonexistent.json"]).0, 1);
    assert!(!dir.path().join("corpus").exists() && !dir.path().join("run").exists());
    assert_eq!(agct(&["--help"]).0, 0);
}

#[test]
fn runtime_failures_exit_with_two() {
    let dir = tempfile::tempdir().unwrap();
    let c = smoke_config(dir.path());
    let c = s(&c);
    assert_eq!(agct(&["gen-data", "--config", c]).0, 0);
    assert_eq!(agct(&["pretrain-seg", "--config", c]).0, 0);
    let blob = dir.path().join("run").join("segnet").join("segnet_best.bin");
    let bytes = fs::read(&blob).unwrap();
    fs::write(&blob, &bytes[..bytes.len() / 2]).unwrap();
    let (code, err) = agct(&["train", "--config", c]);
    assert_eq!(code, 2, "{err}");
    assert!(err.contains("segnet_best"), "{err}");
}

#[test]
fn project_then_reconstruct() {
    let dir = tempfile::tempdir().unwrap();
    let c = smoke_config(dir.path());
    let c = s(&c);
    let g = GeometryConfig::desk(16);
    let gpath = dir.path().join("geometry.json");
    fs::write(&gpath, serde_json::to_vec(&g).unwrap()).unwrap();
    let (v, _) = generate_phantom(77, 16, 16, g.voxel_pitch_mm).unwrap();
    let vpath = dir.path().join("phantom.json");
    write_volume(&v, &vpath).unwrap();
    let proj = dir.path().join("proj");
    let (code, err) = agct(&["project", "--volume", s(&vpath), "--geometry", s(&gpath), "--out", s(&proj)]);
    assert_eq!(code, 0, "{err}");
    for f in ["ap.json", "lat.json", "ap.pgm", "lat.pgm", SNAPSHOT] {
        assert!(proj.join(f).exists(), "{f}");
    }
    assert!(fs::read(proj.join("ap.pgm")).unwrap().starts_with(b"P5\n"));

    for stage in ["gen-data", "pretrain-seg", "train"] {
        assert_eq!(agct(&[stage, "--config", c]).0, 0);
    }
    let out = dir.path().join("recon");
    let run = dir.path().join("run");
    let (code, err) = agct(&[
        "reconstruct",
        "--checkpoint",
        s(&run),
        "--ap",
        s(&proj.join("ap.json")),
        "--lat",
        s(&proj.join("lat.json")),
        "--out",
        s(&out),
    ]);
    assert_eq!(code, 0, "{err}");
    for f in ["volume.json", "mask.json", "volume_axial.pgm", "mask_axial.pgm", SNAPSHOT] {
        assert!(out.join(f).exists(), "{f}");
    }
}

#[test]
fn sweep_produces_one_report_per_grid_cell() {
    let dir = tempfile::tempdir().unwrap();
    let c = smoke_config(dir.path());
    let c = s(&c);
    assert_eq!(agct(&["gen-data", "--config", c]).0, 0);
    assert_eq!(agct(&["pretrain-seg", "--config", c]).0, 0);
    let (code, err) = agct(&["sweep", "--config", c, "--lambda-s", "0,2", "--lambda-p", "0,0.5"]);
    assert_eq!(code, 0, "{err}");
    let out = dir.path().join("run").join("sweep");
    let summary = fs::read_to_string(out.join(SWEEP_SUMMARY)).unwrap();
    let cells: Vec<(f64, f64)> = summary
        .lines()
        .skip(1)
        .map(|l| {
            let mut f = l.split(',');
            (f.next().unwrap().parse().unwrap(), f.next().unwrap().parse().unwrap())
        })
        .collect();
    assert_eq!(cells, vec![(0.0, 0.0), (0.0, 0.5), (2.0, 0.0), (2.0, 0.5)]);
    let reports = fs::read_dir(&out)
        .unwrap()
        .filter(|e| e.as_ref().unwrap().path().join("eval").join(REPORT_CSV).exists())
        .count();
    assert_eq!(reports, 4);
    assert_eq!(agct(&["sweep", "--config", c, "--lambda-s", "0,2", "--lambda-p", "0,0.5"]).0, 1);
}
