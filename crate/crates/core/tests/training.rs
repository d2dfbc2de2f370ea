use std::fs;
use std::path::Path;

use agct_core::losses::{read_loss_log, LossWeights};
use agct_core::networks::{FeatureExtractor, SegNet};
use agct_core::phantoms::{HU_MAX, HU_MIN};
use agct_core::training::*;
use agct_core::Error;

fn blob(dir: &Path, epoch: usize) -> Vec<u8> {
    fs::read(dir.join(CHECKPOINT_DIR).join(format!("epoch_{epoch:04}.bin"))).unwrap()
}

fn frozen_seg(cfg: &RunConfig) -> SegNet {
    let mut s = SegNet::new(&cfg.networks.segnet).unwrap();
    s.freeze();
    s
}

#[test]
fn toy_run_halves_the_voxel_loss_in_50_steps() {
    let dir = tempfile::tempdir().unwrap();
    let data = toy_dataset(8, 4, 1).unwrap();
    let mut cfg = RunConfig::toy(dir.path());
    cfg.loss.weights = LossWeights::baseline();
    cfg.gan.epochs = 25;
    let report = GanTrainer::new(cfg, &data, None, None).unwrap().run(false, |_, _| {}).unwrap();
    assert_eq!(report.steps, 50);
    let log = read_loss_log(&dir.path().join(LOSS_LOG)).unwrap();
    assert_eq!(log.len(), 50);
    let (first, last) = (log[0].r, log[49].r);
    eprintln!("voxel loss {first} -> {last}");
    assert!(last <= 0.5 * first, "voxel loss {first} -> {last}");
    for b in &log {
        assert!((b.total - b.weighted_total(&LossWeights::baseline())).abs() < 1e-12);
    }
}

#[test]
fn deterministic_runs_and_resume_are_bit_identical() {
    let data = toy_dataset(8, 3, 2).unwrap();
    let seg = frozen_seg(&RunConfig::toy(Path::new(".")));
    let fx = FeatureExtractor::new(&RunConfig::toy(Path::new(".")).networks.features).unwrap();
    let run = |dir: &Path, epochs: usize, resume: bool| {
        let mut cfg = RunConfig::toy(dir);
        cfg.gan.epochs = epochs;
        GanTrainer::new(cfg, &data, Some(&seg), Some(&fx)).unwrap().run(resume, |_, _| {}).unwrap()
    };
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    let c = tempfile::tempdir().unwrap();
    let seg_before = seg.params().checksum();
    let fx_before = fx.params().checksum();
    run(a.path(), 10, false);
    run(b.path(), 1, false);
    assert_eq!(blob(a.path(), 1), blob(b.path(), 1));

    run(c.path(), 5, false);
    let r = run(c.path(), 10, true);
    assert_eq!(r.epochs_completed, 10);
    assert_eq!(blob(a.path(), 10), blob(c.path(), 10));
    assert_eq!(fs::read(a.path().join(LOSS_LOG)).unwrap(), fs::read(c.path().join(LOSS_LOG)).unwrap());
    assert_eq!(seg.params().checksum(), seg_before);
    assert_eq!(fx.params().checksum(), fx_before);
    assert!(seg.invocations() > 0 && fx.invocations() > 0);
}

#[test]
fn baseline_run_never_invokes_frozen_networks() {
    let dir = tempfile::tempdir().unwrap();
    let data = toy_dataset(8, 2, 3).unwrap();
    let mut cfg = RunConfig::toy(dir.path());
    cfg.loss.weights = LossWeights::baseline();
    cfg.gan.epochs = 2;
    let seg = frozen_seg(&cfg);
    let fx = FeatureExtractor::new(&cfg.networks.features).unwrap();
    GanTrainer::new(cfg, &data, Some(&seg), Some(&fx)).unwrap().run(false, |_, _| {}).unwrap();
    assert_eq!((seg.invocations(), fx.invocations()), (0, 0));
}

#[test]
fn resume_rejects_a_changed_configuration() {
    let dir = tempfile::tempdir().unwrap();
    let data = toy_dataset(8, 2, 4).unwrap();
    let mut cfg = RunConfig::toy(dir.path());
    cfg.loss.weights = LossWeights::baseline();
    cfg.gan.epochs = 1;
    GanTrainer::new(cfg.clone(), &data, None, None).unwrap().run(false, |_, _| {}).unwrap();
    cfg.gan.epochs = 2;
    cfg.gan.lr = 1e-3;
    let err = GanTrainer::new(cfg, &data, None, None).unwrap().run(true, |_, _| {}).unwrap_err();
    assert!(matches!(err, Error::Resume(_)), "{err}");
}

#[test]
fn non_finite_loss_keeps_the_last_good_checkpoint() {
    let dir = tempfile::tempdir().unwrap();
    let data = toy_dataset(8, 2, 5).unwrap();
    let mut cfg = RunConfig::toy(dir.path());
    cfg.loss.weights = LossWeights::baseline();
    cfg.gan.epochs = 1;
    GanTrainer::new(cfg.clone(), &data, None, None).unwrap().run(false, |_, _| {}).unwrap();
    let good = blob(dir.path(), 1);

    let ReconDataset::Memory { geometry, grid, mut samples } = data else { unreachable!() };
    for s in &mut samples {
        s.y[0] = f64::NAN;
    }
    let bad = ReconDataset::Memory { geometry, grid, samples };
    cfg.gan.epochs = 2;
    let err = GanTrainer::new(cfg, &bad, None, None).unwrap().run(true, |_, _| {}).unwrap_err();
    assert!(matches!(err, Error::NonFiniteLoss { term: "dis", .. }), "{err}");
    assert!(!dir.path().join(CHECKPOINT_DIR).join("epoch_0002.json").exists());
    assert_eq!(resolve_checkpoint(dir.path()).unwrap(), dir.path().join(CHECKPOINT_DIR).join("epoch_0001.json"));
    assert_eq!(blob(dir.path(), 1), good);
}

#[test]
fn trainer_requires_a_frozen_segmentation_network() {
    let data = toy_dataset(8, 1, 6).unwrap();
    let cfg = RunConfig::toy(Path::new("unused"));
    let seg = SegNet::new(&cfg.networks.segnet).unwrap();
    let fx = FeatureExtractor::new(&cfg.networks.features).unwrap();
    assert!(matches!(GanTrainer::new(cfg, &data, Some(&seg), Some(&fx)), Err(Error::Config { .. })));
}

#[test]
fn segnet_pretraining_smoke_and_reload() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = RunConfig::toy(dir.path());
    let train = toy_seg_samples(8, 2, 7).unwrap();
    let test = toy_seg_samples(8, 1, 8).unwrap();
    let mut seg_cfg = cfg.seg.clone();
    seg_cfg.epochs = 1;
    let (net, report) = pretrain_segnet_on(&seg_cfg, &cfg.networks.segnet, &train, &test, [8, 8, 8], dir.path(), |_| {}).unwrap();
    assert!(net.is_frozen());
    assert_eq!(report.history.len(), 1);
    assert!(report.checkpoint.exists() && dir.path().join(SEG_LAST).exists() && dir.path().join(SEG_HISTORY).exists());
    let back = load_segnet(&report.checkpoint).unwrap();
    assert_eq!(back.params().checksum(), report.checksum);
    assert!((0.0..=1.0).contains(&report.best_dsc));

    // Corrupting a value breaks the stored checksum.
    let bin = report.checkpoint.with_extension("bin");
    let mut bytes = fs::read(&bin).unwrap();
    bytes[3] ^= 1;
    fs::write(&bin, bytes).unwrap();
    assert!(matches!(load_segnet(&report.checkpoint), Err(Error::FingerprintMismatch { .. })));
}

#[test]
fn reconstruction_is_bounded_and_deterministic() {
    let dir = tempfile::tempdir().unwrap();
    let data = toy_dataset(8, 2, 9).unwrap();
    let mut cfg = RunConfig::toy(dir.path());
    cfg.loss.weights = LossWeights::baseline();
    cfg.gan.epochs = 1;
    GanTrainer::new(cfg.clone(), &data, None, None).unwrap().run(false, |_, _| {}).unwrap();
    let (gen, info) = load_generator(dir.path()).unwrap();
    assert_eq!(info.epoch, 1);
    let seg = frozen_seg(&cfg);
    let s = data.get(0).unwrap();
    let (v, m) = reconstruct(&gen, &seg, &s.x_ap, &s.x_lat).unwrap();
    assert_eq!(v.grid, [8, 8, 8]);
    assert!(v.data.iter().all(|h| (HU_MIN..=HU_MAX).contains(h)));
    assert!(m.data.iter().all(|&l| l < 4));
    let (v2, m2) = reconstruct(&gen, &seg, &s.x_ap, &s.x_lat).unwrap();
    assert_eq!(v, v2);
    assert_eq!(m, m2);
    assert!(reconstruct(&gen, &seg, &s.x_ap[1..], &s.x_lat).is_err());
}
