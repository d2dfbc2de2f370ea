//! Segmentation pretraining and the alternating adversarial loop with
//! resumable, atomically written checkpoints.

use std::fs;
use std::path::{Path, PathBuf};

use agct_tensor::{read_checkpoint, set_deterministic_reductions, write_checkpoint, Adam, AdamConfig, AdamState, ParamSet, Tape, Tensor};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use serde_json::json;
use sha2::{Digest, Sha256};

use crate::error::{io_err, Error, Result};
use crate::fanbeam::{build_geometry, cached_matrix, FanBeamGeometry, GeometryConfig, MatrixKind, Projector, View};
use crate::fsutil::write_atomic;
use crate::losses::{check_finite, lsgan_d_loss, soft_dice_foreground, GeneratorObjective, LossBreakdown, LossConfig, LossLog};
use crate::metrics::organ_dsc;
use crate::networks::{
    argmax_labels, bind_constant, Discriminator, DiscriminatorConfig, FeatureExtractor, FeatureExtractorConfig, Generator, GeneratorConfig, SegNet,
    SegNetConfig,
};
use crate::phantoms::{
    generate_phantom, hu_denormalize, hu_normalize, simulate_projection_pair, CorpusManifest, LabelMask, SampleEntry, SegSample, TrainingSample,
    Volume, MIN_GRID, NUM_LABELS,
};

pub const DESK_GAN_EPOCHS: usize = 30;
pub const PAPER_GAN_EPOCHS: usize = 100;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GanConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub seed: u64,
}

impl Default for GanConfig {
    fn default() -> Self {
        GanConfig {
            epochs: DESK_GAN_EPOCHS,
            batch_size: 4,
            lr: 2e-4,
            beta1: 0.5,
            beta2: 0.999,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SegTrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub seed: u64,
}

impl Default for SegTrainConfig {
    fn default() -> Self {
        SegTrainConfig {
            epochs: 200,
            batch_size: 2,
            lr: 5e-4,
            beta1: 0.9,
            beta2: 0.999,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct NetworkConfig {
    pub generator: GeneratorConfig,
    pub discriminator: DiscriminatorConfig,
    pub segnet: SegNetConfig,
    pub features: FeatureExtractorConfig,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    /// Corpus manifest.
    pub corpus: PathBuf,
    pub output_dir: PathBuf,
    pub loss: LossConfig,
    pub gan: GanConfig,
    pub seg: SegTrainConfig,
    /// When set, must describe the same scanner as the corpus.
    pub geometry: Option<GeometryConfig>,
    pub networks: NetworkConfig,
    /// Pretrained segmentation checkpoint; defaults to the one
    /// `pretrain-seg` writes under the output directory.
    pub segnet_checkpoint: Option<PathBuf>,
    pub matrix_cache: Option<PathBuf>,
    pub deterministic: bool,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            corpus: PathBuf::from("corpus/manifest.json"),
            output_dir: PathBuf::from("runs/default"),
            loss: LossConfig::default(),
            gan: GanConfig::default(),
            seg: SegTrainConfig::default(),
            geometry: None,
            networks: NetworkConfig::default(),
            segnet_checkpoint: None,
            matrix_cache: None,
            deterministic: true,
        }
    }
}

impl RunConfig {
    /// Small networks and a fast learning rate for `8^3`-scale smoke runs.
    pub fn toy(output_dir: &Path) -> Self {
        let mut c = RunConfig {
            output_dir: output_dir.to_path_buf(),
            ..RunConfig::default()
        };
        c.gan.batch_size = 2;
        c.gan.lr = 2e-3;
        c.networks.generator.encoder_channels = vec![4, 8, 8];
        c.networks.generator.decoder_channels = vec![8, 8, 4];
        c.networks.discriminator.channels = vec![4, 8, 8];
        c.networks.segnet.channels = [4, 4, 8];
        c.networks.features.channels = [4, 8, 8, 16];
        c.seg.batch_size = 1;
        c.seg.lr = 5e-3;
        c
    }
}

fn check_optimizer(prefix: &str, epochs: usize, batch: usize, lr: f64, b1: f64, b2: f64) -> Result<()> {
    if epochs == 0 {
        return Err(Error::config(format!("{prefix}.epochs"), "must be at least 1"));
    }
    if batch == 0 {
        return Err(Error::config(format!("{prefix}.batch_size"), "must be at least 1"));
    }
    if !(lr.is_finite() && lr > 0.0) {
        return Err(Error::config(format!("{prefix}.lr"), format!("must be > 0, got {lr}")));
    }
    for (name, b) in [("beta1", b1), ("beta2", b2)] {
        if !(0.0..1.0).contains(&b) {
            return Err(Error::config(format!("{prefix}.{name}"), format!("must lie in [0, 1), got {b}")));
        }
    }
    Ok(())
}

impl RunConfig {
    pub fn validate(&self) -> Result<()> {
        let g = &self.gan;
        check_optimizer("gan", g.epochs, g.batch_size, g.lr, g.beta1, g.beta2)?;
        let s = &self.seg;
        check_optimizer("seg", s.epochs, s.batch_size, s.lr, s.beta1, s.beta2)?;
        self.loss.weights.validate()
    }

    /// Hash of every setting that influences the adversarial run's
    /// trajectory. The epoch count and output location are excluded so a
    /// run can be extended or moved and still resumed.
    pub fn fingerprint(&self) -> String {
        let mut c = self.clone();
        c.gan.epochs = 0;
        c.output_dir = PathBuf::new();
        c.seg = SegTrainConfig::default();
        c.segnet_checkpoint = None;
        c.matrix_cache = None;
        c.corpus = PathBuf::new();
        let text = serde_json::to_vec(&c).expect("config serializes");
        hex::encode(Sha256::digest(&text))
    }

    pub fn segnet_path(&self) -> PathBuf {
        self.segnet_checkpoint.clone().unwrap_or_else(|| self.output_dir.join("segnet").join(SEG_BEST))
    }

    pub fn from_json(text: &str) -> Result<Self> {
        serde_json::from_str(text).map_err(|e| Error::config("config", e.to_string()))
    }
}

/// Reconstruction samples held in memory or read from a corpus on demand.
#[derive(Clone, Debug)]
pub enum ReconDataset {
    Memory {
        geometry: FanBeamGeometry,
        grid: [usize; 3],
        samples: Vec<TrainingSample>,
    },
    Corpus {
        manifest: Box<CorpusManifest>,
        root: PathBuf,
        entries: Vec<SampleEntry>,
    },
}

impl ReconDataset {
    pub fn train(manifest: &CorpusManifest, root: &Path) -> Self {
        ReconDataset::Corpus {
            manifest: Box::new(manifest.clone()),
            root: root.to_path_buf(),
            entries: manifest.recon.train.clone(),
        }
    }

    pub fn test(manifest: &CorpusManifest, root: &Path) -> Self {
        ReconDataset::Corpus {
            manifest: Box::new(manifest.clone()),
            root: root.to_path_buf(),
            entries: manifest.recon.test.clone(),
        }
    }

    pub fn len(&self) -> usize {
        match self {
            ReconDataset::Memory { samples, .. } => samples.len(),
            ReconDataset::Corpus { entries, .. } => entries.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn get(&self, i: usize) -> Result<TrainingSample> {
        match self {
            ReconDataset::Memory { samples, .. } => Ok(samples[i].clone()),
            ReconDataset::Corpus { manifest, root, entries } => manifest.load_training_sample(root, &entries[i]),
        }
    }

    pub fn geometry(&self) -> &FanBeamGeometry {
        match self {
            ReconDataset::Memory { geometry, .. } => geometry,
            ReconDataset::Corpus { manifest, .. } => &manifest.geometry,
        }
    }

    pub fn grid(&self) -> [usize; 3] {
        match self {
            ReconDataset::Memory { grid, .. } => *grid,
            ReconDataset::Corpus { manifest, .. } => manifest.grid,
        }
    }

    /// Seed of the corpus, or zero for in-memory data.
    pub fn corpus_seed(&self) -> u64 {
        match self {
            ReconDataset::Memory { .. } => 0,
            ReconDataset::Corpus { manifest, .. } => manifest.corpus_seed,
        }
    }
}

/// Averages `f x f x f` blocks; labels take the most frequent value.
fn downsample(v: &Volume, m: &LabelMask, f: usize) -> (Volume, LabelMask) {
    let [nx, ny, nz] = v.grid;
    let g = [nx / f, ny / f, nz / f];
    let mut data = vec![0.0; g[0] * g[1] * g[2]];
    let mut labels = vec![0u8; data.len()];
    for x in 0..g[0] {
        for y in 0..g[1] {
            for z in 0..g[2] {
                let mut sum = 0.0;
                let mut counts = [0usize; NUM_LABELS];
                for dx in 0..f {
                    for dy in 0..f {
                        for dz in 0..f {
                            let i = v.index(x * f + dx, y * f + dy, z * f + dz);
                            sum += v.data[i];
                            counts[m.data[i] as usize] += 1;
                        }
                    }
                }
                let o = (x * g[1] + y) * g[2] + z;
                data[o] = sum / (f * f * f) as f64;
                let best = (0..NUM_LABELS).max_by_key(|&l| (counts[l], std::cmp::Reverse(l))).unwrap();
                labels[o] = best as u8;
            }
        }
    }
    (
        Volume {
            data,
            grid: g,
            voxel_pitch_mm: v.voxel_pitch_mm * f as f64,
        },
        LabelMask { data: labels, grid: g },
    )
}

/// Phantom at any cubic grid size; grids below the phantom minimum are
/// block-averaged from a finer phantom.
pub fn small_phantom(seed: u64, n: usize, voxel_pitch_mm: f64) -> Result<(Volume, LabelMask)> {
    if n >= MIN_GRID {
        return generate_phantom(seed, n, n, voxel_pitch_mm);
    }
    if !MIN_GRID.is_multiple_of(n) {
        return Err(Error::config("grid", format!("{n} does not divide {MIN_GRID}")));
    }
    let f = MIN_GRID / n;
    let (v, m) = generate_phantom(seed, MIN_GRID, MIN_GRID, voxel_pitch_mm / f as f64)?;
    Ok(downsample(&v, &m, f))
}

/// In-memory reconstruction data on an `n^3` desk-style geometry.
pub fn toy_dataset(n: usize, count: usize, seed: u64) -> Result<ReconDataset> {
    let geometry = build_geometry(&GeometryConfig::desk(n), View::Ap)?;
    let projector = Projector::new(&geometry)?;
    let mut samples = Vec::with_capacity(count);
    for i in 0..count as u64 {
        let s = seed.wrapping_mul(0x9E37_79B9_7F4A_7C15).wrapping_add(i);
        let (v, m) = small_phantom(s, n, geometry.voxel_pitch_mm)?;
        let (ap, lat) = simulate_projection_pair(&v, &projector)?;
        samples.push(TrainingSample {
            id: format!("toy-{i:04}"),
            seed: s,
            x_ap: ap.into_data(),
            x_lat: lat.into_data(),
            y: hu_normalize(&v).0,
            mask: m.data,
        });
    }
    Ok(ReconDataset::Memory {
        geometry,
        grid: [n, n, n],
        samples,
    })
}

/// In-memory segmentation samples at `n^3`.
pub fn toy_seg_samples(n: usize, count: usize, seed: u64) -> Result<Vec<SegSample>> {
    (0..count as u64)
        .map(|i| {
            let s = seed.wrapping_mul(0x9E37_79B9_7F4A_7C15).wrapping_add(i);
            let (v, m) = small_phantom(s, n, 2.5)?;
            Ok(SegSample {
                id: format!("toy-seg-{i:04}"),
                y: hu_normalize(&v).0,
                mask: m.data,
            })
        })
        .collect()
}

/// Sample order of one epoch, a pure function of seed and epoch.
pub fn epoch_order(len: usize, seed: u64, epoch: usize) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..len).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ (epoch as u64 + 1).wrapping_mul(0xD1B5_4A32_D192_ED03));
    idx.shuffle(&mut rng);
    idx
}

fn volume_tensor(y: &[f64], grid: [usize; 3]) -> Result<Tensor> {
    Ok(Tensor::new(vec![1, 1, grid[0], grid[1], grid[2]], y.to_vec())?)
}

fn projection_tensor(x: &[f64], bins: usize, z: usize) -> Result<Tensor> {
    Ok(Tensor::new(vec![1, 1, bins, z], x.to_vec())?)
}

fn one_hot(mask: &[u8], grid: [usize; 3]) -> Result<Tensor> {
    let m = mask.len();
    let mut d = vec![0.0; NUM_LABELS * m];
    for (i, &l) in mask.iter().enumerate() {
        d[l as usize * m + i] = 1.0;
    }
    Ok(Tensor::new(vec![1, NUM_LABELS, grid[0], grid[1], grid[2]], d)?)
}

fn scaled_grads(params: &mut ParamSet, tape: &Tape, loss: agct_tensor::Var, vars: &[agct_tensor::Var]) -> Result<()> {
    let g = tape.backward(loss)?;
    params.accumulate(&g, vars)?;
    Ok(())
}

pub const SEG_BEST: &str = "segnet_best.json";
pub const SEG_LAST: &str = "segnet_last.json";
pub const SEG_HISTORY: &str = "segnet_history.csv";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SegEpoch {
    pub epoch: usize,
    pub train_loss: f64,
    pub dsc: [f64; 3],
    pub dsc_mean: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SegPretrainReport {
    pub best_epoch: usize,
    pub best_dsc: f64,
    pub history: Vec<SegEpoch>,
    pub checkpoint: PathBuf,
    pub checksum: String,
}

fn save_params(prefix: &str, p: &ParamSet, out: &mut Vec<(String, Tensor)>) {
    for (n, t) in p.iter() {
        out.push((format!("{prefix}{n}"), Tensor::new(t.shape().to_vec(), t.data().to_vec()).expect("valid")));
    }
}

fn write_tensors(path: &Path, tensors: &[(String, Tensor)], meta: serde_json::Value) -> Result<()> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir).map_err(io_err(dir))?;
    }
    let refs: Vec<(String, &Tensor)> = tensors.iter().map(|(n, t)| (n.clone(), t)).collect();
    Ok(write_checkpoint(path, &refs, meta)?)
}

fn take_prefixed(all: &[(String, Tensor)], prefix: &str) -> Vec<(String, Tensor)> {
    all.iter()
        .filter_map(|(n, t)| n.strip_prefix(prefix).map(|s| (s.to_string(), t.clone())))
        .collect()
}

pub fn save_segnet(path: &Path, net: &SegNet, extra: serde_json::Value) -> Result<()> {
    let mut t = Vec::new();
    save_params("", net.params(), &mut t);
    let meta = json!({
        "kind": "segnet",
        "config": net.config(),
        "checksum": net.params().checksum(),
        "info": extra,
    });
    write_tensors(path, &t, meta)
}

/// Loads a segmentation checkpoint as a frozen network, checking the
/// stored parameter checksum.
pub fn load_segnet(path: &Path) -> Result<SegNet> {
    let (m, tensors) = read_checkpoint(path)?;
    if m.metadata["kind"] != "segnet" {
        return Err(Error::config("segnet_checkpoint", format!("{} is not a segmentation checkpoint", path.display())));
    }
    let cfg: SegNetConfig =
        serde_json::from_value(m.metadata["config"].clone()).map_err(|e| Error::config("segnet_checkpoint", format!("{}: {e}", path.display())))?;
    let mut net = SegNet::new(&cfg)?;
    net.params_mut().load_values(&tensors)?;
    net.freeze();
    let want = m.metadata["checksum"].as_str().unwrap_or_default();
    let got = net.params().checksum();
    if want != got {
        return Err(Error::FingerprintMismatch {
            path: path.to_path_buf(),
            expected: want.to_string(),
            found: got,
        });
    }
    Ok(net)
}

/// Mean per-organ dice of `net`'s argmax labels over `samples`.
pub fn segnet_dsc(net: &SegNet, samples: &[SegSample], grid: [usize; 3]) -> Result<([f64; 3], f64)> {
    let mut acc = [0.0; 3];
    for s in samples {
        let p = net.predict(&volume_tensor(&s.y, grid)?)?;
        let labels = argmax_labels(p.data(), 1, NUM_LABELS);
        let (d, _) = organ_dsc(&labels, &s.mask)?;
        for k in 0..3 {
            acc[k] += d[k];
        }
    }
    let n = samples.len().max(1) as f64;
    let per = acc.map(|v| v / n);
    Ok((per, per.iter().sum::<f64>() / 3.0))
}

/// Trains a segmentation network with the foreground dice loss, keeping
/// the checkpoint with the best held-out mean dice. The returned network
/// is the best one, frozen.
pub fn pretrain_segnet_on(
    cfg: &SegTrainConfig,
    net_cfg: &SegNetConfig,
    train: &[SegSample],
    test: &[SegSample],
    grid: [usize; 3],
    out_dir: &Path,
    mut progress: impl FnMut(&SegEpoch),
) -> Result<(SegNet, SegPretrainReport)> {
    check_optimizer("seg", cfg.epochs, cfg.batch_size, cfg.lr, cfg.beta1, cfg.beta2)?;
    if train.is_empty() || test.is_empty() {
        return Err(Error::Corpus("segmentation corpus needs training and held-out samples".into()));
    }
    fs::create_dir_all(out_dir).map_err(io_err(out_dir))?;
    let mut net = SegNet::new(net_cfg)?;
    let mut adam = Adam::new(AdamConfig::new(cfg.lr, cfg.beta1, cfg.beta2), net.params());
    let mut history = Vec::with_capacity(cfg.epochs);
    let mut best: Option<(usize, f64)> = None;
    let best_path = out_dir.join(SEG_BEST);
    let mut csv = String::from("epoch,train_loss,dsc_lung,dsc_liver,dsc_bone,dsc_mean\n");
    for epoch in 1..=cfg.epochs {
        let order = epoch_order(train.len(), cfg.seed, epoch);
        let mut loss_sum = 0.0;
        for batch in order.chunks(cfg.batch_size) {
            let scale = 1.0 / batch.len() as f64;
            for &i in batch {
                let s = &train[i];
                let mut tape = Tape::new();
                let vars = net.params().bind(&mut tape);
                let x = tape.constant(volume_tensor(&s.y, grid)?);
                let target = tape.constant(one_hot(&s.mask, grid)?);
                let pred = net.forward(&mut tape, &vars, x)?;
                let loss = soft_dice_foreground(&mut tape, pred, target)?;
                let value = tape.scalar(loss);
                check_finite("seg", value, epoch as u64)?;
                loss_sum += value;
                let scaled = tape.mul_scalar(loss, scale);
                scaled_grads(net.params_mut(), &tape, scaled, &vars)?;
            }
            adam.step(net.params_mut())?;
        }
        let (dsc, dsc_mean) = segnet_dsc(&net, test, grid)?;
        let rec = SegEpoch {
            epoch,
            train_loss: loss_sum / train.len() as f64,
            dsc,
            dsc_mean,
        };
        csv.push_str(&format!("{},{:?},{:?},{:?},{:?},{:?}\n", epoch, rec.train_loss, dsc[0], dsc[1], dsc[2], dsc_mean));
        write_atomic(&out_dir.join(SEG_HISTORY), csv.as_bytes())?;
        progress(&rec);
        if best.is_none_or(|(_, b)| dsc_mean > b) {
            best = Some((epoch, dsc_mean));
            save_segnet(&best_path, &net, json!({"epoch": epoch, "held_out_dsc": dsc_mean, "seed": cfg.seed}))?;
        }
        history.push(rec);
    }
    save_segnet(&out_dir.join(SEG_LAST), &net, json!({"epoch": cfg.epochs, "seed": cfg.seed}))?;
    let (best_epoch, best_dsc) = best.expect("at least one epoch");
    let best_net = load_segnet(&best_path)?;
    let checksum = best_net.params().checksum();
    Ok((
        best_net,
        SegPretrainReport {
            best_epoch,
            best_dsc,
            history,
            checkpoint: best_path,
            checksum,
        },
    ))
}

fn load_manifest(cfg: &RunConfig) -> Result<(CorpusManifest, PathBuf)> {
    let (m, root) = CorpusManifest::load(&cfg.corpus)?;
    if let Some(g) = &cfg.geometry {
        let want = build_geometry(g, View::Ap)?;
        if want.fingerprint() != m.geometry.fingerprint() {
            return Err(Error::Geometry(format!(
                "run geometry {} does not match the corpus geometry {}",
                want.fingerprint(),
                m.geometry.fingerprint()
            )));
        }
    }
    Ok((m, root))
}

/// Pretrains the segmentation network on the corpus named by `cfg`,
/// writing into `<output_dir>/segnet`.
pub fn pretrain_segnet(cfg: &RunConfig, progress: impl FnMut(&SegEpoch)) -> Result<(SegNet, SegPretrainReport)> {
    cfg.validate()?;
    set_deterministic_reductions(cfg.deterministic);
    let (m, root) = load_manifest(cfg)?;
    let load = |entries: &[SampleEntry]| entries.iter().map(|e| m.load_seg_sample(&root, e)).collect::<Result<Vec<_>>>();
    let train = load(&m.seg.train)?;
    let test = load(&m.seg.test)?;
    pretrain_segnet_on(&cfg.seg, &cfg.networks.segnet, &train, &test, m.grid, &cfg.output_dir.join("segnet"), progress)
}

pub const CHECKPOINT_DIR: &str = "checkpoints";
pub const LATEST: &str = "latest.json";
pub const LOSS_LOG: &str = "loss_log.csv";

#[derive(Clone, Debug, Serialize, Deserialize)]
struct LatestPointer {
    epoch: usize,
    checkpoint: String,
}

/// Metadata stored with every adversarial checkpoint.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GanCheckpointInfo {
    pub kind: String,
    pub epoch: usize,
    pub step: u64,
    pub fingerprint: String,
    pub log_offset: u64,
    pub seed: u64,
    pub generator: GeneratorConfig,
    pub discriminator: DiscriminatorConfig,
    pub geometry: FanBeamGeometry,
    pub grid_z: usize,
    pub loss: LossConfig,
    pub seg_checksum: Option<String>,
    pub features_checksum: Option<String>,
    pub adam_g_steps: Vec<u64>,
    pub adam_d_steps: Vec<u64>,
}

fn push_adam(prefix: &str, adam: &Adam, out: &mut Vec<(String, Tensor)>) {
    for (i, s) in adam.states.iter().enumerate() {
        out.push((format!("{prefix}{i}.m"), Tensor::new(vec![s.m.len()], s.m.clone()).expect("valid")));
        out.push((format!("{prefix}{i}.v"), Tensor::new(vec![s.v.len()], s.v.clone()).expect("valid")));
    }
}

fn restore_adam(prefix: &str, adam: &mut Adam, all: &[(String, Tensor)], steps: &[u64]) -> Result<()> {
    let found = take_prefixed(all, prefix);
    if found.len() != 2 * adam.states.len() || steps.len() != adam.states.len() {
        return Err(Error::Resume(format!("optimizer state {prefix} has {} arrays, expected {}", found.len(), 2 * adam.states.len())));
    }
    for (i, s) in adam.states.iter_mut().enumerate() {
        let m = &found[2 * i].1;
        let v = &found[2 * i + 1].1;
        if m.len() != s.m.len() || v.len() != s.v.len() {
            return Err(Error::Resume(format!("optimizer state {prefix}{i} has the wrong length")));
        }
        *s = AdamState {
            m: m.data().to_vec(),
            v: v.data().to_vec(),
            t: steps[i],
            config: s.config,
        };
    }
    Ok(())
}

/// Everything a finished (or interrupted) adversarial run reports.
#[derive(Clone, Debug, PartialEq)]
pub struct GanReport {
    pub epochs_completed: usize,
    pub steps: u64,
    pub checkpoint: PathBuf,
    pub last: Option<LossBreakdown>,
}

pub struct GanTrainer<'a> {
    pub config: RunConfig,
    pub data: &'a ReconDataset,
    pub seg: Option<&'a SegNet>,
    pub features: Option<&'a FeatureExtractor>,
}

fn projector_for(cfg: &RunConfig, g: &FanBeamGeometry) -> Result<Projector> {
    match &cfg.matrix_cache {
        None => Projector::new(g),
        Some(dir) => Ok(Projector::from_matrices(
            cached_matrix(dir, MatrixKind::Forward, &g.with_view(View::Ap))?,
            cached_matrix(dir, MatrixKind::Forward, &g.with_view(View::Lat))?,
        )),
    }
}

impl<'a> GanTrainer<'a> {
    pub fn new(config: RunConfig, data: &'a ReconDataset, seg: Option<&'a SegNet>, features: Option<&'a FeatureExtractor>) -> Result<Self> {
        config.validate()?;
        if data.is_empty() {
            return Err(Error::Corpus("reconstruction training split is empty".into()));
        }
        if let Some(s) = seg {
            if !s.is_frozen() {
                return Err(Error::config("segnet", "the segmentation network must be frozen during adversarial training"));
            }
        }
        Ok(GanTrainer { config, data, seg, features })
    }

    fn checkpoint_dir(&self) -> PathBuf {
        self.config.output_dir.join(CHECKPOINT_DIR)
    }

    /// Runs (or resumes) training up to `config.gan.epochs`, writing a
    /// checkpoint after every epoch and a loss row after every step.
    pub fn run(&self, resume: bool, mut progress: impl FnMut(usize, &LossBreakdown)) -> Result<GanReport> {
        let cfg = &self.config;
        set_deterministic_reductions(cfg.deterministic);
        let geometry = self.data.geometry().with_view(View::Ap);
        let grid = self.data.grid();
        let projector = projector_for(cfg, &geometry)?;
        let mut gen = Generator::new(&cfg.networks.generator, &geometry, grid[2])?;
        let mut disc = Discriminator::new(&cfg.networks.discriminator)?;
        let adam_cfg = AdamConfig::new(cfg.gan.lr, cfg.gan.beta1, cfg.gan.beta2);
        let mut adam_g = Adam::new(adam_cfg, gen.params());
        let mut adam_d = Adam::new(adam_cfg, disc.params());
        let objective = GeneratorObjective::new(cfg.loss, &projector, self.seg, self.features)?;
        let fingerprint = cfg.fingerprint();
        let ckdir = self.checkpoint_dir();
        let log_path = cfg.output_dir.join(LOSS_LOG);

        let mut start_epoch = 1;
        let mut step = 0u64;
        let mut log = if resume && ckdir.join(LATEST).exists() {
            let latest: LatestPointer = read_json(&ckdir.join(LATEST))?;
            let path = ckdir.join(&latest.checkpoint);
            let (m, tensors) = read_checkpoint(&path)?;
            let info: GanCheckpointInfo =
                serde_json::from_value(m.metadata).map_err(|e| Error::Resume(format!("{}: {e}", path.display())))?;
            if info.fingerprint != fingerprint {
                return Err(Error::Resume(format!(
                    "{} was written by a different configuration (fingerprint {} vs {})",
                    path.display(),
                    info.fingerprint,
                    fingerprint
                )));
            }
            gen.params_mut().load_values(&take_prefixed(&tensors, "g/"))?;
            disc.params_mut().load_values(&take_prefixed(&tensors, "d/"))?;
            restore_adam("adam_g/", &mut adam_g, &tensors, &info.adam_g_steps)?;
            restore_adam("adam_d/", &mut adam_d, &tensors, &info.adam_d_steps)?;
            start_epoch = info.epoch + 1;
            step = info.step;
            LossLog::resume(&log_path, info.log_offset)?
        } else {
            LossLog::create(&log_path)?
        };

        let mut last = None;
        let mut checkpoint = ckdir.join(LATEST);
        for epoch in start_epoch..=cfg.gan.epochs {
            let order = epoch_order(self.data.len(), cfg.gan.seed, epoch);
            for batch in order.chunks(cfg.gan.batch_size) {
                step += 1;
                let b = self.train_step(&mut gen, &mut disc, &mut adam_g, &mut adam_d, &objective, batch, step)?;
                log.append(&b)?;
                progress(epoch, &b);
                last = Some(b);
            }
            let offset = log.offset()?;
            checkpoint = self.write_epoch(epoch, step, offset, &gen, &disc, &adam_g, &adam_d)?;
        }
        log.offset()?;
        Ok(GanReport {
            epochs_completed: cfg.gan.epochs.max(start_epoch - 1),
            steps: step,
            checkpoint,
            last,
        })
    }

    #[allow(clippy::too_many_arguments)]
    fn train_step(
        &self,
        gen: &mut Generator,
        disc: &mut Discriminator,
        adam_g: &mut Adam,
        adam_d: &mut Adam,
        objective: &GeneratorObjective,
        batch: &[usize],
        step: u64,
    ) -> Result<LossBreakdown> {
        let geometry = gen.geometry().clone();
        let grid = self.data.grid();
        let (u, z) = (geometry.n_detector_bins, grid[2]);
        let scale = 1.0 / batch.len() as f64;
        let samples: Vec<TrainingSample> = batch.iter().map(|&i| self.data.get(i)).collect::<Result<_>>()?;

        // Generator outputs for the discriminator step, without gradients.
        let mut fakes = Vec::with_capacity(samples.len());
        for s in &samples {
            let mut tape = Tape::new();
            let vars = bind_constant(gen.params(), &mut tape);
            let a = tape.constant(projection_tensor(&s.x_ap, u, z)?);
            let l = tape.constant(projection_tensor(&s.x_lat, u, z)?);
            let y = gen.forward(&mut tape, &vars, a, l)?;
            fakes.push(tape.to_tensor(y));
        }

        let mut dis = 0.0;
        for (s, fake) in samples.iter().zip(&fakes) {
            let mut tape = Tape::new();
            let vars = disc.params().bind(&mut tape);
            let real = tape.constant(volume_tensor(&s.y, grid)?);
            let fake = tape.constant(fake.clone());
            let dr = disc.forward(&mut tape, &vars, real)?;
            let df = disc.forward(&mut tape, &vars, fake)?;
            let loss = lsgan_d_loss(&mut tape, dr, df)?;
            let v = tape.scalar(loss);
            check_finite("dis", v, step)?;
            dis += v * scale;
            let scaled = tape.mul_scalar(loss, scale);
            scaled_grads(disc.params_mut(), &tape, scaled, &vars)?;
        }
        adam_d.step(disc.params_mut())?;

        let mut acc = LossBreakdown {
            step,
            dis,
            ..LossBreakdown::default()
        };
        for s in &samples {
            let mut tape = Tape::new();
            let gvars = gen.params().bind(&mut tape);
            let dvars = bind_constant(disc.params(), &mut tape);
            let a = tape.constant(projection_tensor(&s.x_ap, u, z)?);
            let l = tape.constant(projection_tensor(&s.x_lat, u, z)?);
            let y = tape.constant(volume_tensor(&s.y, grid)?);
            let y_hat = gen.forward(&mut tape, &gvars, a, l)?;
            let df = disc.forward(&mut tape, &dvars, y_hat)?;
            let (total, b) = objective.evaluate(&mut tape, df, y_hat, y, step)?;
            acc.gen += b.gen * scale;
            acc.r += b.r * scale;
            acc.proj += b.proj * scale;
            acc.s += b.s * scale;
            acc.p += b.p * scale;
            acc.total += b.total * scale;
            let scaled = tape.mul_scalar(total, scale);
            scaled_grads(gen.params_mut(), &tape, scaled, &gvars)?;
        }
        adam_g.step(gen.params_mut())?;
        Ok(acc)
    }

    #[allow(clippy::too_many_arguments)]
    fn write_epoch(&self, epoch: usize, step: u64, log_offset: u64, gen: &Generator, disc: &Discriminator, adam_g: &Adam, adam_d: &Adam) -> Result<PathBuf> {
        let ckdir = self.checkpoint_dir();
        let name = format!("epoch_{epoch:04}.json");
        let path = ckdir.join(&name);
        let mut tensors = Vec::new();
        save_params("g/", gen.params(), &mut tensors);
        save_params("d/", disc.params(), &mut tensors);
        push_adam("adam_g/", adam_g, &mut tensors);
        push_adam("adam_d/", adam_d, &mut tensors);
        let info = GanCheckpointInfo {
            kind: "gan".into(),
            epoch,
            step,
            fingerprint: self.config.fingerprint(),
            log_offset,
            seed: self.config.gan.seed,
            generator: gen.config().clone(),
            discriminator: disc.config().clone(),
            geometry: gen.geometry().clone(),
            grid_z: gen.grid_z(),
            loss: self.config.loss,
            seg_checksum: self.seg.map(|s| s.params().checksum()),
            features_checksum: self.features.map(|f| f.params().checksum()),
            adam_g_steps: adam_g.states.iter().map(|s| s.t).collect(),
            adam_d_steps: adam_d.states.iter().map(|s| s.t).collect(),
        };
        write_tensors(&path, &tensors, serde_json::to_value(&info).expect("serializable"))?;
        let pointer = LatestPointer { epoch, checkpoint: name };
        write_atomic(&ckdir.join(LATEST), &serde_json::to_vec_pretty(&pointer).expect("serializable"))?;
        Ok(path)
    }
}

fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T> {
    let bytes = fs::read(path).map_err(io_err(path))?;
    serde_json::from_slice(&bytes).map_err(|e| Error::CorruptHeader {
        path: path.to_path_buf(),
        reason: e.to_string(),
    })
}

/// Resolves a checkpoint argument: a run directory, a checkpoint directory
/// or a checkpoint manifest.
pub fn resolve_checkpoint(path: &Path) -> Result<PathBuf> {
    let dir = if path.join(CHECKPOINT_DIR).join(LATEST).exists() {
        path.join(CHECKPOINT_DIR)
    } else if path.join(LATEST).exists() {
        path.to_path_buf()
    } else {
        return Ok(path.to_path_buf());
    };
    let latest: LatestPointer = read_json(&dir.join(LATEST))?;
    Ok(dir.join(latest.checkpoint))
}

/// Generator restored from an adversarial checkpoint.
pub fn load_generator(path: &Path) -> Result<(Generator, GanCheckpointInfo)> {
    let path = resolve_checkpoint(path)?;
    let (m, tensors) = read_checkpoint(&path)?;
    let info: GanCheckpointInfo =
        serde_json::from_value(m.metadata).map_err(|e| Error::config("checkpoint", format!("{}: not a training checkpoint ({e})", path.display())))?;
    let mut gen = Generator::new(&info.generator, &info.geometry, info.grid_z)?;
    gen.params_mut().load_values(&take_prefixed(&tensors, "g/"))?;
    gen.params_mut().set_trainable(false);
    Ok((gen, info))
}

/// Runs the generator on one projection pair (`[U, Z]` each) and returns
/// the normalized `[1, 1, N, N, Z]` volume.
pub fn generate(gen: &Generator, x_ap: &[f64], x_lat: &[f64]) -> Result<Tensor> {
    let g = gen.geometry();
    let (u, z) = (g.n_detector_bins, gen.grid_z());
    for (name, x) in [("a.p.", x_ap), ("lateral", x_lat)] {
        if x.len() != u * z {
            return Err(Error::shape(format!("{name} projection"), &[u, z], &[x.len()]));
        }
    }
    let mut tape = Tape::new();
    let vars = bind_constant(gen.params(), &mut tape);
    let a = tape.constant(projection_tensor(x_ap, u, z)?);
    let l = tape.constant(projection_tensor(x_lat, u, z)?);
    let y = gen.forward(&mut tape, &vars, a, l)?;
    Ok(tape.to_tensor(y))
}

/// [`generate`] followed by segmentation, in Hounsfield units.
pub fn reconstruct(gen: &Generator, seg: &SegNet, x_ap: &[f64], x_lat: &[f64]) -> Result<(Volume, LabelMask)> {
    let t = generate(gen, x_ap, x_lat)?;
    let g = gen.geometry();
    let grid = [g.grid_n, g.grid_n, gen.grid_z()];
    let p = seg.predict(&t)?;
    let labels = argmax_labels(p.data(), 1, NUM_LABELS);
    let volume = hu_denormalize(t.data(), grid, g.voxel_pitch_mm)?;
    Ok((volume, LabelMask { data: labels, grid }))
}

/// Loads everything `cfg` names and runs adversarial training.
pub fn train_from_config(cfg: &RunConfig, resume: bool, progress: impl FnMut(usize, &LossBreakdown)) -> Result<GanReport> {
    cfg.validate()?;
    let (m, root) = load_manifest(cfg)?;
    let data = ReconDataset::train(&m, &root);
    let w = cfg.loss.weights;
    let seg = if w.lambda_s > 0.0 { Some(load_segnet(&cfg.segnet_path())?) } else { None };
    let fx = if w.lambda_p > 0.0 { Some(FeatureExtractor::new(&cfg.networks.features)?) } else { None };
    GanTrainer::new(cfg.clone(), &data, seg.as_ref(), fx.as_ref())?.run(resume, progress)
}
