//! Synthetic labeled chest phantoms and the on-disk corpus built from them.
//!
//! Orientation: x runs from patient right (-x) to left (+x), y from
//! anterior (-y, facing the a.p. source) to posterior, z from inferior to
//! superior.

use std::f64::consts::PI;
use std::fs;
use std::path::{Path, PathBuf};

use agct_tensor::Tensor;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{io_err, Error, Result};
use crate::fanbeam::{build_geometry, FanBeamGeometry, GeometryConfig, Projector, View};
use crate::fsutil::{prepare_output_dir, write_atomic};
use crate::storage::{read_array, read_f64, write_array, ArrayData, Role, Units};

pub const HU_MIN: f64 = -1024.0;
pub const HU_MAX: f64 = 3071.0;
pub const HU_OFFSET: f64 = 1024.0;
pub const HU_SPAN: f64 = 4095.0;

pub const HU_AIR: f64 = -1000.0;
pub const HU_SOFT_TISSUE: f64 = 40.0;
pub const HU_LUNG: f64 = -800.0;
pub const HU_LIVER: f64 = 60.0;
pub const HU_BONE: f64 = 700.0;
/// Largest deviation of the smooth noise field from zero.
pub const NOISE_AMPLITUDE_HU: f64 = 20.0;
pub const MIN_GRID: usize = 16;

pub const LABEL_BACKGROUND: u8 = 0;
pub const LABEL_LUNG: u8 = 1;
pub const LABEL_LIVER: u8 = 2;
pub const LABEL_BONE: u8 = 3;
pub const NUM_LABELS: usize = 4;

/// Noise-free HU value written for a label.
pub fn label_hu(label: u8) -> Option<f64> {
    match label {
        LABEL_LUNG => Some(HU_LUNG),
        LABEL_LIVER => Some(HU_LIVER),
        LABEL_BONE => Some(HU_BONE),
        _ => None,
    }
}

/// CT volume in HU on an `[N, N, Z]` grid (z fastest).
#[derive(Clone, Debug, PartialEq)]
pub struct Volume {
    pub data: Vec<f64>,
    pub grid: [usize; 3],
    pub voxel_pitch_mm: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct LabelMask {
    pub data: Vec<u8>,
    pub grid: [usize; 3],
}

impl Volume {
    pub fn index(&self, ix: usize, iy: usize, iz: usize) -> usize {
        (ix * self.grid[1] + iy) * self.grid[2] + iz
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }
}

impl LabelMask {
    pub fn count(&self, label: u8) -> usize {
        self.data.iter().filter(|&&l| l == label).count()
    }
}

/// Maps HU to `[0, 1]`, clamping out-of-range values. Returns the
/// normalized data and the number of clamped voxels.
pub fn hu_normalize(v: &Volume) -> (Vec<f64>, usize) {
    let mut clamped = 0;
    let data = v
        .data
        .iter()
        .map(|&h| {
            if !(HU_MIN..=HU_MAX).contains(&h) {
                clamped += 1;
            }
            (h.clamp(HU_MIN, HU_MAX) + HU_OFFSET) / HU_SPAN
        })
        .collect();
    (data, clamped)
}

pub fn normalize_value(hu: f64) -> f64 {
    (hu + HU_OFFSET) / HU_SPAN
}

pub fn denormalize_value(t: f64) -> f64 {
    t * HU_SPAN - HU_OFFSET
}

/// Inverse of [`hu_normalize`].
pub fn hu_denormalize(t: &[f64], grid: [usize; 3], voxel_pitch_mm: f64) -> Result<Volume> {
    let n: usize = grid.iter().product();
    if n != t.len() {
        return Err(Error::shape("hu_denormalize", &grid, &[t.len()]));
    }
    Ok(Volume {
        data: t.iter().map(|&x| denormalize_value(x)).collect(),
        grid,
        voxel_pitch_mm,
    })
}

/// Ellipsoid in grid-relative coordinates (fractions of N for x, y and
/// of Z for z), rotated in the transverse plane by `angle` radians.
#[derive(Clone, Copy, Debug)]
struct Ellipsoid {
    center: [f64; 3],
    axes: [f64; 3],
    angle: f64,
}

impl Ellipsoid {
    fn local(&self, p: [f64; 3]) -> [f64; 3] {
        let (dx, dy) = (p[0] - self.center[0], p[1] - self.center[1]);
        let (c, s) = (self.angle.cos(), self.angle.sin());
        [(c * dx + s * dy) / self.axes[0], (-s * dx + c * dy) / self.axes[1], (p[2] - self.center[2]) / self.axes[2]]
    }

    fn contains(&self, p: [f64; 3]) -> bool {
        let l = self.local(p);
        l[0] * l[0] + l[1] * l[1] + l[2] * l[2] <= 1.0
    }

    /// Transverse test only (infinite cylinder along z).
    fn contains_xy(&self, p: [f64; 3]) -> bool {
        let l = self.local(p);
        l[0] * l[0] + l[1] * l[1] <= 1.0
    }
}

fn perturb(rng: &mut ChaCha8Rng, base: Ellipsoid) -> Ellipsoid {
    let mut axes = base.axes;
    for a in &mut axes {
        *a *= rng.random_range(0.9..=1.1);
    }
    let mut center = base.center;
    for c in &mut center {
        *c += rng.random_range(-0.05..=0.05);
    }
    Ellipsoid {
        center,
        axes,
        angle: base.angle + rng.random_range(-5.0f64..=5.0).to_radians(),
    }
}

fn ellipsoid(center: [f64; 3], axes: [f64; 3]) -> Ellipsoid {
    Ellipsoid { center, axes, angle: 0.0 }
}

struct RibArc {
    center: [f64; 2],
    axes: [f64; 2],
    z: f64,
    half_thickness: f64,
    half_height: f64,
}

impl RibArc {
    fn contains(&self, p: [f64; 3]) -> bool {
        if (p[2] - self.z).abs() > self.half_height {
            return false;
        }
        let (dx, dy) = (p[0] - self.center[0], p[1] - self.center[1]);
        let outer = (dx / (self.axes[0] + self.half_thickness)).powi(2) + (dy / (self.axes[1] + self.half_thickness)).powi(2);
        let inner = (dx / (self.axes[0] - self.half_thickness)).powi(2) + (dy / (self.axes[1] - self.half_thickness)).powi(2);
        if outer > 1.0 || inner <= 1.0 {
            return false;
        }
        // Open in front (sternum) and behind (spine).
        let theta = dy.atan2(dx).to_degrees().abs();
        let from_front = (theta - 90.0).abs();
        !(dy < 0.0 && from_front < 25.0) && !(dy > 0.0 && from_front < 20.0)
    }
}

/// Generates one phantom on an `n x n x z` grid.
pub fn generate_phantom(seed: u64, grid_n: usize, grid_z: usize, voxel_pitch_mm: f64) -> Result<(Volume, LabelMask)> {
    if grid_n < MIN_GRID || grid_z < MIN_GRID {
        return Err(Error::config(
            "grid",
            format!("phantom structures need at least {MIN_GRID} voxels per axis, got {grid_n}x{grid_n}x{grid_z}"),
        ));
    }
    if !(voxel_pitch_mm.is_finite() && voxel_pitch_mm > 0.0) {
        return Err(Error::config("voxel_pitch_mm", "must be positive"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);

    let body = perturb(&mut rng, ellipsoid([0.0, 0.0, 0.0], [0.40, 0.30, 1.0]));
    let lungs = [
        perturb(&mut rng, ellipsoid([-0.16, -0.01, 0.10], [0.15, 0.21, 0.36])),
        perturb(&mut rng, ellipsoid([0.16, -0.01, 0.10], [0.15, 0.21, 0.36])),
    ];
    let liver = perturb(&mut rng, ellipsoid([-0.12, 0.02, -0.27], [0.18, 0.15, 0.17]));
    let spine = perturb(&mut rng, ellipsoid([0.0, 0.21, 0.0], [0.055, 0.055, 1.0]));
    let rib_ring = perturb(&mut rng, ellipsoid([0.0, 0.0, 0.0], [0.345, 0.255, 1.0]));

    let dn = 1.0 / grid_n as f64;
    let dz = 1.0 / grid_z as f64;
    let half_thickness = (0.0175f64).max(0.75 * dn);
    let half_height = (0.015f64).max(0.75 * dz);
    let lung_top = lungs[0].center[2] + 0.8 * lungs[0].axes[2];
    let lung_bottom = lungs[0].center[2] - 0.8 * lungs[0].axes[2];
    let n_ribs = 5;
    let ribs: Vec<RibArc> = (0..n_ribs)
        .map(|k| RibArc {
            center: [rib_ring.center[0], rib_ring.center[1]],
            axes: [rib_ring.axes[0], rib_ring.axes[1]],
            z: lung_bottom + (lung_top - lung_bottom) * k as f64 / (n_ribs - 1) as f64,
            half_thickness,
            half_height,
        })
        .collect();

    struct Wave {
        freq: [f64; 3],
        phase: f64,
    }
    let waves: Vec<Wave> = (0..4)
        .map(|_| Wave {
            freq: [rng.random_range(-2.0..=2.0), rng.random_range(-2.0..=2.0), rng.random_range(-2.0..=2.0)],
            phase: rng.random_range(0.0..2.0 * PI),
        })
        .collect();
    let wave_amp = NOISE_AMPLITUDE_HU / waves.len() as f64;

    let cn = (grid_n as f64 - 1.0) / 2.0;
    let cz = (grid_z as f64 - 1.0) / 2.0;
    let n_vox = grid_n * grid_n * grid_z;
    let mut hu = vec![HU_AIR; n_vox];
    let mut labels = vec![LABEL_BACKGROUND; n_vox];
    for ix in 0..grid_n {
        for iy in 0..grid_n {
            for iz in 0..grid_z {
                let p = [(ix as f64 - cn) * dn, (iy as f64 - cn) * dn, (iz as f64 - cz) * dz];
                if !body.contains_xy(p) {
                    continue;
                }
                let mut value = HU_SOFT_TISSUE;
                let mut label = LABEL_BACKGROUND;
                if lungs.iter().any(|l| l.contains(p)) {
                    (value, label) = (HU_LUNG, LABEL_LUNG);
                }
                if liver.contains(p) {
                    (value, label) = (HU_LIVER, LABEL_LIVER);
                }
                // Vertebrae fill 80% of each eighth of the column height.
                let vertebra = ((p[2] + 0.5) * 8.0).rem_euclid(1.0) < 0.8;
                if (vertebra && spine.contains_xy(p)) || ribs.iter().any(|r| r.contains(p)) {
                    (value, label) = (HU_BONE, LABEL_BONE);
                }
                let noise: f64 = waves
                    .iter()
                    .map(|w| (2.0 * PI * (w.freq[0] * p[0] + w.freq[1] * p[1] + w.freq[2] * p[2]) + w.phase).cos())
                    .sum::<f64>()
                    * wave_amp;
                let i = (ix * grid_n + iy) * grid_z + iz;
                hu[i] = value + noise;
                labels[i] = label;
            }
        }
    }
    let grid = [grid_n, grid_n, grid_z];
    Ok((
        Volume {
            data: hu,
            grid,
            voxel_pitch_mm,
        },
        LabelMask { data: labels, grid },
    ))
}

fn volume_tensor(v: &Volume) -> Tensor {
    let (data, _) = hu_normalize(v);
    Tensor::new(v.grid.to_vec(), data).expect("volume grid matches data")
}

/// Simulated a.p. and lateral projections `[U, Z]` of a volume, clamped
/// to `[0, 1]`.
pub fn simulate_projection_pair(v: &Volume, p: &Projector) -> Result<(Tensor, Tensor)> {
    let g = p.geometry();
    if v.grid[0] != g.grid_n || v.grid[1] != g.grid_n || (v.voxel_pitch_mm - g.voxel_pitch_mm).abs() > 1e-12 {
        return Err(Error::Geometry(format!(
            "volume grid {:?} at {} mm does not match the projector's {} voxels at {} mm",
            v.grid, v.voxel_pitch_mm, g.grid_n, g.voxel_pitch_mm
        )));
    }
    let t = volume_tensor(v);
    let mut out = View::BOTH.iter().map(|&view| {
        let mut proj = p.project(view, &t)?;
        for x in proj.data_mut() {
            *x = x.clamp(0.0, 1.0);
        }
        Ok::<_, Error>(proj)
    });
    let ap = out.next().unwrap()?;
    let lat = out.next().unwrap()?;
    Ok((ap, lat))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CorpusConfig {
    pub seed: u64,
    pub geometry: GeometryConfig,
    /// Axial extent; defaults to the transverse size.
    pub grid_z: Option<usize>,
    pub recon_train: usize,
    pub recon_test: usize,
    pub seg_train: usize,
    pub seg_test: usize,
    /// First phantom index of each corpus; the index ranges must not overlap.
    pub recon_first_index: u64,
    pub seg_first_index: u64,
}

impl Default for CorpusConfig {
    fn default() -> Self {
        CorpusConfig {
            seed: 0,
            geometry: GeometryConfig::default(),
            grid_z: None,
            recon_train: 200,
            recon_test: 40,
            seg_train: 112,
            seg_test: 28,
            recon_first_index: 0,
            seg_first_index: 1_000_000,
        }
    }
}

impl CorpusConfig {
    pub fn grid_z(&self) -> usize {
        self.grid_z.unwrap_or(self.geometry.grid_n)
    }

    pub fn validate(&self) -> Result<()> {
        for (name, v) in [
            ("recon_train", self.recon_train),
            ("recon_test", self.recon_test),
            ("seg_train", self.seg_train),
            ("seg_test", self.seg_test),
        ] {
            if v == 0 {
                return Err(Error::config(format!("corpus.{name}"), "must be at least 1"));
            }
        }
        let r = self.recon_first_index..self.recon_first_index + (self.recon_train + self.recon_test) as u64;
        let s = self.seg_first_index..self.seg_first_index + (self.seg_train + self.seg_test) as u64;
        if r.start < s.end && s.start < r.end {
            return Err(Error::config(
                "corpus.seg_first_index",
                format!("phantom index ranges overlap: reconstruction {r:?}, segmentation {s:?}"),
            ));
        }
        Ok(())
    }

    /// Phantom seed for a global phantom index.
    pub fn phantom_seed(&self, index: u64) -> u64 {
        self.seed.wrapping_mul(0x9E37_79B9_7F4A_7C15).wrapping_add(index)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Normalization {
    pub offset: f64,
    pub span: f64,
}

impl Default for Normalization {
    fn default() -> Self {
        Normalization {
            offset: HU_OFFSET,
            span: HU_SPAN,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SampleEntry {
    pub id: String,
    pub seed: u64,
    pub volume: String,
    pub mask: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub ap: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub lat: Option<String>,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Split {
    pub train: Vec<SampleEntry>,
    pub test: Vec<SampleEntry>,
}

impl Split {
    pub fn ids_disjoint(&self) -> bool {
        self.train.iter().all(|a| self.test.iter().all(|b| a.id != b.id))
    }
}

pub const MANIFEST_FORMAT: &str = "agct-corpus/1";
pub const MANIFEST_FILE: &str = "manifest.json";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CorpusManifest {
    pub format: String,
    pub corpus_seed: u64,
    pub config: CorpusConfig,
    pub normalization: Normalization,
    /// A.p. geometry used for the projections.
    pub geometry: FanBeamGeometry,
    pub grid: [usize; 3],
    pub voxel_pitch_mm: f64,
    pub recon: Split,
    pub seg: Split,
}

/// Projection pair with its ground truth, all normalized to `[0, 1]`.
#[derive(Clone, Debug, PartialEq)]
pub struct TrainingSample {
    pub id: String,
    pub seed: u64,
    /// `[U, Z]`.
    pub x_ap: Vec<f64>,
    pub x_lat: Vec<f64>,
    /// `[N, N, Z]`.
    pub y: Vec<f64>,
    pub mask: Vec<u8>,
}

/// Volume and labels of the segmentation corpus.
#[derive(Clone, Debug, PartialEq)]
pub struct SegSample {
    pub id: String,
    pub y: Vec<f64>,
    pub mask: Vec<u8>,
}

impl CorpusManifest {
    pub fn load(path: &Path) -> Result<(Self, PathBuf)> {
        let text = fs::read(path).map_err(|e| Error::Corpus(format!("cannot read manifest {}: {e}", path.display())))?;
        let m: CorpusManifest = serde_json::from_slice(&text).map_err(|e| Error::CorruptHeader {
            path: path.to_path_buf(),
            reason: e.to_string(),
        })?;
        if m.format != MANIFEST_FORMAT {
            return Err(Error::CorruptHeader {
                path: path.to_path_buf(),
                reason: format!("unknown format {:?}", m.format),
            });
        }
        let dir = path.parent().map(Path::to_path_buf).unwrap_or_default();
        Ok((m, dir))
    }

    fn check_grid(&self, path: &Path, shape: &[usize], expected: &[usize]) -> Result<()> {
        if shape != expected {
            return Err(Error::shape(format!("corpus file {}", path.display()), expected, shape));
        }
        Ok(())
    }

    pub fn load_training_sample(&self, dir: &Path, e: &SampleEntry) -> Result<TrainingSample> {
        let (ap, lat) = match (&e.ap, &e.lat) {
            (Some(a), Some(l)) => (dir.join(a), dir.join(l)),
            _ => return Err(Error::Corpus(format!("sample {} has no projections", e.id))),
        };
        let (y, mask) = self.load_volume_and_mask(dir, e)?;
        let proj_shape = [self.geometry.n_detector_bins, self.grid[2]];
        let (h, x_ap) = read_f64(&ap, Role::Projection)?;
        self.check_grid(&ap, &h.shape, &proj_shape)?;
        let (h, x_lat) = read_f64(&lat, Role::Projection)?;
        self.check_grid(&lat, &h.shape, &proj_shape)?;
        Ok(TrainingSample {
            id: e.id.clone(),
            seed: e.seed,
            x_ap,
            x_lat,
            y,
            mask,
        })
    }

    pub fn load_seg_sample(&self, dir: &Path, e: &SampleEntry) -> Result<SegSample> {
        let (y, mask) = self.load_volume_and_mask(dir, e)?;
        Ok(SegSample {
            id: e.id.clone(),
            y,
            mask,
        })
    }

    fn load_volume_and_mask(&self, dir: &Path, e: &SampleEntry) -> Result<(Vec<f64>, Vec<u8>)> {
        let vp = dir.join(&e.volume);
        let (h, y) = read_f64(&vp, Role::Volume)?;
        self.check_grid(&vp, &h.shape, &self.grid)?;
        if h.units != Units::Normalized {
            return Err(Error::Corpus(format!("{}: corpus volumes must be normalized", vp.display())));
        }
        let mp = dir.join(&e.mask);
        let mask = match read_array(&mp)? {
            (h, ArrayData::U8(m)) if h.role == Role::Mask => {
                self.check_grid(&mp, &h.shape, &self.grid)?;
                m
            }
            _ => return Err(Error::Corpus(format!("{}: not a label mask", mp.display()))),
        };
        Ok((y, mask))
    }

    /// Loads every listed file, failing on the first problem.
    pub fn verify(&self, dir: &Path) -> Result<()> {
        for e in self.recon.train.iter().chain(&self.recon.test) {
            self.load_training_sample(dir, e)?;
        }
        for e in self.seg.train.iter().chain(&self.seg.test) {
            self.load_seg_sample(dir, e)?;
        }
        Ok(())
    }
}

/// Writes a phantom's normalized volume and mask; returns relative paths.
fn write_sample_files(dir: &Path, rel: &str, v: &Volume, m: &LabelMask) -> Result<(String, String)> {
    let (norm, _) = hu_normalize(v);
    let vol = format!("{rel}.volume.json");
    let mask = format!("{rel}.mask.json");
    write_array(&dir.join(&vol), &v.grid, v.voxel_pitch_mm, Role::Volume, Units::Normalized, &ArrayData::F64(norm))?;
    write_array(&dir.join(&mask), &m.grid, v.voxel_pitch_mm, Role::Mask, Units::Label, &ArrayData::U8(m.data.clone()))?;
    Ok((vol, mask))
}

/// Generates both corpora under `out`.
pub fn make_corpus(cfg: &CorpusConfig, out: &Path, overwrite: bool) -> Result<CorpusManifest> {
    cfg.validate()?;
    let geometry = build_geometry(&cfg.geometry, View::Ap)?;
    let projector = Projector::new(&geometry)?;
    let (n, z, pitch) = (geometry.grid_n, cfg.grid_z(), geometry.voxel_pitch_mm);
    prepare_output_dir(out, overwrite)?;
    for sub in ["recon/train", "recon/test", "seg/train", "seg/test"] {
        let d = out.join(sub);
        fs::create_dir_all(&d).map_err(io_err(&d))?;
    }

    let jobs = |corpus: &'static str, split: &'static str, first: u64, count: usize| {
        (0..count).map(move |i| (corpus, split, first + i as u64, i))
    };
    let all: Vec<_> = jobs("recon", "train", cfg.recon_first_index, cfg.recon_train)
        .chain(jobs("recon", "test", cfg.recon_first_index + cfg.recon_train as u64, cfg.recon_test))
        .chain(jobs("seg", "train", cfg.seg_first_index, cfg.seg_train))
        .chain(jobs("seg", "test", cfg.seg_first_index + cfg.seg_train as u64, cfg.seg_test))
        .collect();

    let entries: Vec<(&str, &str, SampleEntry)> = all
        .par_iter()
        .map(|&(corpus, split, index, i)| {
            let seed = cfg.phantom_seed(index);
            let id = format!("{corpus}-{split}-{i:04}");
            let rel = format!("{corpus}/{split}/{id}");
            let (v, m) = generate_phantom(seed, n, z, pitch)?;
            let (volume, mask) = write_sample_files(out, &rel, &v, &m)?;
            let (mut ap, mut lat) = (None, None);
            if corpus == "recon" {
                let (xa, xl) = simulate_projection_pair(&v, &projector)?;
                for (view, t, slot) in [(View::Ap, xa, &mut ap), (View::Lat, xl, &mut lat)] {
                    let name = format!("{rel}.{}.json", view.name());
                    let shape = t.shape().to_vec();
                    write_array(&out.join(&name), &shape, pitch, Role::Projection, Units::Normalized, &ArrayData::F64(t.into_data()))?;
                    *slot = Some(name);
                }
            }
            Ok((corpus, split, SampleEntry { id, seed, volume, mask, ap, lat }))
        })
        .collect::<Result<_>>()?;

    let mut recon = Split::default();
    let mut seg = Split::default();
    for (corpus, split, e) in entries {
        let s = if corpus == "recon" { &mut recon } else { &mut seg };
        if split == "train" {
            s.train.push(e);
        } else {
            s.test.push(e);
        }
    }
    let manifest = CorpusManifest {
        format: MANIFEST_FORMAT.into(),
        corpus_seed: cfg.seed,
        config: cfg.clone(),
        normalization: Normalization::default(),
        geometry,
        grid: [n, n, z],
        voxel_pitch_mm: pitch,
        recon,
        seg,
    };
    let json = serde_json::to_vec_pretty(&manifest).expect("manifest serializes");
    write_atomic(&out.join(MANIFEST_FILE), &json)?;
    Ok(manifest)
}

/// Writes an HU volume losslessly.
pub fn write_volume(v: &Volume, path: &Path) -> Result<()> {
    write_array(path, &v.grid, v.voxel_pitch_mm, Role::Volume, Units::Hu, &ArrayData::F64(v.data.clone()))
}

/// Reads a volume file; normalized files are converted back to HU.
pub fn read_volume(path: &Path) -> Result<Volume> {
    let (h, data) = read_f64(path, Role::Volume)?;
    if h.shape.len() != 3 {
        return Err(Error::CorruptHeader {
            path: path.to_path_buf(),
            reason: format!("volume shape {:?} is not three-dimensional", h.shape),
        });
    }
    let grid = [h.shape[0], h.shape[1], h.shape[2]];
    match h.units {
        Units::Hu => Ok(Volume {
            data,
            grid,
            voxel_pitch_mm: h.pitch_mm,
        }),
        Units::Normalized => hu_denormalize(&data, grid, h.pitch_mm),
        Units::Label => Err(Error::CorruptHeader {
            path: path.to_path_buf(),
            reason: "label units on a volume".into(),
        }),
    }
}

pub fn write_mask(m: &LabelMask, pitch_mm: f64, path: &Path) -> Result<()> {
    write_array(path, &m.grid, pitch_mm, Role::Mask, Units::Label, &ArrayData::U8(m.data.clone()))
}

pub fn read_mask(path: &Path) -> Result<LabelMask> {
    match read_array(path)? {
        (h, ArrayData::U8(data)) if h.role == Role::Mask && h.shape.len() == 3 => Ok(LabelMask {
            data,
            grid: [h.shape[0], h.shape[1], h.shape[2]],
        }),
        _ => Err(Error::CorruptHeader {
            path: path.to_path_buf(),
            reason: "not a three-dimensional label mask".into(),
        }),
    }
}

/// Binary PGM (P5) with the display window noted in a comment.
pub fn write_pgm(path: &Path, width: usize, height: usize, pixels: &[u8], comment: &str) -> Result<()> {
    if pixels.len() != width * height {
        return Err(Error::shape("write_pgm", &[width * height], &[pixels.len()]));
    }
    let mut bytes = format!("P5\n# {comment}\n{width} {height}\n255\n").into_bytes();
    bytes.extend_from_slice(pixels);
    write_atomic(path, &bytes)
}

/// Axial slice `iz` of an HU volume mapped through a window/level. Rows
/// run along y, columns along x.
pub fn axial_slice_pgm(path: &Path, v: &Volume, iz: usize, window: f64, level: f64) -> Result<()> {
    let [nx, ny, nz] = v.grid;
    if iz >= nz {
        return Err(Error::config("slice", format!("index {iz} outside 0..{nz}")));
    }
    let lo = level - window / 2.0;
    let mut px = Vec::with_capacity(nx * ny);
    for iy in 0..ny {
        for ix in 0..nx {
            let t = ((v.data[v.index(ix, iy, iz)] - lo) / window).clamp(0.0, 1.0);
            px.push((t * 255.0).round() as u8);
        }
    }
    write_pgm(path, nx, ny, &px, &format!("window {window} level {level}"))
}

/// Axial slice of a label mask with labels spread over the gray range.
pub fn mask_slice_pgm(path: &Path, m: &LabelMask, iz: usize) -> Result<()> {
    let [nx, ny, nz] = m.grid;
    if iz >= nz {
        return Err(Error::config("slice", format!("index {iz} outside 0..{nz}")));
    }
    let mut px = Vec::with_capacity(nx * ny);
    for iy in 0..ny {
        for ix in 0..nx {
            px.push(m.data[(ix * ny + iy) * nz + iz].min(3) * 85);
        }
    }
    write_pgm(path, nx, ny, &px, "labels 0 background 85 lung 170 liver 255 bone")
}

/// Projection `[U, Z]` as an image with z upward.
pub fn projection_pgm(path: &Path, p: &[f64], bins: usize, rows: usize) -> Result<()> {
    if p.len() != bins * rows {
        return Err(Error::shape("projection_pgm", &[bins, rows], &[p.len()]));
    }
    let mut px = Vec::with_capacity(p.len());
    for iz in (0..rows).rev() {
        for b in 0..bins {
            px.push((p[b * rows + iz].clamp(0.0, 1.0) * 255.0).round() as u8);
        }
    }
    write_pgm(path, bins, rows, &px, "window 1 level 0.5 (normalized)")
}
