//! Test-set evaluation, report files and the loss-weight sweep.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{io_err, Error, Result};
use crate::fsutil::write_atomic;
use crate::losses::LossWeights;
use crate::metrics::{mean_std, organ_dsc, psnr, rmse_hu, ssim};
use crate::networks::{argmax_labels, SegNet};
use crate::phantoms::{axial_slice_pgm, hu_denormalize, mask_slice_pgm, CorpusManifest, LabelMask, TrainingSample, NUM_LABELS};
use crate::training::{generate, load_generator, load_segnet, train_from_config, ReconDataset, RunConfig};

pub const REPORT_COLUMNS: [&str; 12] = [
    "sample_id",
    "psnr_db",
    "ssim",
    "rmse_hu",
    "dsc_lung_gt",
    "dsc_liver_gt",
    "dsc_bone_gt",
    "dsc_mean_gt",
    "dsc_lung_s",
    "dsc_liver_s",
    "dsc_bone_s",
    "dsc_mean_s",
];

pub const AGGREGATE_ID: &str = "aggregate";
pub const REPORT_CSV: &str = "metrics.csv";
pub const REPORT_JSON: &str = "metrics.json";

pub const SWEEP_LAMBDA_S: [f64; 5] = [0.0, 0.5, 1.0, 2.0, 4.0];
pub const SWEEP_LAMBDA_P: [f64; 4] = [0.0, 0.25, 0.5, 1.0];

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SampleMetrics {
    pub sample_id: String,
    /// `+inf` when the reconstruction is exact.
    pub psnr_db: f64,
    pub ssim: f64,
    pub rmse_hu: f64,
    pub dsc_gt: [f64; 3],
    pub dsc_mean_gt: f64,
    pub dsc_s: [f64; 3],
    pub dsc_mean_s: f64,
}

impl SampleMetrics {
    /// Numeric columns in report order.
    pub fn values(&self) -> [f64; 11] {
        let (g, s) = (self.dsc_gt, self.dsc_s);
        [self.psnr_db, self.ssim, self.rmse_hu, g[0], g[1], g[2], self.dsc_mean_gt, s[0], s[1], s[2], self.dsc_mean_s]
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Aggregate {
    /// Means in report column order (excluding `sample_id`).
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
    pub count: usize,
    /// Samples whose PSNR was infinite and left out of its mean.
    pub psnr_infinite: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub run_id: String,
    pub weights: Option<LossWeights>,
    pub samples: Vec<SampleMetrics>,
    pub aggregate: Aggregate,
    /// Samples that could not be loaded or reconstructed.
    pub missing: Vec<String>,
}

fn finite_or_sentinel(values: &[f64]) -> (f64, f64, usize) {
    let finite: Vec<f64> = values.iter().copied().filter(|v| v.is_finite()).collect();
    let skipped = values.len() - finite.len();
    if finite.is_empty() && !values.is_empty() {
        return (f64::INFINITY, 0.0, skipped);
    }
    let (m, s) = mean_std(&finite);
    (m, s, skipped)
}

pub fn aggregate(samples: &[SampleMetrics]) -> Aggregate {
    let mut mean = Vec::with_capacity(11);
    let mut std = Vec::with_capacity(11);
    let mut psnr_infinite = 0;
    for col in 0..11 {
        let vals: Vec<f64> = samples.iter().map(|s| s.values()[col]).collect();
        let (m, s, skipped) = if col == 0 {
            finite_or_sentinel(&vals)
        } else {
            let (m, s) = mean_std(&vals);
            (m, s, 0)
        };
        if col == 0 {
            psnr_infinite = skipped;
        }
        mean.push(m);
        std.push(s);
    }
    Aggregate {
        mean,
        std,
        count: samples.len(),
        psnr_infinite,
    }
}

fn num(v: f64) -> String {
    if v == f64::INFINITY {
        "inf".into()
    } else {
        format!("{v:?}")
    }
}

impl MetricsReport {
    pub fn new(run_id: impl Into<String>, weights: Option<LossWeights>, samples: Vec<SampleMetrics>, missing: Vec<String>) -> Self {
        let aggregate = aggregate(&samples);
        MetricsReport {
            run_id: run_id.into(),
            weights,
            samples,
            aggregate,
            missing,
        }
    }

    pub fn mean(&self, column: &str) -> Option<f64> {
        REPORT_COLUMNS[1..].iter().position(|&c| c == column).map(|i| self.aggregate.mean[i])
    }

    pub fn to_csv(&self) -> String {
        let mut w = csv::Writer::from_writer(Vec::new());
        w.write_record(REPORT_COLUMNS).expect("in-memory write");
        for s in &self.samples {
            let mut row = vec![s.sample_id.clone()];
            row.extend(s.values().iter().map(|&v| num(v)));
            w.write_record(&row).expect("in-memory write");
        }
        let mut row = vec![AGGREGATE_ID.to_string()];
        row.extend(self.aggregate.mean.iter().map(|&v| num(v)));
        w.write_record(&row).expect("in-memory write");
        String::from_utf8(w.into_inner().expect("flush")).expect("utf-8")
    }

    /// Writes `metrics.csv` and `metrics.json` into `dir`.
    pub fn write(&self, dir: &Path) -> Result<()> {
        write_atomic(&dir.join(REPORT_CSV), self.to_csv().as_bytes())?;
        let json = serde_json::to_vec_pretty(self).map_err(|e| Error::config("report", e.to_string()))?;
        write_atomic(&dir.join(REPORT_JSON), &json)
    }
}

/// Per-sample rows of a report CSV (the aggregate row excluded), parsed
/// back to numbers.
pub fn read_report_rows(path: &Path) -> Result<Vec<(String, Vec<f64>)>> {
    let mut r = csv::Reader::from_path(path).map_err(|e| Error::Io {
        path: path.to_path_buf(),
        source: std::io::Error::other(e),
    })?;
    let mut out = Vec::new();
    for rec in r.records() {
        let rec = rec.map_err(|e| Error::Io {
            path: path.to_path_buf(),
            source: std::io::Error::other(e),
        })?;
        let vals = rec
            .iter()
            .skip(1)
            .map(|v| {
                if v == "inf" {
                    Ok(f64::INFINITY)
                } else {
                    v.parse().map_err(|_| Error::CorruptHeader {
                        path: path.to_path_buf(),
                        reason: format!("bad number {v:?}"),
                    })
                }
            })
            .collect::<Result<Vec<f64>>>()?;
        out.push((rec[0].to_string(), vals));
    }
    Ok(out)
}

/// Metrics of one reconstruction against its sample.
pub fn sample_metrics(s: &TrainingSample, y_hat: &[f64], grid: [usize; 3], seg: &SegNet) -> Result<(SampleMetrics, Vec<u8>)> {
    let labels_of = |v: &[f64]| -> Result<Vec<u8>> {
        let t = agct_tensor::Tensor::new(vec![1, 1, grid[0], grid[1], grid[2]], v.to_vec())?;
        Ok(argmax_labels(seg.predict(&t)?.data(), 1, NUM_LABELS))
    };
    let recon_labels = labels_of(y_hat)?;
    let ref_labels = labels_of(&s.y)?;
    let (dsc_gt, dsc_mean_gt) = organ_dsc(&recon_labels, &s.mask)?;
    let (dsc_s, dsc_mean_s) = organ_dsc(&recon_labels, &ref_labels)?;
    Ok((
        SampleMetrics {
            sample_id: s.id.clone(),
            psnr_db: psnr(y_hat, &s.y)?,
            ssim: ssim(y_hat, &s.y, grid)?,
            rmse_hu: rmse_hu(y_hat, &s.y)?,
            dsc_gt,
            dsc_mean_gt,
            dsc_s,
            dsc_mean_s,
        },
        recon_labels,
    ))
}

fn previews(dir: &Path, s: &TrainingSample, y_hat: &[f64], labels: &[u8], grid: [usize; 3], pitch: f64) -> Result<()> {
    let iz = grid[2] / 2;
    let gt = hu_denormalize(&s.y, grid, pitch)?;
    let rec = hu_denormalize(y_hat, grid, pitch)?;
    axial_slice_pgm(&dir.join(format!("{}_gt.pgm", s.id)), &gt, iz, 1500.0, -300.0)?;
    axial_slice_pgm(&dir.join(format!("{}_recon.pgm", s.id)), &rec, iz, 1500.0, -300.0)?;
    mask_slice_pgm(&dir.join(format!("{}_mask_gt.pgm", s.id)), &LabelMask { data: s.mask.clone(), grid }, iz)?;
    mask_slice_pgm(&dir.join(format!("{}_mask_recon.pgm", s.id)), &LabelMask { data: labels.to_vec(), grid }, iz)
}

/// Evaluates every sample of `data`, reconstructing with `recon`. Samples
/// that fail to load or reconstruct are listed in `missing` and skipped.
pub fn evaluate_with(
    data: &ReconDataset,
    seg: &SegNet,
    recon: &dyn Fn(&TrainingSample) -> Result<Vec<f64>>,
    run_id: &str,
    weights: Option<LossWeights>,
    preview_dir: Option<&Path>,
) -> Result<MetricsReport> {
    if data.is_empty() {
        return Err(Error::Corpus("test split is empty".into()));
    }
    let grid = data.grid();
    let pitch = data.geometry().voxel_pitch_mm;
    if let Some(d) = preview_dir {
        fs::create_dir_all(d).map_err(io_err(d))?;
    }
    let mut samples = Vec::with_capacity(data.len());
    let mut missing = Vec::new();
    for i in 0..data.len() {
        let s = match data.get(i) {
            Ok(s) => s,
            Err(e) => {
                log::warn!("skipping test sample {i}: {e}");
                missing.push(sample_label(data, i));
                continue;
            }
        };
        let y_hat = match recon(&s) {
            Ok(v) => v,
            Err(e) => {
                log::warn!("skipping {}: {e}", s.id);
                missing.push(s.id.clone());
                continue;
            }
        };
        let (m, labels) = sample_metrics(&s, &y_hat, grid, seg)?;
        if let Some(d) = preview_dir {
            previews(d, &s, &y_hat, &labels, grid, pitch)?;
        }
        samples.push(m);
    }
    if !missing.is_empty() {
        log::warn!("{} test samples could not be evaluated", missing.len());
    }
    Ok(MetricsReport::new(run_id, weights, samples, missing))
}

fn sample_label(data: &ReconDataset, i: usize) -> String {
    match data {
        ReconDataset::Corpus { entries, .. } => entries[i].id.clone(),
        ReconDataset::Memory { samples, .. } => samples[i].id.clone(),
    }
}

/// Evaluates a trained generator checkpoint on the corpus test split and
/// writes the report and previews into `out`.
pub fn evaluate_testset(checkpoint: &Path, manifest: &Path, seg: &SegNet, out: &Path) -> Result<MetricsReport> {
    let (gen, info) = load_generator(checkpoint)?;
    let (m, root) = CorpusManifest::load(manifest)?;
    let data = ReconDataset::test(&m, &root);
    if info.geometry.fingerprint() != m.geometry.fingerprint() || data.grid()[2] != info.grid_z {
        return Err(Error::Geometry(format!(
            "checkpoint geometry {} does not match the corpus geometry {}",
            info.geometry.fingerprint(),
            m.geometry.fingerprint()
        )));
    }
    let recon = |s: &TrainingSample| -> Result<Vec<f64>> { Ok(generate(&gen, &s.x_ap, &s.x_lat)?.into_data()) };
    let run_id = format!("{}@epoch{}", checkpoint.display(), info.epoch);
    let report = evaluate_with(&data, seg, &recon, &run_id, Some(info.loss.weights), Some(&out.join("previews")))?;
    report.write(out)?;
    Ok(report)
}

/// Output directory name of one sweep cell.
pub fn sweep_cell_name(lambda_s: f64, lambda_p: f64) -> String {
    format!("ls{lambda_s}_lp{lambda_p}")
}

pub const SWEEP_SUMMARY: &str = "sweep.csv";

/// Trains and evaluates one run per `(lambda_s, lambda_p)` cell below
/// `base.output_dir`, and writes a summary table.
pub fn sweep(base: &RunConfig, lambda_s: &[f64], lambda_p: &[f64], mut progress: impl FnMut(&str)) -> Result<Vec<MetricsReport>> {
    base.validate()?;
    if lambda_s.is_empty() || lambda_p.is_empty() {
        return Err(Error::config("sweep", "both weight grids need at least one value"));
    }
    let seg_path = base.segnet_path();
    let seg = load_segnet(&seg_path)?;
    let mut reports = Vec::new();
    let mut summary = String::from("lambda_s,lambda_p,psnr_db,ssim,rmse_hu,dsc_mean_gt,dsc_mean_s\n");
    for &ls in lambda_s {
        for &lp in lambda_p {
            let name = sweep_cell_name(ls, lp);
            progress(&name);
            let mut cfg = base.clone();
            cfg.loss.weights.lambda_s = ls;
            cfg.loss.weights.lambda_p = lp;
            cfg.segnet_checkpoint = Some(seg_path.clone());
            cfg.output_dir = base.output_dir.join(&name);
            train_from_config(&cfg, false, |_, _| {})?;
            let report = evaluate_testset(&cfg.output_dir, &cfg.corpus, &seg, &cfg.output_dir.join("eval"))?;
            let a = &report.aggregate.mean;
            summary.push_str(&format!("{ls:?},{lp:?},{},{:?},{:?},{:?},{:?}\n", num(a[0]), a[1], a[2], a[6], a[10]));
            reports.push(report);
        }
    }
    write_atomic(&base.output_dir.join(SWEEP_SUMMARY), summary.as_bytes())?;
    Ok(reports)
}

/// Where `evaluate` writes when no directory is given.
pub fn default_eval_dir(run_dir: &Path) -> PathBuf {
    run_dir.join("eval")
}

#[cfg(test)]
mod tests {
    use super::*;

    fn row(id: &str, psnr: f64) -> SampleMetrics {
        SampleMetrics {
            sample_id: id.into(),
            psnr_db: psnr,
            ssim: 0.5,
            rmse_hu: 10.0,
            dsc_gt: [1.0, 0.5, 0.0],
            dsc_mean_gt: 0.5,
            dsc_s: [1.0; 3],
            dsc_mean_s: 1.0,
        }
    }

    #[test]
    fn infinite_psnr_is_excluded_and_counted() {
        let r = MetricsReport::new("t", None, vec![row("a", 20.0), row("b", f64::INFINITY), row("c", 30.0)], vec![]);
        assert_eq!(r.aggregate.mean[0], 25.0);
        assert_eq!(r.aggregate.psnr_infinite, 1);
        assert_eq!(r.mean("dsc_mean_gt"), Some(0.5));
        let csv = r.to_csv();
        assert_eq!(csv.lines().count(), 5);
        assert!(csv.starts_with(&REPORT_COLUMNS.join(",")));
        assert!(csv.contains("b,inf,"));
    }

    #[test]
    fn all_infinite_psnr_keeps_the_sentinel() {
        let r = MetricsReport::new("t", None, vec![row("a", f64::INFINITY)], vec![]);
        assert_eq!(r.aggregate.mean[0], f64::INFINITY);
    }

    #[test]
    fn cell_names() {
        assert_eq!(sweep_cell_name(0.5, 0.0), "ls0.5_lp0");
    }
}
