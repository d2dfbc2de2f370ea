//! Adversarial, voxel, projection, segmentation and perceptual losses and
//! their weighted composition.

use std::fs::{File, OpenOptions};
use std::io::{Seek, SeekFrom};
use std::path::{Path, PathBuf};

use agct_tensor::{Tape, Tensor, Var};
use serde::{Deserialize, Serialize};

use crate::error::{io_err, Error, Result};
use crate::fanbeam::{Projector, View};
use crate::networks::{bind_constant, FeatureExtractor, SegNet};
use crate::phantoms::NUM_LABELS;

/// Smoothing constant of the soft dice ratio.
pub const DICE_EPS: f64 = 1e-6;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LossWeights {
    pub lambda_gen: f64,
    pub lambda_r: f64,
    pub lambda_proj: f64,
    pub lambda_s: f64,
    pub lambda_p: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights {
            lambda_gen: 0.1,
            lambda_r: 10.0,
            lambda_proj: 10.0,
            lambda_s: 2.0,
            lambda_p: 0.5,
        }
    }
}

impl LossWeights {
    /// The objective without the segmentation and perceptual terms.
    pub fn baseline() -> Self {
        LossWeights {
            lambda_s: 0.0,
            lambda_p: 0.0,
            ..LossWeights::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        for (name, v) in self.named() {
            if !v.is_finite() || v < 0.0 {
                return Err(Error::config(format!("loss.weights.{name}"), format!("must be finite and >= 0, got {v}")));
            }
        }
        Ok(())
    }

    fn named(&self) -> [(&'static str, f64); 5] {
        [
            ("lambda_gen", self.lambda_gen),
            ("lambda_r", self.lambda_r),
            ("lambda_proj", self.lambda_proj),
            ("lambda_s", self.lambda_s),
            ("lambda_p", self.lambda_p),
        ]
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum FeatureNorm {
    /// Mean squared feature difference.
    #[default]
    L2,
    /// Mean absolute feature difference.
    L1,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SliceAxis {
    /// Slices perpendicular to z.
    #[default]
    Axial,
    /// Slices perpendicular to y.
    Coronal,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PerceptualOptions {
    pub norm: FeatureNorm,
    pub slice_axis: SliceAxis,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LossConfig {
    pub weights: LossWeights,
    pub perceptual: PerceptualOptions,
}

fn same_shape(tape: &Tape, a: Var, b: Var, ctx: &str) -> Result<()> {
    if tape.shape(a) != tape.shape(b) {
        return Err(Error::shape(ctx, tape.shape(b), tape.shape(a)));
    }
    Ok(())
}

/// Discriminator objective: half the mean squared distance of real scores
/// to 1 plus that of fake scores to 0.
pub fn lsgan_d_loss(tape: &mut Tape, d_real: Var, d_fake: Var) -> Result<Var> {
    same_shape(tape, d_fake, d_real, "discriminator scores")?;
    let r = tape.add_scalar(d_real, -1.0);
    let r = tape.square(r);
    let r = tape.mean(r);
    let f = tape.square(d_fake);
    let f = tape.mean(f);
    let s = tape.add(r, f)?;
    Ok(tape.mul_scalar(s, 0.5))
}

/// Generator adversarial objective: mean squared distance of fake scores
/// to 1.
pub fn lsgan_g_loss(tape: &mut Tape, d_fake: Var) -> Var {
    let f = tape.add_scalar(d_fake, -1.0);
    let f = tape.square(f);
    tape.mean(f)
}

/// Mean squared voxel difference.
pub fn recon_loss(tape: &mut Tape, y_hat: Var, y: Var) -> Result<Var> {
    same_shape(tape, y_hat, y, "reconstruction loss")?;
    Ok(tape.mse(y_hat, y)?)
}

/// Average over both views of the mean squared projection difference.
pub fn projection_loss(tape: &mut Tape, projector: &Projector, y_hat: Var, y: Var) -> Result<Var> {
    same_shape(tape, y_hat, y, "projection loss")?;
    let y = tape.detach(y);
    let mut total = None;
    for view in View::BOTH {
        let a = projector.project_var(tape, view, y_hat)?;
        let b = projector.project_var(tape, view, y)?;
        let m = tape.mse(a, b)?;
        total = Some(match total {
            None => m,
            Some(t) => tape.add(t, m)?,
        });
    }
    Ok(tape.mul_scalar(total.expect("two views"), 0.5))
}

/// One minus the soft dice ratio per sample and foreground channel of
/// `[B, C, ...]` probabilities, averaged over samples and channels 1..C.
///
/// The denominator sums squared probabilities. On hard masks this is the
/// usual overlap ratio; on soft masks it makes identical inputs score
/// exactly zero.
pub fn soft_dice_foreground(tape: &mut Tape, pred: Var, target: Var) -> Result<Var> {
    same_shape(tape, pred, target, "dice")?;
    let shape = tape.shape(pred).to_vec();
    if shape.len() < 3 || shape[1] < 2 {
        return Err(Error::shape("dice probabilities [B, C, ...]", &[0, NUM_LABELS], &shape));
    }
    let (b, c) = (shape[0], shape[1]);
    let prod = tape.mul(pred, target)?;
    let inter = tape.sum_spatial(prod)?;
    let pa = tape.square(pred);
    let pb = tape.square(target);
    let sa = tape.sum_spatial(pa)?;
    let sb = tape.sum_spatial(pb)?;
    let num = tape.mul_scalar(inter, 2.0);
    let num = tape.add_scalar(num, DICE_EPS);
    let den = tape.add(sa, sb)?;
    let den = tape.add_scalar(den, DICE_EPS);
    let ratio = tape.div(num, den)?;
    let mut mask = vec![1.0; b * c];
    for i in 0..b {
        mask[i * c] = 0.0;
    }
    let mask = tape.constant(Tensor::new(vec![b, c], mask)?);
    let kept = tape.mul(ratio, mask)?;
    let total = tape.sum(kept);
    let mean = tape.mul_scalar(total, -1.0 / (b * (c - 1)) as f64);
    Ok(tape.add_scalar(mean, 1.0))
}

/// Soft dice between the frozen segmentation of `y_hat` and that of the
/// detached target `y`.
pub fn dice_seg_loss(tape: &mut Tape, seg: &SegNet, y_hat: Var, y: Var) -> Result<Var> {
    same_shape(tape, y_hat, y, "segmentation loss")?;
    let vars = bind_constant(seg.params(), tape);
    let y = tape.detach(y);
    let target = seg.forward(tape, &vars, y)?;
    let pred = seg.forward(tape, &vars, y_hat)?;
    soft_dice_foreground(tape, pred, target)
}

/// Rearranges `[B, 1, X, Y, Z]` into a stack of 2D slices.
fn slices(tape: &mut Tape, v: Var, axis: SliceAxis) -> Result<Var> {
    let s = tape.shape(v).to_vec();
    if s.len() != 5 || s[1] != 1 {
        return Err(Error::shape("perceptual loss volume [B, 1, X, Y, Z]", &[s.first().copied().unwrap_or(1), 1, 0, 0, 0], &s));
    }
    let (b, x, y, z) = (s[0], s[2], s[3], s[4]);
    Ok(match axis {
        SliceAxis::Axial => {
            let p = tape.permute(v, &[0, 4, 1, 2, 3])?;
            tape.reshape(p, &[b * z, 1, x, y])?
        }
        SliceAxis::Coronal => {
            let p = tape.permute(v, &[0, 3, 1, 2, 4])?;
            tape.reshape(p, &[b * y, 1, x, z])?
        }
    })
}

/// Feature distance summed over the extractor's levels and averaged over
/// slices and feature elements.
pub fn perceptual_loss(tape: &mut Tape, fx: &FeatureExtractor, y_hat: Var, y: Var, opts: PerceptualOptions) -> Result<Var> {
    same_shape(tape, y_hat, y, "perceptual loss")?;
    let y = tape.detach(y);
    let sa = slices(tape, y_hat, opts.slice_axis)?;
    let sb = slices(tape, y, opts.slice_axis)?;
    let fa = fx.forward(tape, sa)?;
    let fb = fx.forward(tape, sb)?;
    let mut total = None;
    for (a, b) in fa.into_iter().zip(fb) {
        let d = tape.sub(a, b)?;
        let d = match opts.norm {
            FeatureNorm::L2 => tape.square(d),
            FeatureNorm::L1 => tape.abs(d),
        };
        let m = tape.mean(d);
        total = Some(match total {
            None => m,
            Some(t) => tape.add(t, m)?,
        });
    }
    Ok(total.expect("at least one feature level"))
}

/// Scalar value of every term for one step, with the weighted total.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub step: u64,
    pub dis: f64,
    pub gen: f64,
    pub r: f64,
    pub proj: f64,
    pub s: f64,
    pub p: f64,
    pub total: f64,
}

impl LossBreakdown {
    /// Weighted sum of the generator terms in a fixed order.
    pub fn weighted_total(&self, w: &LossWeights) -> f64 {
        w.lambda_gen * self.gen + w.lambda_r * self.r + w.lambda_proj * self.proj + w.lambda_s * self.s + w.lambda_p * self.p
    }
}

/// Generator loss terms recorded on a tape. Terms whose weight is zero may
/// be absent.
#[derive(Clone, Copy, Debug, Default)]
pub struct LossTerms {
    pub gen: Option<Var>,
    pub r: Option<Var>,
    pub proj: Option<Var>,
    pub s: Option<Var>,
    pub p: Option<Var>,
}

pub fn check_finite(term: &'static str, value: f64, step: u64) -> Result<()> {
    if value.is_finite() {
        Ok(())
    } else {
        Err(Error::NonFiniteLoss { term, step })
    }
}

/// Weighted sum of the present terms. Terms with zero weight are skipped
/// entirely, so leaving them out changes nothing.
pub fn total_generator_loss(tape: &mut Tape, terms: &LossTerms, w: &LossWeights, step: u64) -> Result<(Var, LossBreakdown)> {
    w.validate()?;
    let mut b = LossBreakdown {
        step,
        ..LossBreakdown::default()
    };
    let entries: [(&'static str, Option<Var>, f64, &mut f64); 5] = [
        ("gen", terms.gen, w.lambda_gen, &mut b.gen),
        ("r", terms.r, w.lambda_r, &mut b.r),
        ("proj", terms.proj, w.lambda_proj, &mut b.proj),
        ("s", terms.s, w.lambda_s, &mut b.s),
        ("p", terms.p, w.lambda_p, &mut b.p),
    ];
    let mut total: Option<Var> = None;
    for (name, var, weight, slot) in entries {
        let Some(v) = var else {
            if weight != 0.0 {
                return Err(Error::config(format!("loss.weights.lambda_{name}"), "term has nonzero weight but was not computed"));
            }
            continue;
        };
        let value = tape.scalar(v);
        check_finite(name, value, step)?;
        *slot = value;
        if weight == 0.0 {
            continue;
        }
        let t = tape.mul_scalar(v, weight);
        total = Some(match total {
            None => t,
            Some(acc) => tape.add(acc, t)?,
        });
    }
    let total = match total {
        Some(t) => t,
        None => tape.constant(Tensor::scalar(0.0)),
    };
    b.total = tape.scalar(total);
    check_finite("total", b.total, step)?;
    Ok((total, b))
}

/// The networks and operators the generator objective needs. The
/// segmentation and feature networks are only required when their
/// weights are nonzero.
pub struct GeneratorObjective<'a> {
    pub config: LossConfig,
    pub projector: &'a Projector,
    pub seg: Option<&'a SegNet>,
    pub features: Option<&'a FeatureExtractor>,
}

impl<'a> GeneratorObjective<'a> {
    pub fn new(config: LossConfig, projector: &'a Projector, seg: Option<&'a SegNet>, features: Option<&'a FeatureExtractor>) -> Result<Self> {
        config.weights.validate()?;
        if config.weights.lambda_s > 0.0 && seg.is_none() {
            return Err(Error::config("loss.weights.lambda_s", "nonzero but no segmentation network was given"));
        }
        if config.weights.lambda_p > 0.0 && features.is_none() {
            return Err(Error::config("loss.weights.lambda_p", "nonzero but no feature extractor was given"));
        }
        Ok(GeneratorObjective {
            config,
            projector,
            seg,
            features,
        })
    }

    /// Records every term with nonzero weight (plus the always-cheap voxel,
    /// projection and adversarial terms) and their weighted total.
    pub fn evaluate(&self, tape: &mut Tape, d_fake: Var, y_hat: Var, y: Var, step: u64) -> Result<(Var, LossBreakdown)> {
        let w = &self.config.weights;
        let mut terms = LossTerms {
            gen: Some(lsgan_g_loss(tape, d_fake)),
            r: Some(recon_loss(tape, y_hat, y)?),
            proj: Some(projection_loss(tape, self.projector, y_hat, y)?),
            ..LossTerms::default()
        };
        if w.lambda_s > 0.0 {
            let seg = self.seg.expect("checked in new");
            terms.s = Some(dice_seg_loss(tape, seg, y_hat, y)?);
        }
        if w.lambda_p > 0.0 {
            let fx = self.features.expect("checked in new");
            terms.p = Some(perceptual_loss(tape, fx, y_hat, y, self.config.perceptual)?);
        }
        total_generator_loss(tape, &terms, w, step)
    }
}

pub const LOSS_LOG_HEADER: [&str; 8] = ["step", "dis", "gen", "r", "proj", "s", "p", "total"];

/// Append-only CSV of per-step loss breakdowns.
#[derive(Debug)]
pub struct LossLog {
    path: PathBuf,
    writer: csv::Writer<File>,
}

impl LossLog {
    /// Creates a new log with a header row.
    pub fn create(path: &Path) -> Result<Self> {
        if let Some(dir) = path.parent() {
            std::fs::create_dir_all(dir).map_err(io_err(dir))?;
        }
        let file = File::create(path).map_err(io_err(path))?;
        let mut writer = csv::Writer::from_writer(file);
        writer.write_record(LOSS_LOG_HEADER).map_err(|e| csv_err(path, e))?;
        writer.flush().map_err(io_err(path))?;
        Ok(LossLog {
            path: path.to_path_buf(),
            writer,
        })
    }

    /// Reopens an existing log, discarding anything past byte `offset`.
    pub fn resume(path: &Path, offset: u64) -> Result<Self> {
        let mut file = OpenOptions::new().read(true).write(true).open(path).map_err(io_err(path))?;
        let len = file.metadata().map_err(io_err(path))?.len();
        if len < offset {
            return Err(Error::Resume(format!("{} holds {len} bytes but the checkpoint expects {offset}", path.display())));
        }
        file.set_len(offset).map_err(io_err(path))?;
        file.seek(SeekFrom::End(0)).map_err(io_err(path))?;
        Ok(LossLog {
            path: path.to_path_buf(),
            writer: csv::WriterBuilder::new().has_headers(false).from_writer(file),
        })
    }

    pub fn append(&mut self, b: &LossBreakdown) -> Result<()> {
        let row = [
            b.step.to_string(),
            fmt(b.dis),
            fmt(b.gen),
            fmt(b.r),
            fmt(b.proj),
            fmt(b.s),
            fmt(b.p),
            fmt(b.total),
        ];
        self.writer.write_record(&row).map_err(|e| csv_err(&self.path, e))?;
        Ok(())
    }

    /// Flushes and returns the current byte length.
    pub fn offset(&mut self) -> Result<u64> {
        self.writer.flush().map_err(io_err(&self.path))?;
        let mut file = self.writer.get_ref();
        file.stream_position().map_err(io_err(&self.path))
    }

    pub fn path(&self) -> &Path {
        &self.path
    }
}

/// Shortest representation that parses back to the same value.
fn fmt(v: f64) -> String {
    format!("{v:?}")
}

fn csv_err(path: &Path, e: csv::Error) -> Error {
    Error::Io {
        path: path.to_path_buf(),
        source: std::io::Error::other(e),
    }
}

/// Reads a loss log back.
pub fn read_loss_log(path: &Path) -> Result<Vec<LossBreakdown>> {
    let mut r = csv::Reader::from_path(path).map_err(|e| csv_err(path, e))?;
    let headers = r.headers().map_err(|e| csv_err(path, e))?.clone();
    if headers.iter().collect::<Vec<_>>() != LOSS_LOG_HEADER {
        return Err(Error::CorruptHeader {
            path: path.to_path_buf(),
            reason: format!("unexpected loss log columns {headers:?}"),
        });
    }
    let mut out = Vec::new();
    for rec in r.records() {
        let rec = rec.map_err(|e| csv_err(path, e))?;
        let num = |i: usize| -> Result<f64> {
            rec[i].parse().map_err(|_| Error::CorruptHeader {
                path: path.to_path_buf(),
                reason: format!("bad value {:?} in column {}", &rec[i], LOSS_LOG_HEADER[i]),
            })
        };
        out.push(LossBreakdown {
            step: num(0)? as u64,
            dis: num(1)?,
            gen: num(2)?,
            r: num(3)?,
            proj: num(4)?,
            s: num(5)?,
            p: num(6)?,
            total: num(7)?,
        });
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn var(tape: &mut Tape, shape: &[usize], data: Vec<f64>) -> Var {
        tape.constant(Tensor::new(shape.to_vec(), data).unwrap())
    }

    #[test]
    fn lsgan_examples() {
        let mut t = Tape::new();
        for (r, f, want) in [(1.0, 0.0, 0.0), (0.5, 0.5, 0.25), (0.0, 1.0, 1.0)] {
            let dr = var(&mut t, &[2, 2], vec![r; 4]);
            let df = var(&mut t, &[2, 2], vec![f; 4]);
            let l = lsgan_d_loss(&mut t, dr, df).unwrap();
            assert_eq!(t.scalar(l), want);
        }
        for (f, want) in [(1.0, 0.0), (0.0, 1.0), (0.5, 0.25)] {
            let df = var(&mut t, &[3], vec![f; 3]);
            let l = lsgan_g_loss(&mut t, df);
            assert_eq!(t.scalar(l), want);
        }
        let a = var(&mut t, &[2], vec![0.0; 2]);
        let b = var(&mut t, &[3], vec![0.0; 3]);
        assert!(lsgan_d_loss(&mut t, a, b).is_err());
    }

    #[test]
    fn recon_examples() {
        let mut t = Tape::new();
        let y = var(&mut t, &[2], vec![0.0, 0.5]);
        let yh = var(&mut t, &[2], vec![0.5, 0.5]);
        let l = recon_loss(&mut t, yh, y).unwrap();
        assert_eq!(t.scalar(l), 0.125);
        let l = recon_loss(&mut t, y, y).unwrap();
        assert_eq!(t.scalar(l), 0.0);
    }

    #[test]
    fn dice_hard_case() {
        let mut t = Tape::new();
        // Channel 0 is background and ignored; channel 1 holds the example.
        let target = var(&mut t, &[1, 2, 4], vec![0.0, 0.0, 1.0, 1.0, 1.0, 1.0, 0.0, 0.0]);
        let pred = var(&mut t, &[1, 2, 4], vec![0.0, 1.0, 0.0, 1.0, 1.0, 0.0, 1.0, 0.0]);
        let l = soft_dice_foreground(&mut t, pred, target).unwrap();
        assert!((t.scalar(l) - 0.5).abs() < 1e-6);
        let disjoint = var(&mut t, &[1, 2, 4], vec![1.0, 1.0, 0.0, 1.0, 0.0, 0.0, 1.0, 0.0]);
        let other = var(&mut t, &[1, 2, 4], vec![0.0, 0.0, 1.0, 0.0, 1.0, 1.0, 0.0, 1.0]);
        let l = soft_dice_foreground(&mut t, disjoint, other).unwrap();
        assert!((t.scalar(l) - 1.0).abs() < 1e-6);
        let empty = var(&mut t, &[1, 2, 2], vec![1.0, 1.0, 0.0, 0.0]);
        let l = soft_dice_foreground(&mut t, empty, empty).unwrap();
        assert_eq!(t.scalar(l), 0.0);
    }

    #[test]
    fn weighted_total_of_unit_terms() {
        let mut t = Tape::new();
        let one = t.constant(Tensor::scalar(1.0));
        let terms = LossTerms {
            gen: Some(one),
            r: Some(one),
            proj: Some(one),
            s: Some(one),
            p: Some(one),
        };
        let (_, b) = total_generator_loss(&mut t, &terms, &LossWeights::default(), 0).unwrap();
        assert!((b.total - 22.6).abs() < 1e-12);
        assert!((b.total - b.weighted_total(&LossWeights::default())).abs() < 1e-12);
        let zero = LossWeights {
            lambda_gen: 0.0,
            lambda_r: 0.0,
            lambda_proj: 0.0,
            lambda_s: 0.0,
            lambda_p: 0.0,
        };
        let (_, b) = total_generator_loss(&mut t, &terms, &zero, 0).unwrap();
        assert_eq!(b.total, 0.0);
    }

    #[test]
    fn non_finite_term_is_named() {
        let mut t = Tape::new();
        let one = t.constant(Tensor::scalar(1.0));
        let bad = t.constant(Tensor::scalar(f64::NAN));
        let terms = LossTerms {
            gen: Some(one),
            r: Some(one),
            proj: Some(bad),
            ..LossTerms::default()
        };
        let err = total_generator_loss(&mut t, &terms, &LossWeights::baseline(), 7).unwrap_err();
        assert!(matches!(err, Error::NonFiniteLoss { term: "proj", step: 7 }));
    }

    #[test]
    fn weights_are_validated() {
        let w = LossWeights {
            lambda_s: -1.0,
            ..LossWeights::default()
        };
        assert!(matches!(w.validate(), Err(Error::Config { .. })));
        let w = LossWeights {
            lambda_p: f64::INFINITY,
            ..LossWeights::default()
        };
        assert!(w.validate().is_err());
    }

    #[test]
    fn log_round_trip_and_resume() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("loss.csv");
        let mut log = LossLog::create(&p).unwrap();
        let row = |step| LossBreakdown {
            step,
            dis: 0.1,
            gen: 1.0 / 3.0,
            total: 2.5,
            ..LossBreakdown::default()
        };
        log.append(&row(1)).unwrap();
        let off = log.offset().unwrap();
        log.append(&row(2)).unwrap();
        log.offset().unwrap();
        drop(log);
        let mut log = LossLog::resume(&p, off).unwrap();
        log.append(&row(3)).unwrap();
        log.offset().unwrap();
        let back = read_loss_log(&p).unwrap();
        assert_eq!(back, vec![row(1), row(3)]);
        assert!(std::fs::read_to_string(&p).unwrap().starts_with("step,dis,gen,r,proj,s,p,total\n"));
        assert!(matches!(LossLog::resume(&p, 1 << 20), Err(Error::Resume(_))));
    }
}
