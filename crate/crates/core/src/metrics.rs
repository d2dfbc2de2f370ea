//! Image-quality and overlap metrics on normalized volumes and label masks.
//!
//! Volumes are flat `[X, Y, Z]` arrays with `z` fastest, as produced by the
//! phantom and storage modules.

use crate::error::{Error, Result};
use crate::phantoms::{LabelMask, HU_SPAN, LABEL_BONE, LABEL_LIVER, LABEL_LUNG};

pub const SSIM_WINDOW: usize = 11;
pub const SSIM_SIGMA: f64 = 1.5;
pub const SSIM_K1: f64 = 0.01;
pub const SSIM_K2: f64 = 0.03;

/// Foreground organs in report order.
pub const ORGANS: [(u8, &str); 3] = [(LABEL_LUNG, "lung"), (LABEL_LIVER, "liver"), (LABEL_BONE, "bone")];

fn check_len(a: &[f64], b: &[f64]) -> Result<()> {
    if a.len() != b.len() {
        return Err(Error::shape("metric inputs", &[b.len()], &[a.len()]));
    }
    Ok(())
}

pub fn mse(a: &[f64], b: &[f64]) -> Result<f64> {
    check_len(a, b)?;
    if a.is_empty() {
        return Err(Error::shape("metric inputs", &[1], &[0]));
    }
    Ok(a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>() / a.len() as f64)
}

/// Peak signal-to-noise ratio with peak 1. Identical inputs give `+inf`.
pub fn psnr(y_hat: &[f64], y: &[f64]) -> Result<f64> {
    let m = mse(y_hat, y)?;
    Ok(if m == 0.0 { f64::INFINITY } else { -10.0 * m.log10() })
}

/// Root mean squared error in Hounsfield units of normalized volumes.
pub fn rmse_hu(y_hat: &[f64], y: &[f64]) -> Result<f64> {
    Ok(mse(y_hat, y)?.sqrt() * HU_SPAN)
}

/// Normalized 11x11 Gaussian window, row-major.
pub fn gaussian_window() -> Vec<f64> {
    let h = (SSIM_WINDOW / 2) as f64;
    let g: Vec<f64> = (0..SSIM_WINDOW).map(|i| (-((i as f64 - h).powi(2)) / (2.0 * SSIM_SIGMA * SSIM_SIGMA)).exp()).collect();
    let s: f64 = g.iter().sum();
    let g: Vec<f64> = g.iter().map(|v| v / s).collect();
    let mut w = Vec::with_capacity(SSIM_WINDOW * SSIM_WINDOW);
    for a in &g {
        for b in &g {
            w.push(a * b);
        }
    }
    w
}

/// Mean SSIM of one `w x h` image pair (row-major) over all fully
/// contained window positions.
pub fn ssim_2d(a: &[f64], b: &[f64], rows: usize, cols: usize) -> Result<f64> {
    check_len(a, b)?;
    if a.len() != rows * cols {
        return Err(Error::shape("ssim image", &[rows, cols], &[a.len()]));
    }
    if rows < SSIM_WINDOW || cols < SSIM_WINDOW {
        return Err(Error::shape("ssim slice (at least the 11x11 window)", &[SSIM_WINDOW, SSIM_WINDOW], &[rows, cols]));
    }
    let w = gaussian_window();
    let c1 = (SSIM_K1 * 1.0f64).powi(2);
    let c2 = (SSIM_K2 * 1.0f64).powi(2);
    let (or, oc) = (rows - SSIM_WINDOW + 1, cols - SSIM_WINDOW + 1);
    let mut total = 0.0;
    for i in 0..or {
        for j in 0..oc {
            let (mut ma, mut mb, mut saa, mut sbb, mut sab) = (0.0, 0.0, 0.0, 0.0, 0.0);
            for u in 0..SSIM_WINDOW {
                for v in 0..SSIM_WINDOW {
                    let k = w[u * SSIM_WINDOW + v];
                    let (x, y) = (a[(i + u) * cols + j + v], b[(i + u) * cols + j + v]);
                    ma += k * x;
                    mb += k * y;
                    saa += k * x * x;
                    sbb += k * y * y;
                    sab += k * x * y;
                }
            }
            let va = saa - ma * ma;
            let vb = sbb - mb * mb;
            let cov = sab - ma * mb;
            total += ((2.0 * ma * mb + c1) * (2.0 * cov + c2)) / ((ma * ma + mb * mb + c1) * (va + vb + c2));
        }
    }
    Ok(total / (or * oc) as f64)
}

/// SSIM averaged over axial slices of `[X, Y, Z]` volumes.
pub fn ssim(y_hat: &[f64], y: &[f64], grid: [usize; 3]) -> Result<f64> {
    check_len(y_hat, y)?;
    let [nx, ny, nz] = grid;
    if y.len() != nx * ny * nz || nz == 0 {
        return Err(Error::shape("ssim volume", &grid, &[y.len()]));
    }
    let mut total = 0.0;
    let mut sa = vec![0.0; nx * ny];
    let mut sb = vec![0.0; nx * ny];
    for iz in 0..nz {
        for p in 0..nx * ny {
            sa[p] = y_hat[p * nz + iz];
            sb[p] = y[p * nz + iz];
        }
        total += ssim_2d(&sa, &sb, nx, ny)?;
    }
    Ok(total / nz as f64)
}

/// Dice overlap of one organ label. Both empty scores 1.
pub fn dsc(a: &LabelMask, b: &LabelMask, organ: u8) -> Result<f64> {
    if !ORGANS.iter().any(|&(l, _)| l == organ) {
        return Err(Error::config("organ", format!("unknown organ label {organ}")));
    }
    dsc_labels(&a.data, &b.data, organ)
}

/// Dice overlap of `organ` on raw label arrays.
pub fn dsc_labels(a: &[u8], b: &[u8], organ: u8) -> Result<f64> {
    if a.len() != b.len() {
        return Err(Error::shape("dsc masks", &[b.len()], &[a.len()]));
    }
    let (mut na, mut nb, mut both) = (0usize, 0usize, 0usize);
    for (&x, &y) in a.iter().zip(b) {
        let (x, y) = (x == organ, y == organ);
        na += x as usize;
        nb += y as usize;
        both += (x && y) as usize;
    }
    Ok(if na + nb == 0 { 1.0 } else { 2.0 * both as f64 / (na + nb) as f64 })
}

/// Per-organ dice in [`ORGANS`] order and their mean.
pub fn organ_dsc(a: &[u8], b: &[u8]) -> Result<([f64; 3], f64)> {
    let mut d = [0.0; 3];
    for (slot, &(organ, _)) in d.iter_mut().zip(&ORGANS) {
        *slot = dsc_labels(a, b, organ)?;
    }
    Ok((d, d.iter().sum::<f64>() / 3.0))
}

/// Population mean and standard deviation.
pub fn mean_std(values: &[f64]) -> (f64, f64) {
    if values.is_empty() {
        return (f64::NAN, f64::NAN);
    }
    let n = values.len() as f64;
    let m = values.iter().sum::<f64>() / n;
    let v = values.iter().map(|x| (x - m) * (x - m)).sum::<f64>() / n;
    (m, v.sqrt())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn psnr_examples() {
        let y = vec![0.0; 10];
        assert_eq!(psnr(&y, &y).unwrap(), f64::INFINITY);
        assert_eq!(psnr(&[1.0; 10], &y).unwrap(), 0.0);
        let yh = vec![0.1; 10];
        assert!((psnr(&yh, &y).unwrap() - 20.0).abs() < 1e-9);
    }

    #[test]
    fn rmse_examples() {
        let y = vec![0.2; 8];
        assert_eq!(rmse_hu(&y, &y).unwrap(), 0.0);
        let yh: Vec<f64> = y.iter().map(|v| v + 0.05).collect();
        assert!((rmse_hu(&yh, &y).unwrap() - 204.75).abs() < 1e-9);
    }

    #[test]
    fn dsc_examples() {
        let a = [1, 1, 0, 0];
        let b = [1, 0, 1, 0];
        assert_eq!(dsc_labels(&a, &b, 1).unwrap(), 0.5);
        assert_eq!(dsc_labels(&a, &a, 1).unwrap(), 1.0);
        assert_eq!(dsc_labels(&[1, 0], &[0, 1], 1).unwrap(), 0.0);
        assert_eq!(dsc_labels(&[0, 0], &[0, 0], 2).unwrap(), 1.0);
        assert_eq!(dsc_labels(&[2, 0], &[0, 0], 2).unwrap(), 0.0);
        let m = LabelMask {
            data: vec![0; 4],
            grid: [1, 1, 4],
        };
        assert!(matches!(dsc(&m, &m, 7), Err(Error::Config { .. })));
    }

    #[test]
    fn ssim_constant_pair_and_small_slice() {
        let a = vec![0.3; 16 * 16 * 2];
        assert!((ssim(&a, &a, [16, 16, 2]).unwrap() - 1.0).abs() < 1e-12);
        assert!(ssim(&a[..8 * 8 * 2], &a[..8 * 8 * 2], [8, 8, 2]).is_err());
    }

    #[test]
    fn window_is_normalized() {
        let w = gaussian_window();
        assert!((w.iter().sum::<f64>() - 1.0).abs() < 1e-14);
        assert_eq!(w[5 * 11 + 5], w.iter().cloned().fold(0.0, f64::max));
    }
}
