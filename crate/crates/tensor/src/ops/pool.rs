//! Factor-2 average pooling and nearest-neighbour upsampling over the
//! spatial axes of `[B, C, H, W]` or `[B, C, D, H, W]` arrays.

use crate::error::{Result, TensorError};

#[derive(Clone, Debug)]
pub(crate) struct PoolDims {
    pub bc: usize,
    /// Fine (full-resolution) spatial extent as `[D, H, W]`; `D == 1` for 2D.
    pub fine: [usize; 3],
    pub factor: [usize; 3],
}

impl PoolDims {
    pub fn coarse(&self) -> [usize; 3] {
        [
            self.fine[0] / self.factor[0],
            self.fine[1] / self.factor[1],
            self.fine[2] / self.factor[2],
        ]
    }

    fn spatial(shape: &[usize], op: &'static str) -> Result<(usize, [usize; 3], [usize; 3])> {
        match shape.len() {
            4 => Ok((shape[0] * shape[1], [1, shape[2], shape[3]], [1, 2, 2])),
            5 => Ok((shape[0] * shape[1], [shape[2], shape[3], shape[4]], [2, 2, 2])),
            _ => Err(TensorError::invalid(op, shape, "expected rank 4 or 5")),
        }
    }

    pub fn for_pool(shape: &[usize]) -> Result<Self> {
        let (bc, fine, factor) = Self::spatial(shape, "avg_pool2")?;
        if (0..3).any(|a| fine[a] % factor[a] != 0) {
            return Err(TensorError::OddSpatial {
                shape: shape.to_vec(),
            });
        }
        Ok(PoolDims { bc, fine, factor })
    }

    pub fn for_upsample(shape: &[usize]) -> Result<Self> {
        let (bc, coarse, factor) = Self::spatial(shape, "upsample2")?;
        let fine = [coarse[0] * factor[0], coarse[1] * factor[1], coarse[2] * factor[2]];
        Ok(PoolDims { bc, fine, factor })
    }

    pub fn coarse_shape(&self, shape: &[usize]) -> Vec<usize> {
        let mut s = shape.to_vec();
        let c = self.coarse();
        let r = s.len();
        s[r - 2] = c[1];
        s[r - 1] = c[2];
        if r == 5 {
            s[2] = c[0];
        }
        s
    }

    pub fn fine_shape(&self, shape: &[usize]) -> Vec<usize> {
        let mut s = shape.to_vec();
        let r = s.len();
        s[r - 2] = self.fine[1];
        s[r - 1] = self.fine[2];
        if r == 5 {
            s[2] = self.fine[0];
        }
        s
    }

    /// Calls `f(fine_index, coarse_index)` for every fine element.
    fn for_each(&self, mut f: impl FnMut(usize, usize)) {
        let [d, h, w] = self.fine;
        let [cd, ch, cw] = self.coarse();
        let [fd, fh, fw] = self.factor;
        for p in 0..self.bc {
            for z in 0..d {
                for y in 0..h {
                    let fine_row = ((p * d + z) * h + y) * w;
                    let coarse_row = ((p * cd + z / fd) * ch + y / fh) * cw;
                    for x in 0..w {
                        f(fine_row + x, coarse_row + x / fw);
                    }
                }
            }
        }
    }

    fn block(&self) -> f64 {
        (self.factor[0] * self.factor[1] * self.factor[2]) as f64
    }
}

pub(crate) fn avg_pool(d: &PoolDims, x: &[f64]) -> Vec<f64> {
    let [cd, ch, cw] = d.coarse();
    let mut out = vec![0.0; d.bc * cd * ch * cw];
    d.for_each(|fi, ci| out[ci] += x[fi]);
    let inv = 1.0 / d.block();
    out.iter_mut().for_each(|v| *v *= inv);
    out
}

pub(crate) fn avg_pool_backward(d: &PoolDims, g: &[f64], gx: &mut [f64]) {
    let inv = 1.0 / d.block();
    d.for_each(|fi, ci| gx[fi] += g[ci] * inv);
}

pub(crate) fn upsample(d: &PoolDims, x: &[f64]) -> Vec<f64> {
    let [fd, fh, fw] = d.fine;
    let mut out = vec![0.0; d.bc * fd * fh * fw];
    d.for_each(|fi, ci| out[fi] = x[ci]);
    out
}

pub(crate) fn upsample_backward(d: &PoolDims, g: &[f64], gx: &mut [f64]) {
    d.for_each(|fi, ci| gx[ci] += g[fi]);
}
