//! 2D and 3D convolution via chunked im2col + GEMM. A rank-4 `[B, C, H, W]`
//! input is treated as a 3D volume of depth one.

use rayon::prelude::*;

use crate::determinism::deterministic_reductions;
use crate::error::{Result, TensorError};
use crate::gemm::{gemm, MatRef};

/// Stride and symmetric zero padding, applied to every spatial axis.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvSpec {
    pub stride: usize,
    pub padding: usize,
}

impl ConvSpec {
    pub const SAME3: ConvSpec = ConvSpec { stride: 1, padding: 1 };

    pub fn new(stride: usize, padding: usize) -> Self {
        ConvSpec { stride, padding }
    }
}

/// Target number of output columns per GEMM call.
const CHUNK_COLS: usize = 4096;

#[derive(Clone, Debug)]
pub(crate) struct ConvDims {
    pub rank: usize,
    pub batch: usize,
    pub ci: usize,
    pub co: usize,
    pub input: [usize; 3],
    pub kernel: [usize; 3],
    pub stride: [usize; 3],
    pub pad: [usize; 3],
    pub output: [usize; 3],
}

impl ConvDims {
    pub fn new(x: &[usize], w: &[usize], spec: ConvSpec) -> Result<Self> {
        let rank = x.len();
        if !(rank == 4 || rank == 5) || w.len() != rank {
            return Err(TensorError::shape("conv", x, w));
        }
        if w[1] != x[1] {
            return Err(TensorError::shape("conv", x, w));
        }
        if spec.stride == 0 {
            return Err(TensorError::invalid("conv", x, "stride must be positive"));
        }
        let (input, kernel, stride, pad) = if rank == 4 {
            (
                [1, x[2], x[3]],
                [1, w[2], w[3]],
                [1, spec.stride, spec.stride],
                [0, spec.padding, spec.padding],
            )
        } else {
            (
                [x[2], x[3], x[4]],
                [w[2], w[3], w[4]],
                [spec.stride; 3],
                [spec.padding; 3],
            )
        };
        let padded: Vec<usize> = (0..3).map(|a| input[a] + 2 * pad[a]).collect();
        if (0..3).any(|a| kernel[a] > padded[a]) {
            return Err(TensorError::KernelTooLarge {
                kernel: w[2..].to_vec(),
                padded: padded[3 - (rank - 2)..].to_vec(),
            });
        }
        let output = [0, 1, 2].map(|a| (padded[a] - kernel[a]) / stride[a] + 1);
        Ok(ConvDims {
            rank,
            batch: x[0],
            ci: x[1],
            co: w[0],
            input,
            kernel,
            stride,
            pad,
            output,
        })
    }

    pub fn k_len(&self) -> usize {
        self.ci * self.kernel.iter().product::<usize>()
    }

    pub fn in_vol(&self) -> usize {
        self.input.iter().product()
    }

    pub fn out_vol(&self) -> usize {
        self.output.iter().product()
    }

    fn plane(&self) -> usize {
        self.output[1] * self.output[2]
    }

    fn planes_per_chunk(&self) -> usize {
        (CHUNK_COLS / self.plane().max(1)).clamp(1, self.output[0])
    }

    pub fn out_shape(&self) -> Vec<usize> {
        let mut s = vec![self.batch, self.co];
        if self.rank == 4 {
            s.extend_from_slice(&self.output[1..]);
        } else {
            s.extend_from_slice(&self.output);
        }
        s
    }

    /// Iterates `(first_plane, n_planes)` chunks along the output depth axis.
    fn chunks(&self) -> impl Iterator<Item = (usize, usize)> {
        let np = self.planes_per_chunk();
        let od = self.output[0];
        (0..od).step_by(np).map(move |s| (s, np.min(od - s)))
    }
}

/// Fills `col` (`[k_len, n_planes * plane]`) from one batch item of `x`.
fn im2col(d: &ConvDims, x: &[f64], od0: usize, np: usize, col: &mut [f64]) {
    let [id, ih, iw] = d.input;
    let [kd, kh, kw] = d.kernel;
    let [sd, sh, sw] = d.stride;
    let [pd, ph, pw] = d.pad;
    let [_, oh, ow] = d.output;
    let plane = oh * ow;
    let cols = np * plane;
    for c in 0..d.ci {
        for kz in 0..kd {
            for ky in 0..kh {
                for kx in 0..kw {
                    let r = ((c * kd + kz) * kh + ky) * kw + kx;
                    let row = &mut col[r * cols..(r + 1) * cols];
                    for pz in 0..np {
                        let dst_plane = &mut row[pz * plane..(pz + 1) * plane];
                        let iz = ((od0 + pz) * sd + kz) as isize - pd as isize;
                        if iz < 0 || iz >= id as isize {
                            dst_plane.fill(0.0);
                            continue;
                        }
                        for oy in 0..oh {
                            let dst = &mut dst_plane[oy * ow..(oy + 1) * ow];
                            let iy = (oy * sh + ky) as isize - ph as isize;
                            if iy < 0 || iy >= ih as isize {
                                dst.fill(0.0);
                                continue;
                            }
                            let base = ((c * id + iz as usize) * ih + iy as usize) * iw;
                            let src = &x[base..base + iw];
                            for (ox, v) in dst.iter_mut().enumerate() {
                                let ix = (ox * sw + kx) as isize - pw as isize;
                                *v = if ix >= 0 && ix < iw as isize { src[ix as usize] } else { 0.0 };
                            }
                        }
                    }
                }
            }
        }
    }
}

/// Scatter-adds `col` back into one batch item of the input gradient.
fn col2im(d: &ConvDims, col: &[f64], od0: usize, np: usize, gx: &mut [f64]) {
    let [id, ih, iw] = d.input;
    let [kd, kh, kw] = d.kernel;
    let [sd, sh, sw] = d.stride;
    let [pd, ph, pw] = d.pad;
    let [_, oh, ow] = d.output;
    let plane = oh * ow;
    let cols = np * plane;
    for c in 0..d.ci {
        for kz in 0..kd {
            for ky in 0..kh {
                for kx in 0..kw {
                    let r = ((c * kd + kz) * kh + ky) * kw + kx;
                    let row = &col[r * cols..(r + 1) * cols];
                    for pz in 0..np {
                        let iz = ((od0 + pz) * sd + kz) as isize - pd as isize;
                        if iz < 0 || iz >= id as isize {
                            continue;
                        }
                        for oy in 0..oh {
                            let iy = (oy * sh + ky) as isize - ph as isize;
                            if iy < 0 || iy >= ih as isize {
                                continue;
                            }
                            let base = ((c * id + iz as usize) * ih + iy as usize) * iw;
                            let src = &row[pz * plane + oy * ow..pz * plane + (oy + 1) * ow];
                            for (ox, v) in src.iter().enumerate() {
                                let ix = (ox * sw + kx) as isize - pw as isize;
                                if ix >= 0 && ix < iw as isize {
                                    gx[base + ix as usize] += v;
                                }
                            }
                        }
                    }
                }
            }
        }
    }
}

pub(crate) fn conv_forward(d: &ConvDims, x: &[f64], w: &[f64], bias: Option<&[f64]>) -> Vec<f64> {
    let out_vol = d.out_vol();
    let in_b = d.ci * d.in_vol();
    let k = d.k_len();
    let plane = d.plane();
    let mut out = vec![0.0; d.batch * d.co * out_vol];
    out.par_chunks_mut(d.co * out_vol)
        .enumerate()
        .for_each(|(bi, ob)| {
            let xb = &x[bi * in_b..(bi + 1) * in_b];
            let mut col = vec![0.0; k * d.planes_per_chunk() * plane];
            for (od0, np) in d.chunks() {
                let cols = np * plane;
                im2col(d, xb, od0, np, &mut col[..k * cols]);
                gemm(
                    1.0,
                    MatRef::row_major(w, d.co, k),
                    MatRef::row_major(&col[..k * cols], k, cols),
                    0.0,
                    &mut ob[od0 * plane..],
                    out_vol,
                );
            }
            if let Some(b) = bias {
                for (c, bv) in b.iter().enumerate() {
                    ob[c * out_vol..(c + 1) * out_vol].iter_mut().for_each(|v| *v += bv);
                }
            }
        });
    out
}

pub(crate) struct ConvGrads {
    pub x: Option<Vec<f64>>,
    pub w: Option<Vec<f64>>,
    pub b: Option<Vec<f64>>,
}

pub(crate) fn conv_backward(
    d: &ConvDims,
    x: &[f64],
    w: &[f64],
    g: &[f64],
    need: (bool, bool, bool),
) -> ConvGrads {
    let (need_x, need_w, need_b) = need;
    let out_vol = d.out_vol();
    let in_b = d.ci * d.in_vol();
    let k = d.k_len();
    let plane = d.plane();
    // Per batch item: input gradient and weight gradient.
    type Partial = (Option<Vec<f64>>, Option<Vec<f64>>);
    let per_batch: Vec<Partial> = (0..d.batch)
        .into_par_iter()
        .map(|bi| {
            let xb = &x[bi * in_b..(bi + 1) * in_b];
            let gb = &g[bi * d.co * out_vol..(bi + 1) * d.co * out_vol];
            let mut col = vec![0.0; k * d.planes_per_chunk() * plane];
            let mut gx = need_x.then(|| vec![0.0; in_b]);
            let mut gw = need_w.then(|| vec![0.0; d.co * k]);
            for (od0, np) in d.chunks() {
                let cols = np * plane;
                let gchunk = MatRef {
                    data: &gb[od0 * plane..],
                    rows: d.co,
                    cols,
                    rs: out_vol,
                    cs: 1,
                };
                if let Some(gw) = gw.as_mut() {
                    im2col(d, xb, od0, np, &mut col[..k * cols]);
                    gemm(
                        1.0,
                        gchunk,
                        MatRef::row_major(&col[..k * cols], k, cols).t(),
                        1.0,
                        gw,
                        k,
                    );
                }
                if let Some(gx) = gx.as_mut() {
                    gemm(
                        1.0,
                        MatRef::row_major(w, d.co, k).t(),
                        gchunk,
                        0.0,
                        &mut col[..k * cols],
                        cols,
                    );
                    col2im(d, &col[..k * cols], od0, np, gx);
                }
            }
            (gx, gw)
        })
        .collect();

    let gx = need_x.then(|| {
        let mut all = Vec::with_capacity(d.batch * in_b);
        for (gx, _) in &per_batch {
            all.extend_from_slice(gx.as_ref().unwrap());
        }
        all
    });
    let gw = need_w.then(|| {
        let parts: Vec<&Vec<f64>> = per_batch.iter().map(|(_, gw)| gw.as_ref().unwrap()).collect();
        sum_partials(&parts, d.co * k)
    });
    let gb = need_b.then(|| {
        let mut gbias = vec![0.0; d.co];
        for bi in 0..d.batch {
            for (c, acc) in gbias.iter_mut().enumerate() {
                let base = (bi * d.co + c) * out_vol;
                *acc += g[base..base + out_vol].iter().sum::<f64>();
            }
        }
        gbias
    });
    ConvGrads { x: gx, w: gw, b: gb }
}

/// Sums per-batch partial buffers, in batch order when deterministic
/// reductions are requested.
pub(crate) fn sum_partials(parts: &[&Vec<f64>], len: usize) -> Vec<f64> {
    let add = |mut a: Vec<f64>, b: &Vec<f64>| {
        a.iter_mut().zip(b).for_each(|(x, y)| *x += y);
        a
    };
    if deterministic_reductions() {
        parts.iter().fold(vec![0.0; len], |acc, p| add(acc, p))
    } else {
        parts
            .par_iter()
            .fold(|| vec![0.0; len], |acc, p| add(acc, p))
            .reduce(|| vec![0.0; len], |a, b| add(a, &b))
    }
}

/// Transposed convolution with kernel 2 and stride 2 on every spatial axis
/// (depth excluded for rank-4 inputs). Weight layout `[Ci, Co, 2, 2(, 2)]`.
#[derive(Clone, Debug)]
pub(crate) struct UpConvDims {
    pub rank: usize,
    pub batch: usize,
    pub ci: usize,
    pub co: usize,
    pub input: [usize; 3],
    pub factor: [usize; 3],
}

impl UpConvDims {
    pub fn new(x: &[usize], w: &[usize]) -> Result<Self> {
        let rank = x.len();
        let factor = match rank {
            4 => [1, 2, 2],
            5 => [2, 2, 2],
            _ => return Err(TensorError::invalid("conv_transpose2", x, "expected rank 4 or 5")),
        };
        let expect_w: Vec<usize> = [x[1], w.get(1).copied().unwrap_or(0)]
            .into_iter()
            .chain(std::iter::repeat_n(2, rank - 2))
            .collect();
        if w.len() != rank || w != expect_w.as_slice() {
            return Err(TensorError::shape("conv_transpose2", x, w));
        }
        let input = if rank == 4 { [1, x[2], x[3]] } else { [x[2], x[3], x[4]] };
        Ok(UpConvDims {
            rank,
            batch: x[0],
            ci: x[1],
            co: w[1],
            input,
            factor,
        })
    }

    fn taps(&self) -> usize {
        self.factor.iter().product()
    }

    fn in_vol(&self) -> usize {
        self.input.iter().product()
    }

    pub fn out_shape(&self) -> Vec<usize> {
        let out = [0, 1, 2].map(|a| self.input[a] * self.factor[a]);
        let mut s = vec![self.batch, self.co];
        if self.rank == 4 {
            s.extend_from_slice(&out[1..]);
        } else {
            s.extend_from_slice(&out);
        }
        s
    }

    /// Calls `f(tap_row, in_index, out_index)` for every output element of
    /// one channel, where `tap_row` indexes the `[taps]` kernel offsets.
    fn for_each(&self, mut f: impl FnMut(usize, usize, usize)) {
        let [d, h, w] = self.input;
        let [fd, fh, fw] = self.factor;
        let (oh, ow) = (h * fh, w * fw);
        for z in 0..d {
            for y in 0..h {
                for x in 0..w {
                    let i = (z * h + y) * w + x;
                    for az in 0..fd {
                        for ay in 0..fh {
                            for ax in 0..fw {
                                let t = (az * fh + ay) * fw + ax;
                                let o = ((z * fd + az) * oh + y * fh + ay) * ow + x * fw + ax;
                                f(t, i, o);
                            }
                        }
                    }
                }
            }
        }
    }
}

pub(crate) fn conv_transpose_forward(d: &UpConvDims, x: &[f64], w: &[f64], bias: Option<&[f64]>) -> Vec<f64> {
    let n = d.in_vol();
    let taps = d.taps();
    let rows = d.co * taps;
    let out_vol = n * taps;
    let mut out = vec![0.0; d.batch * d.co * out_vol];
    let mut y = vec![0.0; rows * n];
    for bi in 0..d.batch {
        let xb = &x[bi * d.ci * n..(bi + 1) * d.ci * n];
        gemm(
            1.0,
            MatRef::row_major(w, d.ci, rows).t(),
            MatRef::row_major(xb, d.ci, n),
            0.0,
            &mut y,
            n,
        );
        let ob = &mut out[bi * d.co * out_vol..(bi + 1) * d.co * out_vol];
        for c in 0..d.co {
            let oc = &mut ob[c * out_vol..(c + 1) * out_vol];
            let yc = &y[c * taps * n..(c + 1) * taps * n];
            let bv = bias.map_or(0.0, |b| b[c]);
            d.for_each(|t, i, o| oc[o] = yc[t * n + i] + bv);
        }
    }
    out
}

pub(crate) fn conv_transpose_backward(
    d: &UpConvDims,
    x: &[f64],
    w: &[f64],
    g: &[f64],
    need: (bool, bool, bool),
) -> ConvGrads {
    let n = d.in_vol();
    let taps = d.taps();
    let rows = d.co * taps;
    let out_vol = n * taps;
    let mut gy = vec![0.0; rows * n];
    let mut gx = need.0.then(|| vec![0.0; d.batch * d.ci * n]);
    let mut gw = need.1.then(|| vec![0.0; d.ci * rows]);
    let mut gb = need.2.then(|| vec![0.0; d.co]);
    for bi in 0..d.batch {
        let gob = &g[bi * d.co * out_vol..(bi + 1) * d.co * out_vol];
        for c in 0..d.co {
            let gc = &gob[c * out_vol..(c + 1) * out_vol];
            let yc = &mut gy[c * taps * n..(c + 1) * taps * n];
            d.for_each(|t, i, o| yc[t * n + i] = gc[o]);
            if let Some(gb) = gb.as_mut() {
                gb[c] += gc.iter().sum::<f64>();
            }
        }
        let xb = &x[bi * d.ci * n..(bi + 1) * d.ci * n];
        if let Some(gx) = gx.as_mut() {
            gemm(
                1.0,
                MatRef::row_major(w, d.ci, rows),
                MatRef::row_major(&gy, rows, n),
                0.0,
                &mut gx[bi * d.ci * n..(bi + 1) * d.ci * n],
                n,
            );
        }
        if let Some(gw) = gw.as_mut() {
            gemm(
                1.0,
                MatRef::row_major(xb, d.ci, n),
                MatRef::row_major(&gy, rows, n).t(),
                1.0,
                gw,
                rows,
            );
        }
    }
    ConvGrads { x: gx, w: gw, b: gb }
}
