use crate::error::{Result, TensorError};

fn strides(shape: &[usize]) -> Vec<usize> {
    let mut s = vec![1; shape.len()];
    for i in (0..shape.len().saturating_sub(1)).rev() {
        s[i] = s[i + 1] * shape[i + 1];
    }
    s
}

pub(crate) fn check_perm(shape: &[usize], perm: &[usize]) -> Result<Vec<usize>> {
    let mut seen = vec![false; shape.len()];
    if perm.len() != shape.len() {
        return Err(TensorError::invalid("permute", shape, format!("bad permutation {perm:?}")));
    }
    for &p in perm {
        if p >= shape.len() || seen[p] {
            return Err(TensorError::invalid("permute", shape, format!("bad permutation {perm:?}")));
        }
        seen[p] = true;
    }
    Ok(perm.iter().map(|&p| shape[p]).collect())
}

/// Output axis `i` is input axis `perm[i]`.
pub(crate) fn permute(x: &[f64], shape: &[usize], perm: &[usize]) -> Vec<f64> {
    let in_strides = strides(shape);
    let out_shape: Vec<usize> = perm.iter().map(|&p| shape[p]).collect();
    let src_strides: Vec<usize> = perm.iter().map(|&p| in_strides[p]).collect();
    let mut out = Vec::with_capacity(x.len());
    let rank = out_shape.len();
    let mut idx = vec![0usize; rank];
    let mut src = 0usize;
    for _ in 0..x.len() {
        out.push(x[src]);
        for a in (0..rank).rev() {
            idx[a] += 1;
            src += src_strides[a];
            if idx[a] < out_shape[a] {
                break;
            }
            src -= src_strides[a] * out_shape[a];
            idx[a] = 0;
        }
    }
    out
}

pub(crate) fn inverse_perm(perm: &[usize]) -> Vec<usize> {
    let mut inv = vec![0; perm.len()];
    for (i, &p) in perm.iter().enumerate() {
        inv[p] = i;
    }
    inv
}

/// Concatenates `[B, C1, rest]` and `[B, C2, rest]` along axis 1.
pub(crate) fn concat_channels(a: &[f64], b: &[f64], batch: usize, ca: usize, cb: usize, rest: usize) -> Vec<f64> {
    let mut out = Vec::with_capacity(a.len() + b.len());
    for bi in 0..batch {
        out.extend_from_slice(&a[bi * ca * rest..(bi + 1) * ca * rest]);
        out.extend_from_slice(&b[bi * cb * rest..(bi + 1) * cb * rest]);
    }
    out
}

pub(crate) fn split_channels_grad(
    g: &[f64],
    ga: Option<&mut [f64]>,
    gb: Option<&mut [f64]>,
    batch: usize,
    ca: usize,
    cb: usize,
    rest: usize,
) {
    let step = (ca + cb) * rest;
    if let Some(ga) = ga {
        for bi in 0..batch {
            let src = &g[bi * step..bi * step + ca * rest];
            for (d, s) in ga[bi * ca * rest..(bi + 1) * ca * rest].iter_mut().zip(src) {
                *d += s;
            }
        }
    }
    if let Some(gb) = gb {
        for bi in 0..batch {
            let src = &g[bi * step + ca * rest..(bi + 1) * step];
            for (d, s) in gb[bi * cb * rest..(bi + 1) * cb * rest].iter_mut().zip(src) {
                *d += s;
            }
        }
    }
}

/// Geometry of a zero-pad along one axis, viewed as `[outer, len, inner]`.
#[derive(Clone, Debug)]
pub(crate) struct PadDims {
    pub outer: usize,
    pub len: usize,
    pub inner: usize,
    pub before: usize,
    pub after: usize,
}

impl PadDims {
    pub fn new(shape: &[usize], axis: usize, before: usize, after: usize) -> Result<Self> {
        if axis >= shape.len() {
            return Err(TensorError::invalid("pad", shape, format!("axis {axis} out of range")));
        }
        Ok(PadDims {
            outer: shape[..axis].iter().product(),
            len: shape[axis],
            inner: shape[axis + 1..].iter().product(),
            before,
            after,
        })
    }

    fn padded(&self) -> usize {
        self.len + self.before + self.after
    }
}

pub(crate) fn pad(d: &PadDims, x: &[f64]) -> Vec<f64> {
    let plen = d.padded();
    let mut out = vec![0.0; d.outer * plen * d.inner];
    for o in 0..d.outer {
        let src = &x[o * d.len * d.inner..(o + 1) * d.len * d.inner];
        let dst = (o * plen + d.before) * d.inner;
        out[dst..dst + src.len()].copy_from_slice(src);
    }
    out
}

pub(crate) fn pad_backward(d: &PadDims, g: &[f64], gx: &mut [f64]) {
    let plen = d.padded();
    for o in 0..d.outer {
        let src = (o * plen + d.before) * d.inner;
        let n = d.len * d.inner;
        for (a, b) in gx[o * n..(o + 1) * n].iter_mut().zip(&g[src..src + n]) {
            *a += b;
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn permute_matches_index_formula() {
        let shape = [2, 3, 4];
        let x: Vec<f64> = (0..24).map(f64::from).collect();
        let y = permute(&x, &shape, &[2, 0, 1]);
        // y[k, i, j] == x[i, j, k]
        for i in 0..2 {
            for j in 0..3 {
                for k in 0..4 {
                    assert_eq!(y[(k * 2 + i) * 3 + j], x[(i * 3 + j) * 4 + k]);
                }
            }
        }
        let back = permute(&y, &[4, 2, 3], &inverse_perm(&[2, 0, 1]));
        assert_eq!(back, x);
    }

    #[test]
    fn bad_permutation_rejected() {
        assert!(check_perm(&[2, 3], &[0, 0]).is_err());
        assert!(check_perm(&[2, 3], &[0]).is_err());
    }
}
