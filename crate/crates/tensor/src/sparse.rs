use crate::error::{Result, TensorError};

/// Compressed sparse row matrix with nonnegative weights.
#[derive(Clone, Debug, PartialEq)]
pub struct CsrMatrix {
    n_rows: usize,
    n_cols: usize,
    row_offsets: Vec<u64>,
    col_indices: Vec<u32>,
    weights: Vec<f64>,
}

impl CsrMatrix {
    /// Builds a matrix from per-row `(column, weight)` lists. Entries are
    /// sorted by column, duplicate columns are merged and zero weights dropped.
    pub fn from_rows(n_cols: usize, rows: Vec<Vec<(u32, f64)>>) -> Result<Self> {
        let n_rows = rows.len();
        let mut row_offsets = Vec::with_capacity(n_rows + 1);
        let mut col_indices = Vec::new();
        let mut weights = Vec::new();
        row_offsets.push(0u64);
        for mut row in rows {
            row.sort_by_key(|&(c, _)| c);
            let start = col_indices.len();
            for (c, w) in row {
                if c as usize >= n_cols {
                    return Err(TensorError::DimensionMismatch {
                        expected: n_cols,
                        got: c as usize,
                    });
                }
                if !(w.is_finite() && w >= 0.0) {
                    return Err(TensorError::invalid(
                        "csr",
                        &[n_rows, n_cols],
                        format!("weight {w} must be finite and nonnegative"),
                    ));
                }
                if w == 0.0 {
                    continue;
                }
                if col_indices.len() > start && *col_indices.last().unwrap() == c {
                    *weights.last_mut().unwrap() += w;
                } else {
                    col_indices.push(c);
                    weights.push(w);
                }
            }
            row_offsets.push(col_indices.len() as u64);
        }
        Ok(CsrMatrix {
            n_rows,
            n_cols,
            row_offsets,
            col_indices,
            weights,
        })
    }

    /// Reassembles a matrix from raw CSR arrays, validating every invariant.
    pub fn from_raw(
        n_rows: usize,
        n_cols: usize,
        row_offsets: Vec<u64>,
        col_indices: Vec<u32>,
        weights: Vec<f64>,
    ) -> Result<Self> {
        let bad = |reason: &str| TensorError::invalid("csr", &[n_rows, n_cols], reason);
        if row_offsets.len() != n_rows + 1 || row_offsets[0] != 0 {
            return Err(bad("row offsets length or origin"));
        }
        if col_indices.len() != weights.len() || *row_offsets.last().unwrap() as usize != weights.len() {
            return Err(bad("nnz mismatch"));
        }
        for r in 0..n_rows {
            let (a, b) = (row_offsets[r] as usize, row_offsets[r + 1] as usize);
            if a > b || b > weights.len() {
                return Err(bad("row offsets not monotone"));
            }
            let cols = &col_indices[a..b];
            if cols.windows(2).any(|w| w[0] >= w[1]) || cols.iter().any(|&c| c as usize >= n_cols) {
                return Err(bad("column indices not strictly increasing or out of range"));
            }
        }
        if weights.iter().any(|w| !(w.is_finite() && *w >= 0.0)) {
            return Err(bad("negative or non-finite weight"));
        }
        Ok(CsrMatrix {
            n_rows,
            n_cols,
            row_offsets,
            col_indices,
            weights,
        })
    }

    pub fn identity(n: usize) -> Self {
        CsrMatrix {
            n_rows: n,
            n_cols: n,
            row_offsets: (0..=n as u64).collect(),
            col_indices: (0..n as u32).collect(),
            weights: vec![1.0; n],
        }
    }

    pub fn n_rows(&self) -> usize {
        self.n_rows
    }

    pub fn n_cols(&self) -> usize {
        self.n_cols
    }

    pub fn nnz(&self) -> usize {
        self.weights.len()
    }

    pub fn row_offsets(&self) -> &[u64] {
        &self.row_offsets
    }

    pub fn col_indices(&self) -> &[u32] {
        &self.col_indices
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    /// `(column, weight)` pairs of row `r`.
    pub fn row(&self, r: usize) -> impl Iterator<Item = (usize, f64)> + '_ {
        let (a, b) = (self.row_offsets[r] as usize, self.row_offsets[r + 1] as usize);
        self.col_indices[a..b]
            .iter()
            .zip(&self.weights[a..b])
            .map(|(&c, &w)| (c as usize, w))
    }

    pub fn row_nnz(&self, r: usize) -> usize {
        (self.row_offsets[r + 1] - self.row_offsets[r]) as usize
    }

    /// Mat-vec `M x`, or `Mᵀ x` when `transposed`.
    pub fn apply(&self, x: &[f64], transposed: bool) -> Result<Vec<f64>> {
        let (n_in, n_out) = self.io_dims(transposed);
        if x.len() != n_in {
            return Err(TensorError::DimensionMismatch {
                expected: n_in,
                got: x.len(),
            });
        }
        let mut out = vec![0.0; n_out];
        self.apply_lines(x, &mut out, 1, 1, transposed);
        Ok(out)
    }

    pub(crate) fn io_dims(&self, transposed: bool) -> (usize, usize) {
        if transposed {
            (self.n_rows, self.n_cols)
        } else {
            (self.n_cols, self.n_rows)
        }
    }

    /// Applies the matrix along the middle axis of `x` viewed as
    /// `[outer, n_in, inner]`, accumulating into `out` viewed as
    /// `[outer, n_out, inner]`.
    pub(crate) fn apply_lines(
        &self,
        x: &[f64],
        out: &mut [f64],
        outer: usize,
        inner: usize,
        transposed: bool,
    ) {
        let (n_in, n_out) = self.io_dims(transposed);
        debug_assert_eq!(x.len(), outer * n_in * inner);
        debug_assert_eq!(out.len(), outer * n_out * inner);
        for o in 0..outer {
            let xs = &x[o * n_in * inner..(o + 1) * n_in * inner];
            let os = &mut out[o * n_out * inner..(o + 1) * n_out * inner];
            for r in 0..self.n_rows {
                for (c, w) in self.row(r) {
                    let (src, dst) = if transposed { (r, c) } else { (c, r) };
                    let s = &xs[src * inner..(src + 1) * inner];
                    let d = &mut os[dst * inner..(dst + 1) * inner];
                    for (dv, sv) in d.iter_mut().zip(s) {
                        *dv += w * sv;
                    }
                }
            }
        }
    }

    /// Explicit transpose, used by tests and adjoint checks.
    pub fn transpose(&self) -> CsrMatrix {
        let mut rows = vec![Vec::new(); self.n_cols];
        for r in 0..self.n_rows {
            for (c, w) in self.row(r) {
                rows[c].push((r as u32, w));
            }
        }
        CsrMatrix::from_rows(self.n_rows, rows).expect("transpose of a valid matrix is valid")
    }
}
