//! Weighted CSR adjacency shared by the homogeneous and bipartite graphs.

use std::fs;
use std::path::Path;

use ndarray::{Array2, ArrayView2};
use serde::{Deserialize, Serialize};

use crate::error::{RearmError, Result};

pub const GRAPH_MAGIC: &[u8; 4] = b"CSRG";
pub const GRAPH_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum GraphKind {
    Cooccurrence,
    Semantic,
    Fused,
    Bipartite,
}

/// Square weighted graph in CSR form. Column indices are strictly
/// increasing within a row and weights are finite and non-negative.
#[derive(Debug, Clone, PartialEq)]
pub struct SparseGraph {
    n: usize,
    row_ptr: Vec<usize>,
    col_idx: Vec<usize>,
    weights: Vec<f32>,
    kind: GraphKind,
}

impl SparseGraph {
    pub fn empty(n: usize, kind: GraphKind) -> Self {
        SparseGraph {
            n,
            row_ptr: vec![0; n + 1],
            col_idx: Vec::new(),
            weights: Vec::new(),
            kind,
        }
    }

    /// Builds from per-row `(column, weight)` lists. Rows are sorted by
    /// column; duplicate columns are summed.
    pub fn from_rows(n: usize, rows: Vec<Vec<(usize, f64)>>, kind: GraphKind) -> Result<Self> {
        if rows.len() != n {
            return Err(RearmError::shape("graph", format!("{} rows for {n} nodes", rows.len())));
        }
        let mut row_ptr = Vec::with_capacity(n + 1);
        let mut col_idx = Vec::new();
        let mut weights = Vec::new();
        row_ptr.push(0);
        for (r, mut row) in rows.into_iter().enumerate() {
            row.sort_by_key(|&(c, _)| c);
            let mut last: Option<usize> = None;
            for (c, w) in row {
                if c >= n {
                    return Err(RearmError::shape("graph", format!("row {r} column {c} >= {n}")));
                }
                if !w.is_finite() || w < 0.0 {
                    return Err(RearmError::Data(format!("edge ({r},{c}) has weight {w}")));
                }
                if last == Some(c) {
                    let acc = weights.last_mut().expect("previous edge");
                    *acc = (*acc as f64 + w) as f32;
                } else {
                    col_idx.push(c);
                    weights.push(w as f32);
                    last = Some(c);
                }
            }
            row_ptr.push(col_idx.len());
        }
        Ok(SparseGraph {
            n,
            row_ptr,
            col_idx,
            weights,
            kind,
        })
    }

    pub fn n(&self) -> usize {
        self.n
    }

    pub fn nnz(&self) -> usize {
        self.col_idx.len()
    }

    pub fn kind(&self) -> GraphKind {
        self.kind
    }

    pub fn with_kind(mut self, kind: GraphKind) -> Self {
        self.kind = kind;
        self
    }

    pub fn row_ptr(&self) -> &[usize] {
        &self.row_ptr
    }

    pub fn col_idx(&self) -> &[usize] {
        &self.col_idx
    }

    pub fn weights(&self) -> &[f32] {
        &self.weights
    }

    /// `(column, weight)` pairs of row `r`.
    pub fn row(&self, r: usize) -> impl Iterator<Item = (usize, f32)> + '_ {
        let span = self.row_ptr[r]..self.row_ptr[r + 1];
        self.col_idx[span.clone()]
            .iter()
            .copied()
            .zip(self.weights[span].iter().copied())
    }

    pub fn row_len(&self, r: usize) -> usize {
        self.row_ptr[r + 1] - self.row_ptr[r]
    }

    pub fn weight(&self, r: usize, c: usize) -> Option<f32> {
        let span = self.row_ptr[r]..self.row_ptr[r + 1];
        self.col_idx[span.clone()]
            .binary_search(&c)
            .ok()
            .map(|k| self.weights[span.start + k])
    }

    pub fn row_sum(&self, r: usize) -> f64 {
        self.row(r).map(|(_, w)| w as f64).sum()
    }

    pub fn to_dense(&self) -> Array2<f64> {
        let mut d = Array2::zeros((self.n, self.n));
        for r in 0..self.n {
            for (c, w) in self.row(r) {
                d[[r, c]] = w as f64;
            }
        }
        d
    }

    /// `A·x`, with rows of `A` that have no edges copying `x` through.
    pub fn spmm_passthrough(&self, x: ArrayView2<f64>) -> Array2<f64> {
        let mut out = Array2::zeros(x.raw_dim());
        for r in 0..self.n {
            let mut dst = out.row_mut(r);
            if self.row_len(r) == 0 {
                dst.assign(&x.row(r));
                continue;
            }
            for (c, w) in self.row(r) {
                dst.scaled_add(w as f64, &x.row(c));
            }
        }
        out
    }

    /// Transpose of [`spmm_passthrough`](Self::spmm_passthrough).
    pub fn spmm_passthrough_t(&self, x: ArrayView2<f64>) -> Array2<f64> {
        let mut out = Array2::zeros(x.raw_dim());
        for r in 0..self.n {
            if self.row_len(r) == 0 {
                let src = x.row(r).to_owned();
                out.row_mut(r).scaled_add(1.0, &src);
                continue;
            }
            for (c, w) in self.row(r) {
                out.row_mut(c).scaled_add(w as f64, &x.row(r));
            }
        }
        out
    }

    /// Plain `A·x` (isolated rows produce zeros).
    pub fn spmm(&self, x: ArrayView2<f64>) -> Array2<f64> {
        let mut out = Array2::zeros(x.raw_dim());
        for r in 0..self.n {
            let mut dst = out.row_mut(r);
            for (c, w) in self.row(r) {
                dst.scaled_add(w as f64, &x.row(c));
            }
        }
        out
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        let mut buf = Vec::with_capacity(24 + 8 * (self.n + 1) + 12 * self.nnz());
        buf.extend_from_slice(GRAPH_MAGIC);
        buf.extend_from_slice(&GRAPH_VERSION.to_le_bytes());
        buf.extend_from_slice(&(self.n as u64).to_le_bytes());
        buf.extend_from_slice(&(self.nnz() as u64).to_le_bytes());
        for &p in &self.row_ptr {
            buf.extend_from_slice(&(p as u64).to_le_bytes());
        }
        for &c in &self.col_idx {
            buf.extend_from_slice(&(c as u64).to_le_bytes());
        }
        for &w in &self.weights {
            buf.extend_from_slice(&w.to_le_bytes());
        }
        fs::write(path, buf).map_err(|e| RearmError::io(path, e))
    }

    pub fn read(path: &Path, kind: GraphKind) -> Result<Self> {
        let bytes = fs::read(path).map_err(|e| RearmError::io(path, e))?;
        let bad = |msg: &str| RearmError::format(path, msg);
        if bytes.len() < 24 || &bytes[..4] != GRAPH_MAGIC {
            return Err(bad("missing CSRG header"));
        }
        let u32_at = |o: usize| u32::from_le_bytes(bytes[o..o + 4].try_into().expect("4 bytes"));
        let u64_at = |o: usize| u64::from_le_bytes(bytes[o..o + 8].try_into().expect("8 bytes"));
        if u32_at(4) != GRAPH_VERSION {
            return Err(bad("unsupported CSRG version"));
        }
        let n = u64_at(8) as usize;
        let nnz = u64_at(16) as usize;
        let expected = 24 + 8 * (n + 1) + 8 * nnz + 4 * nnz;
        if bytes.len() != expected {
            return Err(bad("payload size does not match header"));
        }
        let mut off = 24;
        let row_ptr: Vec<usize> = (0..=n).map(|k| u64_at(off + 8 * k) as usize).collect();
        off += 8 * (n + 1);
        let col_idx: Vec<usize> = (0..nnz).map(|k| u64_at(off + 8 * k) as usize).collect();
        off += 8 * nnz;
        let weights: Vec<f32> = (0..nnz)
            .map(|k| f32::from_le_bytes(bytes[off + 4 * k..off + 4 * k + 4].try_into().expect("4 bytes")))
            .collect();
        if row_ptr[0] != 0 || row_ptr[n] != nnz || row_ptr.windows(2).any(|w| w[0] > w[1]) {
            return Err(bad("row pointers are not monotone"));
        }
        for r in 0..n {
            let cols = &col_idx[row_ptr[r]..row_ptr[r + 1]];
            if cols.windows(2).any(|w| w[0] >= w[1]) || cols.iter().any(|&c| c >= n) {
                return Err(bad("column indices not strictly increasing"));
            }
        }
        if weights.iter().any(|w| !w.is_finite() || *w < 0.0) {
            return Err(bad("negative or non-finite weight"));
        }
        Ok(SparseGraph {
            n,
            row_ptr,
            col_idx,
            weights,
            kind,
        })
    }
}
