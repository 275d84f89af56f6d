use std::fmt::Write as _;

use rayon::prelude::*;

use super::cost::linearize;
use super::{check_dims, GlueError, GlueParams};
use crate::rf::{DisplacementField, RfFrame};

/// Symmetric sparse system `M Δ = b` from one linearization of the cost.
///
/// Unknowns are interleaved per sample, `(Δa, Δl)`, with samples in
/// column-major order: sample `(i, j)` owns unknowns `2k` and `2k + 1` where
/// `k = j m + i`. The matrix is stored as CSR with sorted columns.
#[derive(Debug, Clone, PartialEq)]
pub struct SparseSystem {
    rows: usize,
    grid: (usize, usize),
    row_ptr: Vec<usize>,
    cols: Vec<usize>,
    vals: Vec<f64>,
    rhs: Vec<f64>,
}

/// Serial dot products over fixed-size chunks, summed in order, so results
/// do not depend on the thread count.
const REDUCE_CHUNK: usize = 4096;

pub(crate) fn dot(a: &[f64], b: &[f64]) -> f64 {
    let partial: Vec<f64> = a
        .par_chunks(REDUCE_CHUNK)
        .zip(b.par_chunks(REDUCE_CHUNK))
        .map(|(x, y)| x.iter().zip(y).map(|(p, q)| p * q).sum::<f64>())
        .collect();
    partial.iter().sum()
}

impl SparseSystem {
    /// Builds a system from `(row, col, value)` triplets; duplicates add up.
    pub fn from_triplets(
        grid: (usize, usize),
        triplets: &[(usize, usize, f64)],
        rhs: Vec<f64>,
    ) -> Result<Self, GlueError> {
        let rows = 2 * grid.0 * grid.1;
        if rhs.len() != rows {
            return Err(GlueError::SystemShape(format!("rhs has {} entries, expected {rows}", rhs.len())));
        }
        let mut sorted: Vec<(usize, usize, f64)> = triplets.to_vec();
        if let Some(bad) = sorted.iter().find(|t| t.0 >= rows || t.1 >= rows) {
            return Err(GlueError::SystemShape(format!("entry ({}, {}) outside {rows}x{rows}", bad.0, bad.1)));
        }
        sorted.sort_by_key(|t| (t.0, t.1));
        let mut row_ptr = vec![0usize; rows + 1];
        let mut cols: Vec<usize> = Vec::with_capacity(sorted.len());
        let mut vals: Vec<f64> = Vec::with_capacity(sorted.len());
        let mut last: Option<(usize, usize)> = None;
        for (r, c, v) in sorted {
            if last == Some((r, c)) {
                *vals.last_mut().unwrap() += v;
            } else {
                cols.push(c);
                vals.push(v);
                row_ptr[r + 1] += 1;
                last = Some((r, c));
            }
        }
        for r in 0..rows {
            row_ptr[r + 1] += row_ptr[r];
        }
        Ok(Self {
            rows,
            grid,
            row_ptr,
            cols,
            vals,
            rhs,
        })
    }

    pub fn size(&self) -> usize {
        self.rows
    }

    /// `(m, n)` of the sample grid.
    pub fn grid(&self) -> (usize, usize) {
        self.grid
    }

    pub fn rhs(&self) -> &[f64] {
        &self.rhs
    }

    pub fn nnz(&self) -> usize {
        self.vals.len()
    }

    /// Stored entries of row `r` as `(col, value)`.
    pub fn row(&self, r: usize) -> impl Iterator<Item = (usize, f64)> + '_ {
        let span = self.row_ptr[r]..self.row_ptr[r + 1];
        self.cols[span.clone()].iter().copied().zip(self.vals[span].iter().copied())
    }

    /// Entry `(r, c)`, zero when not stored.
    pub fn get(&self, r: usize, c: usize) -> f64 {
        self.row(r).find(|(col, _)| *col == c).map_or(0.0, |(_, v)| v)
    }

    pub fn diagonal(&self) -> Vec<f64> {
        (0..self.rows).map(|r| self.get(r, r)).collect()
    }

    pub fn mul_vec_into(&self, x: &[f64], out: &mut [f64]) {
        out.par_iter_mut().enumerate().for_each(|(r, o)| {
            *o = self.row(r).map(|(c, v)| v * x[c]).sum();
        });
    }

    pub fn mul_vec(&self, x: &[f64]) -> Vec<f64> {
        let mut out = vec![0.0; self.rows];
        self.mul_vec_into(x, &mut out);
        out
    }

    /// Largest `|M[r][c] - M[c][r]|` over stored entries.
    pub fn max_asymmetry(&self) -> f64 {
        (0..self.rows)
            .into_par_iter()
            .map(|r| self.row(r).map(|(c, v)| (v - self.get(c, r)).abs()).fold(0.0, f64::max))
            .reduce(|| 0.0, f64::max)
    }

    /// Row-major dense copy; for small systems only.
    pub fn to_dense(&self) -> Vec<Vec<f64>> {
        let mut d = vec![vec![0.0; self.rows]; self.rows];
        for (r, row) in d.iter_mut().enumerate() {
            for (c, v) in self.row(r) {
                row[c] = v;
            }
        }
        d
    }

    /// Decrease of the quadratic model at `delta` relative to zero
    /// increment: `2 bᵀΔ - ΔᵀMΔ`. Non-negative at the minimizer.
    pub fn model_decrease(&self, delta: &[f64]) -> f64 {
        let md = self.mul_vec(delta);
        2.0 * dot(&self.rhs, delta) - dot(delta, &md)
    }

    /// Triplet text dump for diffing assembled systems:
    ///
    /// ```text
    /// # elasto sparse system v1
    /// size <2mn>
    /// grid <m> <n>
    /// <row> <col> <value>      one line per stored entry, row-major
    /// rhs <row> <value>        one line per row
    /// ```
    pub fn to_triplet_text(&self) -> String {
        let mut out = String::new();
        out.push_str("# elasto sparse system v1\n");
        let _ = writeln!(out, "size {}", self.rows);
        let _ = writeln!(out, "grid {} {}", self.grid.0, self.grid.1);
        for r in 0..self.rows {
            for (c, v) in self.row(r) {
                let _ = writeln!(out, "{r} {c} {v:e}");
            }
        }
        for (r, v) in self.rhs.iter().enumerate() {
            let _ = writeln!(out, "rhs {r} {v:e}");
        }
        out
    }
}

/// Assembles the stationarity system of the cost linearized about `field`.
///
/// With `r = I1 - I2(i + a, j + l)` and `g` the gradient of the interpolated
/// `I2` there, the data term contributes `g gᵀ` on each sample's 2×2
/// diagonal block and `g r` to the right-hand side. Each regularization edge
/// of weight `w` couples neighbours with `-w`, adds `w` to both diagonals and
/// moves the current difference to the right-hand side, so that the rhs at
/// zero increment is `-½ ∇cost`.
pub fn build_linear_system(
    pre: &RfFrame,
    post: &RfFrame,
    field: &DisplacementField,
    params: &GlueParams,
) -> Result<SparseSystem, GlueError> {
    check_dims(pre, post, field)?;
    let (m, n) = field.dim();
    let lin = linearize(pre, post, field);
    let (a, l) = (field.axial(), field.lateral());
    let weights = [
        (params.alpha_axial, params.alpha_lateral),
        (params.beta_axial, params.beta_lateral),
    ];
    let comps = [a, l];

    // One entry list per sample, built independently, then concatenated in
    // sample order.
    let per_sample: Vec<([Vec<(usize, f64)>; 2], [f64; 2])> = (0..m * n)
        .into_par_iter()
        .map(|k| {
            let (i, j) = (k % m, k / m);
            let (r, g_row, g_col) = lin[i * n + j];
            let g = [g_row, g_col];
            let mut rows: [Vec<(usize, f64)>; 2] = [Vec::with_capacity(6), Vec::with_capacity(6)];
            let mut rhs = [g[0] * r, g[1] * r];
            for c in 0..2 {
                let (w_ax, w_lat) = weights[c];
                let x = comps[c];
                let own = 2 * k + c;
                let mut diag = g[c] * g[c];
                // Neighbours in unknown order: left line, upper sample,
                // lower sample, right line.
                let mut nbr = |cond: bool, w: f64, nk: usize, ni: usize, nj: usize, list: &mut Vec<(usize, f64)>| {
                    if cond && w != 0.0 {
                        list.push((2 * nk + c, -w));
                        diag += w;
                        rhs[c] -= w * (x[[i, j]] - x[[ni, nj]]);
                    }
                };
                let list = &mut rows[c];
                nbr(j > 0, w_lat, k.wrapping_sub(m), i, j.wrapping_sub(1), list);
                nbr(i > 0, w_ax, k.wrapping_sub(1), i.wrapping_sub(1), j, list);
                let cross = (2 * k + (1 - c), g[0] * g[1]);
                let mut tail: Vec<(usize, f64)> = Vec::with_capacity(2);
                nbr(i + 1 < m, w_ax, k + 1, i + 1, j, &mut tail);
                nbr(j + 1 < n, w_lat, k + m, i, j + 1, &mut tail);
                if c == 0 {
                    list.push((own, diag));
                    list.push(cross);
                } else {
                    list.push(cross);
                    list.push((own, diag));
                }
                list.extend(tail);
            }
            (rows, rhs)
        })
        .collect();

    let rows = 2 * m * n;
    let mut row_ptr = Vec::with_capacity(rows + 1);
    row_ptr.push(0);
    let mut cols = Vec::with_capacity(rows * 6);
    let mut vals = Vec::with_capacity(rows * 6);
    let mut rhs = Vec::with_capacity(rows);
    for (entries, b) in per_sample {
        for (c, list) in entries.iter().enumerate() {
            for (col, v) in list {
                cols.push(*col);
                vals.push(*v);
            }
            row_ptr.push(cols.len());
            rhs.push(b[c]);
        }
    }
    Ok(SparseSystem {
        rows,
        grid: (m, n),
        row_ptr,
        cols,
        vals,
        rhs,
    })
}
