//! Dense row-major matrices and the scaled dot-product attention kernel.
//!
//! Every reduction runs in a fixed index order, so results are identical from
//! run to run and between the sequential and parallel paths.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::par::{self, OpCounter, Policy};

/// Row-major `rows × cols` matrix of `f64`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Matrix {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl Matrix {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Matrix { rows, cols, data: vec![0.0; rows * cols] }
    }

    pub fn filled(rows: usize, cols: usize, value: f64) -> Self {
        Matrix { rows, cols, data: vec![value; rows * cols] }
    }

    pub fn identity(n: usize) -> Self {
        let mut m = Matrix::zeros(n, n);
        for i in 0..n {
            m.data[i * n + i] = 1.0;
        }
        m
    }

    pub fn from_vec(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(Error::shape(
                "Matrix::from_vec",
                format!("{rows}x{cols} needs {} values, got {}", rows * cols, data.len()),
            ));
        }
        Ok(Matrix { rows, cols, data })
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let cols = rows.first().map_or(0, Vec::len);
        if rows.iter().any(|r| r.len() != cols) {
            return Err(Error::shape("Matrix::from_rows", "ragged rows"));
        }
        Ok(Matrix { rows: rows.len(), cols, data: rows.concat() })
    }

    pub fn row_vector(values: &[f64]) -> Self {
        Matrix { rows: 1, cols: values.len(), data: values.to_vec() }
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.rows, self.cols)
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }

    pub fn as_mut_slice(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_vec(self) -> Vec<f64> {
        self.data
    }

    #[inline]
    pub fn get(&self, r: usize, c: usize) -> f64 {
        self.data[r * self.cols + c]
    }

    #[inline]
    pub fn set(&mut self, r: usize, c: usize, v: f64) {
        self.data[r * self.cols + c] = v;
    }

    #[inline]
    pub fn row(&self, r: usize) -> &[f64] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    #[inline]
    pub fn row_mut(&mut self, r: usize) -> &mut [f64] {
        &mut self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn transpose(&self) -> Matrix {
        let mut t = Matrix::zeros(self.cols, self.rows);
        for r in 0..self.rows {
            for c in 0..self.cols {
                t.data[c * self.rows + r] = self.data[r * self.cols + c];
            }
        }
        t
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn ensure_finite(&self, what: &str) -> Result<()> {
        if self.is_finite() {
            Ok(())
        } else {
            Err(Error::NonFinite(what.to_string()))
        }
    }

    /// Copies the listed rows, in order.
    pub fn select_rows(&self, idx: &[usize]) -> Matrix {
        let mut out = Matrix::zeros(idx.len(), self.cols);
        for (o, &i) in idx.iter().enumerate() {
            out.row_mut(o).copy_from_slice(self.row(i));
        }
        out
    }

    /// Columns `start..start + width` as a new matrix.
    pub fn column_block(&self, start: usize, width: usize) -> Matrix {
        let mut out = Matrix::zeros(self.rows, width);
        for r in 0..self.rows {
            out.row_mut(r).copy_from_slice(&self.row(r)[start..start + width]);
        }
        out
    }

    /// Writes `block` into columns `start..start + block.cols`.
    pub fn set_column_block(&mut self, start: usize, block: &Matrix) {
        debug_assert_eq!(block.rows, self.rows);
        for r in 0..self.rows {
            let w = block.cols;
            self.row_mut(r)[start..start + w].copy_from_slice(block.row(r));
        }
    }

    /// Concatenates equally tall matrices left to right.
    pub fn hcat(parts: &[Matrix]) -> Result<Matrix> {
        let rows = parts.first().map_or(0, |m| m.rows);
        if parts.iter().any(|m| m.rows != rows) {
            return Err(Error::shape("Matrix::hcat", "row counts differ"));
        }
        let cols = parts.iter().map(|m| m.cols).sum();
        let mut out = Matrix::zeros(rows, cols);
        let mut at = 0;
        for p in parts {
            out.set_column_block(at, p);
            at += p.cols;
        }
        Ok(out)
    }

    pub fn add_assign(&mut self, other: &Matrix) -> Result<()> {
        self.check_same(other, "add")?;
        self.data.iter_mut().zip(&other.data).for_each(|(a, b)| *a += b);
        Ok(())
    }

    pub fn add_scaled_assign(&mut self, other: &Matrix, alpha: f64) -> Result<()> {
        self.check_same(other, "add_scaled")?;
        self.data.iter_mut().zip(&other.data).for_each(|(a, b)| *a += alpha * b);
        Ok(())
    }

    pub fn scale(&self, alpha: f64) -> Matrix {
        Matrix { rows: self.rows, cols: self.cols, data: self.data.iter().map(|v| v * alpha).collect() }
    }

    /// Adds the single-row `bias` to every row.
    pub fn add_row_broadcast(&mut self, bias: &[f64]) -> Result<()> {
        if bias.len() != self.cols {
            return Err(Error::shape("add_row_broadcast", format!("bias {} vs cols {}", bias.len(), self.cols)));
        }
        for r in 0..self.rows {
            self.row_mut(r).iter_mut().zip(bias).for_each(|(a, b)| *a += b);
        }
        Ok(())
    }

    /// Column sums as a `1 × cols` matrix, accumulated top to bottom.
    pub fn column_sums(&self) -> Matrix {
        let mut out = Matrix::zeros(1, self.cols);
        for r in 0..self.rows {
            out.data.iter_mut().zip(self.row(r)).for_each(|(a, b)| *a += b);
        }
        out
    }

    pub fn max_abs_diff(&self, other: &Matrix) -> f64 {
        assert_eq!(self.shape(), other.shape(), "max_abs_diff shape mismatch");
        self.data.iter().zip(&other.data).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max)
    }

    fn check_same(&self, other: &Matrix, op: &'static str) -> Result<()> {
        if self.shape() != other.shape() {
            return Err(Error::shape(op, format!("{:?} vs {:?}", self.shape(), other.shape())));
        }
        Ok(())
    }
}

/// An `H × W × C` feature map stored as an `(H·W) × C` matrix, pixels in
/// row-major (h, w) order.
#[derive(Debug, Clone, PartialEq)]
pub struct LatentGrid {
    pub h: usize,
    pub w: usize,
    values: Matrix,
}

impl LatentGrid {
    pub fn new(h: usize, w: usize, values: Matrix) -> Result<Self> {
        if values.rows() != h * w {
            return Err(Error::shape("LatentGrid::new", format!("{h}x{w} grid vs {} rows", values.rows())));
        }
        Ok(LatentGrid { h, w, values })
    }

    pub fn filled(h: usize, w: usize, c: usize, v: f64) -> Self {
        LatentGrid { h, w, values: Matrix::filled(h * w, c, v) }
    }

    pub fn channels(&self) -> usize {
        self.values.cols()
    }

    pub fn pixels(&self) -> usize {
        self.h * self.w
    }

    #[inline]
    pub fn index(&self, y: usize, x: usize) -> usize {
        y * self.w + x
    }

    pub fn pixel(&self, y: usize, x: usize) -> &[f64] {
        self.values.row(self.index(y, x))
    }

    pub fn pixel_mut(&mut self, y: usize, x: usize) -> &mut [f64] {
        let i = self.index(y, x);
        self.values.row_mut(i)
    }

    pub fn values(&self) -> &Matrix {
        &self.values
    }

    pub fn into_values(self) -> Matrix {
        self.values
    }
}

/// `a · b` with a fixed k-loop order.
pub fn matmul(a: &Matrix, b: &Matrix) -> Result<Matrix> {
    matmul_with(Policy::Sequential, a, b)
}

/// `a · b`, optionally spreading output rows across threads. Each output row is
/// produced by the same loop either way, so the result does not depend on policy.
pub fn matmul_with(policy: Policy, a: &Matrix, b: &Matrix) -> Result<Matrix> {
    if a.cols != b.rows {
        return Err(Error::shape("matmul", format!("{}x{} · {}x{}", a.rows, a.cols, b.rows, b.cols)));
    }
    let mut out = Matrix::zeros(a.rows, b.cols);
    if b.cols == 0 {
        return Ok(out);
    }
    let n = b.cols;
    let rows_per_chunk = (4096 / n.max(1)).max(1);
    par::for_each_chunk_mut(policy, &mut out.data, rows_per_chunk * n, |chunk_idx, chunk| {
        let first = chunk_idx * rows_per_chunk;
        for (local, out_row) in chunk.chunks_mut(n).enumerate() {
            let a_row = a.row(first + local);
            for (k, &a_ik) in a_row.iter().enumerate() {
                let b_row = b.row(k);
                for (o, &b_kj) in out_row.iter_mut().zip(b_row) {
                    *o += a_ik * b_kj;
                }
            }
        }
    });
    Ok(out)
}

/// `aᵀ · b` without materializing the transpose.
pub fn matmul_tn(a: &Matrix, b: &Matrix) -> Result<Matrix> {
    if a.rows != b.rows {
        return Err(Error::shape("matmul_tn", format!("({}x{})ᵀ · {}x{}", a.rows, a.cols, b.rows, b.cols)));
    }
    let mut out = Matrix::zeros(a.cols, b.cols);
    for r in 0..a.rows {
        let a_row = a.row(r);
        let b_row = b.row(r);
        for (i, &a_ri) in a_row.iter().enumerate() {
            let out_row = out.row_mut(i);
            for (o, &b_rj) in out_row.iter_mut().zip(b_row) {
                *o += a_ri * b_rj;
            }
        }
    }
    Ok(out)
}

/// `a · bᵀ`.
pub fn matmul_nt(a: &Matrix, b: &Matrix) -> Result<Matrix> {
    if a.cols != b.cols {
        return Err(Error::shape("matmul_nt", format!("{}x{} · ({}x{})ᵀ", a.rows, a.cols, b.rows, b.cols)));
    }
    let mut out = Matrix::zeros(a.rows, b.rows);
    for i in 0..a.rows {
        let a_row = a.row(i);
        for j in 0..b.rows {
            out.data[i * b.rows + j] = dot(a_row, b.row(j));
        }
    }
    Ok(out)
}

#[inline]
fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).fold(0.0, |acc, (x, y)| acc + x * y)
}

/// In-place max-subtracted softmax of one row.
fn softmax_in_place(row: &mut [f64]) {
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut sum = 0.0;
    for v in row.iter_mut() {
        *v = (*v - max).exp();
        sum += *v;
    }
    for v in row.iter_mut() {
        *v /= sum;
    }
}

/// Row-wise softmax with the row maximum subtracted first.
pub fn softmax_rows(m: &Matrix) -> Result<Matrix> {
    if m.data.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("softmax_rows input".into()));
    }
    let mut out = m.clone();
    if out.cols > 0 {
        out.data.chunks_mut(out.cols).for_each(softmax_in_place);
    }
    Ok(out)
}

/// Validates operand shapes for `softmax(QKᵀ/√d)·V`.
fn check_attention(q: &Matrix, k: &Matrix, v: &Matrix) -> Result<()> {
    if q.cols == 0 {
        return Err(Error::shape("attention", "inner dimension must be >= 1"));
    }
    if k.rows == 0 {
        return Err(Error::shape("attention", "empty key set"));
    }
    if q.cols != k.cols {
        return Err(Error::shape("attention", format!("query dim {} vs key dim {}", q.cols, k.cols)));
    }
    if k.rows != v.rows {
        return Err(Error::shape("attention", format!("{} keys vs {} values", k.rows, v.rows)));
    }
    Ok(())
}

/// Attention output together with the softmax weights that produced it.
#[derive(Debug, Clone)]
pub struct AttentionOutput {
    pub output: Matrix,
    /// `L × m` row-stochastic weights.
    pub probs: Matrix,
}

/// `softmax(QKᵀ/√d)·V`. Row `i` of the output depends on row `i` of `q` only.
pub fn scaled_dot_attention(q: &Matrix, k: &Matrix, v: &Matrix) -> Result<Matrix> {
    attention_rows(q, None, k, v, None).map(|o| o.output)
}

/// Attention restricted to the query rows listed in `rows` (all rows when `None`),
/// reporting executed work to `counter`.
pub fn attention_rows(
    q: &Matrix,
    rows: Option<&[usize]>,
    k: &Matrix,
    v: &Matrix,
    counter: Option<&OpCounter>,
) -> Result<AttentionOutput> {
    check_attention(q, k, v)?;
    let d = q.cols;
    let m = k.rows;
    let dv = v.cols;
    let sqrt_d = (d as f64).sqrt();
    let n_rows = rows.map_or(q.rows, <[usize]>::len);
    let mut output = Matrix::zeros(n_rows, dv);
    let mut probs = Matrix::zeros(n_rows, m);
    let mut flops = 0u64;
    let mut exps = 0u64;
    for o in 0..n_rows {
        let qi = rows.map_or(o, |r| r[o]);
        let q_row = q.row(qi);
        let p_row = probs.row_mut(o);
        for (j, p) in p_row.iter_mut().enumerate() {
            *p = dot(q_row, k.row(j)) / sqrt_d;
            flops += 2 * d as u64;
        }
        if p_row.iter().any(|s| !s.is_finite()) {
            return Err(Error::NonFinite("attention scores".into()));
        }
        softmax_in_place(p_row);
        exps += m as u64;
        let out_row = output.row_mut(o);
        for (j, &p) in probs.row(o).iter().enumerate() {
            for (acc, &vj) in out_row.iter_mut().zip(v.row(j)) {
                *acc += p * vj;
            }
            flops += 2 * dv as u64;
        }
    }
    if let Some(c) = counter {
        c.add(flops, exps);
    }
    Ok(AttentionOutput { output, probs })
}

/// Central-difference gradient estimate of `f` at `theta` with step `h`.
pub fn finite_diff_grad<F>(mut f: F, theta: &[f64], h: f64) -> Result<Vec<f64>>
where
    F: FnMut(&[f64]) -> f64,
{
    if !(h > 0.0 && h.is_finite()) {
        return Err(Error::Invalid(format!("finite-difference step must be > 0, got {h}")));
    }
    let mut x = theta.to_vec();
    let mut grad = Vec::with_capacity(theta.len());
    for i in 0..theta.len() {
        let orig = x[i];
        x[i] = orig + h;
        let fp = f(&x);
        x[i] = orig - h;
        let fm = f(&x);
        x[i] = orig;
        if !(fp.is_finite() && fm.is_finite()) {
            return Err(Error::NonFinite(format!("finite difference at coordinate {i}")));
        }
        grad.push((fp - fm) / (2.0 * h));
    }
    Ok(grad)
}

/// Default finite-difference step for `f64`.
pub const FD_STEP: f64 = 1e-5;
