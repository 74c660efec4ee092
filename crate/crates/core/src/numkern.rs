//! Dense row-major matrices, stable row-wise reductions, seeded random
//! streams and a central-difference gradient oracle.
//!
//! Everything else in the crate is written against these primitives. All
//! arithmetic is `f64`.

use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Gamma, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Floor applied to probabilities before taking logarithms or fractional powers.
pub const PROB_FLOOR: f64 = 1e-12;

/// Clamp a probability to [`PROB_FLOOR`].
#[inline]
pub fn clamp_prob(p: f64) -> f64 {
    p.max(PROB_FLOOR)
}

// ── Matrix ──────────────────────────────────────────────────────────────────

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Matrix {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl Matrix {
    pub fn new(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(Error::shape(
                "Matrix::new",
                format!("{} values for a {rows}x{cols} matrix", data.len()),
            ));
        }
        Ok(Self { rows, cols, data })
    }

    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self { rows, cols, data: vec![0.0; rows * cols] }
    }

    pub fn filled(rows: usize, cols: usize, value: f64) -> Self {
        Self { rows, cols, data: vec![value; rows * cols] }
    }

    pub fn identity(n: usize) -> Self {
        let mut m = Self::zeros(n, n);
        for i in 0..n {
            m.data[i * n + i] = 1.0;
        }
        m
    }

    /// Build from row slices; all rows must share a length.
    pub fn from_rows<R: AsRef<[f64]>>(rows: &[R]) -> Result<Self> {
        let cols = rows.first().map(|r| r.as_ref().len()).unwrap_or(0);
        let mut data = Vec::with_capacity(rows.len() * cols);
        for (i, r) in rows.iter().enumerate() {
            let r = r.as_ref();
            if r.len() != cols {
                return Err(Error::shape(
                    "Matrix::from_rows",
                    format!("row {i} has {} entries, expected {cols}", r.len()),
                ));
            }
            data.extend_from_slice(r);
        }
        Ok(Self { rows: rows.len(), cols, data })
    }

    pub fn column(values: &[f64]) -> Self {
        Self { rows: values.len(), cols: 1, data: values.to_vec() }
    }

    pub fn row_vector(values: &[f64]) -> Self {
        Self { rows: 1, cols: values.len(), data: values.to_vec() }
    }

    pub fn from_fn(rows: usize, cols: usize, mut f: impl FnMut(usize, usize) -> f64) -> Self {
        let mut data = Vec::with_capacity(rows * cols);
        for i in 0..rows {
            for j in 0..cols {
                data.push(f(i, j));
            }
        }
        Self { rows, cols, data }
    }

    #[inline]
    pub fn rows(&self) -> usize {
        self.rows
    }

    #[inline]
    pub fn cols(&self) -> usize {
        self.cols
    }

    #[inline]
    pub fn shape(&self) -> (usize, usize) {
        (self.rows, self.cols)
    }

    #[inline]
    pub fn len(&self) -> usize {
        self.data.len()
    }

    #[inline]
    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    #[inline]
    pub fn data(&self) -> &[f64] {
        &self.data
    }

    #[inline]
    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    #[inline]
    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.data[i * self.cols + j]
    }

    #[inline]
    pub fn set(&mut self, i: usize, j: usize, v: f64) {
        self.data[i * self.cols + j] = v;
    }

    #[inline]
    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.cols..(i + 1) * self.cols]
    }

    #[inline]
    pub fn row_mut(&mut self, i: usize) -> &mut [f64] {
        &mut self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn row_iter(&self) -> impl Iterator<Item = &[f64]> {
        // chunks_exact panics on a zero chunk size
        let cols = self.cols.max(1);
        self.data.chunks_exact(cols).take(self.rows)
    }

    pub fn select_rows(&self, idx: &[usize]) -> Matrix {
        let mut data = Vec::with_capacity(idx.len() * self.cols);
        for &i in idx {
            data.extend_from_slice(self.row(i));
        }
        Matrix { rows: idx.len(), cols: self.cols, data }
    }

    /// Stack `self` on top of `other`.
    pub fn vstack(&self, other: &Matrix) -> Result<Matrix> {
        if self.cols != other.cols && !self.is_empty() && !other.is_empty() {
            return Err(Error::shape(
                "Matrix::vstack",
                format!("{} vs {} columns", self.cols, other.cols),
            ));
        }
        let cols = if self.is_empty() { other.cols } else { self.cols };
        let mut data = self.data.clone();
        data.extend_from_slice(&other.data);
        Ok(Matrix { rows: self.rows + other.rows, cols, data })
    }

    pub fn transpose(&self) -> Matrix {
        let mut out = Matrix::zeros(self.cols, self.rows);
        for i in 0..self.rows {
            for j in 0..self.cols {
                out.data[j * self.rows + i] = self.data[i * self.cols + j];
            }
        }
        out
    }

    /// `self · rhs`.
    pub fn matmul(&self, rhs: &Matrix) -> Result<Matrix> {
        if self.cols != rhs.rows {
            return Err(Error::shape(
                "matmul",
                format!("{:?} x {:?}", self.shape(), rhs.shape()),
            ));
        }
        let (m, k, n) = (self.rows, self.cols, rhs.cols);
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            let out_row = &mut out[i * n..(i + 1) * n];
            for p in 0..k {
                let a = self.data[i * k + p];
                if a == 0.0 {
                    continue;
                }
                let b_row = &rhs.data[p * n..(p + 1) * n];
                for (o, &b) in out_row.iter_mut().zip(b_row) {
                    *o += a * b;
                }
            }
        }
        Ok(Matrix { rows: m, cols: n, data: out })
    }

    /// `selfᵀ · rhs`.
    pub fn matmul_tn(&self, rhs: &Matrix) -> Result<Matrix> {
        if self.rows != rhs.rows {
            return Err(Error::shape(
                "matmul_tn",
                format!("{:?}ᵀ x {:?}", self.shape(), rhs.shape()),
            ));
        }
        let (k, m, n) = (self.rows, self.cols, rhs.cols);
        let mut out = vec![0.0; m * n];
        for p in 0..k {
            let a_row = &self.data[p * m..(p + 1) * m];
            let b_row = &rhs.data[p * n..(p + 1) * n];
            for (i, &a) in a_row.iter().enumerate() {
                if a == 0.0 {
                    continue;
                }
                let out_row = &mut out[i * n..(i + 1) * n];
                for (o, &b) in out_row.iter_mut().zip(b_row) {
                    *o += a * b;
                }
            }
        }
        Ok(Matrix { rows: m, cols: n, data: out })
    }

    /// `self · rhsᵀ`.
    pub fn matmul_nt(&self, rhs: &Matrix) -> Result<Matrix> {
        if self.cols != rhs.cols {
            return Err(Error::shape(
                "matmul_nt",
                format!("{:?} x {:?}ᵀ", self.shape(), rhs.shape()),
            ));
        }
        let (m, n) = (self.rows, rhs.rows);
        let mut out = Vec::with_capacity(m * n);
        for i in 0..m {
            let a = self.row(i);
            for j in 0..n {
                out.push(dot(a, rhs.row(j)));
            }
        }
        Ok(Matrix { rows: m, cols: n, data: out })
    }

    /// Add a `1 × cols` row vector to every row.
    pub fn add_row_broadcast(&mut self, row: &Matrix) -> Result<()> {
        if row.rows != 1 || row.cols != self.cols {
            return Err(Error::shape(
                "add_row_broadcast",
                format!("{:?} onto {:?}", row.shape(), self.shape()),
            ));
        }
        for r in 0..self.rows {
            for (x, b) in self.row_mut(r).iter_mut().zip(&row.data) {
                *x += b;
            }
        }
        Ok(())
    }

    /// Column sums as a `1 × cols` matrix.
    pub fn column_sums(&self) -> Matrix {
        let mut out = vec![0.0; self.cols];
        for r in self.row_iter() {
            for (o, x) in out.iter_mut().zip(r) {
                *o += x;
            }
        }
        Matrix { rows: 1, cols: self.cols, data: out }
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Matrix {
        Matrix { rows: self.rows, cols: self.cols, data: self.data.iter().map(|&x| f(x)).collect() }
    }

    pub fn scale(&self, s: f64) -> Matrix {
        self.map(|x| x * s)
    }

    pub fn scale_in_place(&mut self, s: f64) {
        self.data.iter_mut().for_each(|x| *x *= s);
    }

    /// `self += alpha * other`.
    pub fn axpy(&mut self, alpha: f64, other: &Matrix) -> Result<()> {
        if self.shape() != other.shape() {
            return Err(Error::shape("axpy", format!("{:?} vs {:?}", self.shape(), other.shape())));
        }
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += alpha * b;
        }
        Ok(())
    }

    pub fn add(&self, other: &Matrix) -> Result<Matrix> {
        let mut out = self.clone();
        out.axpy(1.0, other)?;
        Ok(out)
    }

    pub fn sub(&self, other: &Matrix) -> Result<Matrix> {
        let mut out = self.clone();
        out.axpy(-1.0, other)?;
        Ok(out)
    }

    pub fn hadamard(&self, other: &Matrix) -> Result<Matrix> {
        if self.shape() != other.shape() {
            return Err(Error::shape("hadamard", format!("{:?} vs {:?}", self.shape(), other.shape())));
        }
        Ok(Matrix {
            rows: self.rows,
            cols: self.cols,
            data: self.data.iter().zip(&other.data).map(|(a, b)| a * b).collect(),
        })
    }

    pub fn frobenius_norm(&self) -> f64 {
        self.data.iter().map(|x| x * x).sum::<f64>().sqrt()
    }

    pub fn max_abs(&self) -> f64 {
        self.data.iter().fold(0.0_f64, |m, x| m.max(x.abs()))
    }

    pub fn sum(&self) -> f64 {
        self.data.iter().sum()
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|x| x.is_finite())
    }

    pub fn ensure_finite(&self, what: &str) -> Result<()> {
        match self.data.iter().position(|x| !x.is_finite()) {
            None => Ok(()),
            Some(p) => Err(Error::NonFinite(format!(
                "{what}: entry ({}, {}) = {}",
                p / self.cols.max(1),
                p % self.cols.max(1),
                self.data[p]
            ))),
        }
    }

    pub fn row_norms(&self) -> Vec<f64> {
        self.row_iter().map(|r| dot(r, r).sqrt()).collect()
    }
}

#[inline]
pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

// ── Row-wise kernels ────────────────────────────────────────────────────────

/// Pairwise cosine similarity between the rows of `a` (m×d) and `b` (n×d).
pub fn cosine_similarity_matrix(a: &Matrix, b: &Matrix) -> Result<Matrix> {
    if a.cols() != b.cols() {
        return Err(Error::shape(
            "cosine_similarity_matrix",
            format!("{} vs {} columns", a.cols(), b.cols()),
        ));
    }
    let na = a.row_norms();
    let nb = b.row_norms();
    for (which, norms) in [("A", &na), ("B", &nb)] {
        if let Some(i) = norms.iter().position(|&n| n == 0.0 || !n.is_finite()) {
            return Err(Error::degenerate(
                "cosine_similarity_matrix",
                format!("row {i} of {which} has norm {}", norms[i]),
            ));
        }
    }
    let mut out = a.matmul_nt(b)?;
    for i in 0..out.rows() {
        for j in 0..out.cols() {
            let v = out.get(i, j) / (na[i] * nb[j]);
            out.set(i, j, v.clamp(-1.0, 1.0));
        }
    }
    Ok(out)
}

/// Row-wise softmax, computed after subtracting each row's maximum.
pub fn softmax_rows(logits: &Matrix) -> Matrix {
    let mut out = logits.clone();
    for r in 0..out.rows() {
        let row = out.row_mut(r);
        let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let mut total = 0.0;
        for x in row.iter_mut() {
            *x = (*x - max).exp();
            total += *x;
        }
        for x in row.iter_mut() {
            *x /= total;
        }
    }
    out
}

/// Backward pass of [`softmax_rows`]: given probabilities `p` and upstream
/// gradient `g`, returns `p ⊙ (g − ⟨g, p⟩)` row by row.
pub fn softmax_rows_backward(p: &Matrix, g: &Matrix) -> Result<Matrix> {
    if p.shape() != g.shape() {
        return Err(Error::shape("softmax_rows_backward", format!("{:?} vs {:?}", p.shape(), g.shape())));
    }
    let mut out = Matrix::zeros(p.rows(), p.cols());
    for r in 0..p.rows() {
        let (pr, gr) = (p.row(r), g.row(r));
        let inner = dot(pr, gr);
        for (o, (pi, gi)) in out.row_mut(r).iter_mut().zip(pr.iter().zip(gr)) {
            *o = pi * (gi - inner);
        }
    }
    Ok(out)
}

/// Row-wise `log Σ exp(x)`.
pub fn logsumexp_rows(logits: &Matrix) -> Vec<f64> {
    logits.row_iter().map(logsumexp).collect()
}

pub fn logsumexp(row: &[f64]) -> f64 {
    let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    if max == f64::NEG_INFINITY {
        return max;
    }
    max + row.iter().map(|x| (x - max).exp()).sum::<f64>().ln()
}

/// Divide every row by its L2 norm. Returns the normalized rows and the norms.
pub fn normalize_rows(x: &Matrix) -> Result<(Matrix, Vec<f64>)> {
    let norms = x.row_norms();
    if let Some(i) = norms.iter().position(|&n| n == 0.0 || !n.is_finite()) {
        return Err(Error::degenerate("normalize_rows", format!("row {i} has norm {}", norms[i])));
    }
    let mut out = x.clone();
    for (r, n) in norms.iter().enumerate() {
        out.row_mut(r).iter_mut().for_each(|v| *v /= n);
    }
    Ok((out, norms))
}

/// Backward pass of [`normalize_rows`]: `(g − y⟨y, g⟩) / ‖x‖` per row.
pub fn normalize_rows_backward(y: &Matrix, norms: &[f64], g: &Matrix) -> Result<Matrix> {
    if y.shape() != g.shape() || norms.len() != y.rows() {
        return Err(Error::shape("normalize_rows_backward", format!("{:?} vs {:?}", y.shape(), g.shape())));
    }
    let mut out = Matrix::zeros(y.rows(), y.cols());
    for r in 0..y.rows() {
        let (yr, gr) = (y.row(r), g.row(r));
        let inner = dot(yr, gr);
        for (o, (yi, gi)) in out.row_mut(r).iter_mut().zip(yr.iter().zip(gr)) {
            *o = (gi - yi * inner) / norms[r];
        }
    }
    Ok(out)
}

// ── Finite differences ──────────────────────────────────────────────────────

/// Central-difference gradient of a scalar function at `x`.
pub fn finite_difference_gradient<F>(mut f: F, x: &Matrix, eps: f64) -> Result<Matrix>
where
    F: FnMut(&Matrix) -> f64,
{
    if !(eps > 0.0) {
        return Err(Error::OracleFailure(format!("eps must be positive, got {eps}")));
    }
    let mut probe = x.clone();
    let mut grad = Matrix::zeros(x.rows(), x.cols());
    for k in 0..x.len() {
        let orig = probe.data[k];
        probe.data[k] = orig + eps;
        let plus = f(&probe);
        probe.data[k] = orig - eps;
        let minus = f(&probe);
        probe.data[k] = orig;
        if !plus.is_finite() || !minus.is_finite() {
            return Err(Error::OracleFailure(format!(
                "f is not finite around coordinate {k}: f(x+eps) = {plus}, f(x-eps) = {minus}"
            )));
        }
        grad.data[k] = (plus - minus) / (2.0 * eps);
    }
    Ok(grad)
}

/// Largest entrywise relative error between an analytic and a numeric
/// gradient. Entries whose magnitude is below `floor` are compared on an
/// absolute scale of `floor`.
pub fn max_relative_error(analytic: &Matrix, numeric: &Matrix, floor: f64) -> f64 {
    analytic
        .data()
        .iter()
        .zip(numeric.data())
        .map(|(a, n)| (a - n).abs() / a.abs().max(n.abs()).max(floor))
        .fold(0.0, f64::max)
}

// ── Seeded randomness ───────────────────────────────────────────────────────

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

fn fnv1a(label: &str) -> u64 {
    label.bytes().fold(0xcbf2_9ce4_8422_2325, |h, b| (h ^ b as u64).wrapping_mul(0x0000_0100_0000_01b3))
}

/// A deterministic random stream identified by `(seed, label)`.
///
/// Streams with different labels are seeded from independent 64-bit keys,
/// so consumers never share draws.
#[derive(Debug, Clone)]
pub struct RngStream {
    seed: u64,
    label: String,
    rng: ChaCha8Rng,
}

impl RngStream {
    pub fn new(seed: u64, label: &str) -> Self {
        let key = splitmix64(seed ^ splitmix64(fnv1a(label)));
        Self { seed, label: label.to_string(), rng: ChaCha8Rng::seed_from_u64(key) }
    }

    /// A fresh stream for a sub-purpose, independent of this stream's state.
    pub fn fork(&self, sub: &str) -> Self {
        Self::new(self.seed, &format!("{}/{}", self.label, sub))
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn label(&self) -> &str {
        &self.label
    }

    /// Uniform draw in `[0, 1)`.
    pub fn uniform(&mut self) -> f64 {
        (self.rng.next_u64() >> 11) as f64 / (1u64 << 53) as f64
    }

    pub fn normal(&mut self) -> f64 {
        StandardNormal.sample(&mut self.rng)
    }

    pub fn gamma(&mut self, shape: f64) -> Result<f64> {
        let g = Gamma::new(shape, 1.0)
            .map_err(|e| Error::Config(format!("gamma shape {shape}: {e}")))?;
        Ok(g.sample(&mut self.rng))
    }

    /// Uniform index in `0..n`.
    pub fn index(&mut self, n: usize) -> usize {
        assert!(n > 0, "index() over an empty range");
        // rejection sampling keeps the draw unbiased
        let n64 = n as u64;
        let zone = u64::MAX - (u64::MAX % n64);
        loop {
            let v = self.rng.next_u64();
            if v < zone {
                return (v % n64) as usize;
            }
        }
    }

    /// Fisher-Yates shuffle.
    pub fn shuffle<T>(&mut self, items: &mut [T]) {
        for i in (1..items.len()).rev() {
            let j = self.index(i + 1);
            items.swap(i, j);
        }
    }

    /// `k` distinct indices from `0..n`, in draw order.
    pub fn sample_without_replacement(&mut self, n: usize, k: usize) -> Vec<usize> {
        assert!(k <= n, "cannot draw {k} distinct items from {n}");
        let mut pool: Vec<usize> = (0..n).collect();
        for i in 0..k {
            let j = i + self.index(n - i);
            pool.swap(i, j);
        }
        pool.truncate(k);
        pool
    }

    pub fn normal_matrix(&mut self, rows: usize, cols: usize, std: f64) -> Matrix {
        Matrix::from_fn(rows, cols, |_, _| std * self.normal())
    }
}

impl RngCore for RngStream {
    fn next_u32(&mut self) -> u32 {
        self.rng.next_u32()
    }

    fn next_u64(&mut self) -> u64 {
        self.rng.next_u64()
    }

    fn fill_bytes(&mut self, dst: &mut [u8]) {
        self.rng.fill_bytes(dst)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use proptest::prelude::*;
    use rand::RngCore;

    #[test]
    fn cosine_examples() {
        let a = Matrix::from_rows(&[[1.0, 0.0]]).unwrap();
        let b = Matrix::from_rows(&[[0.0, 1.0]]).unwrap();
        assert_eq!(cosine_similarity_matrix(&a, &a).unwrap().get(0, 0), 1.0);
        assert_eq!(cosine_similarity_matrix(&a, &b).unwrap().get(0, 0), 0.0);
        let c = Matrix::from_rows(&[[3.0, 4.0]]).unwrap();
        let d = Matrix::from_rows(&[[4.0, 3.0]]).unwrap();
        assert_abs_diff_eq!(cosine_similarity_matrix(&c, &d).unwrap().get(0, 0), 0.96, epsilon = 1e-15);
    }

    #[test]
    fn cosine_rejects_zero_rows() {
        let a = Matrix::from_rows(&[[1.0, 0.0], [0.0, 0.0]]).unwrap();
        let err = cosine_similarity_matrix(&a, &a).unwrap_err();
        assert!(matches!(err, Error::Degenerate { .. }), "{err}");
    }

    #[test]
    fn softmax_examples() {
        let s = softmax_rows(&Matrix::from_rows(&[[0.0, 0.0]]).unwrap());
        assert_eq!(s.row(0), &[0.5, 0.5]);
        let s = softmax_rows(&Matrix::from_rows(&[[2f64.ln(), 0.0]]).unwrap());
        assert_abs_diff_eq!(s.get(0, 0), 2.0 / 3.0, epsilon = 1e-15);
        assert_abs_diff_eq!(s.get(0, 1), 1.0 / 3.0, epsilon = 1e-15);
        let s = softmax_rows(&Matrix::from_rows(&[[1000.0, 1000.0]]).unwrap());
        assert_eq!(s.row(0), &[0.5, 0.5]);
    }

    #[test]
    fn logsumexp_examples() {
        let l = logsumexp_rows(&Matrix::from_rows(&[[0.0, 0.0]]).unwrap());
        assert_abs_diff_eq!(l[0], 2f64.ln(), epsilon = 1e-15);
        assert_eq!(logsumexp_rows(&Matrix::from_rows(&[[5.0]]).unwrap())[0], 5.0);
        let l = logsumexp_rows(&Matrix::from_rows(&[[-1000.0, 0.0]]).unwrap());
        assert_abs_diff_eq!(l[0], 0.0, epsilon = 1e-300);
    }

    #[test]
    fn finite_difference_examples() {
        let x = Matrix::from_rows(&[[3.0]]).unwrap();
        let g = finite_difference_gradient(|m| m.get(0, 0).powi(2), &x, 1e-5).unwrap();
        assert_abs_diff_eq!(g.get(0, 0), 6.0, epsilon = 1e-6);

        let x = Matrix::from_rows(&[[1.0, 2.0]]).unwrap();
        let g = finite_difference_gradient(|m| m.data().iter().map(|v| v * v).sum(), &x, 1e-5).unwrap();
        assert_abs_diff_eq!(g.get(0, 0), 2.0, epsilon = 1e-6);
        assert_abs_diff_eq!(g.get(0, 1), 4.0, epsilon = 1e-6);
    }

    #[test]
    fn finite_difference_reports_non_finite() {
        let x = Matrix::from_rows(&[[0.0]]).unwrap();
        let err = finite_difference_gradient(|m| 1.0 / m.get(0, 0).abs().min(0.0), &x, 1e-5).unwrap_err();
        assert!(matches!(err, Error::OracleFailure(_)));
    }

    /// Softmax cross-entropy: analytic gradient `p − onehot` against the oracle.
    #[test]
    fn finite_difference_matches_softmax_cross_entropy() {
        let mut rng = RngStream::new(11, "test/softmax-ce");
        let logits = rng.normal_matrix(4, 5, 2.0);
        let targets = [0usize, 3, 4, 1];
        let loss = |z: &Matrix| -> f64 {
            let lse = logsumexp_rows(z);
            targets.iter().enumerate().map(|(i, &t)| lse[i] - z.get(i, t)).sum::<f64>() / 4.0
        };
        let mut analytic = softmax_rows(&logits);
        for (i, &t) in targets.iter().enumerate() {
            let v = analytic.get(i, t) - 1.0;
            analytic.set(i, t, v);
        }
        analytic.scale_in_place(0.25);
        let numeric = finite_difference_gradient(loss, &logits, 1e-5).unwrap();
        assert!(max_relative_error(&analytic, &numeric, 1e-8) < 1e-6);
    }

    #[test]
    fn normalize_backward_matches_oracle() {
        let mut rng = RngStream::new(5, "test/normalize");
        let x = rng.normal_matrix(3, 4, 1.0);
        let w = rng.normal_matrix(3, 4, 1.0);
        let f = |m: &Matrix| normalize_rows(m).unwrap().0.hadamard(&w).unwrap().sum();
        let (y, norms) = normalize_rows(&x).unwrap();
        let analytic = normalize_rows_backward(&y, &norms, &w).unwrap();
        let numeric = finite_difference_gradient(f, &x, 1e-5).unwrap();
        assert!(max_relative_error(&analytic, &numeric, 1e-8) < 1e-6);
    }

    #[test]
    fn matmul_variants_agree() {
        let mut rng = RngStream::new(3, "test/matmul");
        let a = rng.normal_matrix(3, 4, 1.0);
        let b = rng.normal_matrix(4, 5, 1.0);
        let ab = a.matmul(&b).unwrap();
        let ab_tn = a.transpose().matmul_tn(&b).unwrap();
        let ab_nt = a.matmul_nt(&b.transpose()).unwrap();
        for k in 0..ab.len() {
            assert_abs_diff_eq!(ab.data()[k], ab_tn.data()[k], epsilon = 1e-12);
            assert_abs_diff_eq!(ab.data()[k], ab_nt.data()[k], epsilon = 1e-12);
        }
        assert!(a.matmul(&a).is_err());
    }

    #[test]
    fn rng_streams_are_reproducible_and_label_separated() {
        let mut a = RngStream::new(7, "x");
        let mut b = RngStream::new(7, "x");
        let mut c = RngStream::new(7, "y");
        let va: Vec<u64> = (0..8).map(|_| a.next_u64()).collect();
        let vb: Vec<u64> = (0..8).map(|_| b.next_u64()).collect();
        let vc: Vec<u64> = (0..8).map(|_| c.next_u64()).collect();
        assert_eq!(va, vb);
        assert_ne!(va, vc);
    }

    #[test]
    fn rng_streams_look_independent() {
        // correlation of paired uniforms from two labels should be near zero
        let mut a = RngStream::new(1, "left");
        let mut b = RngStream::new(1, "right");
        let n = 20_000;
        let (xs, ys): (Vec<f64>, Vec<f64>) = (0..n).map(|_| (a.uniform() - 0.5, b.uniform() - 0.5)).unzip();
        let corr = dot(&xs, &ys) / (dot(&xs, &xs).sqrt() * dot(&ys, &ys).sqrt());
        assert!(corr.abs() < 0.03, "corr = {corr}");
    }

    proptest! {
        #[test]
        fn softmax_rows_sum_to_one(row in proptest::collection::vec(-1e6f64..1e6, 1..12)) {
            let s = softmax_rows(&Matrix::row_vector(&row));
            prop_assert!((s.sum() - 1.0).abs() < 1e-12);
            prop_assert!(s.data().iter().all(|&p| p >= 0.0));
        }

        #[test]
        fn logsumexp_is_bracketed(row in proptest::collection::vec(-1e3f64..1e3, 1..12)) {
            let l = logsumexp(&row);
            let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            prop_assert!(l >= max);
            prop_assert!(l <= max + (row.len() as f64).ln() + 1e-12);
        }

        #[test]
        fn self_cosine_has_unit_diagonal(seed in 0u64..1000, rows in 1usize..6, cols in 1usize..6) {
            let a = RngStream::new(seed, "prop/cos").normal_matrix(rows, cols, 3.0);
            let c = cosine_similarity_matrix(&a, &a).unwrap();
            for i in 0..rows {
                prop_assert!((c.get(i, i) - 1.0).abs() < 1e-12);
            }
            prop_assert!(c.data().iter().all(|v| (-1.0..=1.0).contains(v)));
        }
    }
}
