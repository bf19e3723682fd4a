//! Dense row-major linear algebra and the elementary kernels shared by the
//! attention, flow and spectral code.
//!
//! Reductions always accumulate left to right in index order so that results
//! are bit-identical from run to run.

use rustfft::num_complex::Complex64;
use rustfft::FftPlanner;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Row-major matrix of `f64`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "RawMatrix")]
pub struct RealMatrix {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct RawMatrix {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl TryFrom<RawMatrix> for RealMatrix {
    type Error = Error;

    fn try_from(raw: RawMatrix) -> Result<Self> {
        RealMatrix::from_vec(raw.rows, raw.cols, raw.data)
    }
}

/// A token sequence is an N x D matrix with one token per row.
pub type TokenSequence = RealMatrix;

impl RealMatrix {
    /// Builds a matrix from row-major data, rejecting wrong lengths and
    /// non-finite entries.
    pub fn from_vec(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        if rows.checked_mul(cols) != Some(data.len()) {
            return Err(Error::InvalidParameter(format!(
                "{rows}x{cols} matrix needs {} values, got {}",
                rows.saturating_mul(cols),
                data.len()
            )));
        }
        if let Some(index) = data.iter().position(|v| !v.is_finite()) {
            return Err(Error::NonFinite { index });
        }
        Ok(Self { rows, cols, data })
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let cols = rows.first().map_or(0, Vec::len);
        if rows.iter().any(|r| r.len() != cols) {
            return Err(Error::InvalidParameter("ragged rows".into()));
        }
        Self::from_vec(rows.len(), cols, rows.concat())
    }

    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    pub fn filled(rows: usize, cols: usize, value: f64) -> Self {
        Self {
            rows,
            cols,
            data: vec![value; rows * cols],
        }
    }

    pub fn identity(n: usize) -> Self {
        let mut m = Self::zeros(n, n);
        for i in 0..n {
            m.data[i * n + i] = 1.0;
        }
        m
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

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.rows, self.cols)
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

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
    pub fn set(&mut self, i: usize, j: usize, value: f64) {
        self.data[i * self.cols + j] = value;
    }

    #[inline]
    pub fn add_at(&mut self, i: usize, j: usize, value: f64) {
        self.data[i * self.cols + j] += value;
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn row_mut(&mut self, i: usize) -> &mut [f64] {
        &mut self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn column(&self, j: usize) -> Vec<f64> {
        (0..self.rows).map(|i| self.get(i, j)).collect()
    }

    pub fn transpose(&self) -> Self {
        Self::from_fn(self.cols, self.rows, |i, j| self.get(j, i))
    }

    pub fn matmul(&self, other: &Self) -> Result<Self> {
        matmul(self, other)
    }

    pub fn scaled(&self, factor: f64) -> Self {
        self.map(|v| v * factor)
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Self {
        Self {
            rows: self.rows,
            cols: self.cols,
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    /// Elementwise combination of two equally shaped matrices.
    pub fn zip_with(&self, other: &Self, f: impl Fn(f64, f64) -> f64) -> Result<Self> {
        if self.shape() != other.shape() {
            return Err(Error::shape("zip_with", self.shape(), other.shape()));
        }
        Ok(Self {
            rows: self.rows,
            cols: self.cols,
            data: self
                .data
                .iter()
                .zip(&other.data)
                .map(|(&a, &b)| f(a, b))
                .collect(),
        })
    }

    pub fn add(&self, other: &Self) -> Result<Self> {
        self.zip_with(other, |a, b| a + b)
    }

    pub fn sub(&self, other: &Self) -> Result<Self> {
        self.zip_with(other, |a, b| a - b)
    }

    pub fn hadamard(&self, other: &Self) -> Result<Self> {
        self.zip_with(other, |a, b| a * b)
    }

    pub fn add_assign(&mut self, other: &Self) -> Result<()> {
        if self.shape() != other.shape() {
            return Err(Error::shape("add_assign", self.shape(), other.shape()));
        }
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
        Ok(())
    }

    pub fn row_sums(&self) -> Vec<f64> {
        (0..self.rows).map(|i| sum(self.row(i))).collect()
    }

    pub fn frobenius_norm(&self) -> f64 {
        norm(&self.data)
    }

    pub fn max_abs_diff(&self, other: &Self) -> Result<f64> {
        if self.shape() != other.shape() {
            return Err(Error::shape("max_abs_diff", self.shape(), other.shape()));
        }
        Ok(self
            .data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max))
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn is_symmetric(&self, tol: f64) -> bool {
        self.rows == self.cols
            && (0..self.rows)
                .all(|i| (0..i).all(|j| (self.get(i, j) - self.get(j, i)).abs() <= tol))
    }

    /// Column-wise concatenation `[a | b | ...]`.
    pub fn hconcat(parts: &[Self]) -> Result<Self> {
        let Some(first) = parts.first() else {
            return Ok(Self::zeros(0, 0));
        };
        let rows = first.rows;
        if let Some(bad) = parts.iter().find(|p| p.rows != rows) {
            return Err(Error::shape("hconcat", first.shape(), bad.shape()));
        }
        let cols = parts.iter().map(|p| p.cols).sum();
        let mut data = Vec::with_capacity(rows * cols);
        for i in 0..rows {
            for p in parts {
                data.extend_from_slice(p.row(i));
            }
        }
        Ok(Self { rows, cols, data })
    }

    /// Columns `start..start + width`.
    pub fn column_block(&self, start: usize, width: usize) -> Self {
        Self::from_fn(self.rows, width, |i, j| self.get(i, start + j))
    }

    /// Applies a row permutation: row `i` of the result is row `perm[i]` of `self`.
    pub fn permute_rows(&self, perm: &[usize]) -> Self {
        Self::from_fn(self.rows, self.cols, |i, j| self.get(perm[i], j))
    }
}

/// Complex vector holding a spectrum.
#[derive(Debug, Clone, PartialEq)]
pub struct ComplexVector {
    data: Vec<Complex64>,
}

impl ComplexVector {
    pub fn new(data: Vec<Complex64>) -> Self {
        Self { data }
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn data(&self) -> &[Complex64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [Complex64] {
        &mut self.data
    }
}

pub fn sum(values: &[f64]) -> f64 {
    values.iter().fold(0.0, |acc, v| acc + v)
}

pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).fold(0.0, |acc, (x, y)| acc + x * y)
}

pub fn norm(values: &[f64]) -> f64 {
    dot(values, values).sqrt()
}

pub fn mean(values: &[f64]) -> f64 {
    sum(values) / values.len() as f64
}

pub fn euclidean_distance(a: &[f64], b: &[f64]) -> f64 {
    a.iter()
        .zip(b)
        .fold(0.0, |acc, (x, y)| acc + (x - y) * (x - y))
        .sqrt()
}

/// Matrix product with a fixed i-k-j accumulation order.
pub fn matmul(a: &RealMatrix, b: &RealMatrix) -> Result<RealMatrix> {
    if a.cols != b.rows {
        return Err(Error::shape("matmul", a.shape(), b.shape()));
    }
    let mut out = RealMatrix::zeros(a.rows, b.cols);
    for i in 0..a.rows {
        let out_row = &mut out.data[i * b.cols..(i + 1) * b.cols];
        for k in 0..a.cols {
            let aik = a.data[i * a.cols + k];
            if aik == 0.0 {
                continue;
            }
            for (o, &bkj) in out_row.iter_mut().zip(b.row(k)) {
                *o += aik * bkj;
            }
        }
    }
    Ok(out)
}

/// `a * b^T` without materialising the transpose.
pub fn matmul_transposed(a: &RealMatrix, b: &RealMatrix) -> Result<RealMatrix> {
    if a.cols != b.cols {
        return Err(Error::shape("matmul_transposed", a.shape(), b.shape()));
    }
    Ok(RealMatrix::from_fn(a.rows, b.rows, |i, j| {
        dot(a.row(i), b.row(j))
    }))
}

/// Row-wise softmax with per-row max subtraction.
pub fn row_softmax(m: &RealMatrix) -> RealMatrix {
    let mut out = m.clone();
    for i in 0..m.rows {
        let row = out.row_mut(i);
        let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        for v in row.iter_mut() {
            *v = (*v - max).exp();
        }
        let total = sum(row);
        for v in row.iter_mut() {
            *v /= total;
        }
    }
    out
}

/// N x N Euclidean distances between the rows of `v`.
pub fn pairwise_distances(v: &RealMatrix) -> RealMatrix {
    let n = v.rows;
    let mut out = RealMatrix::zeros(n, n);
    for i in 0..n {
        for j in (i + 1)..n {
            let d = euclidean_distance(v.row(i), v.row(j));
            out.set(i, j, d);
            out.set(j, i, d);
        }
    }
    out
}

/// Unitary DFT: `X_k = n^{-1/2} sum_m z_m e^{-2 pi i k m / n}`.
pub fn dft(z: &[f64]) -> ComplexVector {
    let mut buf: Vec<Complex64> = z.iter().map(|&re| Complex64::new(re, 0.0)).collect();
    if buf.is_empty() {
        return ComplexVector::new(buf);
    }
    let fft = FftPlanner::new().plan_fft_forward(buf.len());
    fft.process(&mut buf);
    let scale = 1.0 / (buf.len() as f64).sqrt();
    buf.iter_mut().for_each(|c| *c *= scale);
    ComplexVector::new(buf)
}

/// Inverse of [`dft`]; returns the real part.
pub fn idft(spectrum: &ComplexVector) -> Vec<f64> {
    let mut buf = spectrum.data.clone();
    if buf.is_empty() {
        return Vec::new();
    }
    let ifft = FftPlanner::new().plan_fft_inverse(buf.len());
    ifft.process(&mut buf);
    let scale = 1.0 / (buf.len() as f64).sqrt();
    buf.iter().map(|c| c.re * scale).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn m(rows: &[&[f64]]) -> RealMatrix {
        RealMatrix::from_rows(&rows.iter().map(|r| r.to_vec()).collect::<Vec<_>>()).unwrap()
    }

    #[test]
    fn matmul_identity_and_zero() {
        let a = m(&[&[1.0, -2.0, 3.5], &[0.25, 4.0, -1.0], &[2.0, 2.0, 2.0]]);
        assert_eq!(matmul(&RealMatrix::identity(3), &a).unwrap(), a);
        assert_eq!(
            matmul(&a, &RealMatrix::zeros(3, 2)).unwrap(),
            RealMatrix::zeros(3, 2)
        );
    }

    #[test]
    fn matmul_hand_computed() {
        let a = m(&[&[1.0, 2.0], &[3.0, 4.0]]);
        let b = m(&[&[5.0], &[6.0]]);
        assert_eq!(matmul(&a, &b).unwrap(), m(&[&[17.0], &[39.0]]));
    }

    #[test]
    fn matmul_shape_error_names_both_shapes() {
        let err = matmul(&RealMatrix::zeros(2, 3), &RealMatrix::zeros(2, 3)).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("2x3"), "{msg}");
        assert_eq!(
            err,
            Error::Shape {
                op: "matmul",
                left: "2x3".into(),
                right: "2x3".into()
            }
        );
    }

    #[test]
    fn from_vec_rejects_bad_input() {
        assert!(RealMatrix::from_vec(2, 2, vec![1.0; 3]).is_err());
        assert_eq!(
            RealMatrix::from_vec(1, 2, vec![1.0, f64::NAN]),
            Err(Error::NonFinite { index: 1 })
        );
    }

    #[test]
    fn softmax_examples() {
        assert_eq!(row_softmax(&m(&[&[0.0, 0.0]])), m(&[&[0.5, 0.5]]));
        for x in [-1e300, -3.0, 0.0, 7.5, 1e300] {
            assert_eq!(row_softmax(&m(&[&[x]])).get(0, 0), 1.0);
        }
        // exp(k) / (e + e^2 + e^3), evaluated independently
        let e = std::f64::consts::E;
        let z = e + e * e + e * e * e;
        let expected = [e / z, e * e / z, e * e * e / z];
        let got = row_softmax(&m(&[&[1.0, 2.0, 3.0]]));
        for (g, want) in got.row(0).iter().zip(expected) {
            assert!((g - want).abs() < 1e-15);
        }
        assert!((got.get(0, 0) - 0.09003).abs() < 1e-5);
        assert!((got.get(0, 1) - 0.24473).abs() < 1e-5);
        assert!((got.get(0, 2) - 0.66524).abs() < 1e-5);
    }

    #[test]
    fn softmax_large_logits_stay_finite() {
        let s = row_softmax(&m(&[&[1000.0, 1001.0, -1000.0]]));
        assert!(s.is_finite());
        assert!((sum(s.row(0)) - 1.0).abs() < 1e-12);
    }

    #[test]
    fn distance_examples() {
        assert_eq!(pairwise_distances(&m(&[&[1.0, 2.0]])), m(&[&[0.0]]));
        let d = pairwise_distances(&m(&[&[0.0, 0.0], &[3.0, 4.0]]));
        assert_eq!(d, m(&[&[0.0, 5.0], &[5.0, 0.0]]));
        let dup = pairwise_distances(&m(&[&[1.5, -2.0], &[1.5, -2.0], &[1.5, -2.0]]));
        assert_eq!(dup, RealMatrix::zeros(3, 3));
    }

    fn naive_dft(z: &[f64]) -> Vec<Complex64> {
        let n = z.len();
        (0..n)
            .map(|k| {
                let mut acc = Complex64::new(0.0, 0.0);
                for (t, &x) in z.iter().enumerate() {
                    let angle = -2.0 * std::f64::consts::PI * (k * t) as f64 / n as f64;
                    acc += Complex64::from_polar(x, angle);
                }
                acc / (n as f64).sqrt()
            })
            .collect()
    }

    #[test]
    fn dft_examples() {
        let s = dft(&[1.0; 4]);
        assert!((s.data()[0] - Complex64::new(2.0, 0.0)).norm() < 1e-15);
        for c in &s.data()[1..] {
            assert!(c.norm() < 1e-15);
        }
        assert!(dft(&[0.0; 5]).data().iter().all(|c| c.norm() == 0.0));
    }

    #[test]
    fn dft_matches_direct_summation() {
        let z = [0.3, -1.2, 2.5, 0.0, 4.25, -0.75, 1.0];
        let want = naive_dft(&z);
        for (got, want) in dft(&z).data().iter().zip(&want) {
            assert!((got - want).norm() < 1e-12);
        }
    }

    fn matrix_strategy(max_rows: usize, max_cols: usize) -> impl Strategy<Value = RealMatrix> {
        (1..=max_rows, 1..=max_cols).prop_flat_map(|(r, c)| {
            proptest::collection::vec(-50.0f64..50.0, r * c)
                .prop_map(move |data| RealMatrix::from_vec(r, c, data).unwrap())
        })
    }

    proptest! {
        #[test]
        fn softmax_rows_sum_to_one(a in matrix_strategy(8, 12)) {
            let s = row_softmax(&a);
            for i in 0..s.rows() {
                prop_assert!((sum(s.row(i)) - 1.0).abs() <= 1e-12);
                prop_assert!(s.row(i).iter().all(|&v| v >= 0.0));
            }
        }

        #[test]
        fn distances_form_a_metric(v in matrix_strategy(7, 4)) {
            let d = pairwise_distances(&v);
            let n = d.rows();
            for i in 0..n {
                prop_assert_eq!(d.get(i, i), 0.0);
                for j in 0..n {
                    prop_assert_eq!(d.get(i, j), d.get(j, i));
                    for k in 0..n {
                        prop_assert!(d.get(i, k) <= d.get(i, j) + d.get(j, k) + 1e-9);
                    }
                }
            }
        }

        #[test]
        fn dft_round_trip(z in proptest::collection::vec(-1e3f64..1e3, 1..=1024)) {
            let back = idft(&dft(&z));
            let err = z.iter().zip(&back).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
            prop_assert!(err < 1e-10, "err {}", err);
        }

        #[test]
        fn matmul_is_repeatable(a in matrix_strategy(6, 6), b in matrix_strategy(6, 6)) {
            if a.cols() == b.rows() {
                let first = matmul(&a, &b).unwrap();
                let second = matmul(&a, &b).unwrap();
                prop_assert!(first.data().iter().zip(second.data()).all(|(x, y)| x.to_bits() == y.to_bits()));
            }
        }
    }
}
