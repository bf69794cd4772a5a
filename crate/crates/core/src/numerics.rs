//! Dense row-major matrices, log-space primitives and seeded random streams.
//!
//! Everything here is `f64`. The contrastive logits reach `α + β` with `α`
//! around 10-100, so every probability is handled in log space and only
//! exponentiated after max-subtraction.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{ensure, Error, Result};

/// Row-major dense matrix of `f64`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Matrix {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl Matrix {
    /// Builds a matrix from row-major data, rejecting shape mismatches and
    /// non-finite entries.
    pub fn new(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        ensure!(
            rows * cols == data.len(),
            "matrix {rows}x{cols} needs {} values, got {}",
            rows * cols,
            data.len()
        );
        if let Some(pos) = data.iter().position(|v| !v.is_finite()) {
            return Err(Error::invalid(format!(
                "matrix entry ({}, {}) is not finite",
                pos / cols.max(1),
                pos % cols.max(1)
            )));
        }
        Ok(Self { rows, cols, data })
    }

    pub(crate) fn from_vec_unchecked(rows: usize, cols: usize, data: Vec<f64>) -> Self {
        debug_assert_eq!(rows * cols, data.len());
        Self { rows, cols, data }
    }

    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self::from_vec_unchecked(rows, cols, vec![0.0; rows * cols])
    }

    pub fn identity(n: usize) -> Self {
        let mut m = Self::zeros(n, n);
        for i in 0..n {
            m[(i, i)] = 1.0;
        }
        m
    }

    pub fn filled(rows: usize, cols: usize, value: f64) -> Self {
        Self::from_vec_unchecked(rows, cols, vec![value; rows * cols])
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let cols = rows.first().map_or(0, Vec::len);
        ensure!(
            rows.iter().all(|r| r.len() == cols),
            "ragged rows in matrix literal"
        );
        Self::new(rows.len(), cols, rows.concat())
    }

    /// Builds a matrix from a generator over `(row, col)`.
    pub fn from_fn(rows: usize, cols: usize, mut f: impl FnMut(usize, usize) -> f64) -> Self {
        let mut data = Vec::with_capacity(rows * cols);
        for i in 0..rows {
            for j in 0..cols {
                data.push(f(i, j));
            }
        }
        Self::from_vec_unchecked(rows, cols, data)
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

    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn row_mut(&mut self, i: usize) -> &mut [f64] {
        &mut self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn transpose(&self) -> Matrix {
        Matrix::from_fn(self.cols, self.rows, |i, j| self[(j, i)])
    }

    /// Gathers the listed rows, in order. Indices may repeat.
    pub fn select_rows(&self, indices: &[usize]) -> Matrix {
        let mut data = Vec::with_capacity(indices.len() * self.cols);
        for &i in indices {
            data.extend_from_slice(self.row(i));
        }
        Matrix::from_vec_unchecked(indices.len(), self.cols, data)
    }

    /// Gathers the square sub-matrix on `indices × indices`.
    pub fn select_square(&self, indices: &[usize]) -> Matrix {
        Matrix::from_fn(indices.len(), indices.len(), |i, j| {
            self[(indices[i], indices[j])]
        })
    }

    /// `self · other`.
    pub fn matmul(&self, other: &Matrix) -> Result<Matrix> {
        ensure!(
            self.cols == other.rows,
            "matmul shape mismatch: {:?} x {:?}",
            self.shape(),
            other.shape()
        );
        let mut out = Matrix::zeros(self.rows, other.cols);
        for i in 0..self.rows {
            let out_row = &mut out.data[i * other.cols..(i + 1) * other.cols];
            for (k, &a) in self.row(i).iter().enumerate() {
                if a == 0.0 {
                    continue;
                }
                for (o, &b) in out_row.iter_mut().zip(other.row(k)) {
                    *o += a * b;
                }
            }
        }
        Ok(out)
    }

    /// `self · otherᵀ`; entry `(i, j)` is the dot product of row `i` with row `j` of `other`.
    pub fn matmul_t(&self, other: &Matrix) -> Result<Matrix> {
        ensure!(
            self.cols == other.cols,
            "matmul_t shape mismatch: {:?} x {:?}ᵀ",
            self.shape(),
            other.shape()
        );
        Ok(Matrix::from_fn(self.rows, other.rows, |i, j| {
            dot(self.row(i), other.row(j))
        }))
    }

    /// `selfᵀ · other`.
    pub fn t_matmul(&self, other: &Matrix) -> Result<Matrix> {
        ensure!(
            self.rows == other.rows,
            "t_matmul shape mismatch: {:?}ᵀ x {:?}",
            self.shape(),
            other.shape()
        );
        let mut out = Matrix::zeros(self.cols, other.cols);
        for r in 0..self.rows {
            let b_row = other.row(r);
            for (i, &a) in self.row(r).iter().enumerate() {
                if a == 0.0 {
                    continue;
                }
                let out_row = &mut out.data[i * other.cols..(i + 1) * other.cols];
                for (o, &b) in out_row.iter_mut().zip(b_row) {
                    *o += a * b;
                }
            }
        }
        Ok(out)
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Matrix {
        Matrix::from_vec_unchecked(self.rows, self.cols, self.data.iter().map(|&v| f(v)).collect())
    }

    pub fn add_assign_scaled(&mut self, other: &Matrix, scale: f64) {
        debug_assert_eq!(self.shape(), other.shape());
        for (a, &b) in self.data.iter_mut().zip(&other.data) {
            *a += scale * b;
        }
    }

    pub fn scale(&mut self, s: f64) {
        self.data.iter_mut().for_each(|v| *v *= s);
    }

    pub fn sum(&self) -> f64 {
        self.data.iter().sum()
    }

    /// Column sums.
    pub fn col_sums(&self) -> Vec<f64> {
        let mut out = vec![0.0; self.cols];
        for i in 0..self.rows {
            for (o, &v) in out.iter_mut().zip(self.row(i)) {
                *o += v;
            }
        }
        out
    }

    pub fn max_abs_diff(&self, other: &Matrix) -> f64 {
        self.data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max)
    }
}

impl std::ops::Index<(usize, usize)> for Matrix {
    type Output = f64;

    fn index(&self, (i, j): (usize, usize)) -> &f64 {
        &self.data[i * self.cols + j]
    }
}

impl std::ops::IndexMut<(usize, usize)> for Matrix {
    fn index_mut(&mut self, (i, j): (usize, usize)) -> &mut f64 {
        &mut self.data[i * self.cols + j]
    }
}

pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

pub fn l2_norm(v: &[f64]) -> f64 {
    dot(v, v).sqrt()
}

fn check_finite_vec(v: &[f64]) -> Result<()> {
    ensure!(!v.is_empty(), "empty vector");
    ensure!(v.iter().all(|x| x.is_finite()), "vector has non-finite entries");
    Ok(())
}

/// `log Σ exp(v_i)` with max-subtraction. Caller guarantees non-empty finite input.
pub(crate) fn logsumexp_unchecked(v: &[f64]) -> f64 {
    let max = v.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let s: f64 = v.iter().map(|&x| (x - max).exp()).sum();
    max + s.ln()
}

pub fn logsumexp(v: &[f64]) -> Result<f64> {
    check_finite_vec(v)?;
    Ok(logsumexp_unchecked(v))
}

pub(crate) fn log_softmax_unchecked(v: &[f64]) -> Vec<f64> {
    let lse = logsumexp_unchecked(v);
    v.iter().map(|&x| x - lse).collect()
}

pub fn log_softmax(v: &[f64]) -> Result<Vec<f64>> {
    check_finite_vec(v)?;
    Ok(log_softmax_unchecked(v))
}

pub(crate) fn softmax_unchecked(v: &[f64]) -> Vec<f64> {
    log_softmax_unchecked(v).into_iter().map(f64::exp).collect()
}

pub fn softmax(v: &[f64]) -> Result<Vec<f64>> {
    check_finite_vec(v)?;
    Ok(softmax_unchecked(v))
}

/// `log σ(x) = min(x, 0) − ln(1 + e^{−|x|})`, exact at both tails.
pub(crate) fn log_sigmoid_unchecked(x: f64) -> f64 {
    x.min(0.0) - (-x.abs()).exp().ln_1p()
}

pub fn log_sigmoid(x: f64) -> Result<f64> {
    ensure!(x.is_finite(), "log_sigmoid of non-finite value {x}");
    Ok(log_sigmoid_unchecked(x))
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Scales every row to unit L2 norm. A zero row is an error, not a NaN.
pub fn unit_normalize(m: &Matrix) -> Result<Matrix> {
    let mut out = m.clone();
    for i in 0..m.rows() {
        let n = l2_norm(m.row(i));
        if !(n > 0.0 && n.is_finite()) {
            return Err(Error::DegenerateInput(format!(
                "row {i} has norm {n}, cannot normalize"
            )));
        }
        out.row_mut(i).iter_mut().for_each(|v| *v /= n);
    }
    Ok(out)
}

/// Sample standard deviation (n − 1 denominator); 0 for fewer than two values.
pub fn sample_std(v: &[f64]) -> f64 {
    if v.len() < 2 {
        return 0.0;
    }
    let mean = v.iter().sum::<f64>() / v.len() as f64;
    let ss: f64 = v.iter().map(|x| (x - mean).powi(2)).sum();
    (ss / (v.len() - 1) as f64).sqrt()
}

pub fn mean(v: &[f64]) -> f64 {
    if v.is_empty() {
        0.0
    } else {
        v.iter().sum::<f64>() / v.len() as f64
    }
}

/// splitmix64 finalizer; a bijection on `u64`.
fn mix64(mut z: u64) -> u64 {
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Identifies one independent random stream: a ChaCha key derived from `seed`
/// and a ChaCha stream number.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct RngStream {
    pub seed: u64,
    pub stream: u64,
}

impl RngStream {
    pub fn new(seed: u64) -> Self {
        Self { seed, stream: 0 }
    }

    pub fn with_stream(seed: u64, stream: u64) -> Self {
        Self { seed, stream }
    }

    /// Child stream for `id`. For a fixed parent the map `id → stream` is a
    /// bijection, so siblings with distinct ids never share a stream.
    pub fn derive(&self, id: u64) -> RngStream {
        RngStream {
            seed: self.seed,
            stream: mix64(self.stream.wrapping_add(0x9e37_79b9_7f4a_7c15)) ^ mix64(id),
        }
    }

    /// A fresh generator positioned at the start of this stream.
    pub fn generator(&self) -> ChaCha8Rng {
        let mut key = [0u8; 32];
        key[..8].copy_from_slice(&self.seed.to_le_bytes());
        key[8..16].copy_from_slice(&mix64(self.seed).to_le_bytes());
        let mut rng = ChaCha8Rng::from_seed(key);
        rng.set_stream(self.stream);
        rng
    }
}

/// Named purposes for top-level streams.
pub mod streams {
    pub const DATA: u64 = 1;
    pub const INIT: u64 = 2;
    pub const SAMPLING: u64 = 3;
    pub const EVAL: u64 = 4;
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use proptest::prelude::*;
    use rand::Rng;

    const LN2: f64 = std::f64::consts::LN_2;

    #[test]
    fn log_softmax_examples() {
        let o = log_softmax(&[0.0, 0.0]).unwrap();
        assert_abs_diff_eq!(o[0], -LN2, epsilon = 1e-15);
        assert_abs_diff_eq!(o[1], -LN2, epsilon = 1e-15);

        let o = log_softmax(&[LN2, 0.0]).unwrap();
        assert_abs_diff_eq!(o[0], (2.0f64 / 3.0).ln(), epsilon = 1e-14);
        assert_abs_diff_eq!(o[1], (1.0f64 / 3.0).ln(), epsilon = 1e-14);

        let o = log_softmax(&[1000.0, 0.0]).unwrap();
        assert!(o.iter().all(|v| v.is_finite()));
        assert_abs_diff_eq!(o[0], 0.0, epsilon = 1e-12);
        assert_abs_diff_eq!(o[1], -1000.0, epsilon = 1e-9);
    }

    #[test]
    fn log_softmax_rejects_bad_input() {
        assert!(matches!(log_softmax(&[]), Err(Error::InvalidArgument(_))));
        assert!(log_softmax(&[1.0, f64::NAN]).is_err());
        assert!(log_softmax(&[f64::INFINITY]).is_err());
    }

    #[test]
    fn log_sigmoid_examples() {
        assert_abs_diff_eq!(log_sigmoid(0.0).unwrap(), -LN2, epsilon = 1e-15);
        let v = log_sigmoid(-50.0).unwrap();
        assert!(v.is_finite());
        assert_abs_diff_eq!(v, -50.0, epsilon = 1e-20);
        // -ln(1 + e^-3), evaluated by hand at high precision.
        assert_abs_diff_eq!(log_sigmoid(3.0).unwrap(), -0.048_587_351_573_742, epsilon = 1e-14);
        assert!(log_sigmoid(f64::NAN).is_err());
    }

    #[test]
    fn unit_normalize_examples() {
        let m = Matrix::from_rows(&[vec![3.0, 4.0]]).unwrap();
        let n = unit_normalize(&m).unwrap();
        assert_abs_diff_eq!(n[(0, 0)], 0.6, epsilon = 1e-15);
        assert_abs_diff_eq!(n[(0, 1)], 0.8, epsilon = 1e-15);

        let unit = Matrix::from_rows(&[vec![1.0, 0.0, 0.0]]).unwrap();
        assert_eq!(unit_normalize(&unit).unwrap(), unit);

        let zero = Matrix::from_rows(&[vec![0.0, 0.0]]).unwrap();
        assert!(matches!(unit_normalize(&zero), Err(Error::DegenerateInput(_))));
    }

    #[test]
    fn matrix_rejects_non_finite_and_bad_shape() {
        assert!(Matrix::new(1, 2, vec![1.0]).is_err());
        assert!(Matrix::new(1, 1, vec![f64::NAN]).is_err());
    }

    #[test]
    fn matmul_variants_agree() {
        let a = Matrix::from_rows(&[vec![1.0, 2.0, 0.0], vec![-1.0, 0.5, 3.0]]).unwrap();
        let b = Matrix::from_rows(&[vec![2.0, 1.0], vec![0.0, -1.0], vec![1.0, 4.0]]).unwrap();
        let ab = a.matmul(&b).unwrap();
        assert_eq!(ab.data(), &[2.0, -1.0, 1.0, 10.5]);
        assert_eq!(a.matmul_t(&b.transpose()).unwrap(), ab);
        assert_eq!(a.transpose().t_matmul(&b).unwrap(), ab);
        assert!(a.matmul(&a).is_err());
    }

    #[test]
    fn rng_streams_are_deterministic_and_distinct() {
        let root = RngStream::new(42);
        let draw = |s: RngStream| -> Vec<u64> {
            let mut g = s.generator();
            (0..16).map(|_| g.random::<u64>()).collect()
        };
        assert_eq!(draw(root), draw(RngStream::new(42)));
        assert_eq!(draw(root.derive(7)), draw(root.derive(7)));
        assert_ne!(draw(root.derive(7)), draw(root.derive(8)));
        assert_ne!(draw(root), draw(RngStream::new(43)));
        let children: std::collections::HashSet<u64> =
            (0..10_000).map(|i| root.derive(i).stream).collect();
        assert_eq!(children.len(), 10_000);
    }

    proptest! {
        #[test]
        fn log_softmax_shift_invariant(
            v in prop::collection::vec(-50.0f64..50.0, 1..12),
            c in -100.0f64..100.0,
        ) {
            let a = log_softmax(&v).unwrap();
            let shifted: Vec<f64> = v.iter().map(|x| x + c).collect();
            let b = log_softmax(&shifted).unwrap();
            for (x, y) in a.iter().zip(&b) {
                prop_assert!((x - y).abs() < 1e-12);
            }
            let total: f64 = a.iter().map(|x| x.exp()).sum();
            prop_assert!((total - 1.0).abs() < 1e-12);
        }

        #[test]
        fn sigmoid_bounds_and_monotone(x in -700.0f64..700.0, dx in 1e-3f64..10.0) {
            let p = log_sigmoid(x).unwrap().exp();
            prop_assert!(p >= 0.0 && p <= 1.0);
            prop_assert!(log_sigmoid(x + dx).unwrap() >= log_sigmoid(x).unwrap());
            prop_assert!((sigmoid(x) + sigmoid(-x) - 1.0).abs() < 1e-12);
        }

        #[test]
        fn sigmoid_strictly_inside_unit_interval(x in -30.0f64..30.0) {
            let p = log_sigmoid(x).unwrap().exp();
            prop_assert!(p > 0.0 && p < 1.0);
        }

        #[test]
        fn unit_normalize_idempotent(
            rows in prop::collection::vec(prop::collection::vec(0.1f64..5.0, 4), 1..6),
            signs in prop::collection::vec(any::<bool>(), 4),
        ) {
            let rows: Vec<Vec<f64>> = rows
                .into_iter()
                .map(|r| r.iter().zip(&signs).map(|(v, s)| if *s { *v } else { -*v }).collect())
                .collect();
            let m = Matrix::from_rows(&rows).unwrap();
            let once = unit_normalize(&m).unwrap();
            let twice = unit_normalize(&once).unwrap();
            prop_assert!(once.max_abs_diff(&twice) < 1e-12);
            for i in 0..once.rows() {
                prop_assert!((l2_norm(once.row(i)) - 1.0).abs() < 1e-12);
            }
        }
    }
}
