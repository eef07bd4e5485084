//! Dense row-major `f64` matrices and the column-wise primitives used by the
//! adapters and the decomposition analysis.
//!
//! A weight `W` is `d × k`; it acts on inputs `x ∈ R^k` as `W x`, so each
//! column of `W` belongs to one input feature and the column-norm vector has
//! length `k`.

use std::fmt;

use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Default guard used whenever a norm appears in a denominator.
pub const DEFAULT_EPS: f64 = 1e-12;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum TensorError {
    #[error("{op}: shape mismatch between {left:?} and {right:?}")]
    ShapeMismatch {
        op: &'static str,
        left: (usize, usize),
        right: (usize, usize),
    },
    #[error("matrix dimensions must be positive, got {rows}x{cols}")]
    EmptyShape { rows: usize, cols: usize },
    #[error("data length {len} does not match {rows}x{cols}")]
    DataLength { rows: usize, cols: usize, len: usize },
    #[error("sequences have different lengths ({xs} vs {ys})")]
    LengthMismatch { xs: usize, ys: usize },
    #[error("need at least 2 points, got {0}")]
    TooFewPoints(usize),
    #[error("degenerate variance: {which} is constant")]
    DegenerateVariance { which: &'static str },
}

pub type Result<T> = std::result::Result<T, TensorError>;

#[derive(Clone, PartialEq, Serialize, Deserialize)]
pub struct Matrix {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

/// A `1 × k` vector, e.g. the magnitude vector `m`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RowVector {
    data: Vec<f64>,
}

impl fmt::Debug for Matrix {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "Matrix {}x{} [", self.rows, self.cols)?;
        for r in 0..self.rows {
            writeln!(f, "  {:?}", self.row(r))?;
        }
        write!(f, "]")
    }
}

impl Matrix {
    pub fn from_vec(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        if rows == 0 || cols == 0 {
            return Err(TensorError::EmptyShape { rows, cols });
        }
        if data.len() != rows * cols {
            return Err(TensorError::DataLength {
                rows,
                cols,
                len: data.len(),
            });
        }
        Ok(Self { rows, cols, data })
    }

    /// Builds a matrix from nested rows; panics on ragged or empty input.
    /// Intended for literals in tests and fixtures.
    pub fn from_rows(rows: &[&[f64]]) -> Self {
        assert!(!rows.is_empty() && !rows[0].is_empty(), "empty matrix literal");
        let cols = rows[0].len();
        let mut data = Vec::with_capacity(rows.len() * cols);
        for row in rows {
            assert_eq!(row.len(), cols, "ragged matrix literal");
            data.extend_from_slice(row);
        }
        Self {
            rows: rows.len(),
            cols,
            data,
        }
    }

    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self::filled(rows, cols, 0.0)
    }

    pub fn filled(rows: usize, cols: usize, value: f64) -> Self {
        assert!(rows > 0 && cols > 0, "matrix dimensions must be positive");
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
        let mut m = Self::zeros(rows, cols);
        for r in 0..rows {
            for c in 0..cols {
                m.data[r * cols + c] = f(r, c);
            }
        }
        m
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
    pub fn get(&self, r: usize, c: usize) -> f64 {
        self.data[r * self.cols + c]
    }

    #[inline]
    pub fn set(&mut self, r: usize, c: usize, value: f64) {
        self.data[r * self.cols + c] = value;
    }

    pub fn row(&self, r: usize) -> &[f64] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn column(&self, c: usize) -> Vec<f64> {
        (0..self.rows).map(|r| self.get(r, c)).collect()
    }

    pub fn set_column(&mut self, c: usize, values: &[f64]) {
        assert_eq!(values.len(), self.rows);
        for (r, v) in values.iter().enumerate() {
            self.set(r, c, *v);
        }
    }

    /// Copies the top-left `rows × cols` block.
    pub fn slice(&self, rows: usize, cols: usize) -> Result<Self> {
        if rows > self.rows || cols > self.cols || rows == 0 || cols == 0 {
            return Err(TensorError::ShapeMismatch {
                op: "slice",
                left: self.shape(),
                right: (rows, cols),
            });
        }
        Ok(Self::from_fn(rows, cols, |r, c| self.get(r, c)))
    }

    fn check_same(&self, other: &Self, op: &'static str) -> Result<()> {
        if self.shape() != other.shape() {
            return Err(TensorError::ShapeMismatch {
                op,
                left: self.shape(),
                right: other.shape(),
            });
        }
        Ok(())
    }

    fn zip_with(&self, other: &Self, op: &'static str, f: impl Fn(f64, f64) -> f64) -> Result<Self> {
        self.check_same(other, op)?;
        Ok(Self {
            rows: self.rows,
            cols: self.cols,
            data: self.data.iter().zip(&other.data).map(|(a, b)| f(*a, *b)).collect(),
        })
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Self {
        Self {
            rows: self.rows,
            cols: self.cols,
            data: self.data.iter().map(|v| f(*v)).collect(),
        }
    }

    pub fn matmul(&self, other: &Self) -> Result<Self> {
        if self.cols != other.rows {
            return Err(TensorError::ShapeMismatch {
                op: "matmul",
                left: self.shape(),
                right: other.shape(),
            });
        }
        let (n, m) = (self.rows, other.cols);
        let mut out = vec![0.0; n * m];
        // i-k-j order: contiguous inner loop over `other`'s rows
        for i in 0..n {
            let out_row = &mut out[i * m..(i + 1) * m];
            for k in 0..self.cols {
                let a = self.data[i * self.cols + k];
                if a == 0.0 {
                    continue;
                }
                let b_row = &other.data[k * m..(k + 1) * m];
                for (o, b) in out_row.iter_mut().zip(b_row) {
                    *o += a * b;
                }
            }
        }
        Ok(Self {
            rows: n,
            cols: m,
            data: out,
        })
    }

    pub fn add(&self, other: &Self) -> Result<Self> {
        self.zip_with(other, "add", |a, b| a + b)
    }

    pub fn sub(&self, other: &Self) -> Result<Self> {
        self.zip_with(other, "sub", |a, b| a - b)
    }

    pub fn hadamard(&self, other: &Self) -> Result<Self> {
        self.zip_with(other, "hadamard", |a, b| a * b)
    }

    pub fn scale(&self, c: f64) -> Self {
        self.map(|v| v * c)
    }

    pub fn add_assign(&mut self, other: &Self) -> Result<()> {
        self.check_same(other, "add_assign")?;
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
        Ok(())
    }

    pub fn transpose(&self) -> Self {
        Self::from_fn(self.cols, self.rows, |r, c| self.get(c, r))
    }

    pub fn sum(&self) -> f64 {
        self.data.iter().sum()
    }

    pub fn frobenius_norm(&self) -> f64 {
        self.data.iter().map(|v| v * v).sum::<f64>().sqrt()
    }

    pub fn max_abs(&self) -> f64 {
        self.data.iter().fold(0.0, |acc, v| acc.max(v.abs()))
    }

    pub fn max_abs_diff(&self, other: &Self) -> Result<f64> {
        self.check_same(other, "max_abs_diff")?;
        Ok(self
            .data
            .iter()
            .zip(&other.data)
            .fold(0.0, |acc, (a, b)| acc.max((a - b).abs())))
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// Euclidean norm of every column (`‖W‖_c`). Zero columns give 0.
    pub fn column_norms(&self) -> RowVector {
        let mut sq = vec![0.0; self.cols];
        for r in 0..self.rows {
            for (acc, v) in sq.iter_mut().zip(self.row(r)) {
                *acc += v * v;
            }
        }
        RowVector {
            data: sq.into_iter().map(f64::sqrt).collect(),
        }
    }

    /// Divides column `j` by `max(‖w_j‖, eps)`.
    pub fn normalize_columns(&self, eps: f64) -> Self {
        let norms = self.column_norms();
        let inv: Vec<f64> = norms.data.iter().map(|n| 1.0 / n.max(eps)).collect();
        let mut out = self.clone();
        for r in 0..self.rows {
            let cols = self.cols;
            for (v, s) in out.data[r * cols..(r + 1) * cols].iter_mut().zip(&inv) {
                *v *= s;
            }
        }
        out
    }

    /// Multiplies column `j` by `v_j` (i.e. `M · diag(v)`).
    pub fn scale_columns(&self, v: &RowVector) -> Result<Self> {
        if v.len() != self.cols {
            return Err(TensorError::ShapeMismatch {
                op: "scale_columns",
                left: (1, v.len()),
                right: self.shape(),
            });
        }
        let mut out = self.clone();
        for r in 0..self.rows {
            let cols = self.cols;
            for (x, s) in out.data[r * cols..(r + 1) * cols].iter_mut().zip(&v.data) {
                *x *= s;
            }
        }
        Ok(out)
    }

    /// Multiplies row `i` by `v_i` (i.e. `diag(v) · M`).
    pub fn scale_rows(&self, v: &RowVector) -> Result<Self> {
        if v.len() != self.rows {
            return Err(TensorError::ShapeMismatch {
                op: "scale_rows",
                left: (1, v.len()),
                right: self.shape(),
            });
        }
        let mut out = self.clone();
        for (r, s) in v.data.iter().enumerate() {
            let cols = self.cols;
            for x in &mut out.data[r * cols..(r + 1) * cols] {
                *x *= s;
            }
        }
        Ok(out)
    }
}

impl RowVector {
    pub fn new(data: Vec<f64>) -> Self {
        Self { data }
    }

    pub fn zeros(len: usize) -> Self {
        Self { data: vec![0.0; len] }
    }

    pub fn filled(len: usize, value: f64) -> Self {
        Self {
            data: vec![value; len],
        }
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn get(&self, j: usize) -> f64 {
        self.data[j]
    }

    pub fn to_matrix(&self) -> Matrix {
        Matrix {
            rows: 1,
            cols: self.data.len(),
            data: self.data.clone(),
        }
    }

    /// Accepts any single-row matrix.
    pub fn from_matrix(m: &Matrix) -> Result<Self> {
        if m.rows != 1 {
            return Err(TensorError::ShapeMismatch {
                op: "row_vector",
                left: (1, m.cols),
                right: m.shape(),
            });
        }
        Ok(Self {
            data: m.data.clone(),
        })
    }

    pub fn max_abs_diff(&self, other: &Self) -> f64 {
        assert_eq!(self.len(), other.len());
        self.data
            .iter()
            .zip(&other.data)
            .fold(0.0, |acc, (a, b)| acc.max((a - b).abs()))
    }
}

pub fn dot(u: &[f64], v: &[f64]) -> f64 {
    u.iter().zip(v).map(|(a, b)| a * b).sum()
}

pub fn norm(u: &[f64]) -> f64 {
    dot(u, u).sqrt()
}

/// Cosine similarity `u·v / max(‖u‖‖v‖, eps)`, clamped to `[-1, 1]`.
pub fn column_cosine(u: &[f64], v: &[f64], eps: f64) -> f64 {
    debug_assert_eq!(u.len(), v.len());
    let denom = (norm(u) * norm(v)).max(eps);
    (dot(u, v) / denom).clamp(-1.0, 1.0)
}

fn check_pair(xs: &[f64], ys: &[f64]) -> Result<()> {
    if xs.len() != ys.len() {
        return Err(TensorError::LengthMismatch {
            xs: xs.len(),
            ys: ys.len(),
        });
    }
    if xs.len() < 2 {
        return Err(TensorError::TooFewPoints(xs.len()));
    }
    Ok(())
}

fn centered_moments(xs: &[f64], ys: &[f64]) -> (f64, f64, f64) {
    let n = xs.len() as f64;
    let mx = xs.iter().sum::<f64>() / n;
    let my = ys.iter().sum::<f64>() / n;
    let mut sxx = 0.0;
    let mut syy = 0.0;
    let mut sxy = 0.0;
    for (x, y) in xs.iter().zip(ys) {
        let (dx, dy) = (x - mx, y - my);
        sxx += dx * dx;
        syy += dy * dy;
        sxy += dx * dy;
    }
    (sxx, syy, sxy)
}

/// Sample Pearson correlation coefficient.
pub fn pearson(xs: &[f64], ys: &[f64]) -> Result<f64> {
    check_pair(xs, ys)?;
    let (sxx, syy, sxy) = centered_moments(xs, ys);
    if sxx <= 0.0 {
        return Err(TensorError::DegenerateVariance { which: "xs" });
    }
    if syy <= 0.0 {
        return Err(TensorError::DegenerateVariance { which: "ys" });
    }
    Ok((sxy / (sxx.sqrt() * syy.sqrt())).clamp(-1.0, 1.0))
}

/// Ordinary least-squares slope of `ys` regressed on `xs`.
pub fn ls_slope(xs: &[f64], ys: &[f64]) -> Result<f64> {
    check_pair(xs, ys)?;
    let (sxx, _, sxy) = centered_moments(xs, ys);
    if sxx <= 0.0 {
        return Err(TensorError::DegenerateVariance { which: "xs" });
    }
    Ok(sxy / sxx)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random(rows: usize, cols: usize, rng: &mut ChaCha8Rng) -> Matrix {
        Matrix::from_fn(rows, cols, |_, _| rng.random_range(-2.0..2.0))
    }

    #[test]
    fn column_norms_basic() {
        assert_eq!(Matrix::identity(3).column_norms().data(), &[1.0, 1.0, 1.0]);
        let w = Matrix::from_rows(&[&[3.0, 0.0], &[4.0, 0.0]]);
        assert_eq!(w.column_norms().data(), &[5.0, 0.0]);
    }

    #[test]
    fn column_norms_match_element_loop() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let w = random(5, 4, &mut rng);
        let norms = w.column_norms();
        for j in 0..4 {
            let mut acc = 0.0;
            for i in 0..5 {
                acc += w.get(i, j) * w.get(i, j);
            }
            assert!((norms.get(j) - acc.sqrt()).abs() < 1e-15);
        }
    }

    #[test]
    fn normalize_columns_cases() {
        let w = Matrix::from_rows(&[&[3.0], &[4.0]]);
        let n = w.normalize_columns(DEFAULT_EPS);
        assert!((n.get(0, 0) - 0.6).abs() < 1e-15);
        assert!((n.get(1, 0) - 0.8).abs() < 1e-15);

        let z = Matrix::zeros(2, 1).normalize_columns(DEFAULT_EPS);
        assert_eq!(z.data(), &[0.0, 0.0]);

        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let r = random(6, 3, &mut rng).normalize_columns(DEFAULT_EPS);
        for v in r.column_norms().data() {
            assert!((v - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn matmul_cases() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let x = random(3, 4, &mut rng);
        assert_eq!(Matrix::identity(3).matmul(&x).unwrap(), x);
        let z = Matrix::zeros(2, 3).matmul(&Matrix::filled(3, 2, 1.0)).unwrap();
        assert_eq!(z, Matrix::zeros(2, 2));

        let a = random(4, 3, &mut rng);
        let b = random(3, 5, &mut rng);
        let c = a.matmul(&b).unwrap();
        for i in 0..4 {
            for j in 0..5 {
                let mut acc = 0.0;
                for k in 0..3 {
                    acc += a.get(i, k) * b.get(k, j);
                }
                assert!((c.get(i, j) - acc).abs() < 1e-13);
            }
        }
    }

    #[test]
    fn shape_errors_name_both_shapes() {
        let err = Matrix::zeros(2, 3).matmul(&Matrix::zeros(2, 3)).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("(2, 3)") && msg.contains("matmul"), "{msg}");
        assert!(Matrix::zeros(2, 2).add(&Matrix::zeros(2, 3)).is_err());
        assert!(Matrix::from_vec(0, 3, vec![]).is_err());
        assert!(Matrix::from_vec(2, 2, vec![1.0]).is_err());
    }

    #[test]
    fn cosine_cases() {
        let u = [1.0, 2.0, -1.0];
        assert!((column_cosine(&u, &u, DEFAULT_EPS) - 1.0).abs() < 1e-15);
        assert_eq!(column_cosine(&[1.0, 0.0], &[0.0, 3.0], DEFAULT_EPS), 0.0);
        let neg: Vec<f64> = u.iter().map(|v| -v).collect();
        assert!((column_cosine(&u, &neg, DEFAULT_EPS) + 1.0).abs() < 1e-15);
        assert_eq!(column_cosine(&[0.0, 0.0], &[1.0, 1.0], DEFAULT_EPS), 0.0);
    }

    #[test]
    fn pearson_and_slope_exact_lines() {
        let xs = [0.0, 1.0, 2.0, 3.0];
        let ys: Vec<f64> = xs.iter().map(|x| 2.0 * x + 1.0).collect();
        assert!((pearson(&xs, &ys).unwrap() - 1.0).abs() < 1e-15);
        assert!((ls_slope(&xs, &ys).unwrap() - 2.0).abs() < 1e-15);
        let neg: Vec<f64> = xs.iter().map(|x| -x).collect();
        assert!((pearson(&xs, &neg).unwrap() + 1.0).abs() < 1e-15);
    }

    #[test]
    fn pearson_degenerate_names_sequence() {
        let err = pearson(&[1.0, 1.0, 1.0], &[0.0, 1.0, 2.0]).unwrap_err();
        assert_eq!(err, TensorError::DegenerateVariance { which: "xs" });
        let err = pearson(&[0.0, 1.0, 2.0], &[5.0, 5.0, 5.0]).unwrap_err();
        assert_eq!(err, TensorError::DegenerateVariance { which: "ys" });
        assert!(matches!(ls_slope(&[2.0, 2.0], &[0.0, 1.0]), Err(TensorError::DegenerateVariance { .. })));
        assert!(matches!(pearson(&[1.0], &[1.0]), Err(TensorError::TooFewPoints(1))));
    }

    #[test]
    fn pearson_matches_two_pass_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(50);
        let xs: Vec<f64> = (0..50).map(|_| rng.random_range(-1.0..1.0)).collect();
        let ys: Vec<f64> = xs.iter().map(|x| 0.3 * x + rng.random_range(-0.5..0.5)).collect();
        // two-pass textbook formulas using sample (n-1) normalisation
        let n = xs.len() as f64;
        let mx = xs.iter().sum::<f64>() / n;
        let my = ys.iter().sum::<f64>() / n;
        let cov = xs.iter().zip(&ys).map(|(x, y)| (x - mx) * (y - my)).sum::<f64>() / (n - 1.0);
        let vx = xs.iter().map(|x| (x - mx).powi(2)).sum::<f64>() / (n - 1.0);
        let vy = ys.iter().map(|y| (y - my).powi(2)).sum::<f64>() / (n - 1.0);
        assert!((pearson(&xs, &ys).unwrap() - cov / (vx * vy).sqrt()).abs() < 1e-12);
        assert!((ls_slope(&xs, &ys).unwrap() - cov / vx).abs() < 1e-12);
    }

    fn arb_matrix(rows: usize, cols: usize) -> impl Strategy<Value = Matrix> {
        prop::collection::vec(-10.0f64..10.0, rows * cols)
            .prop_map(move |d| Matrix::from_vec(rows, cols, d).unwrap())
    }

    proptest! {
        #[test]
        fn normalized_columns_are_unit_or_sub_eps(w in arb_matrix(4, 3)) {
            let norms_before = w.column_norms();
            let after = w.normalize_columns(DEFAULT_EPS).column_norms();
            for j in 0..3 {
                if norms_before.get(j) >= DEFAULT_EPS {
                    prop_assert!((after.get(j) - 1.0).abs() < 1e-12);
                } else {
                    prop_assert!(after.get(j) < 1.0);
                }
            }
        }

        #[test]
        fn matmul_is_associative(a in arb_matrix(3, 4), b in arb_matrix(4, 2), c in arb_matrix(2, 5)) {
            let left = a.matmul(&b).unwrap().matmul(&c).unwrap();
            let right = a.matmul(&b.matmul(&c).unwrap()).unwrap();
            let scale = 1.0 + left.max_abs();
            prop_assert!(left.max_abs_diff(&right).unwrap() < 1e-10 * scale);
        }

        #[test]
        fn add_commutes_exactly(a in arb_matrix(3, 3), b in arb_matrix(3, 3)) {
            prop_assert_eq!(a.add(&b).unwrap(), b.add(&a).unwrap());
        }

        #[test]
        fn cosine_scale_invariant(
            u in prop::collection::vec(-5.0f64..5.0, 6),
            v in prop::collection::vec(-5.0f64..5.0, 6),
            c in 0.01f64..100.0,
        ) {
            prop_assume!(norm(&u) > 1e-3 && norm(&v) > 1e-3);
            let scaled: Vec<f64> = u.iter().map(|x| c * x).collect();
            let diff = column_cosine(&scaled, &v, DEFAULT_EPS) - column_cosine(&u, &v, DEFAULT_EPS);
            prop_assert!(diff.abs() < 1e-12);
        }
    }
}
