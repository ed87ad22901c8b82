//! Dense row-major matrices, activation maps, and the doubly-stochasticity
//! metrics the rest of the crate is measured with.
//!
//! Everything here is `f64`. Row and column sums accumulate strictly left to
//! right so that repeated runs produce bit-identical results.

use std::fmt;
use std::ops::{Index, IndexMut};

use serde::{Deserialize, Deserializer, Serialize, Serializer};

use crate::error::{Error, Result};

/// Stabiliser added to the mean square inside [`rmsnorm`].
pub const RMS_EPS: f64 = 1e-6;

/// Largest order accepted by [`enumerate_permutations`] (8! = 40320).
pub const MAX_PERM_ORDER: usize = 8;

/// Dense row-major `f64` matrix.
#[derive(Clone, PartialEq)]
pub struct Mat {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl Mat {
    /// Builds a matrix from row-major data. Rejects length mismatches and
    /// non-finite entries.
    pub fn new(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(Error::shape(
                "Mat::new",
                format!("{} values for a {rows}x{cols} matrix", data.len()),
            ));
        }
        if let Some(pos) = data.iter().position(|v| !v.is_finite()) {
            return Err(Error::domain(
                "Mat::new",
                format!("non-finite entry {} at flat index {pos}", data[pos]),
            ));
        }
        Ok(Self { rows, cols, data })
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
            m[(i, i)] = 1.0;
        }
        m
    }

    /// Builds a matrix from nested rows. All rows must have equal length.
    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let r = rows.len();
        let c = rows.first().map_or(0, Vec::len);
        if let Some(bad) = rows.iter().position(|row| row.len() != c) {
            return Err(Error::shape(
                "Mat::from_rows",
                format!("row {bad} has {} entries, expected {c}", rows[bad].len()),
            ));
        }
        Self::new(r, c, rows.concat())
    }

    /// Single-row matrix view of a vector.
    pub fn row_vector(v: &[f64]) -> Self {
        Self {
            rows: 1,
            cols: v.len(),
            data: v.to_vec(),
        }
    }

    /// Applies `f` elementwise.
    pub fn map(&self, f: impl Fn(f64) -> f64) -> Self {
        Self {
            rows: self.rows,
            cols: self.cols,
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
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

    pub fn is_square(&self) -> bool {
        self.rows == self.cols
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

    pub fn to_rows(&self) -> Vec<Vec<f64>> {
        (0..self.rows).map(|i| self.row(i).to_vec()).collect()
    }

    pub fn transpose(&self) -> Self {
        let mut t = Self::zeros(self.cols, self.rows);
        for i in 0..self.rows {
            for j in 0..self.cols {
                t[(j, i)] = self[(i, j)];
            }
        }
        t
    }

    pub fn scale(&self, c: f64) -> Self {
        self.map(|v| c * v)
    }

    /// Reinterprets the data under a new shape with the same element count.
    pub fn reshape(self, rows: usize, cols: usize) -> Result<Self> {
        if rows * cols != self.data.len() {
            return Err(Error::shape(
                "Mat::reshape",
                format!("cannot view {}x{} as {rows}x{cols}", self.rows, self.cols),
            ));
        }
        Ok(Self {
            rows,
            cols,
            data: self.data,
        })
    }

    /// Largest absolute entrywise difference. Shapes must match.
    pub fn max_abs_diff(&self, other: &Mat) -> f64 {
        assert_eq!(self.shape(), other.shape(), "max_abs_diff shape mismatch");
        self.data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max)
    }

    pub fn max_entry(&self) -> f64 {
        self.data.iter().copied().fold(f64::NEG_INFINITY, f64::max)
    }
}

impl Index<(usize, usize)> for Mat {
    type Output = f64;

    #[inline]
    fn index(&self, (i, j): (usize, usize)) -> &f64 {
        debug_assert!(i < self.rows && j < self.cols);
        &self.data[i * self.cols + j]
    }
}

impl IndexMut<(usize, usize)> for Mat {
    #[inline]
    fn index_mut(&mut self, (i, j): (usize, usize)) -> &mut f64 {
        debug_assert!(i < self.rows && j < self.cols);
        &mut self.data[i * self.cols + j]
    }
}

impl fmt::Debug for Mat {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "Mat{}x{} ", self.rows, self.cols)?;
        f.debug_list().entries(self.to_rows()).finish()
    }
}

impl fmt::Display for Mat {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for i in 0..self.rows {
            let cells: Vec<String> = self.row(i).iter().map(|v| format!("{v:>12.6}")).collect();
            writeln!(f, "[{}]", cells.join(", "))?;
        }
        Ok(())
    }
}

// Matrices travel as JSON arrays of arrays.
impl Serialize for Mat {
    fn serialize<S: Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        self.to_rows().serialize(s)
    }
}

impl<'de> Deserialize<'de> for Mat {
    fn deserialize<D: Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let rows = Vec::<Vec<f64>>::deserialize(d)?;
        Mat::from_rows(&rows).map_err(serde::de::Error::custom)
    }
}

/// Row and column ℓ1 deviations of a square matrix from doubly stochastic.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct DSError {
    pub row_l1: f64,
    pub col_l1: f64,
    pub total: f64,
}

/// Standard product `a * b`.
pub fn matmul(a: &Mat, b: &Mat) -> Result<Mat> {
    if a.cols != b.rows {
        return Err(Error::shape(
            "matmul",
            format!("{}x{} times {}x{}", a.rows, a.cols, b.rows, b.cols),
        ));
    }
    let mut out = Mat::zeros(a.rows, b.cols);
    for i in 0..a.rows {
        let a_row = a.row(i);
        let out_row = &mut out.data[i * b.cols..(i + 1) * b.cols];
        for (k, &aik) in a_row.iter().enumerate() {
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

/// Row-vector times matrix: `v (1 x k) * m (k x c)`.
pub(crate) fn vecmat(v: &[f64], m: &Mat) -> Vec<f64> {
    debug_assert_eq!(v.len(), m.rows);
    let mut out = vec![0.0; m.cols];
    for (k, &vk) in v.iter().enumerate() {
        for (o, &mkj) in out.iter_mut().zip(m.row(k)) {
            *o += vk * mkj;
        }
    }
    out
}

pub fn row_sums(m: &Mat) -> Vec<f64> {
    (0..m.rows)
        .map(|i| m.row(i).iter().fold(0.0, |acc, &v| acc + v))
        .collect()
}

pub fn col_sums(m: &Mat) -> Vec<f64> {
    let mut sums = vec![0.0; m.cols];
    for i in 0..m.rows {
        for (s, &v) in sums.iter_mut().zip(m.row(i)) {
            *s += v;
        }
    }
    sums
}

pub fn ds_error(m: &Mat) -> Result<DSError> {
    if !m.is_square() {
        return Err(Error::shape(
            "ds_error",
            format!("{}x{} is not square", m.rows, m.cols),
        ));
    }
    let dev = |sums: Vec<f64>| sums.iter().fold(0.0, |acc, s| acc + (s - 1.0).abs());
    let row_l1 = dev(row_sums(m));
    let col_l1 = dev(col_sums(m));
    Ok(DSError {
        row_l1,
        col_l1,
        total: row_l1 + col_l1,
    })
}

/// Smallest strictly positive entry over the largest entry.
pub fn relative_range(m: &Mat) -> Result<f64> {
    if let Some(&neg) = m.data.iter().find(|&&v| v < 0.0) {
        return Err(Error::domain(
            "relative_range",
            format!("negative entry {neg}"),
        ));
    }
    let min_pos = m
        .data
        .iter()
        .copied()
        .filter(|&v| v > 0.0)
        .fold(f64::INFINITY, f64::min);
    if !min_pos.is_finite() {
        return Err(Error::domain("relative_range", "matrix has no positive entry"));
    }
    Ok(min_pos / m.max_entry())
}

/// Divides by the root mean square (plus [`RMS_EPS`]); no learnable gain.
pub fn rmsnorm(v: &[f64]) -> Vec<f64> {
    let inv = 1.0 / rms(v);
    v.iter().map(|x| x * inv).collect()
}

pub(crate) fn rms(v: &[f64]) -> f64 {
    let mean_sq = v.iter().fold(0.0, |acc, x| acc + x * x) / v.len() as f64;
    (mean_sq + RMS_EPS).sqrt()
}

#[inline]
pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

pub fn sigmoid_map(v: &[f64]) -> Vec<f64> {
    v.iter().map(|&x| sigmoid(x)).collect()
}

/// Max-subtracted softmax.
pub fn softmax_map(v: &[f64]) -> Vec<f64> {
    let max = v.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = v.iter().map(|x| (x - max).exp()).collect();
    let total: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / total).collect()
}

/// All permutations of `0..n` in lexicographic order of one-line notation.
pub fn permutations_lex(n: usize) -> Result<Vec<Vec<usize>>> {
    if n == 0 || n > MAX_PERM_ORDER {
        return Err(Error::Capacity(format!(
            "permutation order {n} outside 1..={MAX_PERM_ORDER}"
        )));
    }
    let mut current: Vec<usize> = (0..n).collect();
    let mut out = vec![current.clone()];
    // Standard next-permutation walk.
    loop {
        let Some(i) = (0..n - 1).rev().find(|&i| current[i] < current[i + 1]) else {
            break;
        };
        let j = (i + 1..n).rev().find(|&j| current[j] > current[i]).unwrap();
        current.swap(i, j);
        current[i + 1..].reverse();
        out.push(current.clone());
    }
    Ok(out)
}

/// Permutation matrix with a 1 at `(i, perm[i])` for every row `i`.
pub fn permutation_matrix(perm: &[usize]) -> Mat {
    let n = perm.len();
    let mut m = Mat::zeros(n, n);
    for (i, &j) in perm.iter().enumerate() {
        m[(i, j)] = 1.0;
    }
    m
}

/// All `n!` permutation matrices, lexicographic, identity first.
pub fn enumerate_permutations(n: usize) -> Result<Vec<Mat>> {
    Ok(permutations_lex(n)?
        .iter()
        .map(|p| permutation_matrix(p))
        .collect())
}
