//! Small dense linear algebra kernel.
//!
//! Everything the numerical modules need and nothing more: a row-major
//! [`Matrix`], products, a pivoted Cholesky solver for symmetric positive
//! (semi)definite systems and a seeded power iteration for the dominant
//! right singular vector.

use std::io::{Read, Write};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};

/// Row-major dense matrix of `f64`.
#[derive(Debug, Clone, PartialEq)]
pub struct Matrix {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl Matrix {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        assert!(rows >= 1 && cols >= 1, "matrix must be at least 1x1");
        Self {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    pub fn identity(n: usize) -> Self {
        let mut m = Self::zeros(n, n);
        for i in 0..n {
            m[(i, i)] = 1.0;
        }
        m
    }

    pub fn filled(rows: usize, cols: usize, value: f64) -> Self {
        let mut m = Self::zeros(rows, cols);
        m.data.fill(value);
        m
    }

    pub fn from_vec(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        if rows == 0 || cols == 0 {
            return Err(Error::InvalidShape {
                rows,
                cols,
                reason: "rows and cols must be >= 1",
            });
        }
        if data.len() != rows * cols {
            return Err(Error::InvalidShape {
                rows,
                cols,
                reason: "entry count differs from rows*cols",
            });
        }
        if data.iter().any(|v| !v.is_finite()) {
            return Err(Error::InvalidShape {
                rows,
                cols,
                reason: "entries must be finite",
            });
        }
        Ok(Self { rows, cols, data })
    }

    /// Builds a matrix from row slices. Panics on ragged input.
    pub fn from_rows<R: AsRef<[f64]>>(rows: &[R]) -> Self {
        let r = rows.len();
        let c = rows.first().map(|row| row.as_ref().len()).unwrap_or(0);
        let mut data = Vec::with_capacity(r * c);
        for row in rows {
            assert_eq!(row.as_ref().len(), c, "ragged rows");
            data.extend_from_slice(row.as_ref());
        }
        Self::from_vec(r, c, data).expect("valid rows")
    }

    /// Builds a matrix whose columns are the given vectors.
    pub fn from_columns<C: AsRef<[f64]>>(columns: &[C]) -> Self {
        let c = columns.len();
        let r = columns.first().map(|col| col.as_ref().len()).unwrap_or(0);
        let mut m = Self::zeros(r.max(1), c.max(1));
        for (j, col) in columns.iter().enumerate() {
            assert_eq!(col.as_ref().len(), r, "ragged columns");
            for (i, v) in col.as_ref().iter().enumerate() {
                m[(i, j)] = *v;
            }
        }
        m
    }

    pub fn diag(values: &[f64]) -> Self {
        let mut m = Self::zeros(values.len(), values.len());
        for (i, v) in values.iter().enumerate() {
            m[(i, i)] = *v;
        }
        m
    }

    #[inline]
    pub fn rows(&self) -> usize {
        self.rows
    }

    #[inline]
    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.rows, self.cols)
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn column(&self, j: usize) -> Vec<f64> {
        (0..self.rows).map(|i: usize| self[(i, j)]).collect()
    }

    pub fn set_column(&mut self, j: usize, values: &[f64]) {
        assert_eq!(values.len(), self.rows);
        for (i, v) in values.iter().enumerate() {
            self[(i, j)] = *v;
        }
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn transpose(&self) -> Matrix {
        let mut t = Matrix::zeros(self.cols, self.rows);
        for i in 0..self.rows {
            for j in 0..self.cols {
                t[(j, i)] = self[(i, j)];
            }
        }
        t
    }

    pub fn matmul(&self, rhs: &Matrix) -> Matrix {
        assert_eq!(
            self.cols, rhs.rows,
            "matmul shape mismatch: {}x{} * {}x{}",
            self.rows, self.cols, rhs.rows, rhs.cols
        );
        let mut out = Matrix::zeros(self.rows, rhs.cols);
        for i in 0..self.rows {
            let out_row = &mut out.data[i * rhs.cols..(i + 1) * rhs.cols];
            for k in 0..self.cols {
                let a = self.data[i * self.cols + k];
                if a == 0.0 {
                    continue;
                }
                let rhs_row = &rhs.data[k * rhs.cols..(k + 1) * rhs.cols];
                for (o, b) in out_row.iter_mut().zip(rhs_row) {
                    *o += a * b;
                }
            }
        }
        out
    }

    /// `self * rhsᵀ` without materializing the transpose.
    pub fn matmul_t(&self, rhs: &Matrix) -> Matrix {
        assert_eq!(self.cols, rhs.cols, "matmul_t shape mismatch");
        let mut out = Matrix::zeros(self.rows, rhs.rows);
        for i in 0..self.rows {
            let a = self.row(i);
            for j in 0..rhs.rows {
                out[(i, j)] = dot(a, rhs.row(j));
            }
        }
        out
    }

    /// `selfᵀ * rhs` without materializing the transpose.
    pub fn t_matmul(&self, rhs: &Matrix) -> Matrix {
        assert_eq!(self.rows, rhs.rows, "t_matmul shape mismatch");
        let mut out = Matrix::zeros(self.cols, rhs.cols);
        for k in 0..self.rows {
            let a_row = self.row(k);
            let b_row = rhs.row(k);
            for (i, a) in a_row.iter().enumerate() {
                if *a == 0.0 {
                    continue;
                }
                let out_row = &mut out.data[i * rhs.cols..(i + 1) * rhs.cols];
                for (o, b) in out_row.iter_mut().zip(b_row) {
                    *o += a * b;
                }
            }
        }
        out
    }

    pub fn mat_vec(&self, v: &[f64]) -> Vec<f64> {
        assert_eq!(v.len(), self.cols);
        (0..self.rows).map(|i| dot(self.row(i), v)).collect()
    }

    pub fn t_mat_vec(&self, v: &[f64]) -> Vec<f64> {
        assert_eq!(v.len(), self.rows);
        let mut out = vec![0.0; self.cols];
        for (i, vi) in v.iter().enumerate() {
            for (o, a) in out.iter_mut().zip(self.row(i)) {
                *o += vi * a;
            }
        }
        out
    }

    pub fn add(&self, rhs: &Matrix) -> Matrix {
        assert_eq!(self.shape(), rhs.shape());
        let data = self.data.iter().zip(&rhs.data).map(|(a, b)| a + b).collect();
        Matrix { data, ..*self }
    }

    pub fn sub(&self, rhs: &Matrix) -> Matrix {
        assert_eq!(self.shape(), rhs.shape());
        let data = self.data.iter().zip(&rhs.data).map(|(a, b)| a - b).collect();
        Matrix { data, ..*self }
    }

    pub fn add_assign(&mut self, rhs: &Matrix) {
        assert_eq!(self.shape(), rhs.shape());
        for (a, b) in self.data.iter_mut().zip(&rhs.data) {
            *a += b;
        }
    }

    pub fn scale(&self, s: f64) -> Matrix {
        Matrix {
            data: self.data.iter().map(|v| v * s).collect(),
            ..*self
        }
    }

    pub fn add_diagonal(&mut self, value: f64) {
        let n = self.rows.min(self.cols);
        for i in 0..n {
            self[(i, i)] += value;
        }
    }

    /// Writes the `MARM` binary dump: 16-byte header (magic, rows, cols,
    /// reserved), then row-major little-endian `f64`s.
    pub fn write_dump<W: Write>(&self, mut w: W) -> std::io::Result<()> {
        w.write_all(DUMP_MAGIC)?;
        w.write_all(&(self.rows as u32).to_le_bytes())?;
        w.write_all(&(self.cols as u32).to_le_bytes())?;
        w.write_all(&[0u8; 4])?;
        for v in &self.data {
            w.write_all(&v.to_le_bytes())?;
        }
        Ok(())
    }

    pub fn read_dump<R: Read>(mut r: R) -> Result<Matrix> {
        let mut header = [0u8; 16];
        r.read_exact(&mut header)
            .map_err(|_| Error::TruncatedFile("matrix dump header".into()))?;
        if &header[0..4] != DUMP_MAGIC {
            let found = u32::from_be_bytes(header[0..4].try_into().unwrap());
            return Err(Error::BadMagic {
                found,
                expected: u32::from_be_bytes(*DUMP_MAGIC),
            });
        }
        let rows = u32::from_le_bytes(header[4..8].try_into().unwrap()) as usize;
        let cols = u32::from_le_bytes(header[8..12].try_into().unwrap()) as usize;
        let mut buf = vec![0u8; rows * cols * 8];
        r.read_exact(&mut buf)
            .map_err(|_| Error::TruncatedFile(format!("matrix dump body ({rows}x{cols})")))?;
        let data = buf
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect();
        Matrix::from_vec(rows, cols, data)
    }
}

const DUMP_MAGIC: &[u8; 4] = b"MARM";

impl std::ops::Index<(usize, usize)> for Matrix {
    type Output = f64;

    #[inline]
    fn index(&self, (i, j): (usize, usize)) -> &f64 {
        debug_assert!(i < self.rows && j < self.cols);
        &self.data[i * self.cols + j]
    }
}

impl std::ops::IndexMut<(usize, usize)> for Matrix {
    #[inline]
    fn index_mut(&mut self, (i, j): (usize, usize)) -> &mut f64 {
        debug_assert!(i < self.rows && j < self.cols);
        &mut self.data[i * self.cols + j]
    }
}

#[inline]
pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

pub fn norm2(v: &[f64]) -> f64 {
    dot(v, v).sqrt()
}

/// Squared Euclidean distance.
pub fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    debug_assert_eq!(a.len(), b.len());
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

pub fn frobenius_norm_sq(m: &Matrix) -> f64 {
    m.data.iter().map(|v| v * v).sum()
}

/// Solves `(g + ridge·I)·X = rhs` for symmetric positive semidefinite `g`.
///
/// Uses a Cholesky factorization with symmetric (diagonal) pivoting. A pivot
/// that falls below `n·ε·max_diag` means the system is numerically rank
/// deficient and [`Error::SingularSystem`] is returned; the caller decides
/// whether to retry with a larger ridge. The solution is also rejected if
/// its residual exceeds `1e-8·(1 + ‖rhs‖_F)`.
pub fn solve_spd(g: &Matrix, rhs: &Matrix, ridge: f64) -> Result<Matrix> {
    let n = g.rows();
    if g.cols() != n {
        return Err(Error::DimensionMismatch(format!(
            "solve_spd needs a square system, got {}x{}",
            g.rows(),
            g.cols()
        )));
    }
    if rhs.rows() != n {
        return Err(Error::DimensionMismatch(format!(
            "rhs has {} rows, system has {n}",
            rhs.rows()
        )));
    }
    if !(ridge >= 0.0) || !ridge.is_finite() {
        return Err(Error::InvalidDimension(format!("ridge must be >= 0, got {ridge}")));
    }

    let mut work = g.clone();
    work.add_diagonal(ridge);
    let (l, perm) = pivoted_cholesky(&work)?;

    // Solve P·L·Lᵀ·Pᵀ X = RHS.
    let k = rhs.cols();
    let mut x = Matrix::zeros(n, k);
    let mut y = vec![0.0; n];
    for col in 0..k {
        for i in 0..n {
            let mut s = rhs[(perm[i], col)];
            for j in 0..i {
                s -= l[(i, j)] * y[j];
            }
            y[i] = s / l[(i, i)];
        }
        for i in (0..n).rev() {
            let mut s = y[i];
            for j in i + 1..n {
                s -= l[(j, i)] * y[j];
            }
            y[i] = s / l[(i, i)];
        }
        for i in 0..n {
            x[(perm[i], col)] = y[i];
        }
    }

    if !x.is_finite() {
        return Err(Error::SingularSystem);
    }
    let residual = frobenius_norm_sq(&work.matmul(&x).sub(rhs)).sqrt();
    if residual > 1e-8 * (1.0 + frobenius_norm_sq(rhs).sqrt()) {
        return Err(Error::SingularSystem);
    }
    Ok(x)
}

/// Returns lower-triangular `L` and permutation `perm` with
/// `A[perm[i], perm[j]] = (L·Lᵀ)[i, j]`.
fn pivoted_cholesky(a: &Matrix) -> Result<(Matrix, Vec<usize>)> {
    let n = a.rows();
    let mut w = a.clone();
    let mut perm: Vec<usize> = (0..n).collect();
    let max_diag = (0..n).map(|i| w[(i, i)].abs()).fold(0.0_f64, f64::max);
    if max_diag == 0.0 || !max_diag.is_finite() {
        return Err(Error::SingularSystem);
    }
    let tol = (n as f64) * f64::EPSILON * max_diag;

    for k in 0..n {
        // Largest remaining diagonal entry becomes the pivot.
        let (p, pivot) = (k..n)
            .map(|i| (i, w[(i, i)]))
            .fold((k, f64::NEG_INFINITY), |best, cur| if cur.1 > best.1 { cur } else { best });
        if !(pivot > tol) {
            return Err(Error::SingularSystem);
        }
        if p != k {
            swap_pivot(&mut w, k, p);
            perm.swap(k, p);
        }
        let lkk = w[(k, k)].sqrt();
        w[(k, k)] = lkk;
        for i in k + 1..n {
            w[(i, k)] /= lkk;
        }
        // Trailing Schur complement, kept fully symmetric.
        for i in k + 1..n {
            let lik = w[(i, k)];
            for j in k + 1..n {
                w[(i, j)] -= lik * w[(j, k)];
            }
        }
    }

    let mut l = Matrix::zeros(n, n);
    for i in 0..n {
        for j in 0..=i {
            l[(i, j)] = w[(i, j)];
        }
    }
    Ok((l, perm))
}

/// Swaps pivot `a < b`: rows of the finished `L` columns, and rows plus
/// columns of the trailing block.
fn swap_pivot(w: &mut Matrix, a: usize, b: usize) {
    let n = w.rows();
    for j in 0..n {
        let (x, y) = (w[(a, j)], w[(b, j)]);
        w[(a, j)] = y;
        w[(b, j)] = x;
    }
    for i in a..n {
        let (x, y) = (w[(i, a)], w[(i, b)]);
        w[(i, a)] = y;
        w[(i, b)] = x;
    }
}

pub const DEFAULT_POWER_ITERS: usize = 50;

/// Dominant right singular vector of `m` by seeded power iteration on `MᵀM`.
///
/// The result has unit norm. For an all-zero `m` the seeded starting vector is
/// returned unchanged.
pub fn top_right_singular_vector(m: &Matrix, iters: usize, seed: u64) -> Vec<f64> {
    let n = m.cols();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut v: Vec<f64> = (0..n).map(|_| rng.random::<f64>() - 0.5).collect();
    let mut norm = norm2(&v);
    if norm == 0.0 {
        v[0] = 1.0;
        norm = 1.0;
    }
    v.iter_mut().for_each(|x| *x /= norm);

    for _ in 0..iters.max(1) {
        let mv = m.mat_vec(&v);
        let next = m.t_mat_vec(&mv);
        let nn = norm2(&next);
        if nn == 0.0 || !nn.is_finite() {
            break;
        }
        v = next.into_iter().map(|x| x / nn).collect();
    }
    v
}
