//! Dense linear algebra and seeded randomness.
//!
//! Everything here is double precision. [`Matrix`] is a plain row-major
//! buffer; the Cholesky routines are the only factorization the GP code
//! needs. [`RngState`] is the single random source threaded through every
//! stochastic operation in the crate.

use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum NumericsError {
    #[error("matrix is not square ({rows}x{cols})")]
    NonSquare { rows: usize, cols: usize },
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("matrix is not positive definite (failed at jitter {jitter:e})")]
    NotPositiveDefinite { jitter: f64 },
    #[error("matrix is not symmetric (entry ({row},{col}) differs by {diff:e})")]
    NotSymmetric { row: usize, col: usize, diff: f64 },
    #[error("non-finite entry at ({row},{col})")]
    NonFinite { row: usize, col: usize },
    #[error("invalid range: lo {lo} > hi {hi}")]
    InvalidRange { lo: f64, hi: f64 },
}

/// Row-major dense matrix of `f64`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Matrix {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl Matrix {
    pub fn zeros(rows: usize, cols: usize) -> Self {
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

    /// Builds a matrix from a row-major buffer, rejecting non-finite values.
    pub fn from_vec(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self, NumericsError> {
        if rows * cols != data.len() {
            return Err(NumericsError::ShapeMismatch(format!(
                "{rows}x{cols} needs {} values, got {}",
                rows * cols,
                data.len()
            )));
        }
        if let Some(pos) = data.iter().position(|v| !v.is_finite()) {
            return Err(NumericsError::NonFinite {
                row: pos / cols.max(1),
                col: pos % cols.max(1),
            });
        }
        Ok(Self { rows, cols, data })
    }

    /// Builds a matrix from equal-length rows.
    pub fn from_rows<R: AsRef<[f64]>>(rows: &[R]) -> Result<Self, NumericsError> {
        let cols = rows.first().map_or(0, |r| r.as_ref().len());
        let mut data = Vec::with_capacity(rows.len() * cols);
        for (i, r) in rows.iter().enumerate() {
            let r = r.as_ref();
            if r.len() != cols {
                return Err(NumericsError::ShapeMismatch(format!(
                    "row {i} has {} columns, expected {cols}",
                    r.len()
                )));
            }
            data.extend_from_slice(r);
        }
        Self::from_vec(rows.len(), cols, data)
    }

    /// Column vector.
    pub fn column(values: &[f64]) -> Result<Self, NumericsError> {
        Self::from_vec(values.len(), 1, values.to_vec())
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
    pub fn row(&self, r: usize) -> &[f64] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    #[inline]
    pub fn row_mut(&mut self, r: usize) -> &mut [f64] {
        &mut self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn iter_rows(&self) -> impl Iterator<Item = &[f64]> {
        // chunks_exact(0) panics, and a zero-column matrix has no rows worth yielding
        let cols = self.cols.max(1);
        self.data.chunks_exact(cols).take(if self.cols == 0 { 0 } else { self.rows })
    }

    pub fn transpose(&self) -> Matrix {
        let mut t = Matrix::zeros(self.cols, self.rows);
        for r in 0..self.rows {
            for c in 0..self.cols {
                t[(c, r)] = self[(r, c)];
            }
        }
        t
    }

    pub fn matmul(&self, other: &Matrix) -> Result<Matrix, NumericsError> {
        if self.cols != other.rows {
            return Err(NumericsError::ShapeMismatch(format!(
                "{}x{} times {}x{}",
                self.rows, self.cols, other.rows, other.cols
            )));
        }
        let mut out = Matrix::zeros(self.rows, other.cols);
        gemm(
            self.rows,
            self.cols,
            other.cols,
            1.0,
            &self.data,
            false,
            &other.data,
            false,
            0.0,
            &mut out.data,
        );
        Ok(out)
    }

    pub fn frobenius_norm(&self) -> f64 {
        self.data.iter().map(|v| v * v).sum::<f64>().sqrt()
    }

    pub fn is_square(&self) -> bool {
        self.rows == self.cols
    }
}

impl std::ops::Index<(usize, usize)> for Matrix {
    type Output = f64;
    #[inline]
    fn index(&self, (r, c): (usize, usize)) -> &f64 {
        &self.data[r * self.cols + c]
    }
}

impl std::ops::IndexMut<(usize, usize)> for Matrix {
    #[inline]
    fn index_mut(&mut self, (r, c): (usize, usize)) -> &mut f64 {
        &mut self.data[r * self.cols + c]
    }
}

/// Row-major `C = alpha * op(A) * op(B) + beta * C` where `op(A)` is `m x k`
/// and `op(B)` is `k x n`. `a_t`/`b_t` select the transpose of the stored
/// buffer (stored as `k x m` / `n x k` respectively).
#[allow(clippy::too_many_arguments)]
pub fn gemm(
    m: usize,
    k: usize,
    n: usize,
    alpha: f64,
    a: &[f64],
    a_t: bool,
    b: &[f64],
    b_t: bool,
    beta: f64,
    c: &mut [f64],
) {
    assert!(a.len() >= m * k, "gemm: A too small");
    assert!(b.len() >= k * n, "gemm: B too small");
    assert!(c.len() >= m * n, "gemm: C too small");
    if m == 0 || n == 0 {
        return;
    }
    let (rsa, csa) = if a_t { (1, m as isize) } else { (k as isize, 1) };
    let (rsb, csb) = if b_t { (1, k as isize) } else { (n as isize, 1) };
    // SAFETY: the asserts above guarantee every strided access stays inside
    // the slices, and `c` does not alias `a` or `b` (distinct borrows).
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            alpha,
            a.as_ptr(),
            rsa,
            csa,
            b.as_ptr(),
            rsb,
            csb,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

const JITTER_START: f64 = 1e-10;
const JITTER_MAX: f64 = 1e-4;
const PIVOT_FLOOR: f64 = 1e-8;

/// Lower Cholesky factor of `a + jitter * I`.
///
/// If the factorization fails at the requested jitter, the jitter is
/// escalated ×10 from 1e-10 up to 1e-4 before giving up. Escalations are
/// logged.
pub fn cholesky_factor(a: &Matrix, jitter: f64) -> Result<Matrix, NumericsError> {
    Ok(cholesky_factor_with_jitter(a, jitter)?.0)
}

/// Same as [`cholesky_factor`], also returning the jitter that succeeded.
pub fn cholesky_factor_with_jitter(
    a: &Matrix,
    jitter: f64,
) -> Result<(Matrix, f64), NumericsError> {
    if !a.is_square() {
        return Err(NumericsError::NonSquare {
            rows: a.rows,
            cols: a.cols,
        });
    }
    check_symmetric(a)?;
    let mut j = jitter.max(0.0);
    loop {
        if let Some(l) = try_cholesky(a, j) {
            if j > jitter {
                log::debug!("cholesky succeeded after jitter escalation to {j:e}");
            }
            return Ok((l, j));
        }
        let next = if j < JITTER_START { JITTER_START } else { j * 10.0 };
        if next > JITTER_MAX * (1.0 + 1e-12) {
            return Err(NumericsError::NotPositiveDefinite { jitter: j });
        }
        log::warn!("cholesky failed at jitter {j:e}; retrying with {next:e}");
        j = next;
    }
}

fn check_symmetric(a: &Matrix) -> Result<(), NumericsError> {
    let n = a.rows;
    for r in 0..n {
        for c in (r + 1)..n {
            let (x, y) = (a[(r, c)], a[(c, r)]);
            let scale = x.abs().max(y.abs()).max(1.0);
            if (x - y).abs() > 1e-10 * scale {
                return Err(NumericsError::NotSymmetric {
                    row: r,
                    col: c,
                    diff: (x - y).abs(),
                });
            }
        }
    }
    Ok(())
}

fn try_cholesky(a: &Matrix, jitter: f64) -> Option<Matrix> {
    let n = a.rows;
    let mut l = Matrix::zeros(n, n);
    for i in 0..n {
        for j in 0..=i {
            let li = &l.data[i * n..i * n + j];
            let lj = &l.data[j * n..j * n + j];
            let dot: f64 = li.iter().zip(lj).map(|(x, y)| x * y).sum();
            if i == j {
                let d = a[(i, i)] + jitter - dot;
                // A pivot this small against its own diagonal means the matrix
                // is singular to working precision; treat it as a failure so
                // that jitter escalation takes over.
                if !(d > PIVOT_FLOOR * (a[(i, i)] + jitter)) || !d.is_finite() {
                    return None;
                }
                l[(i, i)] = d.sqrt();
            } else {
                l[(i, j)] = (a[(i, j)] - dot) / l[(j, j)];
            }
        }
    }
    Some(l)
}

/// Solves `(L Lᵀ) X = B` by forward then back substitution.
pub fn cholesky_solve(l: &Matrix, b: &Matrix) -> Result<Matrix, NumericsError> {
    if !l.is_square() {
        return Err(NumericsError::NonSquare {
            rows: l.rows,
            cols: l.cols,
        });
    }
    if l.rows != b.rows {
        return Err(NumericsError::ShapeMismatch(format!(
            "factor is {}x{}, right-hand side has {} rows",
            l.rows, l.cols, b.rows
        )));
    }
    let mut x = b.clone();
    for c in 0..b.cols {
        let mut col: Vec<f64> = (0..b.rows).map(|r| b[(r, c)]).collect();
        forward_substitute(l, &mut col);
        back_substitute_transposed(l, &mut col);
        for (r, v) in col.into_iter().enumerate() {
            x[(r, c)] = v;
        }
    }
    Ok(x)
}

/// In-place solve of `L y = b`.
pub fn forward_substitute(l: &Matrix, b: &mut [f64]) {
    let n = l.rows;
    for i in 0..n {
        let row = &l.data[i * n..i * n + i];
        let s: f64 = row.iter().zip(&b[..i]).map(|(x, y)| x * y).sum();
        b[i] = (b[i] - s) / l.data[i * n + i];
    }
}

/// In-place solve of `Lᵀ x = y`.
pub fn back_substitute_transposed(l: &Matrix, y: &mut [f64]) {
    let n = l.rows;
    for i in (0..n).rev() {
        let mut s = 0.0;
        for k in (i + 1)..n {
            s += l.data[k * n + i] * y[k];
        }
        y[i] = (y[i] - s) / l.data[i * n + i];
    }
}

fn splitmix64(mut x: u64) -> u64 {
    x = x.wrapping_add(0x9E37_79B9_7F4A_7C15);
    let mut z = x;
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Seeded ChaCha8 stream. Equal seeds give bitwise-identical draws on every
/// platform; child streams come from [`RngState::derive`].
#[derive(Debug, Clone)]
pub struct RngState {
    seed: u64,
    rng: ChaCha8Rng,
}

impl RngState {
    pub fn new(seed: u64) -> Self {
        Self {
            seed,
            rng: ChaCha8Rng::seed_from_u64(seed),
        }
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    /// Independent child stream keyed by `id`. Does not advance `self`.
    pub fn derive(&self, id: u64) -> RngState {
        RngState::new(splitmix64(self.seed ^ splitmix64(id.wrapping_add(1))))
    }

    /// Uniform sample in `[lo, hi)`; `lo == hi` returns `lo`.
    pub fn uniform(&mut self, lo: f64, hi: f64) -> Result<f64, NumericsError> {
        if !(lo <= hi) {
            return Err(NumericsError::InvalidRange { lo, hi });
        }
        if lo == hi {
            return Ok(lo);
        }
        let u: f64 = self.rng.random();
        let v = lo + (hi - lo) * u;
        Ok(if v >= hi { lo } else { v })
    }

    /// Uniform in `[0, 1)`.
    pub fn unit(&mut self) -> f64 {
        self.rng.random()
    }

    /// Uniform index in `0..n`. Panics on `n == 0`.
    pub fn index(&mut self, n: usize) -> usize {
        assert!(n > 0, "index over empty range");
        self.rng.random_range(0..n)
    }

    /// Standard normal via Box–Muller.
    pub fn normal(&mut self) -> f64 {
        let u1 = 1.0 - self.unit();
        let u2 = self.unit();
        (-2.0 * u1.ln()).sqrt() * (2.0 * std::f64::consts::PI * u2).cos()
    }

    /// `k` distinct indices from `0..n`, in sampled order.
    pub fn sample_distinct(&mut self, n: usize, k: usize) -> Vec<usize> {
        rand::seq::index::sample(&mut self.rng, n, k.min(n)).into_vec()
    }

    pub fn next_u64(&mut self) -> u64 {
        self.rng.next_u64()
    }
}

/// Free-function form of [`RngState::uniform`].
pub fn rng_uniform(state: &mut RngState, lo: f64, hi: f64) -> Result<f64, NumericsError> {
    state.uniform(lo, hi)
}

pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

pub fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

pub fn mean(v: &[f64]) -> f64 {
    if v.is_empty() {
        return 0.0;
    }
    v.iter().sum::<f64>() / v.len() as f64
}

/// Median of a slice; NaN-free input assumed. Empty input gives NaN.
pub fn median(v: &[f64]) -> f64 {
    if v.is_empty() {
        return f64::NAN;
    }
    let mut s = v.to_vec();
    s.sort_by(|a, b| a.total_cmp(b));
    let n = s.len();
    if n % 2 == 1 {
        s[n / 2]
    } else {
        0.5 * (s[n / 2 - 1] + s[n / 2])
    }
}
