//! Dense vectors and matrices in `f64`, seeded PRNG streams and a
//! central-difference gradient checker.
//!
//! Everything here is deliberately small. Payload bit widths only ever apply
//! to encoded messages; all internal arithmetic stays in 64-bit floats.

use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha20Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum NumericsError {
    #[error("dimension mismatch: expected {expected}, found {found}")]
    DimensionMismatch { expected: usize, found: usize },
    #[error("vector must have at least one element")]
    Empty,
    #[error("non-finite value at index {index}")]
    NonFinite { index: usize },
    #[error("function evaluation was not finite while perturbing coordinate {index}")]
    DegenerateEvaluation { index: usize },
    #[error("finite-difference step must be positive and finite, got {0}")]
    InvalidStep(f64),
    #[error("matrix shape {rows}x{cols} does not match {len} elements")]
    Shape { rows: usize, cols: usize, len: usize },
}

pub type Result<T> = std::result::Result<T, NumericsError>;

fn first_non_finite(values: &[f64]) -> Option<usize> {
    values.iter().position(|v| !v.is_finite())
}

/// A non-empty vector whose elements are always finite.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "Vec<f64>", into = "Vec<f64>")]
pub struct Vector(Vec<f64>);

impl TryFrom<Vec<f64>> for Vector {
    type Error = NumericsError;

    fn try_from(values: Vec<f64>) -> Result<Self> {
        Vector::new(values)
    }
}

impl From<Vector> for Vec<f64> {
    fn from(v: Vector) -> Self {
        v.0
    }
}

impl Vector {
    pub fn new(values: Vec<f64>) -> Result<Self> {
        if values.is_empty() {
            return Err(NumericsError::Empty);
        }
        if let Some(index) = first_non_finite(&values) {
            return Err(NumericsError::NonFinite { index });
        }
        Ok(Self(values))
    }

    /// # Panics
    /// Panics if `len == 0`.
    pub fn zeros(len: usize) -> Self {
        assert!(len > 0, "vector length must be positive");
        Self(vec![0.0; len])
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    pub fn into_inner(self) -> Vec<f64> {
        self.0
    }

    pub fn iter(&self) -> std::slice::Iter<'_, f64> {
        self.0.iter()
    }

    pub fn l2_norm(&self) -> f64 {
        l2_norm(&self.0)
    }

    pub fn linf_norm(&self) -> f64 {
        self.0.iter().fold(0.0_f64, |m, v| m.max(v.abs()))
    }

    pub fn is_zero(&self) -> bool {
        self.0.iter().all(|&v| v == 0.0)
    }

    fn check_len(&self, other: &Vector) -> Result<()> {
        if self.len() != other.len() {
            return Err(NumericsError::DimensionMismatch {
                expected: self.len(),
                found: other.len(),
            });
        }
        Ok(())
    }

    pub fn dot(&self, other: &Vector) -> Result<f64> {
        self.check_len(other)?;
        Ok(self.0.iter().zip(&other.0).map(|(a, b)| a * b).sum())
    }

    pub fn add(&self, other: &Vector) -> Result<Vector> {
        self.check_len(other)?;
        Vector::new(self.0.iter().zip(&other.0).map(|(a, b)| a + b).collect())
    }

    pub fn sub(&self, other: &Vector) -> Result<Vector> {
        self.check_len(other)?;
        Vector::new(self.0.iter().zip(&other.0).map(|(a, b)| a - b).collect())
    }

    pub fn scaled(&self, c: f64) -> Result<Vector> {
        Vector::new(self.0.iter().map(|a| c * a).collect())
    }

    /// `self + alpha * other`, evaluated per coordinate as `self_i + alpha * other_i`.
    pub fn axpy(&self, alpha: f64, other: &Vector) -> Result<Vector> {
        self.check_len(other)?;
        Vector::new(
            self.0
                .iter()
                .zip(&other.0)
                .map(|(a, b)| a + alpha * b)
                .collect(),
        )
    }

    /// Concatenation of several vectors, in order.
    pub fn concat<'a>(parts: impl IntoIterator<Item = &'a Vector>) -> Result<Vector> {
        let mut out = Vec::new();
        for p in parts {
            out.extend_from_slice(p.as_slice());
        }
        Vector::new(out)
    }

    /// True when every element has the same bit pattern in both vectors.
    pub fn bitwise_eq(&self, other: &Vector) -> bool {
        self.len() == other.len()
            && self
                .0
                .iter()
                .zip(&other.0)
                .all(|(a, b)| a.to_bits() == b.to_bits())
    }
}

impl std::ops::Index<usize> for Vector {
    type Output = f64;

    fn index(&self, i: usize) -> &f64 {
        &self.0[i]
    }
}

/// Euclidean norm of a slice.
///
/// Plain sum of squares; inputs here are small enough that scaling against
/// overflow is unnecessary, and a non-finite result is caught by the caller.
pub fn l2_norm(values: &[f64]) -> f64 {
    values.iter().map(|v| v * v).sum::<f64>().sqrt()
}

/// Norm of the concatenation of several slices.
pub fn stacked_norm<'a>(parts: impl IntoIterator<Item = &'a [f64]>) -> f64 {
    parts
        .into_iter()
        .map(|p| p.iter().map(|v| v * v).sum::<f64>())
        .sum::<f64>()
        .sqrt()
}

/// Row-major dense matrix with finite entries.
#[derive(Debug, Clone, PartialEq)]
pub struct Matrix {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl Matrix {
    pub fn from_row_major(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        if rows == 0 || cols == 0 || rows * cols != data.len() {
            return Err(NumericsError::Shape {
                rows,
                cols,
                len: data.len(),
            });
        }
        if let Some(index) = first_non_finite(&data) {
            return Err(NumericsError::NonFinite { index });
        }
        Ok(Self { rows, cols, data })
    }

    pub fn zeros(rows: usize, cols: usize) -> Self {
        assert!(rows > 0 && cols > 0, "matrix dimensions must be positive");
        Self {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }

    pub fn get(&self, r: usize, c: usize) -> f64 {
        self.data[r * self.cols + c]
    }

    pub fn set(&mut self, r: usize, c: usize, value: f64) {
        assert!(value.is_finite(), "matrix entries must be finite");
        self.data[r * self.cols + c] = value;
    }

    pub fn as_ref(&self) -> MatRef<'_> {
        MatRef {
            rows: self.rows,
            cols: self.cols,
            data: &self.data,
        }
    }

    /// Largest singular value, by power iteration on `AᵀA`.
    pub fn spectral_norm(&self) -> f64 {
        self.as_ref().spectral_norm()
    }
}

/// Borrowed row-major view, used for weights stored inside flat parameter vectors.
#[derive(Debug, Clone, Copy)]
pub struct MatRef<'a> {
    pub rows: usize,
    pub cols: usize,
    pub data: &'a [f64],
}

impl<'a> MatRef<'a> {
    pub fn new(rows: usize, cols: usize, data: &'a [f64]) -> Self {
        debug_assert_eq!(rows * cols, data.len());
        Self { rows, cols, data }
    }

    /// `y = A x`.
    pub fn matvec(&self, x: &[f64]) -> Vec<f64> {
        debug_assert_eq!(x.len(), self.cols);
        self.data
            .chunks_exact(self.cols)
            .map(|row| row.iter().zip(x).map(|(a, b)| a * b).sum())
            .collect()
    }

    /// `y = Aᵀ u`.
    pub fn matvec_t(&self, u: &[f64]) -> Vec<f64> {
        debug_assert_eq!(u.len(), self.rows);
        let mut out = vec![0.0; self.cols];
        for (row, &ui) in self.data.chunks_exact(self.cols).zip(u) {
            for (o, a) in out.iter_mut().zip(row) {
                *o += a * ui;
            }
        }
        out
    }

    pub fn spectral_norm(&self) -> f64 {
        // Deterministic start vector; 200 iterations is plenty for the small
        // matrices this is used on.
        let mut v: Vec<f64> = (0..self.cols).map(|i| 1.0 + (i as f64) * 1e-3).collect();
        let mut sigma = 0.0;
        for _ in 0..200 {
            let n = l2_norm(&v);
            if n == 0.0 {
                return 0.0;
            }
            v.iter_mut().for_each(|x| *x /= n);
            let av = self.matvec(&v);
            sigma = l2_norm(&av);
            v = self.matvec_t(&av);
        }
        sigma
    }
}

/// Identifies one independent consumer of randomness.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum StreamId {
    Sampling,
    Init,
    Data,
    /// Forward-direction quantizer draws at a boundary (1-based).
    Forward(u16),
    /// Backward-direction quantizer draws at a boundary (1-based).
    Backward(u16),
    /// Low-precision buffer re-encoding draws at a boundary (1-based).
    Buffer(u16),
    /// Free-form stream for tests and tools.
    Aux(u32),
}

impl StreamId {
    pub fn code(self) -> u64 {
        match self {
            StreamId::Sampling => 1,
            StreamId::Init => 2,
            StreamId::Data => 3,
            StreamId::Forward(b) => 0x1_0000 | u64::from(b),
            StreamId::Backward(b) => 0x2_0000 | u64::from(b),
            StreamId::Buffer(b) => 0x3_0000 | u64::from(b),
            StreamId::Aux(x) => 0x1_0000_0000 | u64::from(x),
        }
    }
}

/// A reproducible random stream: ChaCha20 keyed from `seed` via
/// `SeedableRng::seed_from_u64`, with `StreamId::code()` as the ChaCha stream
/// number and the block counter starting at zero.
///
/// Uniform draws take the top 53 bits of one 64-bit output, so the draw
/// sequence is fixed for a given `(seed, stream)` on every platform.
#[derive(Debug, Clone)]
pub struct RngStream {
    seed: u64,
    stream: StreamId,
    inner: ChaCha20Rng,
}

impl RngStream {
    pub fn new(seed: u64, stream: StreamId) -> Self {
        let mut inner = ChaCha20Rng::seed_from_u64(seed);
        inner.set_stream(stream.code());
        Self {
            seed,
            stream,
            inner,
        }
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn stream(&self) -> StreamId {
        self.stream
    }

    /// Number of 32-bit words consumed so far.
    pub fn draw_index(&self) -> u128 {
        self.inner.get_word_pos()
    }

    pub fn next_u64(&mut self) -> u64 {
        self.inner.next_u64()
    }

    /// Uniform on `[0, 1)`.
    pub fn uniform(&mut self) -> f64 {
        (self.inner.next_u64() >> 11) as f64 * (1.0 / (1u64 << 53) as f64)
    }

    /// Uniform on `[lo, hi)`.
    pub fn uniform_in(&mut self, lo: f64, hi: f64) -> f64 {
        lo + (hi - lo) * self.uniform()
    }

    pub fn normal(&mut self) -> f64 {
        StandardNormal.sample(&mut self.inner)
    }

    /// Uniform integer in `0..n`.
    pub fn below(&mut self, n: usize) -> usize {
        assert!(n > 0, "empty range");
        // Lemire's multiply-shift with rejection keeps this exactly uniform.
        let n64 = n as u64;
        let threshold = n64.wrapping_neg() % n64;
        loop {
            let x = self.inner.next_u64();
            let m = u128::from(x) * u128::from(n64);
            if (m as u64) >= threshold {
                return (m >> 64) as usize;
            }
        }
    }

    /// Fisher-Yates shuffle driven by `below`.
    pub fn shuffle<T>(&mut self, items: &mut [T]) {
        for i in (1..items.len()).rev() {
            let j = self.below(i + 1);
            items.swap(i, j);
        }
    }
}

/// Central-difference gradient of `f` at `x`.
pub fn finite_diff_grad<F>(f: F, x: &Vector, h: f64) -> Result<Vector>
where
    F: Fn(&[f64]) -> f64,
{
    if !(h > 0.0 && h.is_finite()) {
        return Err(NumericsError::InvalidStep(h));
    }
    let mut probe = x.as_slice().to_vec();
    let mut grad = Vec::with_capacity(x.len());
    for i in 0..x.len() {
        let orig = probe[i];
        probe[i] = orig + h;
        let plus = f(&probe);
        probe[i] = orig - h;
        let minus = f(&probe);
        probe[i] = orig;
        if !plus.is_finite() || !minus.is_finite() {
            return Err(NumericsError::DegenerateEvaluation { index: i });
        }
        grad.push((plus - minus) / (2.0 * h));
    }
    Vector::new(grad)
}
