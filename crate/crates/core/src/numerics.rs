//! Dense row-major matrices, masked softmax, and the seeded generator used
//! everywhere randomness is needed.
//!
//! Products are computed row by row with a fixed accumulation order, so row
//! `i` of a product depends only on row `i` of the left operand. The memory
//! model's masking invariants rely on that to hold bit-for-bit.

use faer::{Accum, MatMut, MatRef, Par};
use serde::{Deserialize, Serialize};

use crate::error::{NammError, Result};

/// Row-major dense matrix of `f64`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
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

    pub fn from_vec(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(NammError::shape(format!(
                "{} values for a {rows}x{cols} matrix",
                data.len()
            )));
        }
        Ok(Self { rows, cols, data })
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
    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.cols..(i + 1) * self.cols]
    }

    #[inline]
    pub fn row_mut(&mut self, i: usize) -> &mut [f64] {
        let c = self.cols;
        &mut self.data[i * c..(i + 1) * c]
    }

    pub fn column(&self, j: usize) -> Vec<f64> {
        (0..self.rows).map(|i| self[(i, j)]).collect()
    }

    pub fn transpose(&self) -> Matrix {
        Matrix::from_fn(self.cols, self.rows, |i, j| self[(j, i)])
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// Copies columns `start..end` into a new matrix.
    pub fn columns(&self, start: usize, end: usize) -> Matrix {
        Matrix::from_fn(self.rows, end - start, |i, j| self[(i, start + j)])
    }

    pub fn scale(&mut self, s: f64) {
        self.data.iter_mut().for_each(|v| *v *= s);
    }

    pub fn add_assign(&mut self, other: &Matrix) -> Result<()> {
        if self.rows != other.rows || self.cols != other.cols {
            return Err(NammError::shape(format!(
                "add {}x{} to {}x{}",
                other.rows, other.cols, self.rows, self.cols
            )));
        }
        self.data
            .iter_mut()
            .zip(&other.data)
            .for_each(|(a, b)| *a += b);
        Ok(())
    }

    /// Adds `bias` to every row.
    pub fn add_row_vector(&mut self, bias: &[f64]) {
        debug_assert_eq!(bias.len(), self.cols);
        for i in 0..self.rows {
            self.row_mut(i)
                .iter_mut()
                .zip(bias)
                .for_each(|(a, b)| *a += b);
        }
    }

    pub fn max_abs_diff(&self, other: &Matrix) -> f64 {
        assert_eq!((self.rows, self.cols), (other.rows, other.cols));
        self.data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max)
    }
}

impl std::ops::Index<(usize, usize)> for Matrix {
    type Output = f64;

    #[inline]
    fn index(&self, (i, j): (usize, usize)) -> &f64 {
        &self.data[i * self.cols + j]
    }
}

impl std::ops::IndexMut<(usize, usize)> for Matrix {
    #[inline]
    fn index_mut(&mut self, (i, j): (usize, usize)) -> &mut f64 {
        &mut self.data[i * self.cols + j]
    }
}

/// Boolean matrix; `true` marks an entry that may be attended to.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Mask {
    rows: usize,
    cols: usize,
    allowed: Vec<bool>,
}

impl Mask {
    pub fn from_fn(rows: usize, cols: usize, mut f: impl FnMut(usize, usize) -> bool) -> Self {
        let mut allowed = Vec::with_capacity(rows * cols);
        for i in 0..rows {
            for j in 0..cols {
                allowed.push(f(i, j));
            }
        }
        Self {
            rows,
            cols,
            allowed,
        }
    }

    pub fn all(rows: usize, cols: usize) -> Self {
        Self::from_fn(rows, cols, |_, _| true)
    }

    /// Lower-triangular causal mask: query `i` sees keys `j <= i`.
    pub fn causal(n: usize) -> Self {
        Self::from_fn(n, n, |i, j| j <= i)
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
    pub fn get(&self, i: usize, j: usize) -> bool {
        self.allowed[i * self.cols + j]
    }

    pub fn transpose(&self) -> Mask {
        Mask::from_fn(self.cols, self.rows, |i, j| self.get(j, i))
    }
}

/// `a · b`.
pub fn matmul(a: &Matrix, b: &Matrix) -> Result<Matrix> {
    if a.cols != b.rows {
        return Err(NammError::shape(format!(
            "matmul {}x{} by {}x{}",
            a.rows, a.cols, b.rows, b.cols
        )));
    }
    let mut out = Matrix::zeros(a.rows, b.cols);
    for i in 0..a.rows {
        let out_row = &mut out.data[i * b.cols..(i + 1) * b.cols];
        for (k, &aik) in a.row(i).iter().enumerate() {
            if aik == 0.0 {
                continue;
            }
            let b_row = &b.data[k * b.cols..(k + 1) * b.cols];
            for (o, &bkj) in out_row.iter_mut().zip(b_row) {
                *o += aik * bkj;
            }
        }
    }
    Ok(out)
}

/// `a · bᵀ`.
pub fn matmul_bt(a: &Matrix, b: &Matrix) -> Result<Matrix> {
    if a.cols != b.cols {
        return Err(NammError::shape(format!(
            "matmul_bt {}x{} by ({}x{})ᵀ",
            a.rows, a.cols, b.rows, b.cols
        )));
    }
    let mut out = Matrix::zeros(a.rows, b.rows);
    for i in 0..a.rows {
        let ar = a.row(i);
        for j in 0..b.rows {
            out.data[i * b.rows + j] = dot(ar, b.row(j));
        }
    }
    Ok(out)
}

/// `aᵀ · b`.
pub fn matmul_at(a: &Matrix, b: &Matrix) -> Result<Matrix> {
    if a.rows != b.rows {
        return Err(NammError::shape(format!(
            "matmul_at ({}x{})ᵀ by {}x{}",
            a.rows, a.cols, b.rows, b.cols
        )));
    }
    let mut out = Matrix::zeros(a.cols, b.cols);
    for k in 0..a.rows {
        let b_row = b.row(k);
        for (i, &aki) in a.row(k).iter().enumerate() {
            if aki == 0.0 {
                continue;
            }
            let out_row = &mut out.data[i * b.cols..(i + 1) * b.cols];
            for (o, &bkj) in out_row.iter_mut().zip(b_row) {
                *o += aki * bkj;
            }
        }
    }
    Ok(out)
}

#[inline]
pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    debug_assert_eq!(a.len(), b.len());
    // Four independent accumulators; fixed order keeps results reproducible.
    let mut acc = [0.0f64; 4];
    let chunks = a.len() / 4;
    for c in 0..chunks {
        let i = c * 4;
        acc[0] += a[i] * b[i];
        acc[1] += a[i + 1] * b[i + 1];
        acc[2] += a[i + 2] * b[i + 2];
        acc[3] += a[i + 3] * b[i + 3];
    }
    let mut tail = 0.0;
    for i in chunks * 4..a.len() {
        tail += a[i] * b[i];
    }
    (acc[0] + acc[1]) + (acc[2] + acc[3]) + tail
}

/// Softmax of one row restricted to the allowed entries. Masked entries are
/// written as exact zeros and never read, so their logits cannot influence
/// the result.
/// `dst = alpha · lhs · rhs` (or `dst += …` with [`Accum::Add`]) on the
/// calling thread.
pub(crate) fn gemm(dst: MatMut<'_, f64>, accum: Accum, lhs: MatRef<'_, f64>, rhs: MatRef<'_, f64>, alpha: f64) {
    faer::linalg::matmul::matmul(dst, accum, lhs, rhs, alpha, Par::Seq);
    clear_upper_simd_state();
}

// The faer kernels return with dirty upper vector registers. Legacy-SSE code
// that runs afterwards (everything built without `target-cpu`) then pays a
// transition penalty on every instruction, several times the kernel's cost.
#[cfg(target_arch = "x86_64")]
pub(crate) fn clear_upper_simd_state() {
    #[target_feature(enable = "avx")]
    unsafe fn zeroupper() {
        std::arch::x86_64::_mm256_zeroupper();
    }
    if std::arch::is_x86_feature_detected!("avx") {
        // SAFETY: guarded by the runtime feature check.
        unsafe { zeroupper() }
    }
}

#[cfg(not(target_arch = "x86_64"))]
pub(crate) fn clear_upper_simd_state() {}

pub fn masked_softmax_row(logits: &[f64], allowed: impl Fn(usize) -> bool, out: &mut [f64]) -> bool {
    let mut max = f64::NEG_INFINITY;
    let mut any = false;
    for (j, &l) in logits.iter().enumerate() {
        if allowed(j) {
            any = true;
            if l > max {
                max = l;
            }
        }
    }
    if !any {
        out.iter_mut().for_each(|o| *o = 0.0);
        return false;
    }
    let mut sum = 0.0;
    for (j, (&l, o)) in logits.iter().zip(out.iter_mut()).enumerate() {
        if allowed(j) {
            let e = (l - max).exp();
            *o = e;
            sum += e;
        } else {
            *o = 0.0;
        }
    }
    let inv = 1.0 / sum;
    out.iter_mut().for_each(|o| *o *= inv);
    true
}

/// Row-wise softmax over the entries the mask allows.
pub fn masked_softmax(logits: &Matrix, mask: &Mask) -> Result<Matrix> {
    if logits.rows != mask.rows || logits.cols != mask.cols {
        return Err(NammError::shape(format!(
            "logits {}x{} vs mask {}x{}",
            logits.rows, logits.cols, mask.rows, mask.cols
        )));
    }
    let mut out = Matrix::zeros(logits.rows, logits.cols);
    let cols = logits.cols;
    for i in 0..logits.rows {
        let mask_row = &mask.allowed[i * cols..(i + 1) * cols];
        let ok = masked_softmax_row(
            logits.row(i),
            |j| mask_row[j],
            &mut out.data[i * cols..(i + 1) * cols],
        );
        if !ok {
            return Err(NammError::FullyMaskedRow { row: i });
        }
    }
    Ok(out)
}

/// Sinusoidal embedding: `out[2k] = sin(v / base^(2k/dim))`,
/// `out[2k+1] = cos(v / base^(2k/dim))`.
pub fn sinusoidal_embedding(value: f64, dim: usize, base: f64) -> Result<Vec<f64>> {
    if dim % 2 != 0 {
        return Err(NammError::invalid(format!(
            "sinusoidal embedding needs an even dimension, got {dim}"
        )));
    }
    let mut out = Vec::with_capacity(dim);
    for k in 0..dim / 2 {
        let freq = base.powf((2 * k) as f64 / dim as f64);
        let angle = value / freq;
        out.push(angle.sin());
        out.push(angle.cos());
    }
    Ok(out)
}

/// SplitMix64 uniforms with Box–Muller normals. The whole state is one
/// `u64`, so equal seeds give equal streams on every platform.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Rng {
    pub state: u64,
}

const GOLDEN_GAMMA: u64 = 0x9E37_79B9_7F4A_7C15;

impl Rng {
    pub fn new(seed: u64) -> Self {
        Self { state: seed }
    }

    /// Generator for worker `index` derived from a shared seed.
    pub fn derive(seed: u64, index: u64) -> Self {
        Self::new(seed ^ index)
    }

    #[inline]
    pub fn next_u64(&mut self) -> u64 {
        self.state = self.state.wrapping_add(GOLDEN_GAMMA);
        let mut z = self.state;
        z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
        z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
        z ^ (z >> 31)
    }

    /// Uniform in `[0, 1)` with 53 bits of precision.
    #[inline]
    pub fn next_f64(&mut self) -> f64 {
        (self.next_u64() >> 11) as f64 * (1.0 / (1u64 << 53) as f64)
    }

    /// Uniform integer in `0..n` (multiply-shift reduction).
    #[inline]
    pub fn below(&mut self, n: u64) -> u64 {
        assert!(n > 0, "empty range");
        ((self.next_u64() as u128 * n as u128) >> 64) as u64
    }

    /// Standard normal. Consumes two uniforms; the sine branch of the
    /// Box–Muller pair is discarded so the state stays a single word.
    pub fn next_normal(&mut self) -> f64 {
        // u1 in (0, 1] keeps the logarithm finite.
        let u1 = ((self.next_u64() >> 11) + 1) as f64 * (1.0 / (1u64 << 53) as f64);
        let u2 = self.next_f64();
        (-2.0 * u1.ln()).sqrt() * (std::f64::consts::TAU * u2).cos()
    }

    pub fn shuffle<T>(&mut self, items: &mut [T]) {
        for i in (1..items.len()).rev() {
            let j = self.below(i as u64 + 1) as usize;
            items.swap(i, j);
        }
    }
}

/// Pure form of [`Rng::next_normal`].
pub fn rng_next_normal(state: Rng) -> (f64, Rng) {
    let mut rng = state;
    let v = rng.next_normal();
    (v, rng)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn random_matrix(rng: &mut Rng, rows: usize, cols: usize) -> Matrix {
        Matrix::from_fn(rows, cols, |_, _| rng.next_normal())
    }

    fn naive_matmul(a: &Matrix, b: &Matrix) -> Matrix {
        let mut out = Matrix::zeros(a.rows(), b.cols());
        for i in 0..a.rows() {
            for j in 0..b.cols() {
                let mut s = 0.0;
                for k in 0..a.cols() {
                    s += a[(i, k)] * b[(k, j)];
                }
                out[(i, j)] = s;
            }
        }
        out
    }

    #[test]
    fn identity_and_zero_products() {
        let mut rng = Rng::new(1);
        let m = random_matrix(&mut rng, 3, 4);
        assert_eq!(matmul(&Matrix::identity(3), &m).unwrap(), m);
        let z = matmul(&Matrix::zeros(2, 3), &m).unwrap();
        assert!(z.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn matmul_matches_triple_loop() {
        let mut rng = Rng::new(7);
        let a = random_matrix(&mut rng, 5, 7);
        let b = random_matrix(&mut rng, 7, 3);
        let fast = matmul(&a, &b).unwrap();
        assert!(fast.max_abs_diff(&naive_matmul(&a, &b)) < 1e-12);
        let bt = b.transpose();
        assert!(matmul_bt(&a, &bt).unwrap().max_abs_diff(&fast) < 1e-12);
        let at = a.transpose();
        assert!(matmul_at(&at, &b).unwrap().max_abs_diff(&fast) < 1e-12);
    }

    #[test]
    fn matmul_shape_error() {
        let a = Matrix::zeros(2, 3);
        let b = Matrix::zeros(2, 3);
        assert!(matches!(matmul(&a, &b), Err(NammError::Shape(_))));
    }

    #[test]
    fn softmax_examples() {
        let l = Matrix::from_vec(1, 2, vec![0.0, 0.0]).unwrap();
        let s = masked_softmax(&l, &Mask::all(1, 2)).unwrap();
        assert_eq!(s.row(0), &[0.5, 0.5]);

        let l = Matrix::from_vec(1, 2, vec![3.0, 1e300]).unwrap();
        let s = masked_softmax(&l, &Mask::from_fn(1, 2, |_, j| j == 0)).unwrap();
        assert_eq!(s.row(0), &[1.0, 0.0]);

        let l = Matrix::from_vec(1, 3, vec![1.0, 2.0, 3.0]).unwrap();
        let s = masked_softmax(&l, &Mask::all(1, 3)).unwrap();
        let z: f64 = [1.0f64, 2.0, 3.0].iter().map(|v| v.exp()).sum();
        for (j, v) in [1.0f64, 2.0, 3.0].iter().enumerate() {
            assert!((s[(0, j)] - v.exp() / z).abs() < 1e-12);
        }
    }

    #[test]
    fn fully_masked_row_is_an_error() {
        let l = Matrix::zeros(2, 2);
        let mask = Mask::from_fn(2, 2, |i, _| i == 0);
        assert!(matches!(
            masked_softmax(&l, &mask),
            Err(NammError::FullyMaskedRow { row: 1 })
        ));
    }

    #[test]
    fn embedding_examples() {
        let e = sinusoidal_embedding(0.0, 8, 1e4).unwrap();
        assert_eq!(e, vec![0.0, 1.0, 0.0, 1.0, 0.0, 1.0, 0.0, 1.0]);
        let e = sinusoidal_embedding(std::f64::consts::PI, 8, 1e4).unwrap();
        assert!(e[0].abs() < 1e-12);
        let e = sinusoidal_embedding(3.5, 8, 1e4).unwrap();
        for k in 0..4 {
            let denom = 1e4f64.powf(2.0 * k as f64 / 8.0);
            assert!((e[2 * k] - (3.5 / denom).sin()).abs() < 1e-12);
            assert!((e[2 * k + 1] - (3.5 / denom).cos()).abs() < 1e-12);
        }
        assert!(sinusoidal_embedding(1.0, 7, 1e4).is_err());
    }

    #[test]
    fn rng_golden_values() {
        // Reference values recorded from the first build; any change to the
        // generator breaks cross-implementation reproducibility.
        let mut rng = Rng::new(42);
        assert_eq!(rng.next_u64(), 0xBDD7_3226_2FEB_6E95);
        let (v, _) = rng_next_normal(Rng::new(42));
        assert_eq!(v.to_bits(), GOLDEN_NORMAL_SEED_42);
    }

    const GOLDEN_NORMAL_SEED_42: u64 = 0x3FDA_8AC4_B546_F507;

    #[test]
    fn rng_streams_are_deterministic() {
        let mut a = Rng::new(123);
        let mut b = Rng::new(123);
        for _ in 0..10_000 {
            assert_eq!(a.next_normal().to_bits(), b.next_normal().to_bits());
        }
    }

    #[test]
    fn normal_moments() {
        let mut rng = Rng::new(2024);
        let n = 100_000;
        let xs: Vec<f64> = (0..n).map(|_| rng.next_normal()).collect();
        let mean = xs.iter().sum::<f64>() / n as f64;
        let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / n as f64;
        assert!(mean.abs() < 0.02, "mean {mean}");
        assert!((var - 1.0).abs() < 0.05, "var {var}");
    }
}
