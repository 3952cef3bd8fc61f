//! Dense and batched matrix kernels plus the seeded random generator.
//!
//! All products accumulate in a fixed `i-k-j` order: every output entry is
//! `((0 + a[i][0]·b[0][j]) + a[i][1]·b[1][j]) + …`, exactly the sequence a
//! naive triple loop performs. Results therefore do not depend on how many
//! rows are processed together, which is what makes per-coordinate and
//! post-crop outputs bitwise reproducible.

use std::fmt::Debug;
use std::iter::Sum;
use std::ops::{AddAssign, MulAssign, SubAssign};

use num_traits::{Float, FromPrimitive, ToPrimitive};
use rand::RngCore;
use rand_xoshiro::rand_core::SeedableRng;
use rand_xoshiro::Xoshiro256PlusPlus;

use crate::error::{Error, Result};

/// Scalar type usable by the kernels and networks (`f32` for training,
/// `f64` for gradient checks).
pub trait Real:
    Float
    + FromPrimitive
    + ToPrimitive
    + AddAssign
    + SubAssign
    + MulAssign
    + Sum
    + Default
    + Debug
    + Send
    + Sync
    + 'static
{
    fn from_f64_lossy(v: f64) -> Self {
        <Self as FromPrimitive>::from_f64(v).unwrap_or_else(Self::nan)
    }

    fn to_f64_lossy(self) -> f64 {
        self.to_f64().unwrap_or(f64::NAN)
    }

    /// In place `z ← sin(ω z)`, writing `ω cos(ω z)` to `slope`.
    fn sine_slope(z: &mut [Self], slope: &mut [Self], omega: Self) {
        for (v, d) in z.iter_mut().zip(slope.iter_mut()) {
            let (s, c) = (omega * *v).sin_cos();
            *v = s;
            *d = omega * c;
        }
    }
}

impl Real for f32 {
    fn sine_slope(z: &mut [f32], slope: &mut [f32], omega: f32) {
        // Huge or non-finite arguments fall back to libm for the slice.
        if !z.iter().all(|v| (omega * v).abs() <= SIN_COS_RANGE) {
            for (v, d) in z.iter_mut().zip(slope.iter_mut()) {
                let (s, c) = (omega * *v).sin_cos();
                *v = s;
                *d = omega * c;
            }
            return;
        }
        for (v, d) in z.iter_mut().zip(slope.iter_mut()) {
            let (s, c) = sin_cos_reduced(omega * *v);
            *v = s;
            *d = omega * c;
        }
    }
}

impl Real for f64 {}

/// Largest `|ω z|` handled by the polynomial path.
const SIN_COS_RANGE: f32 = 8192.0;

/// Sine and cosine of `x` for `|x| ≤ 8192`: three-part Cody–Waite
/// reduction by π/2, then minimax polynomials on `[-π/4, π/4]`. Errors stay
/// within a few ulp; every step is branch-free so slices vectorize.
#[inline(always)]
fn sin_cos_reduced(x: f32) -> (f32, f32) {
    const MAGIC: f32 = 12_582_912.0;
    const PIO2_1: f32 = 1.570_312_5;
    const PIO2_2: f32 = 4.837_513e-4;
    const PIO2_3: f32 = 7.549_79e-8;
    let t = x * std::f32::consts::FRAC_2_PI + MAGIC;
    let q = t.to_bits();
    let r = t - MAGIC;
    let y = ((x - r * PIO2_1) - r * PIO2_2) - r * PIO2_3;
    let y2 = y * y;
    let s = y + y * y2 * (-1.666_665_5e-1 + y2 * (8.332_161e-3 + y2 * -1.951_529_6e-4));
    let c = 1.0 - 0.5 * y2
        + y2 * y2 * (4.166_664_6e-2 + y2 * (-1.388_731_6e-3 + y2 * 2.443_315_7e-5));
    // Quadrant q: sin = [s, c, -s, -c][q], cos = [c, -s, -c, s][q].
    let swap = 0u32.wrapping_sub(q & 1);
    let (sb, cb) = (s.to_bits(), c.to_bits());
    let sin = (sb & !swap) | (cb & swap);
    let cos = (cb & !swap) | (sb & swap);
    let sin_sign = (q & 2) << 30;
    let cos_sign = (q.wrapping_add(1) & 2) << 30;
    (f32::from_bits(sin ^ sin_sign), f32::from_bits(cos ^ cos_sign))
}

/// Row-major dense matrix.
#[derive(Clone, Debug, PartialEq)]
pub struct Matrix<T = f32> {
    rows: usize,
    cols: usize,
    data: Vec<T>,
}

impl<T: Real> Matrix<T> {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self {
            rows,
            cols,
            data: vec![T::zero(); rows * cols],
        }
    }

    pub fn identity(n: usize) -> Self {
        let mut m = Self::zeros(n, n);
        for i in 0..n {
            m.data[i * n + i] = T::one();
        }
        m
    }

    pub fn from_vec(rows: usize, cols: usize, data: Vec<T>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(Error::Shape(format!(
                "{rows}x{cols} matrix needs {} values, got {}",
                rows * cols,
                data.len()
            )));
        }
        if data.iter().any(|v| !v.is_finite()) {
            return Err(Error::InvalidArgument(
                "matrix entries must be finite".into(),
            ));
        }
        Ok(Self { rows, cols, data })
    }

    pub fn from_rows(rows: &[&[T]]) -> Result<Self> {
        let cols = rows.first().map_or(0, |r| r.len());
        if rows.iter().any(|r| r.len() != cols) {
            return Err(Error::Shape("ragged rows".into()));
        }
        Self::from_vec(rows.len(), cols, rows.concat())
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn as_slice(&self) -> &[T] {
        &self.data
    }

    pub fn as_mut_slice(&mut self) -> &mut [T] {
        &mut self.data
    }

    pub fn into_vec(self) -> Vec<T> {
        self.data
    }

    pub fn get(&self, r: usize, c: usize) -> T {
        self.data[r * self.cols + c]
    }

    pub fn set(&mut self, r: usize, c: usize, v: T) {
        self.data[r * self.cols + c] = v;
    }

    pub fn row(&self, r: usize) -> &[T] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn transpose(&self) -> Self {
        let mut out = Self::zeros(self.cols, self.rows);
        transpose_into(&self.data, self.rows, self.cols, &mut out.data);
        out
    }

    pub fn cast<U: Real>(&self) -> Matrix<U> {
        Matrix {
            rows: self.rows,
            cols: self.cols,
            data: self
                .data
                .iter()
                .map(|v| U::from_f64_lossy(v.to_f64_lossy()))
                .collect(),
        }
    }

    pub fn max_abs(&self) -> T {
        self.data.iter().fold(T::zero(), |m, v| m.max(v.abs()))
    }
}

/// `batch` matrices of identical shape stored back to back.
#[derive(Clone, Debug, PartialEq)]
pub struct BatchedMatrix<T = f32> {
    batch: usize,
    rows: usize,
    cols: usize,
    data: Vec<T>,
}

impl<T: Real> BatchedMatrix<T> {
    pub fn zeros(batch: usize, rows: usize, cols: usize) -> Self {
        Self {
            batch,
            rows,
            cols,
            data: vec![T::zero(); batch * rows * cols],
        }
    }

    pub fn from_vec(batch: usize, rows: usize, cols: usize, data: Vec<T>) -> Result<Self> {
        if data.len() != batch * rows * cols {
            return Err(Error::Shape(format!(
                "batch of {batch} {rows}x{cols} matrices needs {} values, got {}",
                batch * rows * cols,
                data.len()
            )));
        }
        Ok(Self {
            batch,
            rows,
            cols,
            data,
        })
    }

    pub fn from_matrices(items: &[Matrix<T>]) -> Result<Self> {
        let (rows, cols) = items
            .first()
            .map(|m| (m.rows, m.cols))
            .ok_or_else(|| Error::Shape("empty batch".into()))?;
        if items.iter().any(|m| m.rows != rows || m.cols != cols) {
            return Err(Error::Shape("batch members differ in shape".into()));
        }
        let data = items.iter().flat_map(|m| m.data.iter().copied()).collect();
        Self::from_vec(items.len(), rows, cols, data)
    }

    pub fn batch(&self) -> usize {
        self.batch
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn slice_len(&self) -> usize {
        self.rows * self.cols
    }

    pub fn slice(&self, k: usize) -> &[T] {
        let n = self.slice_len();
        &self.data[k * n..(k + 1) * n]
    }

    pub fn slice_mut(&mut self, k: usize) -> &mut [T] {
        let n = self.slice_len();
        &mut self.data[k * n..(k + 1) * n]
    }

    pub fn matrix(&self, k: usize) -> Matrix<T> {
        Matrix {
            rows: self.rows,
            cols: self.cols,
            data: self.slice(k).to_vec(),
        }
    }

    pub fn as_slice(&self) -> &[T] {
        &self.data
    }

    pub fn as_mut_slice(&mut self) -> &mut [T] {
        &mut self.data
    }

    /// Keeps only the slices whose flag is `true`, preserving order.
    pub fn retain_slices(&mut self, keep: &[bool]) {
        assert_eq!(keep.len(), self.batch);
        let n = self.slice_len();
        let mut out = Vec::with_capacity(keep.iter().filter(|&&k| k).count() * n);
        for (k, &kept) in keep.iter().enumerate() {
            if kept {
                out.extend_from_slice(&self.data[k * n..(k + 1) * n]);
            }
        }
        self.batch = keep.iter().filter(|&&k| k).count();
        self.data = out;
    }

    /// Builds a new stack whose slice `k` is a copy of `self.slice(source[k])`.
    pub fn gather(&self, source: &[usize]) -> Self {
        let n = self.slice_len();
        let mut data = Vec::with_capacity(source.len() * n);
        for &s in source {
            data.extend_from_slice(self.slice(s));
        }
        Self {
            batch: source.len(),
            rows: self.rows,
            cols: self.cols,
            data,
        }
    }

    pub fn cast<U: Real>(&self) -> BatchedMatrix<U> {
        BatchedMatrix {
            batch: self.batch,
            rows: self.rows,
            cols: self.cols,
            data: self
                .data
                .iter()
                .map(|v| U::from_f64_lossy(v.to_f64_lossy()))
                .collect(),
        }
    }
}

/// Standard matrix product `a · b`.
pub fn matmul<T: Real>(a: &Matrix<T>, b: &Matrix<T>) -> Result<Matrix<T>> {
    if a.cols != b.rows {
        return Err(Error::Shape(format!(
            "cannot multiply {}x{} by {}x{}",
            a.rows, a.cols, b.rows, b.cols
        )));
    }
    let mut out = Matrix::zeros(a.rows, b.cols);
    gemm(&a.data, &b.data, &mut out.data, a.rows, a.cols, b.cols);
    Ok(out)
}

/// `out[k] = w[k] · x[k]` for every slice; each slice goes through the same
/// kernel as [`matmul`].
pub fn batched_matmul<T: Real>(
    w: &BatchedMatrix<T>,
    x: &BatchedMatrix<T>,
) -> Result<BatchedMatrix<T>> {
    if w.batch != x.batch {
        return Err(Error::Shape(format!(
            "batch sizes differ: {} vs {}",
            w.batch, x.batch
        )));
    }
    if w.cols != x.rows {
        return Err(Error::Shape(format!(
            "cannot multiply {}x{} slices by {}x{} slices",
            w.rows, w.cols, x.rows, x.cols
        )));
    }
    let mut out = BatchedMatrix::zeros(w.batch, w.rows, x.cols);
    let on = w.rows * x.cols;
    for k in 0..w.batch {
        gemm(
            w.slice(k),
            x.slice(k),
            &mut out.data[k * on..(k + 1) * on],
            w.rows,
            w.cols,
            x.cols,
        );
    }
    Ok(out)
}

/// Output columns per register block.
const NR: usize = 8;
/// Rows per register block.
const MR: usize = 4;

/// `R` output rows starting at `i`, accumulators held per `NR`-wide block.
#[inline(always)]
fn gemm_rows<T: Real, const R: usize>(a: &[T], b: &[T], out: &mut [T], i: usize, k: usize, n: usize) {
    let rows: [&[T]; R] = std::array::from_fn(|r| &a[(i + r) * k..(i + r + 1) * k]);
    let full = n / NR * NR;
    for j0 in (0..full).step_by(NR) {
        let mut acc = [[T::zero(); NR]; R];
        for p in 0..k {
            let bv: &[T; NR] = b[p * n + j0..p * n + j0 + NR].try_into().unwrap();
            for r in 0..R {
                let av = rows[r][p];
                for jj in 0..NR {
                    acc[r][jj] += av * bv[jj];
                }
            }
        }
        for r in 0..R {
            out[(i + r) * n + j0..(i + r) * n + j0 + NR].copy_from_slice(&acc[r]);
        }
    }
    for j in full..n {
        let mut acc = [T::zero(); R];
        for p in 0..k {
            let bv = b[p * n + j];
            for r in 0..R {
                acc[r] += rows[r][p] * bv;
            }
        }
        for r in 0..R {
            out[(i + r) * n + j] = acc[r];
        }
    }
}

/// `out = a · b` with `a: m×k`, `b: k×n`, `out: m×n`.
pub fn gemm<T: Real>(a: &[T], b: &[T], out: &mut [T], m: usize, k: usize, n: usize) {
    assert_eq!(a.len(), m * k);
    assert_eq!(b.len(), k * n);
    assert_eq!(out.len(), m * n);
    if n == 0 {
        return;
    }
    if k == 0 {
        out.fill(T::zero());
        return;
    }
    let mut i = 0;
    while i + MR <= m {
        gemm_rows::<T, MR>(a, b, out, i, k, n);
        i += MR;
    }
    while i < m {
        gemm_rows::<T, 1>(a, b, out, i, k, n);
        i += 1;
    }
}

/// `out = a · b + bias` where `bias` has `n` entries and is added after the
/// full accumulation.
pub fn gemm_bias<T: Real>(
    a: &[T],
    b: &[T],
    bias: &[T],
    out: &mut [T],
    m: usize,
    k: usize,
    n: usize,
) {
    gemm(a, b, out, m, k, n);
    for o_row in out.chunks_exact_mut(n.max(1)).take(m) {
        for (o, &bv) in o_row.iter_mut().zip(bias) {
            *o += bv;
        }
    }
}

/// `R` rows of `out` starting at row `p` of `aᵀ·b`, summed over `i` in order.
#[inline(always)]
fn gemm_tn_rows<T: Real, const R: usize>(
    a: &[T],
    b: &[T],
    out: &mut [T],
    p: usize,
    m: usize,
    k: usize,
    n: usize,
) {
    let full = n / NR * NR;
    for j0 in (0..full).step_by(NR) {
        let mut acc: [[T; NR]; R] = std::array::from_fn(|r| {
            out[(p + r) * n + j0..(p + r) * n + j0 + NR].try_into().unwrap()
        });
        for i in 0..m {
            let bv: &[T; NR] = b[i * n + j0..i * n + j0 + NR].try_into().unwrap();
            for r in 0..R {
                let av = a[i * k + p + r];
                for jj in 0..NR {
                    acc[r][jj] += av * bv[jj];
                }
            }
        }
        for r in 0..R {
            out[(p + r) * n + j0..(p + r) * n + j0 + NR].copy_from_slice(&acc[r]);
        }
    }
    for j in full..n {
        let mut acc: [T; R] = std::array::from_fn(|r| out[(p + r) * n + j]);
        for i in 0..m {
            let bv = b[i * n + j];
            for r in 0..R {
                acc[r] += a[i * k + p + r] * bv;
            }
        }
        for r in 0..R {
            out[(p + r) * n + j] = acc[r];
        }
    }
}

/// Rows of `a`/`b` processed per pass so both tiles stay in cache.
const TN_TILE: usize = 256;

/// `out += aᵀ · b` with `a: m×k`, `b: m×n`, `out: k×n`. Each entry adds
/// the row contributions in row order.
pub fn gemm_tn_acc<T: Real>(a: &[T], b: &[T], out: &mut [T], m: usize, k: usize, n: usize) {
    assert_eq!(a.len(), m * k);
    assert_eq!(b.len(), m * n);
    assert_eq!(out.len(), k * n);
    if k == 0 || n == 0 {
        return;
    }
    for i0 in (0..m).step_by(TN_TILE) {
        let rows = TN_TILE.min(m - i0);
        let at = &a[i0 * k..(i0 + rows) * k];
        let bt = &b[i0 * n..(i0 + rows) * n];
        let mut p = 0;
        while p + MR <= k {
            gemm_tn_rows::<T, MR>(at, bt, out, p, rows, k, n);
            p += MR;
        }
        while p < k {
            gemm_tn_rows::<T, 1>(at, bt, out, p, rows, k, n);
            p += 1;
        }
    }
}

/// `out += Σ_rows a` for `a: m×n`.
#[inline]
pub fn col_sum_acc<T: Real>(a: &[T], out: &mut [T], n: usize) {
    if n == 0 {
        return;
    }
    for row in a.chunks_exact(n) {
        for (o, &v) in out.iter_mut().zip(row) {
            *o += v;
        }
    }
}

pub fn transpose_into<T: Real>(a: &[T], rows: usize, cols: usize, out: &mut [T]) {
    for r in 0..rows {
        for c in 0..cols {
            out[c * rows + r] = a[r * cols + c];
        }
    }
}

/// Deterministic generator: xoshiro256++ seeded through SplitMix64
/// (`rand_xoshiro::Xoshiro256PlusPlus::seed_from_u64`). Identical streams on
/// every platform for a given seed.
#[derive(Clone, Debug)]
pub struct Rng {
    seed: u64,
    inner: Xoshiro256PlusPlus,
}

impl Rng {
    pub fn new(seed: u64) -> Self {
        Self {
            seed,
            inner: Xoshiro256PlusPlus::seed_from_u64(seed),
        }
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    /// Uniform double in `[0, 1)` built from the top 53 bits.
    pub fn next_unit(&mut self) -> f64 {
        (self.inner.next_u64() >> 11) as f64 * (1.0 / (1u64 << 53) as f64)
    }

    /// Independent stream derived from this generator's seed and a label.
    pub fn derive(&self, stream: u64) -> Rng {
        let mixed = self
            .seed
            .wrapping_add(stream.wrapping_mul(0x9E37_79B9_7F4A_7C15))
            .rotate_left(17)
            ^ 0xD1B5_4A32_D192_ED03;
        Rng::new(mixed)
    }
}

impl RngCore for Rng {
    fn next_u32(&mut self) -> u32 {
        self.inner.next_u32()
    }

    fn next_u64(&mut self) -> u64 {
        self.inner.next_u64()
    }

    fn fill_bytes(&mut self, dst: &mut [u8]) {
        self.inner.fill_bytes(dst)
    }
}

/// i.i.d. entries uniform on `[lo, hi)`.
pub fn uniform<T: Real>(
    rng: &mut Rng,
    lo: f64,
    hi: f64,
    rows: usize,
    cols: usize,
) -> Result<Matrix<T>> {
    if !(lo < hi) || !lo.is_finite() || !hi.is_finite() {
        return Err(Error::InvalidArgument(format!(
            "uniform range requires lo < hi, got [{lo}, {hi})"
        )));
    }
    let lo_t = T::from_f64_lossy(lo);
    let hi_t = T::from_f64_lossy(hi);
    let mut data = Vec::with_capacity(rows * cols);
    while data.len() < rows * cols {
        let v = T::from_f64_lossy(lo + (hi - lo) * rng.next_unit());
        // Rounding into the target precision can land on `hi`; redraw.
        if v >= lo_t && v < hi_t {
            data.push(v);
        }
    }
    Ok(Matrix { rows, cols, data })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn fast_sine_matches_libm() {
        let mut worst = 0.0f64;
        let n = 200_001;
        let xs: Vec<f32> = (0..n).map(|i| (i as f32 - 100_000.0) * 0.002_7).collect();
        let mut z = xs.clone();
        let mut d = vec![0.0f32; n];
        f32::sine_slope(&mut z, &mut d, 30.0);
        for ((&x, &s), &c) in xs.iter().zip(&z).zip(&d) {
            let a = (30.0f32 * x) as f64;
            worst = worst.max((s as f64 - a.sin()).abs());
            worst = worst.max((c as f64 / 30.0 - a.cos()).abs());
        }
        assert!(worst < 3e-7, "worst {worst}");
        let mut big = vec![1e6f32, f32::NAN];
        let mut d = vec![0.0; 2];
        f32::sine_slope(&mut big, &mut d, 1.0);
        assert_eq!(big[0], 1e6f32.sin());
        assert!(big[1].is_nan());
    }

    fn naive(a: &Matrix<f32>, b: &Matrix<f32>) -> Matrix<f32> {
        let mut out = Matrix::zeros(a.rows(), b.cols());
        for i in 0..a.rows() {
            for j in 0..b.cols() {
                let mut acc = 0.0f32;
                for k in 0..a.cols() {
                    acc += a.get(i, k) * b.get(k, j);
                }
                out.set(i, j, acc);
            }
        }
        out
    }

    #[test]
    fn identity_product() {
        let i2 = Matrix::<f32>::identity(2);
        assert_eq!(matmul(&i2, &i2).unwrap(), i2);
    }

    #[test]
    fn hand_product() {
        let a = Matrix::from_rows(&[&[1.0f32, 2.0], &[3.0, 4.0]]).unwrap();
        let b = Matrix::from_rows(&[&[1.0f32], &[1.0]]).unwrap();
        let c = matmul(&a, &b).unwrap();
        assert_eq!(c.as_slice(), &[3.0, 7.0]);
        assert_eq!((c.rows(), c.cols()), (2, 1));
    }

    #[test]
    fn matches_naive_loop_exactly() {
        let mut rng = Rng::new(7);
        let a = uniform::<f32>(&mut rng, -1.0, 1.0, 7, 5).unwrap();
        let b = uniform::<f32>(&mut rng, -1.0, 1.0, 5, 3).unwrap();
        let got = matmul(&a, &b).unwrap();
        let want = naive(&a, &b);
        for (g, w) in got.as_slice().iter().zip(want.as_slice()) {
            assert_eq!(g.to_bits(), w.to_bits());
        }
    }

    #[test]
    fn dimension_mismatch() {
        let a = Matrix::<f32>::zeros(2, 3);
        assert!(matches!(matmul(&a, &a), Err(Error::Shape(_))));
        let w = BatchedMatrix::<f32>::zeros(2, 2, 2);
        let x = BatchedMatrix::<f32>::zeros(3, 2, 2);
        assert!(batched_matmul(&w, &x).is_err());
        let x = BatchedMatrix::<f32>::zeros(2, 3, 2);
        assert!(batched_matmul(&w, &x).is_err());
    }

    #[test]
    fn single_batch_is_matmul() {
        let mut rng = Rng::new(3);
        let a = uniform::<f32>(&mut rng, -1.0, 1.0, 4, 6).unwrap();
        let b = uniform::<f32>(&mut rng, -1.0, 1.0, 6, 2).unwrap();
        let w = BatchedMatrix::from_matrices(&[a.clone()]).unwrap();
        let x = BatchedMatrix::from_matrices(&[b.clone()]).unwrap();
        let out = batched_matmul(&w, &x).unwrap();
        assert_eq!(out.matrix(0), matmul(&a, &b).unwrap());
    }

    #[test]
    fn batched_identities() {
        let eye = Matrix::<f32>::identity(2);
        let w = BatchedMatrix::from_matrices(&[eye.clone(), eye.clone(), eye]).unwrap();
        let mut rng = Rng::new(11);
        let xs: Vec<_> = (0..3)
            .map(|_| uniform::<f32>(&mut rng, -5.0, 5.0, 2, 4).unwrap())
            .collect();
        let x = BatchedMatrix::from_matrices(&xs).unwrap();
        assert_eq!(batched_matmul(&w, &x).unwrap(), x);
    }

    #[test]
    fn batched_matches_per_slice_loop() {
        let mut rng = Rng::new(99);
        let ws: Vec<_> = (0..16)
            .map(|_| uniform::<f32>(&mut rng, -1.0, 1.0, 5, 7).unwrap())
            .collect();
        let xs: Vec<_> = (0..16)
            .map(|_| uniform::<f32>(&mut rng, -1.0, 1.0, 7, 3).unwrap())
            .collect();
        let out = batched_matmul(
            &BatchedMatrix::from_matrices(&ws).unwrap(),
            &BatchedMatrix::from_matrices(&xs).unwrap(),
        )
        .unwrap();
        for k in 0..16 {
            let want = matmul(&ws[k], &xs[k]).unwrap();
            let got = out.matrix(k);
            assert!(got
                .as_slice()
                .iter()
                .zip(want.as_slice())
                .all(|(g, w)| g.to_bits() == w.to_bits()));
        }
    }

    #[test]
    fn uniform_mean_and_range() {
        let mut rng = Rng::new(2024);
        let m = uniform::<f32>(&mut rng, 0.0, 1.0, 100, 100).unwrap();
        let mean: f64 = m.as_slice().iter().map(|&v| v as f64).sum::<f64>() / 1e4;
        assert!((mean - 0.5).abs() < 0.02, "mean {mean}");

        let m = uniform::<f32>(&mut rng, -1.0, 1.0, 50, 50).unwrap();
        assert!(m.as_slice().iter().all(|&v| (-1.0..1.0).contains(&v)));
    }

    #[test]
    fn uniform_is_deterministic_and_rejects_empty_range() {
        let a = uniform::<f32>(&mut Rng::new(5), -0.5, 0.5, 8, 8).unwrap();
        let b = uniform::<f32>(&mut Rng::new(5), -0.5, 0.5, 8, 8).unwrap();
        assert_eq!(a, b);
        assert!(uniform::<f32>(&mut Rng::new(5), 1.0, 1.0, 1, 1).is_err());
        assert!(uniform::<f32>(&mut Rng::new(5), 2.0, 1.0, 1, 1).is_err());
    }

    #[test]
    fn rng_stream_is_pinned() {
        // Guards against an accidental generator swap.
        let mut a = Rng::new(0);
        let mut b = Rng::new(0);
        let xs: Vec<u64> = (0..4).map(|_| a.next_u64()).collect();
        let ys: Vec<u64> = (0..4).map(|_| b.next_u64()).collect();
        assert_eq!(xs, ys);
        assert_ne!(Rng::new(1).next_u64(), Rng::new(0).next_u64());
    }

    #[test]
    fn retain_and_gather() {
        let mats: Vec<_> = (0..4)
            .map(|k| Matrix::from_vec(1, 2, vec![k as f32, -(k as f32)]).unwrap())
            .collect();
        let mut stack = BatchedMatrix::from_matrices(&mats).unwrap();
        let g = stack.gather(&[3, 3, 0]);
        assert_eq!(g.slice(0), &[3.0, -3.0]);
        assert_eq!(g.slice(2), &[0.0, 0.0]);
        stack.retain_slices(&[true, false, true, false]);
        assert_eq!(stack.batch(), 2);
        assert_eq!(stack.slice(1), &[2.0, -2.0]);
    }

    mod props {
        use super::*;
        use crate::tensors::Rng;
        use rand::RngCore;
        use proptest::prelude::*;

        proptest! {
            #[test]
            fn associativity_within_tolerance(seed in any::<u64>(), m in 1usize..6, k in 1usize..6, l in 1usize..6, n in 1usize..6) {
                let mut rng = Rng::new(seed);
                let a = uniform::<f32>(&mut rng, -1.0, 1.0, m, k).unwrap();
                let b = uniform::<f32>(&mut rng, -1.0, 1.0, k, l).unwrap();
                let c = uniform::<f32>(&mut rng, -1.0, 1.0, l, n).unwrap();
                let left = matmul(&matmul(&a, &b).unwrap(), &c).unwrap();
                let right = matmul(&a, &matmul(&b, &c).unwrap()).unwrap();
                // Induced infinity norm: maximum absolute row sum.
                let norm = |x: &Matrix<f32>| (0..x.rows())
                    .map(|r| x.row(r).iter().map(|v| v.abs()).sum::<f32>())
                    .fold(0.0f32, f32::max);
                let bound = 1e-4 * norm(&a) * norm(&b) * norm(&c);
                let diff = left.as_slice().iter().zip(right.as_slice())
                    .map(|(x, y)| (x - y).abs())
                    .fold(0.0f32, f32::max);
                prop_assert!(diff <= bound, "{diff} > {bound}");
            }

            #[test]
            fn equal_seeds_equal_streams(seed in any::<u64>()) {
                let mut a = Rng::new(seed);
                let mut b = Rng::new(seed);
                for _ in 0..16 {
                    prop_assert_eq!(a.next_u64(), b.next_u64());
                }
            }
        }
    }
}
