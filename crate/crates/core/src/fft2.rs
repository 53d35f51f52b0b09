//! 2D FFT helpers for the pseudospectral solver.
//!
//! All solver fields are real, so transforms are packed in pairs: the FFT of
//! `a + i*b` carries the spectra of both `a` and `b`, recovered with the
//! Hermitian split. Inverse transforms pack the same way: if two spectra
//! each have Hermitian symmetry, one complex inverse FFT returns one real
//! result in the real part and the other in the imaginary part.

use num_traits::{Float, FloatConst};
use rustfft::num_complex::Complex;
use rustfft::{Fft, FftNum, FftPlanner};
use std::sync::Arc;

/// Scalar type the solver runs in (f32 or f64).
pub trait Real:
    FftNum + Float + FloatConst + Default + std::iter::Sum<Self> + PartialOrd + 'static
{
    fn of(v: f64) -> Self;
    fn dbl(self) -> f64;
}

impl Real for f64 {
    fn of(v: f64) -> Self {
        v
    }
    fn dbl(self) -> f64 {
        self
    }
}

impl Real for f32 {
    fn of(v: f64) -> Self {
        v as f32
    }
    fn dbl(self) -> f64 {
        self as f64
    }
}

/// Planned 2D FFT over row-major `rows x cols` complex buffers.
pub struct Fft2<S: Real> {
    pub rows: usize,
    pub cols: usize,
    row_fwd: Arc<dyn Fft<S>>,
    row_inv: Arc<dyn Fft<S>>,
    col_fwd: Arc<dyn Fft<S>>,
    col_inv: Arc<dyn Fft<S>>,
    scratch: Vec<Complex<S>>,
    transposed: Vec<Complex<S>>,
}

impl<S: Real> Fft2<S> {
    pub fn new(rows: usize, cols: usize) -> Self {
        let mut planner = FftPlanner::new();
        let row_fwd = planner.plan_fft_forward(cols);
        let row_inv = planner.plan_fft_inverse(cols);
        let col_fwd = planner.plan_fft_forward(rows);
        let col_inv = planner.plan_fft_inverse(rows);
        let scratch_len = row_fwd
            .get_inplace_scratch_len()
            .max(row_inv.get_inplace_scratch_len())
            .max(col_fwd.get_inplace_scratch_len())
            .max(col_inv.get_inplace_scratch_len());
        Fft2 {
            rows,
            cols,
            row_fwd,
            row_inv,
            col_fwd,
            col_inv,
            scratch: vec![Complex::default(); scratch_len],
            transposed: vec![Complex::default(); rows * cols],
        }
    }

    pub fn len(&self) -> usize {
        self.rows * self.cols
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn transform(&mut self, z: &mut [Complex<S>], forward: bool) {
        assert_eq!(z.len(), self.rows * self.cols);
        let (row_fft, col_fft) = if forward {
            (&self.row_fwd, &self.col_fwd)
        } else {
            (&self.row_inv, &self.col_inv)
        };
        for row in z.chunks_exact_mut(self.cols) {
            row_fft.process_with_scratch(row, &mut self.scratch);
        }
        transpose(z, &mut self.transposed, self.rows, self.cols);
        for col in self.transposed.chunks_exact_mut(self.rows) {
            col_fft.process_with_scratch(col, &mut self.scratch);
        }
        transpose(&self.transposed, z, self.cols, self.rows);
    }

    /// Unnormalized forward 2D FFT, in place.
    pub fn forward(&mut self, z: &mut [Complex<S>]) {
        self.transform(z, true);
    }

    /// Inverse 2D FFT, in place, scaled by 1/(rows*cols).
    pub fn inverse(&mut self, z: &mut [Complex<S>]) {
        self.transform(z, false);
        let scale = S::of(1.0) / S::of((self.rows * self.cols) as f64);
        for v in z.iter_mut() {
            *v = *v * scale;
        }
    }

    /// Index of -k for each flattened spectral index.
    pub fn negation_map(&self) -> Vec<u32> {
        let (rows, cols) = (self.rows, self.cols);
        let mut map = vec![0u32; rows * cols];
        for r in 0..rows {
            let nr = if r == 0 { 0 } else { rows - r };
            for c in 0..cols {
                let nc = if c == 0 { 0 } else { cols - c };
                map[r * cols + c] = (nr * cols + nc) as u32;
            }
        }
        map
    }
}

/// `out[c][r] = z[r][c]` for row-major layouts.
fn transpose<S: Copy + Default>(z: &[S], out: &mut [S], rows: usize, cols: usize) {
    const B: usize = 32;
    for rb in (0..rows).step_by(B) {
        for cb in (0..cols).step_by(B) {
            for r in rb..(rb + B).min(rows) {
                for c in cb..(cb + B).min(cols) {
                    out[c * rows + r] = z[r * cols + c];
                }
            }
        }
    }
}

/// Pack two real fields into one complex buffer, `out = a + i*b`.
pub fn pack<S: Real>(a: &[S], b: &[S], out: &mut [Complex<S>]) {
    for ((o, &x), &y) in out.iter_mut().zip(a).zip(b) {
        *o = Complex::new(x, y);
    }
}

/// Split real/imaginary parts back out of a packed buffer.
pub fn unpack<S: Real>(z: &[Complex<S>], a: &mut [S], b: &mut [S]) {
    for ((&v, x), y) in z.iter().zip(a.iter_mut()).zip(b.iter_mut()) {
        *x = v.re;
        *y = v.im;
    }
}

/// Given the spectrum `z` of a packed pair `a + i*b`, apply multiplier `ma`
/// to the spectrum of `a` and `mb` to the spectrum of `b`, and repack so a
/// single inverse FFT returns the two filtered real fields.
///
/// `neg` is the -k index map from [`Fft2::negation_map`]. Both multipliers
/// must satisfy `m(-k) = conj(m(k))` so the filtered spectra stay Hermitian.
pub fn hermitian_filter_pair<S: Real>(
    z: &mut [Complex<S>],
    ma: &[Complex<S>],
    mb: &[Complex<S>],
    neg: &[u32],
) {
    let half = S::of(0.5);
    for idx in 0..z.len() {
        let ridx = neg[idx] as usize;
        if ridx < idx {
            continue;
        }
        let zk = z[idx];
        let zr = z[ridx].conj();
        // spectra of the two real fields at k
        let ak = (zk + zr) * half;
        let bk = Complex::new(zk.im - zr.im, zr.re - zk.re) * half; // (zk - zr) / (2i)
        let wk = ma[idx] * ak + Complex::new(S::of(0.0), S::of(1.0)) * (mb[idx] * bk);
        if ridx == idx {
            z[idx] = wk;
        } else {
            // values at -k follow from Hermitian symmetry of each product
            let am = ma[ridx] * ak.conj();
            let bm = mb[ridx] * bk.conj();
            z[idx] = wk;
            z[ridx] = am + Complex::new(S::of(0.0), S::of(1.0)) * bm;
        }
    }
}
