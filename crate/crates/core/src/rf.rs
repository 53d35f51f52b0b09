//! Received time-series container and direct-arrival removal.
//!
//! `RfData` holds one pressure trace per ordered (transmitter, receiver)
//! pair, including the i == i diagonal, which is stored but excluded from
//! reconstruction. The vectorization order used for system-matrix application
//! is pair-major, lexicographic (i, j) with i != j, then time; this order
//! is part of the on-disk contract.

use crate::geom::ArrayGeometry;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum RfError {
    #[error("acquisition mismatch: {0}")]
    ShapeMismatch(String),
}

/// Per transmit-receive pair received pressure time series.
#[derive(Debug, Clone, PartialEq)]
pub struct RfData {
    /// Flat [transmitter][receiver][time] samples.
    traces: Vec<f64>,
    pub geometry: ArrayGeometry,
    pub fs: f64,
    pub n_samples: usize,
    pub direct_arrival_removed: bool,
}

impl RfData {
    pub fn zeros(geometry: &ArrayGeometry) -> Self {
        let n = geometry.n_transducers;
        RfData {
            traces: vec![0.0; n * n * geometry.n_samples],
            geometry: geometry.clone(),
            fs: geometry.fs,
            n_samples: geometry.n_samples,
            direct_arrival_removed: false,
        }
    }

    pub fn n_transducers(&self) -> usize {
        self.geometry.n_transducers
    }

    pub fn trace(&self, tx: usize, rx: usize) -> &[f64] {
        let n = self.n_transducers();
        assert!(tx < n && rx < n);
        let start = (tx * n + rx) * self.n_samples;
        &self.traces[start..start + self.n_samples]
    }

    pub fn trace_mut(&mut self, tx: usize, rx: usize) -> &mut [f64] {
        let n = self.n_transducers();
        assert!(tx < n && rx < n);
        let start = (tx * n + rx) * self.n_samples;
        &mut self.traces[start..start + self.n_samples]
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.traces
    }

    pub fn as_mut_slice(&mut self) -> &mut [f64] {
        &mut self.traces
    }

    /// Rebuild from a flat [n][n][T] buffer.
    pub fn from_flat(
        geometry: &ArrayGeometry,
        traces: Vec<f64>,
        direct_arrival_removed: bool,
    ) -> Result<Self, RfError> {
        let n = geometry.n_transducers;
        if traces.len() != n * n * geometry.n_samples {
            return Err(RfError::ShapeMismatch(format!(
                "expected {} samples, got {}",
                n * n * geometry.n_samples,
                traces.len()
            )));
        }
        Ok(RfData {
            traces,
            geometry: geometry.clone(),
            fs: geometry.fs,
            n_samples: geometry.n_samples,
            direct_arrival_removed,
        })
    }

    /// Measurement vector in the documented order: pair-major over
    /// lexicographic (i, j) with i != j, then time. Length n(n-1) * T.
    pub fn vectorize(&self) -> Vec<f64> {
        let n = self.n_transducers();
        let mut y = Vec::with_capacity(self.geometry.n_pairs() * self.n_samples);
        for i in 0..n {
            for j in 0..n {
                if i != j {
                    y.extend_from_slice(self.trace(i, j));
                }
            }
        }
        y
    }

    /// Ordered (tx, rx) pairs in the vectorization order.
    pub fn pair_order(n: usize) -> Vec<(usize, usize)> {
        let mut pairs = Vec::with_capacity(n * (n - 1));
        for i in 0..n {
            for j in 0..n {
                if i != j {
                    pairs.push((i, j));
                }
            }
        }
        pairs
    }

    fn same_acquisition(&self, other: &RfData) -> bool {
        self.n_transducers() == other.n_transducers()
            && self.n_samples == other.n_samples
            && self.fs == other.fs
    }
}

/// Subtract a reference acquisition (the simulated homogeneous background)
/// from `rf`, eliminating the direct arrival term of the measurement model.
pub fn remove_direct_arrival(rf: &RfData, reference: &RfData) -> Result<RfData, RfError> {
    if !rf.same_acquisition(reference) {
        return Err(RfError::ShapeMismatch(format!(
            "rf ({} x {} @ {} Hz) vs reference ({} x {} @ {} Hz)",
            rf.n_transducers(),
            rf.n_samples,
            rf.fs,
            reference.n_transducers(),
            reference.n_samples,
            reference.fs
        )));
    }
    let mut out = rf.clone();
    for (o, r) in out.traces.iter_mut().zip(reference.traces.iter()) {
        *o -= *r;
    }
    out.direct_arrival_removed = true;
    Ok(out)
}

/// Magnitude of the analytic signal (FFT Hilbert method, zero-padded to a
/// power of two). The envelope peak marks pulse arrival independent of the
/// carrier phase.
pub fn envelope(trace: &[f64]) -> Vec<f64> {
    use rustfft::num_complex::Complex;
    let n = trace.len();
    if n == 0 {
        return Vec::new();
    }
    let m = n.next_power_of_two().max(2);
    let mut z: Vec<Complex<f64>> = trace
        .iter()
        .map(|&v| Complex::new(v, 0.0))
        .chain(std::iter::repeat(Complex::new(0.0, 0.0)))
        .take(m)
        .collect();
    let mut planner = rustfft::FftPlanner::new();
    planner.plan_fft_forward(m).process(&mut z);
    // analytic signal: keep DC and Nyquist, double positive, zero negative
    for (k, v) in z.iter_mut().enumerate() {
        if k == 0 || (m.is_multiple_of(2) && k == m / 2) {
            continue;
        } else if k < m / 2 + m % 2 {
            *v *= 2.0;
        } else {
            *v = Complex::new(0.0, 0.0);
        }
    }
    planner.plan_fft_inverse(m).process(&mut z);
    z.iter().take(n).map(|v| v.norm() / m as f64).collect()
}
