//! Classical reconstructions: SAFT delay-and-sum and L-MBIR.
//!
//! SAFT averages, for every pixel, the recorded traces sampled at the
//! pixel's two-leg travel time (shifted by half the pulse duration so the
//! sample lands on the center of the echo rather than its onset).
//!
//! L-MBIR minimizes 1/2 ||y - Av||^2 + R(v) where R is a QGGMRF
//! (q-generalized Gaussian Markov random field) prior over the
//! 8-neighborhood, solved by Polak-Ribiere nonlinear conjugate gradient
//! with Armijo backtracking. The cost sequence is nonincreasing.

use crate::geom::{transducer_positions, ArrayGeometry, GeomError, ImageGrid, Pulse};
use crate::linmodel::{delay, LinError, SystemMatrix};
use crate::rf::RfData;
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum ReconError {
    #[error("geometry: {0}")]
    Geometry(#[from] GeomError),
    #[error("linear model: {0}")]
    Linear(#[from] LinError),
    #[error("invalid prior: {0}")]
    Prior(String),
    #[error("invalid solver options: {0}")]
    Opts(String),
    #[error("dimension mismatch: expected {expected}, got {got}")]
    Dimension { expected: usize, got: usize },
}

/// QGGMRF prior parameters. The potential applied to each neighbor
/// difference `d` is
///
///   rho(d) = (|d|^p / (p sigma^p)) * b / (1 + b),   b = |d / (T sigma)|^(q-p)
///
/// which is quadratic near 0 and approaches |d|^p / (p sigma^p) for large
/// |d| (edge preserving for p close to 1).
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PriorParams {
    /// Shape exponent, 1 < p <= 2.
    pub p: f64,
    /// Transition exponent, fixed 2 by default; p < q required here.
    pub q: f64,
    /// Transition threshold in units of sigma_x.
    pub t: f64,
    /// Regularization scale in image units; None = auto, resolved to 2% of
    /// the dynamic range of the back-projection A^T y.
    pub sigma_x: Option<f64>,
    /// Global prior weight; 0 disables the prior.
    pub weight: f64,
}

impl Default for PriorParams {
    fn default() -> Self {
        PriorParams { p: 1.2, q: 2.0, t: 1.0, sigma_x: None, weight: 1.0 }
    }
}

impl PriorParams {
    pub fn validate(&self) -> Result<(), ReconError> {
        let err = |m: &str| Err(ReconError::Prior(m.into()));
        if !(self.p > 1.0 && self.p <= 2.0) {
            return err("p must satisfy 1 < p <= 2");
        }
        if !(self.q > self.p && self.q <= 2.0) {
            return err("q must satisfy p < q <= 2");
        }
        if !(self.t > 0.0) {
            return err("t must be positive");
        }
        if let Some(s) = self.sigma_x {
            if !(s > 0.0) {
                return err("sigma_x must be positive when given");
            }
        }
        if !(self.weight >= 0.0) {
            return err("weight must be nonnegative");
        }
        Ok(())
    }

    /// Resolve the auto sigma_x against a back-projection.
    pub fn resolved_sigma(&self, backprojection: &[f64]) -> f64 {
        match self.sigma_x {
            Some(s) => s,
            None => {
                let (mut lo, mut hi) = (f64::INFINITY, f64::NEG_INFINITY);
                for &v in backprojection {
                    lo = lo.min(v);
                    hi = hi.max(v);
                }
                let range = hi - lo;
                if range > 0.0 && range.is_finite() {
                    0.02 * range
                } else {
                    1.0
                }
            }
        }
    }
}

/// Normalized 8-neighborhood weights: axial 1 and diagonal 1/sqrt(2),
/// scaled so the 8 weights around a pixel sum to 1.
pub fn neighbor_weights() -> (f64, f64) {
    let norm = 4.0 + 4.0 / std::f64::consts::SQRT_2;
    (1.0 / norm, 1.0 / (std::f64::consts::SQRT_2 * norm))
}

/// QGGMRF potential rho(delta) with the given scale.
pub fn prior_potential(delta: f64, prior: &PriorParams, sigma_x: f64) -> f64 {
    let u = delta.abs();
    if u == 0.0 {
        return 0.0;
    }
    let b = (u / (prior.t * sigma_x)).powf(prior.q - prior.p);
    u.powf(prior.p) / (prior.p * sigma_x.powf(prior.p)) * (b / (1.0 + b))
}

/// Derivative rho'(delta), exact closed form:
/// rho'(d) = sign(d) |d|^(p-1) / sigma^p * b (q/p + b) / (1+b)^2.
pub fn prior_derivative(delta: f64, prior: &PriorParams, sigma_x: f64) -> f64 {
    let u = delta.abs();
    if u == 0.0 {
        return 0.0;
    }
    let b = (u / (prior.t * sigma_x)).powf(prior.q - prior.p);
    let mag = u.powf(prior.p - 1.0) / sigma_x.powf(prior.p) * b * (prior.q / prior.p + b)
        / ((1.0 + b) * (1.0 + b));
    mag * delta.signum()
}

/// Unordered 8-neighbor pairs of a rows x cols grid with their weights:
/// right, down, down-right, down-left offsets cover each pair once.
fn neighbor_pairs(rows: usize, cols: usize) -> Vec<(usize, usize, f64)> {
    let (wa, wd) = neighbor_weights();
    let offsets = [(0isize, 1isize, wa), (1, 0, wa), (1, 1, wd), (1, -1, wd)];
    let mut pairs = Vec::with_capacity(rows * cols * 4);
    for s in 0..rows * cols {
        let (r, c) = (s / cols, s % cols);
        for &(dr, dc, w) in &offsets {
            let (nr, nc) = (r as isize + dr, c as isize + dc);
            if nr >= 0 && (nr as usize) < rows && nc >= 0 && (nc as usize) < cols {
                pairs.push((s, nr as usize * cols + nc as usize, w));
            }
        }
    }
    pairs
}

/// Full cost 1/2 ||y - Av||^2 + weight * sum_pairs w_sr rho(v_s - v_r).
/// `sigma_x` must already be resolved.
pub fn lmbir_cost(
    v: &[f64],
    y: &[f64],
    a: &SystemMatrix,
    prior: &PriorParams,
    sigma_x: f64,
) -> Result<f64, ReconError> {
    if v.len() != a.n_cols {
        return Err(ReconError::Dimension { expected: a.n_cols, got: v.len() });
    }
    if y.len() != a.n_rows {
        return Err(ReconError::Dimension { expected: a.n_rows, got: y.len() });
    }
    let av = a.forward_apply(v)?;
    let data: f64 = av.iter().zip(y).map(|(p, q)| (q - p) * (q - p)).sum::<f64>() / 2.0;
    let mut reg = 0.0;
    if prior.weight > 0.0 {
        for (s, r, w) in neighbor_pairs(a.grid.rows, a.grid.cols) {
            reg += w * prior_potential(v[s] - v[r], prior, sigma_x);
        }
    }
    Ok(data + prior.weight * reg)
}

/// Gradient A^T (Av - y) + weight * grad R(v).
pub fn lmbir_gradient(
    v: &[f64],
    y: &[f64],
    a: &SystemMatrix,
    prior: &PriorParams,
    sigma_x: f64,
) -> Result<Vec<f64>, ReconError> {
    if v.len() != a.n_cols {
        return Err(ReconError::Dimension { expected: a.n_cols, got: v.len() });
    }
    if y.len() != a.n_rows {
        return Err(ReconError::Dimension { expected: a.n_rows, got: y.len() });
    }
    let mut residual = a.forward_apply(v)?;
    for (rv, &yv) in residual.iter_mut().zip(y) {
        *rv -= yv;
    }
    let mut g = a.adjoint_apply(&residual)?;
    if prior.weight > 0.0 {
        for (s, r, w) in neighbor_pairs(a.grid.rows, a.grid.cols) {
            let d = prior.weight * w * prior_derivative(v[s] - v[r], prior, sigma_x);
            g[s] += d;
            g[r] -= d;
        }
    }
    Ok(g)
}

/// Units of a reconstructed image.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Units {
    PressureLike,
    Reflectivity,
    SpeedOfSound,
}

/// A reconstruction on an ImageGrid.
#[derive(Debug, Clone)]
pub struct ReconImage {
    pub rows: usize,
    pub cols: usize,
    /// Row-major values.
    pub values: Vec<f64>,
    pub units: Units,
    /// Method name plus configuration hash, for provenance metadata.
    pub provenance: String,
}

/// Solver options for lmbir_reconstruct.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SolveOpts {
    pub max_iters: usize,
    /// Stop when the relative cost decrease falls below this.
    pub rel_cost_tol: f64,
}

impl Default for SolveOpts {
    fn default() -> Self {
        SolveOpts { max_iters: 200, rel_cost_tol: 1e-6 }
    }
}

impl SolveOpts {
    pub fn validate(&self) -> Result<(), ReconError> {
        if self.max_iters == 0 {
            return Err(ReconError::Opts("max_iters must be at least 1".into()));
        }
        if !(self.rel_cost_tol > 0.0) {
            return Err(ReconError::Opts("rel_cost_tol must be positive".into()));
        }
        Ok(())
    }
}

/// Convergence record returned alongside the L-MBIR image.
#[derive(Debug, Clone)]
pub struct SolveReport {
    pub iters: usize,
    pub costs: Vec<f64>,
    pub sigma_x: f64,
    /// Set when the line search stalled and the best iterate was returned.
    pub warning: Option<String>,
}

/// SAFT delay-and-sum. For pixel nu the image value is the mean over valid
/// pairs (i != j) of trace_ij linearly interpolated at
/// (tau_ij(nu) + pulse.duration/2) * fs; the half-duration shift centers
/// the sample on the echo. Pairs whose shifted delay falls outside the
/// record window are excluded; pixels with no valid pair are 0.
pub fn saft_reconstruct(
    rf: &RfData,
    geometry: &ArrayGeometry,
    grid: &ImageGrid,
    pulse: &Pulse,
    c_ref: f64,
) -> Result<ReconImage, ReconError> {
    if !(c_ref > 0.0) {
        return Err(ReconError::Opts("c_ref must be positive".into()));
    }
    let td = transducer_positions(geometry, grid)?;
    let n = geometry.n_samples;
    let mut values = vec![0.0; grid.n_pixels()];
    for r in 0..grid.rows {
        for c in 0..grid.cols {
            let p = grid.pixel_center(r, c);
            let mut acc = 0.0;
            let mut n_valid = 0usize;
            for &(i, j) in &RfData::pair_order(geometry.n_transducers) {
                let tf = (delay(td[i], td[j], p, c_ref) + pulse.duration / 2.0) * geometry.fs;
                let k = tf.floor();
                if k < 0.0 || k + 1.0 > (n - 1) as f64 {
                    continue;
                }
                let k = k as usize;
                let frac = tf - tf.floor();
                let trace = rf.trace(i, j);
                acc += trace[k] * (1.0 - frac) + trace[k + 1] * frac;
                n_valid += 1;
            }
            if n_valid > 0 {
                values[r * grid.cols + c] = acc / n_valid as f64;
            }
        }
    }
    Ok(ReconImage {
        rows: grid.rows,
        cols: grid.cols,
        values,
        units: Units::PressureLike,
        provenance: "saft".into(),
    })
}

/// L-MBIR: nonlinear conjugate gradient (Polak-Ribiere with restart) with
/// Armijo backtracking from init 0. Returns the reconstruction in
/// reflectivity units plus the convergence report.
pub fn lmbir_reconstruct(
    y: &[f64],
    a: &SystemMatrix,
    prior: &PriorParams,
    opts: &SolveOpts,
) -> Result<(ReconImage, SolveReport), ReconError> {
    prior.validate()?;
    opts.validate()?;
    if y.len() != a.n_rows {
        return Err(ReconError::Dimension { expected: a.n_rows, got: y.len() });
    }
    let sigma_x = prior.resolved_sigma(&a.adjoint_apply(y)?);
    let dot = |x: &[f64], z: &[f64]| x.iter().zip(z).map(|(p, q)| p * q).sum::<f64>();

    let mut v = vec![0.0; a.n_cols];
    let mut cost = lmbir_cost(&v, y, a, prior, sigma_x)?;
    let mut costs = vec![cost];
    let mut g = lmbir_gradient(&v, y, a, prior, sigma_x)?;
    let mut d: Vec<f64> = g.iter().map(|x| -x).collect();
    let mut warning = None;
    let mut iters = 0;

    for _ in 0..opts.max_iters {
        iters += 1;
        let gg = dot(&g, &g);
        if gg == 0.0 {
            break;
        }
        // initial step: exact minimizer of the quadratic data term along d
        let ad = a.forward_apply(&d)?;
        let dad = dot(&ad, &ad);
        let slope = dot(&g, &d); // negative for a descent direction
        let mut t = if dad > 0.0 { -slope / dad * 2.0 } else { 1.0 };
        if !(t > 0.0) {
            t = 1.0;
        }
        // Armijo backtracking
        let c1 = 1e-4;
        let mut accepted = None;
        for _ in 0..40 {
            let trial: Vec<f64> = v.iter().zip(&d).map(|(x, dx)| x + t * dx).collect();
            let trial_cost = lmbir_cost(&trial, y, a, prior, sigma_x)?;
            if trial_cost <= cost + c1 * t * slope {
                accepted = Some((trial, trial_cost));
                break;
            }
            t /= 2.0;
        }
        let Some((new_v, new_cost)) = accepted else {
            warning = Some("line search stalled; returning best iterate".into());
            break;
        };
        let decrease = cost - new_cost;
        v = new_v;
        cost = new_cost;
        costs.push(cost);
        if decrease <= opts.rel_cost_tol * cost.abs() {
            break;
        }
        let g_new = lmbir_gradient(&v, y, a, prior, sigma_x)?;
        let beta =
            ((dot(&g_new, &g_new) - dot(&g_new, &g)) / gg).max(0.0);
        for k in 0..d.len() {
            d[k] = -g_new[k] + beta * d[k];
        }
        g = g_new;
        if dot(&d, &g) >= 0.0 {
            // restart on loss of descent
            for k in 0..d.len() {
                d[k] = -g[k];
            }
        }
    }
    let image = ReconImage {
        rows: a.grid.rows,
        cols: a.grid.cols,
        values: v,
        units: Units::Reflectivity,
        provenance: "lmbir".into(),
    };
    Ok((image, SolveReport { iters, costs, sigma_x, warning }))
}
