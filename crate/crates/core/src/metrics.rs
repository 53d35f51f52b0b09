//! Evaluation protocol: best least-squares affine fit to ground truth,
//! then NRMSE and SSIM.
//!
//! The fit removes the per-method scale and offset ambiguity (SAFT,
//! L-MBIR, and the network produce different physical units). NRMSE is
//! ||a x + b - g|| / ||g||. SSIM first maps both the fitted image and the
//! ground truth to [0, 1] with one shared linear map (joint min/max over
//! both images, the mat2gray-equivalent shared scale), then averages local
//! SSIM over all fully-contained Gaussian windows.

use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum MetricError {
    #[error("invalid metric params: {0}")]
    Config(String),
    #[error("shape mismatch: {0} vs {1} values")]
    Shape(usize, usize),
    #[error("ground truth has zero norm")]
    ZeroNorm,
    #[error("degenerate pair: both images constant but unequal")]
    Degenerate,
    #[error("image smaller than the SSIM window")]
    TooSmall,
}

/// SSIM window and stabilization constants (dynamic range L = 1 after the
/// shared [0, 1] mapping).
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MetricParams {
    /// Odd window side length.
    pub ssim_window: usize,
    pub ssim_sigma: f64,
    pub k1: f64,
    pub k2: f64,
}

impl Default for MetricParams {
    fn default() -> Self {
        MetricParams { ssim_window: 7, ssim_sigma: 1.5, k1: 0.01, k2: 0.03 }
    }
}

impl MetricParams {
    pub fn validate(&self) -> Result<(), MetricError> {
        if self.ssim_window < 3 || self.ssim_window.is_multiple_of(2) {
            return Err(MetricError::Config("ssim_window must be odd and >= 3".into()));
        }
        if !(self.ssim_sigma > 0.0) {
            return Err(MetricError::Config("ssim_sigma must be positive".into()));
        }
        if !(self.k1 > 0.0 && self.k2 > 0.0) {
            return Err(MetricError::Config("k1 and k2 must be positive".into()));
        }
        Ok(())
    }
}

/// Least-squares (a, b) minimizing ||a x + b - g||^2. A constant x is the
/// documented degenerate case: returns (0, mean(g)).
pub fn best_linear_fit(x: &[f64], g: &[f64]) -> Result<(f64, f64), MetricError> {
    if x.len() != g.len() {
        return Err(MetricError::Shape(x.len(), g.len()));
    }
    let n = x.len() as f64;
    let mx = x.iter().sum::<f64>() / n;
    let mg = g.iter().sum::<f64>() / n;
    if fit_is_degenerate(x) {
        return Ok((0.0, mg));
    }
    let mut cov = 0.0;
    let mut var = 0.0;
    for (&xv, &gv) in x.iter().zip(g) {
        cov += (xv - mx) * (gv - mg);
        var += (xv - mx) * (xv - mx);
    }
    if var == 0.0 {
        return Ok((0.0, mg));
    }
    let a = cov / var;
    Ok((a, mg - a * mx))
}

/// True when the fit degenerated (constant reconstruction).
pub fn fit_is_degenerate(x: &[f64]) -> bool {
    x.windows(2).all(|w| w[0] == w[1])
}

/// NRMSE after the affine fit: ||a x + b - g||_2 / ||g||_2.
pub fn nrmse(x: &[f64], g: &[f64]) -> Result<f64, MetricError> {
    let (a, b) = best_linear_fit(x, g)?;
    let gnorm = g.iter().map(|v| v * v).sum::<f64>().sqrt();
    if gnorm == 0.0 {
        return Err(MetricError::ZeroNorm);
    }
    let err = x
        .iter()
        .zip(g)
        .map(|(&xv, &gv)| {
            let r = a * xv + b - gv;
            r * r
        })
        .sum::<f64>()
        .sqrt();
    Ok(err / gnorm)
}

/// Normalized 1D Gaussian window of odd length `n`.
fn gaussian_window(n: usize, sigma: f64) -> Vec<f64> {
    let half = (n / 2) as f64;
    let w: Vec<f64> =
        (0..n).map(|i| (-((i as f64 - half).powi(2)) / (2.0 * sigma * sigma)).exp()).collect();
    let total: f64 = w.iter().sum();
    w.iter().map(|v| v / total).collect()
}

/// Weighted local sums of `f` over all fully-contained windows, separable
/// Gaussian passes: output is (rows - n + 1) x (cols - n + 1).
fn local_means(f: &[f64], rows: usize, cols: usize, w: &[f64]) -> Vec<f64> {
    let n = w.len();
    let out_cols = cols - n + 1;
    let out_rows = rows - n + 1;
    let mut h = vec![0.0; rows * out_cols];
    for r in 0..rows {
        for c in 0..out_cols {
            let mut acc = 0.0;
            for (j, &wj) in w.iter().enumerate() {
                acc += wj * f[r * cols + c + j];
            }
            h[r * out_cols + c] = acc;
        }
    }
    let mut out = vec![0.0; out_rows * out_cols];
    for r in 0..out_rows {
        for c in 0..out_cols {
            let mut acc = 0.0;
            for (i, &wi) in w.iter().enumerate() {
                acc += wi * h[(r + i) * out_cols + c];
            }
            out[r * out_cols + c] = acc;
        }
    }
    out
}

/// Mean local SSIM after the affine fit and the shared [0, 1] mapping.
pub fn ssim(
    x: &[f64],
    g: &[f64],
    rows: usize,
    cols: usize,
    params: &MetricParams,
) -> Result<f64, MetricError> {
    params.validate()?;
    if x.len() != g.len() {
        return Err(MetricError::Shape(x.len(), g.len()));
    }
    if x.len() != rows * cols {
        return Err(MetricError::Shape(x.len(), rows * cols));
    }
    if rows < params.ssim_window || cols < params.ssim_window {
        return Err(MetricError::TooSmall);
    }
    let (a, b) = best_linear_fit(x, g)?;
    let xr: Vec<f64> = x.iter().map(|&v| a * v + b).collect();
    // shared mat2gray scale: joint min/max over both images
    let (mut lo, mut hi) = (f64::INFINITY, f64::NEG_INFINITY);
    for &v in xr.iter().chain(g) {
        lo = lo.min(v);
        hi = hi.max(v);
    }
    if lo == hi {
        // both images constant; after the fit xr == mean(g) == g everywhere
        // only if the originals agreed
        return if xr == g { Ok(1.0) } else { Err(MetricError::Degenerate) };
    }
    let span = hi - lo;
    let xs: Vec<f64> = xr.iter().map(|&v| (v - lo) / span).collect();
    let gs: Vec<f64> = g.iter().map(|&v| (v - lo) / span).collect();

    let w = gaussian_window(params.ssim_window, params.ssim_sigma);
    let mu_x = local_means(&xs, rows, cols, &w);
    let mu_g = local_means(&gs, rows, cols, &w);
    let xx: Vec<f64> = xs.iter().map(|&v| v * v).collect();
    let gg: Vec<f64> = gs.iter().map(|&v| v * v).collect();
    let xg: Vec<f64> = xs.iter().zip(&gs).map(|(&p, &q)| p * q).collect();
    let m_xx = local_means(&xx, rows, cols, &w);
    let m_gg = local_means(&gg, rows, cols, &w);
    let m_xg = local_means(&xg, rows, cols, &w);

    let c1 = params.k1 * params.k1;
    let c2 = params.k2 * params.k2;
    let mut total = 0.0;
    for k in 0..mu_x.len() {
        let (mx, mg) = (mu_x[k], mu_g[k]);
        let vx = m_xx[k] - mx * mx;
        let vg = m_gg[k] - mg * mg;
        let cxg = m_xg[k] - mx * mg;
        total += (2.0 * mx * mg + c1) * (2.0 * cxg + c2)
            / ((mx * mx + mg * mg + c1) * (vx + vg + c2));
    }
    Ok(total / mu_x.len() as f64)
}

/// Per-sample metrics for one method.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SampleMetrics {
    pub index: usize,
    pub nrmse: f64,
    pub ssim: f64,
    pub fit_a: f64,
    pub fit_b: f64,
    pub degenerate: bool,
}

/// Aggregate for one method over the evaluated split.
#[derive(Debug, Clone, Default, Serialize, Deserialize)]
pub struct MethodReport {
    pub samples: Vec<SampleMetrics>,
    pub mean_nrmse: f64,
    pub mean_ssim: f64,
}

impl MethodReport {
    pub fn finalize(&mut self) {
        let n = self.samples.len().max(1) as f64;
        self.mean_nrmse = self.samples.iter().map(|s| s.nrmse).sum::<f64>() / n;
        self.mean_ssim = self.samples.iter().map(|s| s.ssim).sum::<f64>() / n;
    }
}

/// Table-1-style evaluation across methods on one split.
#[derive(Debug, Clone, Default, Serialize, Deserialize)]
pub struct EvalReport {
    pub config_hash: String,
    pub split: String,
    pub methods: BTreeMap<String, MethodReport>,
}

impl EvalReport {
    pub fn push(&mut self, method: &str, sample: SampleMetrics) {
        self.methods.entry(method.to_string()).or_default().samples.push(sample);
    }

    pub fn finalize(&mut self) {
        for m in self.methods.values_mut() {
            m.finalize();
        }
    }

    /// CSV: method,index,nrmse,ssim,fit_a,fit_b,degenerate with one
    /// summary row per method (index column "mean").
    pub fn to_csv(&self) -> String {
        let mut out = String::from("method,index,nrmse,ssim,fit_a,fit_b,degenerate\n");
        for (name, m) in &self.methods {
            for s in &m.samples {
                out.push_str(&format!(
                    "{},{},{},{},{},{},{}\n",
                    name, s.index, s.nrmse, s.ssim, s.fit_a, s.fit_b, s.degenerate
                ));
            }
            out.push_str(&format!("{},mean,{},{},,,\n", name, m.mean_nrmse, m.mean_ssim));
        }
        out
    }

    /// Human-readable summary table.
    pub fn summary(&self) -> String {
        let mut out = format!("split: {} (config {})\n", self.split, self.config_hash);
        out.push_str(&format!("{:<10} {:>6} {:>12} {:>12}\n", "method", "n", "mean NRMSE", "mean SSIM"));
        for (name, m) in &self.methods {
            out.push_str(&format!(
                "{:<10} {:>6} {:>12.4} {:>12.4}\n",
                name,
                m.samples.len(),
                m.mean_nrmse,
                m.mean_ssim
            ));
        }
        out
    }
}
