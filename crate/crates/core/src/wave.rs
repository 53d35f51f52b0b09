//! k-space pseudospectral acoustic solver.
//!
//! Integrates the first-order system
//!   du/dt = -(1/rho0) grad p
//!   drho/dt = -rho0 div u - u . grad rho0
//!   p = c0^2 (rho + d . grad rho0 - L rho)
//! on a staggered spatial grid with spectral derivatives. The split
//! densities rhox + rhoz accumulate the heterogeneity term d . grad rho0
//! automatically (drho~/dt = -rho0 div u with rho~ = rho + d . grad rho0),
//! so the equation of state reads p = c0^2 (rhox + rhoz - L rho~).
//!
//! The power-law absorption operator
//!   L = -2 a0 c^(y-1) d/dt (-lap)^(y/2-1) + 2 a0 c^y tan(pi y/2) (-lap)^((y+1)/2-1)
//! is realized with spectral multipliers |k|^(y-2) and |k|^(y-1), with d/dt
//! replaced by -rho0 div u from the mass equation.
//!
//! Spectral derivatives carry the k-space correction kappa =
//! sinc(c_ref |k| dt / 2), which makes time stepping exact for homogeneous
//! media at c_ref and unconditionally stable when c_ref >= max c0. The
//! domain is padded by a quartic-profile PML (split-field multipliers) plus
//! rounding to 7-smooth FFT sizes; pml_width = 0 selects a bare periodic
//! domain for physics tests.

use crate::fft2::{self, Fft2, Real};
use crate::geom::{transducer_positions, ArrayGeometry, ImageGrid, Pulse};
use crate::rf::RfData;
use rustfft::num_complex::Complex;
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum WaveError {
    #[error("invalid simulation config: {0}")]
    Config(String),
    #[error("non-finite field detected at step {step} (unstable simulation)")]
    Unstable { step: usize },
    #[error("transmitter {tx}: {source}")]
    Transmitter { tx: usize, source: Box<WaveError> },
}

/// Arithmetic width of the field updates.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Precision {
    F32,
    F64,
}

/// Solver options; medium-independent.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SimConfig {
    /// Courant number, 0 < cfl <= 0.5.
    pub cfl: f64,
    /// PML width in cells per side; >= 8, or 0 for a periodic test domain.
    pub pml_width: usize,
    /// PML strength in Np; absorption profile alpha(d) = pml_alpha * c_ref/dx * d^4.
    pub pml_alpha: f64,
    /// Simulation cells per image pixel per axis.
    pub refine: usize,
    /// Recording sample rate; defaults to the array rate.
    pub record_fs: Option<f64>,
    /// Simulated span; defaults to n_samples / record_fs.
    pub duration: Option<f64>,
    /// Ambient density assigned to every material (kg/m^3).
    pub rho0: f64,
    /// Absorption coefficient in dB/(MHz^y cm), applied to every material.
    pub alpha0_db: f64,
    /// Absorption power-law exponent; 0 < y < 3, y != 1.
    pub y_exp: f64,
    /// Reference speed for dt and the k-space correction. Defaults to the
    /// medium maximum; a dataset fixes it globally so every phantom and the
    /// background reference share identical operators.
    pub c_max: Option<f64>,
    pub precision: Precision,
}

impl Default for SimConfig {
    fn default() -> Self {
        SimConfig {
            cfl: 0.3,
            pml_width: 10,
            pml_alpha: 2.0,
            refine: 2,
            record_fs: None,
            duration: None,
            rho0: 2400.0,
            alpha0_db: 0.5,
            y_exp: 1.5,
            c_max: None,
            precision: Precision::F64,
        }
    }
}

impl SimConfig {
    pub fn validate(&self) -> Result<(), WaveError> {
        let err = |m: &str| Err(WaveError::Config(m.into()));
        if !(self.cfl > 0.0 && self.cfl <= 0.5) {
            return err("cfl must be in (0, 0.5]");
        }
        if self.pml_width != 0 && self.pml_width < 8 {
            return err("pml_width must be >= 8 (or 0 for periodic test mode)");
        }
        if self.refine < 1 {
            return err("refine must be >= 1");
        }
        if !(self.rho0 > 0.0) {
            return err("rho0 must be positive");
        }
        if self.alpha0_db < 0.0 {
            return err("alpha0_db must be nonnegative");
        }
        if !(self.y_exp > 0.0 && self.y_exp < 3.0) || self.y_exp == 1.0 {
            return err("y_exp must be in (0, 3) and != 1 (tan singularity)");
        }
        if let Some(c) = self.c_max {
            if !(c > 0.0) {
                return err("c_max must be positive");
            }
        }
        if let Some(f) = self.record_fs {
            if !(f > 0.0) {
                return err("record_fs must be positive");
            }
        }
        if let Some(d) = self.duration {
            if !(d > 0.0) {
                return err("duration must be positive");
            }
        }
        Ok(())
    }
}

/// Material fields on the refined simulation grid (rows*refine x cols*refine).
#[derive(Debug, Clone)]
pub struct MediumFields {
    pub rows: usize,
    pub cols: usize,
    pub c0: Vec<f64>,
    pub rho0: Vec<f64>,
    pub alpha0_db: Vec<f64>,
    pub y_exp: f64,
}

impl MediumFields {
    pub fn homogeneous(
        rows: usize,
        cols: usize,
        c0: f64,
        rho0: f64,
        alpha0_db: f64,
        y_exp: f64,
    ) -> MediumFields {
        MediumFields {
            rows,
            cols,
            c0: vec![c0; rows * cols],
            rho0: vec![rho0; rows * cols],
            alpha0_db: vec![alpha0_db; rows * cols],
            y_exp,
        }
    }

    pub fn validate(&self) -> Result<(), WaveError> {
        let n = self.rows * self.cols;
        if self.c0.len() != n || self.rho0.len() != n || self.alpha0_db.len() != n {
            return Err(WaveError::Config("medium field shape mismatch".into()));
        }
        if self.c0.iter().any(|&c| !(c > 0.0)) || self.rho0.iter().any(|&r| !(r > 0.0)) {
            return Err(WaveError::Config("c0 and rho0 must be positive".into()));
        }
        if self.alpha0_db.iter().any(|&a| !(a >= 0.0)) {
            return Err(WaveError::Config("alpha0 must be nonnegative".into()));
        }
        if !(self.y_exp > 0.0 && self.y_exp < 3.0) || self.y_exp == 1.0 {
            return Err(WaveError::Config("y_exp must be in (0, 3) and != 1".into()));
        }
        Ok(())
    }

    pub fn max_speed(&self) -> f64 {
        self.c0.iter().cloned().fold(0.0, f64::max)
    }

    pub fn is_lossless(&self) -> bool {
        self.alpha0_db.iter().all(|&a| a == 0.0)
    }
}

/// dB/(MHz^y cm) to Np (rad/s)^-y / m, as used by power-law absorption.
pub fn db_to_neper(alpha_db: f64, y_exp: f64) -> f64 {
    100.0 * alpha_db * (1e-6 / (2.0 * std::f64::consts::PI)).powf(y_exp)
        / (20.0 / std::f64::consts::LN_10)
}

/// Smallest integer >= n whose prime factors are all <= 7.
pub(crate) fn next_smooth7(n: usize) -> usize {
    let mut m = n.max(1);
    loop {
        let mut r = m;
        for p in [2usize, 3, 5, 7] {
            while r.is_multiple_of(p) {
                r /= p;
            }
        }
        if r == 1 {
            return m;
        }
        m += 1;
    }
}

/// Padded-domain geometry: interior block plus PML collar per side.
#[derive(Debug, Clone)]
pub struct PadSpec {
    pub nz: usize,
    pub nx: usize,
    pub dx: f64,
    /// cells of PML at the low/high edge of each axis (0 = periodic edge)
    pub pml_lo_z: usize,
    pub pml_hi_z: usize,
    pub pml_lo_x: usize,
    pub pml_hi_x: usize,
    /// interior origin inside the padded domain
    pub iz0: usize,
    pub ix0: usize,
    /// cells kept above the transducer surface inside the interior
    pub margin_top: usize,
    pub pml_alpha: f64,
}

impl PadSpec {
    /// Lay out the padded domain for an imaging grid: refined interior,
    /// a small collar above the surface line, PML per side, sizes rounded
    /// up to 7-smooth with the slack absorbed into the PML.
    pub fn plan(grid: &ImageGrid, cfg: &SimConfig) -> PadSpec {
        let dx = grid.pitch / cfg.refine as f64;
        let margin_top = if cfg.pml_width > 0 { 2 * cfg.refine } else { 0 };
        let raw_nz = grid.rows * cfg.refine + margin_top;
        let raw_nx = grid.cols * cfg.refine;
        let w = cfg.pml_width;
        let nz = next_smooth7(raw_nz + 2 * w);
        let nx = next_smooth7(raw_nx + 2 * w);
        let (extra_z, extra_x) = (nz - raw_nz - 2 * w, nx - raw_nx - 2 * w);
        let pml_lo_z = if w > 0 { w + extra_z / 2 } else { 0 };
        let pml_lo_x = if w > 0 { w + extra_x / 2 } else { 0 };
        PadSpec {
            nz,
            nx,
            dx,
            pml_lo_z,
            pml_hi_z: if w > 0 { nz - raw_nz - pml_lo_z } else { 0 },
            pml_lo_x,
            pml_hi_x: if w > 0 { nx - raw_nx - pml_lo_x } else { 0 },
            iz0: pml_lo_z + margin_top,
            ix0: pml_lo_x,
            margin_top,
            pml_alpha: cfg.pml_alpha,
        }
    }

    /// Bare periodic domain with no PML and no margin (test mode).
    pub fn periodic(nz: usize, nx: usize, dx: f64) -> PadSpec {
        PadSpec {
            nz,
            nx,
            dx,
            pml_lo_z: 0,
            pml_hi_z: 0,
            pml_lo_x: 0,
            pml_hi_x: 0,
            iz0: 0,
            ix0: 0,
            margin_top: 0,
            pml_alpha: 0.0,
        }
    }

    /// Padded-grid node nearest a physical position (x measured from the
    /// grid's lateral coordinate origin, z from the transducer surface).
    pub fn node_at(&self, x: f64, z: f64) -> (usize, usize) {
        let r = (z / self.dx - 0.5).round() as isize + self.iz0 as isize;
        let c = (x / self.dx - 0.5).round() as isize + self.ix0 as isize;
        let r = r.clamp(0, self.nz as isize - 1) as usize;
        let c = c.clamp(0, self.nx as isize - 1) as usize;
        (r, c)
    }

    /// Replicate interior-edge values outward into margin and PML cells.
    pub fn pad_field(&self, interior: &[f64], rows: usize, cols: usize) -> Vec<f64> {
        assert_eq!(interior.len(), rows * cols);
        let mut out = vec![0.0; self.nz * self.nx];
        for r in 0..self.nz {
            let ir = (r as isize - self.iz0 as isize).clamp(0, rows as isize - 1) as usize;
            for c in 0..self.nx {
                let ic = (c as isize - self.ix0 as isize).clamp(0, cols as isize - 1) as usize;
                out[r * self.nx + c] = interior[ir * cols + ic];
            }
        }
        out
    }
}

fn sinc(x: f64) -> f64 {
    if x.abs() < 1e-12 {
        1.0
    } else {
        x.sin() / x
    }
}

/// One-sided quartic PML attenuation multipliers along an axis.
/// Returns (regular, staggered) per-index vectors, 1.0 in the interior.
fn pml_vectors(n: usize, lo: usize, hi: usize, alpha: f64, c_ref: f64, dx: f64, dt: f64) -> (Vec<f64>, Vec<f64>) {
    let mut reg = vec![1.0; n];
    let mut sg = vec![1.0; n];
    let amax = alpha * c_ref / dx;
    let atten = |depth: f64, width: usize| -> f64 {
        if width == 0 || depth <= 0.0 {
            return 1.0;
        }
        let d = (depth / width as f64).min(1.0);
        (-amax * d.powi(4) * dt / 2.0).exp()
    };
    for i in 0..n {
        // depth of the cell center (and the +dx/2 staggered point) into each layer
        let lo_depth = lo as f64 - i as f64 - 0.5;
        let hi_depth = i as f64 + 0.5 - (n - hi) as f64 + 1.0;
        reg[i] = atten(lo_depth, lo) * atten(hi_depth, hi);
        let lo_depth_sg = lo_depth - 0.5;
        let hi_depth_sg = hi_depth + 0.5;
        sg[i] = atten(lo_depth_sg, lo) * atten(hi_depth_sg, hi);
    }
    (reg, sg)
}

/// Time-stepping engine over the padded domain.
pub struct Solver<S: Real> {
    pub nz: usize,
    pub nx: usize,
    pub dx: f64,
    pub dt: f64,
    pub c_ref: f64,
    lossy: bool,
    // per-cell coefficients
    c2: Vec<S>,
    vel_coef_x: Vec<S>, // dt / rho0 at the +dx/2 staggered point
    vel_coef_z: Vec<S>, // dt / rho0 at the +dz/2 staggered point
    rho_coef: Vec<S>,   // dt * rho0
    tau: Vec<S>,
    eta: Vec<S>,
    // spectral multipliers (kappa folded into the derivative operators)
    grad_mult: Vec<Complex<S>>, // ddx+ + i * ddz+, single combined gradient filter
    div_x: Vec<Complex<S>>,
    div_z: Vec<Complex<S>>,
    nabla1: Vec<Complex<S>>,
    nabla2: Vec<Complex<S>>,
    negmap: Vec<u32>,
    // PML multipliers per axis
    pml_x: Vec<S>,
    pml_x_sg: Vec<S>,
    pml_z: Vec<S>,
    pml_z_sg: Vec<S>,
    // state
    ux: Vec<S>,
    uz: Vec<S>,
    rhox: Vec<S>,
    rhoz: Vec<S>,
    p: Vec<S>,
    // scratch
    zbuf: Vec<Complex<S>>,
    ga: Vec<S>,
    gb: Vec<S>,
    fft: Fft2<S>,
    steps_done: usize,
}

impl<S: Real> Solver<S> {
    /// Build a solver over padded per-cell fields (length nz*nx each).
    pub fn new(
        pad: &PadSpec,
        c0: &[f64],
        rho0: &[f64],
        alpha0_db: &[f64],
        y_exp: f64,
        dt: f64,
        c_ref: f64,
    ) -> Solver<S> {
        let (nz, nx) = (pad.nz, pad.nx);
        let n = nz * nx;
        assert_eq!(c0.len(), n);
        let lossy = alpha0_db.iter().any(|&a| a > 0.0);

        let c2: Vec<S> = c0.iter().map(|&c| S::of(c * c)).collect();
        let rho_coef: Vec<S> = rho0.iter().map(|&r| S::of(dt * r)).collect();
        // rho0 interpolated onto staggered points; edge cells wrap (PML
        // padding replicates edges, so the wrap never mixes materials)
        let mut vel_coef_x = vec![S::of(0.0); n];
        let mut vel_coef_z = vec![S::of(0.0); n];
        for r in 0..nz {
            for c in 0..nx {
                let xr = rho0[r * nx + c];
                let xn = rho0[r * nx + (c + 1) % nx];
                vel_coef_x[r * nx + c] = S::of(dt / (0.5 * (xr + xn)));
                let zn = rho0[((r + 1) % nz) * nx + c];
                vel_coef_z[r * nx + c] = S::of(dt / (0.5 * (xr + zn)));
            }
        }
        let tau: Vec<S> = c0
            .iter()
            .zip(alpha0_db)
            .map(|(&c, &a)| S::of(-2.0 * db_to_neper(a, y_exp) * c.powf(y_exp - 1.0)))
            .collect();
        let eta: Vec<S> = c0
            .iter()
            .zip(alpha0_db)
            .map(|(&c, &a)| {
                S::of(
                    2.0 * db_to_neper(a, y_exp)
                        * c.powf(y_exp)
                        * (std::f64::consts::PI * y_exp / 2.0).tan(),
                )
            })
            .collect();

        // wavenumbers and spectral multipliers
        let freq = |i: usize, m: usize| -> f64 {
            let s = if i <= m / 2 { i as f64 } else { i as f64 - m as f64 };
            2.0 * std::f64::consts::PI * s / (m as f64 * pad.dx)
        };
        let mut grad_mult = vec![Complex::new(S::of(0.0), S::of(0.0)); n];
        let mut div_x = grad_mult.clone();
        let mut div_z = grad_mult.clone();
        let mut nabla1 = grad_mult.clone();
        let mut nabla2 = grad_mult.clone();
        for r in 0..nz {
            let kz = freq(r, nz);
            for c in 0..nx {
                let kx = freq(c, nx);
                let kmag = (kx * kx + kz * kz).sqrt();
                let kappa = sinc(c_ref * kmag * dt / 2.0);
                let i = r * nx + c;
                // staggered spectral derivative: i*k*kappa*exp(+-i*k*dx/2)
                let m = |k: f64, sign: f64| -> Complex<f64> {
                    Complex::new(0.0, k * kappa) * Complex::from_polar(1.0, sign * k * pad.dx / 2.0)
                };
                let gx = m(kx, 1.0);
                let gz = m(kz, 1.0);
                // combined gradient filter: ifft gives dp/dx in re, dp/dz in im
                grad_mult[i] = Complex::new(
                    S::of(gx.re - gz.im),
                    S::of(gx.im + gz.re),
                );
                let dxm = m(kx, -1.0);
                let dzm = m(kz, -1.0);
                div_x[i] = Complex::new(S::of(dxm.re), S::of(dxm.im));
                div_z[i] = Complex::new(S::of(dzm.re), S::of(dzm.im));
                let n1 = kmag.powf(y_exp - 2.0);
                let n2 = kmag.powf(y_exp - 1.0);
                nabla1[i] = Complex::new(S::of(if n1.is_finite() { n1 } else { 0.0 }), S::of(0.0));
                nabla2[i] = Complex::new(S::of(if n2.is_finite() { n2 } else { 0.0 }), S::of(0.0));
            }
        }

        let (px, pxs) = pml_vectors(nx, pad.pml_lo_x, pad.pml_hi_x, pad.pml_alpha, c_ref, pad.dx, dt);
        let (pz, pzs) = pml_vectors(nz, pad.pml_lo_z, pad.pml_hi_z, pad.pml_alpha, c_ref, pad.dx, dt);

        let fft = Fft2::new(nz, nx);
        let negmap = fft.negation_map();
        Solver {
            nz,
            nx,
            dx: pad.dx,
            dt,
            c_ref,
            lossy,
            c2,
            vel_coef_x,
            vel_coef_z,
            rho_coef,
            tau,
            eta,
            grad_mult,
            div_x,
            div_z,
            nabla1,
            nabla2,
            negmap,
            pml_x: px.into_iter().map(S::of).collect(),
            pml_x_sg: pxs.into_iter().map(S::of).collect(),
            pml_z: pz.into_iter().map(S::of).collect(),
            pml_z_sg: pzs.into_iter().map(S::of).collect(),
            ux: vec![S::of(0.0); n],
            uz: vec![S::of(0.0); n],
            rhox: vec![S::of(0.0); n],
            rhoz: vec![S::of(0.0); n],
            p: vec![S::of(0.0); n],
            zbuf: vec![Complex::new(S::of(0.0), S::of(0.0)); n],
            ga: vec![S::of(0.0); n],
            gb: vec![S::of(0.0); n],
            fft,
            steps_done: 0,
        }
    }

    pub fn pressure(&self) -> &[S] {
        &self.p
    }

    pub fn velocity(&self) -> (&[S], &[S]) {
        (&self.ux, &self.uz)
    }

    pub fn steps_done(&self) -> usize {
        self.steps_done
    }

    /// Total acoustic energy sum(rho0 |u|^2 / 2 + p^2 / (2 rho0 c^2)) * dx^2.
    /// u lives half a step from p, so single-step values oscillate at
    /// O(dt^2); window averages are the meaningful drift measure.
    pub fn energy(&self) -> f64 {
        let mut e = 0.0;
        for i in 0..self.nz * self.nx {
            let rho0 = self.rho_coef[i].dbl() / self.dt;
            let u2 = self.ux[i].dbl().powi(2) + self.uz[i].dbl().powi(2);
            let p = self.p[i].dbl();
            e += 0.5 * rho0 * u2 + p * p / (2.0 * rho0 * self.c2[i].dbl());
        }
        e * self.dx * self.dx
    }

    /// Advance one step; `sources` adds pressure s at the given flat cell
    /// indices this step (split equally into both density components).
    pub fn step(&mut self, sources: &[(usize, f64)]) {
        let n = self.nz * self.nx;
        let zero = S::of(0.0);

        // pressure gradient onto staggered points (one packed transform)
        for (z, &pv) in self.zbuf.iter_mut().zip(&self.p) {
            *z = Complex::new(pv, zero);
        }
        self.fft.forward(&mut self.zbuf);
        for (z, m) in self.zbuf.iter_mut().zip(&self.grad_mult) {
            *z = *z * *m;
        }
        self.fft.inverse(&mut self.zbuf);

        // velocity update with PML sandwich
        for r in 0..self.nz {
            let pzs = self.pml_z_sg[r];
            let row = r * self.nx;
            for c in 0..self.nx {
                let i = row + c;
                let pxs = self.pml_x_sg[c];
                let dpdx = self.zbuf[i].re;
                let dpdz = self.zbuf[i].im;
                self.ux[i] = pxs * (pxs * self.ux[i] - self.vel_coef_x[i] * dpdx);
                self.uz[i] = pzs * (pzs * self.uz[i] - self.vel_coef_z[i] * dpdz);
            }
        }

        // velocity divergence back at cell centers (one packed transform)
        fft2::pack(&self.ux, &self.uz, &mut self.zbuf);
        self.fft.forward(&mut self.zbuf);
        fft2::hermitian_filter_pair(&mut self.zbuf, &self.div_x, &self.div_z, &self.negmap);
        self.fft.inverse(&mut self.zbuf);
        fft2::unpack(&self.zbuf, &mut self.ga, &mut self.gb);

        // density update with PML sandwich
        for r in 0..self.nz {
            let pz = self.pml_z[r];
            let row = r * self.nx;
            for c in 0..self.nx {
                let i = row + c;
                let px = self.pml_x[c];
                self.rhox[i] = px * (px * self.rhox[i] - self.rho_coef[i] * self.ga[i]);
                self.rhoz[i] = pz * (pz * self.rhoz[i] - self.rho_coef[i] * self.gb[i]);
            }
        }

        // additive pressure source, split across the density components
        for &(idx, s) in sources {
            let inc = S::of(s) / (S::of(2.0) * self.c2[idx]);
            self.rhox[idx] = self.rhox[idx] + inc;
            self.rhoz[idx] = self.rhoz[idx] + inc;
        }

        // equation of state, with absorption terms when lossy
        if self.lossy {
            // pack rho0*div(u) with rho~ for the two absorption filters
            for i in 0..n {
                let divu = (self.ga[i] + self.gb[i]) * self.rho_coef[i] / S::of(self.dt);
                self.zbuf[i] = Complex::new(divu, self.rhox[i] + self.rhoz[i]);
            }
            self.fft.forward(&mut self.zbuf);
            fft2::hermitian_filter_pair(&mut self.zbuf, &self.nabla1, &self.nabla2, &self.negmap);
            self.fft.inverse(&mut self.zbuf);
            for i in 0..n {
                let rho_tot = self.rhox[i] + self.rhoz[i];
                let t1 = self.zbuf[i].re;
                let t2 = self.zbuf[i].im;
                self.p[i] = self.c2[i] * (rho_tot + self.tau[i] * t1 - self.eta[i] * t2);
            }
        } else {
            for i in 0..n {
                self.p[i] = self.c2[i] * (self.rhox[i] + self.rhoz[i]);
            }
        }
        self.steps_done += 1;
    }

    pub fn is_finite(&self) -> bool {
        self.p.iter().all(|v| v.dbl().is_finite())
    }
}

/// L rho for a given density field and its source term rho0*div(u) =
/// -drho/dt, per the spectral absorption treatment. Standalone reference
/// implementation used to cross-check the solver's fused update.
pub fn apply_absorption(
    rho: &[f64],
    rho0_div_u: &[f64],
    medium: &MediumFields,
    dx: f64,
) -> Vec<f64> {
    let (rows, cols) = (medium.rows, medium.cols);
    let n = rows * cols;
    assert_eq!(rho.len(), n);
    assert_eq!(rho0_div_u.len(), n);
    let mut fft = Fft2::<f64>::new(rows, cols);

    let filter = |x: &[f64], power: f64, fft: &mut Fft2<f64>| -> Vec<f64> {
        let mut z: Vec<Complex<f64>> = x.iter().map(|&v| Complex::new(v, 0.0)).collect();
        fft.forward(&mut z);
        let freq = |i: usize, m: usize| {
            let s = if i <= m / 2 { i as f64 } else { i as f64 - m as f64 };
            2.0 * std::f64::consts::PI * s / (m as f64 * dx)
        };
        for r in 0..rows {
            for c in 0..cols {
                let k = (freq(r, rows).powi(2) + freq(c, cols).powi(2)).sqrt();
                let mult = k.powf(power);
                z[r * cols + c] *= if mult.is_finite() { mult } else { 0.0 };
            }
        }
        fft.inverse(&mut z);
        z.iter().map(|v| v.re).collect()
    };

    let t1 = filter(rho0_div_u, medium.y_exp - 2.0, &mut fft);
    let t2 = filter(rho, medium.y_exp - 1.0, &mut fft);
    let mut out = vec![0.0; n];
    for i in 0..n {
        let a = db_to_neper(medium.alpha0_db[i], medium.y_exp);
        let c = medium.c0[i];
        let tau = -2.0 * a * c.powf(medium.y_exp - 1.0);
        let eta = 2.0 * a * c.powf(medium.y_exp) * (std::f64::consts::PI * medium.y_exp / 2.0).tan();
        // L rho = -tau * n1[rho0 div u] + eta * n2[rho]; p = c^2 (rho - L rho)
        out[i] = -tau * t1[i] + eta * t2[i];
    }
    out
}

/// Band-limited resampling: Blackman-windowed sinc interpolation of x
/// (sampled at fs_in, t=0 at index 0) onto n_out samples at fs_out, with
/// anti-alias cutoff at 0.45 * min(fs_in, fs_out).
pub fn resample_trace(x: &[f64], fs_in: f64, fs_out: f64, n_out: usize) -> Vec<f64> {
    let fc = 0.45 * fs_in.min(fs_out);
    let ratio = (fs_in / fs_out).max(1.0);
    let half = (16.0 * ratio).ceil() as isize;
    let mut out = vec![0.0; n_out];
    for (k, o) in out.iter_mut().enumerate() {
        let t = k as f64 / fs_out;
        let center = t * fs_in;
        let n0 = center.floor() as isize;
        let mut acc = 0.0;
        for n in (n0 - half)..=(n0 + half + 1) {
            if n < 0 || n as usize >= x.len() {
                continue;
            }
            let u = center - n as f64; // offset in input samples
            let w = {
                let v = u / (half as f64 + 1.0);
                if v.abs() >= 1.0 {
                    0.0
                } else {
                    0.42 + 0.5 * (std::f64::consts::PI * v).cos()
                        + 0.08 * (2.0 * std::f64::consts::PI * v).cos()
                }
            };
            let h = 2.0 * fc / fs_in * sinc(2.0 * std::f64::consts::PI * fc * u / fs_in);
            acc += x[n as usize] * h * w;
        }
        *o = acc;
    }
    out
}

fn resolve_timing(geometry: &ArrayGeometry, cfg: &SimConfig) -> (f64, f64) {
    let record_fs = cfg.record_fs.unwrap_or(geometry.fs);
    let duration = cfg
        .duration
        .unwrap_or(geometry.n_samples as f64 / record_fs);
    (record_fs, duration)
}

fn solver_speed(medium: &MediumFields, cfg: &SimConfig) -> Result<f64, WaveError> {
    let c_med = medium.max_speed();
    let c_ref = cfg.c_max.unwrap_or(c_med);
    if c_ref + 1e-9 < c_med {
        return Err(WaveError::Config(format!(
            "c_max {c_ref} below medium maximum speed {c_med}"
        )));
    }
    Ok(c_ref)
}

fn simulate_typed<S: Real>(
    medium: &MediumFields,
    geometry: &ArrayGeometry,
    grid: &ImageGrid,
    pulse: &Pulse,
    cfg: &SimConfig,
    tx_index: usize,
) -> Result<Vec<Vec<f64>>, WaveError> {
    cfg.validate()?;
    medium.validate()?;
    if medium.rows != grid.rows * cfg.refine || medium.cols != grid.cols * cfg.refine {
        return Err(WaveError::Config(
            "medium is not on the refined simulation grid".into(),
        ));
    }
    if tx_index >= geometry.n_transducers {
        return Err(WaveError::Config(format!(
            "tx_index {tx_index} out of range"
        )));
    }
    let positions = transducer_positions(geometry, grid)
        .map_err(|e| WaveError::Config(e.to_string()))?;
    let pad = PadSpec::plan(grid, cfg);
    let c_ref = solver_speed(medium, cfg)?;
    let dt = cfg.cfl * pad.dx / c_ref;
    let (record_fs, duration) = resolve_timing(geometry, cfg);
    let ratio = ((1.0 / dt) / record_fs).max(1.0);
    let tail = (16.0 * ratio).ceil() as usize + 2;
    let n_steps = (duration / dt).ceil() as usize + tail;

    let c0 = pad.pad_field(&medium.c0, medium.rows, medium.cols);
    let rho0 = pad.pad_field(&medium.rho0, medium.rows, medium.cols);
    let alpha = pad.pad_field(&medium.alpha0_db, medium.rows, medium.cols);
    let mut solver = Solver::<S>::new(&pad, &c0, &rho0, &alpha, medium.y_exp, dt, c_ref);

    let nodes: Vec<usize> = positions
        .iter()
        .map(|&(x, z)| {
            let (r, c) = pad.node_at(x - grid_x0(grid), z - grid.surface_z);
            r * pad.nx + c
        })
        .collect();
    let src = nodes[tx_index];

    let mut recorded = vec![vec![0.0f64; n_steps]; nodes.len()];
    for step in 0..n_steps {
        let t = step as f64 * dt;
        let s = pulse.value_at(t);
        if s != 0.0 {
            solver.step(&[(src, s)]);
        } else {
            solver.step(&[]);
        }
        for (trace, &node) in recorded.iter_mut().zip(&nodes) {
            trace[step] = solver.p[node].dbl();
        }
        if step % 128 == 127 && !solver.is_finite() {
            return Err(WaveError::Unstable { step });
        }
    }
    if !solver.is_finite() {
        return Err(WaveError::Unstable { step: n_steps });
    }

    Ok(recorded
        .iter()
        .map(|tr| resample_trace(tr, 1.0 / dt, record_fs, geometry.n_samples))
        .collect())
}

/// Lateral physical coordinate of the grid's left edge (x of column 0's
/// pixel left boundary); transducer x positions are measured in the same
/// frame, so the solver works relative to this edge.
fn grid_x0(grid: &ImageGrid) -> f64 {
    grid.origin.0 - grid.pitch / 2.0
}

/// Time-step one transmit event; returns per-receiver traces resampled to
/// the recording rate, n_samples each (transmitter's own trace included).
pub fn simulate(
    medium: &MediumFields,
    geometry: &ArrayGeometry,
    grid: &ImageGrid,
    pulse: &Pulse,
    cfg: &SimConfig,
    tx_index: usize,
) -> Result<Vec<Vec<f64>>, WaveError> {
    match cfg.precision {
        Precision::F64 => simulate_typed::<f64>(medium, geometry, grid, pulse, cfg, tx_index),
        Precision::F32 => simulate_typed::<f32>(medium, geometry, grid, pulse, cfg, tx_index),
    }
}

/// Run every transmitter and assemble the full acquisition.
pub fn simulate_all(
    medium: &MediumFields,
    geometry: &ArrayGeometry,
    grid: &ImageGrid,
    pulse: &Pulse,
    cfg: &SimConfig,
) -> Result<RfData, WaveError> {
    let mut rf = RfData::zeros(geometry);
    for tx in 0..geometry.n_transducers {
        let traces = simulate(medium, geometry, grid, pulse, cfg, tx)
            .map_err(|e| WaveError::Transmitter { tx, source: Box::new(e) })?;
        for (rx, tr) in traces.iter().enumerate() {
            rf.trace_mut(tx, rx).copy_from_slice(tr);
        }
    }
    Ok(rf)
}

#[cfg(test)]
mod tests {
    #![allow(clippy::needless_range_loop)]

    use super::*;
    use crate::rf::envelope;

    #[test]
    fn smooth7_rounding() {
        assert_eq!(next_smooth7(84), 84);
        assert_eq!(next_smooth7(88), 90);
        assert_eq!(next_smooth7(97), 98);
        assert_eq!(next_smooth7(1), 1);
        assert_eq!(next_smooth7(121), 125);
    }

    #[test]
    fn db_to_neper_matches_reference_value() {
        // 0.5 dB/(MHz^1.5 cm): 100*0.5*(1e-6/2pi)^1.5 / (20 log10 e)
        let v = db_to_neper(0.5, 1.5);
        let expect = 100.0 * 0.5 * (1e-6 / (2.0 * std::f64::consts::PI)).powf(1.5)
            / (20.0 * std::f64::consts::E.log10());
        assert!((v - expect).abs() < 1e-12 * expect);
    }

    #[test]
    fn zero_pulse_gives_zero_traces() {
        let grid = ImageGrid { rows: 8, cols: 12, ..Default::default() };
        let geometry = ArrayGeometry { n_transducers: 2, n_samples: 40, ..Default::default() };
        let pulse = Pulse { amplitude: 0.0, ..Default::default() };
        let cfg = SimConfig { refine: 1, ..Default::default() };
        let medium = MediumFields::homogeneous(8, 12, 3680.0, 2400.0, 0.5, 1.5);
        let traces = simulate(&medium, &geometry, &grid, &pulse, &cfg, 0).unwrap();
        assert!(traces.iter().flatten().all(|&v| v == 0.0));
    }

    #[test]
    fn source_linearity() {
        let grid = ImageGrid { rows: 8, cols: 16, ..Default::default() };
        let geometry = ArrayGeometry {
            n_transducers: 2,
            spacing: 0.08,
            n_samples: 60,
            ..Default::default()
        };
        let cfg = SimConfig { refine: 1, ..Default::default() };
        let medium = MediumFields::homogeneous(8, 16, 3680.0, 2400.0, 0.5, 1.5);
        let p1 = Pulse::default();
        let p2 = Pulse { amplitude: 2.0, ..Default::default() };
        let a = simulate(&medium, &geometry, &grid, &p1, &cfg, 0).unwrap();
        let b = simulate(&medium, &geometry, &grid, &p2, &cfg, 0).unwrap();
        let (mut num, mut den) = (0.0, 0.0);
        for (ta, tb) in a.iter().zip(&b) {
            for (&va, &vb) in ta.iter().zip(tb) {
                num += (vb - 2.0 * va).powi(2);
                den += vb * vb;
            }
        }
        assert!(den > 0.0);
        assert!((num / den).sqrt() < 1e-9);
    }

    #[test]
    fn homogeneous_time_of_flight() {
        // default protocol: tx 0 and rx 9 sit 0.36 m apart; envelope peak
        // arrives at 0.36/3680 + duration/2 within one sample at 200 kHz
        let grid = ImageGrid::default();
        let geometry = ArrayGeometry::default();
        let pulse = Pulse::default();
        let cfg = SimConfig { alpha0_db: 0.0, ..Default::default() };
        let medium = MediumFields::homogeneous(
            grid.rows * cfg.refine,
            grid.cols * cfg.refine,
            3680.0,
            2400.0,
            0.0,
            1.5,
        );
        let traces = simulate(&medium, &geometry, &grid, &pulse, &cfg, 0).unwrap();
        let env = envelope(&traces[9]);
        let peak = env
            .iter()
            .enumerate()
            .max_by(|a, b| a.1.partial_cmp(b.1).unwrap())
            .unwrap()
            .0;
        let expect = (0.36 / 3680.0 + pulse.duration / 2.0) * geometry.fs;
        assert!(
            (peak as f64 - expect).abs() <= 1.0,
            "peak sample {peak}, expected {expect:.2}"
        );
    }

    #[test]
    fn lossless_periodic_energy_is_conserved() {
        // periodic domain, no PML: after the source stops, total acoustic
        // energy drifts by less than 0.1%. u lives at n+1/2, so the
        // potential term uses the leapfrog invariant p^n p^{n+1}, the
        // discrete form of p^2 at the staggered time.
        let (nz, nx, dx) = (48, 48, 0.01);
        let (c0, rho0) = (3680.0, 2400.0);
        let pad = PadSpec::periodic(nz, nx, dx);
        let c = vec![c0; nz * nx];
        let rho = vec![rho0; nz * nx];
        let alpha = vec![0.0; nz * nx];
        let dt = 0.3 * dx / c0;
        let mut solver = Solver::<f64>::new(&pad, &c, &rho, &alpha, 1.5, dt, c0);
        let pulse = Pulse::default();
        let src = (nz / 2) * nx + nx / 2;
        let n_src = (pulse.duration / dt).ceil() as usize;
        for k in 0..n_src {
            solver.step(&[(src, pulse.value_at(k as f64 * dt))]);
        }
        let energy = |solver: &Solver<f64>, p_prev: &[f64]| -> f64 {
            let (ux, uz) = solver.velocity();
            let p = solver.pressure();
            let mut e = 0.0;
            for i in 0..nz * nx {
                e += 0.5 * rho0 * (ux[i] * ux[i] + uz[i] * uz[i])
                    + p_prev[i] * p[i] / (2.0 * rho0 * c0 * c0);
            }
            e * dx * dx
        };
        let mut first = None;
        let mut last = 0.0;
        for _ in 0..400 {
            let p_prev = solver.pressure().to_vec();
            solver.step(&[]);
            last = energy(&solver, &p_prev);
            first.get_or_insert(last);
        }
        let drift = (last - first.unwrap()).abs() / first.unwrap();
        assert!(drift < 1e-3, "energy drift {drift:.2e}");
    }

    #[test]
    fn reciprocity_in_homogeneous_medium() {
        let grid = ImageGrid { rows: 16, cols: 24, ..Default::default() };
        let geometry = ArrayGeometry {
            n_transducers: 3,
            spacing: 0.08,
            n_samples: 120,
            ..Default::default()
        };
        let cfg = SimConfig::default();
        let medium = MediumFields::homogeneous(
            grid.rows * cfg.refine,
            grid.cols * cfg.refine,
            3680.0,
            2400.0,
            0.5,
            1.5,
        );
        let pulse = Pulse::default();
        let from0 = simulate(&medium, &geometry, &grid, &pulse, &cfg, 0).unwrap();
        let from2 = simulate(&medium, &geometry, &grid, &pulse, &cfg, 2).unwrap();
        let (mut num, mut den) = (0.0, 0.0);
        for (&a, &b) in from0[2].iter().zip(&from2[0]) {
            num += (a - b).powi(2);
            den += a * a;
        }
        assert!((num / den).sqrt() < 1e-6, "reciprocity error {:e}", (num / den).sqrt());
    }

    #[test]
    fn determinism_bitwise() {
        let grid = ImageGrid { rows: 8, cols: 12, ..Default::default() };
        let geometry = ArrayGeometry { n_transducers: 2, n_samples: 50, ..Default::default() };
        let cfg = SimConfig { refine: 1, ..Default::default() };
        let medium = MediumFields::homogeneous(8, 12, 3680.0, 2400.0, 0.5, 1.5);
        let pulse = Pulse::default();
        let a = simulate(&medium, &geometry, &grid, &pulse, &cfg, 1).unwrap();
        let b = simulate(&medium, &geometry, &grid, &pulse, &cfg, 1).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn absorption_operator_closed_form_dispersion() {
        // single-mode field: dispersion term = eta |k0|^(y-1) rho with the
        // standalone operator on a unit-spacing grid
        let (rows, cols) = (16, 16);
        let medium = MediumFields::homogeneous(rows, cols, 3680.0, 2400.0, 0.5, 1.5);
        let k0 = 2.0 * std::f64::consts::PI * 3.0 / cols as f64; // mode 3 along x
        let rho: Vec<f64> = (0..rows * cols)
            .map(|i| ((i % cols) as f64 * k0).cos())
            .collect();
        let zeros = vec![0.0; rows * cols];
        let l = apply_absorption(&rho, &zeros, &medium, 1.0);
        let a = db_to_neper(0.5, 1.5);
        let eta = 2.0 * a * 3680f64.powf(1.5) * (std::f64::consts::PI * 1.5 / 2.0).tan();
        for (lv, rv) in l.iter().zip(&rho) {
            let expect = eta * k0.powf(0.5) * rv;
            assert!((lv - expect).abs() < 1e-12 * eta.abs().max(1.0));
        }
    }

    #[test]
    fn absorption_vanishes_for_zero_alpha_and_constant_fields() {
        let medium = MediumFields::homogeneous(8, 8, 3680.0, 2400.0, 0.0, 1.5);
        let rho = vec![1.25; 64];
        let div = vec![0.5; 64];
        let l = apply_absorption(&rho, &div, &medium, 1.0);
        assert!(l.iter().all(|&v| v.abs() < 1e-12));

        // nonzero alpha, constant fields: fractional Laplacians kill DC
        let medium = MediumFields::homogeneous(8, 8, 3680.0, 2400.0, 0.5, 1.5);
        let l = apply_absorption(&rho, &div, &medium, 1.0);
        assert!(l.iter().all(|&v| v.abs() < 1e-9));
    }

    #[test]
    fn resampling_preserves_in_band_tone() {
        let fs_in = 1.8e6;
        let fs_out = 200e3;
        let f0 = 52e3;
        let n_in = 4000;
        let x: Vec<f64> = (0..n_in)
            .map(|k| (2.0 * std::f64::consts::PI * f0 * k as f64 / fs_in).sin())
            .collect();
        let n_out = 300;
        let y = resample_trace(&x, fs_in, fs_out, n_out);
        // ignore edges where the kernel is truncated
        let lo = 30;
        let hi = n_out - 30;
        let (mut num, mut den) = (0.0, 0.0);
        for k in lo..hi {
            let t = k as f64 / fs_out;
            let expect = (2.0 * std::f64::consts::PI * f0 * t).sin();
            num += (y[k] - expect).powi(2);
            den += expect * expect;
        }
        assert!((num / den).sqrt() < 0.01, "tone error {:e}", (num / den).sqrt());
    }

    #[test]
    fn rejects_bad_configs() {
        let cfg = SimConfig { cfl: 0.9, ..Default::default() };
        assert!(cfg.validate().is_err());
        let cfg = SimConfig { pml_width: 4, ..Default::default() };
        assert!(cfg.validate().is_err());
        let cfg = SimConfig { y_exp: 1.0, ..Default::default() };
        assert!(cfg.validate().is_err());

        // c_max below the medium maximum is rejected at simulate time
        let grid = ImageGrid { rows: 4, cols: 4, ..Default::default() };
        let geometry = ArrayGeometry { n_transducers: 2, spacing: 0.02, n_samples: 10, ..Default::default() };
        let cfg = SimConfig { refine: 1, c_max: Some(1000.0), ..Default::default() };
        let medium = MediumFields::homogeneous(4, 4, 3680.0, 2400.0, 0.5, 1.5);
        let err = simulate(&medium, &geometry, &grid, &Pulse::default(), &cfg, 0);
        assert!(matches!(err, Err(WaveError::Config(_))));
    }

    #[test]
    fn time_reversal_refocuses_at_source() {
        // record the field on a ring of cells, re-inject it time-reversed,
        // and check the peak field lands back at the source cell
        let (nz, nx, dx) = (96, 96, 0.01);
        let pad = PadSpec::periodic(nz, nx, dx);
        let c = vec![3680.0; nz * nx];
        let rho = vec![2400.0; nz * nx];
        let alpha = vec![0.0; nz * nx];
        let dt = 0.3 * dx / 3680.0;
        let pulse = Pulse { duration: 20e-6, carrier: 90e3, amplitude: 1.0 };
        let (sr, sc) = (44, 50);
        let src = sr * nx + sc;

        // boundary ring two cells in from the edges
        let mut ring = Vec::new();
        for c_i in 2..nx - 2 {
            ring.push(2 * nx + c_i);
            ring.push((nz - 3) * nx + c_i);
        }
        for r_i in 3..nz - 3 {
            ring.push(r_i * nx + 2);
            ring.push(r_i * nx + nx - 3);
        }

        let n_steps = 230; // primary wavefront crosses the ring, no wrap yet
        let mut fwd = Solver::<f64>::new(&pad, &c, &rho, &alpha, 1.5, dt, 3680.0);
        let mut recorded = vec![vec![0.0; n_steps]; ring.len()];
        for k in 0..n_steps {
            fwd.step(&[(src, pulse.value_at(k as f64 * dt))]);
            for (tr, &node) in recorded.iter_mut().zip(&ring) {
                tr[k] = fwd.pressure()[node];
            }
        }

        let mut rev = Solver::<f64>::new(&pad, &c, &rho, &alpha, 1.5, dt, 3680.0);
        let mut best = (0.0f64, 0usize);
        for k in 0..n_steps {
            let sources: Vec<(usize, f64)> = ring
                .iter()
                .zip(&recorded)
                .map(|(&node, tr)| (node, tr[n_steps - 1 - k]))
                .collect();
            rev.step(&sources);
            // injection transients live on the ring; scan the interior only
            for r in 8..nz - 8 {
                for c_i in 8..nx - 8 {
                    let v = rev.pressure()[r * nx + c_i].abs();
                    if v > best.0 {
                        best = (v, r * nx + c_i);
                    }
                }
            }
        }
        let (br, bc) = (best.1 / nx, best.1 % nx);
        let dist = ((br as f64 - sr as f64).powi(2) + (bc as f64 - sc as f64).powi(2)).sqrt();
        assert!(dist <= 2.0, "refocus at ({br},{bc}), source ({sr},{sc})");
    }
}
