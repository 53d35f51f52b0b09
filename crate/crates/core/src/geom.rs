//! Imaging grid, transducer array geometry, and excitation pulse.
//!
//! Everything downstream (wave simulation, system matrix, SAFT) works off the
//! same few geometric quantities defined here: pixel-center coordinates of the
//! imaging grid, the collinear transducer positions on the surface line, and
//! the sampled excitation waveform.

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum GeomError {
    #[error("invalid grid: rows={rows}, cols={cols}, pitch={pitch}")]
    InvalidGrid { rows: usize, cols: usize, pitch: f64 },
    #[error("invalid array: n_transducers={n}, spacing={spacing}")]
    InvalidArray { n: usize, spacing: f64 },
    #[error("invalid pulse: carrier={carrier}, duration={duration}")]
    InvalidPulse { carrier: f64, duration: f64 },
    #[error(
        "array aperture {aperture} m does not fit grid extent {extent} m with margin {margin} m"
    )]
    ArrayWiderThanGrid { aperture: f64, extent: f64, margin: f64 },
}

/// Rectangular imaging grid. Rows run along depth (z), columns along the
/// lateral direction (x). `origin` is the physical (x, z) of the *center* of
/// pixel (0, 0); the transducer line sits at `surface_z`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ImageGrid {
    pub rows: usize,
    pub cols: usize,
    /// Meters per pixel (square pixels).
    pub pitch: f64,
    /// (x, z) of the center of pixel (0, 0), meters.
    pub origin: (f64, f64),
    /// Depth of the transducer line, meters.
    pub surface_z: f64,
}

impl Default for ImageGrid {
    fn default() -> Self {
        let pitch = 0.02;
        ImageGrid {
            rows: 32,
            cols: 48,
            pitch,
            // Grid flush against the surface: pixel (0,0) spans [0, pitch] in
            // both x and z, so the physical field of view starts at z = 0.
            origin: (pitch / 2.0, pitch / 2.0),
            surface_z: 0.0,
        }
    }
}

impl ImageGrid {
    pub fn validate(&self) -> Result<(), GeomError> {
        if self.rows < 1 || self.cols < 1 || !(self.pitch > 0.0) {
            return Err(GeomError::InvalidGrid {
                rows: self.rows,
                cols: self.cols,
                pitch: self.pitch,
            });
        }
        Ok(())
    }

    pub fn n_pixels(&self) -> usize {
        self.rows * self.cols
    }

    /// Physical (x, z) of the center of pixel (r, c).
    pub fn pixel_center(&self, r: usize, c: usize) -> (f64, f64) {
        (
            self.origin.0 + c as f64 * self.pitch,
            self.origin.1 + r as f64 * self.pitch,
        )
    }

    /// Lateral width of the field of view, meters.
    pub fn lateral_extent(&self) -> f64 {
        self.cols as f64 * self.pitch
    }

    /// Lateral coordinate of the middle of the field of view.
    pub fn lateral_midpoint(&self) -> f64 {
        self.origin.0 - self.pitch / 2.0 + self.lateral_extent() / 2.0
    }

    /// Depth extent of the field of view, meters.
    pub fn depth_extent(&self) -> f64 {
        self.rows as f64 * self.pitch
    }
}

/// Linear transducer array on the surface line. Every ordered pair (i, j)
/// with i != j is a transmit-receive pair, giving n(n-1) usable traces.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ArrayGeometry {
    pub n_transducers: usize,
    /// Center-to-center element spacing, meters.
    pub spacing: f64,
    /// Receive sampling frequency, Hz.
    pub fs: f64,
    /// Samples recorded per trace.
    pub n_samples: usize,
    /// Center the array over the grid laterally.
    pub centered: bool,
    /// Leftmost element x when `centered` is false.
    pub x_start: f64,
    /// Minimum clearance between the array ends and the grid edges, meters.
    pub edge_margin: f64,
}

impl Default for ArrayGeometry {
    fn default() -> Self {
        ArrayGeometry {
            n_transducers: 10,
            spacing: 0.04,
            fs: 200e3,
            n_samples: 263,
            centered: true,
            x_start: 0.0,
            edge_margin: 0.0,
        }
    }
}

impl ArrayGeometry {
    pub fn validate(&self) -> Result<(), GeomError> {
        if self.n_transducers < 2 || !(self.spacing > 0.0) || !(self.fs > 0.0) {
            return Err(GeomError::InvalidArray {
                n: self.n_transducers,
                spacing: self.spacing,
            });
        }
        Ok(())
    }

    /// Number of usable ordered transmit-receive pairs, n(n-1).
    pub fn n_pairs(&self) -> usize {
        self.n_transducers * (self.n_transducers - 1)
    }

    /// Distance from first to last element, (n-1) * spacing.
    pub fn aperture(&self) -> f64 {
        (self.n_transducers - 1) as f64 * self.spacing
    }

    /// Length of the recorded time window, seconds.
    pub fn window(&self) -> f64 {
        self.n_samples as f64 / self.fs
    }
}

/// Transducer (x, z) positions on the surface line.
///
/// Deterministic and side-effect free. Rejects arrays that do not fit the
/// grid's lateral extent with the configured margin.
pub fn transducer_positions(
    geometry: &ArrayGeometry,
    grid: &ImageGrid,
) -> Result<Vec<(f64, f64)>, GeomError> {
    geometry.validate()?;
    grid.validate()?;
    let aperture = geometry.aperture();
    let extent = grid.lateral_extent();
    if aperture > extent - 2.0 * geometry.edge_margin {
        return Err(GeomError::ArrayWiderThanGrid {
            aperture,
            extent,
            margin: geometry.edge_margin,
        });
    }
    let x0 = if geometry.centered {
        grid.lateral_midpoint() - aperture / 2.0
    } else {
        geometry.x_start
    };
    Ok((0..geometry.n_transducers)
        .map(|k| (x0 + k as f64 * geometry.spacing, grid.surface_z))
        .collect())
}

/// Excitation pulse: a sine carrier under a raised-cosine (Hann) envelope
/// supported on [0, duration].
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Pulse {
    /// Carrier frequency, Hz.
    pub carrier: f64,
    /// Envelope support, seconds. The envelope peaks at duration / 2.
    pub duration: f64,
    /// Peak-amplitude scale factor.
    pub amplitude: f64,
}

impl Default for Pulse {
    fn default() -> Self {
        Pulse {
            carrier: 52e3,
            duration: 50e-6,
            amplitude: 1.0,
        }
    }
}

impl Pulse {
    pub fn validate(&self) -> Result<(), GeomError> {
        if !(self.carrier > 0.0) || !(self.duration > 0.0) {
            return Err(GeomError::InvalidPulse {
                carrier: self.carrier,
                duration: self.duration,
            });
        }
        Ok(())
    }

    /// Continuous-time waveform value at time t (zero outside [0, duration]).
    pub fn value_at(&self, t: f64) -> f64 {
        if t < 0.0 || t > self.duration {
            return 0.0;
        }
        let w = 0.5 * (1.0 - (2.0 * std::f64::consts::PI * t / self.duration).cos());
        self.amplitude * w * (2.0 * std::f64::consts::PI * self.carrier * t).sin()
    }
}

/// Sample the pulse at rate `fs`. Returns round(duration * fs) + 1 samples,
/// s[k] = w(k/fs) * sin(2*pi*carrier*k/fs).
pub fn make_pulse(pulse: &Pulse, fs: f64) -> Vec<f64> {
    let n = (pulse.duration * fs).round() as usize + 1;
    let dt = 1.0 / fs;
    (0..n).map(|k| pulse.value_at(k as f64 * dt)).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_grid_matches_image_size() {
        let g = ImageGrid::default();
        assert_eq!((g.rows, g.cols), (32, 48));
        assert!((g.lateral_extent() - 0.96).abs() < 1e-12);
        assert!((g.depth_extent() - 0.64).abs() < 1e-12);
    }

    #[test]
    fn pixel_center_is_pure_affine() {
        let g = ImageGrid::default();
        let (x, z) = g.pixel_center(0, 0);
        assert!((x - 0.01).abs() < 1e-15 && (z - 0.01).abs() < 1e-15);
        let (x, z) = g.pixel_center(31, 47);
        assert!((x - 0.95).abs() < 1e-12 && (z - 0.63).abs() < 1e-12);
    }

    #[test]
    fn two_element_centered_array() {
        // midpoint symmetry: extent 0.96 m, spacing 0.04 -> {0.46, 0.50}
        let geom = ArrayGeometry {
            n_transducers: 2,
            ..ArrayGeometry::default()
        };
        let pos = transducer_positions(&geom, &ImageGrid::default()).unwrap();
        assert!((pos[0].0 - 0.46).abs() < 1e-12);
        assert!((pos[1].0 - 0.50).abs() < 1e-12);
        assert_eq!(pos[0].1, 0.0);
    }

    #[test]
    fn default_array_aperture_and_positions() {
        let geom = ArrayGeometry::default();
        let grid = ImageGrid::default();
        assert!((geom.aperture() - 0.36).abs() < 1e-12);
        // hand geometry check against the centering rule: x = 0.30 + 0.04 k
        let pos = transducer_positions(&geom, &grid).unwrap();
        for (k, &(x, z)) in pos.iter().enumerate() {
            assert!((x - (0.30 + 0.04 * k as f64)).abs() < 1e-12);
            assert_eq!(z, 0.0);
        }
        // collinear with consecutive distance = spacing to 1e-12
        for w in pos.windows(2) {
            assert!(((w[1].0 - w[0].0) - geom.spacing).abs() < 1e-12);
        }
    }

    #[test]
    fn transducer_positions_deterministic() {
        let geom = ArrayGeometry::default();
        let grid = ImageGrid::default();
        let a = transducer_positions(&geom, &grid).unwrap();
        let b = transducer_positions(&geom, &grid).unwrap();
        assert_eq!(a, b); // bit-identical
    }

    #[test]
    fn oversized_array_rejected() {
        let geom = ArrayGeometry {
            n_transducers: 30,
            ..ArrayGeometry::default()
        };
        assert!(matches!(
            transducer_positions(&geom, &ImageGrid::default()),
            Err(GeomError::ArrayWiderThanGrid { .. })
        ));
        // margin pushes a fitting array over the limit
        let geom = ArrayGeometry {
            edge_margin: 0.31,
            ..ArrayGeometry::default()
        };
        assert!(transducer_positions(&geom, &ImageGrid::default()).is_err());
    }

    #[test]
    fn pulse_sample_count_and_endpoints() {
        let p = Pulse::default();
        let s = make_pulse(&p, 200e3);
        assert_eq!(s.len(), 11); // round(50e-6 * 200e3) + 1
        assert_eq!(s[0], 0.0); // envelope zero at t = 0
        assert!(s[10].abs() < 1e-12); // envelope zero at t = duration
    }

    #[test]
    fn pulse_zero_outside_support() {
        let p = Pulse::default();
        let s = make_pulse(&p, 1e6);
        let n_support = (p.duration * 1e6).round() as usize;
        for (k, &v) in s.iter().enumerate() {
            if k > n_support {
                assert_eq!(v, 0.0);
            }
        }
        assert_eq!(p.value_at(p.duration + 1e-9), 0.0);
        assert_eq!(p.value_at(-1e-9), 0.0);
    }

    #[test]
    fn pulse_midpoint_closed_form() {
        // k = 5 at fs = 200 kHz is t = 25 us: envelope exactly 1,
        // value = sin(2*pi*52e3*25e-6) = sin(2.6*pi)
        let p = Pulse::default();
        let s = make_pulse(&p, 200e3);
        let expect = (2.6 * std::f64::consts::PI).sin();
        assert!((s[5] - expect).abs() < 1e-12, "{} vs {}", s[5], expect);
    }

    #[test]
    fn pulse_amplitude_bound() {
        let p = Pulse::default();
        for s in make_pulse(&p, 10e6) {
            assert!(s.abs() <= 1.0 + 1e-12);
        }
    }

    #[test]
    fn sampled_pulse_interpolates_to_closed_form() {
        // envelope smoothness: sample at fs, linear-interpolate at 10x fs,
        // compare with the closed form; max error below 0.05. A carrier
        // sampled below ~12 points per period cannot meet this regardless of
        // the envelope, so the check runs at a resolving rate.
        let p = Pulse::default();
        let fs = 1e6;
        let s = make_pulse(&p, fs);
        let mut max_err: f64 = 0.0;
        for k in 0..(s.len() - 1) * 10 {
            let t = k as f64 / (10.0 * fs);
            let i = (t * fs).floor() as usize;
            let frac = t * fs - i as f64;
            let interp = s[i] * (1.0 - frac) + s[i + 1] * frac;
            max_err = max_err.max((interp - p.value_at(t)).abs());
        }
        assert!(max_err < 0.05, "max interpolation error {max_err}");
    }
}
