//! Linearized measurement model: a sparse operator A mapping a reflectivity
//! image to stacked RF traces.
//!
//! For pair (tx i, rx j) and pixel nu, a scatterer at nu produces the pulse
//! replica delayed by the two-leg travel time tau = (|tx - nu| + |nu - rx|)
//! / c_ref and scaled by a 2D spreading amplitude 1 / max(d_tx * d_rx, eps).
//! Fractional delays split each replica sample linearly across the two
//! adjacent time bins, so the matrix stays 2-banded per deposition and the
//! adjoint is exact by transposition. Measurement rows follow the RfData
//! vectorization order: pair-major (i, j) with i != j, then time.

use crate::container::{Container, ContainerError, Tensor};
use crate::geom::{make_pulse, transducer_positions, ArrayGeometry, GeomError, ImageGrid, Pulse};
use crate::rf::RfData;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum LinError {
    #[error("geometry: {0}")]
    Geometry(#[from] GeomError),
    #[error("invalid linear model config: {0}")]
    Config(String),
    #[error("empty system matrix: every pixel delay falls outside the {0}-sample window")]
    Empty(usize),
    #[error("dimension mismatch: expected {expected}, got {got}")]
    Dimension { expected: usize, got: usize },
    #[error("container: {0}")]
    Container(#[from] ContainerError),
    #[error("corrupt system matrix: {0}")]
    Corrupt(String),
}

/// Two-leg travel time from `tx` to `pixel` to `rx` at speed `c_ref`, seconds.
pub fn delay(tx: (f64, f64), rx: (f64, f64), pixel: (f64, f64), c_ref: f64) -> f64 {
    let leg = |a: (f64, f64), b: (f64, f64)| ((a.0 - b.0).powi(2) + (a.1 - b.1).powi(2)).sqrt();
    (leg(tx, pixel) + leg(pixel, rx)) / c_ref
}

/// Sparse measurement operator in compressed-row layout. Rows index
/// (pair, time sample); columns index image pixels row-major.
#[derive(Debug, Clone)]
pub struct SystemMatrix {
    /// Measurement dimension: n_pairs * n_samples.
    pub n_rows: usize,
    /// Image dimension: grid.rows * grid.cols.
    pub n_cols: usize,
    pub row_ptr: Vec<usize>,
    pub col_idx: Vec<u32>,
    pub vals: Vec<f64>,
    pub geometry: ArrayGeometry,
    pub grid: ImageGrid,
    pub pulse: Pulse,
    /// Pulse replica sampled at geometry.fs.
    pub replica: Vec<f64>,
    pub c_ref: f64,
    pub amplitude_floor: f64,
    /// Amplitude model tag recorded with cached matrices.
    pub amplitude_model: String,
}

/// Build the sparse operator. `amplitude_floor` is the spreading floor eps
/// in m^2-equivalent units (default: one pixel pitch).
pub fn build_system_matrix(
    geometry: &ArrayGeometry,
    grid: &ImageGrid,
    pulse: &Pulse,
    c_ref: f64,
    amplitude_floor: f64,
) -> Result<SystemMatrix, LinError> {
    if !(c_ref > 0.0) {
        return Err(LinError::Config("c_ref must be positive".into()));
    }
    if !(amplitude_floor > 0.0) {
        return Err(LinError::Config("amplitude_floor must be positive".into()));
    }
    pulse.validate()?;
    let td = transducer_positions(geometry, grid)?;
    let pairs = RfData::pair_order(geometry.n_transducers);
    let n_samples = geometry.n_samples;
    let n_px = grid.n_pixels();
    let n_rows = pairs.len() * n_samples;
    let replica = make_pulse(pulse, geometry.fs);

    let mut row_ptr = Vec::with_capacity(n_rows + 1);
    let mut col_idx: Vec<u32> = Vec::new();
    let mut vals: Vec<f64> = Vec::new();
    row_ptr.push(0);
    // Dense per-pair accumulator [n_samples x n_px]: deposition becomes
    // independent of pixel iteration order.
    let mut block = vec![0.0f64; n_samples * n_px];
    for &(i, j) in &pairs {
        block.iter_mut().for_each(|v| *v = 0.0);
        for r in 0..grid.rows {
            for c in 0..grid.cols {
                let px = r * grid.cols + c;
                let p = grid.pixel_center(r, c);
                let d_tx = ((td[i].0 - p.0).powi(2) + (td[i].1 - p.1).powi(2)).sqrt();
                let d_rx = ((td[j].0 - p.0).powi(2) + (td[j].1 - p.1).powi(2)).sqrt();
                let amp = 1.0 / (d_tx * d_rx).max(amplitude_floor);
                let tf = (d_tx + d_rx) / c_ref * geometry.fs;
                let t0 = tf.floor();
                let frac = tf - t0;
                for (s, &w) in replica.iter().enumerate() {
                    if w == 0.0 {
                        continue;
                    }
                    let bin = t0 as isize + s as isize;
                    let coeff = amp * w;
                    if bin >= 0 && (bin as usize) < n_samples {
                        block[bin as usize * n_px + px] += coeff * (1.0 - frac);
                    }
                    if frac != 0.0 && bin + 1 >= 0 && ((bin + 1) as usize) < n_samples {
                        block[(bin + 1) as usize * n_px + px] += coeff * frac;
                    }
                }
            }
        }
        for t in 0..n_samples {
            let row = &block[t * n_px..(t + 1) * n_px];
            for (px, &v) in row.iter().enumerate() {
                if v != 0.0 {
                    col_idx.push(px as u32);
                    vals.push(v);
                }
            }
            row_ptr.push(col_idx.len());
        }
    }
    if vals.is_empty() {
        return Err(LinError::Empty(n_samples));
    }
    Ok(SystemMatrix {
        n_rows,
        n_cols: n_px,
        row_ptr,
        col_idx,
        vals,
        geometry: geometry.clone(),
        grid: grid.clone(),
        pulse: *pulse,
        replica,
        c_ref,
        amplitude_floor,
        amplitude_model: "two-leg-spreading".into(),
    })
}

// CSR kernels read best with explicit row indices.
#[allow(clippy::needless_range_loop)]
impl SystemMatrix {
    pub fn nnz(&self) -> usize {
        self.vals.len()
    }

    /// y = A v.
    pub fn forward_apply(&self, v: &[f64]) -> Result<Vec<f64>, LinError> {
        if v.len() != self.n_cols {
            return Err(LinError::Dimension { expected: self.n_cols, got: v.len() });
        }
        let mut y = vec![0.0; self.n_rows];
        for r in 0..self.n_rows {
            let mut acc = 0.0;
            for k in self.row_ptr[r]..self.row_ptr[r + 1] {
                acc += self.vals[k] * v[self.col_idx[k] as usize];
            }
            y[r] = acc;
        }
        Ok(y)
    }

    /// x = A^T y.
    pub fn adjoint_apply(&self, y: &[f64]) -> Result<Vec<f64>, LinError> {
        if y.len() != self.n_rows {
            return Err(LinError::Dimension { expected: self.n_rows, got: y.len() });
        }
        let mut x = vec![0.0; self.n_cols];
        for r in 0..self.n_rows {
            let yr = y[r];
            if yr == 0.0 {
                continue;
            }
            for k in self.row_ptr[r]..self.row_ptr[r + 1] {
                x[self.col_idx[k] as usize] += self.vals[k] * yr;
            }
        }
        Ok(x)
    }

    /// Dense materialization for small test instances.
    pub fn to_dense(&self) -> Vec<Vec<f64>> {
        let mut m = vec![vec![0.0; self.n_cols]; self.n_rows];
        for r in 0..self.n_rows {
            for k in self.row_ptr[r]..self.row_ptr[r + 1] {
                m[r][self.col_idx[k] as usize] += self.vals[k];
            }
        }
        m
    }

    /// Serialize for the on-disk cache. Index vectors are stored as f64
    /// tensors (exact for any realistic matrix size).
    pub fn to_container(&self) -> Container {
        let mut c = Container::new();
        let as_f64 = |v: &[usize]| v.iter().map(|&x| x as f64).collect::<Vec<_>>();
        c.insert("row_ptr", Tensor::f64(vec![self.row_ptr.len()], as_f64(&self.row_ptr)));
        c.insert(
            "col_idx",
            Tensor::f64(
                vec![self.col_idx.len()],
                self.col_idx.iter().map(|&x| x as f64).collect(),
            ),
        );
        c.insert("vals", Tensor::f64(vec![self.vals.len()], self.vals.clone()));
        c.insert("replica", Tensor::f64(vec![self.replica.len()], self.replica.clone()));
        c.set_meta("kind", serde_json::json!("system_matrix"));
        c.set_meta("n_rows", serde_json::json!(self.n_rows));
        c.set_meta("n_cols", serde_json::json!(self.n_cols));
        c.set_meta("geometry", serde_json::to_value(&self.geometry).unwrap());
        c.set_meta("grid", serde_json::to_value(&self.grid).unwrap());
        c.set_meta("pulse", serde_json::to_value(self.pulse).unwrap());
        c.set_meta("c_ref", serde_json::json!(self.c_ref));
        c.set_meta("amplitude_floor", serde_json::json!(self.amplitude_floor));
        c.set_meta("amplitude_model", serde_json::json!(self.amplitude_model));
        c
    }

    pub fn from_container(c: &Container) -> Result<SystemMatrix, LinError> {
        let corrupt = |m: &str| LinError::Corrupt(m.into());
        let meta = |k: &str| c.meta.get(k).ok_or_else(|| corrupt(&format!("missing meta {k}")));
        let n_rows = meta("n_rows")?.as_u64().ok_or_else(|| corrupt("n_rows"))? as usize;
        let n_cols = meta("n_cols")?.as_u64().ok_or_else(|| corrupt("n_cols"))? as usize;
        let geometry: ArrayGeometry = serde_json::from_value(meta("geometry")?.clone())
            .map_err(|e| corrupt(&format!("geometry: {e}")))?;
        let grid: ImageGrid = serde_json::from_value(meta("grid")?.clone())
            .map_err(|e| corrupt(&format!("grid: {e}")))?;
        let pulse: Pulse = serde_json::from_value(meta("pulse")?.clone())
            .map_err(|e| corrupt(&format!("pulse: {e}")))?;
        let c_ref = meta("c_ref")?.as_f64().ok_or_else(|| corrupt("c_ref"))?;
        let amplitude_floor =
            meta("amplitude_floor")?.as_f64().ok_or_else(|| corrupt("amplitude_floor"))?;
        let amplitude_model =
            meta("amplitude_model")?.as_str().ok_or_else(|| corrupt("amplitude_model"))?.into();
        let idx = |name: &str| -> Result<Vec<usize>, LinError> {
            c.tensor(name)?
                .as_f64()?
                .iter()
                .map(|&v| {
                    if v >= 0.0 && v.fract() == 0.0 {
                        Ok(v as usize)
                    } else {
                        Err(corrupt(&format!("{name}: non-integer index {v}")))
                    }
                })
                .collect()
        };
        let row_ptr = idx("row_ptr")?;
        let col_idx: Vec<u32> = idx("col_idx")?.into_iter().map(|v| v as u32).collect();
        let vals = c.tensor("vals")?.as_f64()?.to_vec();
        let replica = c.tensor("replica")?.as_f64()?.to_vec();
        if row_ptr.len() != n_rows + 1
            || row_ptr.last() != Some(&vals.len())
            || col_idx.len() != vals.len()
            || row_ptr.windows(2).any(|w| w[0] > w[1])
            || col_idx.iter().any(|&cidx| cidx as usize >= n_cols)
            || vals.iter().any(|v| !v.is_finite())
        {
            return Err(corrupt("inconsistent CSR structure"));
        }
        Ok(SystemMatrix {
            n_rows,
            n_cols,
            row_ptr,
            col_idx,
            vals,
            geometry,
            grid,
            pulse,
            replica,
            c_ref,
            amplitude_floor,
            amplitude_model,
        })
    }
}
