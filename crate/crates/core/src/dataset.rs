//! Dataset generation: phantom -> simulated acquisition -> direct-arrival
//! removal -> back-projection, plus the container schemas for the
//! per-sample artifacts.
//!
//! The acquisition of the homogeneous background does not depend on the
//! phantom, so it is simulated once per dataset and shared as the
//! direct-arrival reference; `resolved_sim` pins the solver's reference
//! speed to the dataset-wide maximum so every run uses identical discrete
//! operators and the subtraction cancels the direct arrival exactly.
//! Containers carry the resolved configuration and hashes but never
//! timestamps, so regenerating a sample is byte-identical.

use crate::config::RunConfig;
use crate::container::{Container, ContainerError, Tensor};
use crate::linmodel::{build_system_matrix, LinError, SystemMatrix};
use crate::phantom::{generate_phantom, PhantomError, SpeedMap};
use crate::rf::{remove_direct_arrival, RfData, RfError};
use crate::wave::{simulate_all, SimConfig, WaveError};
use std::path::Path;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum DatasetError {
    #[error(transparent)]
    Wave(#[from] WaveError),
    #[error(transparent)]
    Rf(#[from] RfError),
    #[error(transparent)]
    Linear(#[from] LinError),
    #[error(transparent)]
    Phantom(#[from] PhantomError),
    #[error(transparent)]
    Container(#[from] ContainerError),
    #[error("corrupt dataset file: {0}")]
    Corrupt(String),
}

/// Simulation config with the reference speed pinned to the dataset-wide
/// maximum, so all phantoms and the background share one discretization.
pub fn resolved_sim(cfg: &RunConfig) -> SimConfig {
    let mut sim = cfg.sim.clone();
    let c = sim.c_max.unwrap_or(0.0).max(cfg.phantom.max_speed());
    sim.c_max = Some(c);
    sim
}

/// Ground-truth label and the map the solver sees: label noise perturbs
/// only the stored target, never the simulated physics.
///
/// Corpus randomness derives from `(split.base_seed, index)`;
/// `PhantomConfig::seed` only applies to direct `generate_phantom` use
/// outside the dataset pipeline.
pub fn phantom_pair(cfg: &RunConfig, index: usize) -> (SpeedMap, SpeedMap) {
    let sim = resolved_sim(cfg);
    let mut ph = cfg.phantom.clone();
    ph.seed = cfg.split.base_seed;
    let label =
        generate_phantom(&ph, index, cfg.grid.rows, cfg.grid.cols).with_ambient(&sim);
    let physical = if ph.gt_noise_sigma == 0.0 {
        label.clone()
    } else {
        ph.gt_noise_sigma = 0.0;
        generate_phantom(&ph, index, cfg.grid.rows, cfg.grid.cols).with_ambient(&sim)
    };
    (label, physical)
}

/// Acquisition of the homogeneous background medium (the direct-arrival
/// reference); phantom-independent, computed once per dataset.
pub fn background_reference(cfg: &RunConfig) -> Result<RfData, DatasetError> {
    let sim = resolved_sim(cfg);
    let map =
        SpeedMap::uniform(cfg.grid.rows, cfg.grid.cols, cfg.phantom.c_background)
            .with_ambient(&sim);
    let medium = map.to_medium(sim.refine);
    Ok(simulate_all(&medium, &cfg.array, &cfg.grid, &cfg.pulse, &sim)?)
}

/// Full-array acquisition of one phantom with the direct arrival removed.
pub fn acquire(
    cfg: &RunConfig,
    map: &SpeedMap,
    reference: &RfData,
) -> Result<RfData, DatasetError> {
    let sim = resolved_sim(cfg);
    let medium = map.to_medium(sim.refine);
    let raw = simulate_all(&medium, &cfg.array, &cfg.grid, &cfg.pulse, &sim)?;
    Ok(remove_direct_arrival(&raw, reference)?)
}

/// Load the system matrix from the cache directory or build and cache it;
/// the file is keyed by the geometry hash.
pub fn load_or_build_matrix(
    cfg: &RunConfig,
    cache_dir: &Path,
) -> Result<SystemMatrix, DatasetError> {
    let key = cfg.geometry_hash();
    let path = cache_dir.join(format!("matrix_{key}.bin"));
    if path.is_file() {
        if let Ok(c) = Container::load(&path) {
            if c.meta_str("geometry_hash") == Some(&key) {
                if let Ok(m) = SystemMatrix::from_container(&c) {
                    return Ok(m);
                }
            }
        }
    }
    let m = build_system_matrix(
        &cfg.array,
        &cfg.grid,
        &cfg.pulse,
        cfg.c_ref(),
        cfg.amplitude_floor(),
    )?;
    std::fs::create_dir_all(cache_dir)
        .map_err(|e| DatasetError::Corrupt(format!("cache dir: {e}")))?;
    let mut c = m.to_container();
    c.set_meta("geometry_hash", key);
    c.save(&path)?;
    Ok(m)
}

/// Back-projection A^T y of an acquisition.
pub fn backproject(matrix: &SystemMatrix, rf: &RfData) -> Result<Vec<f64>, DatasetError> {
    Ok(matrix.adjoint_apply(&rf.vectorize())?)
}

/// One fully processed dataset sample.
#[derive(Debug, Clone, PartialEq)]
pub struct Sample {
    pub index: usize,
    /// Ground-truth speed map, rows*cols.
    pub gt: Vec<f64>,
    /// Direct-arrival-removed acquisition.
    pub rf: RfData,
    /// Back-projection A^T y, rows*cols.
    pub bp: Vec<f64>,
}

/// Generate one sample end to end.
pub fn generate_sample(
    cfg: &RunConfig,
    index: usize,
    reference: &RfData,
    matrix: &SystemMatrix,
) -> Result<Sample, DatasetError> {
    let (label, physical) = phantom_pair(cfg, index);
    let rf = acquire(cfg, &physical, reference)?;
    let bp = backproject(matrix, &rf)?;
    Ok(Sample { index, gt: label.c, rf, bp })
}

/// Serialize a sample; the metadata echoes the resolved configuration and
/// the hashes that key compatibility checks.
pub fn sample_to_container(cfg: &RunConfig, sample: &Sample) -> Container {
    let n = sample.rf.n_transducers();
    let mut c = Container::new();
    c.set_meta("kind", "sample");
    c.set_meta("index", sample.index as u64);
    c.set_meta("split", cfg.split.tag_of(sample.index));
    c.set_meta("config", cfg.to_toml());
    c.set_meta("config_hash", cfg.config_hash());
    c.set_meta("geometry_hash", cfg.geometry_hash());
    c.insert(
        "gt",
        Tensor::f64(vec![cfg.grid.rows, cfg.grid.cols], sample.gt.clone()),
    );
    c.insert(
        "rf",
        Tensor::f64(
            vec![n, n, sample.rf.n_samples],
            sample.rf.as_slice().to_vec(),
        ),
    );
    c.insert(
        "bp",
        Tensor::f64(vec![cfg.grid.rows, cfg.grid.cols], sample.bp.clone()),
    );
    c
}

/// Deserialize a sample, validating shapes against the given config.
pub fn sample_from_container(
    cfg: &RunConfig,
    c: &Container,
) -> Result<Sample, DatasetError> {
    if c.meta_str("kind") != Some("sample") {
        return Err(DatasetError::Corrupt("not a sample container".into()));
    }
    if c.meta_str("geometry_hash") != Some(&cfg.geometry_hash()) {
        return Err(DatasetError::Corrupt(
            "sample was produced under a different acquisition geometry".into(),
        ));
    }
    let index = c
        .meta
        .get("index")
        .and_then(|v| v.as_u64())
        .ok_or_else(|| DatasetError::Corrupt("missing sample index".into()))?
        as usize;
    let px = cfg.grid.rows * cfg.grid.cols;
    let gt = c.tensor("gt")?.as_f64()?.to_vec();
    let bp = c.tensor("bp")?.as_f64()?.to_vec();
    if gt.len() != px || bp.len() != px {
        return Err(DatasetError::Corrupt("image tensor shape mismatch".into()));
    }
    let rf = RfData::from_flat(&cfg.array, c.tensor("rf")?.as_f64()?.to_vec(), true)?;
    Ok(Sample { index, gt, rf, bp })
}

/// Canonical per-sample file name.
pub fn sample_file_name(index: usize) -> String {
    format!("sample_{index:05}.bin")
}
