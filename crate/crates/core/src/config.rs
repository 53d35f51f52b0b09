//! Run configuration: one TOML file covering every pipeline stage.
//!
//! Unknown keys are rejected so typos fail loudly. Every field has a
//! documented default, and the fully resolved configuration is echoed into
//! the metadata of every output file together with a content hash, which
//! also keys the system-matrix cache.

use crate::geom::{ArrayGeometry, ImageGrid, Pulse};
use crate::metrics::MetricParams;
use crate::neural::{NetConfig, TrainConfig};
use crate::phantom::{DatasetSplit, PhantomConfig};
use crate::recon::{PriorParams, SolveOpts};
use crate::wave::SimConfig;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use std::path::Path;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
    #[error("config parse error: {0}")]
    Parse(#[from] toml::de::Error),
    #[error("invalid config: {0}")]
    Invalid(String),
}

/// Parameters of the linear measurement model.
#[derive(Debug, Clone, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LinearConfig {
    /// Straight-ray propagation speed; defaults to the phantom background speed.
    pub c_ref: Option<f64>,
    /// Floor on the two-leg distance product in the amplitude model;
    /// defaults to one pixel pitch.
    pub amplitude_floor: Option<f64>,
}

/// Everything the pipeline needs, grouped per stage.
#[derive(Debug, Clone, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    /// Output directory for all artifacts.
    pub out_dir: String,
    /// Master seed; stage seeds derive from it unless set explicitly.
    pub seed: u64,
    pub grid: ImageGrid,
    pub array: ArrayGeometry,
    pub pulse: Pulse,
    pub sim: SimConfig,
    pub phantom: PhantomConfig,
    pub split: DatasetSplit,
    pub linear: LinearConfig,
    pub prior: PriorParams,
    pub lmbir: SolveOpts,
    pub network: NetConfig,
    pub train: TrainConfig,
    pub metrics: MetricParams,
}

impl RunConfig {
    pub fn load(path: impl AsRef<Path>) -> Result<RunConfig, ConfigError> {
        let text = std::fs::read_to_string(path)?;
        let cfg: RunConfig = toml::from_str(&text)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        let bad = |m: String| ConfigError::Invalid(m);
        self.grid.validate().map_err(|e| bad(format!("grid: {e}")))?;
        self.array.validate().map_err(|e| bad(format!("array: {e}")))?;
        self.pulse.validate().map_err(|e| bad(format!("pulse: {e}")))?;
        crate::geom::transducer_positions(&self.array, &self.grid)
            .map_err(|e| bad(format!("array/grid: {e}")))?;
        self.sim.validate().map_err(|e| bad(format!("sim: {e}")))?;
        self.phantom.validate().map_err(|e| bad(format!("phantom: {e}")))?;
        self.split.validate().map_err(|e| bad(format!("split: {e}")))?;
        self.prior.validate().map_err(|e| bad(format!("prior: {e}")))?;
        self.lmbir.validate().map_err(|e| bad(format!("lmbir: {e}")))?;
        self.network.validate().map_err(|e| bad(format!("network: {e}")))?;
        self.train.validate().map_err(|e| bad(format!("train: {e}")))?;
        self.metrics.validate().map_err(|e| bad(format!("metrics: {e}")))?;
        if let Some(c) = self.linear.c_ref {
            if !(c > 0.0) {
                return Err(bad("linear: c_ref must be positive".into()));
            }
        }
        Ok(())
    }

    /// Resolved linear-model speed (configured value or background speed).
    pub fn c_ref(&self) -> f64 {
        self.linear.c_ref.unwrap_or(self.phantom.c_background)
    }

    /// Resolved amplitude floor (configured value or one pixel pitch).
    pub fn amplitude_floor(&self) -> f64 {
        self.linear.amplitude_floor.unwrap_or(self.grid.pitch)
    }

    /// Canonical serialized form, echoed into output metadata.
    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    /// Hash of the full resolved configuration.
    pub fn config_hash(&self) -> String {
        hex16(self.to_toml().as_bytes())
    }

    /// Hash of the acquisition geometry only (grid, array, pulse, linear
    /// model); artifacts with different geometry hashes are incomparable.
    pub fn geometry_hash(&self) -> String {
        let key = format!(
            "{}|{}|{}|{:e}|{:e}",
            toml::to_string(&self.grid).unwrap(),
            toml::to_string(&self.array).unwrap(),
            toml::to_string(&self.pulse).unwrap(),
            self.c_ref(),
            self.amplitude_floor(),
        );
        hex16(key.as_bytes())
    }
}

fn hex16(bytes: &[u8]) -> String {
    let digest = Sha256::digest(bytes);
    digest[..8].iter().map(|b| format!("{b:02x}")).collect()
}

/// Short content hash (first 8 bytes of SHA-256, hex) for keying caches
/// and recording artifact inputs.
pub fn content_hash(bytes: &[u8]) -> String {
    hex16(bytes)
}
