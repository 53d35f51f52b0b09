//! Randomized concrete phantoms: ground-truth speed-of-sound maps.
//!
//! Each phantom starts from a uniform concrete background and drops in
//! steel rebar disks, defect rectangles (optionally with ASR interiors),
//! and crooked ASR crack polylines, in that order, with later objects
//! overwriting earlier ones. All randomness derives from (seed, index), so
//! phantoms are reproducible and schedule-independent.

use crate::wave::{MediumFields, SimConfig};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum PhantomError {
    #[error("invalid phantom config: {0}")]
    Config(String),
}

/// Ground-truth map: per-pixel speed plus the ambient material constants
/// shared by every pixel.
#[derive(Debug, Clone, PartialEq)]
pub struct SpeedMap {
    pub rows: usize,
    pub cols: usize,
    /// Row-major speeds in m/s.
    pub c: Vec<f64>,
    pub rho0: f64,
    pub alpha0_db: f64,
    pub y_exp: f64,
}

impl SpeedMap {
    pub fn uniform(rows: usize, cols: usize, c: f64) -> SpeedMap {
        SpeedMap {
            rows,
            cols,
            c: vec![c; rows * cols],
            rho0: 2400.0,
            alpha0_db: 0.5,
            y_exp: 1.5,
        }
    }

    /// Attach the solver's ambient constants (density, absorption).
    pub fn with_ambient(mut self, sim: &SimConfig) -> SpeedMap {
        self.rho0 = sim.rho0;
        self.alpha0_db = sim.alpha0_db;
        self.y_exp = sim.y_exp;
        self
    }

    /// Material fields on the simulation grid: each pixel becomes a
    /// refine x refine block of cells.
    pub fn to_medium(&self, refine: usize) -> MediumFields {
        let (rows, cols) = (self.rows * refine, self.cols * refine);
        let mut c0 = vec![0.0; rows * cols];
        for r in 0..rows {
            for c in 0..cols {
                c0[r * cols + c] = self.c[(r / refine) * self.cols + c / refine];
            }
        }
        MediumFields {
            rows,
            cols,
            c0,
            rho0: vec![self.rho0; rows * cols],
            alpha0_db: vec![self.alpha0_db; rows * cols],
            y_exp: self.y_exp,
        }
    }
}

/// Inclusive integer range used for object counts and pixel sizes.
pub type Range2 = [usize; 2];

/// Distribution of the random phantom classes.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PhantomConfig {
    /// Concrete background speed (m/s).
    pub c_background: f64,
    /// Steel rebar speed (m/s).
    pub c_rebar: f64,
    /// ASR (alkali-silica reaction) material speed (m/s).
    pub c_asr: f64,
    /// Defect rectangles draw speeds uniformly from this range (m/s).
    pub defect_speed_range: [f64; 2],
    /// Rebar disks per phantom.
    pub rebar_count: Range2,
    /// Rebar disk radius in pixels.
    pub rebar_radius: Range2,
    /// Defect rectangles per phantom.
    pub rect_count: Range2,
    /// Rectangle width (lateral) in pixels.
    pub rect_width: Range2,
    /// Rectangle height (depth) in pixels.
    pub rect_height: Range2,
    /// Probability a rectangle carries an ASR interior.
    pub asr_interior_prob: f64,
    /// ASR crack polylines per phantom.
    pub crack_count: Range2,
    /// Crack length in pixels.
    pub crack_len: Range2,
    /// Std-dev of Gaussian noise added to the stored label (m/s);
    /// 0 disables, 200 matches the experiment-trained variant.
    pub gt_noise_sigma: f64,
    /// Base seed; each phantom uses stream (seed, index).
    pub seed: u64,
}

impl Default for PhantomConfig {
    fn default() -> Self {
        PhantomConfig {
            c_background: 3680.0,
            c_rebar: 5660.0,
            c_asr: 4500.0,
            defect_speed_range: [2500.0, 5000.0],
            rebar_count: [1, 3],
            rebar_radius: [1, 3],
            rect_count: [0, 2],
            rect_width: [4, 12],
            rect_height: [3, 8],
            asr_interior_prob: 0.5,
            crack_count: [0, 2],
            crack_len: [6, 20],
            gt_noise_sigma: 0.0,
            seed: 7,
        }
    }
}

impl PhantomConfig {
    pub fn validate(&self) -> Result<(), PhantomError> {
        let err = |m: &str| Err(PhantomError::Config(m.into()));
        for (name, v) in [
            ("c_background", self.c_background),
            ("c_rebar", self.c_rebar),
            ("c_asr", self.c_asr),
        ] {
            if !(v > 0.0) {
                return err(&format!("{name} must be positive"));
            }
        }
        let [lo, hi] = self.defect_speed_range;
        if !(lo <= hi && lo > 1000.0 && hi < 7000.0) {
            return err("defect_speed_range must lie within (1000, 7000) m/s");
        }
        for (name, r) in [
            ("rebar_count", self.rebar_count),
            ("rebar_radius", self.rebar_radius),
            ("rect_count", self.rect_count),
            ("rect_width", self.rect_width),
            ("rect_height", self.rect_height),
            ("crack_count", self.crack_count),
            ("crack_len", self.crack_len),
        ] {
            if r[0] > r[1] {
                return err(&format!("{name}: min exceeds max"));
            }
        }
        if !(0.0..=1.0).contains(&self.asr_interior_prob) {
            return err("asr_interior_prob must be in [0, 1]");
        }
        if self.gt_noise_sigma < 0.0 {
            return err("gt_noise_sigma must be nonnegative");
        }
        Ok(())
    }

    /// Largest speed any phantom from this config can contain; pins the
    /// dataset-global solver reference speed.
    pub fn max_speed(&self) -> f64 {
        self.c_background
            .max(self.c_rebar)
            .max(self.c_asr)
            .max(self.defect_speed_range[1])
    }
}

/// Dataset split sizes; per-phantom seeds derive from (base_seed, global
/// index), so the splits are disjoint by construction.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DatasetSplit {
    pub n_train: usize,
    pub n_val: usize,
    pub n_test: usize,
    pub base_seed: u64,
}

impl Default for DatasetSplit {
    fn default() -> Self {
        DatasetSplit { n_train: 1800, n_val: 200, n_test: 200, base_seed: 7 }
    }
}

impl DatasetSplit {
    pub fn validate(&self) -> Result<(), PhantomError> {
        if self.n_train == 0 || self.n_val == 0 || self.n_test == 0 {
            return Err(PhantomError::Config("all splits must be nonempty".into()));
        }
        Ok(())
    }

    pub fn total(&self) -> usize {
        self.n_train + self.n_val + self.n_test
    }

    /// Global phantom index range of a split tag.
    pub fn index_range(&self, split: &str) -> Option<std::ops::Range<usize>> {
        match split {
            "train" => Some(0..self.n_train),
            "val" => Some(self.n_train..self.n_train + self.n_val),
            "test" => Some(self.n_train + self.n_val..self.total()),
            _ => None,
        }
    }

    pub fn tag_of(&self, index: usize) -> &'static str {
        if index < self.n_train {
            "train"
        } else if index < self.n_train + self.n_val {
            "val"
        } else {
            "test"
        }
    }
}

fn sample_range(rng: &mut ChaCha8Rng, r: Range2) -> usize {
    if r[0] == r[1] {
        r[0]
    } else {
        rng.gen_range(r[0]..=r[1])
    }
}

const MAX_RETRIES: usize = 16;

/// Generate phantom `index` of the corpus seeded by `cfg.seed` on a
/// rows x cols grid. Same (cfg, index) always yields the same map.
pub fn generate_phantom(cfg: &PhantomConfig, index: usize, rows: usize, cols: usize) -> SpeedMap {
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    rng.set_stream(index as u64);
    let mut map = SpeedMap::uniform(rows, cols, cfg.c_background);
    let paint = |map: &mut SpeedMap, r: isize, c: isize, v: f64| -> bool {
        if r >= 0 && (r as usize) < map.rows && c >= 0 && (c as usize) < map.cols {
            map.c[r as usize * map.cols + c as usize] = v;
            true
        } else {
            false
        }
    };

    // rebar disks
    let n_rebar = sample_range(&mut rng, cfg.rebar_count);
    for _ in 0..n_rebar {
        for _try in 0..MAX_RETRIES {
            let radius = sample_range(&mut rng, cfg.rebar_radius) as f64;
            let cr = rng.gen_range(0.0..rows as f64);
            let cc = rng.gen_range(0.0..cols as f64);
            let mut painted = false;
            let rr = radius.ceil() as isize;
            for dr in -rr..=rr {
                for dc in -rr..=rr {
                    let pr = cr.floor() as isize + dr;
                    let pc = cc.floor() as isize + dc;
                    let dist2 = (pr as f64 + 0.5 - cr).powi(2) + (pc as f64 + 0.5 - cc).powi(2);
                    if dist2 <= radius * radius {
                        painted |= paint(&mut map, pr, pc, cfg.c_rebar);
                    }
                }
            }
            if painted {
                break;
            }
        }
    }

    // defect rectangles; interiors recorded now, painted after all rectangles
    let n_rect = sample_range(&mut rng, cfg.rect_count);
    let mut interiors: Vec<(usize, usize, usize, usize)> = Vec::new();
    for _ in 0..n_rect {
        for _try in 0..MAX_RETRIES {
            let w = sample_range(&mut rng, cfg.rect_width);
            let h = sample_range(&mut rng, cfg.rect_height);
            let r0 = rng.gen_range(-(h as isize) + 1..rows as isize);
            let c0 = rng.gen_range(-(w as isize) + 1..cols as isize);
            let speed = rng.gen_range(cfg.defect_speed_range[0]..=cfg.defect_speed_range[1]);
            let with_asr = rng.gen_bool(cfg.asr_interior_prob);
            let mut painted = false;
            for r in r0..r0 + h as isize {
                for c in c0..c0 + w as isize {
                    painted |= paint(&mut map, r, c, speed);
                }
            }
            if painted {
                if with_asr && w > 2 && h > 2 {
                    let rr0 = (r0 + 1).max(0) as usize;
                    let cc0 = (c0 + 1).max(0) as usize;
                    let rr1 = ((r0 + h as isize - 1).min(rows as isize)).max(0) as usize;
                    let cc1 = ((c0 + w as isize - 1).min(cols as isize)).max(0) as usize;
                    if rr0 < rr1 && cc0 < cc1 {
                        interiors.push((rr0, cc0, rr1, cc1));
                    }
                }
                break;
            }
        }
    }
    for (r0, c0, r1, c1) in interiors {
        for r in r0..r1 {
            for c in c0..c1 {
                map.c[r * cols + c] = cfg.c_asr;
            }
        }
    }

    // crooked crack polylines: unit steps along a random primary axis with
    // +-1 pixel transverse jitter
    let n_crack = sample_range(&mut rng, cfg.crack_count);
    for _ in 0..n_crack {
        for _try in 0..MAX_RETRIES {
            let len = sample_range(&mut rng, cfg.crack_len);
            let horizontal = rng.gen_bool(0.5);
            let mut r = rng.gen_range(0..rows) as isize;
            let mut c = rng.gen_range(0..cols) as isize;
            let dir: isize = if rng.gen_bool(0.5) { 1 } else { -1 };
            let mut painted = false;
            for _ in 0..len {
                painted |= paint(&mut map, r, c, cfg.c_asr);
                let jitter = rng.gen_range(-1i64..=1) as isize;
                if horizontal {
                    c += dir;
                    r += jitter;
                } else {
                    r += dir;
                    c += jitter;
                }
            }
            if painted {
                break;
            }
        }
    }

    if cfg.gt_noise_sigma > 0.0 {
        let normal = Normal::new(0.0, cfg.gt_noise_sigma).unwrap();
        for v in map.c.iter_mut() {
            *v += normal.sample(&mut rng);
        }
    }
    map
}
