//! Direct deep-learning reconstruction: a three-scale U-Net regressing a
//! speed-of-sound image from a back-projected RF image, trained with
//! SGD + momentum on scaled mean-squared error.
//!
//! The network is built from the primitives in [`crate::nn`] and carries an
//! exact reverse-mode backward pass; no autodiff framework is involved.
//! Encoder: two [conv3x3 -> BN -> ReLU] stages per scale with 2x2 max
//! pooling between scales; bottleneck at the coarsest scale; decoder:
//! nearest-neighbor 2x upsample -> conv3x3 -> skip concatenation -> two
//! [conv3x3 -> BN -> ReLU] stages; final 1x1 convolution to one channel.
//! The raw output is mapped to physical units as
//! `pred = c_center + c_scale * raw`, and inputs are standardized with
//! dataset statistics frozen at training time.
//!
//! All computation is single-threaded with fixed iteration order, so a
//! fixed seed reproduces training bit-for-bit.

use crate::container::{Container, ContainerError, Tensor};
use crate::fft2::Real;
use crate::nn::{
    concat, concat_backward, maxpool2, maxpool2_backward, relu, relu_backward, upsample2,
    upsample2_backward, Bn, BnCache, BnGrad, Conv, ConvGrad, Feat,
};
use crate::wave::Precision;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum NeuralError {
    #[error("invalid network config: {0}")]
    Config(String),
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("non-finite loss at epoch {epoch}, sample {sample}")]
    NonFinite { epoch: usize, sample: usize },
    #[error(transparent)]
    Container(#[from] ContainerError),
    #[error("corrupt network file: {0}")]
    Corrupt(String),
}

/// Architecture descriptor and output scaling.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct NetConfig {
    /// Feature channels at the three scales (fine to coarse).
    pub channels: [usize; 3],
    /// Additive output offset in m/s.
    pub c_center: f64,
    /// Multiplicative output scale in m/s; also the loss normalization.
    pub c_scale: f64,
}

impl Default for NetConfig {
    fn default() -> Self {
        NetConfig { channels: [64, 128, 256], c_center: 3680.0, c_scale: 1000.0 }
    }
}

impl NetConfig {
    pub fn validate(&self) -> Result<(), NeuralError> {
        if self.channels.contains(&0) {
            return Err(NeuralError::Config("channels must be positive".into()));
        }
        if !(self.c_scale > 0.0) || !self.c_scale.is_finite() {
            return Err(NeuralError::Config("c_scale must be positive".into()));
        }
        if !self.c_center.is_finite() {
            return Err(NeuralError::Config("c_center must be finite".into()));
        }
        Ok(())
    }
}

/// Optimization hyperparameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub epochs: usize,
    /// Only single-sample steps are supported.
    pub batch_size: usize,
    pub learning_rate: f64,
    pub momentum: f64,
    /// Seed for weight init and epoch shuffling.
    pub seed: u64,
    /// Reshuffle the training order every epoch.
    pub shuffle: bool,
    /// Write a checkpoint every N epochs (0 disables periodic checkpoints).
    pub checkpoint_stride: usize,
    /// Arithmetic used during training; parameters are always stored as
    /// f64 (which embeds f32 exactly).
    pub precision: Precision,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 40,
            batch_size: 1,
            learning_rate: 1e-4,
            momentum: 0.5,
            seed: 7,
            shuffle: true,
            checkpoint_stride: 0,
            precision: Precision::F64,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), NeuralError> {
        if self.epochs == 0 {
            return Err(NeuralError::Config("epochs must be at least 1".into()));
        }
        if self.batch_size != 1 {
            return Err(NeuralError::Config("batch_size must be 1".into()));
        }
        if !(self.learning_rate > 0.0) {
            return Err(NeuralError::Config("learning_rate must be positive".into()));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(NeuralError::Config("momentum must lie in [0, 1)".into()));
        }
        Ok(())
    }
}

/// Two [conv3x3 -> BN -> ReLU] stages.
#[derive(Debug, Clone, PartialEq)]
pub struct Block<S> {
    pub c1: Conv<S>,
    pub b1: Bn<S>,
    pub c2: Conv<S>,
    pub b2: Bn<S>,
}

#[derive(Debug, Clone)]
pub struct BlockGrad<S> {
    pub c1: ConvGrad<S>,
    pub b1: BnGrad<S>,
    pub c2: ConvGrad<S>,
    pub b2: BnGrad<S>,
}

#[derive(Debug, Clone)]
pub struct BlockCache<S> {
    input: Feat<S>,
    bn1: BnCache<S>,
    act1: Feat<S>,
    bn2: BnCache<S>,
    act2: Feat<S>,
}

impl<S: Real> Block<S> {
    fn zeros(cin: usize, cout: usize) -> Block<S> {
        Block {
            c1: Conv::zeros(cin, cout, 3),
            b1: Bn::new(cout),
            c2: Conv::zeros(cout, cout, 3),
            b2: Bn::new(cout),
        }
    }

    fn init(&mut self, rng: &mut ChaCha8Rng) {
        self.c1.init_kaiming(rng);
        self.c2.init_kaiming(rng);
    }

    fn grad_zeros(&self) -> BlockGrad<S> {
        BlockGrad {
            c1: self.c1.grad_zeros(),
            b1: self.b1.grad_zeros(),
            c2: self.c2.grad_zeros(),
            b2: self.b2.grad_zeros(),
        }
    }

    fn forward_train(&mut self, x: &Feat<S>, col: &mut Vec<S>) -> (Feat<S>, BlockCache<S>) {
        let y1 = self.c1.forward(x, col);
        let (n1, bn1) = self.b1.forward_train(&y1);
        let act1 = relu(&n1);
        let y2 = self.c2.forward(&act1, col);
        let (n2, bn2) = self.b2.forward_train(&y2);
        let act2 = relu(&n2);
        let cache =
            BlockCache { input: x.clone(), bn1, act1: act1.clone(), bn2, act2: act2.clone() };
        (act2, cache)
    }

    fn forward_eval(&self, x: &Feat<S>, col: &mut Vec<S>) -> Feat<S> {
        let y1 = self.c1.forward(x, col);
        let act1 = relu(&self.b1.forward_eval(&y1));
        let y2 = self.c2.forward(&act1, col);
        relu(&self.b2.forward_eval(&y2))
    }

    fn backward(
        &self,
        cache: &BlockCache<S>,
        dy: &Feat<S>,
        col: &mut Vec<S>,
        g: &mut BlockGrad<S>,
    ) -> Feat<S> {
        let dn2 = relu_backward(&cache.act2, dy);
        let dy2 = self.b2.backward(&cache.bn2, &dn2, &mut g.b2);
        let dact1 = self.c2.backward(&cache.act1, &dy2, col, &mut g.c2);
        let dn1 = relu_backward(&cache.act1, &dact1);
        let dy1 = self.b1.backward(&cache.bn1, &dn1, &mut g.b1);
        self.c1.backward(&cache.input, &dy1, col, &mut g.c1)
    }
}

/// All network state: weights, batch-norm statistics, architecture, and
/// the frozen input-normalization constants.
#[derive(Debug, Clone, PartialEq)]
pub struct NetworkParams<S> {
    pub cfg: NetConfig,
    /// Mean of training back-projections, frozen at training time.
    pub norm_mean: f64,
    /// Standard deviation of training back-projections.
    pub norm_std: f64,
    pub enc1: Block<S>,
    pub enc2: Block<S>,
    pub mid: Block<S>,
    pub up2: Conv<S>,
    pub dec2: Block<S>,
    pub up1: Conv<S>,
    pub dec1: Block<S>,
    pub out: Conv<S>,
}

/// Gradients (and, reused, SGD velocities) shaped like the trainable
/// parameters of a network.
#[derive(Debug, Clone)]
pub struct Grads<S> {
    pub enc1: BlockGrad<S>,
    pub enc2: BlockGrad<S>,
    pub mid: BlockGrad<S>,
    pub up2: ConvGrad<S>,
    pub dec2: BlockGrad<S>,
    pub up1: ConvGrad<S>,
    pub dec1: BlockGrad<S>,
    pub out: ConvGrad<S>,
}

/// Saved activations from a training-mode forward pass.
pub struct UnetCache<S> {
    x0: Feat<S>,
    enc1: BlockCache<S>,
    arg1: Vec<u32>,
    enc2: BlockCache<S>,
    arg2: Vec<u32>,
    mid: BlockCache<S>,
    u2: Feat<S>,
    dec2: BlockCache<S>,
    u1: Feat<S>,
    dec1: BlockCache<S>,
    raw: Feat<S>,
}

/// Forward-pass mode: training uses batch statistics and updates running
/// averages; evaluation uses the frozen running statistics.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

impl<S: Real> NetworkParams<S> {
    /// All-zero parameters (predicts exactly `c_center` everywhere).
    pub fn zeros(cfg: &NetConfig) -> NetworkParams<S> {
        let [c0, c1, c2] = cfg.channels;
        let mut p = NetworkParams {
            cfg: cfg.clone(),
            norm_mean: 0.0,
            norm_std: 1.0,
            enc1: Block::zeros(1, c0),
            enc2: Block::zeros(c0, c1),
            mid: Block::zeros(c1, c2),
            up2: Conv::zeros(c2, c1, 3),
            dec2: Block::zeros(2 * c1, c1),
            up1: Conv::zeros(c1, c0, 3),
            dec1: Block::zeros(2 * c0, c0),
            out: Conv::zeros(c0, 1, 1),
        };
        for bn in [
            &mut p.enc1.b1, &mut p.enc1.b2, &mut p.enc2.b1, &mut p.enc2.b2, &mut p.mid.b1,
            &mut p.mid.b2, &mut p.dec2.b1, &mut p.dec2.b2, &mut p.dec1.b1, &mut p.dec1.b2,
        ] {
            for v in bn.gamma.iter_mut() {
                *v = S::default();
            }
            for v in bn.r_var.iter_mut() {
                *v = S::default();
            }
        }
        p
    }

    /// Kaiming-uniform (fan-in) weight init; zero biases; BN scale 1,
    /// shift 0, running mean 0, running variance 1.
    pub fn new(cfg: &NetConfig, seed: u64) -> NetworkParams<S> {
        let mut p = NetworkParams::zeros(cfg);
        for bn in [
            &mut p.enc1.b1, &mut p.enc1.b2, &mut p.enc2.b1, &mut p.enc2.b2, &mut p.mid.b1,
            &mut p.mid.b2, &mut p.dec2.b1, &mut p.dec2.b2, &mut p.dec1.b1, &mut p.dec1.b2,
        ] {
            for v in bn.gamma.iter_mut() {
                *v = S::of(1.0);
            }
            for v in bn.r_var.iter_mut() {
                *v = S::of(1.0);
            }
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        p.enc1.init(&mut rng);
        p.enc2.init(&mut rng);
        p.mid.init(&mut rng);
        p.up2.init_kaiming(&mut rng);
        p.dec2.init(&mut rng);
        p.up1.init_kaiming(&mut rng);
        p.dec1.init(&mut rng);
        p.out.init_kaiming(&mut rng);
        p
    }

    pub fn grad_zeros(&self) -> Grads<S> {
        Grads {
            enc1: self.enc1.grad_zeros(),
            enc2: self.enc2.grad_zeros(),
            mid: self.mid.grad_zeros(),
            up2: self.up2.grad_zeros(),
            dec2: self.dec2.grad_zeros(),
            up1: self.up1.grad_zeros(),
            dec1: self.dec1.grad_zeros(),
            out: self.out.grad_zeros(),
        }
    }

    fn check_shape(&self, input: &[f64], rows: usize, cols: usize) -> Result<(), NeuralError> {
        if input.len() != rows * cols {
            return Err(NeuralError::Shape(format!(
                "input has {} values for a {rows}x{cols} image",
                input.len()
            )));
        }
        if !rows.is_multiple_of(4) || !cols.is_multiple_of(4) || rows == 0 || cols == 0 {
            return Err(NeuralError::Shape(format!(
                "rows and cols must be positive multiples of 4, got {rows}x{cols}"
            )));
        }
        Ok(())
    }

    fn normalize(&self, input: &[f64], rows: usize, cols: usize) -> Feat<S> {
        let vals: Vec<f64> =
            input.iter().map(|&v| (v - self.norm_mean) / self.norm_std).collect();
        Feat::from_f64(1, rows, cols, &vals)
    }

    fn scale_output(&self, raw: &Feat<S>) -> Vec<f64> {
        raw.d.iter().map(|&v| self.cfg.c_center + self.cfg.c_scale * v.dbl()).collect()
    }

    /// Training-mode forward pass; updates BN running statistics and
    /// returns the prediction plus the cache for [`Self::backward`].
    pub fn forward_train(
        &mut self,
        input: &[f64],
        rows: usize,
        cols: usize,
    ) -> Result<(Vec<f64>, UnetCache<S>), NeuralError> {
        self.check_shape(input, rows, cols)?;
        let mut col = Vec::new();
        let x0 = self.normalize(input, rows, cols);
        let (a1, enc1) = self.enc1.forward_train(&x0, &mut col);
        let (p1, arg1) = maxpool2(&a1);
        let (a2, enc2) = self.enc2.forward_train(&p1, &mut col);
        let (p2, arg2) = maxpool2(&a2);
        let (a3, mid) = self.mid.forward_train(&p2, &mut col);
        let u2 = upsample2(&a3);
        let b2 = self.up2.forward(&u2, &mut col);
        let k2 = concat(&b2, &a2);
        let (a4, dec2) = self.dec2.forward_train(&k2, &mut col);
        let u1 = upsample2(&a4);
        let b1 = self.up1.forward(&u1, &mut col);
        let k1 = concat(&b1, &a1);
        let (a5, dec1) = self.dec1.forward_train(&k1, &mut col);
        let raw = self.out.forward(&a5, &mut col);
        let pred = self.scale_output(&raw);
        Ok((pred, UnetCache { x0, enc1, arg1, enc2, arg2, mid, u2, dec2, u1, dec1, raw }))
    }

    /// Evaluation-mode forward pass (frozen statistics, bit-deterministic).
    pub fn forward_eval(
        &self,
        input: &[f64],
        rows: usize,
        cols: usize,
    ) -> Result<Vec<f64>, NeuralError> {
        self.check_shape(input, rows, cols)?;
        let mut col = Vec::new();
        let x0 = self.normalize(input, rows, cols);
        let a1 = self.enc1.forward_eval(&x0, &mut col);
        let (p1, _) = maxpool2(&a1);
        let a2 = self.enc2.forward_eval(&p1, &mut col);
        let (p2, _) = maxpool2(&a2);
        let a3 = self.mid.forward_eval(&p2, &mut col);
        let b2 = self.up2.forward(&upsample2(&a3), &mut col);
        let a4 = self.dec2.forward_eval(&concat(&b2, &a2), &mut col);
        let b1 = self.up1.forward(&upsample2(&a4), &mut col);
        let a5 = self.dec1.forward_eval(&concat(&b1, &a1), &mut col);
        let raw = self.out.forward(&a5, &mut col);
        Ok(self.scale_output(&raw))
    }

    /// Exact gradients of `scale * unet_loss(pred, target)` with respect to
    /// every trainable parameter, given the cache of a training-mode
    /// forward pass on the same input.
    pub fn backward(&self, cache: &UnetCache<S>, target: &[f64], scale: f64) -> Grads<S> {
        let raw = &cache.raw;
        let n = raw.d.len() as f64;
        let mut g = self.grad_zeros();
        let mut col = Vec::new();
        // d loss / d raw = scale * 2 (pred - target) / (c_scale * n)
        let mut draw = Feat::zeros(1, raw.h, raw.w);
        for (t, &r) in raw.d.iter().enumerate() {
            let pred = self.cfg.c_center + self.cfg.c_scale * r.dbl();
            draw.d[t] = S::of(scale * 2.0 * (pred - target[t]) / (self.cfg.c_scale * n));
        }
        let da5 = self.out.backward(&cache.dec1.act2, &draw, &mut col, &mut g.out);
        let dk1 = self.dec1.backward(&cache.dec1, &da5, &mut col, &mut g.dec1);
        let (db1, da1_skip) = concat_backward(&dk1, self.cfg.channels[0]);
        let du1 = self.up1.backward(&cache.u1, &db1, &mut col, &mut g.up1);
        let da4 = upsample2_backward(&du1);
        let dk2 = self.dec2.backward(&cache.dec2, &da4, &mut col, &mut g.dec2);
        let (db2, da2_skip) = concat_backward(&dk2, self.cfg.channels[1]);
        let du2 = self.up2.backward(&cache.u2, &db2, &mut col, &mut g.up2);
        let da3 = upsample2_backward(&du2);
        let dp2 = self.mid.backward(&cache.mid, &da3, &mut col, &mut g.mid);
        let mut da2 = maxpool2_backward(&dp2, &cache.arg2, cache.enc2.act2.h, cache.enc2.act2.w);
        for (v, &s) in da2.d.iter_mut().zip(&da2_skip.d) {
            *v = *v + s;
        }
        let dp1 = self.enc2.backward(&cache.enc2, &da2, &mut col, &mut g.enc2);
        let mut da1 = maxpool2_backward(&dp1, &cache.arg1, cache.x0.h, cache.x0.w);
        for (v, &s) in da1.d.iter_mut().zip(&da1_skip.d) {
            *v = *v + s;
        }
        self.enc1.backward(&cache.enc1, &da1, &mut col, &mut g.enc1);
        g
    }

    /// Trainable tensors in canonical order (excludes running statistics).
    pub fn trainable(&self) -> Vec<&Vec<S>> {
        let mut v = Vec::new();
        for b in [&self.enc1, &self.enc2, &self.mid, &self.dec2, &self.dec1] {
            v.extend([&b.c1.w, &b.c1.b, &b.b1.gamma, &b.b1.beta]);
            v.extend([&b.c2.w, &b.c2.b, &b.b2.gamma, &b.b2.beta]);
        }
        v.extend([&self.up2.w, &self.up2.b, &self.up1.w, &self.up1.b]);
        v.extend([&self.out.w, &self.out.b]);
        v
    }

    pub fn trainable_mut(&mut self) -> Vec<&mut Vec<S>> {
        let NetworkParams { enc1, enc2, mid, up2, dec2, up1, dec1, out, .. } = self;
        let mut v = Vec::new();
        for b in [enc1, enc2, mid, dec2, dec1] {
            v.extend([&mut b.c1.w, &mut b.c1.b, &mut b.b1.gamma, &mut b.b1.beta]);
            v.extend([&mut b.c2.w, &mut b.c2.b, &mut b.b2.gamma, &mut b.b2.beta]);
        }
        v.extend([&mut up2.w, &mut up2.b, &mut up1.w, &mut up1.b]);
        v.extend([&mut out.w, &mut out.b]);
        v
    }

    /// Every persisted tensor: trainable parameters plus running stats.
    fn persisted(&self) -> Vec<(String, &Vec<S>, Vec<usize>)> {
        let mut v = Vec::new();
        let blocks = [
            ("enc1", &self.enc1),
            ("enc2", &self.enc2),
            ("mid", &self.mid),
            ("dec2", &self.dec2),
            ("dec1", &self.dec1),
        ];
        for (name, b) in blocks {
            for (part, c) in [("c1", &b.c1), ("c2", &b.c2)] {
                v.push((format!("{name}.{part}.w"), &c.w, vec![c.cout, c.cin, c.k, c.k]));
                v.push((format!("{name}.{part}.b"), &c.b, vec![c.cout]));
            }
            for (part, bn) in [("b1", &b.b1), ("b2", &b.b2)] {
                let c = bn.gamma.len();
                v.push((format!("{name}.{part}.gamma"), &bn.gamma, vec![c]));
                v.push((format!("{name}.{part}.beta"), &bn.beta, vec![c]));
                v.push((format!("{name}.{part}.r_mean"), &bn.r_mean, vec![c]));
                v.push((format!("{name}.{part}.r_var"), &bn.r_var, vec![c]));
            }
        }
        for (name, c) in [("up2", &self.up2), ("up1", &self.up1), ("out", &self.out)] {
            v.push((format!("{name}.w"), &c.w, vec![c.cout, c.cin, c.k, c.k]));
            v.push((format!("{name}.b"), &c.b, vec![c.cout]));
        }
        v
    }

    fn persisted_mut(&mut self) -> Vec<(String, &mut Vec<S>)> {
        let NetworkParams { enc1, enc2, mid, up2, dec2, up1, dec1, out, .. } = self;
        let mut v: Vec<(String, &mut Vec<S>)> = Vec::new();
        let blocks =
            [("enc1", enc1), ("enc2", enc2), ("mid", mid), ("dec2", dec2), ("dec1", dec1)];
        for (name, b) in blocks {
            for (part, c) in [("c1", &mut b.c1), ("c2", &mut b.c2)] {
                v.push((format!("{name}.{part}.w"), &mut c.w));
                v.push((format!("{name}.{part}.b"), &mut c.b));
            }
            for (part, bn) in [("b1", &mut b.b1), ("b2", &mut b.b2)] {
                v.push((format!("{name}.{part}.gamma"), &mut bn.gamma));
                v.push((format!("{name}.{part}.beta"), &mut bn.beta));
                v.push((format!("{name}.{part}.r_mean"), &mut bn.r_mean));
                v.push((format!("{name}.{part}.r_var"), &mut bn.r_var));
            }
        }
        for (name, c) in [("up2", up2), ("up1", up1), ("out", out)] {
            v.push((format!("{name}.w"), &mut c.w));
            v.push((format!("{name}.b"), &mut c.b));
        }
        v
    }

    /// Serialize to a tensor container (values stored as f64, which embeds
    /// f32 exactly, so round trips are bit-exact in either precision).
    pub fn to_container(&self) -> Container {
        let mut c = Container::new();
        c.set_meta("kind", "network");
        c.set_meta("network", serde_json::to_value(&self.cfg).expect("netconfig serializes"));
        c.set_meta("norm_mean", self.norm_mean);
        c.set_meta("norm_std", self.norm_std);
        for (name, data, shape) in self.persisted() {
            c.insert(&name, Tensor::f64(shape, data.iter().map(|&v| v.dbl()).collect()));
        }
        c
    }

    pub fn from_container(c: &Container) -> Result<NetworkParams<S>, NeuralError> {
        let cfg_val = c
            .meta
            .get("network")
            .ok_or_else(|| NeuralError::Corrupt("missing network descriptor".into()))?;
        let cfg: NetConfig = serde_json::from_value(cfg_val.clone())
            .map_err(|e| NeuralError::Corrupt(format!("bad network descriptor: {e}")))?;
        cfg.validate()?;
        let mean = c.meta.get("norm_mean").and_then(|v| v.as_f64());
        let std = c.meta.get("norm_std").and_then(|v| v.as_f64());
        let (Some(norm_mean), Some(norm_std)) = (mean, std) else {
            return Err(NeuralError::Corrupt("missing normalization constants".into()));
        };
        let mut p = NetworkParams::zeros(&cfg);
        p.norm_mean = norm_mean;
        p.norm_std = norm_std;
        for (name, dst) in p.persisted_mut() {
            let t = c.tensor(&name)?;
            let vals = t.as_f64()?;
            if vals.len() != dst.len() {
                return Err(NeuralError::Corrupt(format!(
                    "tensor {name} has {} values, expected {}",
                    vals.len(),
                    dst.len()
                )));
            }
            for (d, &v) in dst.iter_mut().zip(vals) {
                *d = S::of(v);
            }
        }
        Ok(p)
    }
}

/// Convenience wrapper selecting between training and evaluation forward
/// passes; training mode updates BN running statistics in place.
pub fn unet_forward<S: Real>(
    params: &mut NetworkParams<S>,
    input: &[f64],
    rows: usize,
    cols: usize,
    mode: Mode,
) -> Result<Vec<f64>, NeuralError> {
    match mode {
        Mode::Train => Ok(params.forward_train(input, rows, cols)?.0),
        Mode::Eval => params.forward_eval(input, rows, cols),
    }
}

/// Scaled mean-squared error: mean(((pred - target) / c_scale)^2).
pub fn unet_loss(pred: &[f64], target: &[f64], c_scale: f64) -> f64 {
    assert_eq!(pred.len(), target.len());
    let n = pred.len() as f64;
    pred.iter()
        .zip(target)
        .map(|(&p, &t)| {
            let d = (p - t) / c_scale;
            d * d
        })
        .sum::<f64>()
        / n
}

/// One SGD + momentum update on a flat tensor:
/// v <- momentum * v - lr * g; w <- w + v.
pub fn sgd_update<S: Real>(w: &mut [S], g: &[S], v: &mut [S], lr: f64, momentum: f64) {
    let (lr, mu) = (S::of(lr), S::of(momentum));
    for ((wv, &gv), vv) in w.iter_mut().zip(g).zip(v.iter_mut()) {
        *vv = mu * *vv - lr * gv;
        *wv = *wv + *vv;
    }
}

/// Gradient tensors in the order matching [`NetworkParams::trainable`].
impl<S: Real> Grads<S> {
    pub fn tensors(&self) -> Vec<&Vec<S>> {
        let mut v = Vec::new();
        for b in [&self.enc1, &self.enc2, &self.mid, &self.dec2, &self.dec1] {
            v.extend([&b.c1.w, &b.c1.b, &b.b1.gamma, &b.b1.beta]);
            v.extend([&b.c2.w, &b.c2.b, &b.b2.gamma, &b.b2.beta]);
        }
        v.extend([&self.up2.w, &self.up2.b, &self.up1.w, &self.up1.b]);
        v.extend([&self.out.w, &self.out.b]);
        v
    }

    pub fn tensors_mut(&mut self) -> Vec<&mut Vec<S>> {
        let Grads { enc1, enc2, mid, up2, dec2, up1, dec1, out } = self;
        let mut v = Vec::new();
        for b in [enc1, enc2, mid, dec2, dec1] {
            v.extend([&mut b.c1.w, &mut b.c1.b, &mut b.b1.gamma, &mut b.b1.beta]);
            v.extend([&mut b.c2.w, &mut b.c2.b, &mut b.b2.gamma, &mut b.b2.beta]);
        }
        v.extend([&mut up2.w, &mut up2.b, &mut up1.w, &mut up1.b]);
        v.extend([&mut out.w, &mut out.b]);
        v
    }
}

/// SGD + momentum step over every trainable tensor.
pub fn sgd_step<S: Real>(
    params: &mut NetworkParams<S>,
    grads: &Grads<S>,
    vel: &mut Grads<S>,
    lr: f64,
    momentum: f64,
) {
    let pt = params.trainable_mut();
    let gt = grads.tensors();
    let vt = vel.tensors_mut();
    for ((w, g), v) in pt.into_iter().zip(gt).zip(vt) {
        sgd_update(w, g, v, lr, momentum);
    }
}

/// One training example: back-projected input and ground-truth speed map,
/// both rows*cols in row-major order.
#[derive(Debug, Clone)]
pub struct TrainSample {
    pub input: Vec<f64>,
    pub target: Vec<f64>,
}

/// Training and validation splits sharing one image shape.
#[derive(Debug, Clone)]
pub struct TrainSet {
    pub rows: usize,
    pub cols: usize,
    pub train: Vec<TrainSample>,
    pub val: Vec<TrainSample>,
}

impl TrainSet {
    pub fn validate(&self) -> Result<(), NeuralError> {
        let n = self.rows * self.cols;
        if !self.rows.is_multiple_of(4) || !self.cols.is_multiple_of(4) || n == 0 {
            return Err(NeuralError::Shape(format!(
                "rows and cols must be positive multiples of 4, got {}x{}",
                self.rows, self.cols
            )));
        }
        if self.train.is_empty() {
            return Err(NeuralError::Config("training split is empty".into()));
        }
        for s in self.train.iter().chain(&self.val) {
            if s.input.len() != n || s.target.len() != n {
                return Err(NeuralError::Shape(format!(
                    "sample has {}/{} values for a {}x{} image",
                    s.input.len(),
                    s.target.len(),
                    self.rows,
                    self.cols
                )));
            }
        }
        Ok(())
    }
}

/// Per-epoch mean losses (training loss averages the pre-update losses of
/// the epoch's single-sample steps; validation runs in eval mode).
#[derive(Debug, Clone, PartialEq)]
pub struct EpochStats {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_loss: f64,
}

/// Loss curves as CSV.
pub fn curves_to_csv(curves: &[EpochStats]) -> String {
    let mut s = String::from("epoch,train_loss,val_loss\n");
    for e in curves {
        s.push_str(&format!("{},{:e},{:e}\n", e.epoch, e.train_loss, e.val_loss));
    }
    s
}

/// Output of [`train`]: the best-validation snapshot plus loss curves.
pub struct TrainOutcome<S> {
    pub params: NetworkParams<S>,
    pub curves: Vec<EpochStats>,
    /// 1-based epoch whose snapshot is returned.
    pub best_epoch: usize,
}

/// Train a U-Net with shuffled single-sample SGD steps.
///
/// Input-normalization constants are computed from the training split and
/// frozen into the returned parameters. The snapshot with the lowest
/// validation loss is returned (the final epoch if the validation split is
/// empty). A non-finite training loss aborts with the failing epoch and
/// sample index. `on_epoch(epoch, params, train_loss, val_loss)` runs
/// after every epoch, e.g. to write periodic checkpoints.
pub fn train<S: Real>(
    set: &TrainSet,
    net: &NetConfig,
    tc: &TrainConfig,
    mut on_epoch: impl FnMut(usize, &NetworkParams<S>, f64, f64),
) -> Result<TrainOutcome<S>, NeuralError> {
    net.validate()?;
    tc.validate()?;
    set.validate()?;
    let (rows, cols) = (set.rows, set.cols);
    let mut params: NetworkParams<S> = NetworkParams::new(net, tc.seed);
    let count = (set.train.len() * rows * cols) as f64;
    let mean = set.train.iter().flat_map(|s| &s.input).sum::<f64>() / count;
    let var = set
        .train
        .iter()
        .flat_map(|s| &s.input)
        .map(|&v| (v - mean) * (v - mean))
        .sum::<f64>()
        / count;
    params.norm_mean = mean;
    params.norm_std = if var.sqrt() > 1e-300 { var.sqrt() } else { 1.0 };

    let mut vel = params.grad_zeros();
    let mut rng = ChaCha8Rng::seed_from_u64(tc.seed ^ 0x5eed_cafe);
    let mut curves = Vec::with_capacity(tc.epochs);
    let mut best: Option<(f64, usize, NetworkParams<S>)> = None;
    for epoch in 1..=tc.epochs {
        let mut order: Vec<usize> = (0..set.train.len()).collect();
        if tc.shuffle {
            order.shuffle(&mut rng);
        }
        let mut train_sum = 0.0;
        for (step, &idx) in order.iter().enumerate() {
            let s = &set.train[idx];
            let (pred, cache) = params.forward_train(&s.input, rows, cols)?;
            let loss = unet_loss(&pred, &s.target, net.c_scale);
            if !loss.is_finite() {
                return Err(NeuralError::NonFinite { epoch, sample: step });
            }
            train_sum += loss;
            let grads = params.backward(&cache, &s.target, 1.0);
            sgd_step(&mut params, &grads, &mut vel, tc.learning_rate, tc.momentum);
        }
        let train_loss = train_sum / set.train.len() as f64;
        let val_loss = if set.val.is_empty() {
            f64::NAN
        } else {
            let mut sum = 0.0;
            for s in &set.val {
                let pred = params.forward_eval(&s.input, rows, cols)?;
                sum += unet_loss(&pred, &s.target, net.c_scale);
            }
            sum / set.val.len() as f64
        };
        curves.push(EpochStats { epoch, train_loss, val_loss });
        let score = if set.val.is_empty() { f64::INFINITY } else { val_loss };
        let better = match &best {
            None => true,
            Some((b, _, _)) => score < *b || set.val.is_empty(),
        };
        if better {
            best = Some((score, epoch, params.clone()));
        }
        on_epoch(epoch, &params, train_loss, val_loss);
    }
    let (_, best_epoch, best_params) = best.expect("at least one epoch ran");
    Ok(TrainOutcome { params: best_params, curves, best_epoch })
}
