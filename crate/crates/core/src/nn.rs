//! Neural-network primitives: feature maps, GEMM, convolution, batch
//! normalization, pooling, upsampling, and channel concatenation, each with
//! an exact reverse-mode backward pass.
//!
//! Everything runs single-threaded with fixed accumulation order, so
//! forward and backward passes are bit-reproducible for a given precision.
//! Convolutions are im2col + GEMM with zero padding k/2 (spatial shape
//! preserved); batch norm uses per-sample spatial statistics (batch size 1)
//! with biased variance throughout.

use crate::fft2::Real;
use rand::Rng;

/// Single-sample feature map, channel-major [c][h][w].
#[derive(Debug, Clone, PartialEq)]
pub struct Feat<S> {
    pub c: usize,
    pub h: usize,
    pub w: usize,
    pub d: Vec<S>,
}

impl<S: Real> Feat<S> {
    pub fn zeros(c: usize, h: usize, w: usize) -> Feat<S> {
        Feat { c, h, w, d: vec![S::default(); c * h * w] }
    }

    pub fn from_f64(c: usize, h: usize, w: usize, v: &[f64]) -> Feat<S> {
        assert_eq!(v.len(), c * h * w);
        Feat { c, h, w, d: v.iter().map(|&x| S::of(x)).collect() }
    }

    pub fn to_f64(&self) -> Vec<f64> {
        self.d.iter().map(|&x| x.dbl()).collect()
    }

    pub fn plane(&self, ch: usize) -> &[S] {
        &self.d[ch * self.h * self.w..(ch + 1) * self.h * self.w]
    }
}

/// c += a @ b with a: [m][k], b: [k][n], c: [m][n]; row-axpy form whose
/// k-accumulation order is fixed per output element.
pub fn gemm<S: Real>(m: usize, k: usize, n: usize, a: &[S], b: &[S], c: &mut [S]) {
    assert_eq!(a.len(), m * k);
    assert_eq!(b.len(), k * n);
    assert_eq!(c.len(), m * n);
    for i in 0..m {
        let arow = &a[i * k..(i + 1) * k];
        let crow = &mut c[i * n..(i + 1) * n];
        for (kk, &av) in arow.iter().enumerate() {
            if av == S::default() {
                continue;
            }
            let brow = &b[kk * n..(kk + 1) * n];
            for j in 0..n {
                crow[j] = crow[j] + av * brow[j];
            }
        }
    }
}

/// c += a @ b^T with a: [m][l], b: [n][l], c: [m][n]; four-way unrolled dot
/// for instruction-level parallelism with a fixed reduction order.
pub fn gemm_abt<S: Real>(m: usize, l: usize, n: usize, a: &[S], b: &[S], c: &mut [S]) {
    assert_eq!(a.len(), m * l);
    assert_eq!(b.len(), n * l);
    assert_eq!(c.len(), m * n);
    for i in 0..m {
        let arow = &a[i * l..(i + 1) * l];
        for j in 0..n {
            let brow = &b[j * l..(j + 1) * l];
            let mut acc = [S::default(); 4];
            let chunks = l / 4;
            for t in 0..chunks {
                for u in 0..4 {
                    acc[u] = acc[u] + arow[4 * t + u] * brow[4 * t + u];
                }
            }
            let mut tail = S::default();
            for t in 4 * chunks..l {
                tail = tail + arow[t] * brow[t];
            }
            c[i * n + j] =
                c[i * n + j] + ((acc[0] + acc[1]) + (acc[2] + acc[3])) + tail;
        }
    }
}

/// im2col for stride-1, pad k/2 convolution: col is [cin*k*k][h*w],
/// out-of-bounds taps are zero.
pub fn im2col<S: Real>(x: &Feat<S>, k: usize, col: &mut Vec<S>) {
    let (h, w) = (x.h, x.w);
    let pad = (k / 2) as isize;
    col.clear();
    col.resize(x.c * k * k * h * w, S::default());
    let hw = h * w;
    for ci in 0..x.c {
        let plane = x.plane(ci);
        for di in 0..k {
            for dj in 0..k {
                let row = &mut col[(ci * k * k + di * k + dj) * hw..][..hw];
                let oi = di as isize - pad;
                let oj = dj as isize - pad;
                for r in 0..h {
                    let sr = r as isize + oi;
                    if sr < 0 || sr >= h as isize {
                        continue;
                    }
                    for c in 0..w {
                        let sc = c as isize + oj;
                        if sc >= 0 && sc < w as isize {
                            row[r * w + c] = plane[sr as usize * w + sc as usize];
                        }
                    }
                }
            }
        }
    }
}

/// Adjoint of im2col: scatter-add columns back into an image gradient.
pub fn col2im<S: Real>(dcol: &[S], cin: usize, k: usize, h: usize, w: usize) -> Feat<S> {
    let pad = (k / 2) as isize;
    let hw = h * w;
    let mut dx = Feat::zeros(cin, h, w);
    for ci in 0..cin {
        for di in 0..k {
            for dj in 0..k {
                let row = &dcol[(ci * k * k + di * k + dj) * hw..][..hw];
                let oi = di as isize - pad;
                let oj = dj as isize - pad;
                for r in 0..h {
                    let sr = r as isize + oi;
                    if sr < 0 || sr >= h as isize {
                        continue;
                    }
                    for c in 0..w {
                        let sc = c as isize + oj;
                        if sc >= 0 && sc < w as isize {
                            let t = ci * hw + sr as usize * w + sc as usize;
                            dx.d[t] = dx.d[t] + row[r * w + c];
                        }
                    }
                }
            }
        }
    }
    dx
}

/// Stride-1 convolution with square kernel k (odd) and zero padding k/2.
#[derive(Debug, Clone, PartialEq)]
pub struct Conv<S> {
    pub cin: usize,
    pub cout: usize,
    pub k: usize,
    /// [cout][cin][k][k] flat.
    pub w: Vec<S>,
    /// [cout].
    pub b: Vec<S>,
}

/// Gradient buffers shaped like a Conv.
#[derive(Debug, Clone)]
pub struct ConvGrad<S> {
    pub w: Vec<S>,
    pub b: Vec<S>,
}

impl<S: Real> Conv<S> {
    pub fn zeros(cin: usize, cout: usize, k: usize) -> Conv<S> {
        assert!(k % 2 == 1);
        Conv { cin, cout, k, w: vec![S::default(); cout * cin * k * k], b: vec![S::default(); cout] }
    }

    /// Kaiming-uniform fan-in init (ReLU gain): U(-sqrt(6/fan_in), +).
    pub fn init_kaiming(&mut self, rng: &mut impl Rng) {
        let fan_in = (self.cin * self.k * self.k) as f64;
        let bound = (6.0 / fan_in).sqrt();
        for v in self.w.iter_mut() {
            *v = S::of(rng.gen_range(-bound..bound));
        }
        for v in self.b.iter_mut() {
            *v = S::default();
        }
    }

    pub fn grad_zeros(&self) -> ConvGrad<S> {
        ConvGrad { w: vec![S::default(); self.w.len()], b: vec![S::default(); self.b.len()] }
    }

    pub fn forward(&self, x: &Feat<S>, col: &mut Vec<S>) -> Feat<S> {
        assert_eq!(x.c, self.cin);
        let hw = x.h * x.w;
        im2col(x, self.k, col);
        let mut y = Feat::zeros(self.cout, x.h, x.w);
        for co in 0..self.cout {
            let bias = self.b[co];
            for v in &mut y.d[co * hw..(co + 1) * hw] {
                *v = bias;
            }
        }
        gemm(self.cout, self.cin * self.k * self.k, hw, &self.w, col, &mut y.d);
        y
    }

    /// Accumulates dW, db into `g` and returns dX. `col` must hold the
    /// im2col of the forward input (recomputed by the caller).
    pub fn backward(
        &self,
        x: &Feat<S>,
        dy: &Feat<S>,
        col: &mut Vec<S>,
        g: &mut ConvGrad<S>,
    ) -> Feat<S> {
        let hw = x.h * x.w;
        let ck = self.cin * self.k * self.k;
        im2col(x, self.k, col);
        // dW[co][ck] = sum_hw dy[co][hw] col[ck][hw]
        gemm_abt(self.cout, hw, ck, &dy.d, col, &mut g.w);
        for co in 0..self.cout {
            let mut s = S::default();
            for &v in &dy.d[co * hw..(co + 1) * hw] {
                s = s + v;
            }
            g.b[co] = g.b[co] + s;
        }
        // dcol[ck][hw] = W^T dy
        let mut wt = vec![S::default(); ck * self.cout];
        for co in 0..self.cout {
            for t in 0..ck {
                wt[t * self.cout + co] = self.w[co * ck + t];
            }
        }
        let mut dcol = vec![S::default(); ck * hw];
        gemm(ck, self.cout, hw, &wt, &dy.d, &mut dcol);
        col2im(&dcol, self.cin, self.k, x.h, x.w)
    }
}

/// Batch normalization over spatial positions of each channel (batch 1).
#[derive(Debug, Clone, PartialEq)]
pub struct Bn<S> {
    pub gamma: Vec<S>,
    pub beta: Vec<S>,
    pub r_mean: Vec<S>,
    pub r_var: Vec<S>,
}

#[derive(Debug, Clone)]
pub struct BnGrad<S> {
    pub gamma: Vec<S>,
    pub beta: Vec<S>,
}

/// Saved normalized activations and inverse std-devs for the backward pass.
#[derive(Debug, Clone)]
pub struct BnCache<S> {
    pub xhat: Vec<S>,
    pub invstd: Vec<S>,
}

pub const BN_EPS: f64 = 1e-5;
/// Running-average update fraction per step.
pub const BN_MOMENTUM: f64 = 0.1;

impl<S: Real> Bn<S> {
    pub fn new(c: usize) -> Bn<S> {
        Bn {
            gamma: vec![S::of(1.0); c],
            beta: vec![S::default(); c],
            r_mean: vec![S::default(); c],
            r_var: vec![S::of(1.0); c],
        }
    }

    pub fn grad_zeros(&self) -> BnGrad<S> {
        BnGrad {
            gamma: vec![S::default(); self.gamma.len()],
            beta: vec![S::default(); self.beta.len()],
        }
    }

    /// Train mode: per-channel spatial mean/variance (biased), running
    /// stats updated in place.
    pub fn forward_train(&mut self, x: &Feat<S>) -> (Feat<S>, BnCache<S>) {
        let hw = x.h * x.w;
        let n = S::of(hw as f64);
        let eps = S::of(BN_EPS);
        let mom = S::of(BN_MOMENTUM);
        let one = S::of(1.0);
        let mut y = Feat::zeros(x.c, x.h, x.w);
        let mut xhat = vec![S::default(); x.d.len()];
        let mut invstd = vec![S::default(); x.c];
        for ch in 0..x.c {
            let plane = x.plane(ch);
            let mut mean = S::default();
            for &v in plane {
                mean = mean + v;
            }
            mean = mean / n;
            let mut var = S::default();
            for &v in plane {
                var = var + (v - mean) * (v - mean);
            }
            var = var / n;
            let istd = one / (var + eps).sqrt();
            invstd[ch] = istd;
            for (t, &v) in plane.iter().enumerate() {
                let xh = (v - mean) * istd;
                xhat[ch * hw + t] = xh;
                y.d[ch * hw + t] = self.gamma[ch] * xh + self.beta[ch];
            }
            self.r_mean[ch] = (one - mom) * self.r_mean[ch] + mom * mean;
            self.r_var[ch] = (one - mom) * self.r_var[ch] + mom * var;
        }
        (y, BnCache { xhat, invstd })
    }

    /// Eval mode: frozen running statistics.
    pub fn forward_eval(&self, x: &Feat<S>) -> Feat<S> {
        let hw = x.h * x.w;
        let eps = S::of(BN_EPS);
        let one = S::of(1.0);
        let mut y = Feat::zeros(x.c, x.h, x.w);
        for ch in 0..x.c {
            let istd = one / (self.r_var[ch] + eps).sqrt();
            let (m, g, b) = (self.r_mean[ch], self.gamma[ch], self.beta[ch]);
            for (t, &v) in x.plane(ch).iter().enumerate() {
                y.d[ch * hw + t] = g * (v - m) * istd + b;
            }
        }
        y
    }

    /// Train-mode backward through the batch statistics:
    /// dx = gamma * istd * (dy - mean(dy) - xhat * mean(dy * xhat)).
    pub fn backward(&self, cache: &BnCache<S>, dy: &Feat<S>, g: &mut BnGrad<S>) -> Feat<S> {
        let hw = dy.h * dy.w;
        let n = S::of(hw as f64);
        let mut dx = Feat::zeros(dy.c, dy.h, dy.w);
        for ch in 0..dy.c {
            let dplane = dy.plane(ch);
            let xh = &cache.xhat[ch * hw..(ch + 1) * hw];
            let mut sum_dy = S::default();
            let mut sum_dyxh = S::default();
            for t in 0..hw {
                sum_dy = sum_dy + dplane[t];
                sum_dyxh = sum_dyxh + dplane[t] * xh[t];
            }
            g.beta[ch] = g.beta[ch] + sum_dy;
            g.gamma[ch] = g.gamma[ch] + sum_dyxh;
            let coeff = self.gamma[ch] * cache.invstd[ch];
            let mean_dy = sum_dy / n;
            let mean_dyxh = sum_dyxh / n;
            for t in 0..hw {
                dx.d[ch * hw + t] = coeff * (dplane[t] - mean_dy - xh[t] * mean_dyxh);
            }
        }
        dx
    }
}

/// ReLU producing a fresh tensor; backward masks by output > 0.
pub fn relu<S: Real>(x: &Feat<S>) -> Feat<S> {
    let zero = S::default();
    Feat {
        c: x.c,
        h: x.h,
        w: x.w,
        d: x.d.iter().map(|&v| if v > zero { v } else { zero }).collect(),
    }
}

pub fn relu_backward<S: Real>(out: &Feat<S>, dy: &Feat<S>) -> Feat<S> {
    let zero = S::default();
    Feat {
        c: dy.c,
        h: dy.h,
        w: dy.w,
        d: out.d.iter().zip(&dy.d).map(|(&o, &d)| if o > zero { d } else { zero }).collect(),
    }
}

/// 2x2 max pool, stride 2; requires even h and w. Returns argmax offsets
/// into the input for the backward scatter.
pub fn maxpool2<S: Real>(x: &Feat<S>) -> (Feat<S>, Vec<u32>) {
    assert!(x.h.is_multiple_of(2) && x.w.is_multiple_of(2));
    let (oh, ow) = (x.h / 2, x.w / 2);
    let mut y = Feat::zeros(x.c, oh, ow);
    let mut arg = vec![0u32; x.c * oh * ow];
    for ch in 0..x.c {
        let plane = x.plane(ch);
        for r in 0..oh {
            for c in 0..ow {
                let mut best = plane[2 * r * x.w + 2 * c];
                let mut bidx = 2 * r * x.w + 2 * c;
                for (di, dj) in [(0, 1), (1, 0), (1, 1)] {
                    let idx = (2 * r + di) * x.w + 2 * c + dj;
                    if plane[idx] > best {
                        best = plane[idx];
                        bidx = idx;
                    }
                }
                y.d[ch * oh * ow + r * ow + c] = best;
                arg[ch * oh * ow + r * ow + c] = (ch * x.h * x.w + bidx) as u32;
            }
        }
    }
    (y, arg)
}

pub fn maxpool2_backward<S: Real>(
    dy: &Feat<S>,
    arg: &[u32],
    in_h: usize,
    in_w: usize,
) -> Feat<S> {
    let mut dx = Feat::zeros(dy.c, in_h, in_w);
    for (t, &src) in arg.iter().enumerate() {
        dx.d[src as usize] = dx.d[src as usize] + dy.d[t];
    }
    dx
}

/// Nearest-neighbor 2x upsample.
pub fn upsample2<S: Real>(x: &Feat<S>) -> Feat<S> {
    let (oh, ow) = (2 * x.h, 2 * x.w);
    let mut y = Feat::zeros(x.c, oh, ow);
    for ch in 0..x.c {
        let plane = x.plane(ch);
        for r in 0..oh {
            for c in 0..ow {
                y.d[ch * oh * ow + r * ow + c] = plane[(r / 2) * x.w + c / 2];
            }
        }
    }
    y
}

/// Adjoint of nearest-neighbor upsampling: sum each 2x2 block.
pub fn upsample2_backward<S: Real>(dy: &Feat<S>) -> Feat<S> {
    let (ih, iw) = (dy.h / 2, dy.w / 2);
    let mut dx = Feat::zeros(dy.c, ih, iw);
    for ch in 0..dy.c {
        let plane = dy.plane(ch);
        for r in 0..dy.h {
            for c in 0..dy.w {
                let t = ch * ih * iw + (r / 2) * iw + c / 2;
                dx.d[t] = dx.d[t] + plane[r * dy.w + c];
            }
        }
    }
    dx
}

/// Channel concatenation [a; b].
pub fn concat<S: Real>(a: &Feat<S>, b: &Feat<S>) -> Feat<S> {
    assert_eq!((a.h, a.w), (b.h, b.w));
    let mut d = Vec::with_capacity(a.d.len() + b.d.len());
    d.extend_from_slice(&a.d);
    d.extend_from_slice(&b.d);
    Feat { c: a.c + b.c, h: a.h, w: a.w, d }
}

/// Split a concatenated gradient back into the two channel groups.
pub fn concat_backward<S: Real>(dy: &Feat<S>, ca: usize) -> (Feat<S>, Feat<S>) {
    let hw = dy.h * dy.w;
    let da = Feat { c: ca, h: dy.h, w: dy.w, d: dy.d[..ca * hw].to_vec() };
    let db = Feat { c: dy.c - ca, h: dy.h, w: dy.w, d: dy.d[ca * hw..].to_vec() };
    (da, db)
}
