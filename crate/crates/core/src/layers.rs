//! Layer primitives: batch normalization with dual running statistics,
//! PReLU, pooling, the linear classifier and the normalized projection head.
//!
//! Everything trains by explicit caches and hand-written backward passes; the
//! only gradient source is the binary path, so latent-branch forwards never
//! produce caches.

use crate::conv::matmul_acc;
use crate::error::{Error, Result};
use crate::tensor::{Element, Tensor};

// ---------------------------------------------------------------------------
// batch normalization
// ---------------------------------------------------------------------------

/// Normalization core shared by train-mode and recalibration forwards.
/// Returns (y, cache, batch_mean, batch_var) with biased variance.
pub fn bn_forward_train<E: Element>(
    x: &Tensor<E>,
    gamma: &Tensor<E>,
    beta: &Tensor<E>,
    eps: f64,
) -> Result<(Tensor<E>, BnCache<E>, Tensor<E>, Tensor<E>)> {
    let (mean, var) = crate::tensor::channel_stats(x)?;
    let y_cache = bn_apply(x, gamma, beta, &mean, &var, eps)?;
    Ok((y_cache.0, y_cache.1, mean, var))
}

/// Normalize with the provided (running or batch) moments.
fn bn_apply<E: Element>(
    x: &Tensor<E>,
    gamma: &Tensor<E>,
    beta: &Tensor<E>,
    mean: &Tensor<E>,
    var: &Tensor<E>,
    eps: f64,
) -> Result<(Tensor<E>, BnCache<E>)> {
    let c = x.dim(1);
    if gamma.len() != c || beta.len() != c || mean.len() != c || var.len() != c {
        return Err(Error::shape("batchnorm", x.shape(), gamma.shape()));
    }
    let (n, h, w) = (x.dim(0), x.dim(2), x.dim(3));
    let plane = h * w;
    let eps = E::from_f64(eps);
    let inv_std: Vec<E> = var.data().iter().map(|&v| E::ONE / (v + eps).sqrt()).collect();
    let mut xhat = Tensor::zeros(x.shape());
    let mut y = Tensor::zeros(x.shape());
    for ni in 0..n {
        for ci in 0..c {
            let base = (ni * c + ci) * plane;
            let (m, is) = (mean.data()[ci], inv_std[ci]);
            let (g, b) = (gamma.data()[ci], beta.data()[ci]);
            for i in base..base + plane {
                let xh = (x.data()[i] - m) * is;
                xhat.data_mut()[i] = xh;
                y.data_mut()[i] = g * xh + b;
            }
        }
    }
    Ok((y, BnCache { xhat, inv_std }))
}

/// Saved activations for the train-mode batch-statistics backward.
#[derive(Debug, Clone)]
pub struct BnCache<E> {
    xhat: Tensor<E>,
    inv_std: Vec<E>,
}

/// Train-mode backward through the batch statistics.
pub fn bn_backward<E: Element>(
    cache: &BnCache<E>,
    gamma: &Tensor<E>,
    grad_y: &Tensor<E>,
) -> Result<(Tensor<E>, Tensor<E>, Tensor<E>)> {
    let x = &cache.xhat;
    if grad_y.shape() != x.shape() {
        return Err(Error::shape("bn_backward", grad_y.shape(), x.shape()));
    }
    let (n, c, h, w) = (x.dim(0), x.dim(1), x.dim(2), x.dim(3));
    let plane = h * w;
    let count = E::from_f64((n * plane) as f64);
    let mut dgamma = vec![E::ZERO; c];
    let mut dbeta = vec![E::ZERO; c];
    for ni in 0..n {
        for ci in 0..c {
            let base = (ni * c + ci) * plane;
            for i in base..base + plane {
                dgamma[ci] += grad_y.data()[i] * x.data()[i];
                dbeta[ci] += grad_y.data()[i];
            }
        }
    }
    let mut grad_x = Tensor::zeros(x.shape());
    for ni in 0..n {
        for ci in 0..c {
            let base = (ni * c + ci) * plane;
            let g = gamma.data()[ci];
            let is = cache.inv_std[ci];
            let mean_dy = dbeta[ci] / count;
            let mean_dyxh = dgamma[ci] / count;
            for i in base..base + plane {
                let dy = grad_y.data()[i];
                grad_x.data_mut()[i] =
                    g * is * (dy - mean_dy - x.data()[i] * mean_dyxh);
            }
        }
    }
    Ok((
        grad_x,
        Tensor::from_vec(&[c], dgamma)?,
        Tensor::from_vec(&[c], dbeta)?,
    ))
}

/// One set of running moments plus the number of updates it has received.
#[derive(Debug, Clone, PartialEq)]
pub struct BatchNormStats<E = f32> {
    pub mean: Tensor<E>,
    pub var: Tensor<E>,
    pub count: u64,
}

impl<E: Element> BatchNormStats<E> {
    pub fn new(c: usize) -> Self {
        BatchNormStats {
            mean: Tensor::zeros(&[c]),
            var: Tensor::filled(&[c], E::ONE),
            count: 0,
        }
    }

    /// running <- (1 - momentum) * running + momentum * batch
    fn update(&mut self, batch_mean: &Tensor<E>, batch_var: &Tensor<E>, momentum: f64) {
        let m = E::from_f64(momentum);
        let keep = E::ONE - m;
        for ((r, &b), (rv, &bv)) in self
            .mean
            .data_mut()
            .iter_mut()
            .zip(batch_mean.data())
            .zip(self.var.data_mut().iter_mut().zip(batch_var.data()))
        {
            *r = keep * *r + m * b;
            *rv = keep * *rv + m * bv;
        }
        self.count += 1;
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BnBranch {
    Binary,
    Latent,
}

/// Batch normalization with one shared affine pair and per-branch running
/// statistics. Binary-branch forwards only ever touch `stats_b`, latent ones
/// only `stats_w`.
#[derive(Debug, Clone)]
pub struct DualBatchNorm<E = f32> {
    pub gamma: Tensor<E>,
    pub beta: Tensor<E>,
    pub stats_b: BatchNormStats<E>,
    pub stats_w: BatchNormStats<E>,
    pub momentum: f64,
    pub eps: f64,
}

impl<E: Element> DualBatchNorm<E> {
    pub fn new(c: usize) -> Self {
        DualBatchNorm {
            gamma: Tensor::filled(&[c], E::ONE),
            beta: Tensor::zeros(&[c]),
            stats_b: BatchNormStats::new(c),
            stats_w: BatchNormStats::new(c),
            momentum: 0.1,
            eps: 1e-5,
        }
    }

    pub fn forward_train(&mut self, x: &Tensor<E>, branch: BnBranch) -> Result<(Tensor<E>, BnCache<E>)> {
        let (y, cache, mean, var) = bn_forward_train(x, &self.gamma, &self.beta, self.eps)?;
        match branch {
            BnBranch::Binary => self.stats_b.update(&mean, &var, self.momentum),
            BnBranch::Latent => self.stats_w.update(&mean, &var, self.momentum),
        }
        Ok((y, cache))
    }

    pub fn forward_eval(&self, x: &Tensor<E>, branch: BnBranch) -> Result<Tensor<E>> {
        let stats = match branch {
            BnBranch::Binary => &self.stats_b,
            BnBranch::Latent => &self.stats_w,
        };
        if stats.count == 0 {
            return Err(Error::invalid(
                "batchnorm",
                format!("eval-mode forward with never-initialized {branch:?} running statistics"),
            ));
        }
        Ok(bn_apply(x, &self.gamma, &self.beta, &stats.mean, &stats.var, self.eps)?.0)
    }

    /// Normalize with batch statistics without touching either running set;
    /// used by the recalibration stream.
    pub fn forward_batch_stats(&self, x: &Tensor<E>) -> Result<Tensor<E>> {
        let (mean, var) = crate::tensor::channel_stats(x)?;
        Ok(bn_apply(x, &self.gamma, &self.beta, &mean, &var, self.eps)?.0)
    }

    pub fn backward(
        &self,
        cache: &BnCache<E>,
        grad_y: &Tensor<E>,
    ) -> Result<(Tensor<E>, Tensor<E>, Tensor<E>)> {
        bn_backward(cache, &self.gamma, grad_y)
    }
}

/// Single-statistics batch norm for the shared real-valued stem.
#[derive(Debug, Clone)]
pub struct BatchNorm<E = f32> {
    pub gamma: Tensor<E>,
    pub beta: Tensor<E>,
    pub stats: BatchNormStats<E>,
    pub momentum: f64,
    pub eps: f64,
}

impl<E: Element> BatchNorm<E> {
    pub fn new(c: usize) -> Self {
        BatchNorm {
            gamma: Tensor::filled(&[c], E::ONE),
            beta: Tensor::zeros(&[c]),
            stats: BatchNormStats::new(c),
            momentum: 0.1,
            eps: 1e-5,
        }
    }

    pub fn forward_train(&mut self, x: &Tensor<E>) -> Result<(Tensor<E>, BnCache<E>)> {
        let (y, cache, mean, var) = bn_forward_train(x, &self.gamma, &self.beta, self.eps)?;
        self.stats.update(&mean, &var, self.momentum);
        Ok((y, cache))
    }

    pub fn forward_eval(&self, x: &Tensor<E>) -> Result<Tensor<E>> {
        if self.stats.count == 0 {
            return Err(Error::invalid(
                "batchnorm",
                "eval-mode forward with never-initialized running statistics",
            ));
        }
        Ok(bn_apply(x, &self.gamma, &self.beta, &self.stats.mean, &self.stats.var, self.eps)?.0)
    }

    pub fn backward(
        &self,
        cache: &BnCache<E>,
        grad_y: &Tensor<E>,
    ) -> Result<(Tensor<E>, Tensor<E>, Tensor<E>)> {
        bn_backward(cache, &self.gamma, grad_y)
    }
}

// ---------------------------------------------------------------------------
// PReLU
// ---------------------------------------------------------------------------

/// PReLU with a learnable per-channel slope.
#[derive(Debug, Clone)]
pub struct PRelu<E = f32> {
    pub slope: Tensor<E>,
}

impl<E: Element> PRelu<E> {
    /// Slope initialized to 0.25.
    pub fn new(c: usize) -> Self {
        PRelu {
            slope: Tensor::filled(&[c], E::from_f64(0.25)),
        }
    }

    pub fn forward(&self, x: &Tensor<E>) -> Result<Tensor<E>> {
        let c = x.dim(1);
        if self.slope.len() != c {
            return Err(Error::shape("prelu", x.shape(), self.slope.shape()));
        }
        let (n, h, w) = (x.dim(0), x.dim(2), x.dim(3));
        let plane = h * w;
        let mut y = Tensor::zeros(x.shape());
        for ni in 0..n {
            for ci in 0..c {
                let a = self.slope.data()[ci];
                let base = (ni * c + ci) * plane;
                for i in base..base + plane {
                    let v = x.data()[i];
                    y.data_mut()[i] = if v > E::ZERO { v } else { a * v };
                }
            }
        }
        Ok(y)
    }

    /// Backward from the cached forward input.
    pub fn backward(&self, x: &Tensor<E>, grad_y: &Tensor<E>) -> Result<(Tensor<E>, Tensor<E>)> {
        if grad_y.shape() != x.shape() {
            return Err(Error::shape("prelu_backward", grad_y.shape(), x.shape()));
        }
        let (n, c, h, w) = (x.dim(0), x.dim(1), x.dim(2), x.dim(3));
        let plane = h * w;
        let mut gx = Tensor::zeros(x.shape());
        let mut gslope = vec![E::ZERO; c];
        for ni in 0..n {
            for ci in 0..c {
                let a = self.slope.data()[ci];
                let base = (ni * c + ci) * plane;
                for i in base..base + plane {
                    let (v, g) = (x.data()[i], grad_y.data()[i]);
                    if v > E::ZERO {
                        gx.data_mut()[i] = g;
                    } else {
                        gx.data_mut()[i] = a * g;
                        gslope[ci] += g * v;
                    }
                }
            }
        }
        Ok((gx, Tensor::from_vec(&[c], gslope)?))
    }
}

// ---------------------------------------------------------------------------
// pooling
// ---------------------------------------------------------------------------

/// 2x2 max pooling with stride 2, floor semantics on odd extents. Returns the
/// pooled map and the flat argmax index per output element (first index wins
/// ties).
pub fn maxpool2x2<E: Element>(x: &Tensor<E>) -> Result<(Tensor<E>, Vec<u32>)> {
    if x.rank() != 4 {
        return Err(Error::invalid("maxpool2x2", format!("expected NCHW, got {:?}", x.shape())));
    }
    let (n, c, h, w) = (x.dim(0), x.dim(1), x.dim(2), x.dim(3));
    let (oh, ow) = (h / 2, w / 2);
    if oh == 0 || ow == 0 {
        return Err(Error::invalid("maxpool2x2", format!("input {h}x{w} too small to pool")));
    }
    let mut y = Tensor::zeros(&[n, c, oh, ow]);
    let mut idx = vec![0u32; n * c * oh * ow];
    for ni in 0..n {
        for ci in 0..c {
            let base = (ni * c + ci) * h * w;
            let obase = (ni * c + ci) * oh * ow;
            for oy in 0..oh {
                for ox in 0..ow {
                    let mut best_i = base + (2 * oy) * w + 2 * ox;
                    let mut best = x.data()[best_i];
                    for (dy, dx) in [(0usize, 1usize), (1, 0), (1, 1)] {
                        let i = base + (2 * oy + dy) * w + 2 * ox + dx;
                        if x.data()[i] > best {
                            best = x.data()[i];
                            best_i = i;
                        }
                    }
                    y.data_mut()[obase + oy * ow + ox] = best;
                    idx[obase + oy * ow + ox] = best_i as u32;
                }
            }
        }
    }
    Ok((y, idx))
}

/// Route pooled gradients back to the argmax positions.
pub fn maxpool2x2_backward<E: Element>(
    input_shape: &[usize],
    idx: &[u32],
    grad_y: &Tensor<E>,
) -> Result<Tensor<E>> {
    if grad_y.len() != idx.len() {
        return Err(Error::invalid(
            "maxpool2x2_backward",
            format!("cache holds {} indices, grad has {} elements", idx.len(), grad_y.len()),
        ));
    }
    let mut gx = Tensor::zeros(input_shape);
    for (i, &src) in idx.iter().enumerate() {
        gx.data_mut()[src as usize] += grad_y.data()[i];
    }
    Ok(gx)
}

/// Mean over the spatial axes: [N,C,H,W] -> [N,C].
pub fn global_avgpool<E: Element>(x: &Tensor<E>) -> Result<Tensor<E>> {
    if x.rank() != 4 {
        return Err(Error::invalid("global_avgpool", format!("expected NCHW, got {:?}", x.shape())));
    }
    let (n, c, h, w) = (x.dim(0), x.dim(1), x.dim(2), x.dim(3));
    let plane = h * w;
    let inv = E::from_f64(1.0 / plane as f64);
    let mut y = Tensor::zeros(&[n, c]);
    for ni in 0..n {
        for ci in 0..c {
            let base = (ni * c + ci) * plane;
            let mut acc = E::ZERO;
            for &v in &x.data()[base..base + plane] {
                acc += v;
            }
            y.data_mut()[ni * c + ci] = acc * inv;
        }
    }
    Ok(y)
}

pub fn global_avgpool_backward<E: Element>(
    input_shape: &[usize],
    grad_y: &Tensor<E>,
) -> Result<Tensor<E>> {
    let (n, c, h, w) = (input_shape[0], input_shape[1], input_shape[2], input_shape[3]);
    if grad_y.shape() != [n, c] {
        return Err(Error::shape("global_avgpool_backward", grad_y.shape(), &[n, c]));
    }
    let plane = h * w;
    let inv = E::from_f64(1.0 / plane as f64);
    let mut gx = Tensor::zeros(input_shape);
    for ni in 0..n {
        for ci in 0..c {
            let g = grad_y.data()[ni * c + ci] * inv;
            let base = (ni * c + ci) * plane;
            for v in &mut gx.data_mut()[base..base + plane] {
                *v = g;
            }
        }
    }
    Ok(gx)
}

// ---------------------------------------------------------------------------
// linear classifier
// ---------------------------------------------------------------------------

#[derive(Debug, Clone)]
pub struct Linear<E = f32> {
    /// [K, F]
    pub w: Tensor<E>,
    /// [K]
    pub b: Tensor<E>,
}

impl<E: Element> Linear<E> {
    /// y = x w^T + b for x [N,F].
    pub fn forward(&self, x: &Tensor<E>) -> Result<Tensor<E>> {
        let (k, f) = (self.w.dim(0), self.w.dim(1));
        if x.rank() != 2 || x.dim(1) != f {
            return Err(Error::shape("linear", x.shape(), self.w.shape()));
        }
        let n = x.dim(0);
        let mut y = Tensor::zeros(&[n, k]);
        for ni in 0..n {
            let xr = &x.data()[ni * f..(ni + 1) * f];
            for ki in 0..k {
                let wr = &self.w.data()[ki * f..(ki + 1) * f];
                let mut acc = self.b.data()[ki];
                for (xa, wa) in xr.iter().zip(wr) {
                    acc += *xa * *wa;
                }
                y.data_mut()[ni * k + ki] = acc;
            }
        }
        Ok(y)
    }

    pub fn backward(
        &self,
        x: &Tensor<E>,
        grad_y: &Tensor<E>,
    ) -> Result<(Tensor<E>, Tensor<E>, Tensor<E>)> {
        let (k, f) = (self.w.dim(0), self.w.dim(1));
        let n = x.dim(0);
        if grad_y.shape() != [n, k] {
            return Err(Error::shape("linear_backward", grad_y.shape(), &[n, k]));
        }
        let mut gx = Tensor::zeros(&[n, f]);
        matmul_acc(grad_y.data(), self.w.data(), gx.data_mut(), n, k, f);
        let mut gw = Tensor::zeros(&[k, f]);
        let mut gb = vec![E::ZERO; k];
        for ni in 0..n {
            let xr = &x.data()[ni * f..(ni + 1) * f];
            for ki in 0..k {
                let g = grad_y.data()[ni * k + ki];
                gb[ki] += g;
                let wrow = &mut gw.data_mut()[ki * f..(ki + 1) * f];
                for (o, xa) in wrow.iter_mut().zip(xr) {
                    *o += g * *xa;
                }
            }
        }
        Ok((gx, gw, Tensor::from_vec(&[k], gb)?))
    }
}

// ---------------------------------------------------------------------------
// projection head
// ---------------------------------------------------------------------------

const NORM_GUARD: f64 = 1e-12;

/// Bias-free linear map to a fixed dimension followed by rowwise l2
/// normalization. Output rows are unit norm up to the zero-norm guard.
#[derive(Debug, Clone)]
pub struct ProjectionHead<E = f32> {
    /// [D, F]
    pub w: Tensor<E>,
}

#[derive(Debug, Clone)]
pub struct ProjectionCache<E> {
    z: Tensor<E>,
    norms: Vec<E>,
    y: Tensor<E>,
}

impl<E: Element> ProjectionHead<E> {
    pub fn forward(&self, x: &Tensor<E>) -> Result<(Tensor<E>, ProjectionCache<E>)> {
        let (d, f) = (self.w.dim(0), self.w.dim(1));
        if x.rank() != 2 || x.dim(1) != f {
            return Err(Error::shape("project", x.shape(), self.w.shape()));
        }
        let n = x.dim(0);
        let mut z = Tensor::zeros(&[n, d]);
        for ni in 0..n {
            let xr = &x.data()[ni * f..(ni + 1) * f];
            for di in 0..d {
                let wr = &self.w.data()[di * f..(di + 1) * f];
                let mut acc = E::ZERO;
                for (xa, wa) in xr.iter().zip(wr) {
                    acc += *xa * *wa;
                }
                z.data_mut()[ni * d + di] = acc;
            }
        }
        let guard = E::from_f64(NORM_GUARD);
        let mut norms = vec![E::ZERO; n];
        let mut y = Tensor::zeros(&[n, d]);
        for ni in 0..n {
            let zr = &z.data()[ni * d..(ni + 1) * d];
            let mut acc = E::ZERO;
            for &v in zr {
                acc += v * v;
            }
            let norm = acc.sqrt().maximum(guard);
            norms[ni] = norm;
            for di in 0..d {
                y.data_mut()[ni * d + di] = z.data()[ni * d + di] / norm;
            }
        }
        Ok((
            y.clone(),
            ProjectionCache { z, norms, y },
        ))
    }

    /// Backward through the normalization Jacobian and the linear map.
    pub fn backward(
        &self,
        x: &Tensor<E>,
        cache: &ProjectionCache<E>,
        grad_y: &Tensor<E>,
    ) -> Result<(Tensor<E>, Tensor<E>)> {
        let (d, f) = (self.w.dim(0), self.w.dim(1));
        let n = x.dim(0);
        if grad_y.shape() != [n, d] {
            return Err(Error::shape("project_backward", grad_y.shape(), &[n, d]));
        }
        let mut gz = Tensor::zeros(&[n, d]);
        for ni in 0..n {
            let yr = &cache.y.data()[ni * d..(ni + 1) * d];
            let gr = &grad_y.data()[ni * d..(ni + 1) * d];
            let mut dot = E::ZERO;
            for (g, yv) in gr.iter().zip(yr) {
                dot += *g * *yv;
            }
            let norm = cache.norms[ni];
            for di in 0..d {
                gz.data_mut()[ni * d + di] = (gr[di] - yr[di] * dot) / norm;
            }
        }
        let mut gx = Tensor::zeros(&[n, f]);
        matmul_acc(gz.data(), self.w.data(), gx.data_mut(), n, d, f);
        let mut gw = Tensor::zeros(&[d, f]);
        for ni in 0..n {
            let xr = &x.data()[ni * f..(ni + 1) * f];
            for di in 0..d {
                let g = gz.data()[ni * d + di];
                let wrow = &mut gw.data_mut()[di * f..(di + 1) * f];
                for (o, xa) in wrow.iter_mut().zip(xr) {
                    *o += g * *xa;
                }
            }
        }
        Ok((gx, gw))
    }

    #[allow(unused)]
    pub(crate) fn z_of(cache: &ProjectionCache<E>) -> &Tensor<E> {
        &cache.z
    }
}
