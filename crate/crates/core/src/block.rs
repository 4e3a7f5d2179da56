//! The dual-path binary convolution block.
//!
//! One block runs `BinAct-Conv-BN-Activation` twice over shared parameters:
//!
//! * binary path:  y = PReLU(BN_B(alpha * (sign(W) (*) sign(x)))) [+ skip]
//! * latent path:  yt = PReLU(BN_W(W (*) hard_tanh(xt)))          [+ skip]
//!
//! The two paths share W, the BN affine pair and the PReLU slopes; they keep
//! separate BN running statistics. The latent path is forward-only and never
//! produces a cache. Zero padding is injected before the activation in both
//! paths, so the binary path sees sign(0) = +1 on the border and the latent
//! path sees hard_tanh(0) = 0.
//!
//! The binary convolution is computed as conv(sign(x), sign(W)) scaled by
//! alpha per output channel. Sums over +-1 operands are exact in float, so
//! the packed xnor/popcount engine reproduces this path bit for bit.

use crate::binarize::{alpha_scale, hard_tanh, hard_tanh_backward, sign_forward, ste_backward};
use crate::conv::{conv2d, conv2d_backward};
use crate::error::{Error, Result};
use crate::layers::{BnBranch, BnCache, DualBatchNorm, PRelu};
use crate::tensor::{crop_nchw, pad_nchw, Element, Tensor};

#[derive(Debug, Clone)]
pub struct ConvBlock<E = f32> {
    /// Latent weight [K, C, kh, kw]; the only trainable kernel. The binary
    /// kernel (sign, alpha) is rederived from it at every forward.
    pub w: Tensor<E>,
    pub bn: DualBatchNorm<E>,
    pub prelu: PRelu<E>,
    pub stride: usize,
    pub pad: usize,
    pub skip: bool,
}

/// Inference path selection for a single block.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum EvalPath {
    /// sign(W) kernel with alpha, sign activations, stats_B.
    Binary,
    /// W kernel, hard_tanh activations, stats_W.
    LatentHardTanh,
    /// W kernel, sign activations, stats_B: the outdated-statistics
    /// diagnostic configuration.
    LatentOutdated,
}

/// Cached binary-path activations for backward.
#[derive(Debug, Clone)]
pub struct BlockCache<E> {
    padded_raw: Tensor<E>,
    signed_in: Tensor<E>,
    bker: Tensor<E>,
    alpha: Tensor<E>,
    bn_out: Tensor<E>,
    bn_cache: BnCache<E>,
}

#[derive(Debug, Clone)]
pub struct BlockGrads<E> {
    pub w: Tensor<E>,
    pub gamma: Tensor<E>,
    pub beta: Tensor<E>,
    pub slope: Tensor<E>,
}

/// Multiply every output channel k by scale[k].
fn scale_channels<E: Element>(x: &mut Tensor<E>, scale: &Tensor<E>) {
    let (n, k) = (x.dim(0), x.dim(1));
    let plane = x.dim(2) * x.dim(3);
    for ni in 0..n {
        for ki in 0..k {
            let s = scale.data()[ki];
            let base = (ni * k + ki) * plane;
            for v in &mut x.data_mut()[base..base + plane] {
                *v *= s;
            }
        }
    }
}

/// Widen C channels to K = r*C by tiling: out[k] = in[k % C].
pub fn repeat_channels<E: Element>(x: &Tensor<E>, k: usize) -> Result<Tensor<E>> {
    let (n, c, h, w) = (x.dim(0), x.dim(1), x.dim(2), x.dim(3));
    if k % c != 0 {
        return Err(Error::invalid(
            "repeat_channels",
            format!("target width {k} is not a multiple of input width {c}"),
        ));
    }
    let plane = h * w;
    let mut out = Tensor::zeros(&[n, k, h, w]);
    for ni in 0..n {
        for ki in 0..k {
            let src = (ni * c + ki % c) * plane;
            let dst = (ni * k + ki) * plane;
            out.data_mut()[dst..dst + plane]
                .copy_from_slice(&x.data()[src..src + plane]);
        }
    }
    Ok(out)
}

/// Transpose of [`repeat_channels`]: fold gradients of the tiled copies back.
fn repeat_channels_t<E: Element>(g: &Tensor<E>, c: usize) -> Tensor<E> {
    let (n, k, h, w) = (g.dim(0), g.dim(1), g.dim(2), g.dim(3));
    let plane = h * w;
    let mut out = Tensor::zeros(&[n, c, h, w]);
    for ni in 0..n {
        for ki in 0..k {
            let dst = (ni * c + ki % c) * plane;
            let src = (ni * k + ki) * plane;
            for i in 0..plane {
                out.data_mut()[dst + i] += g.data()[src + i];
            }
        }
    }
    out
}

impl<E: Element> ConvBlock<E> {
    pub fn out_channels(&self) -> usize {
        self.w.dim(0)
    }

    pub fn in_channels(&self) -> usize {
        self.w.dim(1)
    }

    fn add_skip(&self, y: &mut Tensor<E>, input: &Tensor<E>) -> Result<()> {
        if !self.skip {
            return Ok(());
        }
        let k = self.out_channels();
        if input.dim(1) == k {
            y.add_assign(input)
        } else {
            let widened = repeat_channels(input, k)?;
            y.add_assign(&widened)
        }
    }

    /// Train-mode forward. Runs the binary path (with cache) and, when
    /// `ytil_prev` is given, the detached latent path. `surrogate_alpha`
    /// switches both binarizations to their hard_tanh surrogate with the
    /// provided frozen scale; it exists for finite-difference verification.
    pub fn forward_train(
        &mut self,
        y_prev: &Tensor<E>,
        ytil_prev: Option<&Tensor<E>>,
        surrogate_alpha: Option<&Tensor<E>>,
    ) -> Result<(Tensor<E>, Option<Tensor<E>>, BlockCache<E>)> {
        let padded_raw = pad_nchw(y_prev, self.pad);
        let (signed_in, bker, alpha) = match surrogate_alpha {
            None => (
                sign_forward(&padded_raw),
                sign_forward(&self.w),
                alpha_scale(&self.w)?,
            ),
            Some(frozen) => (
                hard_tanh(&padded_raw),
                hard_tanh(&self.w),
                frozen.clone(),
            ),
        };
        let mut pre_bn = conv2d(&signed_in, &bker, self.stride, 0)?;
        scale_channels(&mut pre_bn, &alpha);
        let (bn_out, bn_cache) = self.bn.forward_train(&pre_bn, BnBranch::Binary)?;
        let mut y = self.prelu.forward(&bn_out)?;
        self.add_skip(&mut y, y_prev)?;

        let ytil = match ytil_prev {
            None => None,
            Some(xt) => {
                let padded_t = pad_nchw(xt, self.pad);
                let ht = hard_tanh(&padded_t);
                let conv_t = conv2d(&ht, &self.w, self.stride, 0)?;
                let (bn_t, _) = self.bn.forward_train(&conv_t, BnBranch::Latent)?;
                let mut yt = self.prelu.forward(&bn_t)?;
                self.add_skip(&mut yt, xt)?;
                Some(yt)
            }
        };
        Ok((
            y,
            ytil,
            BlockCache {
                padded_raw,
                signed_in,
                bker,
                alpha,
                bn_out,
                bn_cache,
            },
        ))
    }

    /// Gradients flow through the binary path only: PReLU, train-mode BN,
    /// the alpha scale (a constant), the convolution, then the STE window to
    /// W and the hard_tanh window of the input binarization.
    pub fn backward(
        &self,
        cache: &BlockCache<E>,
        grad_y: &Tensor<E>,
    ) -> Result<(Tensor<E>, BlockGrads<E>)> {
        let (g_bn_out, g_slope) = self.prelu.backward(&cache.bn_out, grad_y)?;
        let (g_pre_bn, g_gamma, g_beta) = self.bn.backward(&cache.bn_cache, &g_bn_out)?;
        let mut g_conv = g_pre_bn;
        scale_channels(&mut g_conv, &cache.alpha);
        let (g_signed, g_bker) =
            conv2d_backward(&g_conv, &cache.signed_in, &cache.bker, self.stride, 0)?;
        let g_w = ste_backward(&g_bker, &self.w)?;
        let g_padded = hard_tanh_backward(&g_signed, &cache.padded_raw)?;
        let mut g_prev = crop_nchw(&g_padded, self.pad);
        if self.skip {
            let k = self.out_channels();
            if grad_y.dim(1) == self.in_channels() && k == self.in_channels() {
                g_prev.add_assign(grad_y)?;
            } else {
                let folded = repeat_channels_t(grad_y, self.in_channels());
                g_prev.add_assign(&folded)?;
            }
        }
        Ok((
            g_prev,
            BlockGrads {
                w: g_w,
                gamma: g_gamma,
                beta: g_beta,
                slope: g_slope,
            },
        ))
    }

    /// Eval-mode forward over running statistics (no state mutation).
    pub fn forward_eval(&self, x: &Tensor<E>, path: EvalPath) -> Result<Tensor<E>> {
        let padded = pad_nchw(x, self.pad);
        let pre_bn = match path {
            EvalPath::Binary => {
                let s = sign_forward(&padded);
                let bker = sign_forward(&self.w);
                let alpha = alpha_scale(&self.w)?;
                let mut out = conv2d(&s, &bker, self.stride, 0)?;
                scale_channels(&mut out, &alpha);
                out
            }
            EvalPath::LatentHardTanh => {
                let ht = hard_tanh(&padded);
                conv2d(&ht, &self.w, self.stride, 0)?
            }
            EvalPath::LatentOutdated => {
                let s = sign_forward(&padded);
                conv2d(&s, &self.w, self.stride, 0)?
            }
        };
        let branch = match path {
            EvalPath::LatentHardTanh => BnBranch::Latent,
            _ => BnBranch::Binary,
        };
        let bn_out = self.bn.forward_eval(&pre_bn, branch)?;
        let mut y = self.prelu.forward(&bn_out)?;
        self.add_skip(&mut y, x)?;
        Ok(y)
    }

    /// Latent-path forward that normalizes with batch statistics while
    /// streaming exact pre-BN moments into `acc`; used by BN recalibration.
    pub fn forward_latent_recal(&self, x: &Tensor<E>, acc: &mut StatAcc) -> Result<Tensor<E>> {
        let padded = pad_nchw(x, self.pad);
        let ht = hard_tanh(&padded);
        let conv_t = conv2d(&ht, &self.w, self.stride, 0)?;
        acc.update(&conv_t)?;
        let bn_t = self.bn.forward_batch_stats(&conv_t)?;
        let mut y = self.prelu.forward(&bn_t)?;
        self.add_skip(&mut y, x)?;
        Ok(y)
    }
}

/// Exact streaming mean/variance accumulator over the N,H,W axes.
#[derive(Debug, Clone)]
pub struct StatAcc {
    pub count: u64,
    pub sum: Vec<f64>,
    pub sumsq: Vec<f64>,
}

impl StatAcc {
    pub fn new(c: usize) -> Self {
        StatAcc {
            count: 0,
            sum: vec![0.0; c],
            sumsq: vec![0.0; c],
        }
    }

    pub fn update<E: Element>(&mut self, x: &Tensor<E>) -> Result<()> {
        if x.dim(1) != self.sum.len() {
            return Err(Error::invalid(
                "StatAcc::update",
                format!("expected {} channels, got {}", self.sum.len(), x.dim(1)),
            ));
        }
        let (n, c) = (x.dim(0), x.dim(1));
        let plane = x.dim(2) * x.dim(3);
        for ni in 0..n {
            for ci in 0..c {
                let base = (ni * c + ci) * plane;
                for &v in &x.data()[base..base + plane] {
                    let v = v.to_f64();
                    self.sum[ci] += v;
                    self.sumsq[ci] += v * v;
                }
            }
        }
        self.count += (n * plane) as u64;
        Ok(())
    }

    /// Aggregate biased moments over everything seen so far.
    pub fn finalize<E: Element>(&self) -> (Tensor<E>, Tensor<E>) {
        let c = self.sum.len();
        let inv = 1.0 / self.count.max(1) as f64;
        let mut mean = vec![E::ZERO; c];
        let mut var = vec![E::ZERO; c];
        for ci in 0..c {
            let m = self.sum[ci] * inv;
            mean[ci] = E::from_f64(m);
            var[ci] = E::from_f64((self.sumsq[ci] * inv - m * m).max(0.0));
        }
        (
            Tensor::from_vec(&[c], mean).unwrap(),
            Tensor::from_vec(&[c], var).unwrap(),
        )
    }
}
