//! Weight and activation binarization with the straight-through estimator.
//!
//! Binary kernels are `sign(W)` with a per-output-channel scale `alpha` equal
//! to the mean absolute value of the channel, the closed-form minimizer of the
//! quantization error `||W - alpha*B||^2`. The backward surrogate of `sign` is
//! `hard_tanh`, so `ste_backward` and `hard_tanh_backward` apply the identical
//! `|.| < 1` window.

use crate::error::{Error, Result};
use crate::tensor::{Element, Tensor};

/// Binary kernel plus its per-output-channel scale.
#[derive(Debug, Clone)]
pub struct BinarizeResult<E = f32> {
    /// Elements are exactly -1 or +1.
    pub b: Tensor<E>,
    /// `alpha[k]` = mean of `|w|` over output channel k.
    pub alpha: Tensor<E>,
}

/// Elementwise sign with the convention sign(0) = +1.
pub fn sign_forward<E: Element>(w: &Tensor<E>) -> Tensor<E> {
    w.map(|v| if v < E::ZERO { -E::ONE } else { E::ONE })
}

/// Closed-form per-output-channel scale for a [K,C,kh,kw] kernel.
pub fn alpha_scale<E: Element>(w: &Tensor<E>) -> Result<Tensor<E>> {
    if w.rank() != 4 {
        return Err(Error::invalid(
            "alpha_scale",
            format!("expected [K,C,kh,kw] kernel, got {:?}", w.shape()),
        ));
    }
    let k = w.dim(0);
    let per = w.dim(1) * w.dim(2) * w.dim(3);
    if per == 0 {
        return Err(Error::invalid("alpha_scale", "empty kernel channel"));
    }
    let inv = E::from_f64(1.0 / per as f64);
    let mut alpha = vec![E::ZERO; k];
    for ki in 0..k {
        let mut acc = E::ZERO;
        for &v in &w.data()[ki * per..(ki + 1) * per] {
            acc += v.abs();
        }
        alpha[ki] = acc * inv;
    }
    Tensor::from_vec(&[k], alpha)
}

pub fn binarize<E: Element>(w: &Tensor<E>) -> Result<BinarizeResult<E>> {
    Ok(BinarizeResult {
        b: sign_forward(w),
        alpha: alpha_scale(w)?,
    })
}

/// Straight-through gradient: pass `grad_b` where `|w| < 1`, zero elsewhere
/// (strict at the boundary).
pub fn ste_backward<E: Element>(grad_b: &Tensor<E>, w: &Tensor<E>) -> Result<Tensor<E>> {
    if grad_b.shape() != w.shape() {
        return Err(Error::shape("ste_backward", grad_b.shape(), w.shape()));
    }
    let data = grad_b
        .data()
        .iter()
        .zip(w.data())
        .map(|(&g, &v)| if v.abs() < E::ONE { g } else { E::ZERO })
        .collect();
    Tensor::from_vec(w.shape(), data)
}

/// Clamp to [-1, 1].
pub fn hard_tanh<E: Element>(x: &Tensor<E>) -> Tensor<E> {
    x.map(|v| {
        if v < -E::ONE {
            -E::ONE
        } else if v > E::ONE {
            E::ONE
        } else {
            v
        }
    })
}

/// Gradient of [`hard_tanh`]: the same strict `|x| < 1` window as
/// [`ste_backward`].
pub fn hard_tanh_backward<E: Element>(grad: &Tensor<E>, x: &Tensor<E>) -> Result<Tensor<E>> {
    if grad.shape() != x.shape() {
        return Err(Error::shape("hard_tanh_backward", grad.shape(), x.shape()));
    }
    let data = grad
        .data()
        .iter()
        .zip(x.data())
        .map(|(&g, &v)| if v.abs() < E::ONE { g } else { E::ZERO })
        .collect();
    Tensor::from_vec(x.shape(), data)
}
