//! Slow reference implementations used as test oracles.
//!
//! Everything here is written in the most literal form possible and stays
//! independent of the fast paths it is used to check.

use crate::tensor::{Element, Tensor};

/// Six-nested-loop cross-correlation, the oracle for `conv::conv2d`.
pub fn naive_conv2d<E: Element>(
    input: &Tensor<E>,
    weight: &Tensor<E>,
    stride: usize,
    pad: usize,
) -> Tensor<E> {
    let (n, c, h, w) = (input.dim(0), input.dim(1), input.dim(2), input.dim(3));
    let (k, kh, kw) = (weight.dim(0), weight.dim(2), weight.dim(3));
    let (hp, wp) = (h + 2 * pad, w + 2 * pad);
    let oh = (hp - kh) / stride + 1;
    let ow = (wp - kw) / stride + 1;
    let mut out = Tensor::zeros(&[n, k, oh, ow]);
    let at = |ni: usize, ci: usize, y: isize, x: isize| -> E {
        if y < 0 || x < 0 || y >= h as isize || x >= w as isize {
            E::ZERO
        } else {
            input.data()[((ni * c + ci) * h + y as usize) * w + x as usize]
        }
    };
    for ni in 0..n {
        for ki in 0..k {
            for oy in 0..oh {
                for ox in 0..ow {
                    let mut acc = E::ZERO;
                    for ci in 0..c {
                        for ky in 0..kh {
                            for kx in 0..kw {
                                let y = (oy * stride + ky) as isize - pad as isize;
                                let x = (ox * stride + kx) as isize - pad as isize;
                                let wv = weight.data()[((ki * c + ci) * kh + ky) * kw + kx];
                                acc += at(ni, ci, y, x) * wv;
                            }
                        }
                    }
                    out.data_mut()[((ni * k + ki) * oh + oy) * ow + ox] = acc;
                }
            }
        }
    }
    out
}

/// Triple-loop matrix product, the oracle for `conv::matmul`.
pub fn naive_matmul<E: Element>(a: &Tensor<E>, b: &Tensor<E>) -> Tensor<E> {
    let (m, k, n) = (a.dim(0), a.dim(1), b.dim(1));
    let mut out = Tensor::zeros(&[m, n]);
    for i in 0..m {
        for j in 0..n {
            let mut acc = E::ZERO;
            for kk in 0..k {
                acc += a.data()[i * k + kk] * b.data()[kk * n + j];
            }
            out.data_mut()[i * n + j] = acc;
        }
    }
    out
}

/// Central finite differences of a scalar function of one tensor, evaluated
/// element by element with step `eps`. Meant for `f64` tensors.
pub fn finite_diff<E: Element>(
    x: &Tensor<E>,
    eps: f64,
    mut f: impl FnMut(&Tensor<E>) -> f64,
) -> Tensor<E> {
    let mut grad = Tensor::zeros(x.shape());
    let mut probe = x.clone();
    for i in 0..x.len() {
        let orig = x.data()[i];
        probe.data_mut()[i] = orig + E::from_f64(eps);
        let up = f(&probe);
        probe.data_mut()[i] = orig - E::from_f64(eps);
        let down = f(&probe);
        probe.data_mut()[i] = orig;
        grad.data_mut()[i] = E::from_f64((up - down) / (2.0 * eps));
    }
    grad
}

/// Assert elementwise closeness under a relative tolerance with an absolute
/// floor of the same magnitude.
pub fn assert_close_rel<E: Element>(got: &[E], want: &[E], tol: f64) {
    assert_eq!(got.len(), want.len(), "length mismatch");
    for (i, (g, w)) in got.iter().zip(want).enumerate() {
        let (g, w) = (g.to_f64(), w.to_f64());
        let denom = w.abs().max(1.0);
        assert!(
            (g - w).abs() / denom <= tol,
            "element {i}: got {g}, want {w} (rel tol {tol})"
        );
    }
}

/// Maximum relative deviation between two slices (absolute floor 1.0).
pub fn max_rel_err<E: Element>(got: &[E], want: &[E]) -> f64 {
    got.iter()
        .zip(want)
        .map(|(g, w)| {
            let (g, w) = (g.to_f64(), w.to_f64());
            (g - w).abs() / w.abs().max(1.0)
        })
        .fold(0.0, f64::max)
}

/// Move every element that sits within `margin` of one of the `kinks` off the
/// kink, so finite differences of piecewise functions stay two-sided smooth.
pub fn nudge_off_kinks<E: Element>(x: &mut Tensor<E>, kinks: &[f64], margin: f64) {
    for v in x.data_mut().iter_mut() {
        let mut fv = v.to_f64();
        for &kink in kinks {
            if (fv - kink).abs() < margin {
                fv = if fv >= kink {
                    kink + 2.0 * margin
                } else {
                    kink - 2.0 * margin
                };
            }
        }
        *v = E::from_f64(fv);
    }
}
