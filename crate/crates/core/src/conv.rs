//! Convolution and matrix-multiply kernels.
//!
//! `conv2d` lowers to an im2col buffer and a panel-blocked matmul. Each output
//! element accumulates its inner sum in (channel, ky, kx) order, one rounding
//! per step, which keeps the fast path bitwise identical to the naive
//! six-loop reference in `reference::naive_conv2d`.

use crate::error::{Error, Result};
use crate::tensor::{crop_nchw, pad_nchw, Element, Tensor};

const N_PANEL: usize = 1024;

/// C += A * B for row-major A[M,K], B[K,N], C[M,N].
///
/// Four C rows are produced per pass so every loaded B row is reused; the
/// per-element accumulation order over k is unchanged.
pub(crate) fn matmul_acc<E: Element>(
    a: &[E],
    b: &[E],
    c: &mut [E],
    m: usize,
    k: usize,
    n: usize,
) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(c.len(), m * n);
    let mut j0 = 0;
    while j0 < n {
        let jw = N_PANEL.min(n - j0);
        let mut i = 0;
        while i + 4 <= m {
            let (c01, c23) = c[i * n..(i + 4) * n].split_at_mut(2 * n);
            let (c0, c1) = c01.split_at_mut(n);
            let (c2, c3) = c23.split_at_mut(n);
            let c0 = &mut c0[j0..j0 + jw];
            let c1 = &mut c1[j0..j0 + jw];
            let c2 = &mut c2[j0..j0 + jw];
            let c3 = &mut c3[j0..j0 + jw];
            for kk in 0..k {
                let x0 = a[i * k + kk];
                let x1 = a[(i + 1) * k + kk];
                let x2 = a[(i + 2) * k + kk];
                let x3 = a[(i + 3) * k + kk];
                let b_row = &b[kk * n + j0..kk * n + j0 + jw];
                for j in 0..jw {
                    let bv = b_row[j];
                    c0[j] += x0 * bv;
                    c1[j] += x1 * bv;
                    c2[j] += x2 * bv;
                    c3[j] += x3 * bv;
                }
            }
            i += 4;
        }
        while i < m {
            let c_row = &mut c[i * n + j0..i * n + j0 + jw];
            for kk in 0..k {
                let aik = a[i * k + kk];
                let b_row = &b[kk * n + j0..kk * n + j0 + jw];
                for j in 0..jw {
                    c_row[j] += aik * b_row[j];
                }
            }
            i += 1;
        }
        j0 += jw;
    }
}

/// Standard product of a [M,K] and b [K,N].
pub fn matmul<E: Element>(a: &Tensor<E>, b: &Tensor<E>) -> Result<Tensor<E>> {
    if a.rank() != 2 || b.rank() != 2 || a.dim(1) != b.dim(0) {
        return Err(Error::shape("matmul", a.shape(), b.shape()));
    }
    let (m, k, n) = (a.dim(0), a.dim(1), b.dim(1));
    let mut out = Tensor::zeros(&[m, n]);
    matmul_acc(a.data(), b.data(), out.data_mut(), m, k, n);
    Ok(out)
}

pub(crate) fn transpose2d<E: Element>(x: &Tensor<E>) -> Tensor<E> {
    let (m, n) = (x.dim(0), x.dim(1));
    let mut out = Tensor::zeros(&[n, m]);
    let src = x.data();
    let dst = out.data_mut();
    for i in 0..m {
        for j in 0..n {
            dst[j * m + i] = src[i * n + j];
        }
    }
    out
}

struct ConvDims {
    n: usize,
    c: usize,
    k: usize,
    kh: usize,
    kw: usize,
    hp: usize,
    wp: usize,
    oh: usize,
    ow: usize,
}

fn conv_dims<E: Element>(
    input: &Tensor<E>,
    weight: &Tensor<E>,
    stride: usize,
    pad: usize,
) -> Result<ConvDims> {
    if input.rank() != 4 || weight.rank() != 4 {
        return Err(Error::shape("conv2d", input.shape(), weight.shape()));
    }
    if input.dim(1) != weight.dim(1) {
        return Err(Error::shape("conv2d", input.shape(), weight.shape()));
    }
    if stride < 1 {
        return Err(Error::invalid("conv2d", "stride must be >= 1"));
    }
    let (n, c, h, w) = (input.dim(0), input.dim(1), input.dim(2), input.dim(3));
    let (k, kh, kw) = (weight.dim(0), weight.dim(2), weight.dim(3));
    let (hp, wp) = (h + 2 * pad, w + 2 * pad);
    if kh > hp || kw > wp || kh == 0 || kw == 0 {
        return Err(Error::invalid(
            "conv2d",
            format!("kernel {kh}x{kw} does not fit padded input {hp}x{wp}"),
        ));
    }
    let oh = (hp - kh) / stride + 1;
    let ow = (wp - kw) / stride + 1;
    Ok(ConvDims {
        n,
        c,
        k,
        kh,
        kw,
        hp,
        wp,
        oh,
        ow,
    })
}

/// Gather one padded sample into an im2col buffer of shape [C*kh*kw, OH*OW].
/// Row (c, ky, kx) holds that kernel tap's value at every output position.
fn im2col_taps<E: Element>(sample: &[E], d: &ConvDims, stride: usize, out: &mut [E]) {
    let p = d.oh * d.ow;
    let mut row = 0;
    for c in 0..d.c {
        let plane = &sample[c * d.hp * d.wp..(c + 1) * d.hp * d.wp];
        for ky in 0..d.kh {
            for kx in 0..d.kw {
                let dst = &mut out[row * p..(row + 1) * p];
                if stride == 1 {
                    for oy in 0..d.oh {
                        let src = &plane[(oy + ky) * d.wp + kx..(oy + ky) * d.wp + kx + d.ow];
                        dst[oy * d.ow..(oy + 1) * d.ow].copy_from_slice(src);
                    }
                } else {
                    for oy in 0..d.oh {
                        let base = (oy * stride + ky) * d.wp + kx;
                        for ox in 0..d.ow {
                            dst[oy * d.ow + ox] = plane[base + ox * stride];
                        }
                    }
                }
                row += 1;
            }
        }
    }
}

/// Gather one padded sample into an im2col buffer of shape [OH*OW, C*kh*kw].
/// Row p holds the full receptive-field patch at output position p.
fn im2col_patches<E: Element>(sample: &[E], d: &ConvDims, stride: usize, out: &mut [E]) {
    let ckk = d.c * d.kh * d.kw;
    for oy in 0..d.oh {
        for ox in 0..d.ow {
            let dst = &mut out[(oy * d.ow + ox) * ckk..(oy * d.ow + ox + 1) * ckk];
            let mut col = 0;
            for c in 0..d.c {
                let plane = &sample[c * d.hp * d.wp..(c + 1) * d.hp * d.wp];
                for ky in 0..d.kh {
                    let base = (oy * stride + ky) * d.wp + ox * stride;
                    dst[col..col + d.kw].copy_from_slice(&plane[base..base + d.kw]);
                    col += d.kw;
                }
            }
        }
    }
}

/// Cross-correlation of input [N,C,H,W] with weight [K,C,kh,kw].
pub fn conv2d<E: Element>(
    input: &Tensor<E>,
    weight: &Tensor<E>,
    stride: usize,
    pad: usize,
) -> Result<Tensor<E>> {
    let d = conv_dims(input, weight, stride, pad)?;
    let padded = pad_nchw(input, pad);
    let ckk = d.c * d.kh * d.kw;
    let p = d.oh * d.ow;
    let mut out = Tensor::zeros(&[d.n, d.k, d.oh, d.ow]);
    let mut taps = vec![E::ZERO; ckk * p];
    let sample_len = d.c * d.hp * d.wp;
    for ni in 0..d.n {
        let sample = &padded.data()[ni * sample_len..(ni + 1) * sample_len];
        im2col_taps(sample, &d, stride, &mut taps);
        let slab = &mut out.data_mut()[ni * d.k * p..(ni + 1) * d.k * p];
        matmul_acc(weight.data(), &taps, slab, d.k, ckk, p);
    }
    Ok(out)
}

/// Exact gradients of [`conv2d`] with respect to input and weight.
pub fn conv2d_backward<E: Element>(
    grad_out: &Tensor<E>,
    input: &Tensor<E>,
    weight: &Tensor<E>,
    stride: usize,
    pad: usize,
) -> Result<(Tensor<E>, Tensor<E>)> {
    let d = conv_dims(input, weight, stride, pad)?;
    let expect = [d.n, d.k, d.oh, d.ow];
    if grad_out.shape() != expect {
        return Err(Error::shape("conv2d_backward", grad_out.shape(), &expect));
    }
    let padded = pad_nchw(input, pad);
    let ckk = d.c * d.kh * d.kw;
    let p = d.oh * d.ow;
    let sample_len = d.c * d.hp * d.wp;

    // grad_weight[K,CKK] accumulates grad_out_n[K,P] * patches_n[P,CKK]
    // sample by sample in batch order.
    let mut grad_weight = Tensor::zeros(weight.shape());
    let mut patches = vec![E::ZERO; p * ckk];
    for ni in 0..d.n {
        let sample = &padded.data()[ni * sample_len..(ni + 1) * sample_len];
        im2col_patches(sample, &d, stride, &mut patches);
        let go = &grad_out.data()[ni * d.k * p..(ni + 1) * d.k * p];
        matmul_acc(go, &patches, grad_weight.data_mut(), d.k, p, ckk);
    }

    // grad_input: scatter W^T * grad_out_n back through the im2col gather.
    let w_t = {
        let w2 = weight.reshape(&[d.k, ckk])?;
        transpose2d(&w2)
    };
    let mut grad_padded = Tensor::zeros(&[d.n, d.c, d.hp, d.wp]);
    let mut g_taps = vec![E::ZERO; ckk * p];
    for ni in 0..d.n {
        for v in g_taps.iter_mut() {
            *v = E::ZERO;
        }
        let go = &grad_out.data()[ni * d.k * p..(ni + 1) * d.k * p];
        matmul_acc(w_t.data(), go, &mut g_taps, ckk, d.k, p);
        let gp = &mut grad_padded.data_mut()[ni * sample_len..(ni + 1) * sample_len];
        let mut row = 0;
        for c in 0..d.c {
            let plane = &mut gp[c * d.hp * d.wp..(c + 1) * d.hp * d.wp];
            for ky in 0..d.kh {
                for kx in 0..d.kw {
                    let src = &g_taps[row * p..(row + 1) * p];
                    for oy in 0..d.oh {
                        let base = (oy * stride + ky) * d.wp + kx;
                        for ox in 0..d.ow {
                            plane[base + ox * stride] += src[oy * d.ow + ox];
                        }
                    }
                    row += 1;
                }
            }
        }
    }
    let grad_input = crop_nchw(&grad_padded, pad);
    Ok((grad_input, grad_weight))
}
