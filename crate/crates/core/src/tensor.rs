//! Dense N-dimensional arrays over a selectable float precision.
//!
//! Training runs in `f32`; gradient-check tests instantiate the same code in
//! `f64`. There is no implicit broadcasting: every elementwise op rejects
//! shape mismatches.

use std::fmt::Debug;
use std::ops::{Add, AddAssign, Div, DivAssign, Mul, MulAssign, Neg, Sub, SubAssign};

use crate::error::{Error, Result};

/// Float element of a [`Tensor`]. Implemented for `f32` and `f64`.
pub trait Element:
    Copy
    + Clone
    + Debug
    + PartialOrd
    + PartialEq
    + Default
    + Add<Output = Self>
    + Sub<Output = Self>
    + Mul<Output = Self>
    + Div<Output = Self>
    + Neg<Output = Self>
    + AddAssign
    + SubAssign
    + MulAssign
    + DivAssign
    + Send
    + Sync
    + 'static
{
    const ZERO: Self;
    const ONE: Self;
    fn from_f64(v: f64) -> Self;
    fn to_f64(self) -> f64;
    fn abs(self) -> Self;
    fn sqrt(self) -> Self;
    fn exp(self) -> Self;
    fn ln(self) -> Self;
    fn maximum(self, other: Self) -> Self;
    fn is_finite(self) -> bool;
}

macro_rules! impl_element {
    ($t:ty) => {
        impl Element for $t {
            const ZERO: Self = 0.0;
            const ONE: Self = 1.0;
            fn from_f64(v: f64) -> Self {
                v as $t
            }
            fn to_f64(self) -> f64 {
                self as f64
            }
            fn abs(self) -> Self {
                <$t>::abs(self)
            }
            fn sqrt(self) -> Self {
                <$t>::sqrt(self)
            }
            fn exp(self) -> Self {
                <$t>::exp(self)
            }
            fn ln(self) -> Self {
                <$t>::ln(self)
            }
            fn maximum(self, other: Self) -> Self {
                <$t>::max(self, other)
            }
            fn is_finite(self) -> bool {
                <$t>::is_finite(self)
            }
        }
    };
}

impl_element!(f32);
impl_element!(f64);

/// Dense array with row-major contiguous storage.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor<E = f32> {
    shape: Vec<usize>,
    data: Vec<E>,
}

impl<E: Element> Tensor<E> {
    pub fn zeros(shape: &[usize]) -> Self {
        Tensor {
            shape: shape.to_vec(),
            data: vec![E::ZERO; shape.iter().product()],
        }
    }

    pub fn filled(shape: &[usize], value: E) -> Self {
        Tensor {
            shape: shape.to_vec(),
            data: vec![value; shape.iter().product()],
        }
    }

    pub fn from_vec(shape: &[usize], data: Vec<E>) -> Result<Self> {
        let want: usize = shape.iter().product();
        if data.len() != want {
            return Err(Error::invalid(
                "Tensor::from_vec",
                format!("shape {shape:?} wants {want} elements, got {}", data.len()),
            ));
        }
        Ok(Tensor {
            shape: shape.to_vec(),
            data,
        })
    }

    pub fn scalar(v: E) -> Self {
        Tensor {
            shape: vec![1],
            data: vec![v],
        }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn rank(&self) -> usize {
        self.shape.len()
    }

    pub fn dim(&self, axis: usize) -> usize {
        self.shape[axis]
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn data(&self) -> &[E] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [E] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<E> {
        self.data
    }

    /// Reinterpret with a new shape of identical element count.
    pub fn reshape(&self, shape: &[usize]) -> Result<Self> {
        let want: usize = shape.iter().product();
        if want != self.data.len() {
            return Err(Error::shape("reshape", &self.shape, shape));
        }
        Ok(Tensor {
            shape: shape.to_vec(),
            data: self.data.clone(),
        })
    }

    pub fn map(&self, f: impl Fn(E) -> E) -> Self {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn map_assign(&mut self, f: impl Fn(E) -> E) {
        for v in &mut self.data {
            *v = f(*v);
        }
    }

    fn check_same_shape(&self, other: &Self, op: &'static str) -> Result<()> {
        if self.shape != other.shape {
            return Err(Error::shape(op, &self.shape, &other.shape));
        }
        Ok(())
    }

    pub fn add(&self, other: &Self) -> Result<Self> {
        self.check_same_shape(other, "add")?;
        let data = self
            .data
            .iter()
            .zip(&other.data)
            .map(|(&a, &b)| a + b)
            .collect();
        Ok(Tensor {
            shape: self.shape.clone(),
            data,
        })
    }

    pub fn add_assign(&mut self, other: &Self) -> Result<()> {
        self.check_same_shape(other, "add_assign")?;
        for (a, &b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
        Ok(())
    }

    pub fn sub(&self, other: &Self) -> Result<Self> {
        self.check_same_shape(other, "sub")?;
        let data = self
            .data
            .iter()
            .zip(&other.data)
            .map(|(&a, &b)| a - b)
            .collect();
        Ok(Tensor {
            shape: self.shape.clone(),
            data,
        })
    }

    pub fn mul(&self, other: &Self) -> Result<Self> {
        self.check_same_shape(other, "mul")?;
        let data = self
            .data
            .iter()
            .zip(&other.data)
            .map(|(&a, &b)| a * b)
            .collect();
        Ok(Tensor {
            shape: self.shape.clone(),
            data,
        })
    }

    pub fn scale(&self, s: E) -> Self {
        self.map(|v| v * s)
    }

    pub fn scale_assign(&mut self, s: E) {
        self.map_assign(|v| v * s);
    }

    pub fn sum(&self) -> E {
        let mut acc = E::ZERO;
        for &v in &self.data {
            acc += v;
        }
        acc
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// Squared L2 distance to another tensor of identical shape.
    pub fn sq_dist(&self, other: &Self) -> Result<E> {
        self.check_same_shape(other, "sq_dist")?;
        let mut acc = E::ZERO;
        for (&a, &b) in self.data.iter().zip(&other.data) {
            let d = a - b;
            acc += d * d;
        }
        Ok(acc)
    }

    /// Convert element precision.
    pub fn cast<F: Element>(&self) -> Tensor<F> {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|v| F::from_f64(v.to_f64())).collect(),
        }
    }
}

/// Per-channel mean and biased variance (divide by count) of an NCHW tensor
/// over the N, H, W axes.
pub fn channel_stats<E: Element>(x: &Tensor<E>) -> Result<(Tensor<E>, Tensor<E>)> {
    if x.rank() != 4 {
        return Err(Error::invalid(
            "channel_stats",
            format!("expected NCHW tensor, got shape {:?}", x.shape()),
        ));
    }
    let (n, c, h, w) = (x.dim(0), x.dim(1), x.dim(2), x.dim(3));
    let plane = h * w;
    let count = n * plane;
    if count == 0 {
        return Err(Error::invalid("channel_stats", "empty reduction axes"));
    }
    let inv = E::from_f64(1.0 / count as f64);
    let mut mean = vec![E::ZERO; c];
    let mut var = vec![E::ZERO; c];
    let data = x.data();
    for ci in 0..c {
        let mut acc = E::ZERO;
        for ni in 0..n {
            let base = (ni * c + ci) * plane;
            for &v in &data[base..base + plane] {
                acc += v;
            }
        }
        mean[ci] = acc * inv;
    }
    for ci in 0..c {
        let m = mean[ci];
        let mut acc = E::ZERO;
        for ni in 0..n {
            let base = (ni * c + ci) * plane;
            for &v in &data[base..base + plane] {
                let d = v - m;
                acc += d * d;
            }
        }
        var[ci] = acc * inv;
    }
    Ok((
        Tensor::from_vec(&[c], mean).unwrap(),
        Tensor::from_vec(&[c], var).unwrap(),
    ))
}

/// Zero-pad the two spatial axes of an NCHW tensor.
pub fn pad_nchw<E: Element>(x: &Tensor<E>, pad: usize) -> Tensor<E> {
    if pad == 0 {
        return x.clone();
    }
    let (n, c, h, w) = (x.dim(0), x.dim(1), x.dim(2), x.dim(3));
    let (hp, wp) = (h + 2 * pad, w + 2 * pad);
    let mut out = Tensor::zeros(&[n, c, hp, wp]);
    let src = x.data();
    let dst = out.data_mut();
    for ni in 0..n {
        for ci in 0..c {
            let sbase = (ni * c + ci) * h * w;
            let dbase = (ni * c + ci) * hp * wp;
            for y in 0..h {
                let srow = sbase + y * w;
                let drow = dbase + (y + pad) * wp + pad;
                dst[drow..drow + w].copy_from_slice(&src[srow..srow + w]);
            }
        }
    }
    out
}

/// Drop a zero-padding border from the two spatial axes (inverse of
/// [`pad_nchw`] up to the discarded border).
pub fn crop_nchw<E: Element>(x: &Tensor<E>, pad: usize) -> Tensor<E> {
    if pad == 0 {
        return x.clone();
    }
    let (n, c, hp, wp) = (x.dim(0), x.dim(1), x.dim(2), x.dim(3));
    let (h, w) = (hp - 2 * pad, wp - 2 * pad);
    let mut out = Tensor::zeros(&[n, c, h, w]);
    let src = x.data();
    let dst = out.data_mut();
    for ni in 0..n {
        for ci in 0..c {
            let sbase = (ni * c + ci) * hp * wp;
            let dbase = (ni * c + ci) * h * w;
            for y in 0..h {
                let srow = sbase + (y + pad) * wp + pad;
                let drow = dbase + y * w;
                dst[drow..drow + w].copy_from_slice(&src[srow..srow + w]);
            }
        }
    }
    out
}
