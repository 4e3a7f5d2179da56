//! Training objectives.
//!
//! Cross-entropy drives the binary path. The representation-approximation
//! losses pull the binary path's penultimate features toward the detached
//! latent-path features: instance-level as a plain per-image squared
//! distance, and label-aware by additionally pulling same-class features
//! together across both paths. No loss ever emits a gradient for the latent
//! features.

use crate::error::{Error, Result};
use crate::tensor::{Element, Tensor};

/// Paired penultimate (or projected) features entering the representation
/// losses. `ytil` is the latent path and is treated as a constant.
#[derive(Debug, Clone)]
pub struct RepBatch<E = f32> {
    pub y: Tensor<E>,
    pub ytil: Tensor<E>,
    pub labels: Vec<usize>,
}

impl<E: Element> RepBatch<E> {
    fn validate(&self, op: &'static str) -> Result<(usize, usize)> {
        if self.y.shape() != self.ytil.shape() || self.y.rank() != 2 {
            return Err(Error::shape(op, self.y.shape(), self.ytil.shape()));
        }
        let (n, d) = (self.y.dim(0), self.y.dim(1));
        if self.labels.len() != n {
            return Err(Error::invalid(
                op,
                format!("{n} feature rows but {} labels", self.labels.len()),
            ));
        }
        Ok((n, d))
    }

    fn row(&self, t: &'static str, i: usize) -> &[E] {
        let d = self.y.dim(1);
        match t {
            "y" => &self.y.data()[i * d..(i + 1) * d],
            _ => &self.ytil.data()[i * d..(i + 1) * d],
        }
    }

    /// Same-label indices in the batch excluding `i`.
    fn peers(&self, i: usize) -> Vec<usize> {
        (0..self.labels.len())
            .filter(|&j| j != i && self.labels[j] == self.labels[i])
            .collect()
    }
}

/// Per-sample loss and mean-reduced gradient of softmax cross-entropy.
pub fn cross_entropy<E: Element>(
    logits: &Tensor<E>,
    labels: &[usize],
) -> Result<(E, Tensor<E>)> {
    if logits.rank() != 2 {
        return Err(Error::invalid(
            "cross_entropy",
            format!("expected [N,K] logits, got {:?}", logits.shape()),
        ));
    }
    let (n, k) = (logits.dim(0), logits.dim(1));
    if labels.len() != n {
        return Err(Error::invalid(
            "cross_entropy",
            format!("{n} logit rows but {} labels", labels.len()),
        ));
    }
    if let Some(&bad) = labels.iter().find(|&&l| l >= k) {
        return Err(Error::invalid(
            "cross_entropy",
            format!("label {bad} out of range for {k} classes"),
        ));
    }
    let inv_n = E::from_f64(1.0 / n as f64);
    let mut grad = Tensor::zeros(&[n, k]);
    let mut loss = E::ZERO;
    for ni in 0..n {
        let row = &logits.data()[ni * k..(ni + 1) * k];
        let mut maxv = row[0];
        for &v in row {
            maxv = maxv.maximum(v);
        }
        let mut denom = E::ZERO;
        for &v in row {
            denom += (v - maxv).exp();
        }
        let log_denom = denom.ln();
        let target = labels[ni];
        loss += log_denom - (row[target] - maxv);
        let grow = &mut grad.data_mut()[ni * k..(ni + 1) * k];
        for (ki, g) in grow.iter_mut().enumerate() {
            let p = (row[ki] - maxv).exp() / denom;
            let onehot = if ki == target { E::ONE } else { E::ZERO };
            *g = (p - onehot) * inv_n;
        }
    }
    Ok((loss * inv_n, grad))
}

/// Instance-level approximation: sum over the batch of the squared distance
/// between each image's latent and binary features. Accumulated row by row,
/// matching the per-sample structure of the formula.
pub fn rep_instance<E: Element>(batch: &RepBatch<E>) -> Result<E> {
    let (n, _) = batch.validate("rep_instance")?;
    let mut total = E::ZERO;
    for i in 0..n {
        total += sq_dist_rows(batch.row("ytil", i), batch.row("y", i));
    }
    Ok(total)
}

/// Gradient of [`rep_instance`] with respect to the binary features.
pub fn rep_instance_backward<E: Element>(batch: &RepBatch<E>) -> Result<Tensor<E>> {
    batch.validate("rep_instance")?;
    let two = E::from_f64(2.0);
    Ok(batch.y.sub(&batch.ytil)?.scale(two))
}

fn sq_dist_rows<E: Element>(a: &[E], b: &[E]) -> E {
    let mut acc = E::ZERO;
    for (x, y) in a.iter().zip(b) {
        let d = *x - *y;
        acc += d * d;
    }
    acc
}

/// Label-aware approximation: for every sample, the instance term plus the
/// three same-class cross terms (binary-binary, latent-binary, binary-latent;
/// latent-latent is excluded because the latent side is detached), each sum
/// normalized by 1 / ((3|I(i)|+1) D).
pub fn rep_label_aware<E: Element>(batch: &RepBatch<E>) -> Result<E> {
    let (n, d) = batch.validate("rep_label_aware")?;
    let mut total = E::ZERO;
    for i in 0..n {
        let peers = batch.peers(i);
        let k = E::from_f64(1.0 / ((3 * peers.len() + 1) as f64 * d as f64));
        let mut bracket = sq_dist_rows(batch.row("ytil", i), batch.row("y", i));
        for &j in &peers {
            bracket += sq_dist_rows(batch.row("y", i), batch.row("y", j));
            bracket += sq_dist_rows(batch.row("ytil", i), batch.row("y", j));
            bracket += sq_dist_rows(batch.row("y", i), batch.row("ytil", j));
        }
        total += k * bracket;
    }
    Ok(total)
}

/// Exact derivative of [`rep_label_aware`] with respect to the binary
/// features, including the contributions where row i appears as the j-indexed
/// element of its peers' sums. The latent features receive no gradient.
pub fn rep_label_aware_backward<E: Element>(batch: &RepBatch<E>) -> Result<Tensor<E>> {
    let (n, d) = batch.validate("rep_label_aware")?;
    let mut grad = Tensor::zeros(&[n, d]);
    let two = E::from_f64(2.0);
    for i in 0..n {
        let peers = batch.peers(i);
        let k = E::from_f64(1.0 / ((3 * peers.len() + 1) as f64 * d as f64));
        let yi = batch.row("y", i);
        let yti = batch.row("ytil", i);
        let mut acc = vec![E::ZERO; d];
        for di in 0..d {
            acc[di] = yi[di] - yti[di];
        }
        for &j in &peers {
            let yj = batch.row("y", j);
            let ytj = batch.row("ytil", j);
            for di in 0..d {
                acc[di] += two * (yi[di] - yj[di]);
                acc[di] += two * (yi[di] - ytj[di]);
            }
        }
        let grow = &mut grad.data_mut()[i * d..(i + 1) * d];
        for di in 0..d {
            grow[di] = two * k * acc[di];
        }
    }
    Ok(grad)
}

/// Alternative gradient that counts each same-class pair once instead of
/// twice (the cross terms enter only through row i's own bracket). Shipped as
/// a diagnostic; training uses the exact derivative above.
pub fn rep_label_aware_backward_single_count<E: Element>(
    batch: &RepBatch<E>,
) -> Result<Tensor<E>> {
    let (n, d) = batch.validate("rep_label_aware")?;
    let mut grad = Tensor::zeros(&[n, d]);
    let two = E::from_f64(2.0);
    for i in 0..n {
        let peers = batch.peers(i);
        let k = E::from_f64(1.0 / ((3 * peers.len() + 1) as f64 * d as f64));
        let yi = batch.row("y", i);
        let scale = E::from_f64((2 * peers.len() + 1) as f64);
        let mut acc = vec![E::ZERO; d];
        for di in 0..d {
            acc[di] = scale * yi[di] - batch.row("ytil", i)[di];
        }
        for &j in &peers {
            let yj = batch.row("y", j);
            let ytj = batch.row("ytil", j);
            for di in 0..d {
                acc[di] -= yj[di] + ytj[di];
            }
        }
        let grow = &mut grad.data_mut()[i * d..(i + 1) * d];
        for di in 0..d {
            grow[di] = two * k * acc[di];
        }
    }
    Ok(grad)
}

/// Maximum absolute elementwise gap between the exact gradient and the
/// single-count variant, for reporting.
pub fn rep_gradient_formula_gap<E: Element>(batch: &RepBatch<E>) -> Result<f64> {
    let exact = rep_label_aware_backward(batch)?;
    let single = rep_label_aware_backward_single_count(batch)?;
    Ok(exact
        .data()
        .iter()
        .zip(single.data())
        .map(|(a, b)| (a.to_f64() - b.to_f64()).abs())
        .fold(0.0, f64::max))
}

/// Linear combination of cross-entropy and the representation loss.
pub fn combine<E: Element>(ce: E, rep: E, lambda: f64) -> Result<E> {
    if lambda < 0.0 {
        return Err(Error::invalid(
            "combine",
            format!("lambda must be non-negative, got {lambda}"),
        ));
    }
    Ok(ce + E::from_f64(lambda) * rep)
}

/// Feature reconstruction error: mean squared gap between the latent-path and
/// binary-path features of one layer.
pub fn fre<E: Element>(ytil_l: &Tensor<E>, y_l: &Tensor<E>) -> Result<E> {
    if ytil_l.shape() != y_l.shape() {
        return Err(Error::shape("fre", ytil_l.shape(), y_l.shape()));
    }
    let numel = E::from_f64(ytil_l.len() as f64);
    Ok(ytil_l.sq_dist(y_l)? / numel)
}

/// Gradient contribution of `mu * fre` on the binary-path features.
pub fn fre_backward<E: Element>(
    y_l: &Tensor<E>,
    ytil_l: &Tensor<E>,
    mu: f64,
) -> Result<Tensor<E>> {
    if ytil_l.shape() != y_l.shape() {
        return Err(Error::shape("fre_backward", ytil_l.shape(), y_l.shape()));
    }
    let scale = E::from_f64(2.0 * mu / y_l.len() as f64);
    Ok(y_l.sub(ytil_l)?.scale(scale))
}

/// Per-epoch loss summary.
#[derive(Debug, Clone)]
pub struct LossReport {
    pub ce: f64,
    pub rep: f64,
    pub fre_per_layer: Vec<f64>,
    pub total: f64,
}
