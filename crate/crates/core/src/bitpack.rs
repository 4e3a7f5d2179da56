//! Word-packed deployment engine: xnor + popcount convolutions over binary
//! weights and activations, with exact equivalence against the float path.
//!
//! The float training path computes its binary convolution as
//! conv(sign(x), sign(W)) * alpha, whose inner sums over +-1 operands are
//! exact integers in f32. The packed path computes the same integer with
//! n - 2*popcount(a XOR b) and applies the identical alpha multiply and the
//! identical BN/PReLU/skip arithmetic, so interior activations and logits
//! agree bit for bit.
//!
//! Bit order: bit 0 of word 0 is the first element in (C, kh, kw) row-major
//! order. Padding bits beyond the valid count are zero in both operands and
//! never influence results.

use std::path::Path;

use crate::binarize::{alpha_scale, sign_forward};
use crate::checkpoint::{push_spec, read_spec, Container, PACKED_MAGIC};
use crate::error::{Error, Result};
use crate::layers::{global_avgpool, maxpool2x2, BatchNorm, BatchNormStats, Linear, PRelu};
use crate::models::Model;
use crate::tensor::Tensor;

// ---------------------------------------------------------------------------
// bit vectors
// ---------------------------------------------------------------------------

/// One packed +-1 vector: `n` valid bits, zero padding above.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PackedBits {
    pub words: Vec<u64>,
    pub n: usize,
}

fn words_for(n: usize) -> usize {
    n.div_ceil(64)
}

/// Pack a +-1 tensor in storage order: bit k of word w covers element
/// 64w + k, set iff the element is +1.
pub fn pack(b: &Tensor<f32>) -> Result<PackedBits> {
    let n = b.len();
    let mut words = vec![0u64; words_for(n)];
    for (i, &v) in b.data().iter().enumerate() {
        if v == 1.0 {
            words[i / 64] |= 1u64 << (i % 64);
        } else if v != -1.0 {
            return Err(Error::invalid(
                "pack",
                format!("element {i} is {v}, expected exactly -1 or +1"),
            ));
        }
    }
    Ok(PackedBits { words, n })
}

/// Inverse of [`pack`].
pub fn unpack(p: &PackedBits) -> Vec<f32> {
    (0..p.n)
        .map(|i| {
            if p.words[i / 64] >> (i % 64) & 1 == 1 {
                1.0
            } else {
                -1.0
            }
        })
        .collect()
}

/// Dot product of two packed +-1 vectors: n - 2*popcount(a XOR b), masked to
/// the low n bits.
pub fn xnor_popcount_dot(a: &[u64], b: &[u64], n: usize) -> Result<i64> {
    let want = words_for(n);
    if a.len() != b.len() || a.len() != want {
        return Err(Error::invalid(
            "xnor_popcount_dot",
            format!(
                "bit count {n} needs {want} words, got {} and {}",
                a.len(),
                b.len()
            ),
        ));
    }
    let mut disagree = 0u32;
    for i in 0..want {
        let mut x = a[i] ^ b[i];
        if i == want - 1 && n % 64 != 0 {
            x &= (1u64 << (n % 64)) - 1;
        }
        disagree += x.count_ones();
    }
    Ok(n as i64 - 2 * disagree as i64)
}

// ---------------------------------------------------------------------------
// BN-to-sign folding
// ---------------------------------------------------------------------------

/// Fold one BN channel into a sign threshold:
/// sign(gamma*(x-mean)/sqrt(var+eps) + beta) = flip * sign(x - tau)
/// with tau = mean - beta*sqrt(var+eps)/gamma and flip = sign(gamma).
/// Refused for gamma = 0 (the layer falls back to explicit BN).
pub fn fold_bn_sign(gamma: f64, beta: f64, mean: f64, var: f64, eps: f64) -> Result<(f64, i8)> {
    if gamma == 0.0 {
        return Err(Error::invalid(
            "fold_bn_sign",
            "gamma is zero; fold refused, use explicit batchnorm",
        ));
    }
    let tau = mean - beta * (var + eps).sqrt() / gamma;
    let flip = if gamma > 0.0 { 1 } else { -1 };
    Ok((tau, flip))
}

/// Evaluate the folded comparison in the integer domain after alpha scaling:
/// the sign of BN(alpha * dot) with the sign(0) = +1 convention.
pub fn folded_sign(dot: i64, alpha: f32, tau: f64, flip: i8) -> f32 {
    let x = alpha as f64 * dot as f64;
    let s = if x - tau >= 0.0 { 1.0 } else { -1.0 };
    flip as f32 * s
}

// ---------------------------------------------------------------------------
// packed layers
// ---------------------------------------------------------------------------

/// Packed binary kernel of one conv layer: one bit row per output channel.
#[derive(Debug, Clone)]
pub struct PackedConv {
    pub out_channels: usize,
    pub in_channels: usize,
    pub kh: usize,
    pub kw: usize,
    /// Bits per patch = in_channels * kh * kw.
    pub n_bits: usize,
    pub words_per_row: usize,
    /// [out_channels * words_per_row]
    pub weight_words: Vec<u64>,
    pub alpha: Vec<f32>,
    pub stride: usize,
    pub pad: usize,
}

/// Sign-packed activations of one padded input batch, one bit row per
/// (sample, channel, row). Padding was injected before the sign, so border
/// bits carry sign(0) = +1.
#[derive(Debug, Clone)]
pub struct PackedActs {
    pub n: usize,
    pub c: usize,
    pub hp: usize,
    pub wp: usize,
    pub words_per_line: usize,
    pub lines: Vec<u64>,
}

/// Binarize and pack a real feature map, injecting zero padding first.
pub fn pack_activations(x: &Tensor<f32>, pad: usize) -> Result<PackedActs> {
    if x.rank() != 4 {
        return Err(Error::invalid(
            "pack_activations",
            format!("expected NCHW input, got {:?}", x.shape()),
        ));
    }
    let (n, c, h, w) = (x.dim(0), x.dim(1), x.dim(2), x.dim(3));
    let (hp, wp) = (h + 2 * pad, w + 2 * pad);
    let wpl = words_for(wp);
    let mut lines = vec![0u64; n * c * hp * wpl];
    for ni in 0..n {
        for ci in 0..c {
            for y in 0..hp {
                let line = (ni * c + ci) * hp + y;
                let dst = &mut lines[line * wpl..(line + 1) * wpl];
                for xcol in 0..wp {
                    // padding region maps to sign(0) = +1
                    let inside = y >= pad && y < pad + h && xcol >= pad && xcol < pad + w;
                    let positive = if inside {
                        x.data()[((ni * c + ci) * h + (y - pad)) * w + (xcol - pad)] >= 0.0
                    } else {
                        true
                    };
                    if positive {
                        dst[xcol / 64] |= 1u64 << (xcol % 64);
                    }
                }
            }
        }
    }
    Ok(PackedActs {
        n,
        c,
        hp,
        wp,
        words_per_line: wpl,
        lines,
    })
}

/// Expand packed activations back into a +-1 tensor over the padded
/// geometry.
pub fn unpack_activations(acts: &PackedActs) -> Tensor<f32> {
    let mut out = Tensor::zeros(&[acts.n, acts.c, acts.hp, acts.wp]);
    for ni in 0..acts.n {
        for ci in 0..acts.c {
            for y in 0..acts.hp {
                let line = (ni * acts.c + ci) * acts.hp + y;
                let row = &acts.lines[line * acts.words_per_line..(line + 1) * acts.words_per_line];
                let base = ((ni * acts.c + ci) * acts.hp + y) * acts.wp;
                for x in 0..acts.wp {
                    out.data_mut()[base + x] = if row[x / 64] >> (x % 64) & 1 == 1 {
                        1.0
                    } else {
                        -1.0
                    };
                }
            }
        }
    }
    out
}

fn extract_bits(words: &[u64], start: usize, len: usize) -> u64 {
    let w0 = start / 64;
    let off = start % 64;
    let mut v = words[w0] >> off;
    if off + len > 64 && w0 + 1 < words.len() {
        v |= words[w0 + 1] << (64 - off);
    }
    if len < 64 {
        v &= (1u64 << len) - 1;
    }
    v
}

struct BitWriter<'a> {
    words: &'a mut [u64],
    used: usize,
}

impl<'a> BitWriter<'a> {
    fn new(words: &'a mut [u64]) -> Self {
        words.fill(0);
        BitWriter { words, used: 0 }
    }

    fn push(&mut self, chunk: u64, len: usize) {
        let w = self.used / 64;
        let off = self.used % 64;
        self.words[w] |= chunk << off;
        if off + len > 64 {
            self.words[w + 1] |= chunk >> (64 - off);
        }
        self.used += len;
    }
}

/// Xnor/popcount convolution over packed operands: integer dot products per
/// receptive field scaled by the per-channel alpha.
pub fn packed_conv2d(conv: &PackedConv, acts: &PackedActs) -> Result<Tensor<f32>> {
    if acts.c != conv.in_channels || acts.hp < conv.kh || acts.wp < conv.kw {
        return Err(Error::invalid(
            "packed_conv2d",
            format!(
                "activation layout {}x{}x{} does not fit kernel {}x{}x{}",
                acts.c, acts.hp, acts.wp, conv.in_channels, conv.kh, conv.kw
            ),
        ));
    }
    let oh = (acts.hp - conv.kh) / conv.stride + 1;
    let ow = (acts.wp - conv.kw) / conv.stride + 1;
    let mut out = Tensor::zeros(&[acts.n, conv.out_channels, oh, ow]);
    let mut patch = vec![0u64; conv.words_per_row];
    for ni in 0..acts.n {
        for oy in 0..oh {
            for ox in 0..ow {
                let mut writer = BitWriter::new(&mut patch);
                for ci in 0..conv.in_channels {
                    for ky in 0..conv.kh {
                        let line = (ni * acts.c + ci) * acts.hp + oy * conv.stride + ky;
                        let row = &acts.lines
                            [line * acts.words_per_line..(line + 1) * acts.words_per_line];
                        writer.push(extract_bits(row, ox * conv.stride, conv.kw), conv.kw);
                    }
                }
                for k in 0..conv.out_channels {
                    let wrow = &conv.weight_words
                        [k * conv.words_per_row..(k + 1) * conv.words_per_row];
                    let dot = xnor_popcount_dot(wrow, &patch, conv.n_bits)?;
                    // identical arithmetic to the float path: exact integer
                    // sum cast to f32, then one multiply by alpha
                    out.data_mut()[((ni * conv.out_channels + k) * oh + oy) * ow + ox] =
                        dot as f32 * conv.alpha[k];
                }
            }
        }
    }
    Ok(out)
}

/// One deployed dual block: packed kernel plus the binary branch's BN,
/// activation, skip flag, and the per-channel folded sign thresholds
/// (None where gamma = 0 refused the fold).
#[derive(Debug, Clone)]
pub struct PackedBlock {
    pub conv: PackedConv,
    pub bn: BatchNorm<f32>,
    pub prelu: PRelu<f32>,
    pub skip: bool,
    pub fold: Vec<Option<(f64, i8)>>,
}

/// Inference-only model: word-packed binary kernels, per-channel alpha and
/// folded thresholds, the binary-branch BN statistics, and the real-valued
/// stem and classifier. Latent weights do not exist here.
#[derive(Debug, Clone)]
pub struct PackedModel {
    pub input_shape: (usize, usize, usize),
    pub num_classes: usize,
    pub stem_w: Tensor<f32>,
    pub stem_bn: BatchNorm<f32>,
    pub stem_prelu: PRelu<f32>,
    pub stem_pool: bool,
    pub stages: Vec<(bool, Vec<PackedBlock>)>,
    pub classifier: Linear<f32>,
}

fn pack_kernel(w: &Tensor<f32>, stride: usize, pad: usize) -> Result<PackedConv> {
    let b = sign_forward(w);
    let alpha = alpha_scale(w)?;
    let (k, c, kh, kw) = (w.dim(0), w.dim(1), w.dim(2), w.dim(3));
    let n_bits = c * kh * kw;
    let wpr = words_for(n_bits);
    let mut weight_words = vec![0u64; k * wpr];
    for ki in 0..k {
        let row = pack(&Tensor::from_vec(
            &[n_bits],
            b.data()[ki * n_bits..(ki + 1) * n_bits].to_vec(),
        )?)?;
        weight_words[ki * wpr..(ki + 1) * wpr].copy_from_slice(&row.words);
    }
    Ok(PackedConv {
        out_channels: k,
        in_channels: c,
        kh,
        kw,
        n_bits,
        words_per_row: wpr,
        weight_words,
        alpha: alpha.data().to_vec(),
        stride,
        pad,
    })
}

/// Export the deployment path of a trained model. Consumes only the derived
/// binary kernels, alphas, binary-branch statistics, affine parameters and
/// the real layers; the latent weights are left behind.
pub fn export(model: &Model<f32>) -> Result<PackedModel> {
    if model.stem_bn.stats.count == 0 {
        return Err(Error::invalid(
            "export",
            "model has never-initialized running statistics; train it first",
        ));
    }
    let mut stages = Vec::new();
    for stage in &model.stages {
        let mut blocks = Vec::new();
        for block in &stage.blocks {
            if block.bn.stats_b.count == 0 {
                return Err(Error::invalid(
                    "export",
                    "binary-branch statistics never initialized; train the model first",
                ));
            }
            let conv = pack_kernel(&block.w, block.stride, block.pad)?;
            let c = block.out_channels();
            let mut fold = Vec::with_capacity(c);
            for ci in 0..c {
                fold.push(
                    fold_bn_sign(
                        block.bn.gamma.data()[ci] as f64,
                        block.bn.beta.data()[ci] as f64,
                        block.bn.stats_b.mean.data()[ci] as f64,
                        block.bn.stats_b.var.data()[ci] as f64,
                        block.bn.eps,
                    )
                    .ok(),
                );
            }
            blocks.push(PackedBlock {
                conv,
                bn: BatchNorm {
                    gamma: block.bn.gamma.clone(),
                    beta: block.bn.beta.clone(),
                    stats: block.bn.stats_b.clone(),
                    momentum: block.bn.momentum,
                    eps: block.bn.eps,
                },
                prelu: PRelu {
                    slope: block.prelu.slope.clone(),
                },
                skip: block.skip,
                fold,
            });
        }
        stages.push((stage.pool_before, blocks));
    }
    Ok(PackedModel {
        input_shape: model.spec.input_shape,
        num_classes: model.spec.num_classes,
        stem_w: model.stem_w.clone(),
        stem_bn: model.stem_bn.clone(),
        stem_prelu: model.stem_prelu.clone(),
        stem_pool: model.stem_pool,
        stages,
        classifier: Linear {
            w: model.classifier.w.clone(),
            b: model.classifier.b.clone(),
        },
    })
}

impl PackedModel {
    /// Deployment inference; bit-identical to the float binary path.
    pub fn infer(&self, images: &Tensor<f32>) -> Result<Tensor<f32>> {
        Ok(self.infer_traced(images, false)?.0)
    }

    /// Inference that optionally unpacks every block's binarized input map
    /// (the interior binary activations) for equivalence checks.
    pub fn infer_traced(
        &self,
        images: &Tensor<f32>,
        trace: bool,
    ) -> Result<(Tensor<f32>, Vec<Tensor<f32>>)> {
        let (c, h, w) = self.input_shape;
        if images.rank() != 4
            || images.dim(1) != c
            || images.dim(2) != h
            || images.dim(3) != w
        {
            return Err(Error::shape("infer", images.shape(), &[0, c, h, w]));
        }
        let stem_conv = crate::conv::conv2d(images, &self.stem_w, 1, 1)?;
        let stem_bn_out = self.stem_bn.forward_eval(&stem_conv)?;
        let stem_act = self.stem_prelu.forward(&stem_bn_out)?;
        let mut y = if self.stem_pool {
            maxpool2x2(&stem_act)?.0
        } else {
            stem_act
        };
        let mut traces = Vec::new();
        for (pool_before, blocks) in &self.stages {
            if *pool_before {
                y = maxpool2x2(&y)?.0;
            }
            for block in blocks {
                let acts = pack_activations(&y, block.conv.pad)?;
                if trace {
                    traces.push(unpack_activations(&acts));
                }
                let pre_bn = packed_conv2d(&block.conv, &acts)?;
                let bn_out = block.bn.forward_eval(&pre_bn)?;
                let mut act = block.prelu.forward(&bn_out)?;
                if block.skip {
                    if y.dim(1) == block.conv.out_channels {
                        act.add_assign(&y)?;
                    } else {
                        act.add_assign(&crate::block::repeat_channels(
                            &y,
                            block.conv.out_channels,
                        )?)?;
                    }
                }
                y = act;
            }
        }
        let penult = global_avgpool(&y)?;
        Ok((self.classifier.forward(&penult)?, traces))
    }

    pub fn to_container(&self) -> Container {
        let mut c = Container::new(PACKED_MAGIC);
        let (ic, ih, iw) = self.input_shape;
        c.push_u64("spec.input_shape", &[ic as u64, ih as u64, iw as u64]);
        c.push_u64("spec.num_classes", &[self.num_classes as u64]);
        c.push_u64("spec.stem_pool", &[self.stem_pool as u64]);
        c.push_u64(
            "spec.stage_sizes",
            &self
                .stages
                .iter()
                .map(|(_, b)| b.len() as u64)
                .collect::<Vec<_>>(),
        );
        c.push_u64(
            "spec.stage_pools",
            &self
                .stages
                .iter()
                .map(|(p, _)| *p as u64)
                .collect::<Vec<_>>(),
        );
        c.push_tensor("stem.w", &self.stem_w);
        c.push_tensor("stem.bn.gamma", &self.stem_bn.gamma);
        c.push_tensor("stem.bn.beta", &self.stem_bn.beta);
        c.push_tensor("stem.bn.mean", &self.stem_bn.stats.mean);
        c.push_tensor("stem.bn.var", &self.stem_bn.stats.var);
        c.push_u64("stem.bn.count", &[self.stem_bn.stats.count]);
        c.push_tensor("stem.prelu", &self.stem_prelu.slope);
        let mut i = 0;
        for (_, blocks) in &self.stages {
            for b in blocks {
                let p = format!("block{i:02}");
                c.records.push(crate::checkpoint::Record {
                    name: format!("{p}.packed"),
                    dims: vec![b.conv.out_channels, b.conv.words_per_row],
                    data: crate::checkpoint::RecordData::U64(b.conv.weight_words.clone()),
                });
                c.push_u64(
                    &format!("{p}.conv_dims"),
                    &[
                        b.conv.out_channels as u64,
                        b.conv.in_channels as u64,
                        b.conv.kh as u64,
                        b.conv.kw as u64,
                        b.conv.n_bits as u64,
                        b.conv.stride as u64,
                        b.conv.pad as u64,
                    ],
                );
                c.records.push(crate::checkpoint::Record {
                    name: format!("{p}.alpha"),
                    dims: vec![b.conv.alpha.len()],
                    data: crate::checkpoint::RecordData::F32(b.conv.alpha.clone()),
                });
                c.push_tensor(&format!("{p}.bn.gamma"), &b.bn.gamma);
                c.push_tensor(&format!("{p}.bn.beta"), &b.bn.beta);
                c.push_tensor(&format!("{p}.bn.mean"), &b.bn.stats.mean);
                c.push_tensor(&format!("{p}.bn.var"), &b.bn.stats.var);
                c.push_u64(&format!("{p}.bn.count"), &[b.bn.stats.count]);
                c.push_tensor(&format!("{p}.prelu"), &b.prelu.slope);
                c.push_u64(&format!("{p}.skip"), &[b.skip as u64]);
                c.push_f64(
                    &format!("{p}.fold.tau"),
                    &b.fold
                        .iter()
                        .map(|f| f.map_or(f64::NAN, |(t, _)| t))
                        .collect::<Vec<_>>(),
                );
                c.push_u64(
                    &format!("{p}.fold.flip"),
                    &b.fold
                        .iter()
                        .map(|f| match f {
                            Some((_, 1)) => 1u64,
                            Some((_, _)) => 2,
                            None => 0,
                        })
                        .collect::<Vec<_>>(),
                );
                i += 1;
            }
        }
        c.push_tensor("classifier.w", &self.classifier.w);
        c.push_tensor("classifier.b", &self.classifier.b);
        c
    }

    pub fn from_container(c: &Container) -> Result<Self> {
        let shape = c.u64_vec("spec.input_shape")?;
        if shape.len() != 3 {
            return Err(Error::format("container", "spec.input_shape must have 3 dims"));
        }
        let stage_sizes = c.u64_vec("spec.stage_sizes")?;
        let stage_pools = c.u64_vec("spec.stage_pools")?;
        if stage_sizes.len() != stage_pools.len() {
            return Err(Error::format("container", "stage metadata length mismatch"));
        }
        let mut stages = Vec::new();
        let mut i = 0;
        for (si, &count) in stage_sizes.iter().enumerate() {
            let mut blocks = Vec::new();
            for _ in 0..count {
                let p = format!("block{i:02}");
                let dims = c.u64_vec(&format!("{p}.conv_dims"))?;
                if dims.len() != 7 {
                    return Err(Error::format("container", format!("{p}: bad conv dims")));
                }
                let rec = c.get(&format!("{p}.packed"))?;
                let crate::checkpoint::RecordData::U64(ref words) = rec.data else {
                    return Err(Error::format("container", format!("{p}.packed is not u64")));
                };
                let alpha_rec = c.get(&format!("{p}.alpha"))?;
                let crate::checkpoint::RecordData::F32(ref alpha) = alpha_rec.data else {
                    return Err(Error::format("container", format!("{p}.alpha is not f32")));
                };
                let conv = PackedConv {
                    out_channels: dims[0] as usize,
                    in_channels: dims[1] as usize,
                    kh: dims[2] as usize,
                    kw: dims[3] as usize,
                    n_bits: dims[4] as usize,
                    words_per_row: words_for(dims[4] as usize),
                    weight_words: words.clone(),
                    alpha: alpha.clone(),
                    stride: dims[5] as usize,
                    pad: dims[6] as usize,
                };
                let taus = {
                    let r = c.get(&format!("{p}.fold.tau"))?;
                    let crate::checkpoint::RecordData::F64(ref v) = r.data else {
                        return Err(Error::format("container", "fold.tau is not f64"));
                    };
                    v.clone()
                };
                let flips = c.u64_vec(&format!("{p}.fold.flip"))?;
                let fold = taus
                    .iter()
                    .zip(&flips)
                    .map(|(&t, &f)| match f {
                        1 => Some((t, 1i8)),
                        2 => Some((t, -1i8)),
                        _ => None,
                    })
                    .collect();
                blocks.push(PackedBlock {
                    conv,
                    bn: BatchNorm {
                        gamma: c.tensor(&format!("{p}.bn.gamma"))?,
                        beta: c.tensor(&format!("{p}.bn.beta"))?,
                        stats: BatchNormStats {
                            mean: c.tensor(&format!("{p}.bn.mean"))?,
                            var: c.tensor(&format!("{p}.bn.var"))?,
                            count: c.u64_scalar(&format!("{p}.bn.count"))?,
                        },
                        momentum: 0.1,
                        eps: 1e-5,
                    },
                    prelu: PRelu {
                        slope: c.tensor(&format!("{p}.prelu"))?,
                    },
                    skip: c.u64_scalar(&format!("{p}.skip"))? != 0,
                    fold,
                });
                i += 1;
            }
            stages.push((stage_pools[si] != 0, blocks));
        }
        Ok(PackedModel {
            input_shape: (shape[0] as usize, shape[1] as usize, shape[2] as usize),
            num_classes: c.u64_scalar("spec.num_classes")? as usize,
            stem_w: c.tensor("stem.w")?,
            stem_bn: BatchNorm {
                gamma: c.tensor("stem.bn.gamma")?,
                beta: c.tensor("stem.bn.beta")?,
                stats: BatchNormStats {
                    mean: c.tensor("stem.bn.mean")?,
                    var: c.tensor("stem.bn.var")?,
                    count: c.u64_scalar("stem.bn.count")?,
                },
                momentum: 0.1,
                eps: 1e-5,
            },
            stem_prelu: PRelu {
                slope: c.tensor("stem.prelu")?,
            },
            stem_pool: c.u64_scalar("spec.stem_pool")? != 0,
            stages,
            classifier: Linear {
                w: c.tensor("classifier.w")?,
                b: c.tensor("classifier.b")?,
            },
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        self.to_container().write(path)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_container(&Container::read(path, PACKED_MAGIC)?)
    }

    /// Words of packed weights across all layers, for throughput reporting.
    pub fn total_weight_words(&self) -> usize {
        self.stages
            .iter()
            .flat_map(|(_, b)| b.iter())
            .map(|b| b.conv.weight_words.len())
            .sum()
    }
}

/// Spec description read back from a checkpoint container written alongside
/// (packed containers carry only their own geometry).
pub fn spec_roundtrip_check(c: &Container) -> Result<()> {
    let mut probe = Container::new(PACKED_MAGIC);
    push_spec(&mut probe, &read_spec(c)?);
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::conv::conv2d;
    use crate::tensor::pad_nchw;
    use crate::rng::{seeded_normal, Rng};

    #[test]
    fn pack_all_ones_and_alternating() {
        let ones = Tensor::<f32>::filled(&[64], 1.0);
        let p = pack(&ones).unwrap();
        assert_eq!(p.words, vec![u64::MAX]);
        assert_eq!(p.n, 64);

        // starting at +1: bits 0,2,4,... set
        let alt: Vec<f32> = (0..64).map(|i| if i % 2 == 0 { 1.0 } else { -1.0 }).collect();
        let p = pack(&Tensor::from_vec(&[64], alt).unwrap()).unwrap();
        assert_eq!(p.words, vec![0x5555_5555_5555_5555]);
    }

    #[test]
    fn pack_rejects_non_pm_one() {
        let t = Tensor::<f32>::from_vec(&[3], vec![1.0, 0.5, -1.0]).unwrap();
        assert!(pack(&t).is_err());
    }

    #[test]
    fn pack_unpack_roundtrip() {
        let mut rng = Rng::new(81);
        for len in [1usize, 7, 63, 64, 65, 190] {
            let raw: Tensor<f32> = seeded_normal(&mut rng, &[len], 1.0).unwrap();
            let b = sign_forward(&raw);
            let p = pack(&b).unwrap();
            assert_eq!(unpack(&p), b.data());
            // padding bits beyond n are zero
            if len % 64 != 0 {
                let last = *p.words.last().unwrap();
                assert_eq!(last >> (len % 64), 0);
            }
        }
    }

    #[test]
    fn xnor_dot_examples() {
        let ones = vec![u64::MAX];
        assert_eq!(xnor_popcount_dot(&ones, &ones, 64).unwrap(), 64);
        let zeros = vec![0u64];
        assert_eq!(xnor_popcount_dot(&ones, &zeros, 64).unwrap(), -64);
        assert!(xnor_popcount_dot(&ones, &[0, 0], 64).is_err());
    }

    #[test]
    fn xnor_dot_matches_float_dot() {
        let mut rng = Rng::new(82);
        for _ in 0..1000 {
            let n = 1 + rng.below(192);
            let a_raw: Tensor<f32> = seeded_normal(&mut rng, &[n], 1.0).unwrap();
            let b_raw: Tensor<f32> = seeded_normal(&mut rng, &[n], 1.0).unwrap();
            let a = sign_forward(&a_raw);
            let b = sign_forward(&b_raw);
            let pa = pack(&a).unwrap();
            let pb = pack(&b).unwrap();
            let got = xnor_popcount_dot(&pa.words, &pb.words, n).unwrap();
            let want: f32 = a.data().iter().zip(b.data()).map(|(x, y)| x * y).sum();
            assert_eq!(got, want as i64);
        }
    }

    #[test]
    fn fold_identity_bn_is_pure_sign() {
        let eps = 1e-5;
        let (tau, flip) = fold_bn_sign(1.0, 0.0, 0.0, 1.0 - eps, eps).unwrap();
        assert!(tau.abs() < 1e-12);
        assert_eq!(flip, 1);

        let (_, flip) = fold_bn_sign(-1.0, 0.0, 0.0, 1.0, eps).unwrap();
        assert_eq!(flip, -1);

        assert!(fold_bn_sign(0.0, 0.1, 0.2, 1.0, eps).is_err());
    }

    #[test]
    fn fold_matches_direct_bn_sign() {
        let mut rng = Rng::new(83);
        let mut checked = 0;
        for _ in 0..10_000 {
            let gamma = rng.normal();
            if gamma == 0.0 {
                continue;
            }
            let beta = rng.normal();
            let mean = rng.normal();
            let var = rng.normal().abs() + 0.01;
            let eps = 1e-5;
            let x = rng.normal() * 2.0;
            let bn = gamma * (x - mean) / (var + eps).sqrt() + beta;
            if bn.abs() < 1e-7 {
                continue; // documented tie tolerance
            }
            let (tau, flip) = fold_bn_sign(gamma, beta, mean, var, eps).unwrap();
            let direct = if bn >= 0.0 { 1.0 } else { -1.0 };
            let folded = flip as f64 * if x - tau >= 0.0 { 1.0 } else { -1.0 };
            assert_eq!(direct, folded, "gamma {gamma} beta {beta} x {x}");
            checked += 1;
        }
        assert!(checked > 9000);
    }

    #[test]
    fn folded_sign_integer_domain() {
        // alpha-scaled integer dot against explicit BN evaluation
        let mut rng = Rng::new(84);
        for _ in 0..1000 {
            let gamma = rng.normal() + 2.0;
            let beta = rng.normal();
            let mean = rng.normal();
            let var = rng.normal().abs() + 0.1;
            let eps = 1e-5;
            let alpha = (rng.normal().abs() + 0.1) as f32;
            let dot = rng.below(129) as i64 - 64;
            let x = alpha as f64 * dot as f64;
            let bn = gamma * (x - mean) / (var + eps).sqrt() + beta;
            if bn.abs() < 1e-7 {
                continue;
            }
            let (tau, flip) = fold_bn_sign(gamma, beta, mean, var, eps).unwrap();
            let want = if bn >= 0.0 { 1.0 } else { -1.0 };
            assert_eq!(folded_sign(dot, alpha, tau, flip), want as f32);
        }
    }

    #[test]
    fn packed_conv_1x1_reduces_to_dot_per_pixel() {
        let mut rng = Rng::new(85);
        let w_raw: Tensor<f32> = seeded_normal(&mut rng, &[2, 3, 1, 1], 1.0).unwrap();
        let conv = pack_kernel(&w_raw, 1, 0).unwrap();
        let x: Tensor<f32> = seeded_normal(&mut rng, &[1, 3, 4, 4], 1.0).unwrap();
        let acts = pack_activations(&x, 0).unwrap();
        let out = packed_conv2d(&conv, &acts).unwrap();

        let s = sign_forward(&x);
        let b = sign_forward(&w_raw);
        for k in 0..2 {
            for p in 0..16 {
                let mut dot = 0.0f32;
                for c in 0..3 {
                    dot += s.data()[c * 16 + p] * b.data()[k * 3 + c];
                }
                assert_eq!(out.data()[k * 16 + p], dot * conv.alpha[k]);
            }
        }
    }

    #[test]
    fn packed_conv_matches_float_binary_path_exactly() {
        let mut rng = Rng::new(86);
        let w_raw: Tensor<f32> = seeded_normal(&mut rng, &[4, 3, 3, 3], 0.7).unwrap();
        let x: Tensor<f32> = seeded_normal(&mut rng, &[2, 3, 8, 8], 1.0).unwrap();
        for pad in [0usize, 1, 2] {
            let conv = pack_kernel(&w_raw, 1, pad).unwrap();
            let acts = pack_activations(&x, pad).unwrap();
            let packed_out = packed_conv2d(&conv, &acts).unwrap();

            // float path: pad before sign so the border is sign(0) = +1
            let padded = pad_nchw(&x, pad);
            let s = sign_forward(&padded);
            let b = sign_forward(&w_raw);
            let alpha = alpha_scale(&w_raw).unwrap();
            let mut float_out = conv2d(&s, &b, 1, 0).unwrap();
            let (n, k) = (float_out.dim(0), float_out.dim(1));
            let plane = float_out.dim(2) * float_out.dim(3);
            for ni in 0..n {
                for ki in 0..k {
                    let a = alpha.data()[ki];
                    let base = (ni * k + ki) * plane;
                    for v in &mut float_out.data_mut()[base..base + plane] {
                        *v *= a;
                    }
                }
            }
            assert_eq!(packed_out, float_out, "pad {pad}");
        }
    }
}
