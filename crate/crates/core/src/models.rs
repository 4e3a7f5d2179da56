//! Dual-path network assembly.
//!
//! Both architectures share one layout: a real-valued conv stem, a sequence
//! of dual binary blocks with stride-2 max pooling at stage boundaries, a
//! global average pool, and a shared real-valued classifier plus projection
//! head. The binary and latent branches fork after the stem and merge at the
//! classifier. Only the binary branch produces gradients.

use std::collections::BTreeMap;

use crate::binarize::alpha_scale;
use crate::block::{ConvBlock, EvalPath, StatAcc};
use crate::conv::{conv2d, conv2d_backward};
use crate::error::{Error, Result};
use crate::layers::{
    global_avgpool, global_avgpool_backward, maxpool2x2, maxpool2x2_backward, BatchNorm, BnCache,
    DualBatchNorm, Linear, PRelu, ProjectionCache, ProjectionHead,
};
use crate::losses::fre_backward;
use crate::rng::{seeded_normal, Rng};
use crate::tensor::{Element, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Arch {
    TinyCnn,
    CompactResnet,
}

impl Arch {
    pub fn name(self) -> &'static str {
        match self {
            Arch::TinyCnn => "tiny_cnn",
            Arch::CompactResnet => "compact_resnet",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "tiny_cnn" => Ok(Arch::TinyCnn),
            "compact_resnet" => Ok(Arch::CompactResnet),
            other => Err(Error::Config {
                msg: format!("unknown arch '{other}' (expected tiny_cnn or compact_resnet)"),
            }),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ModelSpec {
    pub arch: Arch,
    pub stage_widths: Vec<usize>,
    /// Basic blocks (pairs of conv layers) per stage; compact_resnet only.
    pub blocks_per_stage: usize,
    pub num_classes: usize,
    pub projection_dim: usize,
    /// (C, H, W)
    pub input_shape: (usize, usize, usize),
}

impl ModelSpec {
    /// Six dual conv layers in three stages, pooled early for fast runs.
    pub fn tiny_cnn(num_classes: usize) -> Self {
        ModelSpec {
            arch: Arch::TinyCnn,
            stage_widths: vec![16, 32, 64],
            blocks_per_stage: 1,
            num_classes,
            projection_dim: 32,
            input_shape: (3, 32, 32),
        }
    }

    /// Sixteen dual conv layers: four stages of two basic blocks.
    pub fn compact_resnet(num_classes: usize) -> Self {
        ModelSpec {
            arch: Arch::CompactResnet,
            stage_widths: vec![16, 16, 32, 64],
            blocks_per_stage: 2,
            num_classes,
            projection_dim: 32,
            input_shape: (3, 32, 32),
        }
    }

    /// Dual conv layers per stage.
    fn convs_per_stage(&self) -> usize {
        match self.arch {
            Arch::TinyCnn => 2,
            Arch::CompactResnet => 2 * self.blocks_per_stage,
        }
    }

    /// Does the stem feed a pooling layer before the first stage?
    fn stem_pool(&self) -> bool {
        matches!(self.arch, Arch::TinyCnn)
    }

    pub fn num_dual_blocks(&self) -> usize {
        self.stage_widths.len() * self.convs_per_stage()
    }

    pub fn validate(&self) -> Result<()> {
        if self.stage_widths.is_empty() || self.stage_widths.iter().any(|&w| w == 0) {
            return Err(Error::Config {
                msg: format!("invalid stage widths {:?}", self.stage_widths),
            });
        }
        let mut prev = self.stage_widths[0];
        for &w in &self.stage_widths[1..] {
            if w % prev != 0 {
                return Err(Error::Config {
                    msg: format!(
                        "stage width {w} is not a multiple of {prev}; the widening skip needs it"
                    ),
                });
            }
            prev = w;
        }
        if self.arch == Arch::CompactResnet && self.blocks_per_stage == 0 {
            return Err(Error::Config {
                msg: "blocks_per_stage must be >= 1".into(),
            });
        }
        if self.num_classes < 2 {
            return Err(Error::Config {
                msg: format!("num_classes must be >= 2, got {}", self.num_classes),
            });
        }
        if self.projection_dim == 0 {
            return Err(Error::Config {
                msg: "projection_dim must be >= 1".into(),
            });
        }
        let (c, h, w) = self.input_shape;
        let pools = self.stem_pool() as usize + self.stage_widths.len() - 1;
        if c == 0 || (h >> pools) == 0 || (w >> pools) == 0 {
            return Err(Error::Config {
                msg: format!(
                    "input shape {:?} collapses under {pools} pooling layers",
                    self.input_shape
                ),
            });
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
pub struct Stage<E = f32> {
    pub pool_before: bool,
    pub blocks: Vec<ConvBlock<E>>,
}

#[derive(Debug, Clone)]
pub struct Model<E = f32> {
    pub spec: ModelSpec,
    /// Real-valued stem kernel [w0, Cin, 3, 3].
    pub stem_w: Tensor<E>,
    pub stem_bn: BatchNorm<E>,
    pub stem_prelu: PRelu<E>,
    pub stem_pool: bool,
    pub stages: Vec<Stage<E>>,
    pub classifier: Linear<E>,
    pub projection: ProjectionHead<E>,
}

/// Kaiming-style normal init: std = sqrt(2 / fan_in).
fn kaiming<E: Element>(rng: &mut Rng, shape: &[usize], fan_in: usize) -> Result<Tensor<E>> {
    seeded_normal(rng, shape, (2.0 / fan_in as f64).sqrt())
}

/// Assemble a model with seeded initialization.
pub fn build<E: Element>(spec: &ModelSpec, rng: &mut Rng) -> Result<Model<E>> {
    spec.validate()?;
    let (cin, _, _) = spec.input_shape;
    let w0 = spec.stage_widths[0];
    let stem_w = kaiming(rng, &[w0, cin, 3, 3], cin * 9)?;
    let mut stages = Vec::new();
    let mut prev_width = w0;
    for (si, &width) in spec.stage_widths.iter().enumerate() {
        let mut blocks = Vec::new();
        for bi in 0..spec.convs_per_stage() {
            let c_in = if bi == 0 { prev_width } else { width };
            blocks.push(ConvBlock {
                w: kaiming(rng, &[width, c_in, 3, 3], c_in * 9)?,
                bn: DualBatchNorm::new(width),
                prelu: PRelu::new(width),
                stride: 1,
                pad: 1,
                skip: true,
            });
        }
        stages.push(Stage {
            pool_before: si > 0,
            blocks,
        });
        prev_width = width;
    }
    let feat = *spec.stage_widths.last().unwrap();
    let classifier = Linear {
        w: kaiming(rng, &[spec.num_classes, feat], feat)?,
        b: Tensor::zeros(&[spec.num_classes]),
    };
    let projection = ProjectionHead {
        w: kaiming(rng, &[spec.projection_dim, feat], feat)?,
    };
    Ok(Model {
        spec: spec.clone(),
        stem_w,
        stem_bn: BatchNorm::new(w0),
        stem_prelu: PRelu::new(w0),
        stem_pool: spec.stem_pool(),
        stages,
        classifier,
        projection,
    })
}

impl<E: Element> Model<E> {
    pub fn blocks(&self) -> impl Iterator<Item = &ConvBlock<E>> {
        self.stages.iter().flat_map(|s| s.blocks.iter())
    }

    pub fn blocks_mut(&mut self) -> impl Iterator<Item = &mut ConvBlock<E>> {
        self.stages.iter_mut().flat_map(|s| s.blocks.iter_mut())
    }

    pub fn num_dual_blocks(&self) -> usize {
        self.stages.iter().map(|s| s.blocks.len()).sum()
    }

    /// Visit every trainable parameter in canonical order.
    pub fn visit_params(&self, f: &mut dyn FnMut(&str, &Tensor<E>)) {
        f("stem.w", &self.stem_w);
        f("stem.bn.gamma", &self.stem_bn.gamma);
        f("stem.bn.beta", &self.stem_bn.beta);
        f("stem.prelu", &self.stem_prelu.slope);
        for (i, b) in self.blocks().enumerate() {
            f(&format!("block{i:02}.w"), &b.w);
            f(&format!("block{i:02}.bn.gamma"), &b.bn.gamma);
            f(&format!("block{i:02}.bn.beta"), &b.bn.beta);
            f(&format!("block{i:02}.prelu"), &b.prelu.slope);
        }
        f("classifier.w", &self.classifier.w);
        f("classifier.b", &self.classifier.b);
        f("proj.w", &self.projection.w);
    }

    pub fn visit_params_mut(&mut self, f: &mut dyn FnMut(&str, &mut Tensor<E>)) {
        f("stem.w", &mut self.stem_w);
        f("stem.bn.gamma", &mut self.stem_bn.gamma);
        f("stem.bn.beta", &mut self.stem_bn.beta);
        f("stem.prelu", &mut self.stem_prelu.slope);
        let mut i = 0;
        for s in &mut self.stages {
            for b in &mut s.blocks {
                f(&format!("block{i:02}.w"), &mut b.w);
                f(&format!("block{i:02}.bn.gamma"), &mut b.bn.gamma);
                f(&format!("block{i:02}.bn.beta"), &mut b.bn.beta);
                f(&format!("block{i:02}.prelu"), &mut b.prelu.slope);
                i += 1;
            }
        }
        f("classifier.w", &mut self.classifier.w);
        f("classifier.b", &mut self.classifier.b);
        f("proj.w", &mut self.projection.w);
    }

    pub fn param_names(&self) -> Vec<String> {
        let mut names = Vec::new();
        self.visit_params(&mut |n, _| names.push(n.to_string()));
        names
    }

    pub fn param_count(&self) -> usize {
        let mut count = 0;
        self.visit_params(&mut |_, t| count += t.len());
        count
    }

    /// Per-block alphas of the current latent weights, frozen for the
    /// surrogate forward used in gradient checks.
    pub fn frozen_alphas(&self) -> Result<Vec<Tensor<E>>> {
        self.blocks().map(|b| alpha_scale(&b.w)).collect()
    }

    fn check_input(&self, x: &Tensor<E>) -> Result<()> {
        let (c, h, w) = self.spec.input_shape;
        if x.rank() != 4 || x.dim(1) != c || x.dim(2) != h || x.dim(3) != w {
            return Err(Error::shape("forward", x.shape(), &[0, c, h, w]));
        }
        Ok(())
    }
}

/// Outputs of a dual forward pass. Branch-specific fields are present only
/// when that branch ran in the requested mode.
#[derive(Debug, Clone)]
pub struct DualForwardResult<E = f32> {
    pub logits_b: Option<Tensor<E>>,
    pub logits_w: Option<Tensor<E>>,
    pub penult_b: Option<Tensor<E>>,
    pub penult_w: Option<Tensor<E>>,
    pub proj_b: Option<Tensor<E>>,
    pub proj_w: Option<Tensor<E>>,
    /// Post-block feature pairs (binary, latent) for every dual conv layer.
    pub per_layer_pairs: Vec<(Tensor<E>, Tensor<E>)>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ForwardMode {
    /// Both branches, batch statistics, caches for backward.
    Train,
    /// Binary branch only over running statistics: the deployment path.
    EvalB,
    /// Latent branch with hard_tanh activations and its own statistics.
    EvalW,
    /// Latent weights with the binary branch's statistics and sign
    /// activations: the outdated-statistics diagnostic.
    EvalWOutdated,
}

impl ForwardMode {
    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(ForwardMode::Train),
            "eval_B" => Ok(ForwardMode::EvalB),
            "eval_W" => Ok(ForwardMode::EvalW),
            "eval_W_outdated" => Ok(ForwardMode::EvalWOutdated),
            other => Err(Error::invalid(
                "forward_dual",
                format!("unknown mode '{other}'"),
            )),
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            ForwardMode::Train => "train",
            ForwardMode::EvalB => "eval_B",
            ForwardMode::EvalW => "eval_W",
            ForwardMode::EvalWOutdated => "eval_W_outdated",
        }
    }
}

enum EventCache<E> {
    Pool(Vec<usize>, Vec<u32>),
    Block(crate::block::BlockCache<E>),
}

/// Saved train-mode activations for `backward_dual`.
pub struct ModelCache<E> {
    input: Tensor<E>,
    stem_bn_out: Tensor<E>,
    stem_bn_cache: BnCache<E>,
    stem_pool: Option<(Vec<usize>, Vec<u32>)>,
    events: Vec<EventCache<E>>,
    featmap_shape: Vec<usize>,
    penult_b: Tensor<E>,
    proj_cache: ProjectionCache<E>,
}

/// Per-parameter gradients keyed by canonical parameter name.
#[derive(Debug, Clone)]
pub struct Gradients<E = f32>(pub BTreeMap<String, Tensor<E>>);

impl<E: Element> Gradients<E> {
    pub fn get(&self, name: &str) -> Option<&Tensor<E>> {
        self.0.get(name)
    }
}

/// Train-mode forward through both branches. `latent` may be disabled to run
/// the plain single-path training pipeline. `surrogate_alphas`, when given,
/// replaces both binarizations with their hard_tanh surrogate (frozen scale)
/// for finite-difference verification.
pub fn forward_train<E: Element>(
    model: &mut Model<E>,
    x: &Tensor<E>,
    latent: bool,
    surrogate_alphas: Option<&[Tensor<E>]>,
) -> Result<(DualForwardResult<E>, ModelCache<E>)> {
    model.check_input(x)?;
    let stem_conv = conv2d(x, &model.stem_w, 1, 1)?;
    let (stem_bn_out, stem_bn_cache) = model.stem_bn.forward_train(&stem_conv)?;
    let stem_act = model.stem_prelu.forward(&stem_bn_out)?;
    let (mut y, stem_pool) = if model.stem_pool {
        let shape = stem_act.shape().to_vec();
        let (p, idx) = maxpool2x2(&stem_act)?;
        (p, Some((shape, idx)))
    } else {
        (stem_act, None)
    };
    let mut ytil = if latent { Some(y.clone()) } else { None };

    let mut events = Vec::new();
    let mut per_layer_pairs = Vec::new();
    let mut block_idx = 0;
    for stage in &mut model.stages {
        if stage.pool_before {
            let shape = y.shape().to_vec();
            let (p, idx) = maxpool2x2(&y)?;
            events.push(EventCache::Pool(shape, idx));
            y = p;
            if let Some(t) = ytil.take() {
                ytil = Some(maxpool2x2(&t)?.0);
            }
        }
        for block in &mut stage.blocks {
            let alpha = surrogate_alphas.map(|a| &a[block_idx]);
            let (ny, nyt, cache) = block.forward_train(&y, ytil.as_ref(), alpha)?;
            events.push(EventCache::Block(cache));
            if let Some(ref t) = nyt {
                per_layer_pairs.push((ny.clone(), t.clone()));
            }
            y = ny;
            ytil = nyt;
            block_idx += 1;
        }
    }

    let featmap_shape = y.shape().to_vec();
    let penult_b = global_avgpool(&y)?;
    let logits_b = model.classifier.forward(&penult_b)?;
    let (proj_b, proj_cache) = model.projection.forward(&penult_b)?;

    let (penult_w, logits_w, proj_w) = match ytil {
        None => (None, None, None),
        Some(t) => {
            let pw = global_avgpool(&t)?;
            let lw = model.classifier.forward(&pw)?;
            let (pj, _) = model.projection.forward(&pw)?;
            (Some(pw), Some(lw), Some(pj))
        }
    };

    Ok((
        DualForwardResult {
            logits_b: Some(logits_b),
            logits_w,
            penult_b: Some(penult_b.clone()),
            penult_w,
            proj_b: Some(proj_b),
            proj_w,
            per_layer_pairs,
        },
        ModelCache {
            input: x.clone(),
            stem_bn_out,
            stem_bn_cache,
            stem_pool,
            events,
            featmap_shape,
            penult_b,
            proj_cache,
        },
    ))
}

/// Eval-mode forward of one path. Returns (logits, penultimate features).
pub fn forward_eval<E: Element>(
    model: &Model<E>,
    x: &Tensor<E>,
    mode: ForwardMode,
) -> Result<(Tensor<E>, Tensor<E>)> {
    let path = match mode {
        ForwardMode::EvalB => EvalPath::Binary,
        ForwardMode::EvalW => EvalPath::LatentHardTanh,
        ForwardMode::EvalWOutdated => EvalPath::LatentOutdated,
        ForwardMode::Train => {
            return Err(Error::invalid(
                "forward_eval",
                "train mode requires forward_train",
            ))
        }
    };
    model.check_input(x)?;
    let stem_conv = conv2d(x, &model.stem_w, 1, 1)?;
    let stem_bn_out = model.stem_bn.forward_eval(&stem_conv)?;
    let stem_act = model.stem_prelu.forward(&stem_bn_out)?;
    let mut y = if model.stem_pool {
        maxpool2x2(&stem_act)?.0
    } else {
        stem_act
    };
    for stage in &model.stages {
        if stage.pool_before {
            y = maxpool2x2(&y)?.0;
        }
        for block in &stage.blocks {
            y = block.forward_eval(&y, path)?;
        }
    }
    let penult = global_avgpool(&y)?;
    let logits = model.classifier.forward(&penult)?;
    Ok((logits, penult))
}

/// Unified forward matching the four run modes.
pub fn forward_dual<E: Element>(
    model: &mut Model<E>,
    x: &Tensor<E>,
    mode: ForwardMode,
) -> Result<DualForwardResult<E>> {
    match mode {
        ForwardMode::Train => Ok(forward_train(model, x, true, None)?.0),
        ForwardMode::EvalB => {
            let (logits, penult) = forward_eval(model, x, mode)?;
            Ok(DualForwardResult {
                logits_b: Some(logits),
                logits_w: None,
                penult_b: Some(penult),
                penult_w: None,
                proj_b: None,
                proj_w: None,
                per_layer_pairs: Vec::new(),
            })
        }
        ForwardMode::EvalW | ForwardMode::EvalWOutdated => {
            let (logits, penult) = forward_eval(model, x, mode)?;
            Ok(DualForwardResult {
                logits_b: None,
                logits_w: Some(logits),
                penult_b: None,
                penult_w: Some(penult),
                proj_b: None,
                proj_w: None,
                per_layer_pairs: Vec::new(),
            })
        }
    }
}

/// Backward through the binary branch. `grad_logits` comes from the
/// classification loss; `grad_proj` (representation loss on projected
/// features) and `grad_penult_extra` (representation loss on raw penultimate
/// features) are optional. `fre` injects the per-layer feature-reconstruction
/// gradients at every block output.
pub fn backward_dual<E: Element>(
    model: &Model<E>,
    cache: &ModelCache<E>,
    grad_logits: &Tensor<E>,
    grad_proj: Option<&Tensor<E>>,
    grad_penult_extra: Option<&Tensor<E>>,
    fre: Option<(f64, &[(Tensor<E>, Tensor<E>)])>,
) -> Result<Gradients<E>> {
    let mut grads: BTreeMap<String, Tensor<E>> = BTreeMap::new();

    let (mut g_penult, g_cls_w, g_cls_b) =
        model.classifier.backward(&cache.penult_b, grad_logits)?;
    grads.insert("classifier.w".into(), g_cls_w);
    grads.insert("classifier.b".into(), g_cls_b);
    if let Some(gp) = grad_proj {
        let (g_pen_proj, g_proj_w) = model
            .projection
            .backward(&cache.penult_b, &cache.proj_cache, gp)?;
        g_penult.add_assign(&g_pen_proj)?;
        grads.insert("proj.w".into(), g_proj_w);
    } else {
        grads.insert("proj.w".into(), Tensor::zeros(model.projection.w.shape()));
    }
    if let Some(ge) = grad_penult_extra {
        g_penult.add_assign(ge)?;
    }

    let mut g = global_avgpool_backward(&cache.featmap_shape, &g_penult)?;

    if let Some((_, pairs)) = fre {
        if pairs.len() != model.num_dual_blocks() {
            return Err(Error::invalid(
                "backward_dual",
                format!(
                    "fre expects {} layer pairs, got {}",
                    model.num_dual_blocks(),
                    pairs.len()
                ),
            ));
        }
    }

    let mut event_iter = cache.events.iter().rev();
    let mut block_idx = model.num_dual_blocks();
    for stage in model.stages.iter().rev() {
        for block in stage.blocks.iter().rev() {
            block_idx -= 1;
            let cache_entry = event_iter.next().ok_or_else(|| {
                Error::invalid("backward_dual", "cache does not match model structure")
            })?;
            let EventCache::Block(bc) = cache_entry else {
                return Err(Error::invalid(
                    "backward_dual",
                    "cache does not match model structure",
                ));
            };
            if let Some((mu, pairs)) = fre {
                let (ref y_l, ref ytil_l) = pairs[block_idx];
                g.add_assign(&fre_backward(y_l, ytil_l, mu)?)?;
            }
            let (g_prev, bg) = block.backward(bc, &g)?;
            grads.insert(format!("block{block_idx:02}.w"), bg.w);
            grads.insert(format!("block{block_idx:02}.bn.gamma"), bg.gamma);
            grads.insert(format!("block{block_idx:02}.bn.beta"), bg.beta);
            grads.insert(format!("block{block_idx:02}.prelu"), bg.slope);
            g = g_prev;
        }
        if stage.pool_before {
            let Some(EventCache::Pool(shape, idx)) = event_iter.next() else {
                return Err(Error::invalid(
                    "backward_dual",
                    "cache does not match model structure",
                ));
            };
            g = maxpool2x2_backward(shape, idx, &g)?;
        }
    }

    if let Some((shape, idx)) = &cache.stem_pool {
        g = maxpool2x2_backward(shape, idx, &g)?;
    }
    let (g_bn_out, g_stem_slope) = model.stem_prelu.backward(&cache.stem_bn_out, &g)?;
    let (g_stem_conv, g_stem_gamma, g_stem_beta) =
        model.stem_bn.backward(&cache.stem_bn_cache, &g_bn_out)?;
    let (_, g_stem_w) = conv2d_backward(&g_stem_conv, &cache.input, &model.stem_w, 1, 1)?;
    grads.insert("stem.w".into(), g_stem_w);
    grads.insert("stem.bn.gamma".into(), g_stem_gamma);
    grads.insert("stem.bn.beta".into(), g_stem_beta);
    grads.insert("stem.prelu".into(), g_stem_slope);

    Ok(Gradients(grads))
}

/// The float binary path's interior binary activations: sign of each dual
/// block's zero-padded input, in block order. Matches the packed engine's
/// activation bits exactly.
pub fn eval_b_sign_trace<E: Element>(
    model: &Model<E>,
    x: &Tensor<E>,
) -> Result<Vec<Tensor<E>>> {
    model.check_input(x)?;
    let stem_conv = conv2d(x, &model.stem_w, 1, 1)?;
    let stem_bn_out = model.stem_bn.forward_eval(&stem_conv)?;
    let stem_act = model.stem_prelu.forward(&stem_bn_out)?;
    let mut y = if model.stem_pool {
        maxpool2x2(&stem_act)?.0
    } else {
        stem_act
    };
    let mut traces = Vec::new();
    for stage in &model.stages {
        if stage.pool_before {
            y = maxpool2x2(&y)?.0;
        }
        for block in &stage.blocks {
            traces.push(crate::binarize::sign_forward(&crate::tensor::pad_nchw(
                &y, block.pad,
            )));
            y = block.forward_eval(&y, EvalPath::Binary)?;
        }
    }
    Ok(traces)
}

/// Walk both eval-mode paths in lockstep and collect the per-block output
/// pair (binary, latent) for feature-reconstruction reporting.
pub fn eval_layer_pairs<E: Element>(
    model: &Model<E>,
    x: &Tensor<E>,
) -> Result<Vec<(Tensor<E>, Tensor<E>)>> {
    model.check_input(x)?;
    let stem_conv = conv2d(x, &model.stem_w, 1, 1)?;
    let stem_bn_out = model.stem_bn.forward_eval(&stem_conv)?;
    let stem_act = model.stem_prelu.forward(&stem_bn_out)?;
    let mut yb = if model.stem_pool {
        maxpool2x2(&stem_act)?.0
    } else {
        stem_act
    };
    let mut yw = yb.clone();
    let mut pairs = Vec::new();
    for stage in &model.stages {
        if stage.pool_before {
            yb = maxpool2x2(&yb)?.0;
            yw = maxpool2x2(&yw)?.0;
        }
        for block in &stage.blocks {
            yb = block.forward_eval(&yb, EvalPath::Binary)?;
            yw = block.forward_eval(&yw, EvalPath::LatentHardTanh)?;
            pairs.push((yb.clone(), yw.clone()));
        }
    }
    Ok(pairs)
}

/// Stream a batch through the latent branch, normalizing with batch
/// statistics while accumulating exact pre-BN moments per block into `accs`.
pub fn forward_latent_recal<E: Element>(
    model: &Model<E>,
    x: &Tensor<E>,
    accs: &mut [StatAcc],
) -> Result<()> {
    if accs.len() != model.num_dual_blocks() {
        return Err(Error::invalid(
            "forward_latent_recal",
            format!(
                "expected {} accumulators, got {}",
                model.num_dual_blocks(),
                accs.len()
            ),
        ));
    }
    model.check_input(x)?;
    let stem_conv = conv2d(x, &model.stem_w, 1, 1)?;
    let stem_bn_out = model.stem_bn.forward_eval(&stem_conv)?;
    let stem_act = model.stem_prelu.forward(&stem_bn_out)?;
    let mut y = if model.stem_pool {
        maxpool2x2(&stem_act)?.0
    } else {
        stem_act
    };
    let mut i = 0;
    for stage in &model.stages {
        if stage.pool_before {
            y = maxpool2x2(&y)?.0;
        }
        for block in &stage.blocks {
            y = block.forward_latent_recal(&y, &mut accs[i])?;
            i += 1;
        }
    }
    Ok(())
}
