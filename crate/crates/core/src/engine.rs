//! Training loop, optimizer, evaluation, BN recalibration, checkpointing.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use crate::block::StatAcc;
use crate::checkpoint::{push_model, read_model, Container, CHECKPOINT_MAGIC};
use crate::config::{self, DataConfig};
use crate::data::{augment, batches, AugmentConfig, Dataset};
use crate::error::{Error, Result};
use crate::losses::{
    cross_entropy, fre, rep_instance, rep_instance_backward, rep_label_aware,
    rep_label_aware_backward, LossReport, RepBatch,
};
use crate::models::{
    backward_dual, build, forward_eval, forward_latent_recal, forward_train, ForwardMode,
    Gradients, Model, ModelSpec,
};
use crate::rng::Rng;
use crate::tensor::Tensor;

// ---------------------------------------------------------------------------
// optimizer
// ---------------------------------------------------------------------------

/// Adam moments mirroring the model parameters.
#[derive(Debug, Clone)]
pub struct AdamState {
    pub m: BTreeMap<String, Tensor<f32>>,
    pub v: BTreeMap<String, Tensor<f32>>,
    pub step: u64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// Learning rate applied at the most recent step.
    pub lr: f64,
    pub weight_decay: f64,
}

impl AdamState {
    pub fn new(model: &Model<f32>, weight_decay: f64) -> Self {
        let mut m = BTreeMap::new();
        let mut v = BTreeMap::new();
        model.visit_params(&mut |name, t| {
            m.insert(name.to_string(), Tensor::zeros(t.shape()));
            v.insert(name.to_string(), Tensor::zeros(t.shape()));
        });
        AdamState {
            m,
            v,
            step: 0,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            lr: 0.0,
            weight_decay,
        }
    }
}

/// Weight decay applies to real-valued parameters (latent conv kernels, BN
/// affine, classifier, projection) but not to PReLU slopes.
fn decays(name: &str) -> bool {
    !name.ends_with(".prelu")
}

/// Cosine decay from lr0 to 0 over `total_steps`.
pub fn cosine_lr(step: u64, total_steps: u64, lr0: f64) -> Result<f64> {
    if step > total_steps || total_steps == 0 {
        return Err(Error::invalid(
            "cosine_lr",
            format!("step {step} outside schedule of {total_steps} steps"),
        ));
    }
    Ok(lr0 * (1.0 + (std::f64::consts::PI * step as f64 / total_steps as f64).cos()) / 2.0)
}

/// One bias-corrected Adam update in place. Weight decay enters the gradient
/// before the moments. Aborts on any non-finite gradient, naming the
/// parameter.
pub fn adam_step(
    state: &mut AdamState,
    model: &mut Model<f32>,
    grads: &Gradients<f32>,
    lr: f64,
) -> Result<()> {
    state.step += 1;
    state.lr = lr;
    let b1 = state.beta1 as f32;
    let b2 = state.beta2 as f32;
    let bc1 = (1.0 - state.beta1.powi(state.step as i32)) as f32;
    let bc2 = (1.0 - state.beta2.powi(state.step as i32)) as f32;
    let eps = state.eps as f32;
    let lr32 = lr as f32;
    let mut failure: Option<Error> = None;

    model.visit_params_mut(&mut |name, p| {
        if failure.is_some() {
            return;
        }
        let Some(g) = grads.get(name) else {
            failure = Some(Error::invalid(
                "adam_step",
                format!("no gradient for parameter '{name}'"),
            ));
            return;
        };
        if g.shape() != p.shape() {
            failure = Some(Error::shape("adam_step", g.shape(), p.shape()));
            return;
        }
        let wd = if decays(name) {
            state.weight_decay as f32
        } else {
            0.0
        };
        let m = state.m.get_mut(name).unwrap().data_mut();
        let v = state.v.get_mut(name).unwrap().data_mut();
        let pd = p.data_mut();
        for i in 0..pd.len() {
            let grad = g.data()[i] + wd * pd[i];
            if !grad.is_finite() {
                failure = Some(Error::NonFinite {
                    what: format!("gradient of {name}[{i}]"),
                });
                return;
            }
            m[i] = b1 * m[i] + (1.0 - b1) * grad;
            v[i] = b2 * v[i] + (1.0 - b2) * grad * grad;
            let mh = m[i] / bc1;
            let vh = v[i] / bc2;
            pd[i] -= lr32 * mh / (vh.sqrt() + eps);
        }
    });
    match failure {
        Some(e) => Err(e),
        None => Ok(()),
    }
}

// ---------------------------------------------------------------------------
// configuration
// ---------------------------------------------------------------------------

/// Which auxiliary loss supervises the binary path.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Strategy {
    /// Cross-entropy only; the latent branch (if enabled) is pure overhead.
    Baseline,
    /// Per-image latent/binary feature approximation.
    Instance,
    /// Same-class features pulled together across both paths.
    LabelAware,
    /// Per-layer feature-reconstruction penalty.
    MinFre,
}

impl Strategy {
    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "baseline" => Ok(Strategy::Baseline),
            "instance" => Ok(Strategy::Instance),
            "label_aware" => Ok(Strategy::LabelAware),
            "min_fre" => Ok(Strategy::MinFre),
            other => Err(Error::Config {
                msg: format!("unknown strategy '{other}'"),
            }),
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Strategy::Baseline => "baseline",
            Strategy::Instance => "instance",
            Strategy::LabelAware => "label_aware",
            Strategy::MinFre => "min_fre",
        }
    }
}

#[derive(Debug, Clone)]
pub struct TrainConfig {
    pub seed: u64,
    pub epochs: usize,
    pub batch_size: usize,
    pub lr0: f64,
    pub lambda: f64,
    pub mu_fre: f64,
    pub weight_decay: f64,
    pub strategy: Strategy,
    pub projection: bool,
    pub clamp_latent: bool,
    /// Run the latent branch during training. Off reproduces the plain
    /// single-path pipeline; required on for every non-baseline strategy.
    pub latent: bool,
    /// Write a checkpoint every k epochs (0 = final only).
    pub checkpoint_every: usize,
    pub model: ModelSpec,
    pub data: DataConfig,
    pub augment_pad: usize,
    pub augment_hflip: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            seed: 42,
            epochs: 30,
            batch_size: 128,
            lr0: 0.005,
            lambda: 1e-4,
            mu_fre: 1.0,
            weight_decay: 1e-6,
            strategy: Strategy::Baseline,
            projection: true,
            clamp_latent: false,
            latent: true,
            checkpoint_every: 0,
            model: ModelSpec::tiny_cnn(10),
            data: DataConfig::default(),
            augment_pad: 2,
            augment_hflip: true,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        if self.batch_size == 0 || self.epochs == 0 {
            return Err(Error::Config {
                msg: "epochs and batch_size must be >= 1".into(),
            });
        }
        if self.lambda < 0.0 || self.mu_fre < 0.0 || self.weight_decay < 0.0 {
            return Err(Error::Config {
                msg: "lambda, mu_fre and weight_decay must be non-negative".into(),
            });
        }
        if self.strategy != Strategy::Baseline && !self.latent {
            return Err(Error::Config {
                msg: format!(
                    "strategy {} needs the latent branch: set latent = on",
                    self.strategy.name()
                ),
            });
        }
        Ok(())
    }
}

// ---------------------------------------------------------------------------
// checkpoint
// ---------------------------------------------------------------------------

/// Everything needed to resume training bit-exactly.
#[derive(Debug, Clone)]
pub struct Checkpoint {
    pub model: Model<f32>,
    pub adam: AdamState,
    pub rng: Rng,
    pub epoch: u64,
}

impl Checkpoint {
    pub fn to_container(&self) -> Container {
        let mut c = Container::new(CHECKPOINT_MAGIC);
        push_model(&mut c, &self.model);
        c.push_u64("adam.step", &[self.adam.step]);
        c.push_f64("adam.beta1", &[self.adam.beta1]);
        c.push_f64("adam.beta2", &[self.adam.beta2]);
        c.push_f64("adam.eps", &[self.adam.eps]);
        c.push_f64("adam.lr", &[self.adam.lr]);
        c.push_f64("adam.weight_decay", &[self.adam.weight_decay]);
        for name in self.model.param_names() {
            c.push_tensor(&format!("adam.m.{name}"), &self.adam.m[&name]);
            c.push_tensor(&format!("adam.v.{name}"), &self.adam.v[&name]);
        }
        let (seed, counter) = self.rng.state();
        c.push_u64("rng.seed", &[seed]);
        c.push_u64("rng.counter", &[counter]);
        c.push_u64("epoch", &[self.epoch]);
        c
    }

    pub fn from_container(c: &Container) -> Result<Self> {
        let model = read_model(c)?;
        let mut adam = AdamState::new(&model, c.f64_scalar("adam.weight_decay")?);
        adam.step = c.u64_scalar("adam.step")?;
        adam.beta1 = c.f64_scalar("adam.beta1")?;
        adam.beta2 = c.f64_scalar("adam.beta2")?;
        adam.eps = c.f64_scalar("adam.eps")?;
        adam.lr = c.f64_scalar("adam.lr")?;
        for name in model.param_names() {
            adam.m.insert(name.clone(), c.tensor(&format!("adam.m.{name}"))?);
            adam.v.insert(name.clone(), c.tensor(&format!("adam.v.{name}"))?);
        }
        Ok(Checkpoint {
            model,
            adam,
            rng: Rng::restore(c.u64_scalar("rng.seed")?, c.u64_scalar("rng.counter")?),
            epoch: c.u64_scalar("epoch")?,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        self.to_container().write(path)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_container(&Container::read(path, CHECKPOINT_MAGIC)?)
    }
}

// ---------------------------------------------------------------------------
// evaluation and recalibration
// ---------------------------------------------------------------------------

const EVAL_BATCH: usize = 256;

fn argmax(row: &[f32]) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate() {
        if v > row[best] {
            best = i;
        }
    }
    best
}

/// Top-1 accuracy of the given inference path; deterministic.
pub fn evaluate(model: &Model<f32>, dataset: &Dataset, mode: ForwardMode) -> Result<f64> {
    if mode == ForwardMode::Train {
        return Err(Error::invalid("evaluate", "train is not an evaluation mode"));
    }
    let mut correct = 0usize;
    let mut rng = Rng::new(0);
    for (images, labels) in batches(dataset, EVAL_BATCH, &mut rng, false)? {
        let (logits, _) = forward_eval(model, &images, mode)?;
        let k = logits.dim(1);
        for (i, &label) in labels.iter().enumerate() {
            if argmax(&logits.data()[i * k..(i + 1) * k]) == label {
                correct += 1;
            }
        }
    }
    Ok(correct as f64 / dataset.len() as f64)
}

/// Recompute the latent branch's BN statistics by streaming `n_batches`
/// through it with hard_tanh activations, overwriting stats_W with the exact
/// aggregate moments of the stream (not momentum-smoothed). A constant input
/// stream yields near-zero variances; eval-mode normalization then divides by
/// sqrt(eps), which stays finite by construction.
pub fn recalibrate_bn(
    model: &mut Model<f32>,
    dataset: &Dataset,
    n_batches: usize,
    batch_size: usize,
) -> Result<()> {
    if n_batches < 1 {
        return Err(Error::invalid("recalibrate_bn", "n_batches must be >= 1"));
    }
    let widths: Vec<usize> = model.blocks().map(|b| b.out_channels()).collect();
    let mut accs: Vec<StatAcc> = widths.iter().map(|&c| StatAcc::new(c)).collect();
    let mut rng = Rng::new(0);
    let mut seen = 0;
    for (images, _) in batches(dataset, batch_size, &mut rng, false)?.take(n_batches) {
        forward_latent_recal(model, &images, &mut accs)?;
        seen += 1;
    }
    for (block, acc) in model.blocks_mut().zip(&accs) {
        let (mean, var) = acc.finalize::<f32>();
        block.bn.stats_w.mean = mean;
        block.bn.stats_w.var = var;
        block.bn.stats_w.count = seen;
    }
    Ok(())
}

/// Write one CSV row per sample: label, binary-path penultimate features,
/// latent-path penultimate features.
pub fn export_features(model: &Model<f32>, dataset: &Dataset, path: &Path) -> Result<()> {
    let feat = model.classifier.w.dim(1);
    let mut out = String::new();
    out.push_str("label");
    for i in 0..feat {
        out.push_str(&format!(",pb_{i}"));
    }
    for i in 0..feat {
        out.push_str(&format!(",pw_{i}"));
    }
    out.push('\n');
    let mut rng = Rng::new(0);
    for (images, labels) in batches(dataset, EVAL_BATCH, &mut rng, false)? {
        let (_, pen_b) = forward_eval(model, &images, ForwardMode::EvalB)?;
        let (_, pen_w) = forward_eval(model, &images, ForwardMode::EvalW)?;
        for (i, &label) in labels.iter().enumerate() {
            out.push_str(&label.to_string());
            for &v in &pen_b.data()[i * feat..(i + 1) * feat] {
                out.push_str(&format!(",{v}"));
            }
            for &v in &pen_w.data()[i * feat..(i + 1) * feat] {
                out.push_str(&format!(",{v}"));
            }
            out.push('\n');
        }
    }
    fs::write(path, out).map_err(|e| Error::io(path.display().to_string(), e))
}

/// Mean per-layer feature reconstruction error over a dataset, evaluated with
/// running statistics on both branches. Returns one value per dual layer.
pub fn fre_over_dataset(model: &Model<f32>, dataset: &Dataset) -> Result<Vec<f64>> {
    let blocks = model.num_dual_blocks();
    let mut sums = vec![0.0f64; blocks];
    let mut batches_seen = 0usize;
    let mut rng = Rng::new(0);
    for (images, _) in batches(dataset, EVAL_BATCH, &mut rng, false)? {
        let pairs = crate::models::eval_layer_pairs(model, &images)?;
        for (i, (y, yt)) in pairs.iter().enumerate() {
            sums[i] += fre(yt, y)? as f64;
        }
        batches_seen += 1;
    }
    Ok(sums.iter().map(|s| s / batches_seen as f64).collect())
}

// ---------------------------------------------------------------------------
// training
// ---------------------------------------------------------------------------

#[derive(Debug, Clone)]
pub struct EpochRow {
    pub epoch: usize,
    pub lr: f64,
    pub ce: f64,
    pub rep: f64,
    pub acc_b: f64,
    pub acc_w: f64,
    pub fre_mean: f64,
    /// Combined objective over the epoch's batches.
    pub losses: LossReport,
}

#[derive(Debug)]
pub struct TrainOutcome {
    pub checkpoint: Checkpoint,
    pub metrics_csv: String,
    pub history: Vec<EpochRow>,
}

pub const METRICS_SCHEMA: &str = "epoch,lr,ce,rep,acc_b,acc_w,fre";

pub fn train(
    cfg: &TrainConfig,
    train_ds: &Dataset,
    test_ds: &Dataset,
    out_dir: Option<&Path>,
) -> Result<TrainOutcome> {
    train_resumable(cfg, train_ds, test_ds, None, out_dir)
}

/// Run (or resume) training. Checkpoints restore bit-exactly: resuming from
/// epoch e reproduces the unbroken run's remaining epochs bit for bit.
pub fn train_resumable(
    cfg: &TrainConfig,
    train_ds: &Dataset,
    test_ds: &Dataset,
    resume: Option<Checkpoint>,
    out_dir: Option<&Path>,
) -> Result<TrainOutcome> {
    cfg.validate()?;
    let max_label = train_ds
        .labels
        .iter()
        .chain(test_ds.labels.iter())
        .copied()
        .max()
        .unwrap_or(0);
    if max_label >= cfg.model.num_classes {
        return Err(Error::invalid(
            "train",
            format!(
                "dataset has label {max_label} but the model has {} classes",
                cfg.model.num_classes
            ),
        ));
    }
    let (ic, ih, iw) = cfg.model.input_shape;
    if train_ds.images.shape()[1..] != [ic, ih, iw] {
        return Err(Error::shape(
            "train",
            train_ds.images.shape(),
            &[0, ic, ih, iw],
        ));
    }

    let (mut model, mut adam, mut rng, start_epoch) = match resume {
        Some(ckpt) => {
            if ckpt.model.spec != cfg.model {
                return Err(Error::Config {
                    msg: "checkpoint model spec does not match config".into(),
                });
            }
            (ckpt.model, ckpt.adam, ckpt.rng, ckpt.epoch as usize)
        }
        None => {
            let mut rng = Rng::new(cfg.seed);
            let model = build::<f32>(&cfg.model, &mut rng)?;
            let adam = AdamState::new(&model, cfg.weight_decay);
            (model, adam, rng, 0)
        }
    };

    let steps_per_epoch = train_ds.len().div_ceil(cfg.batch_size);
    let total_steps = (cfg.epochs * steps_per_epoch) as u64;
    let aug_cfg = AugmentConfig::for_input(ih, cfg.augment_pad, cfg.augment_hflip);

    let config_text = config::to_text(cfg);
    let mut csv = format!(
        "# bnnkit-metrics-v1 config={:016x}\n{METRICS_SCHEMA}\n",
        config::fnv1a(&config_text)
    );
    let mut history = Vec::new();

    for epoch in start_epoch..cfg.epochs {
        let mut ce_sum = 0.0f64;
        let mut rep_sum = 0.0f64;
        let mut fre_sum = 0.0f64;
        let mut fre_layer_sums = vec![0.0f64; model.num_dual_blocks()];
        let mut nbatches = 0usize;
        let mut lr_last = adam.lr;

        for (images, labels) in batches(train_ds, cfg.batch_size, &mut rng, true)? {
            let images = augment(&images, &aug_cfg, &mut rng)?;
            let (out, cache) = forward_train(&mut model, &images, cfg.latent, None)?;
            let logits_b = out.logits_b.as_ref().unwrap();
            let (ce, g_logits) = cross_entropy(logits_b, &labels)?;
            if !ce.is_finite() {
                return Err(Error::NonFinite {
                    what: "cross-entropy loss".into(),
                });
            }

            let feats = |o: &crate::models::DualForwardResult<f32>| {
                if cfg.projection {
                    (o.proj_b.clone().unwrap(), o.proj_w.clone().unwrap())
                } else {
                    (o.penult_b.clone().unwrap(), o.penult_w.clone().unwrap())
                }
            };
            let mut rep_val = 0.0f64;
            let mut grad_feat: Option<Tensor<f32>> = None;
            let mut fre_inject: Option<(f64, &[(Tensor<f32>, Tensor<f32>)])> = None;
            match cfg.strategy {
                Strategy::Baseline => {}
                Strategy::Instance => {
                    let (fb, fw) = feats(&out);
                    let batch = RepBatch {
                        y: fb,
                        ytil: fw,
                        labels: labels.clone(),
                    };
                    rep_val = rep_instance(&batch)? as f64;
                    grad_feat =
                        Some(rep_instance_backward(&batch)?.scale(cfg.lambda as f32));
                }
                Strategy::LabelAware => {
                    let (fb, fw) = feats(&out);
                    let batch = RepBatch {
                        y: fb,
                        ytil: fw,
                        labels: labels.clone(),
                    };
                    rep_val = rep_label_aware(&batch)? as f64;
                    grad_feat =
                        Some(rep_label_aware_backward(&batch)?.scale(cfg.lambda as f32));
                }
                Strategy::MinFre => {
                    fre_inject = Some((cfg.mu_fre, &out.per_layer_pairs));
                }
            }
            if !rep_val.is_finite() {
                return Err(Error::NonFinite {
                    what: "representation loss".into(),
                });
            }

            if cfg.latent {
                let mut batch_fre = 0.0f64;
                for (i, (y, yt)) in out.per_layer_pairs.iter().enumerate() {
                    let v = fre(yt, y)? as f64;
                    fre_layer_sums[i] += v;
                    batch_fre += v;
                }
                fre_sum += batch_fre / out.per_layer_pairs.len().max(1) as f64;
            }

            let (grad_proj, grad_pen) = if cfg.projection {
                (grad_feat.as_ref(), None)
            } else {
                (None, grad_feat.as_ref())
            };
            let grads = backward_dual(&model, &cache, &g_logits, grad_proj, grad_pen, fre_inject)?;
            let lr = cosine_lr(adam.step, total_steps, cfg.lr0)?;
            lr_last = lr;
            adam_step(&mut adam, &mut model, &grads, lr)?;
            if cfg.clamp_latent {
                for block in model.blocks_mut() {
                    block.w.map_assign(|v| v.clamp(-1.0, 1.0));
                }
            }

            ce_sum += ce as f64;
            rep_sum += rep_val;
            nbatches += 1;
        }

        let acc_b = evaluate(&model, test_ds, ForwardMode::EvalB)?;
        let acc_w = if cfg.latent {
            evaluate(&model, test_ds, ForwardMode::EvalW)?
        } else {
            f64::NAN
        };
        let fre_mean = if cfg.latent {
            fre_sum / nbatches as f64
        } else {
            f64::NAN
        };
        let ce_mean = ce_sum / nbatches as f64;
        let rep_mean = rep_sum / nbatches as f64;
        let fre_per_layer: Vec<f64> = fre_layer_sums
            .iter()
            .map(|s| s / nbatches as f64)
            .collect();
        let mut total = ce_mean + cfg.lambda * rep_mean;
        if cfg.strategy == Strategy::MinFre {
            total += cfg.mu_fre * fre_per_layer.iter().sum::<f64>();
        }
        let row = EpochRow {
            epoch: epoch + 1,
            lr: lr_last,
            ce: ce_mean,
            rep: rep_mean,
            acc_b,
            acc_w,
            fre_mean,
            losses: LossReport {
                ce: ce_mean,
                rep: rep_mean,
                fre_per_layer,
                total,
            },
        };
        csv.push_str(&format!(
            "{},{},{},{},{},{},{}\n",
            row.epoch, row.lr, row.ce, row.rep, row.acc_b, row.acc_w, row.fre_mean
        ));
        history.push(row);

        if let Some(dir) = out_dir {
            if cfg.checkpoint_every > 0 && (epoch + 1) % cfg.checkpoint_every == 0 {
                let ckpt = Checkpoint {
                    model: model.clone(),
                    adam: adam.clone(),
                    rng: rng.clone(),
                    epoch: (epoch + 1) as u64,
                };
                ckpt.save(&dir.join(format!("checkpoint_epoch{:04}.bnnf", epoch + 1)))?;
            }
        }
    }

    let checkpoint = Checkpoint {
        model,
        adam,
        rng,
        epoch: cfg.epochs as u64,
    };
    if let Some(dir) = out_dir {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir.display().to_string(), e))?;
        checkpoint.save(&dir.join("checkpoint.bnnf"))?;
        fs::write(dir.join("metrics.csv"), &csv)
            .map_err(|e| Error::io(dir.display().to_string(), e))?;
    }
    Ok(TrainOutcome {
        checkpoint,
        metrics_csv: csv,
        history,
    })
}

/// Mean wall-clock seconds per optimization step for the given config,
/// cycling over the first batches of the dataset. Used for cost accounting.
pub fn timed_steps(
    cfg: &TrainConfig,
    train_ds: &Dataset,
    warmup: usize,
    steps: usize,
) -> Result<f64> {
    cfg.validate()?;
    let mut rng = Rng::new(cfg.seed);
    let mut model = build::<f32>(&cfg.model, &mut rng)?;
    let mut adam = AdamState::new(&model, cfg.weight_decay);
    let (_, ih, _) = cfg.model.input_shape;
    let aug_cfg = AugmentConfig::for_input(ih, cfg.augment_pad, cfg.augment_hflip);
    let total = (warmup + steps) as u64;

    let mut batch_list = Vec::new();
    for b in batches(train_ds, cfg.batch_size, &mut rng, false)? {
        batch_list.push(b);
        if batch_list.len() >= 4 {
            break;
        }
    }
    let mut elapsed = 0.0f64;
    for i in 0..warmup + steps {
        let (images, labels) = &batch_list[i % batch_list.len()];
        let t0 = std::time::Instant::now();
        let images = augment(images, &aug_cfg, &mut rng)?;
        let (out, cache) = forward_train(&mut model, &images, cfg.latent, None)?;
        let (_, g_logits) = cross_entropy(out.logits_b.as_ref().unwrap(), labels)?;
        let mut grad_feat: Option<Tensor<f32>> = None;
        let mut fre_inject: Option<(f64, &[(Tensor<f32>, Tensor<f32>)])> = None;
        match cfg.strategy {
            Strategy::Baseline => {}
            Strategy::Instance | Strategy::LabelAware => {
                let batch = RepBatch {
                    y: out.proj_b.clone().unwrap(),
                    ytil: out.proj_w.clone().unwrap(),
                    labels: labels.clone(),
                };
                grad_feat = Some(if cfg.strategy == Strategy::Instance {
                    rep_instance_backward(&batch)?.scale(cfg.lambda as f32)
                } else {
                    rep_label_aware_backward(&batch)?.scale(cfg.lambda as f32)
                });
            }
            Strategy::MinFre => fre_inject = Some((cfg.mu_fre, &out.per_layer_pairs)),
        }
        let grads = backward_dual(&model, &cache, &g_logits, grad_feat.as_ref(), None, fre_inject)?;
        let lr = cosine_lr(adam.step.min(total), total, cfg.lr0)?;
        adam_step(&mut adam, &mut model, &grads, lr)?;
        if i >= warmup {
            elapsed += t0.elapsed().as_secs_f64();
        }
    }
    Ok(elapsed / steps as f64)
}
