//! Plain-text configuration: `key = value` lines with dotted keys that mirror
//! the training-config fields one to one. Unknown keys are errors, never
//! silently ignored, and the canonical serialization round-trips.

use std::collections::BTreeMap;
use std::path::Path;

use crate::data::{load_cifar10, load_idx, Dataset, Normalize, Split};
use crate::engine::{Strategy, TrainConfig};
use crate::error::{Error, Result};
use crate::models::Arch;
use crate::synth;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DataFormat {
    Cifar10,
    Idx,
    Synth,
}

impl DataFormat {
    fn parse(s: &str) -> Result<Self> {
        match s {
            "cifar10" => Ok(DataFormat::Cifar10),
            "idx" => Ok(DataFormat::Idx),
            "synth" => Ok(DataFormat::Synth),
            other => Err(Error::Config {
                msg: format!("unknown data format '{other}' (cifar10 | idx | synth)"),
            }),
        }
    }

    fn name(self) -> &'static str {
        match self {
            DataFormat::Cifar10 => "cifar10",
            DataFormat::Idx => "idx",
            DataFormat::Synth => "synth",
        }
    }
}

#[derive(Debug, Clone)]
pub struct DataConfig {
    pub format: DataFormat,
    /// CIFAR-10 binary directory.
    pub dir: String,
    pub train_images: String,
    pub train_labels: String,
    pub test_images: String,
    pub test_labels: String,
    /// Per-channel constants; empty = per-format defaults.
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
    /// Keep the first n samples of a split (0 = all).
    pub train_limit: usize,
    pub test_limit: usize,
    pub synth_classes: usize,
    pub synth_train_per_class: usize,
    pub synth_test_per_class: usize,
    pub synth_noise: f64,
    pub synth_separation: f64,
    pub synth_blend: f64,
    pub synth_jitter: usize,
    pub synth_modes: usize,
    pub synth_seed: u64,
    pub synth_shape: (usize, usize, usize),
}

impl Default for DataConfig {
    fn default() -> Self {
        DataConfig {
            format: DataFormat::Synth,
            dir: String::new(),
            train_images: String::new(),
            train_labels: String::new(),
            test_images: String::new(),
            test_labels: String::new(),
            mean: Vec::new(),
            std: Vec::new(),
            train_limit: 0,
            test_limit: 0,
            synth_classes: 10,
            synth_train_per_class: 500,
            synth_test_per_class: 100,
            synth_noise: 64.0,
            synth_separation: 1.0,
            synth_blend: 0.0,
            synth_jitter: 2,
            synth_modes: 2,
            synth_seed: 1234,
            synth_shape: (3, 32, 32),
        }
    }
}

impl DataConfig {
    fn normalize(&self, channels: usize) -> Result<Normalize> {
        if !self.mean.is_empty() || !self.std.is_empty() {
            if self.mean.len() != channels || self.std.len() != channels {
                return Err(Error::Config {
                    msg: format!(
                        "data.mean/data.std must have {channels} entries, got {}/{}",
                        self.mean.len(),
                        self.std.len()
                    ),
                });
            }
            return Ok(Normalize {
                mean: self.mean.iter().map(|&v| v as f32).collect(),
                std: self.std.iter().map(|&v| v as f32).collect(),
            });
        }
        Ok(match self.format {
            DataFormat::Cifar10 => Normalize::cifar10(),
            DataFormat::Idx => Normalize::mnist(),
            DataFormat::Synth => {
                if channels == 3 {
                    Normalize::cifar10()
                } else {
                    Normalize::identity(channels)
                }
            }
        })
    }
}

/// Resolve the configured datasets.
pub fn load_datasets(data: &DataConfig) -> Result<(Dataset, Dataset)> {
    let (mut train, mut test) = match data.format {
        DataFormat::Cifar10 => {
            let norm = data.normalize(3)?;
            load_cifar10(Path::new(&data.dir), &norm)?
        }
        DataFormat::Idx => {
            let norm = data.normalize(1)?;
            let train = load_idx(
                Path::new(&data.train_images),
                Path::new(&data.train_labels),
                Split::Train,
                &norm,
            )?;
            let test = load_idx(
                Path::new(&data.test_images),
                Path::new(&data.test_labels),
                Split::Test,
                &norm,
            )?;
            (train, test)
        }
        DataFormat::Synth => {
            let spec = synth::SynthSpec {
                num_classes: data.synth_classes,
                train_per_class: data.synth_train_per_class,
                test_per_class: data.synth_test_per_class,
                shape: data.synth_shape,
                noise: data.synth_noise,
                class_separation: data.synth_separation,
                class_blend: data.synth_blend,
                jitter: data.synth_jitter,
                modes_per_class: data.synth_modes,
                seed: data.synth_seed,
            };
            let norm = data.normalize(data.synth_shape.0)?;
            synth::datasets(&spec, &norm)?
        }
    };
    train.truncate(data.train_limit);
    test.truncate(data.test_limit);
    Ok((train, test))
}

fn parse_bool(key: &str, v: &str) -> Result<bool> {
    match v {
        "on" | "true" => Ok(true),
        "off" | "false" => Ok(false),
        other => Err(Error::Config {
            msg: format!("{key}: expected on/off, got '{other}'"),
        }),
    }
}

fn parse_num<T: std::str::FromStr>(key: &str, v: &str) -> Result<T> {
    v.parse().map_err(|_| Error::Config {
        msg: format!("{key}: cannot parse '{v}'"),
    })
}

fn parse_list<T: std::str::FromStr>(key: &str, v: &str) -> Result<Vec<T>> {
    v.split(',')
        .map(|p| parse_num(key, p.trim()))
        .collect()
}

fn parse_shape3(key: &str, v: &str) -> Result<(usize, usize, usize)> {
    let parts: Vec<usize> = parse_list(key, v)?;
    if parts.len() != 3 {
        return Err(Error::Config {
            msg: format!("{key}: expected c,h,w"),
        });
    }
    Ok((parts[0], parts[1], parts[2]))
}

fn bool_text(v: bool) -> &'static str {
    if v {
        "on"
    } else {
        "off"
    }
}

fn list_text<T: std::fmt::Display>(v: &[T]) -> String {
    v.iter()
        .map(|x| x.to_string())
        .collect::<Vec<_>>()
        .join(",")
}

/// Parse `key = value` lines; `#` starts a comment.
pub fn parse_kv(text: &str) -> Result<BTreeMap<String, String>> {
    let mut map = BTreeMap::new();
    for (lineno, raw) in text.lines().enumerate() {
        let line = match raw.find('#') {
            Some(i) => &raw[..i],
            None => raw,
        }
        .trim();
        if line.is_empty() {
            continue;
        }
        let Some((k, v)) = line.split_once('=') else {
            return Err(Error::Config {
                msg: format!("line {}: expected 'key = value', got '{line}'", lineno + 1),
            });
        };
        map.insert(k.trim().to_string(), v.trim().to_string());
    }
    Ok(map)
}

fn apply_key(cfg: &mut TrainConfig, key: &str, v: &str) -> Result<()> {
    match key {
        "seed" => cfg.seed = parse_num(key, v)?,
        "epochs" => cfg.epochs = parse_num(key, v)?,
        "batch_size" => cfg.batch_size = parse_num(key, v)?,
        "lr0" => cfg.lr0 = parse_num(key, v)?,
        "lambda" => cfg.lambda = parse_num(key, v)?,
        "mu_fre" => cfg.mu_fre = parse_num(key, v)?,
        "weight_decay" => cfg.weight_decay = parse_num(key, v)?,
        "strategy" => cfg.strategy = Strategy::parse(v)?,
        "projection" => cfg.projection = parse_bool(key, v)?,
        "clamp_latent" => cfg.clamp_latent = parse_bool(key, v)?,
        "latent" => cfg.latent = parse_bool(key, v)?,
        "checkpoint_every" => cfg.checkpoint_every = parse_num(key, v)?,
        "model.arch" => cfg.model.arch = Arch::parse(v)?,
        "model.stage_widths" => cfg.model.stage_widths = parse_list(key, v)?,
        "model.blocks_per_stage" => cfg.model.blocks_per_stage = parse_num(key, v)?,
        "model.num_classes" => cfg.model.num_classes = parse_num(key, v)?,
        "model.projection_dim" => cfg.model.projection_dim = parse_num(key, v)?,
        "model.input_shape" => cfg.model.input_shape = parse_shape3(key, v)?,
        "data.format" => cfg.data.format = DataFormat::parse(v)?,
        "data.dir" => cfg.data.dir = v.to_string(),
        "data.train_images" => cfg.data.train_images = v.to_string(),
        "data.train_labels" => cfg.data.train_labels = v.to_string(),
        "data.test_images" => cfg.data.test_images = v.to_string(),
        "data.test_labels" => cfg.data.test_labels = v.to_string(),
        "data.mean" => cfg.data.mean = if v.is_empty() { Vec::new() } else { parse_list(key, v)? },
        "data.std" => cfg.data.std = if v.is_empty() { Vec::new() } else { parse_list(key, v)? },
        "data.train_limit" => cfg.data.train_limit = parse_num(key, v)?,
        "data.test_limit" => cfg.data.test_limit = parse_num(key, v)?,
        "data.synth_classes" => cfg.data.synth_classes = parse_num(key, v)?,
        "data.synth_train_per_class" => cfg.data.synth_train_per_class = parse_num(key, v)?,
        "data.synth_test_per_class" => cfg.data.synth_test_per_class = parse_num(key, v)?,
        "data.synth_noise" => cfg.data.synth_noise = parse_num(key, v)?,
        "data.synth_separation" => cfg.data.synth_separation = parse_num(key, v)?,
        "data.synth_blend" => cfg.data.synth_blend = parse_num(key, v)?,
        "data.synth_jitter" => cfg.data.synth_jitter = parse_num(key, v)?,
        "data.synth_modes" => cfg.data.synth_modes = parse_num(key, v)?,
        "data.synth_seed" => cfg.data.synth_seed = parse_num(key, v)?,
        "data.synth_shape" => cfg.data.synth_shape = parse_shape3(key, v)?,
        "augment.pad" => cfg.augment_pad = parse_num(key, v)?,
        "augment.hflip" => cfg.augment_hflip = parse_bool(key, v)?,
        other => {
            return Err(Error::Config {
                msg: format!("unknown config key '{other}'"),
            })
        }
    }
    Ok(())
}

/// Build a config from text plus `key=value` overrides (applied last).
pub fn resolve(text: &str, overrides: &[(String, String)]) -> Result<TrainConfig> {
    let mut cfg = TrainConfig::default();
    for (k, v) in parse_kv(text)? {
        apply_key(&mut cfg, &k, &v)?;
    }
    for (k, v) in overrides {
        apply_key(&mut cfg, k, v)?;
    }
    Ok(cfg)
}

/// Canonical serialization; `resolve(to_text(cfg), [])` reproduces `cfg`.
pub fn to_text(cfg: &TrainConfig) -> String {
    let (ic, ih, iw) = cfg.model.input_shape;
    let (sc, sh, sw) = cfg.data.synth_shape;
    format!(
        "seed = {}\n\
         epochs = {}\n\
         batch_size = {}\n\
         lr0 = {}\n\
         lambda = {}\n\
         mu_fre = {}\n\
         weight_decay = {}\n\
         strategy = {}\n\
         projection = {}\n\
         clamp_latent = {}\n\
         latent = {}\n\
         checkpoint_every = {}\n\
         model.arch = {}\n\
         model.stage_widths = {}\n\
         model.blocks_per_stage = {}\n\
         model.num_classes = {}\n\
         model.projection_dim = {}\n\
         model.input_shape = {ic},{ih},{iw}\n\
         data.format = {}\n\
         data.dir = {}\n\
         data.train_images = {}\n\
         data.train_labels = {}\n\
         data.test_images = {}\n\
         data.test_labels = {}\n\
         data.mean = {}\n\
         data.std = {}\n\
         data.train_limit = {}\n\
         data.test_limit = {}\n\
         data.synth_classes = {}\n\
         data.synth_train_per_class = {}\n\
         data.synth_test_per_class = {}\n\
         data.synth_noise = {}\n\
         data.synth_separation = {}\n\
         data.synth_blend = {}\n\
         data.synth_jitter = {}\n\
         data.synth_modes = {}\n\
         data.synth_seed = {}\n\
         data.synth_shape = {sc},{sh},{sw}\n\
         augment.pad = {}\n\
         augment.hflip = {}\n",
        cfg.seed,
        cfg.epochs,
        cfg.batch_size,
        cfg.lr0,
        cfg.lambda,
        cfg.mu_fre,
        cfg.weight_decay,
        cfg.strategy.name(),
        bool_text(cfg.projection),
        bool_text(cfg.clamp_latent),
        bool_text(cfg.latent),
        cfg.checkpoint_every,
        cfg.model.arch.name(),
        list_text(&cfg.model.stage_widths),
        cfg.model.blocks_per_stage,
        cfg.model.num_classes,
        cfg.model.projection_dim,
        cfg.data.format.name(),
        cfg.data.dir,
        cfg.data.train_images,
        cfg.data.train_labels,
        cfg.data.test_images,
        cfg.data.test_labels,
        list_text(&cfg.data.mean),
        list_text(&cfg.data.std),
        cfg.data.train_limit,
        cfg.data.test_limit,
        cfg.data.synth_classes,
        cfg.data.synth_train_per_class,
        cfg.data.synth_test_per_class,
        cfg.data.synth_noise,
        cfg.data.synth_separation,
        cfg.data.synth_blend,
        cfg.data.synth_jitter,
        cfg.data.synth_modes,
        cfg.data.synth_seed,
        cfg.augment_pad,
        bool_text(cfg.augment_hflip),
    )
}

/// FNV-1a over a text; used to stamp the resolved config into metrics files.
pub fn fnv1a(text: &str) -> u64 {
    let mut h = 0xcbf2_9ce4_8422_2325u64;
    for b in text.bytes() {
        h ^= b as u64;
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    h
}
