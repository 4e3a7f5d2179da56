//! Seeded synthetic image datasets.
//!
//! Classes are smooth random prototype images; samples add pixel noise, a
//! small cyclic jitter, and optionally draw from several prototype modes per
//! class. The generator can emit the exact CIFAR-10 binary and IDX file
//! layouts, so the production loaders are exercised end to end without
//! shipping datasets.

use std::fs;
use std::path::Path;

use crate::data::{Dataset, Normalize, Split};
use crate::error::{Error, Result};
use crate::rng::Rng;
use crate::tensor::Tensor;

#[derive(Debug, Clone)]
pub struct SynthSpec {
    pub num_classes: usize,
    pub train_per_class: usize,
    pub test_per_class: usize,
    /// (C, H, W)
    pub shape: (usize, usize, usize),
    /// Pixel-domain noise standard deviation (0..255 scale).
    pub noise: f64,
    /// Maximum cyclic shift applied per sample, in pixels.
    pub jitter: usize,
    /// Prototype modes per class; higher = more intra-class variation.
    pub modes_per_class: usize,
    /// Fraction of the prototype that is class-specific; the rest is a
    /// shared base pattern. Lower values make classes harder to separate.
    pub class_separation: f64,
    /// Upper bound of the per-sample blend toward a random other class's
    /// prototype. Values above 0.5 plant effectively mislabeled samples,
    /// capping the reachable accuracy below saturation.
    pub class_blend: f64,
    pub seed: u64,
}

impl Default for SynthSpec {
    fn default() -> Self {
        SynthSpec {
            num_classes: 10,
            train_per_class: 100,
            test_per_class: 20,
            shape: (3, 32, 32),
            noise: 64.0,
            jitter: 2,
            modes_per_class: 2,
            class_separation: 1.0,
            class_blend: 0.0,
            seed: 1234,
        }
    }
}

/// Raw u8 pixel set, [N, C, H, W] row-major.
#[derive(Debug, Clone)]
pub struct RawSet {
    pub images: Vec<u8>,
    pub labels: Vec<u8>,
    pub shape: (usize, usize, usize),
}

impl RawSet {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }
}

pub struct SynthSets {
    pub train: RawSet,
    pub test: RawSet,
}

/// Bilinear upsample of a coarse grid to the target size.
fn upsample(grid: &[f64], g: usize, h: usize, w: usize) -> Vec<f64> {
    let mut out = vec![0.0; h * w];
    for y in 0..h {
        for x in 0..w {
            let fy = y as f64 / h as f64 * (g - 1) as f64;
            let fx = x as f64 / w as f64 * (g - 1) as f64;
            let (y0, x0) = (fy as usize, fx as usize);
            let (y1, x1) = ((y0 + 1).min(g - 1), (x0 + 1).min(g - 1));
            let (ty, tx) = (fy - y0 as f64, fx - x0 as f64);
            let v = grid[y0 * g + x0] * (1.0 - ty) * (1.0 - tx)
                + grid[y0 * g + x1] * (1.0 - ty) * tx
                + grid[y1 * g + x0] * ty * (1.0 - tx)
                + grid[y1 * g + x1] * ty * tx;
            out[y * w + x] = v;
        }
    }
    out
}

fn make_prototypes(spec: &SynthSpec, rng: &mut Rng) -> Vec<Vec<f64>> {
    let (c, h, w) = spec.shape;
    let g = 4;
    let sep = spec.class_separation;
    // one shared base field per (mode, channel); classes deviate from it by
    // their own field scaled by the separation knob
    let base: Vec<Vec<f64>> = (0..spec.modes_per_class * c)
        .map(|_| (0..g * g).map(|_| rng.normal()).collect())
        .collect();
    let mut protos = Vec::new();
    for _ in 0..spec.num_classes {
        let mut proto = Vec::with_capacity(spec.modes_per_class * c * h * w);
        for mode in 0..spec.modes_per_class {
            for ci in 0..c {
                let shared = &base[mode * c + ci];
                let own: Vec<f64> = (0..g * g).map(|_| rng.normal()).collect();
                let grid: Vec<f64> = shared
                    .iter()
                    .zip(&own)
                    .map(|(&b, &o)| (1.0 - sep) * b + sep * o)
                    .collect();
                let plane = upsample(&grid, g, h, w);
                proto.extend(plane.iter().map(|v| 128.0 + 60.0 * v));
            }
        }
        protos.push(proto);
    }
    protos
}

fn sample_set(
    spec: &SynthSpec,
    rng: &mut Rng,
    protos: &[Vec<f64>],
    per_class: usize,
) -> RawSet {
    let (c, h, w) = spec.shape;
    let n = spec.num_classes * per_class;
    let mut images = Vec::with_capacity(n * c * h * w);
    let mut labels = Vec::with_capacity(n);
    for class in 0..spec.num_classes {
        for _ in 0..per_class {
            let mode = rng.below(spec.modes_per_class);
            let proto = &protos[class];
            let (blend, other) = if spec.class_blend > 0.0 {
                (
                    rng.next_f64() * spec.class_blend,
                    &protos[rng.below(spec.num_classes)],
                )
            } else {
                (0.0, proto)
            };
            let (dy, dx) = if spec.jitter > 0 {
                (
                    rng.below(2 * spec.jitter + 1) as isize - spec.jitter as isize,
                    rng.below(2 * spec.jitter + 1) as isize - spec.jitter as isize,
                )
            } else {
                (0, 0)
            };
            for ci in 0..c {
                for y in 0..h {
                    for x in 0..w {
                        let sy = (y as isize + dy).rem_euclid(h as isize) as usize;
                        let sx = (x as isize + dx).rem_euclid(w as isize) as usize;
                        let at = ((mode * c + ci) * h + sy) * w + sx;
                        let base = (1.0 - blend) * proto[at] + blend * other[at];
                        let v = base + spec.noise * rng.normal();
                        images.push(v.round().clamp(0.0, 255.0) as u8);
                    }
                }
            }
            labels.push(class as u8);
        }
    }
    RawSet {
        images,
        labels,
        shape: spec.shape,
    }
}

/// Generate train and test splits from one seed.
pub fn generate(spec: &SynthSpec) -> SynthSets {
    let mut rng = Rng::new(spec.seed);
    let protos = make_prototypes(spec, &mut rng);
    let train = sample_set(spec, &mut rng, &protos, spec.train_per_class);
    let test = sample_set(spec, &mut rng, &protos, spec.test_per_class);
    SynthSets { train, test }
}

/// Normalized in-memory datasets, bypassing the file formats.
pub fn datasets(spec: &SynthSpec, norm: &Normalize) -> Result<(Dataset, Dataset)> {
    let sets = generate(spec);
    Ok((
        raw_to_dataset(&sets.train, norm, Split::Train)?,
        raw_to_dataset(&sets.test, norm, Split::Test)?,
    ))
}

pub fn raw_to_dataset(raw: &RawSet, norm: &Normalize, split: Split) -> Result<Dataset> {
    let (c, h, w) = raw.shape;
    let n = raw.len();
    let mut data = Vec::with_capacity(raw.images.len());
    for ni in 0..n {
        for ci in 0..c {
            let (m, s) = (norm.mean[ci], norm.std[ci]);
            let base = (ni * c + ci) * h * w;
            for &p in &raw.images[base..base + h * w] {
                data.push((p as f32 / 255.0 - m) / s);
            }
        }
    }
    Ok(Dataset {
        images: Tensor::from_vec(&[n, c, h, w], data)?,
        labels: raw.labels.iter().map(|&b| b as usize).collect(),
        split,
    })
}

/// Write the splits as a CIFAR-10 binary directory (`data_batch_1.bin` and
/// `test_batch.bin`). Requires 3x32x32 images.
pub fn write_cifar_dir(spec: &SynthSpec, dir: &Path) -> Result<()> {
    if spec.shape != (3, 32, 32) {
        return Err(Error::invalid(
            "write_cifar_dir",
            format!("CIFAR layout requires (3,32,32) images, got {:?}", spec.shape),
        ));
    }
    let sets = generate(spec);
    fs::create_dir_all(dir).map_err(|e| Error::io(dir.display().to_string(), e))?;
    for (raw, name) in [(&sets.train, "data_batch_1.bin"), (&sets.test, "test_batch.bin")] {
        let mut bytes = Vec::with_capacity(raw.len() * 3073);
        for i in 0..raw.len() {
            bytes.push(raw.labels[i]);
            bytes.extend_from_slice(&raw.images[i * 3072..(i + 1) * 3072]);
        }
        let path = dir.join(name);
        fs::write(&path, bytes).map_err(|e| Error::io(path.display().to_string(), e))?;
    }
    Ok(())
}

/// Write one split as an IDX image/label file pair. Requires single-channel
/// images.
pub fn write_idx_pair(raw: &RawSet, images_path: &Path, labels_path: &Path) -> Result<()> {
    let (c, h, w) = raw.shape;
    if c != 1 {
        return Err(Error::invalid(
            "write_idx_pair",
            format!("IDX layout requires single-channel images, got {c}"),
        ));
    }
    let n = raw.len();
    let mut img = Vec::with_capacity(16 + n * h * w);
    img.extend_from_slice(&0x0000_0803u32.to_be_bytes());
    img.extend_from_slice(&(n as u32).to_be_bytes());
    img.extend_from_slice(&(h as u32).to_be_bytes());
    img.extend_from_slice(&(w as u32).to_be_bytes());
    img.extend_from_slice(&raw.images);
    fs::write(images_path, img).map_err(|e| Error::io(images_path.display().to_string(), e))?;

    let mut lab = Vec::with_capacity(8 + n);
    lab.extend_from_slice(&0x0000_0801u32.to_be_bytes());
    lab.extend_from_slice(&(n as u32).to_be_bytes());
    lab.extend_from_slice(&raw.labels);
    fs::write(labels_path, lab).map_err(|e| Error::io(labels_path.display().to_string(), e))?;
    Ok(())
}
