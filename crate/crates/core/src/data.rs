//! Bit-exact dataset readers, augmentation, and deterministic batching.

use std::fs;
use std::io::Read;
use std::path::Path;

use crate::error::{Error, Result};
use crate::rng::Rng;
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Split {
    Train,
    Test,
}

/// Normalized images plus integer labels.
#[derive(Debug, Clone)]
pub struct Dataset {
    /// [N, C, H, W], standardized.
    pub images: Tensor<f32>,
    pub labels: Vec<usize>,
    pub split: Split,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn num_classes_seen(&self) -> usize {
        self.labels.iter().copied().max().map_or(0, |m| m + 1)
    }

    /// Deterministic truncation to the first `n` samples (0 keeps all).
    pub fn truncate(&mut self, n: usize) {
        if n == 0 || n >= self.len() {
            return;
        }
        let (c, h, w) = (
            self.images.dim(1),
            self.images.dim(2),
            self.images.dim(3),
        );
        let plane = c * h * w;
        let data = self.images.data()[..n * plane].to_vec();
        self.images = Tensor::from_vec(&[n, c, h, w], data).unwrap();
        self.labels.truncate(n);
    }

    /// Gather a batch by index list.
    pub fn gather(&self, idx: &[usize]) -> (Tensor<f32>, Vec<usize>) {
        let (c, h, w) = (
            self.images.dim(1),
            self.images.dim(2),
            self.images.dim(3),
        );
        let plane = c * h * w;
        let mut data = Vec::with_capacity(idx.len() * plane);
        let mut labels = Vec::with_capacity(idx.len());
        for &i in idx {
            data.extend_from_slice(&self.images.data()[i * plane..(i + 1) * plane]);
            labels.push(self.labels[i]);
        }
        (
            Tensor::from_vec(&[idx.len(), c, h, w], data).unwrap(),
            labels,
        )
    }

    /// FNV-1a over the exact bit patterns of images and labels; loaders are
    /// bit-exact, so this is stable across platforms for the same files.
    pub fn content_hash(&self) -> u64 {
        let mut h = 0xcbf2_9ce4_8422_2325u64;
        let mut eat = |byte: u8| {
            h ^= byte as u64;
            h = h.wrapping_mul(0x0000_0100_0000_01b3);
        };
        for v in self.images.data() {
            for b in v.to_le_bytes() {
                eat(b);
            }
        }
        for &l in &self.labels {
            for b in (l as u64).to_le_bytes() {
                eat(b);
            }
        }
        h
    }
}

/// Per-channel standardization constants applied at load time.
#[derive(Debug, Clone, PartialEq)]
pub struct Normalize {
    pub mean: Vec<f32>,
    pub std: Vec<f32>,
}

impl Normalize {
    /// CIFAR-10 train-split channel statistics.
    pub fn cifar10() -> Self {
        Normalize {
            mean: vec![0.4914, 0.4822, 0.4465],
            std: vec![0.2470, 0.2435, 0.2616],
        }
    }

    /// MNIST train-split statistics.
    pub fn mnist() -> Self {
        Normalize {
            mean: vec![0.1307],
            std: vec![0.3081],
        }
    }

    pub fn identity(channels: usize) -> Self {
        Normalize {
            mean: vec![0.0; channels],
            std: vec![1.0; channels],
        }
    }

    fn apply(&self, pixels: &[u8], n: usize, c: usize, plane: usize) -> Result<Vec<f32>> {
        if self.mean.len() != c || self.std.len() != c {
            return Err(Error::invalid(
                "normalize",
                format!("{c} channels but {} constants", self.mean.len()),
            ));
        }
        let mut out = Vec::with_capacity(pixels.len());
        for ni in 0..n {
            for ci in 0..c {
                let (m, s) = (self.mean[ci], self.std[ci]);
                let base = (ni * c + ci) * plane;
                for &p in &pixels[base..base + plane] {
                    out.push((p as f32 / 255.0 - m) / s);
                }
            }
        }
        Ok(out)
    }
}

fn read_file(path: &Path) -> Result<Vec<u8>> {
    let mut buf = Vec::new();
    fs::File::open(path)
        .and_then(|mut f| f.read_to_end(&mut buf))
        .map_err(|e| Error::io(path.display().to_string(), e))?;
    Ok(buf)
}

fn be_u32(bytes: &[u8], at: usize, path: &Path) -> Result<u32> {
    bytes
        .get(at..at + 4)
        .map(|b| u32::from_be_bytes([b[0], b[1], b[2], b[3]]))
        .ok_or_else(|| Error::format(path.display().to_string(), "truncated header"))
}

const IDX_IMAGES_MAGIC: u32 = 0x0000_0803;
const IDX_LABELS_MAGIC: u32 = 0x0000_0801;

/// Expected byte size of an IDX image file with the given geometry; the
/// published MNIST train file is 60000 x 28 x 28 = 47040016 bytes.
pub fn idx_image_file_size(n: usize, rows: usize, cols: usize) -> usize {
    16 + n * rows * cols
}

/// Load an IDX image/label file pair into a normalized dataset.
pub fn load_idx(
    images_path: &Path,
    labels_path: &Path,
    split: Split,
    norm: &Normalize,
) -> Result<Dataset> {
    let img = read_file(images_path)?;
    let magic = be_u32(&img, 0, images_path)?;
    if magic != IDX_IMAGES_MAGIC {
        return Err(Error::format(
            images_path.display().to_string(),
            format!("bad image magic 0x{magic:08x}, want 0x{IDX_IMAGES_MAGIC:08x}"),
        ));
    }
    let n = be_u32(&img, 4, images_path)? as usize;
    let rows = be_u32(&img, 8, images_path)? as usize;
    let cols = be_u32(&img, 12, images_path)? as usize;
    let want = idx_image_file_size(n, rows, cols);
    if img.len() != want {
        return Err(Error::format(
            images_path.display().to_string(),
            format!("truncated image file: {} bytes, header implies {want}", img.len()),
        ));
    }

    let lab = read_file(labels_path)?;
    let lmagic = be_u32(&lab, 0, labels_path)?;
    if lmagic != IDX_LABELS_MAGIC {
        return Err(Error::format(
            labels_path.display().to_string(),
            format!("bad label magic 0x{lmagic:08x}, want 0x{IDX_LABELS_MAGIC:08x}"),
        ));
    }
    let ln = be_u32(&lab, 4, labels_path)? as usize;
    if lab.len() != 8 + ln {
        return Err(Error::format(
            labels_path.display().to_string(),
            format!("truncated label file: {} bytes, header implies {}", lab.len(), 8 + ln),
        ));
    }
    if ln != n {
        return Err(Error::format(
            labels_path.display().to_string(),
            format!("{ln} labels but {n} images"),
        ));
    }
    if n == 0 {
        return Err(Error::format(
            images_path.display().to_string(),
            "empty dataset",
        ));
    }

    let data = norm.apply(&img[16..], n, 1, rows * cols)?;
    Ok(Dataset {
        images: Tensor::from_vec(&[n, 1, rows, cols], data)?,
        labels: lab[8..].iter().map(|&b| b as usize).collect(),
        split,
    })
}

const CIFAR_RECORD: usize = 1 + 3 * 32 * 32;

fn load_cifar_file(path: &Path, norm: &Normalize, split: Split) -> Result<Dataset> {
    let bytes = read_file(path)?;
    if bytes.is_empty() || bytes.len() % CIFAR_RECORD != 0 {
        return Err(Error::format(
            path.display().to_string(),
            format!(
                "{} bytes is not a whole number of {CIFAR_RECORD}-byte records",
                bytes.len()
            ),
        ));
    }
    let n = bytes.len() / CIFAR_RECORD;
    let mut labels = Vec::with_capacity(n);
    let mut pixels = Vec::with_capacity(n * 3072);
    for rec in bytes.chunks_exact(CIFAR_RECORD) {
        if rec[0] > 9 {
            return Err(Error::format(
                path.display().to_string(),
                format!("label byte {} out of range 0..=9", rec[0]),
            ));
        }
        labels.push(rec[0] as usize);
        pixels.extend_from_slice(&rec[1..]);
    }
    let data = norm.apply(&pixels, n, 3, 32 * 32)?;
    Ok(Dataset {
        images: Tensor::from_vec(&[n, 3, 32, 32], data)?,
        labels,
        split,
    })
}

/// Load a CIFAR-10 binary directory: `data_batch_*.bin` concatenated as the
/// train split, `test_batch.bin` as the test split.
pub fn load_cifar10(dir: &Path, norm: &Normalize) -> Result<(Dataset, Dataset)> {
    let mut batch_files: Vec<_> = fs::read_dir(dir)
        .map_err(|e| Error::io(dir.display().to_string(), e))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| {
            p.file_name()
                .and_then(|n| n.to_str())
                .is_some_and(|n| n.starts_with("data_batch_") && n.ends_with(".bin"))
        })
        .collect();
    batch_files.sort();
    if batch_files.is_empty() {
        return Err(Error::format(
            dir.display().to_string(),
            "no data_batch_*.bin files found",
        ));
    }
    let mut images = Vec::new();
    let mut labels = Vec::new();
    for path in &batch_files {
        let part = load_cifar_file(path, norm, Split::Train)?;
        images.extend_from_slice(part.images.data());
        labels.extend_from_slice(&part.labels);
    }
    let n = labels.len();
    let train = Dataset {
        images: Tensor::from_vec(&[n, 3, 32, 32], images)?,
        labels,
        split: Split::Train,
    };
    let test = load_cifar_file(&dir.join("test_batch.bin"), norm, Split::Test)?;
    Ok((train, test))
}

/// Re-serialize one sample to its CIFAR record bytes, undoing normalization.
/// Round-trips exactly for pixels produced by the loader.
pub fn cifar_record_bytes(ds: &Dataset, i: usize, norm: &Normalize) -> Vec<u8> {
    let plane = 32 * 32;
    let mut rec = Vec::with_capacity(CIFAR_RECORD);
    rec.push(ds.labels[i] as u8);
    for ci in 0..3 {
        let base = (i * 3 + ci) * plane;
        for &v in &ds.images.data()[base..base + plane] {
            let p = (v * norm.std[ci] + norm.mean[ci]) * 255.0;
            rec.push(p.round().clamp(0.0, 255.0) as u8);
        }
    }
    rec
}

#[derive(Debug, Clone, Copy)]
pub struct AugmentConfig {
    pub pad: usize,
    /// Output side length; defaults to the input side.
    pub crop: usize,
    pub hflip: bool,
}

impl AugmentConfig {
    pub fn for_input(h: usize, pad: usize, hflip: bool) -> Self {
        AugmentConfig {
            pad,
            crop: h,
            hflip,
        }
    }
}

/// Flip images along the width axis.
pub fn hflip_images(images: &Tensor<f32>) -> Tensor<f32> {
    let (n, c, h, w) = (
        images.dim(0),
        images.dim(1),
        images.dim(2),
        images.dim(3),
    );
    let mut out = Tensor::zeros(&[n, c, h, w]);
    for ni in 0..n {
        for ci in 0..c {
            for y in 0..h {
                let base = ((ni * c + ci) * h + y) * w;
                for x in 0..w {
                    out.data_mut()[base + x] = images.data()[base + (w - 1 - x)];
                }
            }
        }
    }
    out
}

/// Zero-pad, uniformly crop, and optionally horizontally flip each image.
/// Per image, the generator is consumed in a fixed order (flip, dy, dx), so
/// results are deterministic under a seed. Labels are untouched by
/// construction.
pub fn augment(images: &Tensor<f32>, cfg: &AugmentConfig, rng: &mut Rng) -> Result<Tensor<f32>> {
    let (n, c, h, w) = (
        images.dim(0),
        images.dim(1),
        images.dim(2),
        images.dim(3),
    );
    if cfg.crop > h + 2 * cfg.pad || cfg.crop > w + 2 * cfg.pad || cfg.crop == 0 {
        return Err(Error::invalid(
            "augment",
            format!("crop {} does not fit {h}x{w} padded by {}", cfg.crop, cfg.pad),
        ));
    }
    if cfg.pad == 0 && cfg.crop == h && cfg.crop == w && !cfg.hflip {
        return Ok(images.clone());
    }
    let (hp, wp) = (h + 2 * cfg.pad, w + 2 * cfg.pad);
    let cs = cfg.crop;
    let mut out = Tensor::zeros(&[n, c, cs, cs]);
    for ni in 0..n {
        let flip = cfg.hflip && rng.bernoulli(0.5);
        let dy = rng.below(hp - cs + 1);
        let dx = rng.below(wp - cs + 1);
        for ci in 0..c {
            for y in 0..cs {
                let sy = (dy + y) as isize - cfg.pad as isize;
                let obase = ((ni * c + ci) * cs + y) * cs;
                for x in 0..cs {
                    let sx_raw = dx + x;
                    let sx = if flip {
                        (wp - 1 - sx_raw) as isize - cfg.pad as isize
                    } else {
                        sx_raw as isize - cfg.pad as isize
                    };
                    let v = if sy < 0 || sx < 0 || sy >= h as isize || sx >= w as isize {
                        0.0
                    } else {
                        images.data()[((ni * c + ci) * h + sy as usize) * w + sx as usize]
                    };
                    out.data_mut()[obase + x] = v;
                }
            }
        }
    }
    Ok(out)
}

/// One epoch of deterministic batches: a seeded permutation when shuffling,
/// identity order otherwise; the final partial batch is kept.
pub fn batches<'a>(
    dataset: &'a Dataset,
    batch_size: usize,
    rng: &mut Rng,
    shuffle: bool,
) -> Result<Batches<'a>> {
    if batch_size == 0 {
        return Err(Error::invalid("batches", "batch_size must be >= 1"));
    }
    let order = if shuffle {
        rng.permutation(dataset.len())
    } else {
        (0..dataset.len()).collect()
    };
    Ok(Batches {
        dataset,
        order,
        batch_size,
        pos: 0,
    })
}

pub struct Batches<'a> {
    dataset: &'a Dataset,
    order: Vec<usize>,
    batch_size: usize,
    pos: usize,
}

impl Iterator for Batches<'_> {
    type Item = (Tensor<f32>, Vec<usize>);

    fn next(&mut self) -> Option<Self::Item> {
        if self.pos >= self.order.len() {
            return None;
        }
        let end = (self.pos + self.batch_size).min(self.order.len());
        let batch = self.dataset.gather(&self.order[self.pos..end]);
        self.pos = end;
        Some(batch)
    }
}
