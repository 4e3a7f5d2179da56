//! Versioned binary container and model serialization.
//!
//! Layout: 4-byte magic, u32 format version, then length-prefixed named
//! records. Each record is `record_len: u64` followed by `name_len: u32`,
//! the UTF-8 name, a dtype tag (0 = f32, 1 = f64, 2 = u64), `rank: u32`,
//! `rank` u64 dims, and the raw little-endian elements. Record order is
//! canonical, so save -> load -> save is byte-identical.

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::layers::BatchNormStats;
use crate::models::{build, Arch, Model, ModelSpec};
use crate::rng::Rng;
use crate::tensor::Tensor;

pub const CHECKPOINT_MAGIC: [u8; 4] = *b"BNNF";
pub const PACKED_MAGIC: [u8; 4] = *b"BNNP";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq)]
pub enum RecordData {
    F32(Vec<f32>),
    F64(Vec<f64>),
    U64(Vec<u64>),
}

impl RecordData {
    fn dtype_tag(&self) -> u8 {
        match self {
            RecordData::F32(_) => 0,
            RecordData::F64(_) => 1,
            RecordData::U64(_) => 2,
        }
    }

}

#[derive(Debug, Clone, PartialEq)]
pub struct Record {
    pub name: String,
    pub dims: Vec<usize>,
    pub data: RecordData,
}

/// Generic named-tensor container.
#[derive(Debug, Clone)]
pub struct Container {
    pub magic: [u8; 4],
    pub version: u32,
    pub records: Vec<Record>,
}

impl Container {
    pub fn new(magic: [u8; 4]) -> Self {
        Container {
            magic,
            version: FORMAT_VERSION,
            records: Vec::new(),
        }
    }

    pub fn push_tensor(&mut self, name: &str, t: &Tensor<f32>) {
        self.records.push(Record {
            name: name.to_string(),
            dims: t.shape().to_vec(),
            data: RecordData::F32(t.data().to_vec()),
        });
    }

    pub fn push_f64(&mut self, name: &str, values: &[f64]) {
        self.records.push(Record {
            name: name.to_string(),
            dims: vec![values.len()],
            data: RecordData::F64(values.to_vec()),
        });
    }

    pub fn push_u64(&mut self, name: &str, values: &[u64]) {
        self.records.push(Record {
            name: name.to_string(),
            dims: vec![values.len()],
            data: RecordData::U64(values.to_vec()),
        });
    }

    pub fn get(&self, name: &str) -> Result<&Record> {
        self.records
            .iter()
            .find(|r| r.name == name)
            .ok_or_else(|| Error::format("container", format!("missing record '{name}'")))
    }

    pub fn has(&self, name: &str) -> bool {
        self.records.iter().any(|r| r.name == name)
    }

    pub fn tensor(&self, name: &str) -> Result<Tensor<f32>> {
        let r = self.get(name)?;
        let RecordData::F32(ref v) = r.data else {
            return Err(Error::format(
                "container",
                format!("record '{name}' is not f32"),
            ));
        };
        Tensor::from_vec(&r.dims, v.clone())
    }

    pub fn u64_scalar(&self, name: &str) -> Result<u64> {
        let r = self.get(name)?;
        let RecordData::U64(ref v) = r.data else {
            return Err(Error::format(
                "container",
                format!("record '{name}' is not u64"),
            ));
        };
        v.first().copied().ok_or_else(|| {
            Error::format("container", format!("record '{name}' is empty"))
        })
    }

    pub fn u64_vec(&self, name: &str) -> Result<Vec<u64>> {
        let r = self.get(name)?;
        let RecordData::U64(ref v) = r.data else {
            return Err(Error::format(
                "container",
                format!("record '{name}' is not u64"),
            ));
        };
        Ok(v.clone())
    }

    pub fn f64_scalar(&self, name: &str) -> Result<f64> {
        let r = self.get(name)?;
        let RecordData::F64(ref v) = r.data else {
            return Err(Error::format(
                "container",
                format!("record '{name}' is not f64"),
            ));
        };
        v.first().copied().ok_or_else(|| {
            Error::format("container", format!("record '{name}' is empty"))
        })
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(&self.magic);
        out.extend_from_slice(&self.version.to_le_bytes());
        for r in &self.records {
            let mut body = Vec::new();
            body.extend_from_slice(&(r.name.len() as u32).to_le_bytes());
            body.extend_from_slice(r.name.as_bytes());
            body.push(r.data.dtype_tag());
            body.extend_from_slice(&(r.dims.len() as u32).to_le_bytes());
            for &d in &r.dims {
                body.extend_from_slice(&(d as u64).to_le_bytes());
            }
            match &r.data {
                RecordData::F32(v) => {
                    for x in v {
                        body.extend_from_slice(&x.to_le_bytes());
                    }
                }
                RecordData::F64(v) => {
                    for x in v {
                        body.extend_from_slice(&x.to_le_bytes());
                    }
                }
                RecordData::U64(v) => {
                    for x in v {
                        body.extend_from_slice(&x.to_le_bytes());
                    }
                }
            }
            out.extend_from_slice(&(body.len() as u64).to_le_bytes());
            out.extend_from_slice(&body);
        }
        out
    }

    pub fn from_bytes(bytes: &[u8], expect_magic: [u8; 4], src: &str) -> Result<Self> {
        let fail = |msg: String| Error::format(src.to_string(), msg);
        if bytes.len() < 8 {
            return Err(fail("file shorter than header".into()));
        }
        let magic: [u8; 4] = bytes[0..4].try_into().unwrap();
        if magic != expect_magic {
            return Err(fail(format!(
                "bad magic {:?}, want {:?}",
                String::from_utf8_lossy(&magic),
                String::from_utf8_lossy(&expect_magic)
            )));
        }
        let version = u32::from_le_bytes(bytes[4..8].try_into().unwrap());
        if version != FORMAT_VERSION {
            return Err(fail(format!(
                "format version {version} not supported (expected {FORMAT_VERSION})"
            )));
        }
        let mut records = Vec::new();
        let mut at = 8;
        while at < bytes.len() {
            if at + 8 > bytes.len() {
                return Err(fail("truncated record length".into()));
            }
            let rec_len = u64::from_le_bytes(bytes[at..at + 8].try_into().unwrap()) as usize;
            at += 8;
            let body = bytes
                .get(at..at + rec_len)
                .ok_or_else(|| fail("truncated record body".into()))?;
            at += rec_len;

            let take = |b: &[u8], at: usize, n: usize| -> Result<Vec<u8>> {
                b.get(at..at + n)
                    .map(|s| s.to_vec())
                    .ok_or_else(|| fail("truncated record field".into()))
            };
            let name_len = u32::from_le_bytes(take(body, 0, 4)?.try_into().unwrap()) as usize;
            let mut p = 4;
            let name = String::from_utf8(take(body, p, name_len)?)
                .map_err(|_| fail("record name is not UTF-8".into()))?;
            p += name_len;
            let dtype = take(body, p, 1)?[0];
            p += 1;
            let rank = u32::from_le_bytes(take(body, p, 4)?.try_into().unwrap()) as usize;
            p += 4;
            let mut dims = Vec::with_capacity(rank);
            for _ in 0..rank {
                dims.push(u64::from_le_bytes(take(body, p, 8)?.try_into().unwrap()) as usize);
                p += 8;
            }
            let count: usize = dims.iter().product();
            let width = match dtype {
                0 => 4,
                1 | 2 => 8,
                other => return Err(fail(format!("unknown dtype tag {other}"))),
            };
            let raw = take(body, p, count * width)?;
            p += count * width;
            if p != body.len() {
                return Err(fail(format!("record '{name}' has trailing bytes")));
            }
            let data = match dtype {
                0 => RecordData::F32(
                    raw.chunks_exact(4)
                        .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
                        .collect(),
                ),
                1 => RecordData::F64(
                    raw.chunks_exact(8)
                        .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
                        .collect(),
                ),
                _ => RecordData::U64(
                    raw.chunks_exact(8)
                        .map(|c| u64::from_le_bytes(c.try_into().unwrap()))
                        .collect(),
                ),
            };
            records.push(Record { name, dims, data });
        }
        Ok(Container {
            magic,
            version,
            records,
        })
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_bytes()).map_err(|e| Error::io(path.display().to_string(), e))
    }

    pub fn read(path: &Path, expect_magic: [u8; 4]) -> Result<Self> {
        let bytes =
            fs::read(path).map_err(|e| Error::io(path.display().to_string(), e))?;
        Self::from_bytes(&bytes, expect_magic, &path.display().to_string())
    }
}

fn arch_code(arch: Arch) -> u64 {
    match arch {
        Arch::TinyCnn => 0,
        Arch::CompactResnet => 1,
    }
}

fn arch_from_code(code: u64) -> Result<Arch> {
    match code {
        0 => Ok(Arch::TinyCnn),
        1 => Ok(Arch::CompactResnet),
        other => Err(Error::format("container", format!("unknown arch code {other}"))),
    }
}

pub fn push_spec(c: &mut Container, spec: &ModelSpec) {
    c.push_u64("spec.arch", &[arch_code(spec.arch)]);
    c.push_u64(
        "spec.stage_widths",
        &spec.stage_widths.iter().map(|&w| w as u64).collect::<Vec<_>>(),
    );
    c.push_u64("spec.blocks_per_stage", &[spec.blocks_per_stage as u64]);
    c.push_u64("spec.num_classes", &[spec.num_classes as u64]);
    c.push_u64("spec.projection_dim", &[spec.projection_dim as u64]);
    let (ic, ih, iw) = spec.input_shape;
    c.push_u64("spec.input_shape", &[ic as u64, ih as u64, iw as u64]);
}

pub fn read_spec(c: &Container) -> Result<ModelSpec> {
    let input = c.u64_vec("spec.input_shape")?;
    if input.len() != 3 {
        return Err(Error::format("container", "spec.input_shape must have 3 dims"));
    }
    Ok(ModelSpec {
        arch: arch_from_code(c.u64_scalar("spec.arch")?)?,
        stage_widths: c
            .u64_vec("spec.stage_widths")?
            .iter()
            .map(|&w| w as usize)
            .collect(),
        blocks_per_stage: c.u64_scalar("spec.blocks_per_stage")? as usize,
        num_classes: c.u64_scalar("spec.num_classes")? as usize,
        projection_dim: c.u64_scalar("spec.projection_dim")? as usize,
        input_shape: (input[0] as usize, input[1] as usize, input[2] as usize),
    })
}

fn push_stats(c: &mut Container, prefix: &str, stats: &BatchNormStats<f32>) {
    c.push_tensor(&format!("{prefix}.mean"), &stats.mean);
    c.push_tensor(&format!("{prefix}.var"), &stats.var);
    c.push_u64(&format!("{prefix}.count"), &[stats.count]);
}

fn read_stats(c: &Container, prefix: &str, stats: &mut BatchNormStats<f32>) -> Result<()> {
    let mean = c.tensor(&format!("{prefix}.mean"))?;
    let var = c.tensor(&format!("{prefix}.var"))?;
    if mean.shape() != stats.mean.shape() || var.shape() != stats.var.shape() {
        return Err(Error::format(
            "container",
            format!("{prefix}: statistics shape mismatch"),
        ));
    }
    stats.mean = mean;
    stats.var = var;
    stats.count = c.u64_scalar(&format!("{prefix}.count"))?;
    Ok(())
}

/// Serialize spec, parameters, and every BN statistic set.
pub fn push_model(c: &mut Container, model: &Model<f32>) {
    push_spec(c, &model.spec);
    model.visit_params(&mut |name, t| c.push_tensor(name, t));
    push_stats(c, "stem.bn.stats", &model.stem_bn.stats);
    for (i, b) in model.blocks().enumerate() {
        push_stats(c, &format!("block{i:02}.bn.stats_b"), &b.bn.stats_b);
        push_stats(c, &format!("block{i:02}.bn.stats_w"), &b.bn.stats_w);
    }
}

/// Rebuild a model from records, validating every shape.
pub fn read_model(c: &Container) -> Result<Model<f32>> {
    let spec = read_spec(c)?;
    let mut model = build::<f32>(&spec, &mut Rng::new(0))?;
    let mut err = None;
    model.visit_params_mut(&mut |name, t| {
        if err.is_some() {
            return;
        }
        match c.tensor(name) {
            Ok(loaded) if loaded.shape() == t.shape() => *t = loaded,
            Ok(loaded) => {
                err = Some(Error::format(
                    "container",
                    format!(
                        "parameter '{name}': shape {:?} does not match model {:?}",
                        loaded.shape(),
                        t.shape()
                    ),
                ))
            }
            Err(e) => err = Some(e),
        }
    });
    if let Some(e) = err {
        return Err(e);
    }
    read_stats(c, "stem.bn.stats", &mut model.stem_bn.stats)?;
    let mut i = 0;
    for stage in &mut model.stages {
        for b in &mut stage.blocks {
            read_stats(c, &format!("block{i:02}.bn.stats_b"), &mut b.bn.stats_b)?;
            read_stats(c, &format!("block{i:02}.bn.stats_w"), &mut b.bn.stats_w)?;
            i += 1;
        }
    }
    Ok(model)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::models::ModelSpec;

    #[test]
    fn container_roundtrip_bytes_identical() {
        let mut c = Container::new(CHECKPOINT_MAGIC);
        c.push_tensor("a", &Tensor::from_vec(&[2, 2], vec![1.5f32, -2.0, 0.0, 3.25]).unwrap());
        c.push_u64("b", &[7, 9]);
        c.push_f64("c", &[0.125]);
        let bytes = c.to_bytes();
        let back = Container::from_bytes(&bytes, CHECKPOINT_MAGIC, "mem").unwrap();
        assert_eq!(back.to_bytes(), bytes);
        assert_eq!(back.u64_vec("b").unwrap(), vec![7, 9]);
        assert_eq!(back.f64_scalar("c").unwrap(), 0.125);
    }

    #[test]
    fn container_rejects_wrong_magic_and_version() {
        let c = Container::new(PACKED_MAGIC);
        let bytes = c.to_bytes();
        assert!(Container::from_bytes(&bytes, CHECKPOINT_MAGIC, "mem").is_err());

        let mut versioned = bytes.clone();
        versioned[4] = 99;
        assert!(Container::from_bytes(&versioned, PACKED_MAGIC, "mem").is_err());
    }

    #[test]
    fn container_rejects_truncation() {
        let mut c = Container::new(CHECKPOINT_MAGIC);
        c.push_u64("x", &[1, 2, 3]);
        let bytes = c.to_bytes();
        assert!(Container::from_bytes(&bytes[..bytes.len() - 2], CHECKPOINT_MAGIC, "mem").is_err());
    }

    #[test]
    fn model_roundtrip_preserves_everything() {
        let spec = ModelSpec {
            stage_widths: vec![4, 8],
            input_shape: (1, 8, 8),
            ..ModelSpec::tiny_cnn(3)
        };
        let mut model = build::<f32>(&spec, &mut Rng::new(77)).unwrap();
        // touch the stats so counts are nonzero
        let x = crate::rng::seeded_normal(&mut Rng::new(78), &[2, 1, 8, 8], 1.0).unwrap();
        crate::models::forward_train(&mut model, &x, true, None).unwrap();

        let mut c = Container::new(CHECKPOINT_MAGIC);
        push_model(&mut c, &model);
        let bytes = c.to_bytes();
        let back = Container::from_bytes(&bytes, CHECKPOINT_MAGIC, "mem").unwrap();
        let restored = read_model(&back).unwrap();

        let mut same = true;
        model.visit_params(&mut |name, t| {
            let mut other = None;
            restored.visit_params(&mut |n2, t2| {
                if n2 == name {
                    other = Some(t2.clone());
                }
            });
            same &= other.as_ref() == Some(t);
        });
        assert!(same);
        for (a, b) in model.blocks().zip(restored.blocks()) {
            assert_eq!(a.bn.stats_b, b.bn.stats_b);
            assert_eq!(a.bn.stats_w, b.bn.stats_w);
        }

        // save -> load -> save byte identity
        let mut c2 = Container::new(CHECKPOINT_MAGIC);
        push_model(&mut c2, &restored);
        assert_eq!(c2.to_bytes(), bytes);
    }
}
