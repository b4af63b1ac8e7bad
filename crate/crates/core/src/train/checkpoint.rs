//! Binary checkpoint format, all integers little-endian:
//!
//! ```text
//! "EGDC" | version u32 | entry count u32
//! per entry: name length u32 | name bytes (utf-8) | dtype u8 | rank u32 |
//!            extents u64 x rank | payload
//! ```
//!
//! dtype 0 is f32, 1 is f64, 2 is raw bytes. The model configuration travels
//! as a byte entry named `meta.model_config`; SGD velocities as
//! `optim.velocity.<param>`.

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::model::{EgdNet, ModelConfig};
use crate::tensor::{DType, Scalar};

use super::Sgd;

const MAGIC: &[u8; 4] = b"EGDC";
pub const CHECKPOINT_VERSION: u32 = 1;
const BYTES_TAG: u8 = 2;
pub const CONFIG_ENTRY: &str = "meta.model_config";
const VELOCITY_PREFIX: &str = "optim.velocity.";

#[derive(Debug, Clone, PartialEq)]
pub enum Payload {
    F32(Vec<f32>),
    F64(Vec<f64>),
    Bytes(Vec<u8>),
}

impl Payload {
    fn tag(&self) -> u8 {
        match self {
            Payload::F32(_) => DType::F32.tag(),
            Payload::F64(_) => DType::F64.tag(),
            Payload::Bytes(_) => BYTES_TAG,
        }
    }

    fn len(&self) -> usize {
        match self {
            Payload::F32(v) => v.len(),
            Payload::F64(v) => v.len(),
            Payload::Bytes(v) => v.len(),
        }
    }

    fn from_scalars<T: Scalar>(v: &[T]) -> Self {
        match T::DTYPE {
            DType::F32 => Payload::F32(v.iter().map(|x| x.to_f32().unwrap()).collect()),
            DType::F64 => Payload::F64(v.iter().map(|x| x.to_f64().unwrap()).collect()),
        }
    }

    /// Values converted to `T`; exact when the stored precision matches.
    fn to_scalars<T: Scalar>(&self) -> Option<Vec<T>> {
        match self {
            Payload::F32(v) => Some(v.iter().map(|&x| T::lit(x as f64)).collect()),
            Payload::F64(v) => Some(v.iter().map(|&x| T::lit(x)).collect()),
            Payload::Bytes(_) => None,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct CheckpointEntry {
    pub name: String,
    pub shape: Vec<usize>,
    pub payload: Payload,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct Checkpoint {
    pub entries: Vec<CheckpointEntry>,
}

impl Checkpoint {
    /// Model config, every stored tensor, and optimizer state if given.
    pub fn capture<T: Scalar>(model: &EgdNet<T>, sgd: Option<&Sgd<T>>) -> Self {
        let text = model.cfg.to_kv_text().into_bytes();
        let mut entries = vec![CheckpointEntry {
            name: CONFIG_ENTRY.into(),
            shape: vec![text.len()],
            payload: Payload::Bytes(text),
        }];
        for id in model.vs.ids() {
            let t = model.vs.get(id);
            entries.push(CheckpointEntry {
                name: model.vs.name(id).to_string(),
                shape: t.shape().to_vec(),
                payload: Payload::from_scalars(t.data()),
            });
        }
        if let Some(sgd) = sgd {
            for (name, v) in &sgd.velocity {
                let shape = model.vs.by_name(name).map(|t| t.shape().to_vec()).unwrap_or(vec![v.len()]);
                entries.push(CheckpointEntry {
                    name: format!("{VELOCITY_PREFIX}{name}"),
                    shape,
                    payload: Payload::from_scalars(v),
                });
            }
        }
        Checkpoint { entries }
    }

    pub fn get(&self, name: &str) -> Option<&CheckpointEntry> {
        self.entries.iter().find(|e| e.name == name)
    }

    pub fn model_config(&self) -> Result<ModelConfig> {
        let e = self
            .get(CONFIG_ENTRY)
            .ok_or_else(|| Error::Checkpoint(format!("missing `{CONFIG_ENTRY}` entry")))?;
        let Payload::Bytes(b) = &e.payload else {
            return Err(Error::Checkpoint(format!("`{CONFIG_ENTRY}` is not a byte entry")));
        };
        let text = std::str::from_utf8(b).map_err(|_| Error::Checkpoint("model config is not utf-8".into()))?;
        ModelConfig::from_kv_text(text)
    }

    /// Copies every tensor of `model` from the checkpoint. Missing names and
    /// shape mismatches are errors naming the tensor.
    pub fn restore<T: Scalar>(&self, model: &EgdNet<T>) -> Result<()> {
        for id in model.vs.ids() {
            let name = model.vs.name(id);
            let want = model.vs.get(id).shape().to_vec();
            let e = self
                .get(name)
                .ok_or_else(|| Error::Checkpoint(format!("tensor `{name}` missing from checkpoint")))?;
            if e.shape != want {
                return Err(Error::Checkpoint(format!(
                    "tensor `{name}` has shape {:?} in the checkpoint but {:?} in the model",
                    e.shape, want
                )));
            }
            let values = e
                .payload
                .to_scalars()
                .ok_or_else(|| Error::Checkpoint(format!("tensor `{name}` is not floating point")))?;
            model.vs.set(id, values)?;
        }
        Ok(())
    }

    /// Builds the model described by the embedded config and restores it.
    pub fn build_model<T: Scalar>(&self) -> Result<EgdNet<T>> {
        let model = EgdNet::new(self.model_config()?, 0)?;
        self.restore(&model)?;
        Ok(model)
    }

    /// Optimizer state, or a fresh optimizer when none was saved.
    pub fn restore_sgd<T: Scalar>(&self, momentum: f64, weight_decay: f64) -> Sgd<T> {
        let mut sgd = Sgd::new(momentum, weight_decay);
        for e in &self.entries {
            if let (Some(name), Some(v)) = (e.name.strip_prefix(VELOCITY_PREFIX), e.payload.to_scalars()) {
                sgd.velocity.insert(name.to_string(), v);
            }
        }
        sgd
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
        out.extend_from_slice(&(self.entries.len() as u32).to_le_bytes());
        for e in &self.entries {
            out.extend_from_slice(&(e.name.len() as u32).to_le_bytes());
            out.extend_from_slice(e.name.as_bytes());
            out.push(e.payload.tag());
            out.extend_from_slice(&(e.shape.len() as u32).to_le_bytes());
            for &d in &e.shape {
                out.extend_from_slice(&(d as u64).to_le_bytes());
            }
            match &e.payload {
                Payload::F32(v) => v.iter().for_each(|x| x.write_le(&mut out)),
                Payload::F64(v) => v.iter().for_each(|x| x.write_le(&mut out)),
                Payload::Bytes(v) => out.extend_from_slice(v),
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { bytes, pos: 0 };
        let what = "header";
        if r.take(4, what)? != MAGIC {
            return Err(Error::Checkpoint("bad magic, not an EGDC checkpoint".into()));
        }
        let version = r.u32(what)?;
        if version != CHECKPOINT_VERSION {
            return Err(Error::Checkpoint(format!(
                "unsupported version {version}, expected {CHECKPOINT_VERSION}"
            )));
        }
        let count = r.u32(what)? as usize;
        let mut entries = Vec::with_capacity(count.min(1 << 16));
        for i in 0..count {
            let label = format!("entry #{i}");
            let len = r.u32(&label)? as usize;
            let name = String::from_utf8(r.take(len, &label)?.to_vec())
                .map_err(|_| Error::Checkpoint(format!("{label}: name is not utf-8")))?;
            let at = format!("tensor `{name}`");
            let tag = r.take(1, &at)?[0];
            let rank = r.u32(&at)? as usize;
            let mut shape = Vec::with_capacity(rank.min(8));
            for _ in 0..rank {
                let d = u64::from_le_bytes(r.take(8, &at)?.try_into().unwrap());
                shape.push(usize::try_from(d).map_err(|_| Error::Checkpoint(format!("{at}: extent overflow")))?);
            }
            let n = shape
                .iter()
                .try_fold(1usize, |a, &d| a.checked_mul(d))
                .ok_or_else(|| Error::Checkpoint(format!("{at}: extent overflow")))?;
            let payload = match tag {
                0 => Payload::F32(r.take(4 * n, &at)?.chunks_exact(4).map(f32::read_le).collect()),
                1 => Payload::F64(r.take(8 * n, &at)?.chunks_exact(8).map(f64::read_le).collect()),
                BYTES_TAG => Payload::Bytes(r.take(n, &at)?.to_vec()),
                t => return Err(Error::Checkpoint(format!("{at}: unknown dtype tag {t}"))),
            };
            debug_assert_eq!(payload.len(), n);
            entries.push(CheckpointEntry { name, shape, payload });
        }
        if r.pos != bytes.len() {
            return Err(Error::Checkpoint(format!(
                "{} trailing bytes after the last tensor",
                bytes.len() - r.pos
            )));
        }
        Ok(Checkpoint { entries })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_bytes()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes).map_err(|e| match e {
            Error::Checkpoint(m) => Error::Checkpoint(format!("{}: {m}", path.display())),
            other => other,
        })
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len()).ok_or_else(|| {
            Error::Checkpoint(format!(
                "truncated while reading {what}: need {n} bytes at offset {}, file has {}",
                self.pos,
                self.bytes.len()
            ))
        })?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().unwrap()))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny() -> EgdNet<f32> {
        EgdNet::new(ModelConfig::tiny(32, 32), 4).unwrap()
    }

    #[test]
    fn round_trip_is_byte_identical() {
        let m = tiny();
        let mut sgd = Sgd::new(0.9, 1e-4);
        sgd.velocity.insert("decoder.head.bias".into(), vec![0.25]);
        let bytes = Checkpoint::capture(&m, Some(&sgd)).to_bytes();
        let ck = Checkpoint::from_bytes(&bytes).unwrap();
        assert_eq!(ck.to_bytes(), bytes);
        let m2: EgdNet<f32> = ck.build_model().unwrap();
        assert_eq!(Checkpoint::capture(&m2, Some(&ck.restore_sgd(0.9, 1e-4))).to_bytes(), bytes);
        assert_eq!(ck.model_config().unwrap(), m.cfg);
    }

    #[test]
    fn truncation_names_the_tensor() {
        let bytes = Checkpoint::capture(&tiny(), None).to_bytes();
        let err = Checkpoint::from_bytes(&bytes[..bytes.len() - 3]).unwrap_err().to_string();
        assert!(err.contains("truncated while reading tensor `"), "{err}");
        assert!(Checkpoint::from_bytes(b"EGDX\x01\0\0\0\0\0\0\0").is_err());
        let mut v2 = bytes.clone();
        v2[4] = 2;
        assert!(Checkpoint::from_bytes(&v2).unwrap_err().to_string().contains("version"));
    }

    #[test]
    fn width_mismatch_names_the_tensor() {
        let ck = Checkpoint::capture(&tiny(), None);
        let mut cfg = ModelConfig::tiny(32, 32);
        cfg.stem_width = 12;
        let other = EgdNet::<f32>::new(cfg, 0).unwrap();
        let err = ck.restore(&other).unwrap_err().to_string();
        assert!(err.contains("msfe.stem.conv.weight") && err.contains("shape"), "{err}");
    }
}
