//! Binary checkpoints.
//!
//! Layout, little-endian:
//!
//! ```text
//! "BADK" | u32 version | u32 n | config text (n bytes) | u64 iteration
//! u32 count, then per parameter:
//!     u16 n | name | u8 trainable | u8 rank | u32 dims[rank] | f64 values
//! u64 adam step | f64 lr, beta1, beta2, eps, clip_norm
//! per parameter: f64 first moments, f64 second moments
//! u32 n | label cache (n bytes, empty when absent)
//! 32-byte SHA-256 of everything above
//! ```
//!
//! All training randomness is keyed by `(train.seed, iteration)`, so the
//! config and iteration count are the complete RNG state.

use std::path::Path;

use sha2::{Digest, Sha256};

use crate::config::Config;
use crate::error::{Error, Result};
use crate::model::Model;
use crate::numerics::param::ParamSet;
use crate::numerics::tensor::Tensor;
use crate::policy::LabelCache;
use crate::training::adam::AdamState;

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"BADK";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Clone, Debug)]
pub struct Checkpoint {
    pub config: Config,
    pub iteration: u64,
    pub params: ParamSet,
    pub adam: AdamState,
    pub labels: Option<LabelCache>,
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.bytes.len())
            .ok_or_else(|| Error::format("checkpoint truncated"))?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    fn u16(&mut self) -> Result<u16> {
        Ok(u16::from_le_bytes(
            self.take(2)?.try_into().expect("2 bytes"),
        ))
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(
            self.take(4)?.try_into().expect("4 bytes"),
        ))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(
            self.take(8)?.try_into().expect("8 bytes"),
        ))
    }

    fn f64s(&mut self, n: usize) -> Result<Vec<f64>> {
        let raw = self.take(
            n.checked_mul(8)
                .ok_or_else(|| Error::format("size overflow"))?,
        )?;
        Ok(raw
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
            .collect())
    }
}

fn put_f64s(out: &mut Vec<u8>, v: &[f64]) {
    for x in v {
        out.extend_from_slice(&x.to_le_bytes());
    }
}

impl Checkpoint {
    pub fn new(
        config: Config,
        iteration: u64,
        model: &Model,
        adam: AdamState,
        labels: Option<LabelCache>,
    ) -> Self {
        Self {
            config,
            iteration,
            params: model.params.clone(),
            adam,
            labels,
        }
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(CHECKPOINT_MAGIC);
        out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
        let text = self.config.to_text();
        out.extend_from_slice(&(text.len() as u32).to_le_bytes());
        out.extend_from_slice(text.as_bytes());
        out.extend_from_slice(&self.iteration.to_le_bytes());
        out.extend_from_slice(&(self.params.len() as u32).to_le_bytes());
        for (_, p) in self.params.iter() {
            out.extend_from_slice(&(p.name.len() as u16).to_le_bytes());
            out.extend_from_slice(p.name.as_bytes());
            out.push(u8::from(p.trainable));
            out.push(p.value.shape().len() as u8);
            for &d in p.value.shape() {
                out.extend_from_slice(&(d as u32).to_le_bytes());
            }
            put_f64s(&mut out, p.value.data());
        }
        let a = &self.adam;
        out.extend_from_slice(&a.step.to_le_bytes());
        put_f64s(&mut out, &[a.lr, a.beta1, a.beta2, a.eps, a.clip_norm]);
        for (m, v) in a.m.iter().zip(&a.v) {
            put_f64s(&mut out, m);
            put_f64s(&mut out, v);
        }
        let labels = self
            .labels
            .as_ref()
            .map(LabelCache::to_bytes)
            .unwrap_or_default();
        out.extend_from_slice(&(labels.len() as u32).to_le_bytes());
        out.extend_from_slice(&labels);
        let digest = Sha256::digest(&out);
        out.extend_from_slice(&digest);
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < 8 + 32 {
            return Err(Error::format("checkpoint too short"));
        }
        if &bytes[..4] != CHECKPOINT_MAGIC {
            return Err(Error::format("not a checkpoint (bad magic)"));
        }
        let version = u32::from_le_bytes(bytes[4..8].try_into().expect("4 bytes"));
        if version != CHECKPOINT_VERSION {
            return Err(Error::Version(format!(
                "checkpoint version {version}, expected {CHECKPOINT_VERSION}"
            )));
        }
        let (body, digest) = bytes.split_at(bytes.len() - 32);
        if Sha256::digest(body).as_slice() != digest {
            return Err(Error::Integrity("checkpoint hash mismatch".into()));
        }
        let mut r = Reader {
            bytes: body,
            pos: 8,
        };
        let n = r.u32()? as usize;
        let text = std::str::from_utf8(r.take(n)?)
            .map_err(|_| Error::format("config text is not UTF-8"))?;
        let config = Config::parse(text)?;
        let iteration = r.u64()?;
        let count = r.u32()? as usize;
        let mut params = ParamSet::new(config.model.init_seed);
        let mut sizes = Vec::with_capacity(count);
        for _ in 0..count {
            let n = r.u16()? as usize;
            let name = std::str::from_utf8(r.take(n)?)
                .map_err(|_| Error::format("parameter name is not UTF-8"))?
                .to_string();
            let trainable = match r.u8()? {
                0 => false,
                1 => true,
                b => return Err(Error::format(format!("bad trainable flag {b}"))),
            };
            let rank = r.u8()? as usize;
            let shape = (0..rank)
                .map(|_| r.u32().map(|d| d as usize))
                .collect::<Result<Vec<_>>>()?;
            let len = shape.iter().try_fold(1usize, |a, &d| a.checked_mul(d));
            let len = len.ok_or_else(|| Error::format("parameter size overflow"))?;
            let value = Tensor::new(&shape, r.f64s(len)?)?;
            params.insert(&name, value, trainable)?;
            sizes.push(len);
        }
        let step = r.u64()?;
        let h = r.f64s(5)?;
        let mut m = Vec::with_capacity(count);
        let mut v = Vec::with_capacity(count);
        for &len in &sizes {
            m.push(r.f64s(len)?);
            v.push(r.f64s(len)?);
        }
        let adam = AdamState {
            m,
            v,
            step,
            lr: h[0],
            beta1: h[1],
            beta2: h[2],
            eps: h[3],
            clip_norm: h[4],
        };
        let n = r.u32()? as usize;
        let raw = r.take(n)?;
        let labels = if raw.is_empty() {
            None
        } else {
            Some(LabelCache::from_bytes(raw)?)
        };
        if r.pos != body.len() {
            return Err(Error::format("trailing bytes in checkpoint"));
        }
        Ok(Self {
            config,
            iteration,
            params,
            adam,
            labels,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_bytes())?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_bytes(&std::fs::read(path)?)
    }

    /// Rebuilds the model from the stored config and loads the stored
    /// parameters into it; names and shapes must match exactly.
    pub fn model(&self) -> Result<Model> {
        let mut model = Model::new(self.config.model.clone())?;
        if model.params.len() != self.params.len() {
            return Err(Error::format(format!(
                "checkpoint has {} tensors, model has {}",
                self.params.len(),
                model.params.len()
            )));
        }
        for (id, p) in self.params.iter() {
            let dst = model.params.get_mut(id);
            if dst.name != p.name || dst.value.shape() != p.value.shape() {
                return Err(Error::format(format!(
                    "checkpoint tensor {} {:?} does not match model tensor {} {:?}",
                    p.name,
                    p.value.shape(),
                    dst.name,
                    dst.value.shape()
                )));
            }
            dst.value = p.value.clone();
            dst.trainable = p.trainable;
        }
        Ok(model)
    }
}
