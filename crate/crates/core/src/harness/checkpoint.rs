//! `AVCC1` checkpoints.
//!
//! Little-endian layout: magic, `u32` version, `u64` epoch, the training
//! stream state (32-byte seed, `u64` stream, `u128` word position), the
//! run config as length-prefixed text, then the records sorted by name.
//! A record is a length-prefixed name, a kind tag, `u32` rank, `u64` dims
//! and `f32` data. The optimizer section follows: `u64` step count, then
//! first and second moments for every learnable record in record order.
//!
//! Values are stored as `f32`, so `f64 → f32 → f64 → f32` is the identity
//! and load→save reproduces the file byte for byte.

use std::path::Path;

use rand_chacha::ChaCha8Rng;
use rand::SeedableRng;

use crate::error::{Error, Result};
use crate::nn::{ParamKind, ParamStore};
use crate::rng::Rng;
use crate::tensor::Tensor;

use super::optim::Adam;

pub const MAGIC: &[u8; 5] = b"AVCC1";
pub const VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct RngState {
    pub seed: [u8; 32],
    pub stream: u64,
    pub word_pos: u128,
}

impl RngState {
    pub fn capture(rng: &Rng) -> Self {
        RngState {
            seed: rng.get_seed(),
            stream: rng.get_stream(),
            word_pos: rng.get_word_pos(),
        }
    }

    pub fn restore(&self) -> Rng {
        let mut rng = ChaCha8Rng::from_seed(self.seed);
        rng.set_stream(self.stream);
        rng.set_word_pos(self.word_pos);
        rng
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Record {
    pub name: String,
    pub kind: ParamKind,
    pub shape: Vec<usize>,
    pub data: Vec<f32>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub epoch: u64,
    pub rng: RngState,
    pub config: String,
    pub records: Vec<Record>,
    pub adam_t: u64,
    /// Moments of the learnable records, in record order.
    pub adam_m: Vec<Vec<f32>>,
    pub adam_v: Vec<Vec<f32>>,
}

fn to_f32(t: &Tensor) -> Vec<f32> {
    t.data().iter().map(|&v| v as f32).collect()
}

fn to_tensor(shape: &[usize], data: &[f32]) -> Result<Tensor> {
    Tensor::new(shape.to_vec(), data.iter().map(|&v| f64::from(v)).collect())
}

impl Checkpoint {
    pub fn capture(store: &ParamStore, adam: &Adam, epoch: u64, rng: &Rng, config: &str) -> Self {
        let mut order: Vec<_> = store.ids().collect();
        order.sort_by(|a, b| store.entry(*a).name.cmp(&store.entry(*b).name));
        let mut records = Vec::new();
        let (mut adam_m, mut adam_v) = (Vec::new(), Vec::new());
        for id in order {
            let e = store.entry(id);
            records.push(Record {
                name: e.name.clone(),
                kind: e.kind,
                shape: e.value.shape().to_vec(),
                data: to_f32(&e.value),
            });
            if e.kind == ParamKind::Param {
                adam_m.push(to_f32(adam.m[id.index()].as_ref().expect("moment for every parameter")));
                adam_v.push(to_f32(adam.v[id.index()].as_ref().expect("moment for every parameter")));
            }
        }
        Checkpoint {
            epoch,
            rng: RngState::capture(rng),
            config: config.to_string(),
            records,
            adam_t: adam.t,
            adam_m,
            adam_v,
        }
    }

    /// Writes every record into `store`, checking that names, kinds and
    /// shapes match the live model one to one; optionally restores `adam`.
    pub fn restore(&self, store: &mut ParamStore, adam: Option<&mut Adam>) -> Result<()> {
        if self.records.len() != store.len() {
            return Err(Error::Checkpoint(format!(
                "file has {} records, model has {}",
                self.records.len(),
                store.len()
            )));
        }
        let mut learnable = Vec::new();
        for r in &self.records {
            let id = store
                .find(&r.name)
                .ok_or_else(|| Error::Checkpoint(format!("record {} has no counterpart in the model", r.name)))?;
            if store.entry(id).kind != r.kind {
                return Err(Error::Checkpoint(format!("record {} has the wrong kind", r.name)));
            }
            store.set(&r.name, to_tensor(&r.shape, &r.data)?)?;
            if r.kind == ParamKind::Param {
                learnable.push((id, r.shape.clone()));
            }
        }
        if let Some(adam) = adam {
            if learnable.len() != self.adam_m.len() {
                return Err(Error::Checkpoint("optimizer state does not match the records".into()));
            }
            adam.t = self.adam_t;
            for (k, (id, shape)) in learnable.into_iter().enumerate() {
                adam.m[id.index()] = Some(to_tensor(&shape, &self.adam_m[k])?);
                adam.v[id.index()] = Some(to_tensor(&shape, &self.adam_v[k])?);
            }
        }
        Ok(())
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut b = Vec::new();
        b.extend_from_slice(MAGIC);
        b.extend_from_slice(&VERSION.to_le_bytes());
        b.extend_from_slice(&self.epoch.to_le_bytes());
        b.extend_from_slice(&self.rng.seed);
        b.extend_from_slice(&self.rng.stream.to_le_bytes());
        b.extend_from_slice(&self.rng.word_pos.to_le_bytes());
        put_bytes(&mut b, self.config.as_bytes());
        b.extend_from_slice(&(self.records.len() as u32).to_le_bytes());
        for r in &self.records {
            put_bytes(&mut b, r.name.as_bytes());
            b.push(r.kind.tag());
            b.extend_from_slice(&(r.shape.len() as u32).to_le_bytes());
            for &d in &r.shape {
                b.extend_from_slice(&(d as u64).to_le_bytes());
            }
            put_f32s(&mut b, &r.data);
        }
        b.extend_from_slice(&self.adam_t.to_le_bytes());
        for (m, v) in self.adam_m.iter().zip(&self.adam_v) {
            put_f32s(&mut b, m);
            put_f32s(&mut b, v);
        }
        b
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { b: bytes, at: 0 };
        if r.take(5)? != MAGIC {
            return Err(Error::Checkpoint("not an AVCC1 checkpoint".into()));
        }
        let version = r.u32()?;
        if version != VERSION {
            return Err(Error::Checkpoint(format!("unsupported version {version}")));
        }
        let epoch = r.u64()?;
        let seed: [u8; 32] = r.take(32)?.try_into().expect("32 bytes");
        let stream = r.u64()?;
        let word_pos = u128::from_le_bytes(r.take(16)?.try_into().expect("16 bytes"));
        let config = r.string()?;
        let n = r.u32()? as usize;
        let mut records = Vec::with_capacity(n.min(1 << 16));
        for _ in 0..n {
            let name = r.string()?;
            let kind = ParamKind::from_tag(r.take(1)?[0])
                .ok_or_else(|| Error::Checkpoint(format!("bad kind tag for {name}")))?;
            let rank = r.u32()? as usize;
            let shape = (0..rank).map(|_| r.u64().map(|d| d as usize)).collect::<Result<Vec<_>>>()?;
            let len = shape.iter().product();
            let data = r.f32s(len)?;
            records.push(Record { name, kind, shape, data });
        }
        let adam_t = r.u64()?;
        let (mut adam_m, mut adam_v) = (Vec::new(), Vec::new());
        for rec in records.iter().filter(|rec| rec.kind == ParamKind::Param) {
            adam_m.push(r.f32s(rec.data.len())?);
            adam_v.push(r.f32s(rec.data.len())?);
        }
        if r.at != bytes.len() {
            return Err(Error::Checkpoint(format!("{} trailing bytes", bytes.len() - r.at)));
        }
        Ok(Checkpoint {
            epoch,
            rng: RngState { seed, stream, word_pos },
            config,
            records,
            adam_t,
            adam_m,
            adam_v,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_bytes()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes).map_err(|e| match e {
            Error::Checkpoint(m) => Error::Checkpoint(format!("{}: {m}", path.display())),
            other => other,
        })
    }
}

fn put_bytes(b: &mut Vec<u8>, s: &[u8]) {
    b.extend_from_slice(&(s.len() as u32).to_le_bytes());
    b.extend_from_slice(s);
}

fn put_f32s(b: &mut Vec<u8>, v: &[f32]) {
    for x in v {
        b.extend_from_slice(&x.to_le_bytes());
    }
}

struct Reader<'a> {
    b: &'a [u8],
    at: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.at.checked_add(n).filter(|&e| e <= self.b.len());
        let end = end.ok_or_else(|| Error::Checkpoint("truncated file".into()))?;
        let s = &self.b[self.at..end];
        self.at = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }

    fn string(&mut self) -> Result<String> {
        let n = self.u32()? as usize;
        String::from_utf8(self.take(n)?.to_vec()).map_err(|_| Error::Checkpoint("name is not UTF-8".into()))
    }

    fn f32s(&mut self, n: usize) -> Result<Vec<f32>> {
        let raw = self.take(n.checked_mul(4).ok_or_else(|| Error::Checkpoint("record too large".into()))?)?;
        Ok(raw.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes"))).collect())
    }
}
