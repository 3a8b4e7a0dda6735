//! Binary checkpoint format. All integers and floats are little-endian.
//!
//! ```text
//! magic      4 bytes  "RSTK"
//! version    u32
//! step       u64      training steps taken
//! config     u32 length + UTF-8 `key = value` text (Config::to_text)
//! tensors    u32 count, then per tensor:
//!              u32 name length + UTF-8 name
//!              u32 rank, rank x u64 dims
//!              prod(dims) x f32
//! history    u8 flag (0 absent, 1 present); when present:
//!              u64 window, u32 entry count, then per entry:
//!                u64 frame index, u8 source (0 compressed, 1 inferred, 2 init)
//!                u32 spatial length + f32s, u32 channel length + f32s
//! ```
//!
//! Live parameters are stored under their own names; the frozen target
//! branch is stored under `frozen.` followed by the encoder parameter name.

use std::path::Path;

use crate::config::Config;
use crate::encoder::Encoder;
use crate::error::{Error, Result};
use crate::model::Model;
use crate::numerics::{ParamStore, Tensor};
use crate::reasoning::HistoryBuffer;
use crate::state_codec::{StateTokenPair, TokenSource};

pub const MAGIC: &[u8; 4] = b"RSTK";
pub const VERSION: u32 = 1;
pub const FROZEN_PREFIX: &str = "frozen.";

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub config: Config,
    pub step: u64,
    pub tensors: Vec<(String, Tensor<f32>)>,
    pub history: Option<HistoryBuffer>,
}

impl Checkpoint {
    /// Snapshot `model`; the model's own config and ablation override those
    /// in `cfg`.
    pub fn from_model(model: &Model, cfg: &Config, step: u64) -> Self {
        let mut config = cfg.clone();
        config.model = model.cfg.clone();
        config.ablation = model.ablation;
        let mut tensors: Vec<(String, Tensor<f32>)> =
            model.store.iter().map(|(_, p)| (p.name.clone(), p.value.clone())).collect();
        let frozen = model.frozen.subset(Encoder::param_prefix());
        tensors.extend(frozen.iter().map(|(_, p)| (format!("{FROZEN_PREFIX}{}", p.name), p.value.clone())));
        Self { config, step, tensors, history: None }
    }

    pub fn with_history(mut self, history: HistoryBuffer) -> Self {
        self.history = Some(history);
        self
    }

    /// Rebuild the model described by this checkpoint.
    pub fn to_model(&self) -> Result<Model> {
        self.config.validate()?;
        let mut model = Model::new(&self.config.model, self.config.ablation, 0);
        let (frozen, live): (Vec<_>, Vec<_>) =
            self.tensors.iter().cloned().partition(|(n, _)| n.starts_with(FROZEN_PREFIX));
        model.store.load_named(live)?;
        let mut frozen_enc: ParamStore = model.store.subset(Encoder::param_prefix());
        let frozen = frozen
            .into_iter()
            .map(|(n, t)| (n[FROZEN_PREFIX.len()..].to_string(), t))
            .collect();
        frozen_enc.load_named(frozen).map_err(|e| match e {
            Error::Checkpoint(msg) => Error::Checkpoint(format!("frozen branch: {msg}")),
            other => other,
        })?;
        model.frozen = model.store.clone();
        model.frozen.copy_from(&frozen_enc);
        Ok(model)
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        put_u32(&mut out, VERSION);
        out.extend_from_slice(&self.step.to_le_bytes());
        put_str(&mut out, &self.config.to_text());
        put_u32(&mut out, self.tensors.len() as u32);
        for (name, t) in &self.tensors {
            put_str(&mut out, name);
            put_u32(&mut out, t.rank() as u32);
            for &d in t.shape() {
                out.extend_from_slice(&(d as u64).to_le_bytes());
            }
            put_f32s(&mut out, t.data());
        }
        match &self.history {
            None => out.push(0),
            Some(h) => {
                out.push(1);
                out.extend_from_slice(&(h.window() as u64).to_le_bytes());
                put_u32(&mut out, h.len() as u32);
                for e in h.entries() {
                    out.extend_from_slice(&(e.frame_index as u64).to_le_bytes());
                    out.push(source_code(e.source));
                    put_u32(&mut out, e.spatial.len() as u32);
                    put_f32s(&mut out, &e.spatial);
                    put_u32(&mut out, e.channel.len() as u32);
                    put_f32s(&mut out, &e.channel);
                }
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { bytes, pos: 0 };
        if r.take(4)? != MAGIC {
            return Err(Error::Checkpoint("bad magic, not a checkpoint file".into()));
        }
        let version = r.u32()?;
        if version != VERSION {
            return Err(Error::Checkpoint(format!("unsupported version {version}, expected {VERSION}")));
        }
        let step = r.u64()?;
        let config = Config::parse(&r.string()?)?;
        let count = r.u32()? as usize;
        let mut tensors = Vec::with_capacity(count);
        for _ in 0..count {
            let name = r.string()?;
            let rank = r.u32()? as usize;
            let shape = (0..rank).map(|_| r.u64().map(|d| d as usize)).collect::<Result<Vec<_>>>()?;
            let numel = shape.iter().try_fold(1usize, |a, &d| a.checked_mul(d));
            let numel = numel.ok_or_else(|| Error::Checkpoint(format!("tensor {name}: shape overflow")))?;
            let data = r.f32s(numel)?;
            tensors.push((name, Tensor::new(shape, data)?));
        }
        let history = match r.take(1)?[0] {
            0 => None,
            1 => {
                let mut h = HistoryBuffer::new(r.u64()? as usize)?;
                let n = r.u32()? as usize;
                for _ in 0..n {
                    let frame_index = r.u64()? as usize;
                    let source = source_from_code(r.take(1)?[0])?;
                    let ns = r.u32()? as usize;
                    let spatial = r.f32s(ns)?;
                    let nc = r.u32()? as usize;
                    let channel = r.f32s(nc)?;
                    h.push(StateTokenPair { spatial, channel, frame_index, source })?;
                }
                Some(h)
            }
            f => return Err(Error::Checkpoint(format!("bad history flag {f}"))),
        };
        if r.pos != bytes.len() {
            return Err(Error::Checkpoint(format!("{} trailing bytes", bytes.len() - r.pos)));
        }
        Ok(Self { config, step, tensors, history })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_bytes())?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_bytes(&std::fs::read(path)?)
    }
}

fn source_code(s: TokenSource) -> u8 {
    match s {
        TokenSource::Compressed => 0,
        TokenSource::Inferred => 1,
        TokenSource::Init => 2,
    }
}

fn source_from_code(c: u8) -> Result<TokenSource> {
    match c {
        0 => Ok(TokenSource::Compressed),
        1 => Ok(TokenSource::Inferred),
        2 => Ok(TokenSource::Init),
        _ => Err(Error::Checkpoint(format!("bad token source code {c}"))),
    }
}

fn put_u32(out: &mut Vec<u8>, v: u32) {
    out.extend_from_slice(&v.to_le_bytes());
}

fn put_str(out: &mut Vec<u8>, s: &str) {
    put_u32(out, s.len() as u32);
    out.extend_from_slice(s.as_bytes());
}

fn put_f32s(out: &mut Vec<u8>, v: &[f32]) {
    for x in v {
        out.extend_from_slice(&x.to_le_bytes());
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len());
        let end = end.ok_or_else(|| Error::Checkpoint(format!("truncated at byte {}", self.pos)))?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn string(&mut self) -> Result<String> {
        let n = self.u32()? as usize;
        String::from_utf8(self.take(n)?.to_vec()).map_err(|_| Error::Checkpoint("string is not UTF-8".into()))
    }

    fn f32s(&mut self, n: usize) -> Result<Vec<f32>> {
        let len = n.checked_mul(4).ok_or_else(|| Error::Checkpoint("payload overflow".into()))?;
        let raw = self.take(len)?;
        Ok(raw.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().unwrap())).collect())
    }
}
