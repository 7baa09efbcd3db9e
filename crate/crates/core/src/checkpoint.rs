//! Binary checkpoint format.
//!
//! ```text
//! "VSFM"  u32 version  u32 len  JSON header
//! u32 count  { u32 len  path  u8 kind  u8 rank  u32 dims[rank]  f32 data[] }*
//! u32 crc32 of every preceding byte
//! ```
//!
//! All integers and reals are little-endian. `kind` is 0 for trainable
//! parameters, 1 for buffers and 2 for optimizer slots.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::config::ModelConfig;
use crate::error::{Error, Result};
use crate::model::Model;
use crate::params::ParamStore;
use crate::tensor::Tensor;
use crate::train::{EpochMetrics, Optimizer, OptimizerKind, TrainConfig, TrainState};

pub const MAGIC: &[u8; 4] = b"VSFM";
pub const FORMAT_VERSION: u32 = 1;

const KIND_PARAM: u8 = 0;
const KIND_BUFFER: u8 = 1;
const KIND_OPTIM: u8 = 2;

#[derive(Serialize, Deserialize)]
struct Header {
    config: ModelConfig,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    train: Option<TrainHeader>,
}

#[derive(Serialize, Deserialize)]
struct TrainHeader {
    config: TrainConfig,
    next_epoch: usize,
    history: Vec<EpochMetrics>,
    optimizer: OptimizerKind,
    momentum: f64,
    weight_decay: f64,
    step: u64,
}

/// Model parameters and, for a run in progress, the training state.
#[derive(Clone, Debug)]
pub struct Checkpoint {
    pub config: ModelConfig,
    pub params: ParamStore<f32>,
    pub train: Option<TrainState>,
}

impl Checkpoint {
    pub fn from_model(model: &Model, train: Option<TrainState>) -> Self {
        Self {
            config: model.config.clone(),
            params: model.params.clone(),
            train,
        }
    }

    /// Rebuilds the model; the parameter set must match what the config builds.
    pub fn into_model(self) -> Result<(Model, Option<TrainState>)> {
        let mut model = Model::build(self.config, 0)?;
        let expected: Vec<(String, Vec<usize>, bool)> = model
            .params
            .iter()
            .map(|(p, t)| (p.to_string(), t.dims().to_vec(), t.requires_grad()))
            .collect();
        let found: Vec<(String, Vec<usize>, bool)> = self
            .params
            .iter()
            .map(|(p, t)| (p.to_string(), t.dims().to_vec(), t.requires_grad()))
            .collect();
        if expected != found {
            return Err(Error::Malformed("parameter set does not match the model config".into()));
        }
        model.params = self.params;
        Ok((model, self.train))
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let header = Header {
            config: self.config.clone(),
            train: self.train.as_ref().map(|s| TrainHeader {
                config: s.config.clone(),
                next_epoch: s.next_epoch,
                history: s.history.clone(),
                optimizer: s.optimizer.kind,
                momentum: s.optimizer.momentum,
                weight_decay: s.optimizer.weight_decay,
                step: s.optimizer.step,
            }),
        };
        let json = serde_json::to_vec(&header)?;
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        put_u32(&mut out, FORMAT_VERSION);
        put_u32(&mut out, len_u32(json.len())?);
        out.extend_from_slice(&json);

        let mut entries: Vec<(&str, u8, &Tensor<f32>)> = self
            .params
            .iter()
            .map(|(p, t)| (p, if t.requires_grad() { KIND_PARAM } else { KIND_BUFFER }, t))
            .collect();
        if let Some(s) = &self.train {
            entries.extend(s.optimizer.state.iter().map(|(p, t)| (p.as_str(), KIND_OPTIM, t)));
        }
        put_u32(&mut out, len_u32(entries.len())?);
        for (path, kind, t) in entries {
            put_u32(&mut out, len_u32(path.len())?);
            out.extend_from_slice(path.as_bytes());
            out.push(kind);
            out.push(u8::try_from(t.rank()).map_err(|_| Error::Malformed(format!("rank of `{path}` exceeds 255")))?);
            for &d in t.dims() {
                put_u32(&mut out, len_u32(d)?);
            }
            t.data().iter().for_each(|v| out.extend_from_slice(&v.to_le_bytes()));
        }
        let crc = crc32fast::hash(&out);
        put_u32(&mut out, crc);
        Ok(out)
    }

    /// Checks magic, then version, then checksum, before parsing anything else.
    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < 4 || &bytes[..4] != MAGIC {
            return Err(Error::BadMagic);
        }
        let version = bytes
            .get(4..8)
            .map(|b| u32::from_le_bytes(b.try_into().expect("4 bytes")))
            .ok_or_else(|| Error::Malformed("missing version".into()))?;
        if version != FORMAT_VERSION {
            return Err(Error::VersionMismatch {
                found: version,
                expected: FORMAT_VERSION,
            });
        }
        if bytes.len() < 12 {
            return Err(Error::ChecksumMismatch {
                stored: 0,
                computed: crc32fast::hash(bytes),
            });
        }
        let (body, tail) = bytes.split_at(bytes.len() - 4);
        let stored = u32::from_le_bytes(tail.try_into().expect("4 bytes"));
        let computed = crc32fast::hash(body);
        if stored != computed {
            return Err(Error::ChecksumMismatch { stored, computed });
        }

        let mut r = Reader { buf: body, pos: 8 };
        let json_len = r.u32()? as usize;
        let header: Header = serde_json::from_slice(r.take(json_len)?)?;
        let count = r.u32()? as usize;
        let mut params = ParamStore::new();
        let mut optim = std::collections::BTreeMap::new();
        for _ in 0..count {
            let plen = r.u32()? as usize;
            let path = std::str::from_utf8(r.take(plen)?)
                .map_err(|_| Error::Malformed("path is not UTF-8".into()))?
                .to_string();
            let kind = r.u8()?;
            let rank = r.u8()? as usize;
            let dims = (0..rank).map(|_| r.u32().map(|d| d as usize)).collect::<Result<Vec<_>>>()?;
            let n: usize = dims.iter().product();
            let raw = r.take(n.checked_mul(4).ok_or_else(|| Error::Malformed("tensor too large".into()))?)?;
            let data = raw
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
                .collect();
            let t = Tensor::new(&dims, data)?;
            match kind {
                KIND_PARAM => params.insert(path, t.with_requires_grad(true))?,
                KIND_BUFFER => params.insert(path, t)?,
                KIND_OPTIM => {
                    if optim.insert(path.clone(), t).is_some() {
                        return Err(Error::Malformed(format!("duplicate optimizer slot `{path}`")));
                    }
                }
                k => return Err(Error::Malformed(format!("unknown tensor kind {k} for `{path}`"))),
            }
        }
        if r.pos != body.len() {
            return Err(Error::Malformed(format!("{} trailing bytes", body.len() - r.pos)));
        }
        header.config.validate()?;
        let train = header.train.map(|h| TrainState {
            config: h.config,
            next_epoch: h.next_epoch,
            history: h.history,
            optimizer: Optimizer {
                kind: h.optimizer,
                momentum: h.momentum,
                weight_decay: h.weight_decay,
                step: h.step,
                state: std::mem::take(&mut optim),
            },
        });
        if !optim.is_empty() {
            return Err(Error::Malformed("optimizer slots without training state".into()));
        }
        Ok(Self {
            config: header.config,
            params,
            train,
        })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        std::fs::write(path, self.to_bytes()?)?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_bytes(&std::fs::read(path)?)
    }
}

fn put_u32(out: &mut Vec<u8>, v: u32) {
    out.extend_from_slice(&v.to_le_bytes());
}

fn len_u32(n: usize) -> Result<u32> {
    u32::try_from(n).map_err(|_| Error::Malformed(format!("length {n} does not fit in u32")))
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.buf.len());
        let end = end.ok_or_else(|| Error::Malformed(format!("unexpected end of data at byte {}", self.pos)))?;
        let s = &self.buf[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }
}

/// Saves `model` without training state.
pub fn save_model(model: &Model, path: impl AsRef<Path>) -> Result<()> {
    Checkpoint::from_model(model, None).save(path)
}

pub fn load_model(path: impl AsRef<Path>) -> Result<Model> {
    Checkpoint::load(path)?.into_model().map(|(m, _)| m)
}
