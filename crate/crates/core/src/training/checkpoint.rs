//! Binary checkpoint format.
//!
//! ```text
//! magic      8 bytes   "CENMTCKP"
//! version    u32 LE
//! header     u32 LE length + UTF-8 JSON {config, stage, seed, step, optimizer}
//! params     tensor list
//! [moments]  two tensor lists (first, second) when optimizer is not null
//!
//! tensor list: u32 count, then per tensor
//!   u32 name length, name bytes, u32 rank, rank × u32 dims,
//!   product(dims) × f32 LE values
//! ```

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::optim::{AdamConfig, OptimizerState, Schedule};
use crate::error::{Error, Result};
use crate::model::{Model, ModelConfig, ParamGroup, ParamStore};
use crate::numerics::Tensor;

pub const MAGIC: &[u8; 8] = b"CENMTCKP";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Stage {
    Pretrain,
    Ce,
    Finetune,
}

impl Stage {
    pub fn label(self) -> &'static str {
        match self {
            Stage::Pretrain => "pretrain",
            Stage::Ce => "ce",
            Stage::Finetune => "finetune",
        }
    }
}

/// Parameters, architecture and provenance of one training stage.
///
/// Parameters are held at `f32` precision so that a saved and reloaded
/// checkpoint is bit-identical to the in-memory one.
#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub config: ModelConfig,
    pub stage: Stage,
    pub seed: u64,
    pub step: u64,
    pub params: ParamStore,
    pub optimizer: Option<OptimizerState>,
}

#[derive(Serialize, Deserialize)]
struct Header {
    config: ModelConfig,
    stage: Stage,
    seed: u64,
    step: u64,
    optimizer: Option<OptimizerHeader>,
}

#[derive(Serialize, Deserialize)]
struct OptimizerHeader {
    step: u64,
    schedule: Schedule,
    adam: AdamConfig,
}

impl Checkpoint {
    /// Snapshots a model, rounding parameters (and moments) to `f32`.
    pub fn capture(
        model: &Model,
        stage: Stage,
        seed: u64,
        step: u64,
        optimizer: Option<&OptimizerState>,
    ) -> Result<Self> {
        let mut params = model.params.clone();
        params.round_to_f32();
        let optimizer = optimizer.map(|o| {
            let mut o = o.clone();
            o.first.round_to_f32();
            o.second.round_to_f32();
            o
        });
        let ckpt = Self {
            config: model.config.clone(),
            stage,
            seed,
            step,
            params,
            optimizer,
        };
        ckpt.validate()?;
        Ok(ckpt)
    }

    pub fn validate(&self) -> Result<()> {
        let need = |group: ParamGroup, what: &str| -> Result<()> {
            if self.params.has_group(group) {
                Ok(())
            } else {
                Err(Error::Checkpoint(format!(
                    "{} checkpoint is missing {what} parameters",
                    self.stage.label()
                )))
            }
        };
        need(ParamGroup::Encoder, "encoder")?;
        need(ParamGroup::Embedding, "embedding")?;
        match self.stage {
            Stage::Ce => need(ParamGroup::Projection, "projection"),
            Stage::Pretrain | Stage::Finetune => need(ParamGroup::Decoder, "decoder"),
        }
    }

    pub fn model(&self) -> Model {
        Model::from_params(self.config.clone(), self.params.clone())
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let header = Header {
            config: self.config.clone(),
            stage: self.stage,
            seed: self.seed,
            step: self.step,
            optimizer: self.optimizer.as_ref().map(|o| OptimizerHeader {
                step: o.step,
                schedule: o.schedule,
                adam: o.adam,
            }),
        };
        let json = serde_json::to_vec(&header).map_err(|e| Error::Checkpoint(e.to_string()))?;
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
        put_u32(&mut out, json.len())?;
        out.extend_from_slice(&json);
        write_tensors(&mut out, &self.params)?;
        if let Some(o) = &self.optimizer {
            write_tensors(&mut out, &o.first)?;
            write_tensors(&mut out, &o.second)?;
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { bytes, pos: 0 };
        if r.take(8)? != MAGIC {
            return Err(Error::Checkpoint("not a checkpoint file (bad magic)".into()));
        }
        let version = r.u32()?;
        if version != FORMAT_VERSION {
            return Err(Error::Checkpoint(format!("unsupported format version {version}")));
        }
        let len = r.u32()? as usize;
        let header: Header =
            serde_json::from_slice(r.take(len)?).map_err(|e| Error::Checkpoint(format!("header: {e}")))?;
        let params = read_tensors(&mut r)?;
        let optimizer = match header.optimizer {
            Some(h) => Some(OptimizerState {
                step: h.step,
                schedule: h.schedule,
                adam: h.adam,
                first: read_tensors(&mut r)?,
                second: read_tensors(&mut r)?,
            }),
            None => None,
        };
        if r.pos != bytes.len() {
            return Err(Error::Checkpoint(format!("{} trailing bytes", bytes.len() - r.pos)));
        }
        let ckpt = Self {
            config: header.config,
            stage: header.stage,
            seed: header.seed,
            step: header.step,
            params,
            optimizer,
        };
        ckpt.config.validate()?;
        ckpt.validate()?;
        Ok(ckpt)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_bytes()?).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes)
    }

    /// `<stage>-<step>.ckpt`
    pub fn file_name(&self) -> String {
        format!("{}-{}.ckpt", self.stage.label(), self.step)
    }
}

fn put_u32(out: &mut Vec<u8>, v: usize) -> Result<()> {
    let v = u32::try_from(v).map_err(|_| Error::Checkpoint(format!("{v} does not fit in u32")))?;
    out.extend_from_slice(&v.to_le_bytes());
    Ok(())
}

fn write_tensors(out: &mut Vec<u8>, store: &ParamStore) -> Result<()> {
    put_u32(out, store.len())?;
    for (name, t) in store.iter() {
        put_u32(out, name.len())?;
        out.extend_from_slice(name.as_bytes());
        put_u32(out, t.shape().len())?;
        for &d in t.shape() {
            put_u32(out, d)?;
        }
        for &v in t.data() {
            out.extend_from_slice(&(v as f32).to_le_bytes());
        }
    }
    Ok(())
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
            .ok_or_else(|| Error::Checkpoint(format!("truncated at byte {} (wanted {n} more)", self.pos)))?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }
}

fn read_tensors(r: &mut Reader<'_>) -> Result<ParamStore> {
    let count = r.u32()?;
    let mut store = ParamStore::new();
    for _ in 0..count {
        let len = r.u32()? as usize;
        let name = std::str::from_utf8(r.take(len)?)
            .map_err(|e| Error::Checkpoint(format!("tensor name: {e}")))?
            .to_string();
        if !matches!(name.split('.').next(), Some("embed" | "enc" | "dec" | "proj")) {
            return Err(Error::Checkpoint(format!("unknown parameter `{name}`")));
        }
        let rank = r.u32()? as usize;
        let shape: Vec<usize> = (0..rank).map(|_| r.u32().map(|d| d as usize)).collect::<Result<_>>()?;
        let n: usize = shape.iter().product();
        let raw = r.take(
            n.checked_mul(4)
                .ok_or_else(|| Error::Checkpoint("tensor too large".into()))?,
        )?;
        let data = raw
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()) as f64)
            .collect();
        let t = Tensor::new(shape, data).map_err(|e| Error::Checkpoint(format!("{name}: {e}")))?;
        store.insert(name, t);
    }
    Ok(store)
}
