//! Binary checkpoint format, all integers and floats little-endian:
//!
//! ```text
//! magic      8 bytes  "DXCKPT\0\n"
//! version    u32
//! timesteps  u32      schedule length T the model was trained for
//! data_dim   u32
//! table_rows u32
//! embed_dim  u32
//! hidden     u32
//! rank       u32      adapter rank, 0 when absent
//! second_token_weight f64
//! input_scale         f64
//! blocks     u32      count, then per block:
//!   name_len u16, name (UTF-8), ndim u8, dims u32 x ndim, values f64 x prod(dims)
//! ```
//!
//! Floats are stored by bit pattern, so decode(encode(p)) is bit-exact.

use std::collections::BTreeMap;
use std::path::Path;

use ndgrad::Tensor;
use thiserror::Error;

use crate::model::{Adapter, DenoiserParams, Linear, ModelConfig, DATA_DIM};

pub const MAGIC: &[u8; 8] = b"DXCKPT\0\n";
pub const VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum CheckpointError {
    #[error("not a checkpoint (bad magic)")]
    BadMagic,
    #[error("unsupported checkpoint version {0}")]
    Version(u32),
    #[error("checkpoint truncated at byte {0}")]
    Truncated(usize),
    #[error("{0} trailing bytes after last block")]
    Trailing(usize),
    #[error("block name is not UTF-8")]
    BadName,
    #[error("duplicate block {0:?}")]
    Duplicate(String),
    #[error("missing block {0:?}")]
    Missing(String),
    #[error("unexpected block {0:?}")]
    Unexpected(String),
    #[error("block {name:?} has shape {got:?}, expected {want:?}")]
    Shape { name: String, got: Vec<usize>, want: Vec<usize> },
    #[error("invalid header field {0}")]
    Header(&'static str),
}

/// Parameters together with the schedule length they were trained for.
#[derive(Debug, Clone)]
pub struct Checkpoint {
    pub timesteps: usize,
    pub params: DenoiserParams,
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8], CheckpointError> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len());
        let end = end.ok_or(CheckpointError::Truncated(self.bytes.len()))?;
        let out = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(out)
    }

    fn u8(&mut self) -> Result<u8, CheckpointError> {
        Ok(self.take(1)?[0])
    }

    fn u16(&mut self) -> Result<u16, CheckpointError> {
        Ok(u16::from_le_bytes(self.take(2)?.try_into().expect("2 bytes")))
    }

    fn u32(&mut self) -> Result<u32, CheckpointError> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn usize(&mut self) -> Result<usize, CheckpointError> {
        Ok(self.u32()? as usize)
    }

    fn f64(&mut self) -> Result<f64, CheckpointError> {
        Ok(f64::from_bits(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes"))))
    }

    fn remaining(&self) -> usize {
        self.bytes.len() - self.pos
    }
}

impl Checkpoint {
    pub fn encode(&self) -> Vec<u8> {
        let c = &self.params.config;
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        for v in [
            VERSION,
            self.timesteps as u32,
            DATA_DIM as u32,
            c.table_rows as u32,
            c.embed_dim as u32,
            c.hidden as u32,
            self.params.adapter_rank().unwrap_or(0) as u32,
        ] {
            out.extend_from_slice(&v.to_le_bytes());
        }
        out.extend_from_slice(&c.second_token_weight.to_bits().to_le_bytes());
        out.extend_from_slice(&c.input_scale.to_bits().to_le_bytes());
        let blocks = self.params.named_blocks();
        out.extend_from_slice(&(blocks.len() as u32).to_le_bytes());
        for (name, t) in blocks {
            out.extend_from_slice(&(name.len() as u16).to_le_bytes());
            out.extend_from_slice(name.as_bytes());
            out.push(t.rank() as u8);
            for &d in t.shape() {
                out.extend_from_slice(&(d as u32).to_le_bytes());
            }
            for v in t.data() {
                out.extend_from_slice(&v.to_bits().to_le_bytes());
            }
        }
        out
    }

    pub fn decode(bytes: &[u8]) -> Result<Self, CheckpointError> {
        let mut r = Reader { bytes, pos: 0 };
        if r.take(MAGIC.len()).map_err(|_| CheckpointError::BadMagic)? != MAGIC {
            return Err(CheckpointError::BadMagic);
        }
        let version = r.u32()?;
        if version != VERSION {
            return Err(CheckpointError::Version(version));
        }
        let timesteps = r.usize()?;
        if timesteps == 0 {
            return Err(CheckpointError::Header("timesteps"));
        }
        if r.usize()? != DATA_DIM {
            return Err(CheckpointError::Header("data_dim"));
        }
        let config = ModelConfig {
            table_rows: r.usize()?,
            embed_dim: r.usize()?,
            hidden: r.usize()?,
            second_token_weight: 0.0,
            input_scale: 0.0,
        };
        let rank = r.usize()?;
        let config = ModelConfig {
            second_token_weight: r.f64()?,
            input_scale: r.f64()?,
            ..config
        };
        if config.table_rows < 2 || config.embed_dim == 0 || config.hidden == 0 {
            return Err(CheckpointError::Header("dims"));
        }
        if !(config.input_scale.is_finite() && config.input_scale > 0.0 && config.second_token_weight.is_finite()) {
            return Err(CheckpointError::Header("scales"));
        }
        let count = r.usize()?;
        let mut blocks: BTreeMap<String, Tensor> = BTreeMap::new();
        for _ in 0..count {
            let len = r.u16()? as usize;
            let name = std::str::from_utf8(r.take(len)?).map_err(|_| CheckpointError::BadName)?.to_string();
            let ndim = r.u8()? as usize;
            let mut shape = Vec::with_capacity(ndim);
            for _ in 0..ndim {
                shape.push(r.usize()?);
            }
            let numel = shape.iter().try_fold(1usize, |acc, &d| acc.checked_mul(d));
            // Refuse sizes the remaining input cannot hold before allocating.
            let numel = numel
                .filter(|n| n.checked_mul(8).is_some_and(|b| b <= r.remaining()))
                .ok_or(CheckpointError::Truncated(bytes.len()))?;
            let mut data = Vec::with_capacity(numel);
            for _ in 0..numel {
                data.push(r.f64()?);
            }
            let t = Tensor::new(data, &shape).map_err(|_| CheckpointError::Truncated(bytes.len()))?;
            if blocks.insert(name.clone(), t).is_some() {
                return Err(CheckpointError::Duplicate(name));
            }
        }
        if r.remaining() != 0 {
            return Err(CheckpointError::Trailing(r.remaining()));
        }
        let params = assemble(config, rank, blocks)?;
        Ok(Self { timesteps, params })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> std::io::Result<()> {
        std::fs::write(path, self.encode())
    }

    pub fn load(path: impl AsRef<Path>) -> crate::Result<Self> {
        Ok(Self::decode(&std::fs::read(path)?)?)
    }
}

fn assemble(config: ModelConfig, rank: usize, mut blocks: BTreeMap<String, Tensor>) -> Result<DenoiserParams, CheckpointError> {
    let mut take = |name: String, want: Vec<usize>| -> Result<Tensor, CheckpointError> {
        let t = blocks.remove(&name).ok_or_else(|| CheckpointError::Missing(name.clone()))?;
        if t.shape() != want {
            return Err(CheckpointError::Shape {
                name,
                got: t.shape().to_vec(),
                want,
            });
        }
        Ok(t)
    };
    let embedding = take("embedding".into(), vec![config.table_rows, config.embed_dim])?;
    let dims = config.layer_dims();
    let mut layers = Vec::new();
    for (i, &(fan_in, fan_out)) in dims.iter().enumerate() {
        layers.push(Linear {
            weight: take(format!("layer{i}.weight"), vec![fan_in, fan_out])?,
            bias: take(format!("layer{i}.bias"), vec![fan_out])?,
        });
    }
    let mut adapters = Vec::new();
    for (i, &(fan_in, fan_out)) in dims.iter().enumerate() {
        if rank > 0 && rank < fan_in.min(fan_out) {
            adapters.push(Some(Adapter {
                down: take(format!("layer{i}.adapter.down"), vec![fan_in, rank])?,
                up: take(format!("layer{i}.adapter.up"), vec![rank, fan_out])?,
            }));
        } else {
            adapters.push(None);
        }
    }
    if rank > 0 && adapters.iter().all(Option::is_none) {
        return Err(CheckpointError::Header("rank"));
    }
    if let Some(name) = blocks.into_keys().next() {
        return Err(CheckpointError::Unexpected(name));
    }
    Ok(DenoiserParams {
        config,
        embedding,
        layers,
        adapters,
    })
}
