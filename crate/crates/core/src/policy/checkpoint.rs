//! Versioned binary checkpoint container.
//!
//! Layout: the magic `AMDKDCKP`, a little-endian `u32` version, a `u32`
//! header length and a JSON header naming the architecture and every tensor
//! with its shape. Tensor payloads follow in header order as little-endian
//! IEEE-754 doubles, then the optional Adam moments in the same order.

use std::io::{Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{ArchSpec, PolicyParams};
use crate::error::{Error, Result};
use crate::optim::AdamState;

pub const MAGIC: &[u8; 8] = b"AMDKDCKP";
pub const VERSION: u32 = 1;

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct TensorEntry {
    name: String,
    rows: usize,
    cols: usize,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Header {
    arch: ArchSpec,
    tensors: Vec<TensorEntry>,
    optimizer_step: Option<u64>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub params: PolicyParams,
    pub optimizer: Option<AdamState>,
}

impl Checkpoint {
    pub fn new(params: PolicyParams) -> Self {
        Self {
            params,
            optimizer: None,
        }
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let header = Header {
            arch: self.params.arch.clone(),
            tensors: self
                .params
                .tensors()
                .into_iter()
                .map(|(name, t)| TensorEntry {
                    name,
                    rows: t.rows(),
                    cols: t.cols(),
                })
                .collect(),
            optimizer_step: self.optimizer.as_ref().map(|o| o.step),
        };
        let header = serde_json::to_vec(&header).expect("header serializes");
        let mut out = Vec::with_capacity(16 + header.len() + 8 * self.params.n_params() * 3);
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.extend_from_slice(&(header.len() as u32).to_le_bytes());
        out.extend_from_slice(&header);
        let mut put = |p: &PolicyParams| {
            for v in p.to_flat() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        };
        put(&self.params);
        if let Some(opt) = &self.optimizer {
            put(&opt.m);
            put(&opt.v);
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = bytes;
        let mut magic = [0u8; 8];
        r.read_exact(&mut magic)
            .map_err(|_| Error::Checkpoint("truncated magic".into()))?;
        if &magic != MAGIC {
            return Err(Error::Checkpoint("bad magic".into()));
        }
        let version = read_u32(&mut r)?;
        if version != VERSION {
            return Err(Error::Checkpoint(format!("unsupported version {version}")));
        }
        let hlen = read_u32(&mut r)? as usize;
        if r.len() < hlen {
            return Err(Error::Checkpoint("truncated header".into()));
        }
        let header: Header = serde_json::from_slice(&r[..hlen])
            .map_err(|e| Error::Checkpoint(format!("header: {e}")))?;
        r = &r[hlen..];
        header.arch.validate()?;

        let template = PolicyParams::zeros(&header.arch);
        let expected = template.tensors();
        if expected.len() != header.tensors.len() {
            return Err(Error::Checkpoint(format!(
                "expected {} tensors for the architecture, found {}",
                expected.len(),
                header.tensors.len()
            )));
        }
        for ((name, t), e) in expected.iter().zip(&header.tensors) {
            if *name != e.name || t.shape() != (e.rows, e.cols) {
                return Err(Error::Checkpoint(format!(
                    "tensor {} has shape {}x{}, architecture expects {name} {}x{}",
                    e.name,
                    e.rows,
                    e.cols,
                    t.rows(),
                    t.cols()
                )));
            }
        }
        let n = template.n_params();
        let take = |r: &mut &[u8]| -> Result<PolicyParams> {
            if r.len() < 8 * n {
                return Err(Error::Checkpoint("truncated tensor data".into()));
            }
            let values: Vec<f64> = r[..8 * n]
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().expect("8-byte chunk")))
                .collect();
            *r = &r[8 * n..];
            let mut p = PolicyParams::zeros(&header.arch);
            p.set_flat(&values);
            Ok(p)
        };
        let params = take(&mut r)?;
        let optimizer = match header.optimizer_step {
            Some(step) => Some(AdamState {
                m: take(&mut r)?,
                v: take(&mut r)?,
                step,
            }),
            None => None,
        };
        if !r.is_empty() {
            return Err(Error::Checkpoint(format!("{} trailing bytes", r.len())));
        }
        Ok(Self { params, optimizer })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let mut f = std::fs::File::create(path)?;
        f.write_all(&self.to_bytes())?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_bytes(&std::fs::read(path)?)
    }
}

fn read_u32(r: &mut &[u8]) -> Result<u32> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b)
        .map_err(|_| Error::Checkpoint("truncated length field".into()))?;
    Ok(u32::from_le_bytes(b))
}
