//! Binary checkpoints.
//!
//! ```text
//! magic "RSNACKPT" | version u32 | meta-length u64 | meta JSON
//! | step u64 | optimizer-t u64 | count u64
//! | count × (name-length u32 | name | dtype u8 | rank u8 | dims u64… | payload)
//! ```
//!
//! All integers and payloads are little-endian. Optimizer moments are
//! stored as tensors named `adam.m.<param>` and `adam.v.<param>`.

use std::path::Path;

use serde::{Deserialize, Serialize};

use super::model::{assemble, Model, ModelSpec};
use super::optim::AdamW;
use crate::error::{Error, Result};
use crate::params::HasParams;
use crate::tensor::{DType, Scalar, Tensor};

pub const MAGIC: &[u8; 8] = b"RSNACKPT";
pub const VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CheckpointMeta {
    pub model: ModelSpec,
    /// Free-form echo of the run configuration.
    #[serde(default)]
    pub config: serde_json::Value,
}

#[derive(Clone, Debug, PartialEq)]
pub struct NamedTensor {
    pub name: String,
    pub dtype: DType,
    pub shape: Vec<usize>,
    pub payload: Vec<u8>,
}

impl NamedTensor {
    fn from_slice<S: Scalar>(name: String, shape: &[usize], data: &[S]) -> Self {
        let mut payload = Vec::with_capacity(data.len() * S::DTYPE.size());
        for v in data {
            v.write_le(&mut payload);
        }
        Self {
            name,
            dtype: S::DTYPE,
            shape: shape.to_vec(),
            payload,
        }
    }

    /// Values converted to `S` (through `f64` when the stored type differs).
    pub fn values<S: Scalar>(&self) -> Vec<S> {
        let w = self.dtype.size();
        self.payload
            .chunks(w)
            .map(|b| match self.dtype {
                DType::F32 => S::from_f64_lossy(f32::read_le(b) as f64),
                DType::F64 => S::from_f64_lossy(f64::read_le(b)),
            })
            .collect()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub meta_json: String,
    pub step: u64,
    pub opt_t: u64,
    pub tensors: Vec<NamedTensor>,
}

impl Checkpoint {
    pub fn capture<S: Scalar>(
        model: &Model<S>,
        opt: Option<&AdamW<S>>,
        step: u64,
        config: serde_json::Value,
    ) -> Result<Self> {
        let meta = CheckpointMeta {
            model: model.spec.clone(),
            config,
        };
        let mut tensors = Vec::new();
        model.visit(&mut |p| tensors.push(NamedTensor::from_slice(p.name.clone(), p.value.shape(), p.value.data())));
        if let Some(opt) = opt {
            for (prefix, moments) in [("adam.m.", &opt.m), ("adam.v.", &opt.v)] {
                model.visit(&mut |p| {
                    if let Some(m) = moments.get(&p.name) {
                        tensors.push(NamedTensor::from_slice(format!("{prefix}{}", p.name), p.value.shape(), m));
                    }
                });
            }
        }
        Ok(Self {
            meta_json: serde_json::to_string(&meta)?,
            step,
            opt_t: opt.map_or(0, |o| o.t),
            tensors,
        })
    }

    pub fn meta(&self) -> Result<CheckpointMeta> {
        serde_json::from_str(&self.meta_json).map_err(|e| Error::Checkpoint(format!("bad metadata: {e}")))
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.extend_from_slice(&(self.meta_json.len() as u64).to_le_bytes());
        out.extend_from_slice(self.meta_json.as_bytes());
        out.extend_from_slice(&self.step.to_le_bytes());
        out.extend_from_slice(&self.opt_t.to_le_bytes());
        out.extend_from_slice(&(self.tensors.len() as u64).to_le_bytes());
        for t in &self.tensors {
            out.extend_from_slice(&(t.name.len() as u32).to_le_bytes());
            out.extend_from_slice(t.name.as_bytes());
            out.push(t.dtype.tag());
            out.push(t.shape.len() as u8);
            for d in &t.shape {
                out.extend_from_slice(&(*d as u64).to_le_bytes());
            }
            out.extend_from_slice(&t.payload);
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { bytes, pos: 0 };
        if r.take(8)? != MAGIC {
            return Err(Error::Checkpoint("not a checkpoint file".into()));
        }
        let version = u32::from_le_bytes(r.take(4)?.try_into().unwrap());
        if version != VERSION {
            return Err(Error::Checkpoint(format!("unsupported version {version}")));
        }
        let n = r.u64()? as usize;
        let meta_json = String::from_utf8(r.take(n)?.to_vec()).map_err(|_| Error::Checkpoint("metadata is not UTF-8".into()))?;
        let step = r.u64()?;
        let opt_t = r.u64()?;
        let count = r.u64()? as usize;
        let mut tensors = Vec::with_capacity(count.min(1 << 16));
        for _ in 0..count {
            let len = u32::from_le_bytes(r.take(4)?.try_into().unwrap()) as usize;
            let name = String::from_utf8(r.take(len)?.to_vec()).map_err(|_| Error::Checkpoint("tensor name is not UTF-8".into()))?;
            let dtype = DType::from_tag(r.take(1)?[0]).ok_or_else(|| Error::Checkpoint(format!("{name}: unknown dtype")))?;
            let rank = r.take(1)?[0] as usize;
            let shape = (0..rank).map(|_| r.u64().map(|d| d as usize)).collect::<Result<Vec<_>>>()?;
            let numel: usize = shape.iter().product();
            let payload = r.take(numel * dtype.size())?.to_vec();
            tensors.push(NamedTensor {
                name,
                dtype,
                shape,
                payload,
            });
        }
        if r.pos != bytes.len() {
            return Err(Error::Checkpoint("trailing bytes".into()));
        }
        Ok(Self {
            meta_json,
            step,
            opt_t,
            tensors,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_bytes())?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_bytes(&std::fs::read(path)?)
    }

    /// Rebuilds the model (and optimizer moments) stored in the checkpoint.
    pub fn restore<S: Scalar>(&self) -> Result<(Model<S>, AdamW<S>)> {
        let meta = self.meta()?;
        let mut model: Model<S> = assemble(&meta.model, 0)?;
        let by_name: std::collections::HashMap<&str, &NamedTensor> =
            self.tensors.iter().map(|t| (t.name.as_str(), t)).collect();
        let mut err = None;
        model.visit_mut(&mut |p| {
            match by_name.get(p.name.as_str()) {
                Some(t) if t.shape == p.value.shape() => match Tensor::new(t.shape.clone(), t.values()) {
                    Ok(v) => p.value = v.with_grad(),
                    Err(e) => err = Some(e),
                },
                Some(t) => {
                    err = Some(Error::Checkpoint(format!(
                        "{}: stored shape {:?}, model expects {:?}",
                        p.name,
                        t.shape,
                        p.value.shape()
                    )))
                }
                None => err = Some(Error::Checkpoint(format!("missing tensor {}", p.name))),
            };
        });
        if let Some(e) = err {
            return Err(e);
        }
        let mut opt = AdamW::new(0.0);
        opt.t = self.opt_t;
        for t in &self.tensors {
            if let Some(n) = t.name.strip_prefix("adam.m.") {
                opt.m.insert(n.to_string(), t.values());
            } else if let Some(n) = t.name.strip_prefix("adam.v.") {
                opt.v.insert(n.to_string(), t.values());
            }
        }
        Ok((model, opt))
    }
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
            .filter(|e| *e <= self.bytes.len())
            .ok_or_else(|| Error::Checkpoint(format!("truncated at byte {}", self.pos)))?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
}
