// Binary checkpoint layout (all integers little-endian):
//
//   b"OCCLMCKP"  u32 version  u32 header_len  header (JSON)
//   u32 n_tensors, then per tensor:
//     u32 name_len  name  u32 ndim  u64 dims[ndim]  f32 data[numel]
//   u8 has_resume; if 1:
//     u32 json_len  json  u32 n_tensors  tensors (as above)

use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{Model, ModelConfig, ParameterSet};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const CHECKPOINT_VERSION: u32 = 1;
const MAGIC: &[u8; 8] = b"OCCLMCKP";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointMeta {
    pub format_version: u32,
    pub model: ModelConfig,
    pub vocab_hash: Option<String>,
    pub run_id: Option<String>,
    pub epoch: usize,
    pub step: u64,
    pub valid_loss: Option<f64>,
    pub objective: Option<String>,
    pub occlusion_prob: Option<f64>,
}

impl CheckpointMeta {
    pub fn new(model: ModelConfig) -> Self {
        Self {
            format_version: CHECKPOINT_VERSION,
            model,
            vocab_hash: None,
            run_id: None,
            epoch: 0,
            step: 0,
            valid_loss: None,
            objective: None,
            occlusion_prob: None,
        }
    }
}

/// Optimizer and counter state needed to resume training bit-exactly.
#[derive(Debug, Clone, PartialEq)]
pub struct ResumeBlob {
    pub json: String,
    pub tensors: Vec<(String, Tensor)>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub meta: CheckpointMeta,
    pub params: ParameterSet,
    pub resume: Option<ResumeBlob>,
}

impl Checkpoint {
    pub fn from_model(model: &Model, meta: CheckpointMeta) -> Self {
        Self {
            meta: CheckpointMeta {
                model: model.config.clone(),
                ..meta
            },
            params: model.params.clone(),
            resume: None,
        }
    }

    pub fn model(&self) -> Result<Model> {
        Model::from_params(self.meta.model.clone(), self.params.clone())
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut out = Vec::with_capacity(16 + self.params.numel() * 4);
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&self.meta.format_version.to_le_bytes());
        let header = serde_json::to_vec(&self.meta)?;
        out.extend_from_slice(&(header.len() as u32).to_le_bytes());
        out.extend_from_slice(&header);
        write_tensors(&mut out, self.params.iter());
        match &self.resume {
            None => out.push(0),
            Some(r) => {
                out.push(1);
                out.extend_from_slice(&(r.json.len() as u32).to_le_bytes());
                out.extend_from_slice(r.json.as_bytes());
                write_tensors(&mut out, r.tensors.iter().map(|(n, t)| (n.as_str(), t)));
            }
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { bytes, pos: 0 };
        if r.take(8)? != MAGIC {
            return Err(Error::Checkpoint("not an occlm checkpoint (bad magic)".into()));
        }
        let version = r.u32()?;
        if version != CHECKPOINT_VERSION {
            return Err(Error::Checkpoint(format!(
                "unsupported format version {version} (expected {CHECKPOINT_VERSION})"
            )));
        }
        let header_len = r.u32()? as usize;
        let meta: CheckpointMeta = serde_json::from_slice(r.take(header_len)?)
            .map_err(|e| Error::Checkpoint(format!("bad header: {e}")))?;
        let params = ParameterSet::from_entries(read_tensors(&mut r)?)?;
        let resume = match r.take(1)?[0] {
            0 => None,
            1 => {
                let len = r.u32()? as usize;
                let json = String::from_utf8(r.take(len)?.to_vec())
                    .map_err(|_| Error::Checkpoint("resume state is not UTF-8".into()))?;
                Some(ResumeBlob {
                    json,
                    tensors: read_tensors(&mut r)?,
                })
            }
            other => return Err(Error::Checkpoint(format!("bad resume flag {other}"))),
        };
        if r.pos != bytes.len() {
            return Err(Error::Checkpoint(format!(
                "{} trailing bytes after checkpoint body",
                bytes.len() - r.pos
            )));
        }
        // validates names and shapes against the config
        Model::from_params(meta.model.clone(), params.clone())?;
        Ok(Self {
            meta,
            params,
            resume,
        })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        std::fs::write(path, self.to_bytes()?).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes)
    }

    /// Fails unless the stored config and vocab hash match the expected ones.
    pub fn check_compatible(
        &self,
        config: Option<&ModelConfig>,
        vocab_hash: Option<&str>,
    ) -> Result<()> {
        if let Some(cfg) = config {
            if *cfg != self.meta.model {
                return Err(Error::Checkpoint(format!(
                    "model config mismatch: checkpoint has {:?}, expected {:?}",
                    self.meta.model, cfg
                )));
            }
        }
        if let Some(expected) = vocab_hash {
            match self.meta.vocab_hash.as_deref() {
                Some(have) if have == expected => {}
                have => {
                    return Err(Error::Checkpoint(format!(
                        "vocabulary hash mismatch: checkpoint was trained with {}, got {expected}",
                        have.unwrap_or("<none>")
                    )))
                }
            }
        }
        Ok(())
    }
}

fn write_tensors<'a>(out: &mut Vec<u8>, tensors: impl Iterator<Item = (&'a str, &'a Tensor)>) {
    let tensors: Vec<_> = tensors.collect();
    out.extend_from_slice(&(tensors.len() as u32).to_le_bytes());
    for (name, t) in tensors {
        out.extend_from_slice(&(name.len() as u32).to_le_bytes());
        out.extend_from_slice(name.as_bytes());
        out.extend_from_slice(&(t.ndim() as u32).to_le_bytes());
        for &d in t.shape() {
            out.extend_from_slice(&(d as u64).to_le_bytes());
        }
        for v in t.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
}

fn read_tensors(r: &mut Reader<'_>) -> Result<Vec<(String, Tensor)>> {
    let n = r.u32()? as usize;
    let mut out = Vec::with_capacity(n.min(4096));
    for _ in 0..n {
        let len = r.u32()? as usize;
        let name = String::from_utf8(r.take(len)?.to_vec())
            .map_err(|_| Error::Checkpoint("tensor name is not UTF-8".into()))?;
        let ndim = r.u32()? as usize;
        let shape = (0..ndim)
            .map(|_| r.u64().map(|d| d as usize))
            .collect::<Result<Vec<_>>>()?;
        let numel: usize = shape.iter().product();
        let raw = r.take(numel.checked_mul(4).ok_or_else(|| Error::Checkpoint("tensor too large".into()))?)?;
        let data = raw
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
            .collect();
        let t = Tensor::new(shape, data)
            .map_err(|e| Error::Checkpoint(format!("tensor {name}: {e}")))?;
        out.push((name, t));
    }
    Ok(out)
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
            .ok_or_else(|| Error::Checkpoint("checkpoint is truncated".into()))?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        let b = self.take(4)?;
        Ok(u32::from_le_bytes([b[0], b[1], b[2], b[3]]))
    }

    fn u64(&mut self) -> Result<u64> {
        let b = self.take(8)?;
        let mut a = [0u8; 8];
        a.copy_from_slice(b);
        Ok(u64::from_le_bytes(a))
    }
}
