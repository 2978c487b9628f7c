//! Single-file checkpoints.
//!
//! Byte layout, all integers little-endian:
//!
//! ```text
//! magic      8 bytes   "CLSRCKPT"
//! version    u32       1
//! config     u64 length + UTF-8 JSON of the model config
//! count      u64       number of tensors
//! per tensor:
//!   name     u32 length + UTF-8 bytes   (module path, e.g. "dec.1.ffn.ls.l3.w1.w")
//!   owner    u32 length + UTF-8 bytes   ("shared" or the language id)
//!   ndim     u32
//!   dims     ndim × u64
//!   values   numel × f64
//! ```
//!
//! Tensors appear in model construction order, so identical models give
//! identical bytes.

use super::config::ModelConfig;
use super::params::Owner;
use super::transformer::Seq2SeqModel;
use crate::error::{Error, Result};
use crate::tensor::Tensor;
use std::collections::BTreeSet;
use std::path::Path;

const MAGIC: &[u8; 8] = b"CLSRCKPT";
const VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq)]
pub struct NamedTensor {
    pub name: String,
    pub owner: Owner,
    pub tensor: Tensor,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub config: ModelConfig,
    pub tensors: Vec<NamedTensor>,
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.pos + n > self.buf.len() {
            return Err(Error::Load(format!("checkpoint truncated at byte {}", self.pos)));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn string(&mut self, len: usize) -> Result<String> {
        String::from_utf8(self.take(len)?.to_vec()).map_err(|e| Error::Load(format!("invalid UTF-8: {e}")))
    }
}

impl Checkpoint {
    pub fn from_model(model: &Seq2SeqModel) -> Self {
        let tensors = model
            .store()
            .iter()
            .map(|(_, p)| {
                let mut t = p.tensor.clone();
                t.set_requires_grad(false);
                NamedTensor {
                    name: p.name.clone(),
                    owner: p.owner.clone(),
                    tensor: t,
                }
            })
            .collect();
        Self {
            config: model.config().clone(),
            tensors,
        }
    }

    /// Languages with at least one entry, sorted.
    pub fn languages(&self) -> Vec<String> {
        self.tensors
            .iter()
            .filter_map(|t| match &t.owner {
                Owner::Language(l) => Some(l.clone()),
                Owner::Shared => None,
            })
            .collect::<BTreeSet<_>>()
            .into_iter()
            .collect()
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        let cfg = serde_json::to_vec(&self.config)?;
        out.extend_from_slice(&(cfg.len() as u64).to_le_bytes());
        out.extend_from_slice(&cfg);
        out.extend_from_slice(&(self.tensors.len() as u64).to_le_bytes());
        for nt in &self.tensors {
            out.extend_from_slice(&(nt.name.len() as u32).to_le_bytes());
            out.extend_from_slice(nt.name.as_bytes());
            let owner = nt.owner.label();
            out.extend_from_slice(&(owner.len() as u32).to_le_bytes());
            out.extend_from_slice(owner.as_bytes());
            out.extend_from_slice(&(nt.tensor.shape().len() as u32).to_le_bytes());
            for &d in nt.tensor.shape() {
                out.extend_from_slice(&(d as u64).to_le_bytes());
            }
            for v in nt.tensor.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        Ok(out)
    }

    pub fn from_bytes(buf: &[u8]) -> Result<Self> {
        let mut r = Reader { buf, pos: 0 };
        if r.take(8)? != MAGIC {
            return Err(Error::Load("not a checkpoint (bad magic)".into()));
        }
        let version = r.u32()?;
        if version != VERSION {
            return Err(Error::Load(format!("unsupported checkpoint version {version}")));
        }
        let cfg_len = r.u64()? as usize;
        let config: ModelConfig = serde_json::from_slice(r.take(cfg_len)?)?;
        let count = r.u64()? as usize;
        let mut tensors = Vec::with_capacity(count);
        for _ in 0..count {
            let n = r.u32()? as usize;
            let name = r.string(n)?;
            let n = r.u32()? as usize;
            let owner = r.string(n)?;
            let owner = if owner == "shared" { Owner::Shared } else { Owner::Language(owner) };
            let ndim = r.u32()? as usize;
            let dims = (0..ndim).map(|_| r.u64().map(|d| d as usize)).collect::<Result<Vec<_>>>()?;
            let numel: usize = dims.iter().product();
            let raw = r.take(numel * 8)?;
            let data = raw.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().unwrap())).collect();
            tensors.push(NamedTensor {
                name,
                owner,
                tensor: Tensor::new(&dims, data).map_err(|e| Error::Load(e.to_string()))?,
            });
        }
        if r.pos != buf.len() {
            return Err(Error::Load("trailing bytes after checkpoint".into()));
        }
        Ok(Self { config, tensors })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        std::fs::write(path, self.to_bytes()?)?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_bytes(&std::fs::read(path)?)
    }

    /// Rebuilds the full model with every language in the checkpoint.
    pub fn to_model(&self) -> Result<Seq2SeqModel> {
        self.assemble(&self.languages())
    }

    /// Model with the shared weights plus the entries of `languages` only.
    pub fn assemble(&self, languages: &[String]) -> Result<Seq2SeqModel> {
        let available = self.languages();
        if let Some(missing) = languages.iter().find(|l| !available.contains(l)) {
            return Err(Error::Load(format!(
                "language {missing} not in checkpoint (available: {available:?})"
            )));
        }
        let mut model = Seq2SeqModel::skeleton(&self.config, languages)?;
        let wanted: BTreeSet<&str> = languages.iter().map(String::as_str).collect();
        let mut filled = 0;
        for nt in &self.tensors {
            if let Owner::Language(l) = &nt.owner {
                if !wanted.contains(l.as_str()) {
                    continue;
                }
            }
            let id = model
                .store()
                .id(&nt.name)
                .ok_or_else(|| Error::Load(format!("checkpoint tensor {} has no slot in the model", nt.name)))?;
            model.store_mut().assign(id, &nt.tensor).map_err(|e| Error::Load(e.to_string()))?;
            filled += 1;
        }
        if filled != model.store().len() {
            return Err(Error::Load(format!(
                "checkpoint filled {filled} of {} parameters",
                model.store().len()
            )));
        }
        for p in model.store_mut().iter_mut() {
            p.tensor.set_requires_grad(false);
        }
        Ok(model)
    }
}

/// Loads the shared layers and the modules of `languages` for inference.
pub fn assemble_inference_model(base: &Checkpoint, languages: &[String]) -> Result<Seq2SeqModel> {
    base.assemble(languages)
}
