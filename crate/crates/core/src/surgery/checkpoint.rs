//! Checkpoint container.
//!
//! All integers are little-endian.
//!
//! ```text
//! offset  size      field
//! 0       8         magic "AFADCKPT"
//! 8       4         format version (u32) = 1
//! 12      4         config length C (u32)
//! 16      C         model config, UTF-8 JSON
//! ..      4         provenance length P (u32)
//! ..      P         provenance, UTF-8
//! ..      4         tensor count N (u32)
//! N x directory entry:
//!         2         name length L (u16)
//!         L         name, UTF-8
//!         1         rank R (u8)
//!         4*R       dims (u32 each)
//!         1         trainable flag (0 or 1)
//! N x tensor data, in directory order: product(dims) IEEE-754 binary32 values
//! ..      32        SHA-256 of every preceding byte
//! ```

use std::fs;
use std::path::Path;

use indexmap::IndexMap;
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::model::{EncoderWeights, ModelConfig};
use crate::numerics::Tensor;

use super::mask::{ParamCount, Technique, TrainabilityMask};

pub const MAGIC: &[u8; 8] = b"AFADCKPT";
pub const FORMAT_VERSION: u32 = 1;
const DIGEST_LEN: usize = 32;

/// Weights plus trainability mask and a free-form provenance note.
#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub weights: EncoderWeights<f32>,
    pub mask: TrainabilityMask,
    pub provenance: String,
}

/// Unvalidated file contents: what the container holds before the schema check.
#[derive(Clone, Debug, PartialEq)]
pub struct RawCheckpoint {
    pub version: u32,
    pub config: ModelConfig,
    pub provenance: String,
    pub tensors: Vec<(String, Tensor<f32>, bool)>,
}

impl Checkpoint {
    /// Randomly initialized base model with every tensor trainable.
    pub fn init_base(config: &ModelConfig, seed: u64) -> Result<Self> {
        if config.is_extended() || config.lora.is_some() {
            return Err(Error::Config("a base model has no extension or LoRA factors".into()));
        }
        Ok(Checkpoint {
            weights: EncoderWeights::init(config, seed)?,
            mask: TrainabilityMask::for_technique(config, Technique::FineTuning)?,
            provenance: format!("base(init_seed={seed})"),
        })
    }

    pub fn config(&self) -> &ModelConfig {
        self.weights.config()
    }

    pub fn count_params(&self) -> ParamCount {
        ParamCount::from_config(self.config(), &self.mask)
    }

    /// Mask the given technique would train on this checkpoint.
    pub fn make_mask(&self, technique: Technique) -> Result<TrainabilityMask> {
        TrainabilityMask::for_technique(self.config(), technique)
    }

    /// SHA-256 of each tensor's little-endian bytes.
    pub fn tensor_digests(&self) -> IndexMap<String, [u8; 32]> {
        self.weights
            .iter()
            .map(|(name, t)| (name.to_string(), tensor_digest(t)))
            .collect()
    }

    pub fn to_raw(&self) -> RawCheckpoint {
        RawCheckpoint {
            version: FORMAT_VERSION,
            config: self.config().clone(),
            provenance: self.provenance.clone(),
            tensors: self
                .weights
                .iter()
                .map(|(name, t)| (name.to_string(), t.clone(), self.mask.is_trainable(name)))
                .collect(),
        }
    }

    pub fn from_raw(raw: RawCheckpoint) -> Result<Self> {
        if raw.version != FORMAT_VERSION {
            return Err(Error::VersionMismatch {
                found: raw.version,
                expected: FORMAT_VERSION,
            });
        }
        let mut named = IndexMap::with_capacity(raw.tensors.len());
        let mut flags = IndexMap::with_capacity(raw.tensors.len());
        for (name, tensor, trainable) in raw.tensors {
            if named.contains_key(&name) {
                return Err(Error::DuplicateTensor(name));
            }
            flags.insert(name.clone(), trainable);
            named.insert(name, tensor);
        }
        let weights = EncoderWeights::from_tensors(raw.config, named)?;
        let mask = TrainabilityMask::from_flags(weights.iter().map(|(n, _)| (n.to_string(), flags[n])).collect());
        Ok(Checkpoint {
            weights,
            mask,
            provenance: raw.provenance,
        })
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        self.to_raw().to_bytes()
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        Self::from_raw(RawCheckpoint::from_bytes(bytes)?)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        fs::write(path, self.to_bytes()?)?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_bytes(&fs::read(path)?)
    }
}

pub fn tensor_digest(t: &Tensor<f32>) -> [u8; 32] {
    let mut h = Sha256::new();
    for v in t.data() {
        h.update(v.to_le_bytes());
    }
    h.finalize().into()
}

impl RawCheckpoint {
    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&self.version.to_le_bytes());
        let config = serde_json::to_vec(&self.config)?;
        put_block(&mut out, &config)?;
        put_block(&mut out, self.provenance.as_bytes())?;
        let count = u32::try_from(self.tensors.len()).map_err(|_| Error::Format("too many tensors".into()))?;
        out.extend_from_slice(&count.to_le_bytes());
        for (name, tensor, trainable) in &self.tensors {
            let len = u16::try_from(name.len()).map_err(|_| Error::Format(format!("tensor name too long: {name}")))?;
            out.extend_from_slice(&len.to_le_bytes());
            out.extend_from_slice(name.as_bytes());
            let rank = u8::try_from(tensor.shape().len()).map_err(|_| Error::Format("rank too large".into()))?;
            out.push(rank);
            for &d in tensor.shape() {
                let d = u32::try_from(d).map_err(|_| Error::Format("dimension too large".into()))?;
                out.extend_from_slice(&d.to_le_bytes());
            }
            out.push(u8::from(*trainable));
        }
        for (_, tensor, _) in &self.tensors {
            for v in tensor.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        let digest: [u8; DIGEST_LEN] = Sha256::digest(&out).into();
        out.extend_from_slice(&digest);
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { bytes, pos: 0 };
        let magic = r.take(MAGIC.len(), "magic").map_err(|_| Error::CorruptHeader("file shorter than magic".into()))?;
        if magic != MAGIC {
            return Err(Error::CorruptHeader(format!("bad magic {magic:02x?}")));
        }
        let version = r.u32("version")?;
        if version != FORMAT_VERSION {
            return Err(Error::VersionMismatch {
                found: version,
                expected: FORMAT_VERSION,
            });
        }
        let config_len = r.u32("config length")? as usize;
        let config: ModelConfig = serde_json::from_slice(r.take(config_len, "config")?)
            .map_err(|e| Error::CorruptHeader(format!("config block: {e}")))?;
        let prov_len = r.u32("provenance length")? as usize;
        let provenance = String::from_utf8(r.take(prov_len, "provenance")?.to_vec())
            .map_err(|_| Error::CorruptHeader("provenance is not UTF-8".into()))?;
        let count = r.u32("tensor count")? as usize;
        let mut directory = Vec::with_capacity(count.min(1 << 16));
        for _ in 0..count {
            let len = r.u16("name length")? as usize;
            let name = String::from_utf8(r.take(len, "tensor name")?.to_vec())
                .map_err(|_| Error::CorruptHeader("tensor name is not UTF-8".into()))?;
            let rank = r.u8("rank")? as usize;
            if rank == 0 {
                return Err(Error::CorruptHeader(format!("tensor `{name}` has rank 0")));
            }
            let mut shape = Vec::with_capacity(rank);
            for _ in 0..rank {
                shape.push(r.u32("dimension")? as usize);
            }
            let trainable = match r.u8("trainable flag")? {
                0 => false,
                1 => true,
                other => return Err(Error::CorruptHeader(format!("trainable flag {other} for `{name}`"))),
            };
            directory.push((name, shape, trainable));
        }
        let mut tensors = Vec::with_capacity(directory.len());
        for (name, shape, trainable) in directory {
            let numel = shape
                .iter()
                .try_fold(1usize, |acc, &d| acc.checked_mul(d))
                .ok_or_else(|| Error::CorruptHeader(format!("tensor `{name}` is too large")))?;
            let nbytes = numel
                .checked_mul(4)
                .ok_or_else(|| Error::CorruptHeader(format!("tensor `{name}` is too large")))?;
            let raw = r.take(nbytes, &name)?;
            let data = raw
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
                .collect();
            let tensor = Tensor::new(shape, data).map_err(|e| Error::CorruptHeader(format!("tensor `{name}`: {e}")))?;
            tensors.push((name, tensor, trainable));
        }
        let body_end = r.pos;
        let stored = r.take(DIGEST_LEN, "checksum")?;
        if r.pos != bytes.len() {
            return Err(Error::Format(format!("{} trailing bytes after checksum", bytes.len() - r.pos)));
        }
        let actual: [u8; DIGEST_LEN] = Sha256::digest(&bytes[..body_end]).into();
        if stored != actual {
            return Err(Error::CorruptHeader("checksum mismatch".into()));
        }
        Ok(RawCheckpoint {
            version,
            config,
            provenance,
            tensors,
        })
    }
}

fn put_block(out: &mut Vec<u8>, block: &[u8]) -> Result<()> {
    let len = u32::try_from(block.len()).map_err(|_| Error::Format("block too large".into()))?;
    out.extend_from_slice(&len.to_le_bytes());
    out.extend_from_slice(block);
    Ok(())
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len()).ok_or_else(|| {
            Error::Truncated(format!(
                "need {n} bytes for {what} at offset {}, file has {}",
                self.pos,
                self.bytes.len()
            ))
        })?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        let b = self.take(4, what)?;
        Ok(u32::from_le_bytes([b[0], b[1], b[2], b[3]]))
    }

    fn u16(&mut self, what: &str) -> Result<u16> {
        let b = self.take(2, what)?;
        Ok(u16::from_le_bytes([b[0], b[1]]))
    }

    fn u8(&mut self, what: &str) -> Result<u8> {
        Ok(self.take(1, what)?[0])
    }
}
