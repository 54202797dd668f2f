//! Binary checkpoint format.
//!
//! Layout: magic `CLDP`, little-endian `u32` format version, `u64` header
//! length, a JSON header (config, head, array manifest with shapes and
//! offsets, vocab fingerprint, lineage), then the raw little-endian `f32`
//! payload in manifest order.

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{AdamConfig, AdamState, Array, HeadKind, Model, ModelConfig, ParamSet};
use crate::hashing::sha256_hex;
use crate::{Error, Result};

pub const MAGIC: &[u8; 4] = b"CLDP";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ArrayEntry {
    pub name: String,
    pub shape: Vec<usize>,
    /// Offset in `f32` elements from the start of the payload.
    pub offset: usize,
    pub len: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OptimizerHeader {
    pub step: u64,
    pub config: AdamConfig,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointHeader {
    pub format_version: u32,
    pub config: ModelConfig,
    pub head: HeadKind,
    pub vocab_fingerprint: String,
    /// SHA-256 of the checkpoint file this one was continued from.
    pub lineage: Option<String>,
    pub step: u64,
    pub arrays: Vec<ArrayEntry>,
    pub optimizer: Option<OptimizerHeader>,
    pub rng_seed: Option<u64>,
    pub metadata: BTreeMap<String, String>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub model: Model<f32>,
    pub vocab_fingerprint: String,
    pub lineage: Option<String>,
    pub step: u64,
    pub optimizer: Option<(AdamConfig, AdamState<f32>)>,
    pub rng_seed: Option<u64>,
    pub metadata: BTreeMap<String, String>,
}

const M_PREFIX: &str = "adam.m/";
const V_PREFIX: &str = "adam.v/";

impl Checkpoint {
    pub fn new(model: Model<f32>, vocab_fingerprint: impl Into<String>) -> Self {
        Checkpoint {
            model,
            vocab_fingerprint: vocab_fingerprint.into(),
            lineage: None,
            step: 0,
            optimizer: None,
            rng_seed: None,
            metadata: BTreeMap::new(),
        }
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut entries = Vec::new();
        let mut payload: Vec<u8> = Vec::new();
        let mut offset = 0;
        let mut push = |name: String, a: &Array<f32>| {
            entries.push(ArrayEntry {
                name,
                shape: a.shape.clone(),
                offset,
                len: a.data.len(),
            });
            offset += a.data.len();
            for v in &a.data {
                payload.extend_from_slice(&v.to_le_bytes());
            }
        };
        for a in &self.model.params.arrays {
            push(a.name.clone(), a);
        }
        if let Some((_, st)) = &self.optimizer {
            for a in &st.m.arrays {
                push(format!("{M_PREFIX}{}", a.name), a);
            }
            for a in &st.v.arrays {
                push(format!("{V_PREFIX}{}", a.name), a);
            }
        }
        let header = CheckpointHeader {
            format_version: FORMAT_VERSION,
            config: self.model.config.clone(),
            head: self.model.head,
            vocab_fingerprint: self.vocab_fingerprint.clone(),
            lineage: self.lineage.clone(),
            step: self.step,
            arrays: entries,
            optimizer: self.optimizer.as_ref().map(|(c, st)| OptimizerHeader {
                step: st.step,
                config: *c,
            }),
            rng_seed: self.rng_seed,
            metadata: self.metadata.clone(),
        };
        let json = serde_json::to_vec(&header)?;
        let mut out = Vec::with_capacity(16 + json.len() + payload.len());
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
        out.extend_from_slice(&(json.len() as u64).to_le_bytes());
        out.extend_from_slice(&json);
        out.extend_from_slice(&payload);
        Ok(out)
    }

    pub fn read_header(bytes: &[u8]) -> Result<(CheckpointHeader, usize)> {
        if bytes.len() < 16 {
            return Err(Error::Checkpoint("file truncated before header".into()));
        }
        if &bytes[..4] != MAGIC {
            return Err(Error::Checkpoint("not a checkpoint (bad magic)".into()));
        }
        let version = u32::from_le_bytes(bytes[4..8].try_into().expect("4 bytes"));
        if version != FORMAT_VERSION {
            return Err(Error::Checkpoint(format!(
                "unsupported format version {version} (expected {FORMAT_VERSION})"
            )));
        }
        let hlen = u64::from_le_bytes(bytes[8..16].try_into().expect("8 bytes")) as usize;
        let end = 16usize
            .checked_add(hlen)
            .filter(|&e| e <= bytes.len())
            .ok_or_else(|| Error::Checkpoint("file truncated inside header".into()))?;
        let header: CheckpointHeader = serde_json::from_slice(&bytes[16..end])
            .map_err(|e| Error::Checkpoint(format!("bad header: {e}")))?;
        if header.format_version != version {
            return Err(Error::Checkpoint("header version disagrees with preamble".into()));
        }
        Ok((header, end))
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let (header, start) = Self::read_header(bytes)?;
        let payload = &bytes[start..];
        let total: usize = header.arrays.iter().map(|a| a.len).sum();
        if payload.len() != total * 4 {
            return Err(Error::Checkpoint(format!(
                "payload has {} bytes, manifest needs {}",
                payload.len(),
                total * 4
            )));
        }
        let read = |e: &ArrayEntry| -> Result<Vec<f32>> {
            if e.shape.iter().product::<usize>() != e.len || e.offset + e.len > total {
                return Err(Error::Checkpoint(format!("bad manifest entry {}", e.name)));
            }
            Ok(payload[e.offset * 4..(e.offset + e.len) * 4]
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
                .collect())
        };
        let mut params = Vec::new();
        let mut m = Vec::new();
        let mut v = Vec::new();
        for e in &header.arrays {
            let (name, dst) = if let Some(n) = e.name.strip_prefix(M_PREFIX) {
                (n, &mut m)
            } else if let Some(n) = e.name.strip_prefix(V_PREFIX) {
                (n, &mut v)
            } else {
                (e.name.as_str(), &mut params)
            };
            dst.push(Array {
                name: name.to_string(),
                shape: e.shape.clone(),
                data: read(e)?,
            });
        }
        let model = Model::from_params(header.config.clone(), header.head, ParamSet { arrays: params })?;
        let optimizer = match header.optimizer {
            Some(o) => {
                let st = AdamState {
                    step: o.step,
                    m: ParamSet { arrays: m },
                    v: ParamSet { arrays: v },
                };
                if st.m.arrays.len() != model.params.arrays.len() || st.v.arrays.len() != model.params.arrays.len() {
                    return Err(Error::Checkpoint("optimizer state incomplete".into()));
                }
                Some((o.config, st))
            }
            None => None,
        };
        Ok(Checkpoint {
            model,
            vocab_fingerprint: header.vocab_fingerprint,
            lineage: header.lineage,
            step: header.step,
            optimizer,
            rng_seed: header.rng_seed,
            metadata: header.metadata,
        })
    }

    /// Writes the checkpoint and returns the SHA-256 of the written bytes.
    pub fn save(&self, path: &Path) -> Result<String> {
        let bytes = self.to_bytes()?;
        std::fs::write(path, &bytes).map_err(|e| Error::io(path, e))?;
        Ok(sha256_hex(&bytes))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes)
    }

    /// Loads a checkpoint for continued training; the tokenizer's vocab
    /// fingerprint must match the stored one.
    pub fn load_verified(path: &Path, vocab_fingerprint: &str) -> Result<Self> {
        let ck = Self::load(path)?;
        ck.verify_fingerprint(vocab_fingerprint)?;
        Ok(ck)
    }

    pub fn verify_fingerprint(&self, vocab_fingerprint: &str) -> Result<()> {
        if self.vocab_fingerprint != vocab_fingerprint {
            return Err(Error::Fingerprint {
                expected: self.vocab_fingerprint.clone(),
                found: vocab_fingerprint.to_string(),
            });
        }
        Ok(())
    }

    /// The stored model with `head`; a different stored head is replaced by a
    /// freshly initialized one (truncated normal weights, zero bias).
    pub fn model_for(&self, head: HeadKind, seed: u64) -> Result<Model<f32>> {
        if self.model.head == head {
            Ok(self.model.clone())
        } else {
            self.model.with_head(head, seed)
        }
    }
}
