//! Single-file checkpoint container.
//!
//! Layout (all integers little-endian):
//!
//! | bytes          | content                                  |
//! |----------------|------------------------------------------|
//! | 8              | magic `WSCDCKPT`                         |
//! | 4              | format version (`u32`, currently 1)      |
//! | 8              | header length `L` (`u64`)                |
//! | `L`            | UTF-8 JSON header                        |
//! | rest           | tensor payload, `f64` values             |
//!
//! The header holds the resolved run configuration text, the iteration, the
//! RNG state and an index of tensors (`name`, `shape`, `dtype`, `offset` and
//! `len` in elements from the start of the payload). Model parameters use
//! their own names; optimiser moments are stored as `adam.m.<name>` and
//! `adam.v.<name>` with step counts in the header.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::optim::{AdamW, MomentState};
use crate::error::{Error, Result};
use crate::params::ParamStore;
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 8] = b"WSCDCKPT";
pub const VERSION: u32 = 1;
const M_PREFIX: &str = "adam.m.";
const V_PREFIX: &str = "adam.v.";

/// Streams are stateless functions of `(seed, iteration, slot)`, so this is all
/// that is needed to resume them.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct RngState {
    pub seed: u64,
    pub iteration: u64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub config_text: String,
    pub iteration: u64,
    pub rng: RngState,
    pub params: ParamStore,
    pub optimizer: AdamW,
}

#[derive(Serialize, Deserialize)]
struct TensorEntry {
    name: String,
    shape: Vec<usize>,
    dtype: String,
    offset: usize,
    len: usize,
}

#[derive(Serialize, Deserialize)]
struct Header {
    version: u32,
    config: String,
    iteration: u64,
    rng: RngState,
    optimizer_steps: BTreeMap<String, u64>,
    tensors: Vec<TensorEntry>,
}

fn bad(msg: impl Into<String>) -> Error {
    Error::Checkpoint(msg.into())
}

impl Checkpoint {
    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut entries = Vec::new();
        let mut payload: Vec<u8> = Vec::new();
        let mut offset = 0;
        let mut push = |name: String, t: &Tensor, entries: &mut Vec<TensorEntry>| {
            entries.push(TensorEntry {
                name,
                shape: t.shape().to_vec(),
                dtype: "f64".into(),
                offset,
                len: t.numel(),
            });
            offset += t.numel();
            for v in t.data() {
                payload.extend_from_slice(&v.to_le_bytes());
            }
        };
        for (name, t) in self.params.iter() {
            push(name.clone(), t, &mut entries);
        }
        let mut steps = BTreeMap::new();
        for (name, st) in &self.optimizer.state {
            push(format!("{M_PREFIX}{name}"), &st.m, &mut entries);
            push(format!("{V_PREFIX}{name}"), &st.v, &mut entries);
            steps.insert(name.clone(), st.steps);
        }
        let header = Header {
            version: VERSION,
            config: self.config_text.clone(),
            iteration: self.iteration,
            rng: self.rng,
            optimizer_steps: steps,
            tensors: entries,
        };
        let json = serde_json::to_vec(&header)?;
        let mut out = Vec::with_capacity(20 + json.len() + payload.len());
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.extend_from_slice(&(json.len() as u64).to_le_bytes());
        out.extend_from_slice(&json);
        out.extend_from_slice(&payload);
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < 20 || &bytes[..8] != MAGIC {
            return Err(bad("not a checkpoint file"));
        }
        let version = u32::from_le_bytes(bytes[8..12].try_into().expect("4 bytes"));
        if version != VERSION {
            return Err(bad(format!("unsupported checkpoint version {version}")));
        }
        let hlen = u64::from_le_bytes(bytes[12..20].try_into().expect("8 bytes")) as usize;
        let body = bytes.get(20..20 + hlen).ok_or_else(|| bad("truncated header"))?;
        let header: Header = serde_json::from_slice(body)?;
        let payload = &bytes[20 + hlen..];
        let mut params = ParamStore::new();
        let mut moments: BTreeMap<String, (Option<Tensor>, Option<Tensor>)> = BTreeMap::new();
        for e in &header.tensors {
            if e.dtype != "f64" {
                return Err(bad(format!("tensor {} has unsupported dtype {}", e.name, e.dtype)));
            }
            if e.shape.iter().product::<usize>() != e.len {
                return Err(bad(format!("tensor {} has inconsistent shape", e.name)));
            }
            let raw = payload
                .get(e.offset * 8..(e.offset + e.len) * 8)
                .ok_or_else(|| bad(format!("tensor {} lies outside the payload", e.name)))?;
            let data = raw
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
                .collect();
            let t = Tensor::new(&e.shape, data);
            if let Some(n) = e.name.strip_prefix(M_PREFIX) {
                moments.entry(n.to_string()).or_default().0 = Some(t);
            } else if let Some(n) = e.name.strip_prefix(V_PREFIX) {
                moments.entry(n.to_string()).or_default().1 = Some(t);
            } else {
                params.insert(e.name.clone(), t);
            }
        }
        let mut optimizer = AdamW::new();
        for (name, (m, v)) in moments {
            let (Some(m), Some(v)) = (m, v) else {
                return Err(bad(format!("incomplete optimiser state for {name}")));
            };
            let steps = *header
                .optimizer_steps
                .get(&name)
                .ok_or_else(|| bad(format!("missing step count for {name}")))?;
            optimizer.state.insert(name, MomentState { m, v, steps });
        }
        Ok(Self {
            config_text: header.config,
            iteration: header.iteration,
            rng: header.rng,
            params,
            optimizer,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        if let Some(dir) = path.parent() {
            if !dir.as_os_str().is_empty() {
                fs::create_dir_all(dir)?;
            }
        }
        fs::write(path, self.to_bytes()?)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_bytes(&fs::read(path)?)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample() -> Checkpoint {
        let mut params = ParamStore::new();
        params.insert("encoder.w", Tensor::new(&[2, 2], vec![1.0, -0.0, f64::MIN_POSITIVE, 1e300]));
        params.insert("classifier.bias", Tensor::new(&[1], vec![0.1]));
        let mut optimizer = AdamW::new();
        optimizer.state.insert(
            "encoder.w".into(),
            MomentState {
                m: Tensor::full(&[2, 2], 0.5),
                v: Tensor::full(&[2, 2], 0.25),
                steps: 7,
            },
        );
        Checkpoint {
            config_text: "[model]\nmode = transwcd\n".into(),
            iteration: 42,
            rng: RngState { seed: 3, iteration: 42 },
            params,
            optimizer,
        }
    }

    #[test]
    fn round_trip_is_exact() {
        let c = sample();
        let back = Checkpoint::from_bytes(&c.to_bytes().unwrap()).unwrap();
        assert_eq!(back, c);
        assert_eq!(back.params.get("encoder.w").unwrap().data()[1].to_bits(), (-0.0f64).to_bits());
    }

    #[test]
    fn rejects_garbage() {
        assert!(Checkpoint::from_bytes(b"nope").is_err());
        let mut bytes = sample().to_bytes().unwrap();
        bytes[8] = 9;
        assert!(matches!(Checkpoint::from_bytes(&bytes), Err(Error::Checkpoint(_))));
        let bytes = sample().to_bytes().unwrap();
        assert!(Checkpoint::from_bytes(&bytes[..bytes.len() - 8]).is_err());
    }
}
