//! Binary checkpoint: `u64` LE manifest length, JSON manifest ending in a
//! newline, then every tensor as LE `f32` in manifest order.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{build_network, NetConfig, NetworkParams};
use crate::tensor::{Shape, Tensor};

const FORMAT: &str = "msda-checkpoint";
const VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TensorEntry {
    pub path: String,
    pub shape: Shape,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Manifest {
    pub format: String,
    pub version: u32,
    pub net: NetConfig,
    pub step: u64,
    pub tensors: Vec<TensorEntry>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub params: NetworkParams,
    pub step: u64,
}

impl Checkpoint {
    pub fn manifest(&self) -> Manifest {
        Manifest {
            format: FORMAT.into(),
            version: VERSION,
            net: self.params.config.clone(),
            step: self.step,
            tensors: self
                .params
                .store
                .iter()
                .map(|p| TensorEntry {
                    path: p.path.clone(),
                    shape: p.value.shape(),
                })
                .collect(),
        }
    }

    pub fn encode(&self) -> Vec<u8> {
        let mut json = serde_json::to_vec(&self.manifest()).expect("manifest serializes");
        json.push(b'\n');
        let numel = self.params.num_parameters();
        let mut out = Vec::with_capacity(8 + json.len() + 4 * numel);
        out.extend_from_slice(&(json.len() as u64).to_le_bytes());
        out.extend_from_slice(&json);
        for p in self.params.store.iter() {
            for v in p.value.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        out
    }

    pub fn decode(bytes: &[u8]) -> Result<Self> {
        let bad = |msg: String| Error::Checkpoint(msg);
        let len_bytes: [u8; 8] = bytes
            .get(..8)
            .ok_or_else(|| bad("truncated length prefix".into()))?
            .try_into()
            .expect("eight bytes");
        let len = usize::try_from(u64::from_le_bytes(len_bytes))
            .map_err(|_| bad("manifest length overflows".into()))?;
        let json = bytes
            .get(8..8usize.saturating_add(len))
            .ok_or_else(|| bad(format!("manifest of {len} bytes is truncated")))?;
        if json.last() != Some(&b'\n') {
            return Err(bad("manifest is not newline-terminated".into()));
        }
        let manifest: Manifest =
            serde_json::from_slice(json).map_err(|e| bad(format!("manifest: {e}")))?;
        if manifest.format != FORMAT || manifest.version != VERSION {
            return Err(bad(format!(
                "unsupported format {} v{}",
                manifest.format, manifest.version
            )));
        }

        let mut params = build_network(&manifest.net, 0)?;
        let expected: Vec<(&str, Shape)> = params
            .store
            .iter()
            .map(|p| (p.path.as_str(), p.value.shape()))
            .collect();
        let found: Vec<(&str, Shape)> = manifest
            .tensors
            .iter()
            .map(|t| (t.path.as_str(), t.shape))
            .collect();
        if expected != found {
            return Err(bad("tensor list does not match the network config".into()));
        }

        let mut blob = &bytes[8 + len..];
        let numel = params.num_parameters();
        if blob.len() != 4 * numel {
            return Err(bad(format!(
                "blob holds {} bytes, expected {}",
                blob.len(),
                4 * numel
            )));
        }
        for p in params.store.iter_mut() {
            let n = p.value.numel();
            let (head, rest) = blob.split_at(4 * n);
            let data = head
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes(c.try_into().expect("four bytes")))
                .collect();
            p.value = Tensor::new(p.value.shape(), data)?;
            blob = rest;
        }
        Ok(Checkpoint {
            params,
            step: manifest.step,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.encode()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::decode(&bytes).map_err(|e| match e {
            Error::Checkpoint(msg) => Error::Checkpoint(format!("{}: {msg}", path.display())),
            other => other,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample() -> Checkpoint {
        let mut params = build_network(&NetConfig::tiny(), 5).unwrap();
        // Non-default values in every slot, including biases.
        for (i, p) in params.store.iter_mut().enumerate() {
            for (j, v) in p.value.data_mut().iter_mut().enumerate() {
                *v += (i * 31 + j) as f32 * 1e-3;
            }
        }
        Checkpoint { params, step: 42 }
    }

    #[test]
    fn round_trip_is_bitwise() {
        let ck = sample();
        let back = Checkpoint::decode(&ck.encode()).unwrap();
        assert_eq!(back.step, 42);
        for (a, b) in ck.params.store.iter().zip(back.params.store.iter()) {
            assert_eq!(a.path, b.path);
            let bits = |t: &Tensor<f32>| t.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>();
            assert_eq!(bits(&a.value), bits(&b.value));
        }
    }

    #[test]
    fn layout() {
        let ck = sample();
        let bytes = ck.encode();
        let len = u64::from_le_bytes(bytes[..8].try_into().unwrap()) as usize;
        assert_eq!(bytes[8 + len - 1], b'\n');
        assert_eq!(bytes.len(), 8 + len + 4 * ck.params.num_parameters());
        let first = ck.params.store.iter().next().unwrap().value.data()[0];
        assert_eq!(bytes[8 + len..8 + len + 4], first.to_le_bytes());
    }

    #[test]
    fn corrupt_inputs_rejected() {
        let bytes = sample().encode();
        assert!(Checkpoint::decode(&bytes[..4]).is_err());
        assert!(Checkpoint::decode(&bytes[..bytes.len() - 1]).is_err());
        let mut extra = bytes.clone();
        extra.push(0);
        assert!(Checkpoint::decode(&extra).is_err());
        let mut wrong_len = bytes;
        wrong_len[0] ^= 1;
        assert!(Checkpoint::decode(&wrong_len).is_err());
    }
}
