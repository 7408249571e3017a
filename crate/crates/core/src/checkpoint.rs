//! Versioned binary checkpoint: an 8-byte magic, a little-endian `u32`
//! version, a `u64` header length, a JSON header and a raw little-endian
//! float64 payload.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::fourier::MaskSpec;
use crate::models::{DenoiserConfig, DenoiserNet, EncoderConfig, IstaConfig, IstaNetParams, Params, WeightEncoder};
use crate::tensor::{Shape, Tensor};

pub const MAGIC: &[u8; 8] = b"SMUGCKPT";
pub const FORMAT_VERSION: u32 = 1;

fn format_err(msg: impl Into<String>) -> Error {
    Error::Format(msg.into())
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct ModelCheckpoint {
    pub denoiser: Option<DenoiserNet>,
    pub encoder: Option<WeightEncoder>,
    pub ista: Option<IstaNetParams>,
    /// Free-form snapshot of the training configuration.
    pub train_config: serde_json::Value,
    pub seeds: BTreeMap<String, u64>,
    pub mask: Option<MaskSpec>,
}

#[derive(Serialize, Deserialize)]
struct TensorEntry {
    name: String,
    shape: Shape,
    dtype: String,
    offset: usize,
}

#[derive(Serialize, Deserialize)]
struct Header {
    version: u32,
    denoiser: Option<DenoiserConfig>,
    encoder: Option<EncoderConfig>,
    ista: Option<IstaConfig>,
    train_config: serde_json::Value,
    seeds: BTreeMap<String, u64>,
    mask: Option<MaskSpec>,
    tensors: Vec<TensorEntry>,
}

const GROUPS: [&str; 3] = ["denoiser", "encoder", "ista"];

impl ModelCheckpoint {
    fn groups(&self) -> [Option<&Params>; 3] {
        [
            self.denoiser.as_ref().map(DenoiserNet::params),
            self.encoder.as_ref().map(WeightEncoder::params),
            self.ista.as_ref().map(IstaNetParams::params),
        ]
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut entries = Vec::new();
        let mut payload: Vec<u8> = Vec::new();
        let mut offset = 0;
        for (group, params) in GROUPS.iter().zip(self.groups()) {
            let Some(params) = params else { continue };
            for (name, t) in params.names().iter().zip(params.tensors()) {
                entries.push(TensorEntry {
                    name: format!("{group}/{name}"),
                    shape: t.shape(),
                    dtype: "float64".into(),
                    offset,
                });
                payload.extend(t.data().iter().flat_map(|v| v.to_le_bytes()));
                offset += t.len();
            }
        }
        let header = Header {
            version: FORMAT_VERSION,
            denoiser: self.denoiser.as_ref().map(|d| d.config().clone()),
            encoder: self.encoder.as_ref().map(|e| e.config().clone()),
            ista: self.ista.as_ref().map(|i| i.config().clone()),
            train_config: self.train_config.clone(),
            seeds: self.seeds.clone(),
            mask: self.mask.clone(),
            tensors: entries,
        };
        let json = serde_json::to_vec(&header).map_err(|e| format_err(e.to_string()))?;
        let mut out = Vec::with_capacity(20 + json.len() + payload.len());
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
        out.extend_from_slice(&(json.len() as u64).to_le_bytes());
        out.extend_from_slice(&json);
        out.extend_from_slice(&payload);
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < 20 || &bytes[..8] != MAGIC {
            return Err(format_err("not a checkpoint (bad magic)"));
        }
        let version = u32::from_le_bytes(bytes[8..12].try_into().unwrap());
        if version != FORMAT_VERSION {
            return Err(format_err(format!("unsupported checkpoint version {version}")));
        }
        let hlen = u64::from_le_bytes(bytes[12..20].try_into().unwrap()) as usize;
        let body = &bytes[20..];
        if body.len() < hlen {
            return Err(format_err("truncated header"));
        }
        let header: Header = serde_json::from_slice(&body[..hlen]).map_err(|e| format_err(e.to_string()))?;
        let payload = &body[hlen..];
        if !payload.len().is_multiple_of(8) {
            return Err(format_err("payload is not a whole number of float64 values"));
        }
        let floats: Vec<f64> = payload
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect();

        let mut grouped: BTreeMap<&str, (Vec<String>, Vec<Tensor>)> = BTreeMap::new();
        for e in &header.tensors {
            if e.dtype != "float64" {
                return Err(format_err(format!("unsupported dtype {}", e.dtype)));
            }
            let (group, name) = e
                .name
                .split_once('/')
                .ok_or_else(|| format_err(format!("tensor name {} has no group", e.name)))?;
            let group = GROUPS
                .iter()
                .find(|g| **g == group)
                .ok_or_else(|| format_err(format!("unknown group {group}")))?;
            let end = e.offset + e.shape.len();
            if end > floats.len() {
                return Err(format_err(format!("tensor {} runs past the payload", e.name)));
            }
            let slot = grouped.entry(group).or_default();
            slot.0.push(name.to_string());
            slot.1.push(Tensor::new(e.shape, floats[e.offset..end].to_vec()));
        }
        let mut take = |g: &str| {
            grouped
                .remove(g)
                .map(|(n, t)| Params::from_parts(n, t))
                .ok_or_else(|| format_err(format!("header lists a {g} but no tensors")))
        };
        let denoiser = match header.denoiser {
            Some(cfg) => Some(DenoiserNet::from_params(cfg, take("denoiser")?)?),
            None => None,
        };
        let encoder = match header.encoder {
            Some(cfg) => Some(WeightEncoder::from_params(cfg, take("encoder")?)?),
            None => None,
        };
        let ista = match header.ista {
            Some(cfg) => Some(IstaNetParams::from_params(cfg, take("ista")?)?),
            None => None,
        };
        if !grouped.is_empty() {
            return Err(format_err("tensors present for an undeclared model"));
        }
        Ok(Self {
            denoiser,
            encoder,
            ista,
            train_config: header.train_config,
            seeds: header.seeds,
            mask: header.mask,
        })
    }

    /// Writes through a temporary sibling and renames, so a crash never
    /// leaves a truncated checkpoint under the final name.
    pub fn save(&self, path: &Path) -> Result<()> {
        let bytes = self.to_bytes()?;
        let tmp = path.with_extension("partial");
        fs::write(&tmp, bytes)?;
        fs::rename(&tmp, path)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_bytes(&fs::read(path)?)
    }
}
