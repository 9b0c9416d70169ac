//! Binary checkpoint container.
//!
//! Layout: the 8-byte magic `TAUGENCK`, a little-endian `u32` format version,
//! a little-endian `u64` header length, the JSON header, then every block's
//! values back to back in little-endian order. Block offsets in the header are
//! byte offsets into that trailing data section.

use std::path::Path;

use serde::{Deserialize, Serialize};
use taugen_core::autoencoder::{AutoencoderConfig, AutoencoderParams};
use taugen_core::denoiser::{DenoiserConfig, DenoiserParams};
use taugen_core::nn::{Adam, AdamConfig, ParamSpec};
use taugen_core::prompt::COND_DIM;
use taugen_core::schedule::ScheduleConfig;
use taugen_core::trainer::{TrainConfig, TrainState};

use crate::error::{AppError, AppResult};

pub const MAGIC: &[u8; 8] = b"TAUGENCK";
pub const FORMAT_VERSION: u32 = 1;
pub const PROMPT_CODEC_VERSION: &str = "1";

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Dtype {
    F32,
    F64,
}

impl Dtype {
    fn width(self) -> usize {
        match self {
            Dtype::F32 => 4,
            Dtype::F64 => 8,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BlockInfo {
    pub name: String,
    pub dtype: Dtype,
    pub shape: Vec<usize>,
    pub offset: u64,
}

impl BlockInfo {
    fn len(&self) -> usize {
        self.shape.iter().product()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum CheckpointKind {
    Autoencoder,
    Denoiser,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PromptCodecInfo {
    pub version: String,
    pub cond_dim: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OptimizerInfo {
    pub config: AdamConfig,
    pub step: u64,
}

/// Where the per-step batch streams resume.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RngInfo {
    pub root_seed: u64,
    pub next_step: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Header {
    pub kind: CheckpointKind,
    pub step: u64,
    pub fingerprint: String,
    pub schedule: ScheduleConfig,
    pub prompt_codec: PromptCodecInfo,
    pub autoencoder: AutoencoderConfig,
    pub denoiser: Option<DenoiserConfig>,
    /// Input channels of the denoiser's first convolution.
    pub first_layer_in_channels: Option<usize>,
    pub train: Option<TrainConfig>,
    pub optimizer: Option<OptimizerInfo>,
    pub rng: RngInfo,
    pub blocks: Vec<BlockInfo>,
}

#[derive(Clone, Debug)]
pub struct Checkpoint {
    pub step: u64,
    pub fingerprint: String,
    pub seed: u64,
    pub schedule: ScheduleConfig,
    pub autoencoder: AutoencoderParams<f32>,
    pub denoiser: Option<DenoiserParams<f32>>,
    pub train: Option<TrainConfig>,
    pub optimizer: Option<Adam<f32>>,
    /// Raw loss per completed step.
    pub losses: Vec<f64>,
}

enum Data<'a> {
    F32(&'a [f32]),
    F64(&'a [f64]),
}

const AE_PREFIX: &str = "autoencoder/";
const DENOISER_PREFIX: &str = "denoiser/";

impl Checkpoint {
    pub fn kind(&self) -> CheckpointKind {
        if self.denoiser.is_some() {
            CheckpointKind::Denoiser
        } else {
            CheckpointKind::Autoencoder
        }
    }

    /// Training state to continue from; `None` for autoencoder checkpoints.
    pub fn train_state(&self) -> Option<TrainState> {
        let model = self.denoiser.clone()?;
        let optimizer = self.optimizer.clone()?;
        Some(TrainState { model, optimizer, step: self.step, seed: self.seed, losses: self.losses.clone() })
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut parts: Vec<(String, Vec<usize>, Data)> = Vec::new();
        for (prefix, params) in [(AE_PREFIX, Some(&self.autoencoder.params)), (DENOISER_PREFIX, self.denoiser.as_ref().map(|d| &d.params))] {
            let Some(ps) = params else { continue };
            for s in &ps.specs {
                parts.push((format!("{prefix}{}", s.name), s.shape.clone(), Data::F32(&ps.values[s.offset..s.offset + s.len()])));
            }
        }
        if let Some(opt) = &self.optimizer {
            parts.push(("adam/m".into(), vec![opt.m.len()], Data::F32(&opt.m)));
            parts.push(("adam/v".into(), vec![opt.v.len()], Data::F32(&opt.v)));
        }
        parts.push(("loss/raw".into(), vec![self.losses.len()], Data::F64(&self.losses)));

        let mut blocks = Vec::with_capacity(parts.len());
        let mut data = Vec::new();
        for (name, shape, values) in &parts {
            let offset = data.len() as u64;
            let dtype = match values {
                Data::F32(v) => {
                    v.iter().for_each(|x| data.extend_from_slice(&x.to_le_bytes()));
                    Dtype::F32
                }
                Data::F64(v) => {
                    v.iter().for_each(|x| data.extend_from_slice(&x.to_le_bytes()));
                    Dtype::F64
                }
            };
            blocks.push(BlockInfo { name: name.clone(), dtype, shape: shape.clone(), offset });
        }
        let header = Header {
            kind: self.kind(),
            step: self.step,
            fingerprint: self.fingerprint.clone(),
            schedule: self.schedule,
            prompt_codec: PromptCodecInfo { version: PROMPT_CODEC_VERSION.into(), cond_dim: COND_DIM },
            autoencoder: self.autoencoder.config.clone(),
            denoiser: self.denoiser.as_ref().map(|d| d.config.clone()),
            first_layer_in_channels: self.denoiser.as_ref().map(|d| d.first_layer_in_channels()),
            train: self.train.clone(),
            optimizer: self.optimizer.as_ref().map(|o| OptimizerInfo { config: o.config, step: o.step }),
            rng: RngInfo { root_seed: self.seed, next_step: self.step },
            blocks,
        };
        let json = serde_json::to_vec(&header).expect("header serializes");
        let mut out = Vec::with_capacity(20 + json.len() + data.len());
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
        out.extend_from_slice(&(json.len() as u64).to_le_bytes());
        out.extend_from_slice(&json);
        out.extend_from_slice(&data);
        out
    }

    pub fn read_header(bytes: &[u8]) -> AppResult<(Header, &[u8])> {
        let bad = |m: &str| AppError::Checkpoint(m.to_string());
        if bytes.len() < 20 || &bytes[..8] != MAGIC {
            return Err(bad("not a checkpoint file"));
        }
        let version = u32::from_le_bytes(bytes[8..12].try_into().unwrap());
        if version != FORMAT_VERSION {
            return Err(bad(&format!("unsupported format version {version}")));
        }
        let hlen = u64::from_le_bytes(bytes[12..20].try_into().unwrap()) as usize;
        let body = &bytes[20..];
        if body.len() < hlen {
            return Err(bad("truncated header"));
        }
        let header: Header = serde_json::from_slice(&body[..hlen]).map_err(|e| bad(&format!("header: {e}")))?;
        Ok((header, &body[hlen..]))
    }

    pub fn from_bytes(bytes: &[u8]) -> AppResult<Self> {
        let (h, data) = Self::read_header(bytes)?;
        let bad = |m: String| AppError::Checkpoint(m);
        let block_bytes = |b: &BlockInfo| -> AppResult<&[u8]> {
            let start = b.offset as usize;
            let end = start + b.len() * b.dtype.width();
            data.get(start..end).ok_or_else(|| bad(format!("block {} out of range", b.name)))
        };
        let f32s = |b: &BlockInfo| -> AppResult<Vec<f32>> {
            if b.dtype != Dtype::F32 {
                return Err(bad(format!("block {} must be f32", b.name)));
            }
            Ok(block_bytes(b)?.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().unwrap())).collect())
        };
        let params = |prefix: &str| -> AppResult<(Vec<ParamSpec>, Vec<f32>)> {
            let mut specs = Vec::new();
            let mut values = Vec::new();
            for b in h.blocks.iter().filter(|b| b.name.starts_with(prefix)) {
                specs.push(ParamSpec { name: b.name[prefix.len()..].to_string(), offset: values.len(), shape: b.shape.clone() });
                values.extend(f32s(b)?);
            }
            Ok((specs, values))
        };
        let find = |name: &str| h.blocks.iter().find(|b| b.name == name);

        let (specs, values) = params(AE_PREFIX)?;
        let autoencoder = AutoencoderParams::from_values(&h.autoencoder, &specs, values)?;
        let denoiser = match &h.denoiser {
            Some(cfg) => {
                let (specs, values) = params(DENOISER_PREFIX)?;
                Some(DenoiserParams::from_values(cfg, &specs, values)?)
            }
            None => None,
        };
        let optimizer = match (&h.optimizer, find("adam/m"), find("adam/v")) {
            (Some(info), Some(m), Some(v)) => {
                Some(Adam { config: info.config, m: f32s(m)?, v: f32s(v)?, step: info.step })
            }
            (None, None, None) => None,
            _ => return Err(bad("incomplete optimizer state".into())),
        };
        let losses = match find("loss/raw") {
            Some(b) if b.dtype == Dtype::F64 => {
                block_bytes(b)?.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().unwrap())).collect()
            }
            Some(b) => return Err(bad(format!("block {} must be f64", b.name))),
            None => Vec::new(),
        };
        Ok(Checkpoint {
            step: h.step,
            fingerprint: h.fingerprint,
            seed: h.rng.root_seed,
            schedule: h.schedule,
            autoencoder,
            denoiser,
            train: h.train,
            optimizer,
            losses,
        })
    }

    pub fn save(&self, path: &Path) -> AppResult<()> {
        crate::fsutil::write_atomic(path, &self.to_bytes())
    }

    pub fn load(path: &Path) -> AppResult<Self> {
        let bytes = std::fs::read(path).map_err(|e| AppError::io(path, e))?;
        Self::from_bytes(&bytes)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample() -> Checkpoint {
        let ae_cfg = AutoencoderConfig { widths: [2, 2, 4], ..AutoencoderConfig::learned(16) };
        let den_cfg = DenoiserConfig::tiny(4, 4, true);
        let den = DenoiserParams::init(&den_cfg, 1).unwrap();
        let mut opt = Adam::new(AdamConfig::default(), den.params.len());
        opt.m[3] = 0.25;
        opt.step = 7;
        Checkpoint {
            step: 7,
            fingerprint: "abc".into(),
            seed: 11,
            schedule: ScheduleConfig::default(),
            autoencoder: AutoencoderParams::init(&ae_cfg, 2).unwrap(),
            denoiser: Some(den),
            train: Some(TrainConfig::default()),
            optimizer: Some(opt),
            losses: vec![1.0, 0.5, 0.25],
        }
    }

    #[test]
    fn save_load_save_is_identical() {
        let c = sample();
        let bytes = c.to_bytes();
        let back = Checkpoint::from_bytes(&bytes).unwrap();
        assert_eq!(back.to_bytes(), bytes);
        assert_eq!(back.losses, c.losses);
        assert_eq!(back.optimizer, c.optimizer);
        assert_eq!(back.denoiser.as_ref().unwrap().params, c.denoiser.as_ref().unwrap().params);
        let (h, _) = Checkpoint::read_header(&bytes).unwrap();
        assert_eq!(h.first_layer_in_channels, Some(8));
        assert_eq!(h.kind, CheckpointKind::Denoiser);
    }

    #[test]
    fn rejects_garbage() {
        assert!(Checkpoint::from_bytes(b"not a checkpoint at all").is_err());
        let mut bytes = sample().to_bytes();
        bytes.truncate(bytes.len() - 10);
        assert!(Checkpoint::from_bytes(&bytes).is_err());
    }
}
