//! Checkpoint files: a JSON manifest plus little-endian f32 parameters, sealed
//! with a SHA-256 of everything before it.
//!
//! Layout: `LFTSCKPT`, u32 format version, u64 manifest length, manifest,
//! u64 blob length, blob, 32-byte digest.

use std::collections::HashMap;
use std::path::Path;

use candle_core::{DType, Device, Tensor};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::data::NormStats;
use crate::error::{Error, Result};
use crate::flow::{LatentNormStats, VectorFieldState};
use crate::nets::{
    AutoencoderConfig, Decoder, Discriminator, DiscriminatorConfig, Encoder, NamedVar, StoredParams,
    VectorField, VectorFieldConfig,
};
use crate::transforms::GroupAction;
use crate::vae::AutoencoderState;

pub const MAGIC: &[u8; 8] = b"LFTSCKPT";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TensorEntry {
    pub name: String,
    pub shape: Vec<usize>,
    /// Offset into the blob, in f32 elements.
    pub offset: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum ModelInfo {
    Autoencoder {
        autoencoder: AutoencoderConfig,
        discriminator: DiscriminatorConfig,
        norm: NormStats,
        /// Action used for equivariance fine-tuning, `None` for a base model.
        finetuned_with: Option<GroupAction>,
    },
    Flow {
        field: VectorFieldConfig,
        latent_stats: LatentNormStats,
        /// Digest of the autoencoder checkpoint whose latents trained this flow.
        autoencoder_digest: Option<String>,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub format_version: u32,
    pub crate_version: String,
    pub model: ModelInfo,
    pub steps: u64,
    pub seed: u64,
    /// Experiment configuration snapshot taken when the model was trained.
    pub config: serde_json::Value,
    pub tensors: Vec<TensorEntry>,
}

/// In-memory checkpoint: manifest plus raw parameter values.
#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub manifest: Manifest,
    pub blob: Vec<f32>,
}

fn corrupt(msg: impl Into<String>) -> Error {
    Error::Checkpoint(msg.into())
}

impl Checkpoint {
    fn from_vars(model: ModelInfo, steps: u64, seed: u64, config: serde_json::Value, vars: &[NamedVar]) -> Result<Self> {
        let mut tensors = Vec::with_capacity(vars.len());
        let mut blob = Vec::new();
        for (name, v) in vars {
            let t = v.as_tensor();
            tensors.push(TensorEntry {
                name: name.clone(),
                shape: t.dims().to_vec(),
                offset: blob.len(),
            });
            blob.extend(t.to_dtype(DType::F32)?.flatten_all()?.to_vec1::<f32>()?);
        }
        Ok(Self {
            manifest: Manifest {
                format_version: FORMAT_VERSION,
                crate_version: env!("CARGO_PKG_VERSION").to_string(),
                model,
                steps,
                seed,
                config,
                tensors,
            },
            blob,
        })
    }

    pub fn from_autoencoder(
        state: &AutoencoderState,
        finetuned_with: Option<GroupAction>,
        seed: u64,
        config: serde_json::Value,
    ) -> Result<Self> {
        let mut vars = state.encoder.named_vars();
        vars.extend(state.decoder.named_vars());
        vars.extend(state.discriminator.named_vars());
        let model = ModelInfo::Autoencoder {
            autoencoder: state.config().clone(),
            discriminator: state.discriminator.config().clone(),
            norm: state.norm.clone(),
            finetuned_with,
        };
        Self::from_vars(model, state.steps, seed, config, &vars)
    }

    pub fn from_flow(
        state: &VectorFieldState,
        autoencoder_digest: Option<String>,
        seed: u64,
        config: serde_json::Value,
    ) -> Result<Self> {
        let model = ModelInfo::Flow {
            field: state.field.config().clone(),
            latent_stats: state.stats.clone(),
            autoencoder_digest,
        };
        Self::from_vars(model, state.steps, seed, config, &state.field.named_vars())
    }

    fn params(&self, dtype: DType) -> Result<StoredParams> {
        let mut tensors = HashMap::new();
        for e in &self.manifest.tensors {
            let n: usize = e.shape.iter().product();
            let end = e.offset.checked_add(n).filter(|&end| end <= self.blob.len());
            let end = end.ok_or_else(|| corrupt(format!("tensor `{}` runs past the blob", e.name)))?;
            let t = Tensor::from_slice(&self.blob[e.offset..end], e.shape.as_slice(), &Device::Cpu)?;
            tensors.insert(e.name.clone(), t);
        }
        Ok(StoredParams { tensors, dtype })
    }

    fn ensure_consumed(src: StoredParams) -> Result<()> {
        if let Some(name) = src.tensors.keys().min() {
            return Err(corrupt(format!("unexpected parameter `{name}`")));
        }
        Ok(())
    }

    /// Rebuilds the autoencoder; returns the fine-tuning action recorded with it.
    pub fn to_autoencoder(&self, dtype: DType) -> Result<(AutoencoderState, Option<GroupAction>)> {
        let ModelInfo::Autoencoder {
            autoencoder,
            discriminator,
            norm,
            finetuned_with,
        } = &self.manifest.model
        else {
            return Err(Error::Dependency("checkpoint holds a flow, expected an autoencoder".into()));
        };
        let mut src = self.params(dtype)?;
        let state = AutoencoderState {
            encoder: Encoder::build(autoencoder, &mut src, dtype)?,
            decoder: Decoder::build(autoencoder, &mut src, dtype)?,
            discriminator: Discriminator::build(discriminator, &mut src, dtype)?,
            norm: norm.clone(),
            steps: self.manifest.steps,
        };
        Self::ensure_consumed(src)?;
        Ok((state, *finetuned_with))
    }

    pub fn to_flow(&self, dtype: DType) -> Result<VectorFieldState> {
        let ModelInfo::Flow { field, latent_stats, .. } = &self.manifest.model else {
            return Err(Error::Dependency("checkpoint holds an autoencoder, expected a flow".into()));
        };
        let mut src = self.params(dtype)?;
        let state = VectorFieldState {
            field: VectorField::build(field, &mut src, dtype)?,
            stats: latent_stats.clone(),
            steps: self.manifest.steps,
        };
        Self::ensure_consumed(src)?;
        Ok(state)
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let manifest = serde_json::to_vec(&self.manifest)?;
        let mut out = Vec::with_capacity(8 + 4 + 16 + manifest.len() + 4 * self.blob.len() + 32);
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
        out.extend_from_slice(&(manifest.len() as u64).to_le_bytes());
        out.extend_from_slice(&manifest);
        out.extend_from_slice(&(self.blob.len() as u64 * 4).to_le_bytes());
        for v in &self.blob {
            out.extend_from_slice(&v.to_le_bytes());
        }
        let digest = Sha256::digest(&out);
        out.extend_from_slice(&digest);
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < MAGIC.len() || &bytes[..MAGIC.len()] != MAGIC {
            return Err(corrupt("not a checkpoint file (bad magic)"));
        }
        if bytes.len() < MAGIC.len() + 4 + 8 + 8 + 32 {
            return Err(corrupt("checksum mismatch (file truncated)"));
        }
        let (body, digest) = bytes.split_at(bytes.len() - 32);
        if Sha256::digest(body).as_slice() != digest {
            return Err(corrupt("checksum mismatch (file corrupt or truncated)"));
        }
        let mut pos = MAGIC.len();
        let mut take = |n: usize| -> Result<&[u8]> {
            let s = body.get(pos..pos + n).ok_or_else(|| corrupt("unexpected end of file"))?;
            pos += n;
            Ok(s)
        };
        let version = u32::from_le_bytes(take(4)?.try_into().expect("4 bytes"));
        if version != FORMAT_VERSION {
            return Err(corrupt(format!(
                "format version {version} is not supported (expected {FORMAT_VERSION})"
            )));
        }
        let mlen = u64::from_le_bytes(take(8)?.try_into().expect("8 bytes")) as usize;
        let manifest: Manifest = serde_json::from_slice(take(mlen)?)?;
        if manifest.format_version != FORMAT_VERSION {
            return Err(corrupt(format!(
                "manifest version {} does not match {FORMAT_VERSION}",
                manifest.format_version
            )));
        }
        let blen = u64::from_le_bytes(take(8)?.try_into().expect("8 bytes")) as usize;
        let raw = take(blen)?;
        if blen % 4 != 0 {
            return Err(corrupt("parameter blob is not a whole number of f32 values"));
        }
        let blob = raw
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
            .collect();
        Ok(Self { manifest, blob })
    }

    /// Hex SHA-256 of the serialised checkpoint.
    pub fn digest(&self) -> Result<String> {
        let bytes = self.to_bytes()?;
        Ok(hex(&bytes[bytes.len() - 32..]))
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
}

pub(crate) fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}
