//! Single-file checkpoint container.
//!
//! Layout: the magic bytes `UAE3D`, a little-endian `u32` format version,
//! a little-endian `u32` header length, the JSON header, then every
//! parameter as little-endian `f32` values in header order.

use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::autograd::ParamStore;
use crate::error::{Error, Result};
use crate::tensor::Tensor;
use crate::udm::LatentStats;

use super::config::{Stage, TrainConfig};

pub const MAGIC: &[u8; 5] = b"UAE3D";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ParamEntry {
    pub path: String,
    pub shape: [usize; 2],
    pub dtype: String,
}

/// Where a run stopped; training streams are derived from the seed and
/// these counters, so they are all that is needed to continue.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ResumeState {
    pub seed: u64,
    pub epochs_done: usize,
    pub steps_done: usize,
}

/// Dataset facts that sampling and evaluation need later.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct DatasetSummary {
    /// `atom_histogram[n]` molecules with `n` atoms.
    pub atom_histogram: Vec<u64>,
    /// `(n_atoms, heavy_atoms)` per training molecule, sorted.
    pub sizes: Vec<(usize, usize)>,
    /// Canonical keys of the training graphs, sorted and deduplicated.
    pub train_keys: Vec<String>,
    /// Largest heavy-atom count, used to scale the condition to `[0, 1]`.
    pub max_heavy_atoms: usize,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
struct Header {
    stage: Stage,
    config: TrainConfig,
    params: Vec<ParamEntry>,
    latent_stats: Option<LatentStats>,
    dataset: DatasetSummary,
    resume: ResumeState,
    /// Digest of the autoencoder checkpoint a denoiser was trained on.
    vae_digest: Option<String>,
}

#[derive(Clone, Debug)]
pub struct Checkpoint {
    pub stage: Stage,
    pub config: TrainConfig,
    pub params: ParamStore,
    pub latent_stats: Option<LatentStats>,
    pub dataset: DatasetSummary,
    pub resume: ResumeState,
    pub vae_digest: Option<String>,
}

impl Checkpoint {
    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut entries = Vec::with_capacity(self.params.len());
        for (path, t) in self.params.iter() {
            if !t.is_finite() {
                return Err(Error::Checkpoint(format!("parameter {path} is not finite")));
            }
            entries.push(ParamEntry {
                path: path.to_string(),
                shape: [t.rows(), t.cols()],
                dtype: "f32".into(),
            });
        }
        let header = Header {
            stage: self.stage,
            config: self.config.clone(),
            params: entries,
            latent_stats: self.latent_stats.clone(),
            dataset: self.dataset.clone(),
            resume: self.resume,
            vae_digest: self.vae_digest.clone(),
        };
        let json = serde_json::to_vec(&header)?;
        let mut out = Vec::with_capacity(13 + json.len() + 4 * self.params.num_scalars());
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
        out.extend_from_slice(&(json.len() as u32).to_le_bytes());
        out.extend_from_slice(&json);
        for (_, t) in self.params.iter() {
            for &v in t.data() {
                out.extend_from_slice(&(v as f32).to_le_bytes());
            }
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let bad = |m: &str| Error::Checkpoint(m.to_string());
        if bytes.len() < 13 || &bytes[..5] != MAGIC {
            return Err(bad("missing UAE3D magic bytes"));
        }
        let version = u32::from_le_bytes(bytes[5..9].try_into().expect("4 bytes"));
        if version != FORMAT_VERSION {
            return Err(Error::Checkpoint(format!(
                "format version {version} is not supported (expected {FORMAT_VERSION})"
            )));
        }
        let hlen = u32::from_le_bytes(bytes[9..13].try_into().expect("4 bytes")) as usize;
        let body = bytes.get(13..13 + hlen).ok_or_else(|| bad("truncated header"))?;
        let header: Header = serde_json::from_slice(body)?;
        let mut params = ParamStore::new();
        let mut pos = 13 + hlen;
        for e in &header.params {
            if e.dtype != "f32" {
                return Err(Error::Checkpoint(format!("unsupported dtype {} for {}", e.dtype, e.path)));
            }
            if params.id(&e.path).is_some() {
                return Err(Error::Checkpoint(format!("duplicate parameter path {}", e.path)));
            }
            let n = e.shape[0] * e.shape[1];
            let raw = bytes
                .get(pos..pos + 4 * n)
                .ok_or_else(|| Error::Checkpoint(format!("truncated data for {}", e.path)))?;
            let data: Vec<f64> = raw
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")) as f64)
                .collect();
            if data.iter().any(|v| !v.is_finite()) {
                return Err(Error::Checkpoint(format!("parameter {} is not finite", e.path)));
            }
            params.add(e.path.clone(), Tensor::from_vec(e.shape[0], e.shape[1], data));
            pos += 4 * n;
        }
        if pos != bytes.len() {
            return Err(bad("trailing bytes after parameter data"));
        }
        Ok(Self {
            stage: header.stage,
            config: header.config,
            params,
            latent_stats: header.latent_stats,
            dataset: header.dataset,
            resume: header.resume,
            vae_digest: header.vae_digest,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_bytes()?)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_bytes(&std::fs::read(path)?)
    }

    /// Hex SHA-256 of the serialized checkpoint.
    pub fn digest(&self) -> Result<String> {
        Ok(Sha256::digest(self.to_bytes()?).iter().map(|b| format!("{b:02x}")).collect())
    }

    pub fn expect_stage(&self, stage: Stage) -> Result<()> {
        if self.stage != stage {
            return Err(Error::Checkpoint(format!("expected a {stage:?} checkpoint, found {:?}", self.stage)));
        }
        Ok(())
    }

    /// Copies values into `template`, which must hold exactly the same
    /// paths and shapes in the same order.
    pub fn restore_into(&self, template: &mut ParamStore) -> Result<()> {
        if template.len() != self.params.len() {
            return Err(Error::Checkpoint(format!(
                "model has {} parameter tensors, checkpoint has {}",
                template.len(),
                self.params.len()
            )));
        }
        let ids: Vec<_> = template.ids().collect();
        for (id, (path, t)) in ids.into_iter().zip(self.params.iter()) {
            if template.name(id) != path || template.get(id).shape() != t.shape() {
                return Err(Error::Checkpoint(format!(
                    "parameter {path} {:?} does not match model parameter {} {:?}",
                    t.shape(),
                    template.name(id),
                    template.get(id).shape()
                )));
            }
            *template.get_mut(id) = t.clone();
        }
        Ok(())
    }
}
