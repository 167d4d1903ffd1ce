//! `HVCK` checkpoints: a named-tensor table tagged with a config digest.
//!
//! Layout, all little-endian: magic `"HVCK"`, version `u32`, digest string,
//! config text string, step `u64`, tensor count `u32`, then per tensor its
//! name string, rank `u32`, extents as `u64` and the `f64` payload. Strings
//! are a `u32` byte length followed by UTF-8.

use std::path::Path;

use hvsr_tensor::{ParamStore, Tensor};
use sha2::{Digest, Sha256};

use crate::autoencoder::Rqvae;
use crate::bytes::{ByteReader, ByteWriter};
use crate::config::RunConfig;
use crate::error::{Error, Result};
use crate::var::VarModel;

const MAGIC: &[u8; 4] = b"HVCK";
const VERSION: u32 = 1;

/// Hex SHA-256 of `text`.
pub fn digest(text: &str) -> String {
    digest_bytes(text.as_bytes())
}

pub fn digest_bytes(bytes: &[u8]) -> String {
    Sha256::digest(bytes).iter().map(|b| format!("{b:02x}")).collect()
}

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    /// Digest of the model-defining part of the config.
    pub config_digest: String,
    /// The config the weights were trained under, for rebuilding the model.
    pub config_text: String,
    pub step: u64,
    pub tensors: Vec<(String, Tensor)>,
}

impl Checkpoint {
    pub fn from_store(store: &ParamStore, config_digest: String, config_text: String, step: u64) -> Self {
        Self {
            config_digest,
            config_text,
            step,
            tensors: store.iter().map(|(_, p)| (p.name.clone(), p.value.clone())).collect(),
        }
    }

    pub fn tensor(&self, name: &str) -> Option<&Tensor> {
        self.tensors.iter().find(|(n, _)| n == name).map(|(_, t)| t)
    }

    /// Copies every parameter of `store` from the checkpoint. A digest other
    /// than `expected` is refused unless `force` is set; missing tensors and
    /// shape mismatches are always errors, and `store` is untouched on error.
    pub fn restore(&self, store: &mut ParamStore, expected: &str, force: bool) -> Result<()> {
        if self.config_digest != expected && !force {
            return Err(Error::DigestMismatch { found: self.config_digest.clone(), expected: expected.to_string() });
        }
        let mut updates = Vec::with_capacity(store.len());
        for (id, p) in store.iter() {
            let t = self.tensor(&p.name).ok_or_else(|| Error::MissingTensor(p.name.clone()))?;
            if t.shape() != p.value.shape() {
                return Err(Error::Shape(format!(
                    "checkpoint tensor `{}` is {:?}, model expects {:?}",
                    p.name,
                    t.shape(),
                    p.value.shape()
                )));
            }
            updates.push((id, t.clone()));
        }
        for (id, t) in updates {
            store.get_mut(id).value = t;
        }
        Ok(())
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut w = ByteWriter::default();
        w.buf.extend_from_slice(MAGIC);
        w.u32(VERSION);
        w.string(&self.config_digest);
        w.string(&self.config_text);
        w.u64(self.step);
        w.u32(self.tensors.len() as u32);
        for (name, t) in &self.tensors {
            w.string(name);
            w.u32(t.rank() as u32);
            for &e in t.shape() {
                w.u64(e as u64);
            }
            w.f64s(t.data());
        }
        w.buf
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = ByteReader::new("HVCK", bytes);
        r.magic(MAGIC)?;
        let version = r.u32("version")?;
        if version != VERSION {
            return Err(r.error(format!("unsupported version {version}")));
        }
        let config_digest = r.string("digest")?;
        let config_text = r.string("config")?;
        let step = r.u64("step")?;
        let count = r.u32("tensor count")? as usize;
        let mut tensors = Vec::with_capacity(count.min(1024));
        for _ in 0..count {
            let name = r.string("tensor name")?;
            let rank = r.u32("rank")? as usize;
            let mut shape = Vec::with_capacity(rank.min(16));
            for _ in 0..rank {
                shape.push(r.u64("extent")? as usize);
            }
            let numel = shape
                .iter()
                .try_fold(1usize, |acc, &e| acc.checked_mul(e))
                .ok_or_else(|| r.error("extent product overflows"))?;
            let data = r.f64s(numel, "payload")?;
            if tensors.iter().any(|(n, _): &(String, Tensor)| *n == name) {
                return Err(r.error(format!("duplicate tensor `{name}`")));
            }
            tensors.push((name, Tensor::new(shape, data)?));
        }
        r.finish()?;
        Ok(Self { config_digest, config_text, step, tensors })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        std::fs::write(path, self.to_bytes())?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_bytes(&std::fs::read(path)?)
    }
}

pub fn save_rqvae(model: &Rqvae, cfg: &RunConfig, step: u64, path: impl AsRef<Path>) -> Result<()> {
    Checkpoint::from_store(model.store(), cfg.autoencoder_digest(), cfg.to_text(), step).save(path)
}

/// Rebuilds an autoencoder from the config embedded in its checkpoint. With
/// `expected` set, the checkpoint digest must match it unless `force`.
pub fn load_rqvae(path: impl AsRef<Path>, expected: Option<&str>, force: bool) -> Result<(Rqvae, RunConfig)> {
    let ck = Checkpoint::load(path)?;
    let cfg = RunConfig::parse(&ck.config_text)?;
    let mut model = Rqvae::new(cfg.autoencoder.clone(), cfg.seed)?;
    ck.restore(model.store_mut(), expected.unwrap_or(&cfg.autoencoder_digest()), force)?;
    Ok((model, cfg))
}

pub fn save_var(model: &VarModel, cfg: &RunConfig, step: u64, path: impl AsRef<Path>) -> Result<()> {
    Checkpoint::from_store(model.store(), cfg.var_digest(), cfg.to_text(), step).save(path)
}

/// Rebuilds a transformer from its checkpoint and checks that it was trained
/// against the autoencoder whose config is `rqvae_cfg`, unless `force`.
pub fn load_var(path: impl AsRef<Path>, rqvae_cfg: &RunConfig, force: bool) -> Result<(VarModel, RunConfig)> {
    let ck = Checkpoint::load(path)?;
    let cfg = RunConfig::parse(&ck.config_text)?;
    let mut model = VarModel::new(cfg.var.clone(), cfg.seed)?;
    let chained = RunConfig { autoencoder: rqvae_cfg.autoencoder.clone(), ..cfg.clone() };
    ck.restore(model.store_mut(), &chained.var_digest(), force)?;
    Ok((model, cfg))
}
