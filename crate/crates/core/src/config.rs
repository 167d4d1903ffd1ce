//! Run configuration as a `key = value` text file.
//!
//! Blank lines and `#` comments are ignored. Every key is optional and
//! defaults to the preset chosen by `preset` (which must come first when
//! present). Lists are comma separated; ranges are `lo,hi`.

use std::fmt::Write as _;
use std::path::Path;

use crate::autoencoder::{AutoencoderConfig, FinetuneConfig, RqvaeTrainConfig};
use crate::checkpoint::digest;
use crate::error::{Error, Result};
use crate::image::DegradationConfig;
use crate::quantizer::ScaleSchedule;
use crate::var::{VarConfig, VarTrainConfig};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Preset {
    Paper,
    Desk,
}

impl Preset {
    pub fn name(self) -> &'static str {
        match self {
            Preset::Paper => "paper",
            Preset::Desk => "desk",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "paper" => Ok(Preset::Paper),
            "desk" => Ok(Preset::Desk),
            _ => Err(Error::Config(format!("unknown preset `{s}`, expected paper or desk"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct RunConfig {
    pub preset: Preset,
    pub seed: u64,
    /// Synthetic training images.
    pub data_count: usize,
    /// Degraded copies drawn per HR image for transformer training.
    pub degradations_per_image: usize,
    pub autoencoder: AutoencoderConfig,
    pub rqvae_train: RqvaeTrainConfig,
    pub finetune: FinetuneConfig,
    pub var: VarConfig,
    pub var_train: VarTrainConfig,
    pub degradation: DegradationConfig,
}

impl RunConfig {
    pub fn desk() -> Self {
        Self {
            preset: Preset::Desk,
            seed: 0,
            data_count: 256,
            degradations_per_image: 2,
            autoencoder: AutoencoderConfig::desk(),
            rqvae_train: RqvaeTrainConfig::default(),
            finetune: FinetuneConfig::default(),
            var: VarConfig::desk(),
            var_train: VarTrainConfig::default(),
            degradation: DegradationConfig::default(),
        }
    }

    pub fn paper() -> Self {
        Self {
            preset: Preset::Paper,
            autoencoder: AutoencoderConfig::paper(),
            var: VarConfig::paper(),
            ..Self::desk()
        }
    }

    pub fn preset(preset: Preset) -> Self {
        match preset {
            Preset::Paper => Self::paper(),
            Preset::Desk => Self::desk(),
        }
    }

    /// Parses a config file body on top of the desk preset, or the preset
    /// named by a leading `preset` key.
    pub fn parse(text: &str) -> Result<Self> {
        let mut cfg: Option<RunConfig> = None;
        for (lineno, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap().trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("line {}: expected `key = value`", lineno + 1)))?;
            let (key, value) = (key.trim(), value.trim());
            if key == "preset" {
                if cfg.is_some() {
                    return Err(Error::Config(format!("line {}: preset must be the first key", lineno + 1)));
                }
                cfg = Some(Self::preset(Preset::parse(value)?));
                continue;
            }
            cfg.get_or_insert_with(Self::desk)
                .set(key, value)
                .map_err(|e| Error::Config(format!("line {}: {e}", lineno + 1)))?;
        }
        let cfg = cfg.unwrap_or_else(Self::desk);
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::parse(&std::fs::read_to_string(path)?)
    }

    /// Applies `key=value` overrides in order, then revalidates.
    pub fn with_overrides<S: AsRef<str>>(mut self, overrides: &[S]) -> Result<Self> {
        for o in overrides {
            let (k, v) = o
                .as_ref()
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("override `{}` is not key=value", o.as_ref())))?;
            if k.trim() == "preset" {
                return Err(Error::Config("preset cannot be overridden; start from a different file".into()));
            }
            self.set(k.trim(), v.trim())?;
        }
        self.validate()?;
        Ok(self)
    }

    pub fn validate(&self) -> Result<()> {
        self.autoencoder.validate()?;
        self.var.validate()?;
        self.degradation.validate()?;
        if self.var.schedule != self.autoencoder.schedule {
            return Err(Error::Config("transformer and autoencoder schedules differ".into()));
        }
        if self.var.latent_dim != self.autoencoder.latent_dim || self.var.vocab_size != self.autoencoder.codebook_size {
            return Err(Error::Config("transformer latent_dim/vocab_size must match the autoencoder".into()));
        }
        if self.data_count == 0 || self.degradations_per_image == 0 {
            return Err(Error::Config("data.count and data.degradations_per_image must be >= 1".into()));
        }
        Ok(())
    }

    /// Sets one key. The schedule keys write both the autoencoder and the
    /// transformer copies, as do `ae.latent_dim` and `ae.codebook_size`.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let ae = &mut self.autoencoder;
        let rt = &mut self.rqvae_train;
        let vt = &mut self.var_train;
        let v = &mut self.var;
        let d = &mut self.degradation;
        match key {
            "seed" => self.seed = num(key, value)?,
            "data.count" => self.data_count = num(key, value)?,
            "data.degradations_per_image" => self.degradations_per_image = num(key, value)?,
            "schedule.resolutions" | "schedule.scales" => {
                let (res, scales) = if key == "schedule.resolutions" {
                    (list(key, value)?, ae.schedule.scales().to_vec())
                } else {
                    (ae.schedule.resolutions().to_vec(), list(key, value)?)
                };
                let s = ScaleSchedule::new(res, scales)?;
                ae.schedule = s.clone();
                v.schedule = s;
            }
            "ae.stages" => ae.stages = num(key, value)?,
            "ae.widths" => ae.widths = list(key, value)?,
            "ae.groups" => ae.groups = num(key, value)?,
            "ae.latent_dim" => {
                ae.latent_dim = num(key, value)?;
                v.latent_dim = ae.latent_dim;
            }
            "ae.codebook_size" => {
                ae.codebook_size = num(key, value)?;
                v.vocab_size = ae.codebook_size;
            }
            "ae.learned_phi" => ae.learned_phi = num(key, value)?,
            "rqvae.steps" => rt.steps = num(key, value)?,
            "rqvae.batch_size" => rt.batch_size = num(key, value)?,
            "rqvae.lr" => rt.optimizer.lr = num(key, value)?,
            "rqvae.weight_decay" => rt.optimizer.weight_decay = num(key, value)?,
            "rqvae.quant_drop_prob" => rt.quant_drop_prob = num(key, value)?,
            "rqvae.edge_weight" => rt.edge_weight = num(key, value)?,
            "rqvae.pretrain_steps" => rt.pretrain_steps = num(key, value)?,
            "rqvae.pretrain_lr" => rt.pretrain_lr = num(key, value)?,
            "rqvae.codebook_weight" => rt.codebook_weight = num(key, value)?,
            "rqvae.commitment_weight" => rt.commitment_weight = num(key, value)?,
            "rqvae.clip_norm" => rt.clip_norm = num(key, value)?,
            "rqvae.lr_floor" => rt.lr_floor = num(key, value)?,
            "rqvae.reseed_dead_codes" => rt.reseed_dead_codes = num(key, value)?,
            "finetune.steps" => self.finetune.steps = num(key, value)?,
            "finetune.batch_size" => self.finetune.batch_size = num(key, value)?,
            "finetune.lr" => self.finetune.lr = num(key, value)?,
            "var.depth" => v.depth = num(key, value)?,
            "var.heads" => v.heads = num(key, value)?,
            "var.width" => v.width = num(key, value)?,
            "var.mlp_ratio" => v.mlp_ratio = num(key, value)?,
            "var.dpo_beta" => v.dpo_beta = num(key, value)?,
            "var.cfg_weight" => v.cfg_weight = num(key, value)?,
            "var.class_free_prob" => v.class_free_prob = num(key, value)?,
            "var.steps" => vt.steps = num(key, value)?,
            "var.batch_size" => vt.batch_size = num(key, value)?,
            "var.lr" => vt.optimizer.lr = num(key, value)?,
            "var.weight_decay" => vt.optimizer.weight_decay = num(key, value)?,
            "var.lr_floor" => vt.lr_floor = num(key, value)?,
            "var.dpo_weight" => vt.dpo_weight = num(key, value)?,
            "var.clip_norm" => vt.clip_norm = num(key, value)?,
            "degrade.blur_sigma" => d.blur_sigma = pair(key, value)?,
            "degrade.factor" => d.factor = num(key, value)?,
            "degrade.noise_sigma" => d.noise_sigma = pair(key, value)?,
            "degrade.bilinear_only_prob" => d.bilinear_only_prob = num(key, value)?,
            _ => return Err(Error::Config(format!("unknown key `{key}`"))),
        }
        Ok(())
    }

    /// Canonical text form; `parse(to_text())` reproduces the config.
    pub fn to_text(&self) -> String {
        let mut out = String::new();
        let mut kv = |k: &str, v: String| writeln!(out, "{k} = {v}").unwrap();
        let join = |xs: &[usize]| xs.iter().map(usize::to_string).collect::<Vec<_>>().join(",");
        let (ae, rt, v, vt, d) = (&self.autoencoder, &self.rqvae_train, &self.var, &self.var_train, &self.degradation);
        kv("preset", self.preset.name().into());
        kv("seed", self.seed.to_string());
        kv("data.count", self.data_count.to_string());
        kv("data.degradations_per_image", self.degradations_per_image.to_string());
        kv("schedule.resolutions", join(ae.schedule.resolutions()));
        kv("schedule.scales", ae.schedule.scales().iter().map(f64::to_string).collect::<Vec<_>>().join(","));
        kv("ae.stages", ae.stages.to_string());
        kv("ae.widths", join(&ae.widths));
        kv("ae.groups", ae.groups.to_string());
        kv("ae.latent_dim", ae.latent_dim.to_string());
        kv("ae.codebook_size", ae.codebook_size.to_string());
        kv("ae.learned_phi", ae.learned_phi.to_string());
        kv("rqvae.pretrain_steps", rt.pretrain_steps.to_string());
        kv("rqvae.pretrain_lr", rt.pretrain_lr.to_string());
        kv("rqvae.steps", rt.steps.to_string());
        kv("rqvae.batch_size", rt.batch_size.to_string());
        kv("rqvae.lr", rt.optimizer.lr.to_string());
        kv("rqvae.weight_decay", rt.optimizer.weight_decay.to_string());
        kv("rqvae.quant_drop_prob", rt.quant_drop_prob.to_string());
        kv("rqvae.edge_weight", rt.edge_weight.to_string());
        kv("rqvae.codebook_weight", rt.codebook_weight.to_string());
        kv("rqvae.commitment_weight", rt.commitment_weight.to_string());
        kv("rqvae.clip_norm", rt.clip_norm.to_string());
        kv("rqvae.lr_floor", rt.lr_floor.to_string());
        kv("rqvae.reseed_dead_codes", rt.reseed_dead_codes.to_string());
        kv("finetune.steps", self.finetune.steps.to_string());
        kv("finetune.batch_size", self.finetune.batch_size.to_string());
        kv("finetune.lr", self.finetune.lr.to_string());
        kv("var.depth", v.depth.to_string());
        kv("var.heads", v.heads.to_string());
        kv("var.width", v.width.to_string());
        kv("var.mlp_ratio", v.mlp_ratio.to_string());
        kv("var.dpo_beta", v.dpo_beta.to_string());
        kv("var.cfg_weight", v.cfg_weight.to_string());
        kv("var.class_free_prob", v.class_free_prob.to_string());
        kv("var.steps", vt.steps.to_string());
        kv("var.batch_size", vt.batch_size.to_string());
        kv("var.lr", vt.optimizer.lr.to_string());
        kv("var.weight_decay", vt.optimizer.weight_decay.to_string());
        kv("var.lr_floor", vt.lr_floor.to_string());
        kv("var.dpo_weight", vt.dpo_weight.to_string());
        kv("var.clip_norm", vt.clip_norm.to_string());
        kv("degrade.blur_sigma", format!("{},{}", d.blur_sigma.0, d.blur_sigma.1));
        kv("degrade.factor", d.factor.to_string());
        kv("degrade.noise_sigma", format!("{},{}", d.noise_sigma.0, d.noise_sigma.1));
        kv("degrade.bilinear_only_prob", d.bilinear_only_prob.to_string());
        out
    }

    /// Digest of the whole canonical config.
    pub fn digest(&self) -> String {
        digest(&self.to_text())
    }

    /// Digest of everything that shapes the autoencoder's parameters.
    pub fn autoencoder_digest(&self) -> String {
        let ae = &self.autoencoder;
        digest(&format!(
            "autoencoder stages={} widths={:?} groups={} n_z={} K={} phi={} resolutions={:?} scales={:?}",
            ae.stages,
            ae.widths,
            ae.groups,
            ae.latent_dim,
            ae.codebook_size,
            ae.learned_phi,
            ae.schedule.resolutions(),
            ae.schedule.scales()
        ))
    }

    /// Digest of the transformer architecture, chained to the autoencoder's
    /// so a transformer is never paired with a foreign tokenizer.
    pub fn var_digest(&self) -> String {
        let v = &self.var;
        digest(&format!(
            "var {} depth={} heads={} width={} mlp={}",
            self.autoencoder_digest(),
            v.depth,
            v.heads,
            v.width,
            v.mlp_ratio
        ))
    }
}

fn num<T: std::str::FromStr>(key: &str, value: &str) -> Result<T> {
    value.parse().map_err(|_| Error::Config(format!("`{key}`: cannot parse `{value}`")))
}

fn list<T: std::str::FromStr>(key: &str, value: &str) -> Result<Vec<T>> {
    value.split(',').map(|x| num(key, x.trim())).collect()
}

fn pair(key: &str, value: &str) -> Result<(f64, f64)> {
    match list::<f64>(key, value)?[..] {
        [lo, hi] => Ok((lo, hi)),
        _ => Err(Error::Config(format!("`{key}` needs two comma-separated values"))),
    }
}

/// Writes `manifest.txt` into `dir`: the command, seed, config digest, the
/// config itself and a SHA-256 of every listed output file.
pub fn write_manifest(dir: impl AsRef<Path>, command: &str, cfg: &RunConfig, outputs: &[&Path]) -> Result<()> {
    let mut text = String::new();
    writeln!(text, "command = {command}").unwrap();
    writeln!(text, "seed = {}", cfg.seed).unwrap();
    writeln!(text, "config_digest = {}", cfg.digest()).unwrap();
    for p in outputs {
        let bytes = std::fs::read(p)?;
        let name = p.file_name().map(|n| n.to_string_lossy().into_owned()).unwrap_or_default();
        writeln!(text, "output {name} = {}", crate::checkpoint::digest_bytes(&bytes)).unwrap();
    }
    text.push_str("\n[config]\n");
    text.push_str(&cfg.to_text());
    std::fs::write(dir.as_ref().join("manifest.txt"), text)?;
    Ok(())
}
