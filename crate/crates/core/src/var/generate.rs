use hvsr_tensor::Tensor;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{classifier_free_guidance, level_inputs, Conditioning, VarModel};
use crate::autoencoder::Rqvae;
use crate::error::{Error, Result};
use crate::image::{DegradationClass, Image};
use crate::quantizer::{Codebook, PhiFilter, TokenSequence};

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Sampler {
    Greedy,
    /// Samples from the softmax restricted to the `k` largest logits.
    TopK { k: usize, seed: u64 },
}

struct SamplerState {
    sampler: Sampler,
    rng: ChaCha8Rng,
}

impl SamplerState {
    fn new(sampler: Sampler) -> Self {
        let seed = match sampler {
            Sampler::TopK { seed, .. } => seed,
            Sampler::Greedy => 0,
        };
        Self { sampler, rng: ChaCha8Rng::seed_from_u64(seed) }
    }

    fn pick(&mut self, row: &[f64]) -> u32 {
        let argmax = || {
            let mut best = 0;
            for (i, &v) in row.iter().enumerate() {
                if v > row[best] {
                    best = i;
                }
            }
            best as u32
        };
        match self.sampler {
            Sampler::Greedy => argmax(),
            Sampler::TopK { k, .. } => {
                let mut order: Vec<usize> = (0..row.len()).collect();
                order.sort_by(|&a, &b| row[b].total_cmp(&row[a]).then(a.cmp(&b)));
                order.truncate(k.clamp(1, row.len()));
                let mx = row[order[0]];
                let weights: Vec<f64> = order.iter().map(|&i| (row[i] - mx).exp()).collect();
                let total: f64 = weights.iter().sum();
                let mut u = self.rng.gen::<f64>() * total;
                for (&i, w) in order.iter().zip(&weights) {
                    if u < *w {
                        return i as u32;
                    }
                    u -= w;
                }
                *order.last().unwrap() as u32
            }
        }
    }
}

/// Output of [`generate`].
#[derive(Clone, Debug)]
pub struct Generation {
    /// The first `b_n` levels.
    pub tokens: TokenSequence,
    /// Decoded images for scales `0..=n`.
    pub images: Vec<Image>,
    /// Logits each level was sampled from (after guidance).
    pub logits: Vec<Tensor>,
}

impl VarModel {
    /// Autoregressively samples the first `levels` levels with a KV cache.
    /// A nonzero `cfg_weight` runs a second, class-free stream and mixes the
    /// logits.
    pub fn generate_tokens(
        &self,
        cond: &Conditioning,
        cb: &Codebook,
        phi: &PhiFilter,
        levels: usize,
        sampler: Sampler,
        cfg_weight: f64,
    ) -> Result<(TokenSequence, Vec<Tensor>)> {
        let schedule = self.config().schedule.clone();
        if levels > schedule.levels() {
            return Err(Error::InvalidArgument(format!("{levels} levels requested, schedule has {}", schedule.levels())));
        }
        let free = cond.with_class(DegradationClass::ClassFree.index());
        let mut cache = self.start_cache(cond)?;
        let mut free_cache = if cfg_weight != 0.0 { Some(self.start_cache(&free)?) } else { None };
        let mut state = SamplerState::new(sampler);
        let mut tokens = TokenSequence::new(schedule.clone(), cb.size(), Vec::new())?;
        let mut all_logits = Vec::with_capacity(levels);
        for l in 0..levels {
            let input = if l == 0 { None } else { level_inputs(&tokens, cb, phi)?.pop() };
            let mut logits = self.step_level(&mut cache, cond, input.as_ref())?;
            if let Some(fc) = free_cache.as_mut() {
                let free_logits = self.step_level(fc, &free, input.as_ref())?;
                logits = classifier_free_guidance(&logits, &free_logits, cfg_weight)?;
            }
            let k = logits.dim(1);
            let grid: Vec<u32> = logits.data().chunks(k).map(|row| state.pick(row)).collect();
            let mut levels_so_far = tokens.levels().to_vec();
            levels_so_far.push(grid);
            tokens = TokenSequence::new(schedule.clone(), cb.size(), levels_so_far)?;
            all_logits.push(logits);
        }
        Ok((tokens, all_logits))
    }
}

/// Super-resolves `lr` up to target scale `upto_scale` in one
/// autoregressive pass, decoding every intermediate scale on the way.
pub fn generate(
    var: &VarModel,
    rqvae: &Rqvae,
    lr: &Image,
    class: usize,
    upto_scale: usize,
    sampler: Sampler,
    cfg_weight: f64,
) -> Result<Generation> {
    let schedule = rqvae.schedule();
    if schedule != &var.config().schedule {
        return Err(Error::Config("autoencoder and transformer schedules differ".into()));
    }
    if upto_scale >= schedule.scale_count() {
        return Err(Error::InvalidArgument(format!(
            "scale {upto_scale} out of range for {} scales",
            schedule.scale_count()
        )));
    }
    let cond = Conditioning::from_lr(rqvae, lr, class)?;
    let levels = schedule.boundaries()[upto_scale];
    let (tokens, logits) = var.generate_tokens(&cond, &rqvae.codebook(), &rqvae.phi(), levels, sampler, cfg_weight)?;
    let images = (0..=upto_scale).map(|n| rqvae.decode_tokens(&tokens, n)).collect::<Result<Vec<_>>>()?;
    Ok(Generation { tokens, images, logits })
}
