use hvsr_tensor::{ResampleMode, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::autoencoder::Rqvae;
use crate::error::{Error, Result};
use crate::image::{degrade, interpolate, DegradationConfig, Image};
use crate::quantizer::{Codebook, FeatureEncoder, PhiFilter, TokenSequence};

/// Everything the transformer sees besides the image tokens: the class and
/// the encoder features of the LR image.
#[derive(Clone, Debug, PartialEq)]
pub struct Conditioning {
    pub class: usize,
    /// `[n_z, ρ_L, ρ_L]` features of the LR image upsampled to native size.
    pub prefix: Tensor,
    /// Per level `l`, the LR features at the working resolution of the
    /// level's scale, area-downsampled to `ρ_l`.
    pub level_features: Vec<Tensor>,
}

impl Conditioning {
    /// Upsamples `lr` bilinearly to the native resolution and encodes it at
    /// every target scale.
    pub fn from_lr(rqvae: &Rqvae, lr: &Image, class: usize) -> Result<Self> {
        let cfg = rqvae.config();
        let native = cfg.image_size();
        let up = lr.resize_with(native, native, ResampleMode::Bilinear)?;
        let schedule = &cfg.schedule;
        let per_scale = (0..schedule.scale_count())
            .map(|n| {
                let side = cfg.scale_image_size(n);
                rqvae.encode(&up.resize(side, side)?)
            })
            .collect::<Result<Vec<_>>>()?;
        let level_features = (0..schedule.levels())
            .map(|l| {
                let r = schedule.resolution(l);
                interpolate(&per_scale[schedule.owner_scale(l)], r, r, ResampleMode::Area)
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Self { class, prefix: per_scale.last().unwrap().clone(), level_features })
    }

    pub fn with_class(&self, class: usize) -> Self {
        Self { class, ..self.clone() }
    }
}

/// Input maps for levels `1..n` built from the tokens of earlier levels:
/// entry `l - 1` is the cumulative φ-reconstruction of levels `< l` at the
/// working resolution of level `l`'s scale, area-downsampled to `ρ_l`.
pub fn level_inputs(tokens: &TokenSequence, cb: &Codebook, phi: &PhiFilter) -> Result<Vec<Tensor>> {
    let schedule = tokens.schedule();
    let present = tokens.levels_present();
    let mut out = Vec::with_capacity(present);
    let mut lookups = Vec::with_capacity(present);
    let mut cumulative: Option<(usize, Tensor)> = None;
    for l in 1..schedule.levels().min(present + 1) {
        let prev = l - 1;
        let r = schedule.resolution(prev);
        lookups.push(cb.lookup_map(tokens.level(prev), r, r)?);
        let w = schedule.working_resolution(schedule.owner_scale(l));
        let up = |m: &Tensor| -> Result<Tensor> { phi.apply(&interpolate(m, w, w, ResampleMode::Bilinear)?) };
        let acc = match cumulative.take() {
            Some((cw, mut acc)) if cw == w => {
                acc.add_assign(&up(&lookups[prev])?)?;
                acc
            }
            _ => {
                let mut acc = Tensor::zeros(vec![cb.dim(), w, w]);
                for m in &lookups {
                    acc.add_assign(&up(m)?)?;
                }
                acc
            }
        };
        let rl = schedule.resolution(l);
        out.push(interpolate(&acc, rl, rl, ResampleMode::Area)?);
        cumulative = Some((w, acc));
    }
    Ok(out)
}

/// One training pair, fully precomputed against a frozen autoencoder.
#[derive(Clone, Debug)]
pub struct VarExample {
    pub cond: Conditioning,
    pub hr_tokens: Vec<u32>,
    /// Tokens of the LR image upsampled to native size.
    pub lr_tokens: Vec<u32>,
    /// Teacher-forcing inputs from the HR tokens.
    pub inputs: Vec<Tensor>,
}

impl VarExample {
    pub fn new(rqvae: &Rqvae, hr: &Image, lr: &Image, class: usize) -> Result<Self> {
        let native = rqvae.config().image_size();
        let hr_seq = rqvae.tokenize(hr)?;
        let lr_up = lr.resize_with(native, native, ResampleMode::Bilinear)?;
        let lr_seq = rqvae.tokenize(&lr_up)?;
        Ok(Self {
            cond: Conditioning::from_lr(rqvae, lr, class)?,
            hr_tokens: hr_seq.flatten(),
            lr_tokens: lr_seq.flatten(),
            inputs: level_inputs(&hr_seq, &rqvae.codebook(), &rqvae.phi())?,
        })
    }
}

/// Degrades every HR image `per_image` times and precomputes the pairs.
pub fn prepare_examples(
    rqvae: &Rqvae,
    hr_images: &[Image],
    degradation: &DegradationConfig,
    per_image: usize,
    seed: u64,
) -> Result<Vec<VarExample>> {
    if hr_images.is_empty() || per_image == 0 {
        return Err(Error::InvalidArgument("need at least one HR image and one degradation per image".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Vec::with_capacity(hr_images.len() * per_image);
    for hr in hr_images {
        for _ in 0..per_image {
            let (lr, class) = degrade(hr, &degradation.with_seed(rng.gen()))?;
            out.push(VarExample::new(rqvae, hr, &lr, class.index())?);
        }
    }
    Ok(out)
}
