use hvsr_tensor::{ResampleMode, Tensor};

use super::{Codebook, FeatureEncoder, PhiFilter, ScaleSchedule, TokenSequence};
use crate::error::{Error, Result};
use crate::image::{interpolate, Image};

/// Nearest codebook entry to `z` and its vector.
pub fn vq_quantize(z: &[f64], cb: &Codebook) -> (usize, Vec<f64>) {
    let k = cb.nearest(z);
    (k, cb.lookup(k).to_vec())
}

/// Outcome of residual quantization over a list of level resolutions.
#[derive(Clone, Debug)]
pub struct RqOutput {
    pub tokens: Vec<Vec<u32>>,
    /// `Σ_l φ(up(R_l))` at the input resolution.
    pub cumulative: Tensor,
    /// `‖Z − Σ_{l' ≤ l} φ(up(R_l'))‖` after each level.
    pub residual_norms: Vec<f64>,
}

fn square_map(z: &Tensor, n_z: usize) -> Result<usize> {
    if z.rank() != 3 || z.dim(0) != n_z || z.dim(1) != z.dim(2) {
        return Err(Error::Shape(format!("expected square [{n_z}, h, h] latent, got {:?}", z.shape())));
    }
    Ok(z.dim(1))
}

fn up(map: &Tensor, res: usize) -> Result<Tensor> {
    interpolate(map, res, res, ResampleMode::Bilinear)
}

fn down(map: &Tensor, res: usize) -> Result<Tensor> {
    interpolate(map, res, res, ResampleMode::Area)
}

/// Greedy multi-scale residual quantization of `z` over `resolutions`,
/// which may repeat but must not exceed the latent size and must end at it.
pub fn rq_levels(z: &Tensor, cb: &Codebook, resolutions: &[usize], phi: &PhiFilter) -> Result<RqOutput> {
    let h = square_map(z, cb.dim())?;
    if resolutions.last() != Some(&h) || resolutions.iter().any(|&r| r == 0 || r > h) {
        return Err(Error::Shape(format!("resolutions {resolutions:?} incompatible with latent size {h}")));
    }
    let mut residual = z.clone();
    let mut cumulative = Tensor::zeros(z.shape().to_vec());
    let mut tokens = Vec::with_capacity(resolutions.len());
    let mut residual_norms = Vec::with_capacity(resolutions.len());
    for &r in resolutions {
        let (idx, looked) = cb.quantize_map(&down(&residual, r)?)?;
        let contribution = phi.apply(&up(&looked, h)?)?;
        residual = residual.sub(&contribution)?;
        cumulative.add_assign(&contribution)?;
        residual_norms.push(residual.sq_norm().sqrt());
        tokens.push(idx);
    }
    Ok(RqOutput { tokens, cumulative, residual_norms })
}

/// Plain multi-scale residual quantization of a `[n_z, ρ_L, ρ_L]` latent
/// over every level of `schedule`.
pub fn var_rq_tokenize(
    z: &Tensor,
    cb: &Codebook,
    schedule: &ScaleSchedule,
    phi: &PhiFilter,
) -> Result<(TokenSequence, Tensor)> {
    let h = square_map(z, cb.dim())?;
    if h != schedule.latent_resolution() {
        return Err(Error::Shape(format!("latent size {h} but schedule ends at {}", schedule.latent_resolution())));
    }
    let out = rq_levels(z, cb, schedule.resolutions(), phi)?;
    Ok((TokenSequence::new(schedule.clone(), cb.size(), out.tokens)?, out.cumulative))
}

/// The image fed to the encoder for each target scale.
pub fn scale_images(image: &Image, encoder: &dyn FeatureEncoder, schedule: &ScaleSchedule) -> Result<Vec<Image>> {
    let f = encoder.downsample();
    let native = schedule.latent_resolution() * f;
    if image.height() != native || image.width() != native {
        return Err(Error::Shape(format!(
            "image is {}x{} but the schedule needs {native}x{native} (latent {} × {f})",
            image.height(),
            image.width(),
            schedule.latent_resolution()
        )));
    }
    (0..schedule.scale_count())
        .map(|n| {
            let side = schedule.working_resolution(n) * f;
            image.resize(side, side)
        })
        .collect()
}

/// Hierarchical tokenization: each target scale encodes its own
/// downsampled image, replays the levels already committed by coarser
/// scales and quantizes only the levels it owns.
pub fn hierarchical_tokenize(
    image: &Image,
    encoder: &dyn FeatureEncoder,
    cb: &Codebook,
    schedule: &ScaleSchedule,
    phi: &PhiFilter,
) -> Result<TokenSequence> {
    if encoder.latent_dim() != cb.dim() {
        return Err(Error::Shape(format!("encoder emits {} channels, codebook has {}", encoder.latent_dim(), cb.dim())));
    }
    let features = scale_images(image, encoder, schedule)?
        .iter()
        .map(|img| encoder.encode(img))
        .collect::<Result<Vec<_>>>()?;
    hierarchical_tokenize_features(&features, cb, schedule, phi)
}

/// [`hierarchical_tokenize`] given the per-scale encoder outputs
/// `Z_n: [n_z, s_n ρ_L, s_n ρ_L]`.
pub fn hierarchical_tokenize_features(
    features: &[Tensor],
    cb: &Codebook,
    schedule: &ScaleSchedule,
    phi: &PhiFilter,
) -> Result<TokenSequence> {
    hierarchical_tokenize_with(features, cb, schedule, phi, |_, _| {})
}

/// [`hierarchical_tokenize_features`] that also hands every quantizer input
/// (the residual downsampled to level `l`) to `visit(l, map)`.
pub fn hierarchical_tokenize_with(
    features: &[Tensor],
    cb: &Codebook,
    schedule: &ScaleSchedule,
    phi: &PhiFilter,
    mut visit: impl FnMut(usize, &Tensor),
) -> Result<TokenSequence> {
    if features.len() != schedule.scale_count() {
        return Err(Error::Shape(format!("{} feature maps for {} scales", features.len(), schedule.scale_count())));
    }
    let mut committed: Vec<Tensor> = Vec::with_capacity(schedule.levels());
    let mut tokens = Vec::with_capacity(schedule.levels());
    for (n, z) in features.iter().enumerate() {
        let w = schedule.working_resolution(n);
        if square_map(z, cb.dim())? != w {
            return Err(Error::Shape(format!("scale {n} features are {:?}, expected side {w}", z.shape())));
        }
        let mut residual = z.clone();
        for r in &committed {
            residual = residual.sub(&phi.apply(&up(r, w)?)?)?;
        }
        for l in schedule.scale_levels(n) {
            let input = down(&residual, schedule.resolution(l))?;
            visit(l, &input);
            let (idx, looked) = cb.quantize_map(&input)?;
            residual = residual.sub(&phi.apply(&up(&looked, w)?)?)?;
            committed.push(looked);
            tokens.push(idx);
        }
    }
    TokenSequence::new(schedule.clone(), cb.size(), tokens)
}

/// Latent for decoding scale `n`: `Σ_{l < b_n} φ(up(lookup(tokens_l), s_n ρ_L))`.
pub fn assemble_latent(tokens: &TokenSequence, scale: usize, cb: &Codebook, phi: &PhiFilter) -> Result<Tensor> {
    let schedule = tokens.schedule();
    if scale >= schedule.scale_count() {
        return Err(Error::InvalidArgument(format!(
            "scale {scale} out of range for {} scales",
            schedule.scale_count()
        )));
    }
    if tokens.vocab_size() != cb.size() {
        return Err(Error::Shape(format!("tokens use vocabulary {}, codebook has {}", tokens.vocab_size(), cb.size())));
    }
    let b = schedule.boundaries()[scale];
    if tokens.levels_present() < b {
        return Err(Error::InvalidArgument(format!(
            "scale {scale} needs {b} levels, sequence has {}",
            tokens.levels_present()
        )));
    }
    let w = schedule.working_resolution(scale);
    let mut out = Tensor::zeros(vec![cb.dim(), w, w]);
    for l in 0..b {
        let r = schedule.resolution(l);
        let looked = cb.lookup_map(tokens.level(l), r, r)?;
        out.add_assign(&phi.apply(&up(&looked, w)?)?)?;
    }
    Ok(out)
}
