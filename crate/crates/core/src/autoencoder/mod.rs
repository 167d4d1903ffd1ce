//! Convolutional encoder, one decoder per target scale, and the training
//! procedures that make token prefixes decodable at every scale.

mod train;

pub use train::{
    finetune_vocabulary, train_rqvae, vocabulary_alignment, FinetuneConfig, RqvaeLossReport, RqvaeTrainConfig,
};

use hvsr_tensor::{Graph, ParamId, ParamStore, ResampleMode, Tensor, Var};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::image::Image;
use crate::nn::{normal, Conv2d, GroupNorm, ResBlock};
use crate::quantizer::{
    assemble_latent, hierarchical_tokenize, identity_kernel, Codebook, FeatureEncoder, PhiFilter, ScaleSchedule,
    TokenSequence,
};

#[derive(Clone, Debug, PartialEq)]
pub struct AutoencoderConfig {
    /// Stride-2 stages; the encoder reduces each side by `2^stages`.
    pub stages: usize,
    /// Channels after each encoder stage, coarsest last.
    pub widths: Vec<usize>,
    pub groups: usize,
    /// `n_z`.
    pub latent_dim: usize,
    /// `K`.
    pub codebook_size: usize,
    pub schedule: ScaleSchedule,
    /// Learned shared 3×3 φ when true, identity otherwise.
    pub learned_phi: bool,
}

impl AutoencoderConfig {
    /// 64×64 images, 16×16 latents, ρ = (2,3,4,6,8,12,16).
    pub fn desk() -> Self {
        Self {
            stages: 2,
            widths: vec![24, 32],
            groups: 8,
            latent_dim: 8,
            codebook_size: 256,
            schedule: ScaleSchedule::desk(),
            learned_phi: true,
        }
    }

    /// 512×512 images, 32×32 latents, ρ = (4,…,32).
    pub fn paper() -> Self {
        Self {
            stages: 4,
            widths: vec![64, 128, 128, 256],
            groups: 32,
            latent_dim: 32,
            codebook_size: 4096,
            schedule: ScaleSchedule::paper(),
            learned_phi: true,
        }
    }

    pub fn downsample(&self) -> usize {
        1 << self.stages
    }

    /// `f`, the ratio of latent to image side.
    pub fn compression(&self) -> f64 {
        1.0 / self.downsample() as f64
    }

    /// Side of the native (full-scale) image.
    pub fn image_size(&self) -> usize {
        self.schedule.latent_resolution() * self.downsample()
    }

    /// Side of the scale-`n` image.
    pub fn scale_image_size(&self, scale: usize) -> usize {
        self.schedule.working_resolution(scale) * self.downsample()
    }

    pub fn validate(&self) -> Result<()> {
        if self.stages == 0 || self.widths.len() != self.stages {
            return Err(Error::Config(format!("{} stages need {} widths", self.stages, self.stages)));
        }
        if self.groups == 0 || self.widths.iter().any(|w| w % self.groups != 0) {
            return Err(Error::Config(format!("widths {:?} not divisible by {} groups", self.widths, self.groups)));
        }
        if self.latent_dim == 0 || self.codebook_size < 2 {
            return Err(Error::Config("latent_dim must be >= 1 and codebook_size >= 2".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Debug)]
struct Encoder {
    stages: Vec<(Conv2d, ResBlock)>,
    norm: GroupNorm,
    out: Conv2d,
}

impl Encoder {
    fn new(store: &mut ParamStore, cfg: &AutoencoderConfig, rng: &mut ChaCha8Rng) -> Result<Self> {
        let mut stages = Vec::new();
        let mut cin = 3;
        for (i, &w) in cfg.widths.iter().enumerate() {
            let conv = Conv2d::new(store, &format!("enc.down{i}"), cin, w, 3, 2, true, 1.0, rng)?;
            let res = ResBlock::new(store, &format!("enc.res{i}"), w, cfg.groups, rng)?;
            stages.push((conv, res));
            cin = w;
        }
        Ok(Self {
            stages,
            norm: GroupNorm::new(store, "enc.norm", cin, cfg.groups)?,
            out: Conv2d::new(store, "enc.out", cin, cfg.latent_dim, 3, 1, true, 0.5, rng)?,
        })
    }

    fn forward(&self, g: &mut Graph, store: &ParamStore, x: Var) -> Result<Var> {
        let mut h = x;
        for (conv, res) in &self.stages {
            h = conv.forward(g, store, h)?;
            h = res.forward(g, store, h)?;
        }
        h = self.norm.forward(g, store, h)?;
        h = g.gelu(h);
        self.out.forward(g, store, h)
    }
}

/// Mirrors the encoder: nearest ×2 upsampling plus convolution per stage,
/// with the last ×2 done by a depth-to-space rearrangement.
#[derive(Clone, Debug)]
struct Decoder {
    conv_in: Conv2d,
    res_in: ResBlock,
    ups: Vec<(Conv2d, ResBlock)>,
    norm: GroupNorm,
    out: Conv2d,
}

impl Decoder {
    fn new(store: &mut ParamStore, name: &str, cfg: &AutoencoderConfig, rng: &mut ChaCha8Rng) -> Result<Self> {
        let top = *cfg.widths.last().unwrap();
        let conv_in = Conv2d::new(store, &format!("{name}.in"), cfg.latent_dim, top, 3, 1, true, 1.0, rng)?;
        let res_in = ResBlock::new(store, &format!("{name}.res_in"), top, cfg.groups, rng)?;
        let mut ups = Vec::new();
        let mut cin = top;
        for i in (0..cfg.stages - 1).rev() {
            let w = cfg.widths[i];
            let conv = Conv2d::new(store, &format!("{name}.up{i}"), cin, w, 3, 1, true, 1.0, rng)?;
            let res = ResBlock::new(store, &format!("{name}.res{i}"), w, cfg.groups, rng)?;
            ups.push((conv, res));
            cin = w;
        }
        let norm = GroupNorm::new(store, &format!("{name}.norm"), cin, cfg.groups)?;
        let out = Conv2d::new(store, &format!("{name}.out"), cin, 12, 3, 1, true, 0.5, rng)?;
        store.get_mut(out.bias.unwrap()).value = Tensor::full(vec![12], 0.5);
        Ok(Self { conv_in, res_in, ups, norm, out })
    }

    fn forward(&self, g: &mut Graph, store: &ParamStore, z: Var) -> Result<Var> {
        let mut h = self.conv_in.forward(g, store, z)?;
        h = self.res_in.forward(g, store, h)?;
        for (conv, res) in &self.ups {
            let s = g.value(h).shape().to_vec();
            h = g.interpolate(h, 2 * s[1], 2 * s[2], ResampleMode::Nearest)?;
            h = conv.forward(g, store, h)?;
            h = res.forward(g, store, h)?;
        }
        h = self.norm.forward(g, store, h)?;
        h = g.gelu(h);
        h = self.out.forward(g, store, h)?;
        Ok(g.depth_to_space(h, 2)?)
    }
}

/// Encoder, per-scale decoders, codebook and φ, all held in one
/// [`ParamStore`] under the prefixes `enc.`, `dec{n}.`, `codebook` and
/// `phi`.
#[derive(Clone, Debug)]
pub struct Rqvae {
    config: AutoencoderConfig,
    store: ParamStore,
    encoder: Encoder,
    decoders: Vec<Decoder>,
    codebook: ParamId,
    phi: Option<ParamId>,
}

pub const CODEBOOK_PARAM: &str = "codebook";
pub const PHI_PARAM: &str = "phi.w";

pub fn decoder_prefix(scale: usize) -> String {
    format!("dec{scale}.")
}

impl Rqvae {
    pub fn new(config: AutoencoderConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let encoder = Encoder::new(&mut store, &config, &mut rng)?;
        let decoders = (0..config.schedule.scale_count())
            .map(|n| Decoder::new(&mut store, &format!("dec{n}"), &config, &mut rng))
            .collect::<Result<Vec<_>>>()?;
        let cb = normal(vec![config.codebook_size, config.latent_dim], 0.1, &mut rng);
        let codebook = store.add(CODEBOOK_PARAM, cb, false)?;
        let phi = if config.learned_phi {
            Some(store.add(PHI_PARAM, identity_kernel(config.latent_dim), false)?)
        } else {
            None
        };
        Ok(Self { config, store, encoder, decoders, codebook, phi })
    }

    pub fn config(&self) -> &AutoencoderConfig {
        &self.config
    }

    pub fn schedule(&self) -> &ScaleSchedule {
        &self.config.schedule
    }

    pub fn store(&self) -> &ParamStore {
        &self.store
    }

    pub fn store_mut(&mut self) -> &mut ParamStore {
        &mut self.store
    }

    pub fn codebook_param(&self) -> ParamId {
        self.codebook
    }

    pub fn codebook(&self) -> Codebook {
        Codebook::new(self.store.value(self.codebook).clone()).expect("codebook parameter keeps its invariants")
    }

    pub fn phi(&self) -> PhiFilter {
        match self.phi {
            Some(id) => PhiFilter::Conv3x3(self.store.value(id).clone()),
            None => PhiFilter::Identity,
        }
    }

    fn check_image(&self, image: &Image) -> Result<()> {
        let d = self.config.downsample();
        if image.height() % d != 0 || image.width() % d != 0 {
            return Err(Error::Shape(format!(
                "{}x{} image not divisible by {d}",
                image.height(),
                image.width()
            )));
        }
        Ok(())
    }

    /// Encoder features `Z = E(x)` inside `g`.
    pub fn encode_var(&self, g: &mut Graph, x: Var) -> Result<Var> {
        self.encoder.forward(g, &self.store, x)
    }

    /// Unclamped decoder output for scale `n` inside `g`.
    pub fn decode_var(&self, g: &mut Graph, latent: Var, scale: usize) -> Result<Var> {
        let dec = self.decoders.get(scale).ok_or_else(|| {
            Error::InvalidArgument(format!("scale {scale} out of range for {} decoders", self.decoders.len()))
        })?;
        let w = self.config.schedule.working_resolution(scale);
        let s = g.value(latent).shape();
        if s != [self.config.latent_dim, w, w] {
            return Err(Error::Shape(format!(
                "scale {scale} decoder expects [{}, {w}, {w}] latent, got {s:?}",
                self.config.latent_dim
            )));
        }
        dec.forward(g, &self.store, latent)
    }

    /// Differentiable `Σ_{l < b_n} φ(up(lookup(tokens_l)))` with the codebook
    /// and φ bound as parameters of `g`.
    pub fn assemble_var(&self, g: &mut Graph, tokens: &TokenSequence, scale: usize) -> Result<Var> {
        let schedule = &self.config.schedule;
        let b = schedule.boundaries()[scale];
        if tokens.levels_present() < b {
            return Err(Error::InvalidArgument(format!("scale {scale} needs {b} levels")));
        }
        let w = schedule.working_resolution(scale);
        let table = g.param(&self.store, self.codebook);
        let phi = self.phi.map(|id| g.param(&self.store, id));
        let mut acc: Option<Var> = None;
        for l in 0..b {
            let r = schedule.resolution(l);
            let idx: Vec<usize> = tokens.level(l).iter().map(|&k| k as usize).collect();
            let rows = g.embed(table, &idx)?;
            let map = g.tokens_to_map(rows, r, r)?;
            let mut up = g.interpolate(map, w, w, ResampleMode::Bilinear)?;
            if let Some(phi) = phi {
                up = g.conv2d(up, phi, None, 1, 1)?;
            }
            acc = Some(match acc {
                Some(a) => g.add(a, up)?,
                None => up,
            });
        }
        Ok(acc.expect("every scale owns at least one level"))
    }

    /// Image at scale `n` decoded from a `[n_z, s_n ρ_L, s_n ρ_L]` latent.
    pub fn decode_scale(&self, latent: &Tensor, scale: usize) -> Result<Image> {
        let mut g = Graph::inference();
        let z = g.constant(latent.clone());
        let y = self.decode_var(&mut g, z, scale)?;
        Image::clamped(g.value(y).clone())
    }

    pub fn tokenize(&self, image: &Image) -> Result<TokenSequence> {
        hierarchical_tokenize(image, self, &self.codebook(), &self.config.schedule, &self.phi())
    }

    /// Decodes scale `n` from the first `b_n` levels of `tokens`.
    pub fn decode_tokens(&self, tokens: &TokenSequence, scale: usize) -> Result<Image> {
        if tokens.schedule() != &self.config.schedule {
            return Err(Error::Shape("token schedule differs from the model schedule".into()));
        }
        let latent = assemble_latent(tokens, scale, &self.codebook(), &self.phi())?;
        self.decode_scale(&latent, scale)
    }

    /// Every scale decoded from one token sequence.
    pub fn decode_all(&self, tokens: &TokenSequence) -> Result<Vec<Image>> {
        (0..self.config.schedule.scale_count()).map(|n| self.decode_tokens(tokens, n)).collect()
    }

    /// Tokenize then decode every scale.
    pub fn reconstruct(&self, image: &Image) -> Result<Vec<Image>> {
        self.decode_all(&self.tokenize(image)?)
    }
}

impl Rqvae {
    /// Encoder features of an image, `[n_z, H/d, W/d]`.
    pub fn encode_features(&self, image: &Image) -> Result<Tensor> {
        self.check_image(image)?;
        let mut g = Graph::inference();
        let x = g.constant(image.tensor().clone());
        let z = self.encode_var(&mut g, x)?;
        Ok(g.value(z).clone())
    }
}

impl FeatureEncoder for Rqvae {
    fn latent_dim(&self) -> usize {
        self.config.latent_dim
    }

    fn downsample(&self) -> usize {
        self.config.downsample()
    }

    fn encode(&self, image: &Image) -> Result<Tensor> {
        self.encode_features(image)
    }
}
