use std::ops::Range;
use std::sync::Arc;

use hvsr_tensor::{Graph, Mask, ParamId, ParamStore, ResampleMode, Tensor, Var};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::Conditioning;
use crate::error::{Error, Result};
use crate::image::DegradationClass;
use crate::nn::{normal, LayerNorm, Linear};
use crate::quantizer::ScaleSchedule;

#[derive(Clone, Debug, PartialEq)]
pub struct VarConfig {
    pub schedule: ScaleSchedule,
    /// `K`.
    pub vocab_size: usize,
    /// `n_z` of the conditioning features and level inputs.
    pub latent_dim: usize,
    pub depth: usize,
    pub heads: usize,
    pub width: usize,
    pub mlp_ratio: usize,
    /// Degraded, non-degraded and class-free; always 3.
    pub classes: usize,
    pub dpo_beta: f64,
    /// Guidance weight used at inference; 0 disables guidance.
    pub cfg_weight: f64,
    /// Probability that training replaces the class with the class-free one.
    pub class_free_prob: f64,
}

impl VarConfig {
    pub fn desk() -> Self {
        Self {
            schedule: ScaleSchedule::desk(),
            vocab_size: 256,
            latent_dim: 8,
            depth: 2,
            heads: 4,
            width: 64,
            mlp_ratio: 4,
            classes: DegradationClass::COUNT,
            dpo_beta: 1.0,
            cfg_weight: 0.0,
            class_free_prob: 0.1,
        }
    }

    pub fn paper() -> Self {
        Self {
            schedule: ScaleSchedule::paper(),
            vocab_size: 4096,
            latent_dim: 32,
            depth: 16,
            heads: 16,
            width: 1024,
            mlp_ratio: 4,
            classes: DegradationClass::COUNT,
            dpo_beta: 1.0,
            cfg_weight: 0.0,
            class_free_prob: 0.1,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.heads == 0 || self.width % self.heads != 0 {
            return Err(Error::Config(format!("width {} not divisible by {} heads", self.width, self.heads)));
        }
        if self.classes != DegradationClass::COUNT {
            return Err(Error::Config(format!("class count must be {}, got {}", DegradationClass::COUNT, self.classes)));
        }
        if self.depth == 0 || self.vocab_size < 2 || self.latent_dim == 0 || self.mlp_ratio == 0 {
            return Err(Error::Config("depth, latent_dim and mlp_ratio must be >= 1 and vocab_size >= 2".into()));
        }
        if !(0.0..=1.0).contains(&self.class_free_prob) {
            return Err(Error::Config("class_free_prob must lie in [0, 1]".into()));
        }
        Ok(())
    }

    /// Class token plus one token per latent cell.
    pub fn prefix_len(&self) -> usize {
        1 + self.schedule.latent_resolution().pow(2)
    }

    pub fn sequence_len(&self) -> usize {
        self.prefix_len() + self.schedule.token_count()
    }
}

/// Block structure of the sequence `[prefix | level 1 | … | level L]`.
#[derive(Clone, Debug)]
pub struct AttentionLayout {
    /// Start of each block; block 0 is the prefix.
    starts: Vec<usize>,
    mask: Arc<Mask>,
}

impl AttentionLayout {
    pub fn new(config: &VarConfig) -> Result<Self> {
        let mut starts = vec![0, config.prefix_len()];
        for &r in config.schedule.resolutions() {
            starts.push(starts.last().unwrap() + r * r);
        }
        let n = *starts.last().unwrap();
        let block: Vec<usize> = (0..starts.len() - 1).flat_map(|b| std::iter::repeat(b).take(starts[b + 1] - starts[b])).collect();
        let allowed = (0..n * n).map(|i| block[i % n] <= block[i / n]).collect();
        Ok(Self { starts, mask: Arc::new(Mask::new(n, n, allowed)?) })
    }

    pub fn len(&self) -> usize {
        *self.starts.last().unwrap()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn mask(&self) -> &Arc<Mask> {
        &self.mask
    }

    pub fn prefix(&self) -> Range<usize> {
        0..self.starts[1]
    }

    /// Positions of level `l` in the full sequence.
    pub fn level(&self, l: usize) -> Range<usize> {
        self.starts[l + 1]..self.starts[l + 2]
    }

    /// Rows of level `l` in the image-token logits (prefix excluded).
    pub fn logit_rows(&self, l: usize) -> Range<usize> {
        let p = self.starts[1];
        self.starts[l + 1] - p..self.starts[l + 2] - p
    }
}

#[derive(Clone, Debug)]
struct Block {
    ln1: LayerNorm,
    qkv: Linear,
    proj: Linear,
    ln2: LayerNorm,
    fc1: Linear,
    fc2: Linear,
}

impl Block {
    fn new(store: &mut ParamStore, name: &str, cfg: &VarConfig, rng: &mut ChaCha8Rng) -> Result<Self> {
        let d = cfg.width;
        let out_std = 0.02 / (2.0 * cfg.depth as f64).sqrt();
        Ok(Self {
            ln1: LayerNorm::new(store, &format!("{name}.ln1"), d)?,
            qkv: Linear::new(store, &format!("{name}.qkv"), d, 3 * d, true, 0.02, rng)?,
            proj: Linear::new(store, &format!("{name}.proj"), d, d, true, out_std, rng)?,
            ln2: LayerNorm::new(store, &format!("{name}.ln2"), d)?,
            fc1: Linear::new(store, &format!("{name}.fc1"), d, cfg.mlp_ratio * d, true, 0.02, rng)?,
            fc2: Linear::new(store, &format!("{name}.fc2"), cfg.mlp_ratio * d, d, true, out_std, rng)?,
        })
    }

    /// Pre-norm block. Queries come from `x`; keys and values from `x`
    /// appended to `cache` (when given), which is then extended.
    fn forward(
        &self,
        g: &mut Graph,
        store: &ParamStore,
        x: Var,
        heads: usize,
        mask: &Arc<Mask>,
        cache: Option<&mut (Tensor, Tensor)>,
    ) -> Result<Var> {
        let d = g.value(x).dim(1);
        let h = self.ln1.forward(g, store, x)?;
        let qkv = self.qkv.forward(g, store, h)?;
        let q = g.slice_cols(qkv, 0, d)?;
        let mut k = g.slice_cols(qkv, d, 2 * d)?;
        let mut v = g.slice_cols(qkv, 2 * d, 3 * d)?;
        if let Some(cache) = cache {
            if cache.0.numel() > 0 {
                let (ck, cv) = (g.constant(cache.0.clone()), g.constant(cache.1.clone()));
                k = g.concat_rows(&[ck, k])?;
                v = g.concat_rows(&[cv, v])?;
            }
            *cache = (g.value(k).clone(), g.value(v).clone());
        }
        let dh = d / heads;
        let scale = 1.0 / (dh as f64).sqrt();
        let mut outs = Vec::with_capacity(heads);
        for i in 0..heads {
            let qh = g.slice_cols(q, i * dh, (i + 1) * dh)?;
            let kh = g.slice_cols(k, i * dh, (i + 1) * dh)?;
            let vh = g.slice_cols(v, i * dh, (i + 1) * dh)?;
            let s = g.matmul_nt(qh, kh)?;
            let p = g.masked_softmax(s, mask, scale)?;
            outs.push(g.matmul(p, vh)?);
        }
        let att = if heads == 1 { outs[0] } else { g.concat_cols(&outs)? };
        let att = self.proj.forward(g, store, att)?;
        let x = g.add(x, att)?;
        let h = self.ln2.forward(g, store, x)?;
        let h = self.fc1.forward(g, store, h)?;
        let h = g.gelu(h);
        let h = self.fc2.forward(g, store, h)?;
        Ok(g.add(x, h)?)
    }
}

/// Per-layer keys and values of every position processed so far.
#[derive(Clone, Debug)]
pub struct KvCache {
    layers: Vec<(Tensor, Tensor)>,
    levels_done: usize,
}

impl KvCache {
    pub fn len(&self) -> usize {
        self.layers.first().map_or(0, |(k, _)| if k.numel() == 0 { 0 } else { k.dim(0) })
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Levels already appended after the prefix.
    pub fn levels_done(&self) -> usize {
        self.levels_done
    }
}

#[derive(Clone, Debug)]
pub struct VarModel {
    config: VarConfig,
    layout: AttentionLayout,
    store: ParamStore,
    class_emb: ParamId,
    start: ParamId,
    pos: ParamId,
    level_emb: ParamId,
    lr_proj: Linear,
    in_proj: Linear,
    inject: Linear,
    blocks: Vec<Block>,
    norm: LayerNorm,
    head: Linear,
}

impl VarModel {
    pub fn new(config: VarConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let (d, nz) = (config.width, config.latent_dim);
        let top = config.schedule.latent_resolution();
        let class_emb = store.add("class_emb", normal(vec![config.classes, d], 0.02, &mut rng), false)?;
        let start = store.add("start", normal(vec![1, d], 0.02, &mut rng), false)?;
        let pos = store.add("pos", normal(vec![d, top, top], 0.02, &mut rng), false)?;
        let level_emb = store.add("level_emb", normal(vec![config.schedule.levels() + 1, d], 0.02, &mut rng), false)?;
        let lr_proj = Linear::new(&mut store, "lr_proj", nz, d, true, 0.02, &mut rng)?;
        let in_proj = Linear::new(&mut store, "in_proj", nz, d, true, 0.02, &mut rng)?;
        let inject = Linear::new(&mut store, "inject", nz, d, true, 0.02, &mut rng)?;
        let blocks = (0..config.depth)
            .map(|i| Block::new(&mut store, &format!("block{i}"), &config, &mut rng))
            .collect::<Result<Vec<_>>>()?;
        let norm = LayerNorm::new(&mut store, "norm", d)?;
        let head = Linear::new(&mut store, "head", d, config.vocab_size, true, 0.02, &mut rng)?;
        let layout = AttentionLayout::new(&config)?;
        Ok(Self { config, layout, store, class_emb, start, pos, level_emb, lr_proj, in_proj, inject, blocks, norm, head })
    }

    pub fn config(&self) -> &VarConfig {
        &self.config
    }

    pub fn layout(&self) -> &AttentionLayout {
        &self.layout
    }

    pub fn store(&self) -> &ParamStore {
        &self.store
    }

    pub fn store_mut(&mut self) -> &mut ParamStore {
        &mut self.store
    }

    /// Positional view for a `res × res` grid, `[res², d]`.
    pub fn positional_view(&self, g: &mut Graph, res: usize) -> Result<Var> {
        let pos = g.param(&self.store, self.pos);
        let view = g.interpolate(pos, res, res, ResampleMode::Area)?;
        Ok(g.map_to_tokens(view)?)
    }

    fn add_level_embedding(&self, g: &mut Graph, x: Var, block: usize) -> Result<Var> {
        let table = g.param(&self.store, self.level_emb);
        let row = g.embed(table, &[block])?;
        let d = self.config.width;
        let row = g.reshape(row, &[d])?;
        Ok(g.add_row_bias(x, row)?)
    }

    fn check_conditioning(&self, cond: &Conditioning) -> Result<()> {
        let s = &self.config.schedule;
        let (nz, top) = (self.config.latent_dim, s.latent_resolution());
        if cond.class >= self.config.classes {
            return Err(Error::InvalidArgument(format!("class {} out of range", cond.class)));
        }
        if cond.prefix.shape() != [nz, top, top] || cond.level_features.len() != s.levels() {
            return Err(Error::Shape(format!(
                "conditioning prefix {:?} with {} level maps does not match schedule",
                cond.prefix.shape(),
                cond.level_features.len()
            )));
        }
        for (l, f) in cond.level_features.iter().enumerate() {
            let r = s.resolution(l);
            if f.shape() != [nz, r, r] {
                return Err(Error::Shape(format!("level {l} conditioning map is {:?}", f.shape())));
            }
        }
        Ok(())
    }

    /// `[1 + ρ_L², d]` embedding of the class token and LR features.
    fn embed_prefix(&self, g: &mut Graph, cond: &Conditioning) -> Result<Var> {
        let table = g.param(&self.store, self.class_emb);
        let cls = g.embed(table, &[cond.class])?;
        let feats = g.constant(cond.prefix.clone());
        let feats = g.map_to_tokens(feats)?;
        let feats = self.lr_proj.forward(g, &self.store, feats)?;
        let pos = self.positional_view(g, self.config.schedule.latent_resolution())?;
        let feats = g.add(feats, pos)?;
        let x = g.concat_rows(&[cls, feats])?;
        self.add_level_embedding(g, x, 0)
    }

    /// `[ρ_l², d]` input for level `l`: the start embedding for the first
    /// level, otherwise the projected coarser reconstruction `input`, plus
    /// the level's LR features, positional view and level embedding.
    fn embed_level(&self, g: &mut Graph, cond: &Conditioning, l: usize, input: Option<&Tensor>) -> Result<Var> {
        let r = self.config.schedule.resolution(l);
        let base = match (l, input) {
            (0, _) => {
                let start = g.param(&self.store, self.start);
                g.embed(start, &vec![0; r * r])?
            }
            (_, Some(t)) => {
                if t.shape() != [self.config.latent_dim, r, r] {
                    return Err(Error::Shape(format!("level {l} input is {:?}, expected side {r}", t.shape())));
                }
                let m = g.constant(t.clone());
                let m = g.map_to_tokens(m)?;
                self.in_proj.forward(g, &self.store, m)?
            }
            (_, None) => return Err(Error::InvalidArgument(format!("level {l} needs an input map"))),
        };
        let f = g.constant(cond.level_features[l].clone());
        let f = g.map_to_tokens(f)?;
        let f = self.inject.forward(g, &self.store, f)?;
        let x = g.add(base, f)?;
        let pos = self.positional_view(g, r)?;
        let x = g.add(x, pos)?;
        self.add_level_embedding(g, x, l + 1)
    }

    /// Teacher-forced logits `[Σ ρ_l², K]` for every image position, given
    /// the level inputs built from ground-truth tokens (`inputs[l - 1]` feeds
    /// level `l`).
    pub fn forward(&self, g: &mut Graph, cond: &Conditioning, inputs: &[Tensor]) -> Result<Var> {
        self.check_conditioning(cond)?;
        let levels = self.config.schedule.levels();
        if inputs.len() + 1 < levels {
            return Err(Error::Shape(format!("{} level inputs for {levels} levels", inputs.len())));
        }
        let mut parts = vec![self.embed_prefix(g, cond)?];
        for l in 0..levels {
            let input = if l == 0 { None } else { Some(&inputs[l - 1]) };
            parts.push(self.embed_level(g, cond, l, input)?);
        }
        let mut x = g.concat_rows(&parts)?;
        for block in &self.blocks {
            x = block.forward(g, &self.store, x, self.config.heads, self.layout.mask(), None)?;
        }
        let x = self.norm.forward(g, &self.store, x)?;
        let p = self.config.prefix_len();
        let x = g.slice_rows(x, p, self.layout.len())?;
        self.head.forward(g, &self.store, x)
    }

    /// Runs the prefix and returns a cache ready for level 1.
    pub fn start_cache(&self, cond: &Conditioning) -> Result<KvCache> {
        self.check_conditioning(cond)?;
        let mut cache = KvCache {
            layers: vec![(Tensor::zeros(vec![0]), Tensor::zeros(vec![0])); self.blocks.len()],
            levels_done: 0,
        };
        let mut g = Graph::inference();
        let x = self.embed_prefix(&mut g, cond)?;
        self.run_cached(&mut g, x, &mut cache)?;
        Ok(cache)
    }

    /// Appends the next level to `cache` and returns its logits `[ρ_l², K]`.
    pub fn step_level(&self, cache: &mut KvCache, cond: &Conditioning, input: Option<&Tensor>) -> Result<Tensor> {
        let l = cache.levels_done;
        if l >= self.config.schedule.levels() {
            return Err(Error::InvalidArgument("every level has already been generated".into()));
        }
        let mut g = Graph::inference();
        let x = self.embed_level(&mut g, cond, l, input)?;
        let x = self.run_cached(&mut g, x, cache)?;
        let x = self.norm.forward(&mut g, &self.store, x)?;
        let logits = self.head.forward(&mut g, &self.store, x)?;
        cache.levels_done += 1;
        Ok(g.value(logits).clone())
    }

    fn run_cached(&self, g: &mut Graph, mut x: Var, cache: &mut KvCache) -> Result<Var> {
        let n = g.value(x).dim(0);
        let mask = Arc::new(Mask::full(n, cache.len() + n));
        for (block, layer) in self.blocks.iter().zip(cache.layers.iter_mut()) {
            x = block.forward(g, &self.store, x, self.config.heads, &mask, Some(layer))?;
        }
        Ok(x)
    }
}
