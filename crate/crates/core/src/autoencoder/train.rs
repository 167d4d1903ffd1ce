use hvsr_tensor::{AdamWConfig, Graph, OptimizerState, Tensor, Var};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{decoder_prefix, Rqvae, CODEBOOK_PARAM};
use crate::error::{Error, Result};
use crate::image::Image;
use crate::nn::cosine_lr;
use crate::quantizer::{hierarchical_tokenize_features, hierarchical_tokenize_with, scale_images, TokenSequence};

#[derive(Clone, Debug, PartialEq)]
pub struct RqvaeTrainConfig {
    /// Steps of ℓ2-only training (edge weight 0) before the full objective,
    /// with their own optimizer state and cosine schedule from `pretrain_lr`.
    pub pretrain_steps: usize,
    pub pretrain_lr: f64,
    /// Steps of the full objective.
    pub steps: usize,
    pub batch_size: usize,
    pub optimizer: AdamWConfig,
    /// Probability that a batch bypasses quantization entirely.
    pub quant_drop_prob: f64,
    /// Weight of the finite-difference edge ℓ1 term.
    pub edge_weight: f64,
    pub codebook_weight: f64,
    pub commitment_weight: f64,
    pub clip_norm: f64,
    /// Final learning rate as a fraction of the initial one under cosine
    /// decay; 1 keeps it constant.
    pub lr_floor: f64,
    /// Re-seed codebook entries unused over an epoch.
    pub reseed_dead_codes: bool,
    pub seed: u64,
}

impl RqvaeTrainConfig {
    pub fn total_steps(&self) -> usize {
        self.pretrain_steps + self.steps
    }

    pub fn edge_weight_at(&self, step: usize) -> f64 {
        if step < self.pretrain_steps {
            0.0
        } else {
            self.edge_weight
        }
    }

    /// Learning rate at a global step: cosine decay within each phase.
    pub fn lr_at(&self, step: usize) -> f64 {
        if step < self.pretrain_steps {
            cosine_lr(self.pretrain_lr, step, self.pretrain_steps, self.lr_floor)
        } else {
            cosine_lr(self.optimizer.lr, step - self.pretrain_steps, self.steps, self.lr_floor)
        }
    }
}

struct LossWeights {
    edge: f64,
    codebook: f64,
    commitment: f64,
}

impl Default for RqvaeTrainConfig {
    fn default() -> Self {
        Self {
            pretrain_steps: 1500,
            pretrain_lr: 2e-3,
            steps: 500,
            batch_size: 8,
            optimizer: AdamWConfig {
                lr: 1e-4,
                weight_decay: 0.0,
                ..AdamWConfig::default()
            },
            quant_drop_prob: 0.5,
            edge_weight: 5.0,
            codebook_weight: 1.0,
            commitment_weight: 0.25,
            clip_norm: 1.0,
            lr_floor: 0.05,
            reseed_dead_codes: true,
            seed: 0,
        }
    }
}

/// Batch-mean loss terms of one optimizer step.
#[derive(Clone, Debug, PartialEq)]
pub struct RqvaeLossReport {
    pub step: usize,
    pub quantized: bool,
    /// ℓ2 reconstruction per scale.
    pub reconstruction: Vec<f64>,
    /// Edge ℓ1 per scale.
    pub edge: Vec<f64>,
    pub codebook: f64,
    pub commitment: f64,
    pub total: f64,
}

impl RqvaeLossReport {
    pub fn weighted_total(&self, cfg: &RqvaeTrainConfig) -> f64 {
        let w = cfg.edge_weight_at(self.step);
        let rec: f64 = self.reconstruction.iter().zip(&self.edge).map(|(r, e)| r + w * e).sum();
        rec + cfg.codebook_weight * self.codebook + cfg.commitment_weight * self.commitment
    }
}

/// `[6, 3, 2, 2]` kernel producing horizontal then vertical forward
/// differences of each RGB channel.
fn edge_kernel() -> Tensor {
    let mut w = Tensor::zeros(vec![6, 3, 2, 2]);
    for c in 0..3 {
        let d = w.data_mut();
        d[(c * 3 + c) * 4] = -1.0;
        d[(c * 3 + c) * 4 + 1] = 1.0;
        d[((3 + c) * 3 + c) * 4] = -1.0;
        d[((3 + c) * 3 + c) * 4 + 2] = 1.0;
    }
    w
}

fn edge_loss(g: &mut Graph, pred: Var, target: Var, kernel: Var) -> Result<Var> {
    let diff = g.sub(pred, target)?;
    let grads = g.conv2d(diff, kernel, None, 1, 0)?;
    let a = g.abs(grads);
    Ok(g.mean(a))
}

/// Keeps a uniform sample of quantizer inputs seen during an epoch.
struct Reservoir {
    items: Vec<Vec<f64>>,
    seen: u64,
    cap: usize,
}

impl Reservoir {
    fn offer(&mut self, map: &Tensor, rng: &mut ChaCha8Rng) {
        let (c, hw) = (map.dim(0), map.dim(1) * map.dim(2));
        for p in 0..hw {
            self.seen += 1;
            let slot = if self.items.len() < self.cap {
                self.items.len()
            } else {
                let j = rng.gen_range(0..self.seen) as usize;
                if j >= self.cap {
                    continue;
                }
                j
            };
            let v: Vec<f64> = (0..c).map(|ch| map.data()[ch * hw + p]).collect();
            if slot == self.items.len() {
                self.items.push(v);
            } else {
                self.items[slot] = v;
            }
        }
    }
}

struct SampleLoss {
    reconstruction: Vec<f64>,
    edge: Vec<f64>,
    codebook: f64,
    commitment: f64,
    total: f64,
}

/// Trains encoder, decoders, codebook and φ jointly: `pretrain_steps` with
/// the edge term off, then `steps` of the full objective. Each batch flips a
/// coin with probability `quant_drop_prob` of feeding the decoders raw
/// encoder features; otherwise the hierarchical tokens are assembled and
/// passed with a straight-through gradient. Report steps count both phases.
pub fn train_rqvae(
    model: &mut Rqvae,
    dataset: &[Image],
    cfg: &RqvaeTrainConfig,
    mut on_step: impl FnMut(&RqvaeLossReport),
) -> Result<Vec<RqvaeLossReport>> {
    if dataset.is_empty() {
        return Err(Error::InvalidArgument("training set is empty".into()));
    }
    if cfg.batch_size == 0 || !(0.0..=1.0).contains(&cfg.quant_drop_prob) {
        return Err(Error::Config("batch_size must be >= 1 and quant_drop_prob in [0, 1]".into()));
    }
    let schedule = model.schedule().clone();
    let pyramids = dataset
        .iter()
        .map(|img| Ok(scale_images(img, model, &schedule)?.into_iter().map(Image::into_tensor).collect()))
        .collect::<Result<Vec<Vec<Tensor>>>>()?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut opt = OptimizerState::new(model.store(), cfg.optimizer);
    let mut usage = model.codebook();
    let mut reservoir = Reservoir { items: Vec::new(), seen: 0, cap: 4 * model.config().codebook_size };
    let mut order: Vec<usize> = (0..dataset.len()).collect();
    let mut cursor = order.len();
    let mut reports = Vec::with_capacity(cfg.total_steps());
    for step in 0..cfg.total_steps() {
        if step == cfg.pretrain_steps && step > 0 {
            opt = OptimizerState::new(model.store(), cfg.optimizer);
        }
        let quantized = rng.gen::<f64>() >= cfg.quant_drop_prob;
        model.store_mut().zero_grads();
        let mut parts = SampleLoss {
            reconstruction: vec![0.0; schedule.scale_count()],
            edge: vec![0.0; schedule.scale_count()],
            codebook: 0.0,
            commitment: 0.0,
            total: 0.0,
        };
        for _ in 0..cfg.batch_size {
            if cursor == order.len() {
                if cursor > 0 && step > 0 && cfg.reseed_dead_codes {
                    reseed_dead_codes(model, &usage, &reservoir, &mut rng)?;
                }
                usage.reset_usage();
                reservoir.items.clear();
                reservoir.seen = 0;
                order.shuffle(&mut rng);
                cursor = 0;
            }
            let sample = &pyramids[order[cursor]];
            cursor += 1;
            let weights = LossWeights {
                edge: cfg.edge_weight_at(step),
                codebook: cfg.codebook_weight,
                commitment: cfg.commitment_weight,
            };
            let loss = sample_step(model, sample, quantized, &weights, &mut usage, &mut reservoir, &mut rng)?;
            for n in 0..parts.reconstruction.len() {
                parts.reconstruction[n] += loss.reconstruction[n];
                parts.edge[n] += loss.edge[n];
            }
            parts.codebook += loss.codebook;
            parts.commitment += loss.commitment;
            parts.total += loss.total;
        }
        let inv = 1.0 / cfg.batch_size as f64;
        let report = RqvaeLossReport {
            step,
            quantized,
            reconstruction: parts.reconstruction.iter().map(|v| v * inv).collect(),
            edge: parts.edge.iter().map(|v| v * inv).collect(),
            codebook: parts.codebook * inv,
            commitment: parts.commitment * inv,
            total: parts.total * inv,
        };
        if !report.total.is_finite() {
            return Err(Error::Diverged {
                step,
                detail: format!(
                    "reconstruction {:?}, edge {:?}, codebook {}, commitment {}",
                    report.reconstruction, report.edge, report.codebook, report.commitment
                ),
            });
        }
        let store = model.store_mut();
        store.scale_grads(inv);
        store.clip_grad_norm(cfg.clip_norm);
        opt.config.lr = cfg.lr_at(step);
        opt.step(store)?;
        on_step(&report);
        reports.push(report);
    }
    Ok(reports)
}

fn sample_step(
    model: &mut Rqvae,
    pyramid: &[Tensor],
    quantized: bool,
    cfg: &LossWeights,
    usage: &mut crate::quantizer::Codebook,
    reservoir: &mut Reservoir,
    rng: &mut ChaCha8Rng,
) -> Result<SampleLoss> {
    let scales = pyramid.len();
    let mut g = Graph::new();
    let kernel = g.constant(edge_kernel());
    let targets: Vec<Var> = pyramid.iter().map(|t| g.constant(t.clone())).collect();
    let feats = targets.iter().map(|&x| model.encode_var(&mut g, x)).collect::<Result<Vec<_>>>()?;
    let mut terms = Vec::new();
    let (mut cb_loss, mut commit_loss) = (0.0, 0.0);
    let mut dec_inputs = feats.clone();
    if quantized {
        let values: Vec<Tensor> = feats.iter().map(|&z| g.value(z).clone()).collect();
        let tokens = hierarchical_tokenize_with(&values, &model.codebook(), model.schedule(), &model.phi(), |_, m| {
            reservoir.offer(m, rng)
        })?;
        usage.record_usage(&tokens.flatten());
        for n in 0..scales {
            let q = model.assemble_var(&mut g, &tokens, n)?;
            let z_sg = g.detach(feats[n]);
            let q_sg = g.detach(q);
            let cb = g.mse(q, z_sg)?;
            let commit = g.mse(feats[n], q_sg)?;
            cb_loss += g.value(cb).data()[0];
            commit_loss += g.value(commit).data()[0];
            terms.push(g.scale(cb, cfg.codebook));
            terms.push(g.scale(commit, cfg.commitment));
            dec_inputs[n] = g.straight_through(feats[n], q)?;
        }
    }
    let mut reconstruction = Vec::with_capacity(scales);
    let mut edge = Vec::with_capacity(scales);
    for n in 0..scales {
        let y = model.decode_var(&mut g, dec_inputs[n], n)?;
        let l2 = g.mse(y, targets[n])?;
        let e = edge_loss(&mut g, y, targets[n], kernel)?;
        reconstruction.push(g.value(l2).data()[0]);
        edge.push(g.value(e).data()[0]);
        terms.push(l2);
        terms.push(g.scale(e, cfg.edge));
    }
    let mut total = terms[0];
    for &t in &terms[1..] {
        total = g.add(total, t)?;
    }
    let total_value = g.value(total).data()[0];
    if total_value.is_finite() {
        g.backward(total)?.accumulate_into(model.store_mut())?;
    }
    Ok(SampleLoss {
        reconstruction,
        edge,
        codebook: cb_loss,
        commitment: commit_loss,
        total: total_value,
    })
}

fn reseed_dead_codes(
    model: &mut Rqvae,
    usage: &crate::quantizer::Codebook,
    reservoir: &Reservoir,
    rng: &mut ChaCha8Rng,
) -> Result<()> {
    let dead = usage.dead_entries();
    if dead.is_empty() || reservoir.items.is_empty() || usage.usage().iter().all(|&u| u == 0) {
        return Ok(());
    }
    let mut cb = model.codebook();
    for k in dead {
        let v = &reservoir.items[rng.gen_range(0..reservoir.items.len())];
        cb.reseed(k, v)?;
    }
    let id = model.codebook_param();
    model.store_mut().get_mut(id).value = cb.vectors().clone();
    Ok(())
}

#[derive(Clone, Debug, PartialEq)]
pub struct FinetuneConfig {
    pub steps: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub seed: u64,
}

impl Default for FinetuneConfig {
    fn default() -> Self {
        Self { steps: 200, batch_size: 8, lr: 1e-4, seed: 0 }
    }
}

/// `Σ_n mse(assemble(tokens, n), Z_n)` averaged over the batch, and its
/// gradient with respect to the codebook, for fixed tokens.
pub fn vocabulary_alignment(
    model: &Rqvae,
    features: &[Vec<Tensor>],
    tokens: &[TokenSequence],
) -> Result<(f64, Tensor)> {
    if features.len() != tokens.len() || features.is_empty() {
        return Err(Error::InvalidArgument("features and tokens must be non-empty and paired".into()));
    }
    let id = model.codebook_param();
    let mut loss = 0.0;
    let mut grad = Tensor::zeros(model.store().value(id).shape().to_vec());
    for (feats, toks) in features.iter().zip(tokens) {
        let mut g = Graph::new();
        let table = g.param(model.store(), id);
        let mut acc: Option<Var> = None;
        for (n, z) in feats.iter().enumerate() {
            let q = model.assemble_var(&mut g, toks, n)?;
            let z = g.constant(z.clone());
            let l = g.mse(q, z)?;
            acc = Some(match acc {
                Some(a) => g.add(a, l)?,
                None => l,
            });
        }
        let total = acc.ok_or_else(|| Error::InvalidArgument("no scales".into()))?;
        loss += g.value(total).data()[0];
        let grads = g.backward(total)?;
        if let Some(gt) = grads.get(table) {
            grad.add_assign(gt)?;
        }
    }
    let inv = 1.0 / features.len() as f64;
    Ok((loss * inv, grad.scale(inv)))
}

/// Updates only the codebook so hierarchical token assemblies match the
/// per-scale encoder features. Every decoder parameter must already be
/// frozen; the encoder and φ are held fixed for the duration. Returns the
/// alignment loss before each step.
pub fn finetune_vocabulary(model: &mut Rqvae, dataset: &[Image], cfg: &FinetuneConfig) -> Result<Vec<f64>> {
    if dataset.is_empty() {
        return Err(Error::InvalidArgument("training set is empty".into()));
    }
    for n in 0..model.schedule().scale_count() {
        let prefix = decoder_prefix(n);
        if let Some((_, p)) = model.store().iter().find(|(_, p)| p.name.starts_with(&prefix) && p.trainable) {
            return Err(Error::DecoderNotFrozen(p.name.clone()));
        }
    }
    let schedule = model.schedule().clone();
    let features = dataset
        .iter()
        .map(|img| scale_images(img, model, &schedule)?.iter().map(|s| model.encode_features(s)).collect())
        .collect::<Result<Vec<Vec<Tensor>>>>()?;
    let flags: Vec<bool> = model.store().iter().map(|(_, p)| p.trainable).collect();
    let ids: Vec<_> = model.store().iter().map(|(id, _)| id).collect();
    for &id in &ids {
        let keep = model.store().get(id).name == CODEBOOK_PARAM;
        model.store_mut().set_trainable(id, keep);
    }
    let result = finetune_loop(model, &features, cfg);
    for (&id, &f) in ids.iter().zip(&flags) {
        model.store_mut().set_trainable(id, f);
    }
    result
}

fn finetune_loop(model: &mut Rqvae, features: &[Vec<Tensor>], cfg: &FinetuneConfig) -> Result<Vec<f64>> {
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let opt_cfg = AdamWConfig { lr: cfg.lr, weight_decay: 0.0, ..AdamWConfig::default() };
    let mut opt = OptimizerState::new(model.store(), opt_cfg);
    let id = model.codebook_param();
    let mut losses = Vec::with_capacity(cfg.steps);
    let batch = cfg.batch_size.clamp(1, features.len());
    for step in 0..cfg.steps {
        let picked: Vec<Vec<Tensor>> = if batch == features.len() {
            features.to_vec()
        } else {
            (0..batch).map(|_| features[rng.gen_range(0..features.len())].clone()).collect()
        };
        let (cb, phi) = (model.codebook(), model.phi());
        let tokens = picked
            .iter()
            .map(|f| hierarchical_tokenize_features(f, &cb, model.schedule(), &phi))
            .collect::<Result<Vec<_>>>()?;
        let (loss, grad) = vocabulary_alignment(model, &picked, &tokens)?;
        if !loss.is_finite() {
            return Err(Error::Diverged { step, detail: format!("alignment loss {loss}") });
        }
        losses.push(loss);
        let store = model.store_mut();
        store.zero_grads();
        store.accumulate_grad(id, &grad)?;
        opt.step(store)?;
    }
    Ok(losses)
}
