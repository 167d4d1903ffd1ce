use hvsr_tensor::{AdamWConfig, Graph, OptimizerState};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{loss_ce, loss_dpo, Conditioning, VarExample, VarModel};
use crate::error::{Error, Result};
use crate::image::DegradationClass;
use crate::nn::cosine_lr;

#[derive(Clone, Debug, PartialEq)]
pub struct VarTrainConfig {
    pub steps: usize,
    pub batch_size: usize,
    pub optimizer: AdamWConfig,
    pub lr_floor: f64,
    /// Weight of the DPO term; 0 gives the cross-entropy-only ablation.
    pub dpo_weight: f64,
    pub clip_norm: f64,
    pub seed: u64,
}

impl Default for VarTrainConfig {
    fn default() -> Self {
        Self {
            steps: 600,
            batch_size: 8,
            optimizer: AdamWConfig::default(),
            lr_floor: 0.05,
            dpo_weight: 1.0,
            clip_norm: 1.0,
            seed: 0,
        }
    }
}

/// Batch means of one optimizer step.
#[derive(Clone, Debug, PartialEq)]
pub struct VarLossReport {
    pub step: usize,
    pub ce: f64,
    pub dpo: f64,
    pub total: f64,
}

/// Cross-entropy on HR tokens plus `dpo_weight` times the DPO term, both
/// from one teacher-forced pass. Each sample's class is swapped for the
/// class-free one with the configured probability.
pub fn train_var(
    model: &mut VarModel,
    examples: &[VarExample],
    cfg: &VarTrainConfig,
    mut on_step: impl FnMut(&VarLossReport),
) -> Result<Vec<VarLossReport>> {
    if examples.is_empty() || cfg.batch_size == 0 {
        return Err(Error::InvalidArgument("need examples and a positive batch size".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut opt = OptimizerState::new(model.store(), cfg.optimizer);
    let beta = model.config().dpo_beta;
    let free_prob = model.config().class_free_prob;
    let mut order: Vec<usize> = (0..examples.len()).collect();
    let mut cursor = order.len();
    let mut reports = Vec::with_capacity(cfg.steps);
    for step in 0..cfg.steps {
        model.store_mut().zero_grads();
        let (mut ce_sum, mut dpo_sum) = (0.0, 0.0);
        for _ in 0..cfg.batch_size {
            if cursor == order.len() {
                order.shuffle(&mut rng);
                cursor = 0;
            }
            let ex = &examples[order[cursor]];
            cursor += 1;
            let class = if rng.gen::<f64>() < free_prob { DegradationClass::ClassFree.index() } else { ex.cond.class };
            let cond = ex.cond.with_class(class);
            let mut g = Graph::new();
            let logits = model.forward(&mut g, &cond, &ex.inputs)?;
            let ce = loss_ce(&mut g, logits, &ex.hr_tokens)?;
            let mut total = ce;
            let mut dpo_value = 0.0;
            if cfg.dpo_weight != 0.0 {
                let dpo = loss_dpo(&mut g, logits, &ex.hr_tokens, &ex.lr_tokens, beta)?;
                dpo_value = g.value(dpo).data()[0];
                let weighted = g.scale(dpo, cfg.dpo_weight);
                total = g.add(ce, weighted)?;
            }
            let ce_value = g.value(ce).data()[0];
            if !(ce_value.is_finite() && dpo_value.is_finite()) {
                return Err(Error::Diverged { step, detail: format!("ce {ce_value}, dpo {dpo_value}") });
            }
            g.backward(total)?.accumulate_into(model.store_mut())?;
            ce_sum += ce_value;
            dpo_sum += dpo_value;
        }
        let inv = 1.0 / cfg.batch_size as f64;
        let store = model.store_mut();
        store.scale_grads(inv);
        store.clip_grad_norm(cfg.clip_norm);
        opt.config.lr = cosine_lr(cfg.optimizer.lr, step, cfg.steps, cfg.lr_floor);
        opt.step(store)?;
        let report = VarLossReport {
            step,
            ce: ce_sum * inv,
            dpo: dpo_sum * inv,
            total: (ce_sum + cfg.dpo_weight * dpo_sum) * inv,
        };
        on_step(&report);
        reports.push(report);
    }
    Ok(reports)
}

/// Mean teacher-forced negative log-likelihood of a token sequence.
pub fn evaluate_nll(model: &VarModel, cond: &Conditioning, inputs: &[hvsr_tensor::Tensor], tokens: &[u32]) -> Result<f64> {
    let mut g = Graph::inference();
    let logits = model.forward(&mut g, cond, inputs)?;
    let ce = loss_ce(&mut g, logits, tokens)?;
    Ok(g.value(ce).data()[0])
}
