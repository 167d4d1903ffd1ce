use hvsr_tensor::{Graph, Tensor, Var};

use crate::error::{Error, Result};

fn indices(tokens: &[u32], rows: usize) -> Result<Vec<usize>> {
    if tokens.len() != rows {
        return Err(Error::Shape(format!("{} targets for {rows} logit rows", tokens.len())));
    }
    Ok(tokens.iter().map(|&k| k as usize).collect())
}

/// Mean negative log-likelihood of `tokens` under `logits [T, K]`.
pub fn loss_ce(g: &mut Graph, logits: Var, tokens: &[u32]) -> Result<Var> {
    let idx = indices(tokens, g.value(logits).dim(0))?;
    let lp = g.log_softmax(logits)?;
    let picked = g.gather(lp, &idx)?;
    let m = g.mean(picked);
    Ok(g.neg(m))
}

/// `Σ_t log softmax(logits_t)[tokens_t]`.
pub fn sequence_log_prob(g: &mut Graph, logits: Var, tokens: &[u32]) -> Result<Var> {
    let idx = indices(tokens, g.value(logits).dim(0))?;
    let lp = g.log_softmax(logits)?;
    let picked = g.gather(lp, &idx)?;
    Ok(g.sum(picked))
}

/// `−log σ(β (log p(z_hr) − log p(z_lr)))`, both log-likelihoods read from
/// the same `logits`.
pub fn loss_dpo(g: &mut Graph, logits: Var, z_hr: &[u32], z_lr: &[u32], beta: f64) -> Result<Var> {
    if z_hr.len() != z_lr.len() {
        return Err(Error::Shape(format!("HR sequence has {} tokens, LR has {}", z_hr.len(), z_lr.len())));
    }
    let hr = sequence_log_prob(g, logits, z_hr)?;
    let lr = sequence_log_prob(g, logits, z_lr)?;
    let ratio = g.sub(hr, lr)?;
    let arg = g.scale(ratio, beta);
    let ls = g.log_sigmoid(arg);
    Ok(g.neg(ls))
}

/// `cond + w (cond − free)`.
pub fn classifier_free_guidance(cond: &Tensor, free: &Tensor, w: f64) -> Result<Tensor> {
    if cond.shape() != free.shape() {
        return Err(Error::Shape(format!("guidance logits {:?} vs {:?}", cond.shape(), free.shape())));
    }
    if w == 0.0 {
        return Ok(cond.clone());
    }
    let data = cond.data().iter().zip(free.data()).map(|(c, f)| c + w * (c - f)).collect();
    Ok(Tensor::new(cond.shape().to_vec(), data)?)
}
