//! Small layer library on top of the tape: convolutions, linear maps,
//! normalization and residual blocks, each owning its parameter ids.

use hvsr_tensor::{Graph, ParamId, ParamStore, Tensor, Var};
use rand::Rng;
use rand_distr::StandardNormal;

use crate::error::Result;

pub(crate) fn normal(shape: Vec<usize>, std: f64, rng: &mut impl Rng) -> Tensor {
    Tensor::from_fn(shape, |_| std * rng.sample::<f64, _>(StandardNormal))
}

#[derive(Clone, Debug)]
pub struct Conv2d {
    pub weight: ParamId,
    pub bias: Option<ParamId>,
    pub stride: usize,
    pub pad: usize,
}

impl Conv2d {
    /// He-normal weights scaled by `gain`, zero bias.
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        cin: usize,
        cout: usize,
        kernel: usize,
        stride: usize,
        bias: bool,
        gain: f64,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        let std = gain * (2.0 / (cin * kernel * kernel) as f64).sqrt();
        let weight = store.add(format!("{name}.w"), normal(vec![cout, cin, kernel, kernel], std, rng), true)?;
        let bias = if bias {
            Some(store.add(format!("{name}.b"), Tensor::zeros(vec![cout]), false)?)
        } else {
            None
        };
        Ok(Self { weight, bias, stride, pad: kernel / 2 })
    }

    pub fn forward(&self, g: &mut Graph, store: &ParamStore, x: Var) -> Result<Var> {
        let w = g.param(store, self.weight);
        let b = self.bias.map(|b| g.param(store, b));
        Ok(g.conv2d(x, w, b, self.stride, self.pad)?)
    }
}

#[derive(Clone, Debug)]
pub struct GroupNorm {
    pub gamma: ParamId,
    pub beta: ParamId,
    pub groups: usize,
}

impl GroupNorm {
    pub fn new(store: &mut ParamStore, name: &str, channels: usize, groups: usize) -> Result<Self> {
        Ok(Self {
            gamma: store.add(format!("{name}.gamma"), Tensor::ones(vec![channels]), false)?,
            beta: store.add(format!("{name}.beta"), Tensor::zeros(vec![channels]), false)?,
            groups,
        })
    }

    pub fn forward(&self, g: &mut Graph, store: &ParamStore, x: Var) -> Result<Var> {
        let (gamma, beta) = (g.param(store, self.gamma), g.param(store, self.beta));
        Ok(g.group_norm(x, self.groups, gamma, beta, 1e-5)?)
    }
}

/// `x + conv(gelu(norm(conv(gelu(norm(x))))))` on `[C, H, W]` maps.
#[derive(Clone, Debug)]
pub struct ResBlock {
    norm1: GroupNorm,
    conv1: Conv2d,
    norm2: GroupNorm,
    conv2: Conv2d,
}

impl ResBlock {
    pub fn new(store: &mut ParamStore, name: &str, channels: usize, groups: usize, rng: &mut impl Rng) -> Result<Self> {
        Ok(Self {
            norm1: GroupNorm::new(store, &format!("{name}.norm1"), channels, groups)?,
            conv1: Conv2d::new(store, &format!("{name}.conv1"), channels, channels, 3, 1, true, 1.0, rng)?,
            norm2: GroupNorm::new(store, &format!("{name}.norm2"), channels, groups)?,
            conv2: Conv2d::new(store, &format!("{name}.conv2"), channels, channels, 3, 1, true, 0.1, rng)?,
        })
    }

    pub fn forward(&self, g: &mut Graph, store: &ParamStore, x: Var) -> Result<Var> {
        let h = self.norm1.forward(g, store, x)?;
        let h = g.gelu(h);
        let h = self.conv1.forward(g, store, h)?;
        let h = self.norm2.forward(g, store, h)?;
        let h = g.gelu(h);
        let h = self.conv2.forward(g, store, h)?;
        Ok(g.add(x, h)?)
    }
}

/// `x [n, in] · W [in, out] + b`.
#[derive(Clone, Debug)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: Option<ParamId>,
}

impl Linear {
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        din: usize,
        dout: usize,
        bias: bool,
        std: f64,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        let weight = store.add(format!("{name}.w"), normal(vec![din, dout], std, rng), true)?;
        let bias = if bias {
            Some(store.add(format!("{name}.b"), Tensor::zeros(vec![dout]), false)?)
        } else {
            None
        };
        Ok(Self { weight, bias })
    }

    pub fn forward(&self, g: &mut Graph, store: &ParamStore, x: Var) -> Result<Var> {
        let w = g.param(store, self.weight);
        let b = self.bias.map(|b| g.param(store, b));
        Ok(g.linear(x, w, b)?)
    }
}

#[derive(Clone, Debug)]
pub struct LayerNorm {
    pub gamma: ParamId,
    pub beta: ParamId,
}

impl LayerNorm {
    pub fn new(store: &mut ParamStore, name: &str, dim: usize) -> Result<Self> {
        Ok(Self {
            gamma: store.add(format!("{name}.gamma"), Tensor::ones(vec![dim]), false)?,
            beta: store.add(format!("{name}.beta"), Tensor::zeros(vec![dim]), false)?,
        })
    }

    pub fn forward(&self, g: &mut Graph, store: &ParamStore, x: Var) -> Result<Var> {
        let (gamma, beta) = (g.param(store, self.gamma), g.param(store, self.beta));
        Ok(g.layer_norm(x, gamma, beta, 1e-5)?)
    }
}

/// Cosine decay from `base` at step 0 to `floor · base` at `total`.
pub fn cosine_lr(base: f64, step: usize, total: usize, floor: f64) -> f64 {
    let t = if total == 0 { 1.0 } else { (step as f64 / total as f64).min(1.0) };
    base * (floor + (1.0 - floor) * 0.5 * (1.0 + (std::f64::consts::PI * t).cos()))
}
