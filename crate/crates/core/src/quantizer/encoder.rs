use hvsr_tensor::{ResampleMode, Tensor};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::error::{Error, Result};
use crate::image::{interpolate, Image};

/// Maps a `[3, H, W]` image to `[n_z, H/d, W/d]` features.
pub trait FeatureEncoder {
    fn latent_dim(&self) -> usize;
    /// Spatial reduction `d = 1/f`.
    fn downsample(&self) -> usize;
    fn encode(&self, image: &Image) -> Result<Tensor>;
}

/// Parameter-free encoder: area pooling followed by a fixed random
/// per-pixel channel mix and `tanh`. Useful wherever an encoder is needed
/// without training one.
#[derive(Clone, Debug)]
pub struct ProjectionEncoder {
    downsample: usize,
    /// `[n_z, 3]`
    mix: Tensor,
    bias: Vec<f64>,
}

impl ProjectionEncoder {
    pub fn new(latent_dim: usize, downsample: usize, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mix = Tensor::from_fn(vec![latent_dim, 3], |_| 1.5 * Distribution::<f64>::sample(&StandardNormal, &mut rng));
        let bias = (0..latent_dim).map(|_| 0.5 * Distribution::<f64>::sample(&StandardNormal, &mut rng)).collect();
        Self { downsample, mix, bias }
    }
}

impl FeatureEncoder for ProjectionEncoder {
    fn latent_dim(&self) -> usize {
        self.mix.dim(0)
    }

    fn downsample(&self) -> usize {
        self.downsample
    }

    fn encode(&self, image: &Image) -> Result<Tensor> {
        let d = self.downsample;
        let (h, w) = (image.height(), image.width());
        if h % d != 0 || w % d != 0 {
            return Err(Error::Shape(format!("{h}x{w} image not divisible by {d}")));
        }
        let pooled = interpolate(image.tensor(), h / d, w / d, ResampleMode::Area)?;
        let hw = (h / d) * (w / d);
        let n_z = self.latent_dim();
        let mut out = vec![0.0; n_z * hw];
        for c in 0..n_z {
            let m = self.mix.row(c);
            for p in 0..hw {
                let v = m[0] * pooled.data()[p] + m[1] * pooled.data()[hw + p] + m[2] * pooled.data()[2 * hw + p];
                out[c * hw + p] = (v + self.bias[c]).tanh();
            }
        }
        Ok(Tensor::new(vec![n_z, h / d, w / d], out)?)
    }
}
