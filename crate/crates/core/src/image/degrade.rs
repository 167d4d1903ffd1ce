//! Simplified low-resolution synthesis: Gaussian blur, area downsampling and
//! additive Gaussian noise, with a bilinear-only branch taken with
//! probability `bilinear_only_prob`.

use hvsr_tensor::{ResampleMode, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use super::{interpolate, Image};
use crate::error::{Error, Result};

/// Conditioning class attached to a training pair.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum DegradationClass {
    Degraded = 0,
    NonDegraded = 1,
    ClassFree = 2,
}

impl DegradationClass {
    pub const COUNT: usize = 3;

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn from_index(i: usize) -> Result<Self> {
        match i {
            0 => Ok(Self::Degraded),
            1 => Ok(Self::NonDegraded),
            2 => Ok(Self::ClassFree),
            _ => Err(Error::InvalidArgument(format!("degradation class {i} not in 0..3"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct DegradationConfig {
    /// Blur sigma range in HR pixels; `(0, 0)` disables blurring.
    pub blur_sigma: (f64, f64),
    pub factor: usize,
    /// Noise sigma range on the `[0, 1]` scale; `(0, 0)` disables noise.
    pub noise_sigma: (f64, f64),
    pub bilinear_only_prob: f64,
    pub seed: u64,
}

impl Default for DegradationConfig {
    fn default() -> Self {
        Self {
            blur_sigma: (0.2, 2.0),
            factor: 4,
            noise_sigma: (0.0, 0.05),
            bilinear_only_prob: 0.25,
            seed: 0,
        }
    }
}

impl DegradationConfig {
    pub fn validate(&self) -> Result<()> {
        let range_ok = |(lo, hi): (f64, f64)| lo.is_finite() && hi.is_finite() && 0.0 <= lo && lo <= hi;
        if self.factor == 0 {
            return Err(Error::Config("degradation factor must be >= 1".into()));
        }
        if !(0.0..=1.0).contains(&self.bilinear_only_prob) {
            return Err(Error::Config(format!("bilinear_only_prob {} not in [0, 1]", self.bilinear_only_prob)));
        }
        if !range_ok(self.blur_sigma) || !range_ok(self.noise_sigma) {
            return Err(Error::Config("sigma ranges must satisfy 0 <= lo <= hi".into()));
        }
        Ok(())
    }

    /// Same configuration with a different seed.
    pub fn with_seed(&self, seed: u64) -> Self {
        Self { seed, ..self.clone() }
    }
}

fn sample_range(rng: &mut ChaCha8Rng, (lo, hi): (f64, f64)) -> f64 {
    if hi > lo {
        rng.gen_range(lo..=hi)
    } else {
        lo
    }
}

fn gaussian_kernel(sigma: f64) -> Vec<f64> {
    let radius = (3.0 * sigma).ceil().max(1.0) as i64;
    let k: Vec<f64> = (-radius..=radius).map(|i| (-(i * i) as f64 / (2.0 * sigma * sigma)).exp()).collect();
    let s: f64 = k.iter().sum();
    k.into_iter().map(|v| v / s).collect()
}

/// Separable Gaussian blur with clamp-to-edge borders.
fn blur(x: &Tensor, sigma: f64) -> Tensor {
    let k = gaussian_kernel(sigma);
    let r = (k.len() / 2) as i64;
    let (c, h, w) = (x.dim(0), x.dim(1), x.dim(2));
    let src = x.data();
    let mut tmp = vec![0.0; src.len()];
    for ch in 0..c {
        for y in 0..h {
            for xx in 0..w {
                let mut acc = 0.0;
                for (t, kv) in k.iter().enumerate() {
                    let sx = (xx as i64 + t as i64 - r).clamp(0, w as i64 - 1) as usize;
                    acc += kv * src[(ch * h + y) * w + sx];
                }
                tmp[(ch * h + y) * w + xx] = acc;
            }
        }
    }
    let mut out = vec![0.0; src.len()];
    for ch in 0..c {
        for y in 0..h {
            for xx in 0..w {
                let mut acc = 0.0;
                for (t, kv) in k.iter().enumerate() {
                    let sy = (y as i64 + t as i64 - r).clamp(0, h as i64 - 1) as usize;
                    acc += kv * tmp[(ch * h + sy) * w + xx];
                }
                out[(ch * h + y) * w + xx] = acc;
            }
        }
    }
    Tensor::new(x.shape().to_vec(), out).expect("same shape")
}

/// Produces the low-resolution counterpart of `hr` and its class. The result
/// is a pure function of `(hr, cfg)`.
pub fn degrade(hr: &Image, cfg: &DegradationConfig) -> Result<(Image, DegradationClass)> {
    cfg.validate()?;
    let (h, w) = (hr.height(), hr.width());
    if h % cfg.factor != 0 || w % cfg.factor != 0 {
        return Err(Error::InvalidArgument(format!(
            "image {h}x{w} not divisible by degradation factor {}",
            cfg.factor
        )));
    }
    let (lh, lw) = (h / cfg.factor, w / cfg.factor);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    if rng.gen::<f64>() < cfg.bilinear_only_prob {
        let lr = interpolate(hr.tensor(), lh, lw, ResampleMode::Bilinear)?;
        return Ok((Image::new(lr)?, DegradationClass::NonDegraded));
    }
    let blur_sigma = sample_range(&mut rng, cfg.blur_sigma);
    let noise_sigma = sample_range(&mut rng, cfg.noise_sigma);
    let blurred = if blur_sigma > 0.0 { blur(hr.tensor(), blur_sigma) } else { hr.tensor().clone() };
    let mut lr = interpolate(&blurred, lh, lw, ResampleMode::Area)?;
    if noise_sigma > 0.0 {
        let normal = Normal::new(0.0, noise_sigma).map_err(|e| Error::Config(e.to_string()))?;
        for v in lr.data_mut() {
            *v = (*v + normal.sample(&mut rng)).clamp(0.0, 1.0);
        }
    }
    Ok((Image::new(lr)?, DegradationClass::Degraded))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn pattern(h: usize, w: usize) -> Image {
        Image::new(Tensor::from_fn(vec![3, h, w], |i| ((i * 7919) % 257) as f64 / 256.0)).unwrap()
    }

    #[test]
    fn forced_bilinear_branch() {
        let hr = pattern(16, 12);
        let cfg = DegradationConfig { bilinear_only_prob: 1.0, ..Default::default() };
        let (lr, class) = degrade(&hr, &cfg).unwrap();
        assert_eq!(class, DegradationClass::NonDegraded);
        let expected = interpolate(hr.tensor(), 4, 3, ResampleMode::Bilinear).unwrap();
        assert_eq!(lr.tensor(), &expected);
    }

    #[test]
    fn degenerate_pipeline_is_area_downsample() {
        let hr = pattern(16, 16);
        let cfg = DegradationConfig {
            blur_sigma: (0.0, 0.0),
            noise_sigma: (0.0, 0.0),
            bilinear_only_prob: 0.0,
            ..Default::default()
        };
        let (lr, class) = degrade(&hr, &cfg).unwrap();
        assert_eq!(class, DegradationClass::Degraded);
        assert_eq!(lr.tensor(), &interpolate(hr.tensor(), 4, 4, ResampleMode::Area).unwrap());
    }

    #[test]
    fn fixed_seed_is_reproducible() {
        let hr = pattern(32, 32);
        let cfg = DegradationConfig { seed: 42, bilinear_only_prob: 0.0, ..Default::default() };
        assert_eq!(degrade(&hr, &cfg).unwrap(), degrade(&hr, &cfg).unwrap());
        let other = degrade(&hr, &cfg.with_seed(43)).unwrap();
        assert_ne!(degrade(&hr, &cfg).unwrap().0, other.0);
    }

    #[test]
    fn indivisible_dimensions_are_rejected() {
        assert!(degrade(&pattern(10, 16), &DegradationConfig::default()).is_err());
    }

    #[test]
    fn blur_preserves_constants() {
        let x = Tensor::full(vec![3, 9, 7], 0.3);
        assert!(blur(&x, 1.3).max_abs_diff(&x) < 1e-12);
    }
}
