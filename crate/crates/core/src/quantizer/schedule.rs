use crate::error::{Error, Result};

/// Level resolutions `ρ_1 < … < ρ_L` and target scales `s_1 < … < s_N = 1`.
///
/// Scale `n` owns the levels whose resolution fits inside its working
/// resolution `s_n ρ_L`; `boundaries()[n]` counts the levels usable to
/// decode scale `n` (all levels with `ρ_k ≤ s_n ρ_L`).
#[derive(Clone, Debug, PartialEq)]
pub struct ScaleSchedule {
    resolutions: Vec<usize>,
    scales: Vec<f64>,
    boundaries: Vec<usize>,
    working: Vec<usize>,
}

const SCALE_EPS: f64 = 1e-9;

impl ScaleSchedule {
    pub fn new(resolutions: Vec<usize>, scales: Vec<f64>) -> Result<Self> {
        if resolutions.is_empty() || resolutions[0] == 0 {
            return Err(Error::Config("schedule needs at least one positive resolution".into()));
        }
        if resolutions.windows(2).any(|w| w[0] >= w[1]) {
            return Err(Error::Config(format!("resolutions must be strictly increasing: {resolutions:?}")));
        }
        if scales.is_empty() || scales.windows(2).any(|w| w[0] >= w[1]) {
            return Err(Error::Config(format!("scales must be non-empty and strictly increasing: {scales:?}")));
        }
        if scales[0] <= 0.0 || (scales[scales.len() - 1] - 1.0).abs() > SCALE_EPS {
            return Err(Error::Config(format!("scales must lie in (0, 1] and end at 1: {scales:?}")));
        }
        let top = *resolutions.last().unwrap() as f64;
        let mut working = Vec::with_capacity(scales.len());
        let mut boundaries = Vec::with_capacity(scales.len());
        for &s in &scales {
            let target = s * top;
            let rounded = target.round();
            if (target - rounded).abs() > SCALE_EPS || rounded < 1.0 {
                return Err(Error::Config(format!("scale {s} gives non-integral working resolution {target}")));
            }
            working.push(rounded as usize);
            let b = resolutions.iter().take_while(|&&r| r as f64 <= target + SCALE_EPS).count();
            if b == 0 {
                return Err(Error::Config(format!("scale {s} owns no level (smallest resolution {})", resolutions[0])));
            }
            boundaries.push(b);
        }
        Ok(Self { resolutions, scales, boundaries, working })
    }

    /// ρ = (4,6,8,10,14,16,20,24,28,32), s = (0.25, 0.5, 1).
    pub fn paper() -> Self {
        Self::new(vec![4, 6, 8, 10, 14, 16, 20, 24, 28, 32], vec![0.25, 0.5, 1.0]).expect("valid preset")
    }

    /// ρ = (2,3,4,6,8,12,16), s = (0.25, 0.5, 1).
    pub fn desk() -> Self {
        Self::new(vec![2, 3, 4, 6, 8, 12, 16], vec![0.25, 0.5, 1.0]).expect("valid preset")
    }

    pub fn levels(&self) -> usize {
        self.resolutions.len()
    }

    pub fn scale_count(&self) -> usize {
        self.scales.len()
    }

    pub fn resolutions(&self) -> &[usize] {
        &self.resolutions
    }

    pub fn resolution(&self, level: usize) -> usize {
        self.resolutions[level]
    }

    /// ρ_L, the latent resolution at native image size.
    pub fn latent_resolution(&self) -> usize {
        *self.resolutions.last().unwrap()
    }

    pub fn scales(&self) -> &[f64] {
        &self.scales
    }

    pub fn boundaries(&self) -> &[usize] {
        &self.boundaries
    }

    /// `s_n ρ_L`.
    pub fn working_resolution(&self, scale: usize) -> usize {
        self.working[scale]
    }

    /// First scale whose prefix contains `level`.
    pub fn owner_scale(&self, level: usize) -> usize {
        self.boundaries.iter().position(|&b| level < b).expect("level within schedule")
    }

    /// Levels introduced by scale `n`: `b_{n-1}..b_n`.
    pub fn scale_levels(&self, scale: usize) -> std::ops::Range<usize> {
        let start = if scale == 0 { 0 } else { self.boundaries[scale - 1] };
        start..self.boundaries[scale]
    }

    /// Σ ρ_l².
    pub fn token_count(&self) -> usize {
        self.resolutions.iter().map(|r| r * r).sum()
    }

    /// Σ ρ_l² over the first `levels` levels.
    pub fn prefix_token_count(&self, levels: usize) -> usize {
        self.resolutions[..levels].iter().map(|r| r * r).sum()
    }

    /// Schedule seen by an image downsampled to scale `n`: its levels
    /// `1..=b_n` and scales `s_1..s_n` rescaled by `1 / s_n`. Requires the
    /// last kept level to match the working resolution of scale `n`.
    pub fn truncate(&self, scale: usize) -> Result<Self> {
        if scale >= self.scales.len() {
            return Err(Error::InvalidArgument(format!("scale {scale} out of range")));
        }
        let b = self.boundaries[scale];
        if self.resolutions[b - 1] != self.working[scale] {
            return Err(Error::Config(format!(
                "level {} has resolution {} but scale {scale} works at {}",
                b,
                self.resolutions[b - 1],
                self.working[scale]
            )));
        }
        let top = self.scales[scale];
        let scales = self.scales[..=scale].iter().map(|s| s / top).collect();
        Self::new(self.resolutions[..b].to_vec(), scales)
    }
}
