//! Separable resampling kernels for `[C, H, W]` maps.
//!
//! Every mode uses half-pixel centers: output sample `i` of an axis resized
//! from `n_in` to `n_out` sits at source coordinate
//! `(i + 0.5) * n_in / n_out - 0.5`.
//!
//! * `Bilinear` interpolates the two neighbouring source samples, clamping
//!   coordinates to `[0, n_in - 1]`. No antialiasing is applied when
//!   shrinking.
//! * `Area` averages the source interval `[i, i + 1) * n_in / n_out` with
//!   exact fractional-overlap weights, so the global mean is preserved.
//! * `Nearest` picks source index `floor((i + 0.5) * n_in / n_out)`.
//!
//! Weights are derived with integer arithmetic, so a resize to the same size
//! is an exact copy and repeated runs are bit-identical.

use std::sync::Arc;

use crate::error::{Result, TensorError};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum ResampleMode {
    Bilinear,
    Area,
    Nearest,
}

impl ResampleMode {
    /// Area for shrinking, bilinear for growing.
    pub fn default_for(src: usize, dst: usize) -> Self {
        if dst < src {
            ResampleMode::Area
        } else {
            ResampleMode::Bilinear
        }
    }
}

/// Sparse weights mapping one axis of length `n_in` onto `n_out` samples.
#[derive(Clone, Debug)]
pub struct AxisWeights {
    pub n_in: usize,
    pub n_out: usize,
    pub taps: Vec<Vec<(usize, f64)>>,
}

impl AxisWeights {
    pub fn new(n_in: usize, n_out: usize, mode: ResampleMode) -> Self {
        assert!(n_in >= 1 && n_out >= 1, "resample extents must be >= 1");
        let taps = (0..n_out)
            .map(|i| {
                if n_in == n_out {
                    return vec![(i, 1.0)];
                }
                match mode {
                    ResampleMode::Nearest => {
                        // floor((2i + 1) * n_in / (2 n_out))
                        let j = ((2 * i + 1) * n_in) / (2 * n_out);
                        vec![(j.min(n_in - 1), 1.0)]
                    }
                    ResampleMode::Bilinear => bilinear_taps(i, n_in, n_out),
                    ResampleMode::Area => area_taps(i, n_in, n_out),
                }
            })
            .collect();
        Self { n_in, n_out, taps }
    }
}

fn bilinear_taps(i: usize, n_in: usize, n_out: usize) -> Vec<(usize, f64)> {
    // Source coordinate as the rational ((2i+1) n_in - n_out) / (2 n_out).
    let num = (2 * i + 1) as i64 * n_in as i64 - n_out as i64;
    let den = 2 * n_out as i64;
    if num <= 0 {
        return vec![(0, 1.0)];
    }
    let j0 = (num / den) as usize;
    if j0 >= n_in - 1 {
        return vec![(n_in - 1, 1.0)];
    }
    let rem = num % den;
    if rem == 0 {
        return vec![(j0, 1.0)];
    }
    let t = rem as f64 / den as f64;
    vec![(j0, 1.0 - t), (j0 + 1, t)]
}

fn area_taps(i: usize, n_in: usize, n_out: usize) -> Vec<(usize, f64)> {
    // Work in units of 1 / n_out of a source pixel: output i spans
    // [i n_in, (i+1) n_in), source j spans [j n_out, (j+1) n_out).
    let lo = i * n_in;
    let hi = (i + 1) * n_in;
    let first = lo / n_out;
    let last = (hi - 1) / n_out;
    (first..=last.min(n_in - 1))
        .filter_map(|j| {
            let a = lo.max(j * n_out);
            let b = hi.min((j + 1) * n_out);
            (b > a).then(|| (j, (b - a) as f64 / n_in as f64))
        })
        .collect()
}

/// Precomputed 2-D resampling plan.
#[derive(Clone, Debug)]
pub struct ResamplePlan {
    pub rows: AxisWeights,
    pub cols: AxisWeights,
}

impl ResamplePlan {
    pub fn new(src: (usize, usize), dst: (usize, usize), mode: ResampleMode) -> Arc<Self> {
        Arc::new(Self {
            rows: AxisWeights::new(src.0, dst.0, mode),
            cols: AxisWeights::new(src.1, dst.1, mode),
        })
    }

    fn is_identity(&self) -> bool {
        self.rows.n_in == self.rows.n_out && self.cols.n_in == self.cols.n_out
    }

    /// Applies the plan to a `[C, H, W]` buffer.
    pub fn forward(&self, x: &[f64], channels: usize) -> Vec<f64> {
        if self.is_identity() {
            return x.to_vec();
        }
        let (hi, wi) = (self.rows.n_in, self.cols.n_in);
        let (ho, wo) = (self.rows.n_out, self.cols.n_out);
        let mut tmp = vec![0.0; channels * hi * wo];
        for c in 0..channels {
            for r in 0..hi {
                let src = &x[(c * hi + r) * wi..(c * hi + r + 1) * wi];
                let dst = &mut tmp[(c * hi + r) * wo..(c * hi + r + 1) * wo];
                for (j, taps) in self.cols.taps.iter().enumerate() {
                    dst[j] = taps.iter().map(|&(k, w)| w * src[k]).sum();
                }
            }
        }
        let mut out = vec![0.0; channels * ho * wo];
        for c in 0..channels {
            for (i, taps) in self.rows.taps.iter().enumerate() {
                let dst = &mut out[(c * ho + i) * wo..(c * ho + i + 1) * wo];
                for &(k, w) in taps {
                    let src = &tmp[(c * hi + k) * wo..(c * hi + k + 1) * wo];
                    for (d, s) in dst.iter_mut().zip(src) {
                        *d += w * s;
                    }
                }
            }
        }
        out
    }

    /// Adjoint of [`forward`](Self::forward): maps output-space gradients back
    /// to the source grid.
    pub fn adjoint(&self, g: &[f64], channels: usize) -> Vec<f64> {
        if self.is_identity() {
            return g.to_vec();
        }
        let (hi, wi) = (self.rows.n_in, self.cols.n_in);
        let (ho, wo) = (self.rows.n_out, self.cols.n_out);
        let mut tmp = vec![0.0; channels * hi * wo];
        for c in 0..channels {
            for (i, taps) in self.rows.taps.iter().enumerate() {
                let src = &g[(c * ho + i) * wo..(c * ho + i + 1) * wo];
                for &(k, w) in taps {
                    let dst = &mut tmp[(c * hi + k) * wo..(c * hi + k + 1) * wo];
                    for (d, s) in dst.iter_mut().zip(src) {
                        *d += w * s;
                    }
                }
            }
        }
        let mut out = vec![0.0; channels * hi * wi];
        for c in 0..channels {
            for r in 0..hi {
                let src = &tmp[(c * hi + r) * wo..(c * hi + r + 1) * wo];
                let dst = &mut out[(c * hi + r) * wi..(c * hi + r + 1) * wi];
                for (j, taps) in self.cols.taps.iter().enumerate() {
                    for &(k, w) in taps {
                        dst[k] += w * src[j];
                    }
                }
            }
        }
        out
    }
}

/// Resizes a `[C, H, W]` tensor. A same-size request returns an exact copy.
pub fn interpolate(x: &Tensor, h: usize, w: usize, mode: ResampleMode) -> Result<Tensor> {
    if x.rank() != 3 {
        return Err(TensorError::InvalidArgument {
            op: "interpolate",
            msg: format!("expected [C, H, W], got {:?}", x.shape()),
        });
    }
    if h == 0 || w == 0 {
        return Err(TensorError::InvalidArgument {
            op: "interpolate",
            msg: format!("target extents must be >= 1, got {h}x{w}"),
        });
    }
    let (c, hi, wi) = (x.dim(0), x.dim(1), x.dim(2));
    let plan = ResamplePlan::new((hi, wi), (h, w), mode);
    Tensor::new(vec![c, h, w], plan.forward(x.data(), c))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn area_row_halving() {
        let x = Tensor::new(vec![1, 1, 4], vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        let y = interpolate(&x, 1, 2, ResampleMode::Area).unwrap();
        assert_eq!(y.data(), &[1.5, 3.5]);
    }

    #[test]
    fn same_size_is_exact_copy() {
        let x = Tensor::from_fn(vec![2, 3, 5], |i| (i as f64 * 0.37).sin());
        for mode in [ResampleMode::Area, ResampleMode::Bilinear, ResampleMode::Nearest] {
            let y = interpolate(&x, 3, 5, mode).unwrap();
            assert_eq!(x, y);
        }
    }

    #[test]
    fn weights_sum_to_one() {
        for (a, b) in [(4, 7), (7, 4), (16, 3), (3, 16), (5, 5), (1, 9), (9, 1)] {
            for mode in [ResampleMode::Area, ResampleMode::Bilinear, ResampleMode::Nearest] {
                let ax = AxisWeights::new(a, b, mode);
                for taps in &ax.taps {
                    let s: f64 = taps.iter().map(|t| t.1).sum();
                    assert!((s - 1.0).abs() < 1e-15, "{a}->{b} {mode:?}: {s}");
                }
            }
        }
    }

    #[test]
    fn nearest_picks_center_sample() {
        let x = Tensor::new(vec![1, 1, 4], vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        let y = interpolate(&x, 1, 2, ResampleMode::Nearest).unwrap();
        assert_eq!(y.data(), &[2.0, 4.0]);
    }

    #[test]
    fn adjoint_matches_dot_product_identity() {
        let plan = ResamplePlan::new((5, 3), (2, 7), ResampleMode::Bilinear);
        let x: Vec<f64> = (0..30).map(|i| (i as f64 * 0.3).cos()).collect();
        let g: Vec<f64> = (0..28).map(|i| (i as f64 * 0.7).sin()).collect();
        let ax = plan.forward(&x, 2);
        let atg = plan.adjoint(&g, 2);
        let lhs: f64 = ax.iter().zip(&g).map(|(a, b)| a * b).sum();
        let rhs: f64 = x.iter().zip(&atg).map(|(a, b)| a * b).sum();
        assert!((lhs - rhs).abs() < 1e-12);
    }
}
