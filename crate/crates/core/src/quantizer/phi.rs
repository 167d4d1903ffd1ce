use hvsr_tensor::{Graph, Tensor};

use crate::error::{Error, Result};

/// Filter applied to each upsampled level map before it joins the
/// cumulative reconstruction.
#[derive(Clone, Debug, PartialEq)]
pub enum PhiFilter {
    Identity,
    /// Shared bias-free 3×3 convolution, weights `[n_z, n_z, 3, 3]`, zero
    /// padded so the output keeps the input shape.
    Conv3x3(Tensor),
}

impl PhiFilter {
    pub fn conv(weight: Tensor) -> Result<Self> {
        let s = weight.shape();
        if s.len() != 4 || s[0] != s[1] || s[2] != 3 || s[3] != 3 {
            return Err(Error::Shape(format!("phi weight must be [n_z, n_z, 3, 3], got {s:?}")));
        }
        weight.check_finite()?;
        Ok(Self::Conv3x3(weight))
    }

    /// Convolution initialized to the identity map.
    pub fn identity_conv(n_z: usize) -> Self {
        Self::Conv3x3(identity_kernel(n_z))
    }

    pub fn apply(&self, map: &Tensor) -> Result<Tensor> {
        match self {
            Self::Identity => Ok(map.clone()),
            Self::Conv3x3(w) => {
                let mut g = Graph::inference();
                let x = g.constant(map.clone());
                let w = g.constant(w.clone());
                let y = g.conv2d(x, w, None, 1, 1)?;
                Ok(g.value(y).clone())
            }
        }
    }
}

/// `[n, n, 3, 3]` kernel whose convolution is the identity.
pub fn identity_kernel(n: usize) -> Tensor {
    let mut w = Tensor::zeros(vec![n, n, 3, 3]);
    for c in 0..n {
        w.data_mut()[(c * n + c) * 9 + 4] = 1.0;
    }
    w
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn identity_conv_is_identity() {
        let x = Tensor::from_fn(vec![2, 3, 4], |i| (i as f64 * 0.37).sin());
        let y = PhiFilter::identity_conv(2).apply(&x).unwrap();
        assert_eq!(y, x);
    }

    #[test]
    fn conv_keeps_shape() {
        let w = Tensor::from_fn(vec![2, 2, 3, 3], |i| i as f64 * 0.01);
        let x = Tensor::ones(vec![2, 5, 5]);
        assert_eq!(PhiFilter::conv(w).unwrap().apply(&x).unwrap().shape(), &[2, 5, 5]);
        assert!(PhiFilter::conv(Tensor::zeros(vec![2, 3, 3, 3])).is_err());
    }
}
