//! RGB images, resampling and the low-resolution degradation pipeline.
//!
//! All resizing goes through [`hvsr_tensor::resample`], whose half-pixel
//! center convention is the single convention used across the crate:
//! shrinking defaults to area averaging and growing to bilinear.

mod degrade;
mod io;

pub use degrade::{degrade, DegradationClass, DegradationConfig};
pub use io::{decode_png, encode_png, read_png, read_raw_tensor, write_png, write_raw_tensor, decode_raw_tensor, encode_raw_tensor};

use hvsr_tensor::{resample, ResampleMode, Tensor};

use crate::error::{Error, Result};

/// Three-channel image with values nominally in `[0, 1]`, stored `[3, H, W]`.
#[derive(Clone, Debug, PartialEq)]
pub struct Image {
    pixels: Tensor,
}

impl Image {
    pub fn new(pixels: Tensor) -> Result<Self> {
        if pixels.rank() != 3 || pixels.dim(0) != 3 || pixels.dim(1) == 0 || pixels.dim(2) == 0 {
            return Err(Error::Shape(format!("image must be [3, H>=1, W>=1], got {:?}", pixels.shape())));
        }
        Ok(Self { pixels })
    }

    /// Like [`new`](Self::new) but clamps every value into `[0, 1]`.
    pub fn clamped(pixels: Tensor) -> Result<Self> {
        Self::new(pixels.map(|v| v.clamp(0.0, 1.0)))
    }

    pub fn filled(height: usize, width: usize, value: f64) -> Self {
        Self {
            pixels: Tensor::full(vec![3, height, width], value),
        }
    }

    pub fn height(&self) -> usize {
        self.pixels.dim(1)
    }

    pub fn width(&self) -> usize {
        self.pixels.dim(2)
    }

    pub fn tensor(&self) -> &Tensor {
        &self.pixels
    }

    pub fn into_tensor(self) -> Tensor {
        self.pixels
    }

    /// Resize with the default mode for the direction of each request.
    pub fn resize(&self, height: usize, width: usize) -> Result<Image> {
        let mode = ResampleMode::default_for(self.height() * self.width(), height * width);
        self.resize_with(height, width, mode)
    }

    pub fn resize_with(&self, height: usize, width: usize, mode: ResampleMode) -> Result<Image> {
        Ok(Image {
            pixels: interpolate(&self.pixels, height, width, mode)?,
        })
    }
}

/// Resizes a `[C, H, W]` map. Same-size requests are exact copies.
pub fn interpolate(x: &Tensor, height: usize, width: usize, mode: ResampleMode) -> Result<Tensor> {
    Ok(resample::interpolate(x, height, width, mode)?)
}

/// Resizes with the default mode: area when shrinking, bilinear otherwise.
pub fn resize_default(x: &Tensor, height: usize, width: usize) -> Result<Tensor> {
    let (h, w) = (x.shape().get(1).copied().unwrap_or(0), x.shape().get(2).copied().unwrap_or(0));
    interpolate(x, height, width, ResampleMode::default_for(h * w, height * width))
}
