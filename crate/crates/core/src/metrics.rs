//! Reference-based fidelity metrics on RGB images in `[0, 1]`.
//!
//! Both metrics use all three RGB channels; no luma conversion is applied.
//! LPIPS and FID are not computed and are reported as unavailable.

use std::fmt::Write as _;
use std::path::Path;

use crate::error::{Error, Result};
use crate::image::Image;

const SSIM_WINDOW: usize = 11;
const SSIM_SIGMA: f64 = 1.5;
const SSIM_C1: f64 = 0.01 * 0.01;
const SSIM_C2: f64 = 0.03 * 0.03;

fn same_shape(a: &Image, b: &Image) -> Result<()> {
    if a.tensor().shape() != b.tensor().shape() {
        return Err(Error::Shape(format!(
            "metric inputs differ: {:?} vs {:?}",
            a.tensor().shape(),
            b.tensor().shape()
        )));
    }
    Ok(())
}

/// Peak signal-to-noise ratio in dB for unit peak; `+inf` for identical
/// images.
pub fn psnr(a: &Image, b: &Image) -> Result<f64> {
    same_shape(a, b)?;
    let (da, db) = (a.tensor().data(), b.tensor().data());
    let mse = da.iter().zip(db).map(|(x, y)| (x - y) * (x - y)).sum::<f64>() / da.len() as f64;
    if mse == 0.0 {
        return Ok(f64::INFINITY);
    }
    Ok(10.0 * (1.0 / mse).log10())
}

fn gaussian_window(size: usize) -> Vec<f64> {
    let c = (size / 2) as f64;
    let k: Vec<f64> = (0..size)
        .map(|i| (-((i as f64 - c).powi(2)) / (2.0 * SSIM_SIGMA * SSIM_SIGMA)).exp())
        .collect();
    let s: f64 = k.iter().sum();
    k.into_iter().map(|v| v / s).collect()
}

/// Mean structural similarity over all valid 11×11 Gaussian windows
/// (σ = 1.5) of every channel. Images smaller than the window use the
/// largest odd window that fits.
pub fn ssim(a: &Image, b: &Image) -> Result<f64> {
    same_shape(a, b)?;
    let (h, w) = (a.height(), a.width());
    let mut size = SSIM_WINDOW.min(h).min(w);
    if size % 2 == 0 {
        size -= 1;
    }
    let k = gaussian_window(size);
    let (da, db) = (a.tensor().data(), b.tensor().data());
    let (oh, ow) = (h - size + 1, w - size + 1);
    let mut total = 0.0;
    for c in 0..3 {
        let plane = |d: &[f64], y: usize, x: usize| d[(c * h + y) * w + x];
        for y0 in 0..oh {
            for x0 in 0..ow {
                let (mut ma, mut mb, mut saa, mut sbb, mut sab) = (0.0, 0.0, 0.0, 0.0, 0.0);
                for (dy, ky) in k.iter().enumerate() {
                    for (dx, kx) in k.iter().enumerate() {
                        let wgt = ky * kx;
                        let (va, vb) = (plane(da, y0 + dy, x0 + dx), plane(db, y0 + dy, x0 + dx));
                        ma += wgt * va;
                        mb += wgt * vb;
                        saa += wgt * va * va;
                        sbb += wgt * vb * vb;
                        sab += wgt * va * vb;
                    }
                }
                let (va, vb, cov) = (saa - ma * ma, sbb - mb * mb, sab - ma * mb);
                total += ((2.0 * ma * mb + SSIM_C1) * (2.0 * cov + SSIM_C2))
                    / ((ma * ma + mb * mb + SSIM_C1) * (va + vb + SSIM_C2));
            }
        }
    }
    Ok(total / (3 * oh * ow) as f64)
}

/// One line of a metrics results file.
#[derive(Clone, Debug, PartialEq)]
pub struct MetricRecord {
    pub name: String,
    pub psnr: f64,
    pub ssim: f64,
}

/// Aggregate report: one record per image plus per-scale means.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct MetricReport {
    pub records: Vec<MetricRecord>,
    pub per_scale: Vec<(String, f64, f64)>,
}

impl MetricReport {
    pub fn evaluate(name: impl Into<String>, pred: &Image, reference: &Image) -> Result<MetricRecord> {
        Ok(MetricRecord {
            name: name.into(),
            psnr: psnr(pred, reference)?,
            ssim: ssim(pred, reference)?,
        })
    }

    pub fn mean_psnr(&self) -> f64 {
        self.records.iter().map(|r| r.psnr).sum::<f64>() / self.records.len().max(1) as f64
    }

    pub fn mean_ssim(&self) -> f64 {
        self.records.iter().map(|r| r.ssim).sum::<f64>() / self.records.len().max(1) as f64
    }

    /// Key-value text, one record per line.
    pub fn to_text(&self) -> String {
        let fmt = |v: f64| if v.is_infinite() { "inf".to_string() } else { format!("{v:.6}") };
        let mut out = String::from("# color=rgb lpips=unavailable fid=unavailable\n");
        for r in &self.records {
            let _ = writeln!(out, "image={} psnr={} ssim={:.6}", r.name, fmt(r.psnr), r.ssim);
        }
        for (scale, p, s) in &self.per_scale {
            let _ = writeln!(out, "scale={scale} mean_psnr={} mean_ssim={s:.6}", fmt(*p));
        }
        let _ = writeln!(out, "summary count={} mean_psnr={} mean_ssim={:.6}", self.records.len(), fmt(self.mean_psnr()), self.mean_ssim());
        out
    }

    pub fn write(&self, path: impl AsRef<Path>) -> Result<()> {
        std::fs::write(path, self.to_text())?;
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use hvsr_tensor::Tensor;

    fn noisy(h: usize, w: usize, seed: usize) -> Image {
        Image::new(Tensor::from_fn(vec![3, h, w], |i| ((i * 7919 + seed * 104729) % 1009) as f64 / 1008.0)).unwrap()
    }

    #[test]
    fn identical_images_give_infinite_psnr_and_unit_ssim() {
        let a = noisy(16, 16, 1);
        assert_eq!(psnr(&a, &a).unwrap(), f64::INFINITY);
        assert!((ssim(&a, &a).unwrap() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn uniform_half_offset() {
        let a = Image::filled(8, 8, 0.0);
        let b = Image::filled(8, 8, 0.5);
        // 10 log10(1 / 0.25)
        assert!((psnr(&a, &b).unwrap() - 6.020599913279624).abs() < 1e-9);
    }

    #[test]
    fn psnr_is_symmetric() {
        let (a, b) = (noisy(12, 12, 1), noisy(12, 12, 2));
        assert_eq!(psnr(&a, &b).unwrap(), psnr(&b, &a).unwrap());
    }

    #[test]
    fn constant_black_vs_white_ssim() {
        // Single-window hand evaluation: means 0 and 1, zero variances.
        let expected = SSIM_C1 / (1.0 + SSIM_C1);
        let got = ssim(&Image::filled(16, 16, 0.0), &Image::filled(16, 16, 1.0)).unwrap();
        assert!((got - expected).abs() < 1e-15, "{got} vs {expected}");
    }

    #[test]
    fn ssim_is_bounded() {
        for s in 0..5 {
            let v = ssim(&noisy(14, 13, s), &noisy(14, 13, s + 7)).unwrap();
            assert!((-1.0..=1.0).contains(&v));
        }
    }

    #[test]
    fn mismatched_shapes_are_rejected() {
        assert!(psnr(&Image::filled(4, 4, 0.0), &Image::filled(4, 5, 0.0)).is_err());
    }

    #[test]
    fn report_marks_perceptual_metrics_unavailable() {
        let a = noisy(12, 12, 3);
        let report = MetricReport {
            records: vec![MetricReport::evaluate("a.png", &a, &a).unwrap()],
            per_scale: vec![],
        };
        let text = report.to_text();
        assert!(text.contains("lpips=unavailable"));
        assert!(text.contains("image=a.png psnr=inf ssim=1.000000"));
    }
}
