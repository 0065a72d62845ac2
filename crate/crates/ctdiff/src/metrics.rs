//! Image quality metrics: PSNR, SSIM, and RMSE in Hounsfield units.
//!
//! PSNR and SSIM operate on window-normalized unit-scale images (peak = 1);
//! RMSE operates on HU images clipped to the metric window. All three are
//! symmetric in their arguments.

use crate::error::{Error, Result};
use crate::image::{window_normalize, HuWindow, Image};

/// SSIM Gaussian window size.
const SSIM_WINDOW: usize = 11;
/// SSIM Gaussian window sigma.
const SSIM_SIGMA: f64 = 1.5;
const SSIM_K1: f64 = 0.01;
const SSIM_K2: f64 = 0.03;

fn check_same_shape(a: &Image, b: &Image) -> Result<()> {
    if !a.same_shape(b) {
        return Err(Error::shape_mismatch(
            format!("{}x{}", a.width(), a.height()),
            format!("{}x{}", b.width(), b.height()),
        ));
    }
    Ok(())
}

fn mse(a: &Image, b: &Image) -> f64 {
    let n = a.data().len() as f64;
    a.data()
        .iter()
        .zip(b.data())
        .map(|(&x, &y)| {
            let d = x as f64 - y as f64;
            d * d
        })
        .sum::<f64>()
        / n
}

/// Peak signal-to-noise ratio in dB for unit-scale images:
/// `10 log10(1 / MSE)`. Identical images return `f64::INFINITY`.
pub fn psnr(a: &Image, b: &Image) -> Result<f64> {
    check_same_shape(a, b)?;
    let mse = mse(a, b);
    if mse == 0.0 {
        return Ok(f64::INFINITY);
    }
    Ok(10.0 * (1.0 / mse).log10())
}

/// Root mean square error in HU after clipping both images to the window.
pub fn rmse_hu(a: &Image, b: &Image, window: HuWindow) -> Result<f64> {
    check_same_shape(a, b)?;
    let ca = a.map(|v| (v as f64).clamp(window.lo, window.hi) as f32);
    let cb = b.map(|v| (v as f64).clamp(window.lo, window.hi) as f32);
    Ok(mse(&ca, &cb).sqrt())
}

/// Structural similarity over unit-scale images: 11x11 Gaussian window
/// (sigma 1.5), K1 = 0.01, K2 = 0.03, dynamic range 1. Mean over all fully
/// covered window positions. Errors if the images are smaller than the
/// window.
pub fn ssim(a: &Image, b: &Image) -> Result<f64> {
    check_same_shape(a, b)?;
    let (w, h) = (a.width(), a.height());
    if w < SSIM_WINDOW || h < SSIM_WINDOW {
        return Err(Error::invalid(format!(
            "image {w}x{h} smaller than the {SSIM_WINDOW}x{SSIM_WINDOW} SSIM window"
        )));
    }

    let kernel = gaussian_kernel(SSIM_WINDOW, SSIM_SIGMA);
    let c1 = (SSIM_K1 * 1.0) * (SSIM_K1 * 1.0);
    let c2 = (SSIM_K2 * 1.0) * (SSIM_K2 * 1.0);

    let half = SSIM_WINDOW / 2;
    let mut total = 0.0f64;
    let mut count = 0usize;
    for cy in half..h - half {
        for cx in half..w - half {
            let mut mu_a = 0.0f64;
            let mut mu_b = 0.0f64;
            let mut aa = 0.0f64;
            let mut bb = 0.0f64;
            let mut ab = 0.0f64;
            for ky in 0..SSIM_WINDOW {
                for kx in 0..SSIM_WINDOW {
                    let wgt = kernel[ky * SSIM_WINDOW + kx];
                    let va = a.get(cx + kx - half, cy + ky - half) as f64;
                    let vb = b.get(cx + kx - half, cy + ky - half) as f64;
                    mu_a += wgt * va;
                    mu_b += wgt * vb;
                    aa += wgt * va * va;
                    bb += wgt * vb * vb;
                    ab += wgt * va * vb;
                }
            }
            let var_a = aa - mu_a * mu_a;
            let var_b = bb - mu_b * mu_b;
            let cov = ab - mu_a * mu_b;
            let num = (2.0 * mu_a * mu_b + c1) * (2.0 * cov + c2);
            let den = (mu_a * mu_a + mu_b * mu_b + c1) * (var_a + var_b + c2);
            total += num / den;
            count += 1;
        }
    }
    Ok(total / count as f64)
}

/// Convenience bundle: converts HU images through the window and reports
/// (psnr, ssim, rmse_hu) in one call.
pub fn evaluate_hu(recon_hu: &Image, truth_hu: &Image, window: HuWindow) -> Result<(f64, f64, f64)> {
    let ru = window_normalize(recon_hu, window);
    let tu = window_normalize(truth_hu, window);
    Ok((
        psnr(&ru, &tu)?,
        ssim(&ru, &tu)?,
        rmse_hu(recon_hu, truth_hu, window)?,
    ))
}

fn gaussian_kernel(size: usize, sigma: f64) -> Vec<f64> {
    let half = (size / 2) as isize;
    let mut k = Vec::with_capacity(size * size);
    for y in -half..=half {
        for x in -half..=half {
            k.push((-((x * x + y * y) as f64) / (2.0 * sigma * sigma)).exp());
        }
    }
    let sum: f64 = k.iter().sum();
    k.iter_mut().for_each(|v| *v /= sum);
    k
}

#[cfg(test)]
mod tests {
    use super::*;

    fn img(w: usize, h: usize, data: Vec<f32>) -> Image {
        Image::new(w, h, 1.0, data).unwrap()
    }

    fn textured(w: usize, h: usize) -> Image {
        // Deterministic mid-frequency texture in [0, 1].
        let data: Vec<f32> = (0..w * h)
            .map(|i| {
                let x = (i % w) as f64;
                let y = (i / w) as f64;
                (0.5 + 0.35 * (0.7 * x).sin() * (0.4 * y).cos()) as f32
            })
            .collect();
        img(w, h, data)
    }

    #[test]
    fn psnr_fixtures() {
        let a = img(8, 8, vec![0.3; 64]);
        assert_eq!(psnr(&a, &a).unwrap(), f64::INFINITY);

        // Constant 0.1 offset: MSE = 0.01 -> 20 dB.
        let b = img(8, 8, vec![0.4; 64]);
        assert!((psnr(&a, &b).unwrap() - 20.0).abs() < 1e-6);

        // Checkerboard against its inverse: MSE = 1 -> 0 dB.
        let c: Vec<f32> = (0..64).map(|i| ((i % 2) ^ (i / 8 % 2)) as f32).collect();
        let d: Vec<f32> = c.iter().map(|v| 1.0 - v).collect();
        assert!((psnr(&img(8, 8, c), &img(8, 8, d)).unwrap()).abs() < 1e-9);
    }

    #[test]
    fn psnr_shape_mismatch() {
        let a = img(8, 8, vec![0.0; 64]);
        let b = img(8, 4, vec![0.0; 32]);
        assert!(psnr(&a, &b).is_err());
    }

    #[test]
    fn ssim_identity_and_inversion() {
        let a = textured(24, 24);
        assert!((ssim(&a, &a).unwrap() - 1.0).abs() < 1e-12);

        let inv = a.map(|v| 1.0 - v);
        let s = ssim(&a, &inv).unwrap();
        assert!(s < 0.0, "inverted texture should anticorrelate, got {s}");
    }

    #[test]
    fn ssim_rejects_small_images() {
        let a = img(8, 8, vec![0.5; 64]);
        assert!(ssim(&a, &a).is_err());
    }

    #[test]
    fn rmse_constant_offset() {
        let w = HuWindow::metric_default();
        let a = img(6, 6, vec![100.0; 36]);
        let b = img(6, 6, vec![120.0; 36]);
        assert!((rmse_hu(&a, &b, w).unwrap() - 20.0).abs() < 1e-9);
        assert_eq!(rmse_hu(&a, &a, w).unwrap(), 0.0);
    }

    #[test]
    fn metrics_are_symmetric() {
        let a = textured(16, 16);
        let b = a.map(|v| (v + 0.07).min(1.0));
        assert_eq!(psnr(&a, &b).unwrap(), psnr(&b, &a).unwrap());
        let w = HuWindow::metric_default();
        assert_eq!(rmse_hu(&a, &b, w).unwrap(), rmse_hu(&b, &a, w).unwrap());
        let sa = ssim(&a, &b).unwrap();
        let sb = ssim(&b, &a).unwrap();
        assert!((sa - sb).abs() < 1e-12);
    }
}
