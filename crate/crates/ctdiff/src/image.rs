//! 2-D image containers and Hounsfield-unit conversions.
//!
//! One container serves three value domains, distinguished by the
//! operations applied to it: linear attenuation coefficients in 1/mm
//! (phantoms and reconstructions), Hounsfield units, and window-normalized
//! unit-scale values in `[0, 1]` (metric and diffusion-prior domain).

use crate::error::{Error, Result};

/// Default linear attenuation of water in 1/mm, a typical ~70 keV value.
/// The Hounsfield calibration point; configurable at the call sites.
pub const MU_WATER_PER_MM: f64 = 0.0192;

/// Row-major 2-D grid of f32 samples with a physical pixel size.
#[derive(Debug, Clone, PartialEq)]
pub struct Image {
    width: usize,
    height: usize,
    pixel_size_mm: f64,
    data: Vec<f32>,
}

impl Image {
    /// Builds an image, checking length and finiteness.
    pub fn new(width: usize, height: usize, pixel_size_mm: f64, data: Vec<f32>) -> Result<Self> {
        if width == 0 || height == 0 {
            return Err(Error::invalid("image dimensions must be nonzero"));
        }
        if !(pixel_size_mm > 0.0) {
            return Err(Error::invalid(format!(
                "pixel size must be positive, got {pixel_size_mm}"
            )));
        }
        if data.len() != width * height {
            return Err(Error::shape_mismatch(
                format!("{width}x{height} = {} values", width * height),
                format!("{} values", data.len()),
            ));
        }
        if let Some((index, &value)) = data.iter().enumerate().find(|(_, v)| !v.is_finite()) {
            return Err(Error::NonFinite {
                index,
                value: value as f64,
            });
        }
        Ok(Self {
            width,
            height,
            pixel_size_mm,
            data,
        })
    }

    pub fn zeros(width: usize, height: usize, pixel_size_mm: f64) -> Self {
        Self {
            width,
            height,
            pixel_size_mm,
            data: vec![0.0; width * height],
        }
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn pixel_size_mm(&self) -> f64 {
        self.pixel_size_mm
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f32] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f32> {
        self.data
    }

    pub fn get(&self, x: usize, y: usize) -> f32 {
        self.data[y * self.width + x]
    }

    pub fn same_shape(&self, other: &Image) -> bool {
        self.width == other.width && self.height == other.height
    }

    /// Replaces the sample grid, keeping geometry. Length must match.
    pub fn with_data(&self, data: Vec<f32>) -> Result<Self> {
        Image::new(self.width, self.height, self.pixel_size_mm, data)
    }

    /// Elementwise map into a new image.
    pub fn map(&self, f: impl Fn(f32) -> f32) -> Self {
        Self {
            width: self.width,
            height: self.height,
            pixel_size_mm: self.pixel_size_mm,
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    /// True if any sample is negative (reconstruction noise can undershoot
    /// zero; physical phantoms must not).
    pub fn has_negative(&self) -> bool {
        self.data.iter().any(|&v| v < 0.0)
    }
}

/// Display/metric window in Hounsfield units.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct HuWindow {
    pub lo: f64,
    pub hi: f64,
}

impl HuWindow {
    pub fn new(lo: f64, hi: f64) -> Result<Self> {
        if !(lo < hi) {
            return Err(Error::invalid(format!("window requires lo < hi: [{lo}, {hi}]")));
        }
        Ok(Self { lo, hi })
    }

    /// The [-1000, 1000] HU window all metrics in this crate use.
    pub fn metric_default() -> Self {
        Self {
            lo: -1000.0,
            hi: 1000.0,
        }
    }

    pub fn span(&self) -> f64 {
        self.hi - self.lo
    }
}

/// Converts attenuation (1/mm) to Hounsfield units:
/// `HU = 1000 (mu - mu_water) / mu_water`.
pub fn mu_to_hu(img: &Image, mu_water: f64) -> Result<Image> {
    if !(mu_water > 0.0) {
        return Err(Error::invalid(format!(
            "mu_water must be positive, got {mu_water}"
        )));
    }
    Ok(img.map(|mu| (1000.0 * (mu as f64 - mu_water) / mu_water) as f32))
}

/// Inverse of [`mu_to_hu`].
pub fn hu_to_mu(img: &Image, mu_water: f64) -> Result<Image> {
    if !(mu_water > 0.0) {
        return Err(Error::invalid(format!(
            "mu_water must be positive, got {mu_water}"
        )));
    }
    Ok(img.map(|hu| (mu_water * (1.0 + hu as f64 / 1000.0)) as f32))
}

/// Clips an HU image to the window, then maps it affinely onto `[0, 1]`.
/// Total on any finite input; idempotent on already-normalized data in the
/// sense that re-normalizing through the unit window `[0, 1]` is identity.
pub fn window_normalize(img: &Image, window: HuWindow) -> Image {
    let lo = window.lo;
    let inv_span = 1.0 / window.span();
    img.map(move |v| (((v as f64).clamp(lo, window.hi) - lo) * inv_span) as f32)
}

/// Maps a unit-scale image back to HU over the given window.
pub fn window_denormalize(img: &Image, window: HuWindow) -> Image {
    let lo = window.lo;
    let span = window.span();
    img.map(move |v| (lo + v as f64 * span) as f32)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rejects_bad_shapes_and_values() {
        assert!(Image::new(4, 4, 1.0, vec![0.0; 15]).is_err());
        assert!(Image::new(4, 4, 0.0, vec![0.0; 16]).is_err());
        let mut data = vec![0.0f32; 16];
        data[5] = f32::NAN;
        assert!(Image::new(4, 4, 1.0, data).is_err());
    }

    #[test]
    fn hu_conversion_fixed_points() {
        let img = Image::new(3, 1, 1.0, vec![0.0192, 0.0, 0.0384]).unwrap();
        let hu = mu_to_hu(&img, 0.0192).unwrap();
        assert!((hu.data()[0] - 0.0).abs() < 1e-3); // water
        assert!((hu.data()[1] + 1000.0).abs() < 1e-3); // air
        assert!((hu.data()[2] - 1000.0).abs() < 1e-3); // 2x water
        let back = hu_to_mu(&hu, 0.0192).unwrap();
        for (a, b) in back.data().iter().zip(img.data()) {
            assert!((a - b).abs() < 1e-7);
        }
    }

    #[test]
    fn window_endpoints_and_midpoint() {
        let w = HuWindow::new(-1000.0, 1000.0).unwrap();
        let img = Image::new(4, 1, 1.0, vec![-1000.0, 1000.0, 0.0, 2500.0]).unwrap();
        let n = window_normalize(&img, w);
        assert_eq!(n.data()[0], 0.0);
        assert_eq!(n.data()[1], 1.0);
        assert_eq!(n.data()[2], 0.5);
        assert_eq!(n.data()[3], 1.0); // clipped
    }

    #[test]
    fn window_normalize_idempotent_on_windowed_data() {
        let w = HuWindow::metric_default();
        let img = Image::new(3, 1, 1.0, vec![-431.0, 12.5, 999.0]).unwrap();
        let once = window_normalize(&img, w);
        // Already-windowed data expressed in the unit window stays put.
        let unit = HuWindow::new(0.0, 1.0).unwrap();
        let twice = window_normalize(&once, unit);
        assert_eq!(once.data(), twice.data());
    }

    #[test]
    fn invalid_window_rejected() {
        assert!(HuWindow::new(10.0, 10.0).is_err());
        assert!(HuWindow::new(10.0, -10.0).is_err());
    }
}
