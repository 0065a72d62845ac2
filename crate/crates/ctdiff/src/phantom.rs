//! Ellipse phantoms: the classic head phantom and randomized variants for
//! training and held-out evaluation.
//!
//! Ellipses are described in normalized coordinates (the unit circle
//! inscribes the grid) with additive intensity deltas in water units; one
//! water unit maps to `mu_water` 1/mm. Rasterization supersamples 4x4 per
//! pixel, so edges carry partial-coverage values.

use crate::error::{Error, Result};
use crate::image::{Image, MU_WATER_PER_MM};
use crate::rng::Rng;

/// One additive ellipse: center and semi-axes in normalized coordinates,
/// rotation in degrees, intensity delta in water units.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Ellipse {
    pub cx: f64,
    pub cy: f64,
    pub rx: f64,
    pub ry: f64,
    pub angle_deg: f64,
    pub delta: f64,
}

/// A rasterizable phantom description.
#[derive(Debug, Clone, PartialEq)]
pub struct PhantomSpec {
    pub ellipses: Vec<Ellipse>,
    pub width: usize,
    pub height: usize,
    pub pixel_size_mm: f64,
    /// Water attenuation used to scale water units to 1/mm.
    pub mu_water: f64,
}

impl PhantomSpec {
    /// The classic ten-ellipse head phantom. The outer rim sums to two
    /// water units (bone-like), the interior to 1.02 with small features.
    pub fn shepp_logan(width: usize, height: usize, pixel_size_mm: f64) -> Self {
        let e = |cx: f64, cy: f64, rx: f64, ry: f64, angle_deg: f64, delta: f64| Ellipse {
            cx,
            cy,
            rx,
            ry,
            angle_deg,
            delta,
        };
        PhantomSpec {
            ellipses: vec![
                e(0.0, 0.0, 0.69, 0.92, 0.0, 2.0),
                e(0.0, -0.0184, 0.6624, 0.874, 0.0, -0.98),
                e(0.22, 0.0, 0.11, 0.31, -18.0, -0.02),
                e(-0.22, 0.0, 0.16, 0.41, 18.0, -0.02),
                e(0.0, 0.35, 0.21, 0.25, 0.0, 0.01),
                e(0.0, 0.1, 0.046, 0.046, 0.0, 0.01),
                e(0.0, -0.1, 0.046, 0.046, 0.0, 0.01),
                e(-0.08, -0.605, 0.046, 0.023, 0.0, 0.01),
                e(0.0, -0.606, 0.023, 0.023, 0.0, 0.01),
                e(0.06, -0.605, 0.023, 0.046, 0.0, 0.01),
            ],
            width,
            height,
            pixel_size_mm,
            mu_water: MU_WATER_PER_MM,
        }
    }
}

/// Rasterizes a phantom spec to attenuation in 1/mm. Rejects specs whose
/// ellipse sums dip below zero anywhere.
pub fn make_phantom(spec: &PhantomSpec) -> Result<Image> {
    if spec.width == 0 || spec.height == 0 || !(spec.pixel_size_mm > 0.0) {
        return Err(Error::invalid("phantom grid must be nonempty"));
    }
    if !(spec.mu_water > 0.0) {
        return Err(Error::invalid("mu_water must be positive"));
    }
    // Precompute rotations.
    let rot: Vec<(f64, f64)> = spec
        .ellipses
        .iter()
        .map(|e| (e.angle_deg.to_radians().cos(), e.angle_deg.to_radians().sin()))
        .collect();
    let half_w = 0.5 * (spec.width as f64 - 1.0);
    let half_h = 0.5 * (spec.height as f64 - 1.0);
    let scale = 2.0 / spec.width.min(spec.height) as f64;
    let mut data = vec![0.0f32; spec.width * spec.height];
    let mut min_sum = f64::INFINITY;
    for iy in 0..spec.height {
        for ix in 0..spec.width {
            let mut acc = 0.0f64;
            for sy in 0..4 {
                for sx in 0..4 {
                    let x = (ix as f64 - half_w + (sx as f64 + 0.5) / 4.0 - 0.5) * scale;
                    let y = (iy as f64 - half_h + (sy as f64 + 0.5) / 4.0 - 0.5) * scale;
                    let mut sum = 0.0f64;
                    for (e, &(c, s)) in spec.ellipses.iter().zip(&rot) {
                        let dx = x - e.cx;
                        let dy = y - e.cy;
                        let xr = dx * c + dy * s;
                        let yr = -dx * s + dy * c;
                        if (xr / e.rx).powi(2) + (yr / e.ry).powi(2) <= 1.0 {
                            sum += e.delta;
                        }
                    }
                    min_sum = min_sum.min(sum);
                    acc += sum;
                }
            }
            data[iy * spec.width + ix] = (acc / 16.0 * spec.mu_water) as f32;
        }
    }
    if min_sum < -1e-9 {
        return Err(Error::invalid(format!(
            "phantom spec produces negative attenuation ({min_sum} water units)"
        )));
    }
    Image::new(spec.width, spec.height, spec.pixel_size_mm, data)
}

/// A randomized head-like variant: jittered rim and interior plus a few
/// random soft-tissue features. Deterministic in the generator state.
pub fn random_phantom_spec(
    width: usize,
    height: usize,
    pixel_size_mm: f64,
    rng: &mut Rng,
) -> PhantomSpec {
    let u = |rng: &mut Rng, lo: f64, hi: f64| lo + (hi - lo) * rng.uniform();
    let mut ellipses = Vec::new();
    let rim_rx = u(rng, 0.64, 0.76);
    let rim_ry = u(rng, 0.84, 0.94);
    let rim_angle = u(rng, -6.0, 6.0);
    let cx = u(rng, -0.02, 0.02);
    let cy = u(rng, -0.03, 0.02);
    ellipses.push(Ellipse {
        cx,
        cy,
        rx: rim_rx,
        ry: rim_ry,
        angle_deg: rim_angle,
        delta: 2.0,
    });
    let shrink = u(rng, 0.93, 0.965);
    ellipses.push(Ellipse {
        cx,
        cy: cy - u(rng, 0.0, 0.03),
        rx: rim_rx * shrink,
        ry: rim_ry * shrink,
        angle_deg: rim_angle,
        delta: -u(rng, 0.95, 1.0),
    });
    let n_features = 3 + (rng.next_u64() % 4) as usize;
    for _ in 0..n_features {
        let r = u(rng, 0.0, 0.45);
        let phi = u(rng, 0.0, std::f64::consts::TAU);
        let magnitude = u(rng, 0.015, 0.09);
        let sign = if rng.uniform() < 0.5 { -1.0 } else { 1.0 };
        ellipses.push(Ellipse {
            cx: cx + r * phi.cos() * rim_rx * 0.8,
            cy: cy + r * phi.sin() * rim_ry * 0.8,
            rx: u(rng, 0.04, 0.26),
            ry: u(rng, 0.04, 0.26),
            angle_deg: u(rng, 0.0, 180.0),
            delta: sign * magnitude,
        });
    }
    PhantomSpec {
        ellipses,
        width,
        height,
        pixel_size_mm,
        mu_water: MU_WATER_PER_MM,
    }
}

/// Deterministic corpus of randomized variants: phantom `i` depends only
/// on `(seed, i)`. Disjoint train/test corpora come from distinct seeds.
pub fn make_corpus(
    n: usize,
    seed: u64,
    width: usize,
    height: usize,
    pixel_size_mm: f64,
) -> Result<Vec<Image>> {
    let root = Rng::new(seed);
    (0..n)
        .map(|i| {
            let mut rng = root.fork(i as u64);
            make_phantom(&random_phantom_spec(width, height, pixel_size_mm, &mut rng))
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_spec_rasterizes_to_zero() {
        let spec = PhantomSpec {
            ellipses: vec![],
            width: 16,
            height: 16,
            pixel_size_mm: 1.0,
            mu_water: MU_WATER_PER_MM,
        };
        let img = make_phantom(&spec).unwrap();
        assert!(img.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn shepp_logan_peak_sits_in_the_rim() {
        let spec = PhantomSpec::shepp_logan(128, 128, 2.0);
        let img = make_phantom(&spec).unwrap();
        let (mut best, mut best_idx) = (0.0f32, 0usize);
        for (i, &v) in img.data().iter().enumerate() {
            if v > best {
                best = v;
                best_idx = i;
            }
        }
        // Peak value is two water units.
        assert!((best as f64 - 2.0 * MU_WATER_PER_MM).abs() < 1e-6);
        // And it lies outside the interior ellipse: interior values sit
        // near 1.02 water units.
        let (ix, iy) = (best_idx % 128, best_idx / 128);
        let x = (ix as f64 - 63.5) / 64.0;
        let y = (iy as f64 - 63.5) / 64.0;
        let inner = (x / 0.6624).powi(2) + ((y + 0.0184) / 0.874).powi(2);
        assert!(inner > 1.0, "peak at ({x}, {y}) should be in the rim");
        assert!(!img.has_negative());
    }

    #[test]
    fn negative_sums_are_rejected() {
        let spec = PhantomSpec {
            ellipses: vec![Ellipse {
                cx: 0.0,
                cy: 0.0,
                rx: 0.5,
                ry: 0.5,
                angle_deg: 0.0,
                delta: -1.0,
            }],
            width: 16,
            height: 16,
            pixel_size_mm: 1.0,
            mu_water: MU_WATER_PER_MM,
        };
        assert!(make_phantom(&spec).is_err());
    }

    #[test]
    fn corpus_is_deterministic_and_varied() {
        let a = make_corpus(4, 7, 32, 32, 2.0).unwrap();
        let b = make_corpus(4, 7, 32, 32, 2.0).unwrap();
        assert_eq!(a, b);
        assert_ne!(a[0], a[1], "variants must differ");
        let other = make_corpus(4, 8, 32, 32, 2.0).unwrap();
        assert_ne!(a[0], other[0], "different seeds give different phantoms");
        for img in &a {
            assert!(!img.has_negative());
        }
    }
}
