//! Fan-beam acquisition geometry, forward projection, and filtered
//! backprojection.
//!
//! Flat equidistant detector, source angles uniform over `[0, 2pi)`.
//! The forward projector integrates attenuation along each source-to-bin
//! ray by fixed-step sampling (half a pixel) with bilinear interpolation;
//! [`backproject`] splats the same weights and is the exact adjoint, kept
//! for transport-consistency checks. Reconstruction follows the standard
//! equidistant fan-beam FBP: cosine pre-weighting, Ram-Lak filtering via
//! zero-padded FFT convolution, and distance-weighted backprojection with
//! linear detector interpolation.

use rustfft::num_complex::Complex;
use rustfft::FftPlanner;

use crate::error::{Error, Result};
use crate::image::Image;
use crate::projection::Projection;

/// Acquisition parameters plus the reconstruction grid they serve.
#[derive(Debug, Clone, PartialEq)]
pub struct FanBeamGeometry {
    /// Number of views, uniformly spaced over a full rotation.
    pub n_views: usize,
    /// Number of detector bins.
    pub n_bins: usize,
    /// Spacing between adjacent bins on the flat detector, mm.
    pub bin_spacing_mm: f64,
    /// Source to rotation-center distance, mm.
    pub sid_mm: f64,
    /// Detector to rotation-center distance, mm.
    pub did_mm: f64,
    /// Image grid width in pixels.
    pub width: usize,
    /// Image grid height in pixels.
    pub height: usize,
    /// Image pixel size, mm.
    pub pixel_size_mm: f64,
}

impl FanBeamGeometry {
    pub fn new(
        n_views: usize,
        n_bins: usize,
        bin_spacing_mm: f64,
        sid_mm: f64,
        did_mm: f64,
        width: usize,
        height: usize,
        pixel_size_mm: f64,
    ) -> Result<Self> {
        if n_views == 0 || n_bins == 0 || width == 0 || height == 0 {
            return Err(Error::invalid("geometry dimensions must be nonzero"));
        }
        if !(bin_spacing_mm > 0.0 && sid_mm > 0.0 && did_mm > 0.0 && pixel_size_mm > 0.0) {
            return Err(Error::invalid(
                "geometry distances and spacings must be positive",
            ));
        }
        Ok(Self {
            n_views,
            n_bins,
            bin_spacing_mm,
            sid_mm,
            did_mm,
            width,
            height,
            pixel_size_mm,
        })
    }

    /// Full-size simulation preset: 672 views, 672 bins at 2.72 mm,
    /// source 746.02 mm and detector 615.18 mm from the rotation center,
    /// 512x512 grid at 1 mm pixels.
    pub fn mayo2016_sim() -> Self {
        Self::new(672, 672, 2.72, 746.02, 615.18, 512, 512, 1.0).expect("valid preset")
    }

    /// Desk-scale preset: the same fan shape scaled to half the field of
    /// view; 180 views, 256 bins, 128x128 grid at 2 mm pixels.
    pub fn desk128() -> Self {
        Self::new(180, 256, 3.57, 373.01, 307.59, 128, 128, 2.0).expect("valid preset")
    }

    pub fn preset(name: &str) -> Result<Self> {
        match name {
            "mayo2016_sim" => Ok(Self::mayo2016_sim()),
            "desk128" => Ok(Self::desk128()),
            other => Err(Error::invalid(format!("unknown geometry preset '{other}'"))),
        }
    }

    /// Source-to-detector distance, mm.
    pub fn sdd_mm(&self) -> f64 {
        self.sid_mm + self.did_mm
    }

    /// Whether the detector subtends the whole fan of the image grid's
    /// circumscribed circle. A `false` here means truncated projections;
    /// callers may warn but construction still succeeds.
    pub fn detector_covers_fov(&self) -> bool {
        let half_fov =
            0.5 * ((self.width as f64).hypot(self.height as f64)) * self.pixel_size_mm;
        if half_fov >= self.sid_mm {
            return false;
        }
        let needed = (half_fov / self.sid_mm).asin();
        let detector_half = (0.5 * self.n_bins as f64 * self.bin_spacing_mm) / self.sdd_mm();
        detector_half.atan() >= needed
    }

    pub fn view_angle(&self, v: usize) -> f64 {
        2.0 * std::f64::consts::PI * v as f64 / self.n_views as f64
    }

    /// Signed detector coordinate of bin `b`, mm from the central ray.
    pub fn bin_offset_mm(&self, b: usize) -> f64 {
        (b as f64 - 0.5 * (self.n_bins as f64 - 1.0)) * self.bin_spacing_mm
    }

    fn check_image(&self, img: &Image) -> Result<()> {
        if img.width() != self.width || img.height() != self.height {
            return Err(Error::shape_mismatch(
                format!("{}x{} image", self.width, self.height),
                format!("{}x{}", img.width(), img.height()),
            ));
        }
        Ok(())
    }

    fn check_sinogram(&self, sino: &Projection) -> Result<()> {
        if sino.n_views() != self.n_views || sino.n_bins() != self.n_bins {
            return Err(Error::shape_mismatch(
                format!("{}x{} sinogram", self.n_views, self.n_bins),
                format!("{}x{}", sino.n_views(), sino.n_bins()),
            ));
        }
        Ok(())
    }
}

/// The sampling positions shared by the projector and its adjoint: entry
/// clipping of the ray against the grid's bounding box, then fixed steps
/// of half a pixel.
struct RayGrid<'g> {
    geo: &'g FanBeamGeometry,
    step_mm: f64,
    half_w: f64,
    half_h: f64,
}

impl<'g> RayGrid<'g> {
    fn new(geo: &'g FanBeamGeometry) -> Self {
        Self {
            geo,
            step_mm: 0.5 * geo.pixel_size_mm,
            half_w: 0.5 * (geo.width as f64 - 1.0),
            half_h: 0.5 * (geo.height as f64 - 1.0),
        }
    }

    /// Visits each sample along the (view, bin) ray as bilinear taps
    /// `(pixel index, weight)` scaled by the step length.
    fn for_each_tap(&self, v: usize, b: usize, mut visit: impl FnMut(usize, f64)) {
        let geo = self.geo;
        let beta = geo.view_angle(v);
        let (sin_b, cos_b) = beta.sin_cos();
        let sx = geo.sid_mm * cos_b;
        let sy = geo.sid_mm * sin_b;
        let u = geo.bin_offset_mm(b);
        let dx = -geo.did_mm * cos_b - u * sin_b - sx;
        let dy = -geo.did_mm * sin_b + u * cos_b - sy;
        let len = dx.hypot(dy);
        let (ux, uy) = (dx / len, dy / len);

        // Clip against the pixel-center bounding box expanded by one pixel
        // so boundary bilinear taps are kept.
        let margin = geo.pixel_size_mm;
        let x_lo = -(self.half_w * geo.pixel_size_mm) - margin;
        let x_hi = self.half_w * geo.pixel_size_mm + margin;
        let y_lo = -(self.half_h * geo.pixel_size_mm) - margin;
        let y_hi = self.half_h * geo.pixel_size_mm + margin;
        let mut t0: f64 = 0.0;
        let mut t1: f64 = len;
        for (s, d, lo, hi) in [(sx, ux, x_lo, x_hi), (sy, uy, y_lo, y_hi)] {
            if d.abs() < 1e-12 {
                if s < lo || s > hi {
                    return;
                }
            } else {
                let ta = (lo - s) / d;
                let tb = (hi - s) / d;
                t0 = t0.max(ta.min(tb));
                t1 = t1.min(ta.max(tb));
            }
        }
        if t1 <= t0 {
            return;
        }

        let n_steps = ((t1 - t0) / self.step_mm).ceil() as usize;
        let inv_pix = 1.0 / geo.pixel_size_mm;
        let w = geo.width;
        let h = geo.height;
        for k in 0..n_steps {
            // Midpoint rule along the ray.
            let t = t0 + (k as f64 + 0.5) * self.step_mm;
            if t >= t1 {
                break;
            }
            let gx = (sx + t * ux) * inv_pix + self.half_w;
            let gy = (sy + t * uy) * inv_pix + self.half_h;
            let ix = gx.floor();
            let iy = gy.floor();
            let fx = gx - ix;
            let fy = gy - iy;
            let ix = ix as isize;
            let iy = iy as isize;
            for (px, py, wt) in [
                (ix, iy, (1.0 - fx) * (1.0 - fy)),
                (ix + 1, iy, fx * (1.0 - fy)),
                (ix, iy + 1, (1.0 - fx) * fy),
                (ix + 1, iy + 1, fx * fy),
            ] {
                if px >= 0 && (px as usize) < w && py >= 0 && (py as usize) < h && wt > 0.0 {
                    visit(py as usize * w + px as usize, wt * self.step_mm);
                }
            }
        }
    }
}

/// Line integrals of attenuation along every source-to-bin ray. Output is
/// unitless (1/mm times mm).
pub fn forward_project(img: &Image, geo: &FanBeamGeometry) -> Result<Projection> {
    geo.check_image(img)?;
    let rays = RayGrid::new(geo);
    let data = img.data();
    let mut out = vec![0.0f32; geo.n_views * geo.n_bins];
    for v in 0..geo.n_views {
        for b in 0..geo.n_bins {
            let mut acc = 0.0f64;
            rays.for_each_tap(v, b, |idx, wt| {
                acc += wt * data[idx] as f64;
            });
            out[v * geo.n_bins + b] = acc as f32;
        }
    }
    Projection::new(geo.n_views, geo.n_bins, out)
}

/// Exact adjoint of [`forward_project`]: splats each sinogram sample back
/// along its ray with identical weights. This is plain transport, not a
/// reconstruction; FBP uses its own weighted backprojection.
pub fn backproject(sino: &Projection, geo: &FanBeamGeometry) -> Result<Image> {
    geo.check_sinogram(sino)?;
    let rays = RayGrid::new(geo);
    let mut out = vec![0.0f64; geo.width * geo.height];
    for v in 0..geo.n_views {
        for b in 0..geo.n_bins {
            let s = sino.data()[v * geo.n_bins + b] as f64;
            if s != 0.0 {
                rays.for_each_tap(v, b, |idx, wt| {
                    out[idx] += wt * s;
                });
            }
        }
    }
    Image::new(
        geo.width,
        geo.height,
        geo.pixel_size_mm,
        out.into_iter().map(|v| v as f32).collect(),
    )
}

/// Discrete Ram-Lak kernel sample `g(n)` at detector spacing `ds`,
/// already halved for the full-rotation fan-beam formula.
fn ramlak_half(n: isize, ds: f64) -> f64 {
    if n == 0 {
        1.0 / (8.0 * ds * ds)
    } else if n % 2 == 0 {
        0.0
    } else {
        let nf = n as f64;
        -1.0 / (2.0 * std::f64::consts::PI * std::f64::consts::PI * nf * nf * ds * ds)
    }
}

/// Filters one cosine-weighted view with the ramp kernel by zero-padded
/// FFT convolution. `scratch` holds (fft, ifft, kernel spectrum, buffer).
struct RampFilter {
    len: usize,
    kernel_spectrum: Vec<Complex<f64>>,
    fft: std::sync::Arc<dyn rustfft::Fft<f64>>,
    ifft: std::sync::Arc<dyn rustfft::Fft<f64>>,
}

impl RampFilter {
    fn new(n_bins: usize, ds: f64) -> Self {
        let len = (2 * n_bins).next_power_of_two();
        let mut planner = FftPlanner::new();
        let fft = planner.plan_fft_forward(len);
        let ifft = planner.plan_fft_inverse(len);
        // Wrap-around layout so circular convolution of the zero-padded
        // signal realizes the linear convolution on the first n_bins
        // outputs: index k holds g(k) for k <= len/2 and g(k - len) above.
        let mut kernel: Vec<Complex<f64>> = (0..len)
            .map(|k| {
                let n = if k <= len / 2 {
                    k as isize
                } else {
                    k as isize - len as isize
                };
                Complex::new(ramlak_half(n, ds), 0.0)
            })
            .collect();
        fft.process(&mut kernel);
        Self {
            len,
            kernel_spectrum: kernel,
            fft,
            ifft,
        }
    }

    fn apply(&self, weighted_view: &[f64], ds: f64, out: &mut [f64]) {
        let mut buf = vec![Complex::new(0.0, 0.0); self.len];
        for (dst, &v) in buf.iter_mut().zip(weighted_view) {
            dst.re = v;
        }
        self.fft.process(&mut buf);
        for (b, k) in buf.iter_mut().zip(&self.kernel_spectrum) {
            *b *= k;
        }
        self.ifft.process(&mut buf);
        // Quadrature spacing ds; rustfft leaves a factor of len.
        let scale = ds / self.len as f64;
        for (dst, src) in out.iter_mut().zip(buf.iter()) {
            *dst = src.re * scale;
        }
    }
}

/// Equidistant fan-beam filtered backprojection onto the geometry's grid.
pub fn fbp(sino: &Projection, geo: &FanBeamGeometry) -> Result<Image> {
    geo.check_sinogram(sino)?;
    let sdd = geo.sdd_mm();
    let sid = geo.sid_mm;
    // Detector rescaled to the isocenter line.
    let ds = geo.bin_spacing_mm * sid / sdd;
    let filter = RampFilter::new(geo.n_bins, ds);

    // Cosine weight per bin: sdd / sqrt(sdd^2 + u^2) on the real detector.
    let weights: Vec<f64> = (0..geo.n_bins)
        .map(|b| {
            let u = geo.bin_offset_mm(b);
            sdd / (sdd * sdd + u * u).sqrt()
        })
        .collect();

    let mut filtered = vec![0.0f64; geo.n_views * geo.n_bins];
    let mut weighted = vec![0.0f64; geo.n_bins];
    for v in 0..geo.n_views {
        let row = sino.view(v);
        for ((dst, &w), &q) in weighted.iter_mut().zip(&weights).zip(row) {
            *dst = w * q as f64;
        }
        filter.apply(&weighted, ds, &mut filtered[v * geo.n_bins..(v + 1) * geo.n_bins]);
    }

    // Distance-weighted backprojection with linear detector interpolation.
    let d_beta = 2.0 * std::f64::consts::PI / geo.n_views as f64;
    let half_w = 0.5 * (geo.width as f64 - 1.0);
    let half_h = 0.5 * (geo.height as f64 - 1.0);
    let center = 0.5 * (geo.n_bins as f64 - 1.0);
    let mut out = vec![0.0f64; geo.width * geo.height];
    let trig: Vec<(f64, f64)> = (0..geo.n_views)
        .map(|v| geo.view_angle(v).sin_cos())
        .collect();
    for iy in 0..geo.height {
        let y = (iy as f64 - half_h) * geo.pixel_size_mm;
        for ix in 0..geo.width {
            let x = (ix as f64 - half_w) * geo.pixel_size_mm;
            let mut acc = 0.0f64;
            for (v, &(sin_b, cos_b)) in trig.iter().enumerate() {
                let along = x * cos_b + y * sin_b; // toward the source
                let across = -x * sin_b + y * cos_b;
                let denom = sid - along;
                if denom <= 0.0 {
                    continue;
                }
                let u_norm = sid / denom; // 1/U
                let s = across * u_norm; // virtual-detector coordinate
                let bf = s / ds + center;
                if bf < 0.0 || bf > (geo.n_bins - 1) as f64 {
                    continue;
                }
                let b0 = bf.floor() as usize;
                let b1 = (b0 + 1).min(geo.n_bins - 1);
                let frac = bf - b0 as f64;
                let view = &filtered[v * geo.n_bins..(v + 1) * geo.n_bins];
                let val = view[b0] * (1.0 - frac) + view[b1] * frac;
                acc += u_norm * u_norm * val;
            }
            out[iy * geo.width + ix] = acc * d_beta;
        }
    }
    Image::new(
        geo.width,
        geo.height,
        geo.pixel_size_mm,
        out.into_iter().map(|v| v as f32).collect(),
    )
}
