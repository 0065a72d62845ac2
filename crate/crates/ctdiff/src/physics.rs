//! CT noise model and diffusion schedules.
//!
//! Pre-log measurements follow a Poisson + Gaussian model: counts are
//! Poisson around `I * y` with additive zero-mean electronic noise of
//! variance `sigma_e2` (count units). The projection-domain degradation
//! operator folds the electronic variance into a shifted Poisson rate:
//! `D(y, t) = Poisson(lambda_t * y + sigma_e2) / lambda_t` with strictly
//! decreasing `lambda_t`. The image domain uses the usual variance-
//! preserving Gaussian forward process controlled by `alpha_bar_t`.

use crate::error::{Error, Result};
use crate::image::Image;
use crate::projection::Projection;
use crate::rng::Rng;

/// Acquisition noise parameters: normal-dose incident photons per bin and
/// electronic-noise variance in count units.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct NoiseModelParams {
    pub i0: f64,
    pub sigma_e2: f64,
}

impl NoiseModelParams {
    pub fn new(i0: f64, sigma_e2: f64) -> Result<Self> {
        if !(i0 > 0.0) {
            return Err(Error::invalid(format!("i0 must be positive, got {i0}")));
        }
        if !(sigma_e2 >= 0.0) {
            return Err(Error::invalid(format!(
                "sigma_e2 must be nonnegative, got {sigma_e2}"
            )));
        }
        Ok(Self { i0, sigma_e2 })
    }
}

impl Default for NoiseModelParams {
    /// I0 = 2.5e5 photons per bin, sigma_e2 = 10 counts^2.
    fn default() -> Self {
        Self {
            i0: 2.5e5,
            sigma_e2: 10.0,
        }
    }
}

/// Which index of the photon-intensity schedule the upper endpoint pins.
///
/// The harmonic formula anchors `lambda` at t = 0; pinning the same value
/// at t = 1 instead is the alternative reading kept behind this knob.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LambdaEndpoint {
    AtZero,
    AtOne,
}

/// Projection-domain schedule: strictly decreasing photon intensities
/// `lambda_t` for t = 0..=tau, harmonically interpolated so that
/// `1/lambda_t` is affine in t.
#[derive(Debug, Clone, PartialEq)]
pub struct LambdaSchedule {
    tau: usize,
    values: Vec<f64>,
}

impl LambdaSchedule {
    /// Default endpoints: 3e5 photons down to 2.5e4 over tau = 10 steps,
    /// anchored at t = 0.
    pub fn default_projection() -> Self {
        Self::harmonic(10, 3e5, 2.5e4, LambdaEndpoint::AtZero).expect("default schedule is valid")
    }

    /// Builds `lambda_t = lambda_hi * lambda_lo * tau / (lambda_lo (tau - t)
    /// + lambda_hi t)`, i.e. linear interpolation of the reciprocals from
    /// `1/lambda_hi` to `1/lambda_lo`.
    ///
    /// With [`LambdaEndpoint::AtOne`] the affine-reciprocal line is anchored
    /// so `lambda_1 = lambda_hi` (and `lambda_0` extrapolates above it).
    pub fn harmonic(
        tau: usize,
        lambda_hi: f64,
        lambda_lo: f64,
        endpoint: LambdaEndpoint,
    ) -> Result<Self> {
        if tau < 1 {
            return Err(Error::invalid("tau must be at least 1"));
        }
        if !(lambda_hi > lambda_lo && lambda_lo > 0.0) {
            return Err(Error::invalid(format!(
                "schedule endpoints must satisfy lambda_hi > lambda_lo > 0, got {lambda_hi}, {lambda_lo}"
            )));
        }
        let inv_hi = 1.0 / lambda_hi;
        let inv_lo = 1.0 / lambda_lo;
        // Exact anchored endpoints; reciprocal interpolation between them.
        // Extrapolating the reciprocal line below its anchor can cross
        // zero; that limit means clean data, i.e. infinite photons. Only
        // t = 0 can hit it and no sampler consumes lambda_0.
        let at_weight = |w: f64| {
            if w == 0.0 {
                lambda_hi
            } else if w == 1.0 {
                lambda_lo
            } else {
                let inv = inv_hi * (1.0 - w) + inv_lo * w;
                if inv <= 0.0 {
                    f64::INFINITY
                } else {
                    1.0 / inv
                }
            }
        };
        let values: Vec<f64> = match endpoint {
            LambdaEndpoint::AtZero => (0..=tau)
                .map(|t| at_weight(t as f64 / tau as f64))
                .collect(),
            LambdaEndpoint::AtOne => {
                if tau < 2 {
                    return Err(Error::invalid("endpoint at t = 1 requires tau >= 2"));
                }
                (0..=tau)
                    .map(|t| at_weight((t as f64 - 1.0) / (tau - 1) as f64))
                    .collect()
            }
        };
        let sched = Self { tau, values };
        sched.check_strictly_decreasing()?;
        Ok(sched)
    }

    fn check_strictly_decreasing(&self) -> Result<()> {
        for t in 1..=self.tau {
            if !(self.values[t - 1] > self.values[t]) {
                return Err(Error::invalid(format!(
                    "lambda schedule not strictly decreasing at t = {t}"
                )));
            }
        }
        Ok(())
    }

    pub fn tau(&self) -> usize {
        self.tau
    }

    /// `lambda_t` for t in 0..=tau.
    pub fn lambda(&self, t: usize) -> f64 {
        self.values[t]
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }
}

/// Image-domain schedule: per-step noise fractions `beta_t` and their
/// cumulative signal products `alpha_bar_t`.
#[derive(Debug, Clone, PartialEq)]
pub struct AlphaBarSchedule {
    t_max: usize,
    betas: Vec<f64>,
    alpha_bars: Vec<f64>,
}

impl AlphaBarSchedule {
    /// Linear betas from 1e-4 to 0.02 over 1000 steps.
    pub fn default_image() -> Self {
        Self::linear(1000, 1e-4, 0.02).expect("default schedule is valid")
    }

    /// Linear beta ramp over t = 1..=t_max; `alpha_bar_0 = 1`.
    pub fn linear(t_max: usize, beta_lo: f64, beta_hi: f64) -> Result<Self> {
        if t_max < 1 {
            return Err(Error::invalid("t_max must be at least 1"));
        }
        if !(beta_lo > 0.0 && beta_lo <= beta_hi && beta_hi < 1.0) {
            return Err(Error::invalid(format!(
                "betas must satisfy 0 < beta_lo <= beta_hi < 1, got {beta_lo}, {beta_hi}"
            )));
        }
        let mut betas = Vec::with_capacity(t_max);
        for t in 1..=t_max {
            let frac = if t_max == 1 {
                0.0
            } else {
                (t - 1) as f64 / (t_max - 1) as f64
            };
            betas.push(beta_lo + frac * (beta_hi - beta_lo));
        }
        let mut alpha_bars = Vec::with_capacity(t_max + 1);
        alpha_bars.push(1.0);
        let mut prod = 1.0;
        for &beta in &betas {
            prod *= 1.0 - beta;
            alpha_bars.push(prod);
        }
        Ok(Self {
            t_max,
            betas,
            alpha_bars,
        })
    }

    pub fn t_max(&self) -> usize {
        self.t_max
    }

    /// `beta_t` for t in 1..=t_max.
    pub fn beta(&self, t: usize) -> f64 {
        self.betas[t - 1]
    }

    /// `alpha_bar_t` for t in 0..=t_max.
    pub fn alpha_bar(&self, t: usize) -> f64 {
        self.alpha_bars[t]
    }

    /// Noise level `sqrt(1 - alpha_bar_t)` of the forward process at t.
    pub fn noise_level(&self, t: usize) -> f64 {
        (1.0 - self.alpha_bars[t]).sqrt()
    }
}

/// Simulates a low-dose acquisition from a clean normal-dose projection:
/// `I_ld = dose_fraction * i0`, counts `Poisson(I_ld y) + N(0, sigma_e2)`
/// per bin, renormalized by `I_ld`. Records `I_ld` in the output metadata.
pub fn simulate_low_dose(
    y0: &Projection,
    dose_fraction: f64,
    params: &NoiseModelParams,
    rng: &mut Rng,
) -> Result<Projection> {
    if !(dose_fraction > 0.0 && dose_fraction <= 1.0) {
        return Err(Error::invalid(format!(
            "dose fraction must lie in (0, 1], got {dose_fraction}"
        )));
    }
    if let Some(&bad) = y0.data().iter().find(|&&v| v < 0.0) {
        return Err(Error::invalid(format!(
            "clean projection must be nonnegative, found {bad}"
        )));
    }
    let i_ld = dose_fraction * params.i0;
    let sigma_e = params.sigma_e2.sqrt();
    let data: Vec<f32> = y0
        .data()
        .iter()
        .map(|&y| {
            let counts = rng.poisson(i_ld * y as f64) as f64 + sigma_e * rng.gaussian();
            (counts / i_ld) as f32
        })
        .collect();
    let mut out = y0.with_data(data)?;
    out.set_incident_photons(i_ld);
    Ok(out)
}

/// Projection-domain degradation to step t:
/// `Poisson(lambda_t y + sigma_e2) / lambda_t` per bin.
pub fn shifted_poisson_degrade(
    y0: &Projection,
    t: usize,
    schedule: &LambdaSchedule,
    sigma_e2: f64,
    rng: &mut Rng,
) -> Result<Projection> {
    if t < 1 || t > schedule.tau() {
        return Err(Error::TimestepOutOfRange {
            t,
            max: schedule.tau(),
        });
    }
    let lambda_t = schedule.lambda(t);
    let data: Vec<f32> = y0
        .data()
        .iter()
        .map(|&y| {
            let rate = lambda_t * y as f64 + sigma_e2;
            debug_assert!(rate >= 0.0);
            (rng.poisson(rate.max(0.0)) as f64 / lambda_t) as f32
        })
        .collect();
    y0.with_data(data)
}

/// Image-domain forward diffusion: returns
/// `x_t = sqrt(alpha_bar_t) x0 + sqrt(1 - alpha_bar_t) eps` together with
/// the drawn `eps`.
pub fn gaussian_forward(
    x0: &Image,
    t: usize,
    schedule: &AlphaBarSchedule,
    rng: &mut Rng,
) -> Result<(Image, Image)> {
    if t < 1 || t > schedule.t_max() {
        return Err(Error::TimestepOutOfRange {
            t,
            max: schedule.t_max(),
        });
    }
    let signal = schedule.alpha_bar(t).sqrt();
    let noise = schedule.noise_level(t);
    let mut eps = Vec::with_capacity(x0.data().len());
    let mut xt = Vec::with_capacity(x0.data().len());
    for &v in x0.data() {
        let e = rng.gaussian();
        eps.push(e as f32);
        xt.push((signal * v as f64 + noise * e) as f32);
    }
    Ok((x0.with_data(xt)?, x0.with_data(eps)?))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn moments(xs: &[f64]) -> (f64, f64) {
        let n = xs.len() as f64;
        let mean = xs.iter().sum::<f64>() / n;
        let var = xs.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / n;
        (mean, var)
    }

    #[test]
    fn lambda_schedule_default_table() {
        // Endpoints and two interior values of the harmonic interpolation,
        // frozen from the closed form:
        // lambda_t = hi*lo*tau / (lo*(tau-t) + hi*t).
        let s = LambdaSchedule::default_projection();
        assert_eq!(s.lambda(0), 3e5);
        assert_eq!(s.lambda(10), 2.5e4);
        assert!((s.lambda(5) - 46153.846153846156).abs() / 46153.8 < 1e-12);
        assert!((s.lambda(8) - 30612.244897959183).abs() / 30612.2 < 1e-12);
    }

    #[test]
    fn lambda_reciprocal_is_affine() {
        let s = LambdaSchedule::harmonic(17, 2e5, 1e4, LambdaEndpoint::AtZero).unwrap();
        let inv0 = 1.0 / s.lambda(0);
        let invt = 1.0 / s.lambda(17);
        for t in 0..=17 {
            let expect = inv0 + (invt - inv0) * t as f64 / 17.0;
            let got = 1.0 / s.lambda(t);
            assert!((got - expect).abs() / expect < 1e-12);
        }
    }

    #[test]
    fn lambda_endpoint_at_one_variant() {
        let s = LambdaSchedule::harmonic(10, 3e5, 2.5e4, LambdaEndpoint::AtOne).unwrap();
        assert_eq!(s.lambda(1), 3e5);
        assert_eq!(s.lambda(10), 2.5e4);
        assert!(s.lambda(0) > s.lambda(1));
    }

    #[test]
    fn lambda_rejects_bad_endpoints() {
        assert!(LambdaSchedule::harmonic(10, 1e4, 3e5, LambdaEndpoint::AtZero).is_err());
        assert!(LambdaSchedule::harmonic(10, 1e4, 1e4, LambdaEndpoint::AtZero).is_err());
        assert!(LambdaSchedule::harmonic(0, 3e5, 2.5e4, LambdaEndpoint::AtZero).is_err());
    }

    #[test]
    fn alpha_bar_fixtures() {
        let s = AlphaBarSchedule::default_image();
        assert_eq!(s.alpha_bar(0), 1.0);
        for t in 1..=s.t_max() {
            assert!(s.alpha_bar(t) < s.alpha_bar(t - 1));
        }
        // Frozen from the cumulative product of the linear beta ramp.
        assert!((s.noise_level(3) - 0.018966207208570902).abs() < 1e-12);
        assert!((s.noise_level(4) - 0.022790772416358216).abs() < 1e-12);
    }

    #[test]
    fn alpha_bar_rejects_bad_betas() {
        assert!(AlphaBarSchedule::linear(10, 0.0, 0.5).is_err());
        assert!(AlphaBarSchedule::linear(10, 0.5, 0.1).is_err());
        assert!(AlphaBarSchedule::linear(10, 0.1, 1.0).is_err());
    }

    #[test]
    fn simulate_low_dose_records_photons() {
        let y0 = Projection::new(2, 2, vec![0.5; 4]).unwrap();
        let params = NoiseModelParams::default();
        let mut rng = Rng::new(5);
        let out = simulate_low_dose(&y0, 0.25, &params, &mut rng).unwrap();
        assert_eq!(out.incident_photons(), Some(62500.0));
        assert!(simulate_low_dose(&y0, 0.0, &params, &mut rng).is_err());
        assert!(simulate_low_dose(&y0, -0.5, &params, &mut rng).is_err());
    }

    #[test]
    fn simulate_low_dose_moments() {
        // Mean y0, variance (I y0 + sigma^2) / I^2, checked at one bin over
        // many draws within 4-sigma sampling bounds.
        let y = 0.37f64;
        let n = 100_000usize;
        let params = NoiseModelParams {
            i0: 2.5e5,
            sigma_e2: 10.0,
        };
        let dose = 0.1;
        let i_ld = dose * params.i0;
        let y0 = Projection::new(1, 1, vec![y as f32]).unwrap();
        let mut rng = Rng::new(11);
        let xs: Vec<f64> = (0..n)
            .map(|_| simulate_low_dose(&y0, dose, &params, &mut rng).unwrap().data()[0] as f64)
            .collect();
        let (mean, var) = moments(&xs);
        let true_var = (i_ld * y + params.sigma_e2) / (i_ld * i_ld);
        let mean_tol = 4.0 * (true_var / n as f64).sqrt();
        // Var(S^2) ~ (mu4 - var^2)/n with mu4 ~ 3 var^2 for this nearly
        // Gaussian count distribution; use a 50% safety factor.
        let var_tol = 6.0 * true_var * (2.0 / n as f64).sqrt();
        assert!((mean - y).abs() < mean_tol, "mean {mean} vs {y} +- {mean_tol}");
        assert!(
            (var - true_var).abs() < var_tol,
            "var {var} vs {true_var} +- {var_tol}"
        );
    }

    #[test]
    fn degrade_zero_stays_zero_without_electronic_noise() {
        let y0 = Projection::new(2, 3, vec![0.0; 6]).unwrap();
        let s = LambdaSchedule::default_projection();
        let mut rng = Rng::new(2);
        let out = shifted_poisson_degrade(&y0, 4, &s, 0.0, &mut rng).unwrap();
        assert!(out.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn degrade_moments_and_lambda_scaling() {
        let y = 0.6f64;
        let n = 60_000usize;
        let s = LambdaSchedule::default_projection();
        let sigma_e2 = 10.0;
        let y0 = Projection::new(1, 1, vec![y as f32]).unwrap();
        for t in [1usize, 10] {
            let lam = s.lambda(t);
            let mut rng = Rng::new(21 + t as u64);
            let xs: Vec<f64> = (0..n)
                .map(|_| {
                    shifted_poisson_degrade(&y0, t, &s, sigma_e2, &mut rng).unwrap().data()[0]
                        as f64
                })
                .collect();
            let (mean, var) = moments(&xs);
            let true_mean = y + sigma_e2 / lam;
            let true_var = (lam * y + sigma_e2) / (lam * lam);
            assert!((mean - true_mean).abs() < 4.0 * (true_var / n as f64).sqrt());
            assert!((var - true_var).abs() < 6.0 * true_var * (2.0 / n as f64).sqrt());
        }
        // Variance scales like 1/lambda for sigma_e2 = 0: doubling lambda
        // halves the variance.
        let sched = LambdaSchedule::harmonic(2, 4e4, 2e4, LambdaEndpoint::AtZero).unwrap();
        let mut v = Vec::new();
        for t in [1usize, 2] {
            let mut rng = Rng::new(77);
            let xs: Vec<f64> = (0..n)
                .map(|_| {
                    shifted_poisson_degrade(&y0, t, &sched, 0.0, &mut rng).unwrap().data()[0] as f64
                })
                .collect();
            v.push(moments(&xs).1);
        }
        let ratio = v[1] / v[0]; // lambda_1/lambda_2 ~ 8/3... use analytic
        let expect = sched.lambda(1) / sched.lambda(2);
        assert!((ratio - expect).abs() / expect < 0.1, "ratio {ratio} vs {expect}");
    }

    #[test]
    fn degrade_rejects_out_of_range_t() {
        let y0 = Projection::new(1, 1, vec![0.5]).unwrap();
        let s = LambdaSchedule::default_projection();
        let mut rng = Rng::new(0);
        assert!(shifted_poisson_degrade(&y0, 0, &s, 10.0, &mut rng).is_err());
        assert!(shifted_poisson_degrade(&y0, 11, &s, 10.0, &mut rng).is_err());
    }

    #[test]
    fn gaussian_forward_moments_and_limits() {
        let s = AlphaBarSchedule::default_image();
        let x0 = Image::new(50, 50, 1.0, vec![0.0; 2500]).unwrap();
        let mut rng = Rng::new(13);
        let t = 500;
        let (xt, _) = gaussian_forward(&x0, t, &s, &mut rng).unwrap();
        let xs: Vec<f64> = xt.data().iter().map(|&v| v as f64).collect();
        let (_, var) = moments(&xs);
        let expect = 1.0 - s.alpha_bar(t);
        assert!((var - expect).abs() / expect < 0.15);

        // Near t = 0 the image passes through almost unchanged.
        let x0 = Image::new(4, 4, 1.0, vec![0.5; 16]).unwrap();
        let (xt, eps) = gaussian_forward(&x0, 1, &s, &mut rng).unwrap();
        for ((&a, &b), &e) in xt.data().iter().zip(x0.data()).zip(eps.data()) {
            let expect = (s.alpha_bar(1).sqrt() * b as f64 + s.noise_level(1) * e as f64) as f32;
            assert_eq!(a, expect);
        }

        // Mean over many draws tracks sqrt(alpha_bar) x0.
        let t = 100;
        let n = 10_000;
        let x0 = Image::new(1, 1, 1.0, vec![0.8]).unwrap();
        let mut rng = Rng::new(99);
        let xs: Vec<f64> = (0..n)
            .map(|_| gaussian_forward(&x0, t, &s, &mut rng).unwrap().0.data()[0] as f64)
            .collect();
        let (mean, _) = moments(&xs);
        let expect_mean = s.alpha_bar(t).sqrt() * 0.8;
        let tol = 4.0 * s.noise_level(t) / (n as f64).sqrt();
        assert!((mean - expect_mean).abs() < tol);
    }

    #[test]
    fn gaussian_forward_range_check() {
        let s = AlphaBarSchedule::default_image();
        let x0 = Image::new(2, 2, 1.0, vec![0.0; 4]).unwrap();
        let mut rng = Rng::new(1);
        assert!(gaussian_forward(&x0, 0, &s, &mut rng).is_err());
        assert!(gaussian_forward(&x0, 1001, &s, &mut rng).is_err());
    }
}
