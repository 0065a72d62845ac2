//! Doubly guided Gaussian diffusion over reconstructed images.
//!
//! A noise-estimation network trained on clean unit-scale images serves as
//! a generative prior. Refinement starts by diffusing the initial
//! reconstruction to the step whose noise level matches the measured
//! residual between the low-dose image and that reconstruction, then walks
//! down: the noisy sample is pulled toward the low-dose image before the
//! network sees it, and the denoised estimate is pulled toward the initial
//! reconstruction afterward. Between steps the guided estimate is freshly
//! re-diffused to the next lower level.

use crate::error::{Error, Result};
use crate::image::Image;
use crate::nn::{Adam, LossKind, TimeConditioned, TimeConditionedRegressor, TrainConfig};
use crate::physics::{gaussian_forward, AlphaBarSchedule};
use crate::rng::Rng;

/// Noise estimator plus its schedule and the denoised-estimate guidance
/// weight.
pub struct DgdiffModel<R: TimeConditioned> {
    pub regressor: R,
    pub schedule: AlphaBarSchedule,
    pub s2: f64,
}

impl<R: TimeConditioned> DgdiffModel<R> {
    pub fn new(regressor: R, schedule: AlphaBarSchedule, s2: f64) -> Result<Self> {
        if !(0.0..=1.0).contains(&s2) {
            return Err(Error::invalid(format!("s2 must lie in [0, 1], got {s2}")));
        }
        Ok(Self {
            regressor,
            schedule,
            s2,
        })
    }
}

/// Residual statistics between the low-dose image and the initial
/// reconstruction, and the noisy-sample guidance weight derived from them.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GuidanceState {
    pub sigma_ld: f64,
    pub s1: f64,
}

impl GuidanceState {
    /// Measures `sigma_ld = std(x_ld - x_hat0)` over the whole image and
    /// fixes `s1` from it.
    pub fn measure(x_ld: &Image, x_hat0: &Image) -> Result<Self> {
        if !x_ld.same_shape(x_hat0) {
            return Err(Error::shape_mismatch(
                format!("{}x{}", x_ld.width(), x_ld.height()),
                format!("{}x{}", x_hat0.width(), x_hat0.height()),
            ));
        }
        let n = x_ld.data().len() as f64;
        let mut mean = 0.0f64;
        for (&a, &b) in x_ld.data().iter().zip(x_hat0.data()) {
            mean += a as f64 - b as f64;
        }
        mean /= n;
        let mut var = 0.0f64;
        for (&a, &b) in x_ld.data().iter().zip(x_hat0.data()) {
            let d = a as f64 - b as f64 - mean;
            var += d * d;
        }
        let sigma_ld = (var / n).sqrt();
        Ok(Self {
            sigma_ld,
            s1: s1_weight(sigma_ld),
        })
    }
}

/// Noisy-sample guidance weight
/// `0.7 exp(5000 sigma^2) / (10 + exp(5000 sigma^2))`, evaluated in the
/// unit-scaled image domain. Strictly increasing in sigma, bounded in
/// `(0.7/11, 0.7)`.
pub fn s1_weight(sigma_ld: f64) -> f64 {
    debug_assert!(sigma_ld >= 0.0);
    let exponent = 5000.0 * sigma_ld * sigma_ld;
    if exponent > 700.0 {
        // exp would overflow; the expression saturates at 0.7.
        return 0.7;
    }
    let e = exponent.exp();
    0.7 * e / (10.0 + e)
}

/// Network estimate of the clean image from a noisy sample:
/// `(x_t - sqrt(1 - alpha_bar_t) eps_hat) / sqrt(alpha_bar_t)`.
pub fn estimate_x0<R: TimeConditioned>(
    x_t: &Image,
    t: usize,
    model: &DgdiffModel<R>,
) -> Result<Image> {
    if t < 1 || t > model.schedule.t_max() {
        return Err(Error::TimestepOutOfRange {
            t,
            max: model.schedule.t_max(),
        });
    }
    let eps_hat = model
        .regressor
        .apply(x_t.data(), x_t.height(), x_t.width(), t)?;
    let noise = model.schedule.noise_level(t);
    let inv_signal = 1.0 / model.schedule.alpha_bar(t).sqrt();
    let data: Vec<f32> = x_t
        .data()
        .iter()
        .zip(&eps_hat)
        .map(|(&x, &e)| ((x as f64 - noise * e as f64) * inv_signal) as f32)
        .collect();
    x_t.with_data(data)
}

/// Pulls the noisy sample toward the (signal-scaled) low-dose image:
/// `s1 x_t + (1 - s1) sqrt(alpha_bar_t) x_ld`.
pub fn guide_noisy(
    x_t: &Image,
    x_ld: &Image,
    t: usize,
    s1: f64,
    schedule: &AlphaBarSchedule,
) -> Result<Image> {
    if !x_t.same_shape(x_ld) {
        return Err(Error::shape_mismatch(
            format!("{}x{}", x_t.width(), x_t.height()),
            format!("{}x{}", x_ld.width(), x_ld.height()),
        ));
    }
    if !(0.0..=1.0).contains(&s1) {
        return Err(Error::invalid(format!("s1 must lie in [0, 1], got {s1}")));
    }
    let signal = schedule.alpha_bar(t).sqrt();
    let data: Vec<f32> = x_t
        .data()
        .iter()
        .zip(x_ld.data())
        .map(|(&xt, &ld)| (s1 * xt as f64 + (1.0 - s1) * signal * ld as f64) as f32)
        .collect();
    x_t.with_data(data)
}

/// Pulls the denoised estimate toward the initial reconstruction:
/// `s2 x_tilde0 + (1 - s2) x_hat0`.
pub fn guide_denoised(x_tilde0: &Image, x_hat0: &Image, s2: f64) -> Result<Image> {
    if !x_tilde0.same_shape(x_hat0) {
        return Err(Error::shape_mismatch(
            format!("{}x{}", x_tilde0.width(), x_tilde0.height()),
            format!("{}x{}", x_hat0.width(), x_hat0.height()),
        ));
    }
    if !(0.0..=1.0).contains(&s2) {
        return Err(Error::invalid(format!("s2 must lie in [0, 1], got {s2}")));
    }
    let data: Vec<f32> = x_tilde0
        .data()
        .iter()
        .zip(x_hat0.data())
        .map(|(&a, &b)| (s2 * a as f64 + (1.0 - s2) * b as f64) as f32)
        .collect();
    x_tilde0.with_data(data)
}

/// Refinement start index: the step whose forward-process noise level is
/// closest to the measured residual deviation, ties toward smaller t.
/// Returns the index together with the measured deviation.
pub fn match_image_timestep(
    x_ld: &Image,
    x_hat0: &Image,
    schedule: &AlphaBarSchedule,
) -> Result<(usize, f64)> {
    let state = GuidanceState::measure(x_ld, x_hat0)?;
    let mut best_t = 1;
    let mut best = f64::INFINITY;
    for t in 1..=schedule.t_max() {
        let d = (schedule.noise_level(t) - state.sigma_ld).abs();
        if d < best {
            best = d;
            best_t = t;
        }
    }
    Ok((best_t, state.sigma_ld))
}

/// Full image-domain refinement. Inputs are unit-scale images; returns the
/// final guided estimate and the number of refinement steps (the matched
/// start index).
pub fn dgdiff_refine<R: TimeConditioned>(
    x_ld: &Image,
    x_hat0: &Image,
    model: &DgdiffModel<R>,
    rng: &mut Rng,
) -> Result<(Image, usize)> {
    let state = GuidanceState::measure(x_ld, x_hat0)?;
    let (t_star, _) = match_image_timestep(x_ld, x_hat0, &model.schedule)?;
    let (mut x_t, _) = gaussian_forward(x_hat0, t_star, &model.schedule, rng)?;
    let mut refined = x_hat0.clone();
    for t in (1..=t_star).rev() {
        let guided_t = guide_noisy(&x_t, x_ld, t, state.s1, &model.schedule)?;
        let x_tilde0 = estimate_x0(&guided_t, t, model)?;
        refined = guide_denoised(&x_tilde0, x_hat0, model.s2)?;
        if t > 1 {
            x_t = gaussian_forward(&refined, t - 1, &model.schedule, rng)?.0;
        }
    }
    Ok((refined, t_star))
}

/// Trains the noise estimator on clean unit-scale images with the
/// epsilon-prediction objective at uniformly drawn timesteps. Returns the
/// per-iteration loss history.
pub fn train_image_prior(
    dataset: &[Image],
    model: &mut DgdiffModel<TimeConditionedRegressor>,
    cfg: &TrainConfig,
    rng: &mut Rng,
) -> Result<Vec<(usize, f64)>> {
    cfg.validate()?;
    if cfg.loss != LossKind::EpsilonPrediction {
        return Err(Error::invalid(
            "image-prior training uses the epsilon-prediction loss",
        ));
    }
    if dataset.is_empty() {
        return Err(Error::EmptyDataset);
    }
    for img in dataset {
        if img.data().iter().any(|&v| !(-0.01..=1.01).contains(&v)) {
            return Err(Error::invalid(
                "prior training images must be unit-scaled to [0, 1]",
            ));
        }
        if !img.same_shape(&dataset[0]) {
            return Err(Error::shape_mismatch(
                format!("{}x{}", dataset[0].width(), dataset[0].height()),
                format!("{}x{}", img.width(), img.height()),
            ));
        }
    }
    let t_max = model.schedule.t_max();
    let mut opt = Adam::new(model.regressor.n_params());
    let mut history = Vec::with_capacity(cfg.iterations);
    let mut grad_acc = vec![0.0f32; model.regressor.n_params()];
    for iter in 0..cfg.iterations {
        grad_acc.fill(0.0);
        let mut loss_acc = 0.0f64;
        for _ in 0..cfg.batch_size {
            let sample = &dataset[(rng.next_u64() % dataset.len() as u64) as usize];
            let t = 1 + (rng.next_u64() % t_max as u64) as usize;
            let (x_t, eps) = gaussian_forward(sample, t, &model.schedule, rng)?;
            let (loss, grads) = model.regressor.mse_loss_grad(
                x_t.data(),
                eps.data(),
                sample.height(),
                sample.width(),
                t,
            )?;
            loss_acc += loss;
            for (a, g) in grad_acc.iter_mut().zip(&grads) {
                *a += g;
            }
        }
        let scale = 1.0 / cfg.batch_size as f32;
        for g in grad_acc.iter_mut() {
            *g *= scale;
        }
        let loss = loss_acc / cfg.batch_size as f64;
        if !loss.is_finite() {
            return Err(Error::NanLoss { iteration: iter });
        }
        opt.step(model.regressor.params_mut(), &grad_acc, cfg.learning_rate)?;
        history.push((iter, loss));
    }
    Ok(history)
}

/// Unconditional draw from the prior: start at pure noise and alternate
/// clean-estimate and re-diffusion down the whole schedule. A diagnostic
/// for what the prior has learned, not part of reconstruction.
pub fn sample_prior<R: TimeConditioned>(
    model: &DgdiffModel<R>,
    width: usize,
    height: usize,
    pixel_size_mm: f64,
    rng: &mut Rng,
) -> Result<Image> {
    let t_max = model.schedule.t_max();
    let mut x_t = Image::new(
        width,
        height,
        pixel_size_mm,
        (0..width * height).map(|_| rng.gaussian() as f32).collect(),
    )?;
    let mut estimate = Image::zeros(width, height, pixel_size_mm);
    for t in (1..=t_max).rev() {
        estimate = estimate_x0(&x_t, t, model)?;
        if t > 1 {
            x_t = gaussian_forward(&estimate, t - 1, &model.schedule, rng)?.0;
        }
    }
    Ok(estimate)
}
