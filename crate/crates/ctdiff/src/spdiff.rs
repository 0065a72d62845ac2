//! Shifted Poisson diffusion over pre-log projections.
//!
//! The restoration network is trained to predict the clean projection from
//! shifted-Poisson-degraded inputs at uniformly drawn timesteps, using
//! clean normal-dose data only. Sampling starts from the measured low-dose
//! projection at the schedule step whose photon intensity is closest to
//! the measured incident count, then walks down the schedule with the
//! Poisson-superposition step, which keeps the per-step marginals exact
//! when the restoration is exact.

use crate::error::{Error, Result};
use crate::nn::{Adam, LossKind, TimeConditioned, TimeConditionedRegressor, TrainConfig};
use crate::physics::{shifted_poisson_degrade, LambdaSchedule};
use crate::projection::Projection;
use crate::rng::Rng;

/// Restoration network plus the degradation schedule it was trained
/// against.
pub struct SpdiffModel<R: TimeConditioned> {
    pub regressor: R,
    pub schedule: LambdaSchedule,
    pub sigma_e2: f64,
}

impl<R: TimeConditioned> SpdiffModel<R> {
    pub fn new(regressor: R, schedule: LambdaSchedule, sigma_e2: f64) -> Result<Self> {
        if !(sigma_e2 >= 0.0) {
            return Err(Error::invalid("sigma_e2 must be nonnegative"));
        }
        Ok(Self {
            regressor,
            schedule,
            sigma_e2,
        })
    }

    /// Network estimate of the clean projection, clamped at zero so it can
    /// serve as a Poisson rate.
    pub fn restore_clamped(&self, y: &Projection, t: usize) -> Result<Projection> {
        let out = self
            .regressor
            .apply(y.data(), y.n_views(), y.n_bins(), t)?;
        y.with_data(out.into_iter().map(|v| v.max(0.0)).collect())
    }
}

/// Sampling start index: the schedule step whose photon intensity is
/// closest to the measured incident count, ties toward the smaller index
/// (fewer sampling steps).
pub fn match_projection_timestep(i_ld: f64, schedule: &LambdaSchedule) -> Result<usize> {
    if !(i_ld > 0.0) {
        return Err(Error::invalid(format!(
            "incident photon count must be positive, got {i_ld}"
        )));
    }
    let mut best_t = 1;
    let mut best = f64::INFINITY;
    for t in 1..=schedule.tau() {
        let d = (schedule.lambda(t) - i_ld).abs();
        if d < best {
            best = d;
            best_t = t;
        }
    }
    Ok(best_t)
}

/// One reverse step from t to t-1:
/// `y_{t-1} = (lambda_t y_t + Poisson((lambda_{t-1} - lambda_t) y0_hat))
/// / lambda_{t-1}` with `y0_hat` the clamped restoration.
pub fn spdiff_sample_step<R: TimeConditioned>(
    y_t: &Projection,
    t: usize,
    model: &SpdiffModel<R>,
    rng: &mut Rng,
) -> Result<Projection> {
    if t < 2 || t > model.schedule.tau() {
        return Err(Error::TimestepOutOfRange {
            t,
            max: model.schedule.tau(),
        });
    }
    let lambda_t = model.schedule.lambda(t);
    let lambda_prev = model.schedule.lambda(t - 1);
    debug_assert!(lambda_prev > lambda_t);
    let rate_scale = lambda_prev - lambda_t;
    let y0_hat = model.restore_clamped(y_t, t)?;
    let data: Vec<f32> = y_t
        .data()
        .iter()
        .zip(y0_hat.data())
        .map(|(&yt, &y0)| {
            let innovation = rng.poisson(rate_scale * y0 as f64) as f64;
            ((lambda_t * yt as f64 + innovation) / lambda_prev) as f32
        })
        .collect();
    y_t.with_data(data)
}

/// Full projection denoiser: seeds the chain with the measured low-dose
/// projection at the matched step, walks down to t = 2, and finishes with
/// a plain restoration at t = 1. Returns the estimate and the number of
/// sampling steps used (the matched start index).
pub fn spdiff_denoise<R: TimeConditioned>(
    y_ld: &Projection,
    i_ld: f64,
    model: &SpdiffModel<R>,
    rng: &mut Rng,
) -> Result<(Projection, usize)> {
    let t_star = match_projection_timestep(i_ld, &model.schedule)?;
    let mut y = y_ld.clone();
    for t in (2..=t_star).rev() {
        y = spdiff_sample_step(&y, t, model, rng)?;
    }
    let y0_hat = model.restore_clamped(&y, 1)?;
    Ok((y0_hat, t_star))
}

/// Trains the restoration network on clean projections only: per sample,
/// degrade to a uniformly drawn timestep and regress the clean data.
/// Returns the per-iteration loss history.
pub fn train_spdiff(
    dataset: &[Projection],
    model: &mut SpdiffModel<TimeConditionedRegressor>,
    cfg: &TrainConfig,
    rng: &mut Rng,
) -> Result<Vec<(usize, f64)>> {
    cfg.validate()?;
    if cfg.loss != LossKind::Restoration {
        return Err(Error::invalid(
            "projection-domain training uses the restoration loss",
        ));
    }
    if dataset.is_empty() {
        return Err(Error::EmptyDataset);
    }
    for proj in dataset {
        if proj.data().iter().any(|&v| v < 0.0) {
            return Err(Error::invalid(
                "training projections must be nonnegative clean data",
            ));
        }
        if !proj.same_shape(&dataset[0]) {
            return Err(Error::shape_mismatch(
                format!("{}x{}", dataset[0].n_views(), dataset[0].n_bins()),
                format!("{}x{}", proj.n_views(), proj.n_bins()),
            ));
        }
    }
    let tau = model.schedule.tau();
    let mut opt = Adam::new(model.regressor.n_params());
    let mut history = Vec::with_capacity(cfg.iterations);
    let mut grad_acc = vec![0.0f32; model.regressor.n_params()];
    for iter in 0..cfg.iterations {
        grad_acc.fill(0.0);
        let mut loss_acc = 0.0f64;
        for _ in 0..cfg.batch_size {
            let sample = &dataset[(rng.next_u64() % dataset.len() as u64) as usize];
            let t = 1 + (rng.next_u64() % tau as u64) as usize;
            let y_t = shifted_poisson_degrade(sample, t, &model.schedule, model.sigma_e2, rng)?;
            let (loss, grads) = model.regressor.mse_loss_grad(
                y_t.data(),
                sample.data(),
                sample.n_views(),
                sample.n_bins(),
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
