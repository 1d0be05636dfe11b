//! Noise schedules, forward noising and deterministic DDIM stepping.
//!
//! Timesteps index `alpha_bar` from `0` (clean data, `alpha_bar[0] = 1`) to
//! `T`. Both the reverse and the inversion step move a sample along the ray
//! fixed by one noise estimate, so for a constant estimate they are exact
//! inverses of each other.

use std::sync::atomic::{AtomicUsize, Ordering};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::checkpoint::{Record, SCHEDULE_TAG};
use crate::numerics::Array;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NoiseSchedule {
    betas: Vec<f64>,
    alpha_bar: Vec<f64>,
}

impl NoiseSchedule {
    /// Builds a schedule from `beta_1..=beta_T`.
    pub fn from_betas(betas: Vec<f64>) -> Result<Self> {
        if betas.is_empty() {
            return Err(Error::invalid("schedule needs at least one step"));
        }
        if let Some(b) = betas.iter().find(|b| !(**b > 0.0 && **b < 1.0)) {
            return Err(Error::invalid(format!("beta {b} outside (0, 1)")));
        }
        let mut alpha_bar = Vec::with_capacity(betas.len() + 1);
        alpha_bar.push(1.0);
        let mut acc = 1.0;
        for b in &betas {
            acc *= 1.0 - b;
            alpha_bar.push(acc);
        }
        Ok(Self { betas, alpha_bar })
    }

    pub fn steps(&self) -> usize {
        self.betas.len()
    }

    /// `beta_t` for `t` in `1..=T`.
    pub fn beta(&self, t: usize) -> f64 {
        self.betas[t - 1]
    }

    pub fn betas(&self) -> &[f64] {
        &self.betas
    }

    pub fn alpha_bar(&self, t: usize) -> f64 {
        self.alpha_bar[t]
    }

    pub fn alpha_bars(&self) -> &[f64] {
        &self.alpha_bar
    }

    fn check_t(&self, t: usize) -> Result<()> {
        if t > self.steps() {
            return Err(Error::invalid(format!(
                "timestep {t} outside 0..={}",
                self.steps()
            )));
        }
        Ok(())
    }

    pub fn to_record(&self) -> Record {
        Record {
            tag: SCHEDULE_TAG,
            dims: vec![self.steps() as u32],
            payload: self.betas.iter().map(|&b| b as f32).collect(),
        }
    }

    pub fn from_record(r: &Record) -> Result<Self> {
        if r.tag != SCHEDULE_TAG || r.dims.len() != 1 || r.dims[0] as usize != r.payload.len() {
            return Err(Error::format("record is not a noise schedule"));
        }
        Self::from_betas(r.payload.iter().map(|&b| b as f64).collect())
    }
}

/// Linear betas from `beta_start` to `beta_end` inclusive.
///
/// Betas are rounded to `f32` so that a schedule survives the checkpoint
/// container unchanged; `alpha_bar` is accumulated in `f64`.
pub fn make_linear_schedule(steps: usize, beta_start: f64, beta_end: f64) -> Result<NoiseSchedule> {
    if steps == 0 {
        return Err(Error::invalid("T must be at least 1"));
    }
    if !(beta_start > 0.0 && beta_start <= beta_end && beta_end < 1.0) {
        return Err(Error::invalid(format!(
            "need 0 < beta_start <= beta_end < 1, got [{beta_start}, {beta_end}]"
        )));
    }
    let betas = (0..steps)
        .map(|i| {
            let frac = if steps == 1 {
                0.0
            } else {
                i as f64 / (steps - 1) as f64
            };
            (beta_start + (beta_end - beta_start) * frac) as f32 as f64
        })
        .collect();
    NoiseSchedule::from_betas(betas)
}

/// Timestep subsequence `tau_1 < … < tau_S = T`.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct StepPlan {
    total: usize,
    taus: Vec<usize>,
}

impl StepPlan {
    pub fn len(&self) -> usize {
        self.taus.len()
    }

    pub fn is_empty(&self) -> bool {
        self.taus.is_empty()
    }

    pub fn taus(&self) -> &[usize] {
        &self.taus
    }

    pub fn total_steps(&self) -> usize {
        self.total
    }

    /// `[0, tau_1, …, tau_S]`, the points visited by inversion.
    pub fn ascending_path(&self) -> Vec<usize> {
        std::iter::once(0).chain(self.taus.iter().copied()).collect()
    }
}

/// Uniform plan `tau_i = round(i·T/S)`.
pub fn make_step_plan(total: usize, steps: usize) -> Result<StepPlan> {
    if steps == 0 || steps > total {
        return Err(Error::invalid(format!(
            "need 1 <= S <= T, got S={steps}, T={total}"
        )));
    }
    // round half up in integer arithmetic
    let taus = (1..=steps)
        .map(|i| (2 * i * total + steps) / (2 * steps))
        .collect();
    Ok(StepPlan { total, taus })
}

/// Deterministic DDIM: the stochastic term is always zero.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct DdimStepConfig {
    pub sigma: f64,
}

impl DdimStepConfig {
    fn check(&self) -> Result<()> {
        if self.sigma != 0.0 {
            return Err(Error::invalid("only sigma = 0 (deterministic DDIM) is supported"));
        }
        Ok(())
    }
}

/// `sqrt(ab_t)·x0 + sqrt(1−ab_t)·eps`
pub fn q_sample(x0: &Array, t: usize, eps: &Array, sched: &NoiseSchedule) -> Result<Array> {
    sched.check_t(t)?;
    let ab = sched.alpha_bar(t);
    let (a, b) = (ab.sqrt() as f32, (1.0 - ab).sqrt() as f32);
    x0.zip_map(eps, |x, e| a * x + b * e)
}

/// Clean-image estimate `(x_t − sqrt(1−ab_t)·eps_hat) / sqrt(ab_t)`.
pub fn predict_x0(x_t: &Array, eps_hat: &Array, t: usize, sched: &NoiseSchedule) -> Result<Array> {
    sched.check_t(t)?;
    let ab = sched.alpha_bar(t);
    let (a, b) = ((1.0 / ab.sqrt()) as f32, ((1.0 - ab) / ab).sqrt() as f32);
    x_t.zip_map(eps_hat, |x, e| a * x - b * e)
}

/// Moves `x` from timestep `from` to `to` along the ray of `eps`:
/// `x_to/sqrt(ab_to) = x_from/sqrt(ab_from) + (sqrt((1−ab_to)/ab_to) − sqrt((1−ab_from)/ab_from))·eps`.
fn ddim_transfer(x: &Array, eps: &Array, from: usize, to: usize, sched: &NoiseSchedule) -> Result<Array> {
    let (ab_f, ab_t) = (sched.alpha_bar(from), sched.alpha_bar(to));
    let scale = (ab_t / ab_f).sqrt();
    let shift = (1.0 - ab_t).sqrt() - ab_t.sqrt() * ((1.0 - ab_f) / ab_f).sqrt();
    let (a, b) = (scale as f32, shift as f32);
    let out = x.zip_map(eps, |xv, ev| a * xv + b * ev)?;
    out.check_finite("ddim step")?;
    Ok(out)
}

/// One reverse (denoising) step from `t` down to `t_prev`.
pub fn ddim_reverse_step(
    x_t: &Array,
    eps_hat: &Array,
    t: usize,
    t_prev: usize,
    sched: &NoiseSchedule,
    cfg: DdimStepConfig,
) -> Result<Array> {
    cfg.check()?;
    sched.check_t(t)?;
    if t_prev >= t {
        return Err(Error::invalid(format!(
            "reverse step needs t_prev < t, got {t_prev} -> {t}"
        )));
    }
    ddim_transfer(x_t, eps_hat, t, t_prev, sched)
}

/// One inversion (noising) step from `t` up to `t_next`.
pub fn ddim_inversion_step(
    x_t: &Array,
    eps_hat: &Array,
    t: usize,
    t_next: usize,
    sched: &NoiseSchedule,
) -> Result<Array> {
    sched.check_t(t_next)?;
    if t >= t_next {
        return Err(Error::invalid(format!(
            "inversion step needs t < t_next, got {t} -> {t_next}"
        )));
    }
    ddim_transfer(x_t, eps_hat, t, t_next, sched)
}

/// Anything that predicts the noise component of `x_t` at timestep `t`.
pub trait NoisePredictor: Sync {
    fn predict_eps(&self, x_t: &Array, t: usize) -> Result<Array>;
}

/// Predicts the same value everywhere; makes inversion exactly invertible.
#[derive(Clone, Copy, Debug)]
pub struct ConstantPredictor(pub f32);

impl NoisePredictor for ConstantPredictor {
    fn predict_eps(&self, x_t: &Array, _t: usize) -> Result<Array> {
        Ok(Array::full(x_t.shape(), self.0))
    }
}

/// Wraps a predictor and counts its invocations.
pub struct CallCounter<'a, P: ?Sized> {
    inner: &'a P,
    calls: AtomicUsize,
}

impl<'a, P: NoisePredictor + ?Sized> CallCounter<'a, P> {
    pub fn new(inner: &'a P) -> Self {
        Self {
            inner,
            calls: AtomicUsize::new(0),
        }
    }

    pub fn calls(&self) -> usize {
        self.calls.load(Ordering::Relaxed)
    }

    pub fn reset(&self) -> usize {
        self.calls.swap(0, Ordering::Relaxed)
    }
}

impl<P: NoisePredictor + ?Sized> NoisePredictor for CallCounter<'_, P> {
    fn predict_eps(&self, x_t: &Array, t: usize) -> Result<Array> {
        self.calls.fetch_add(1, Ordering::Relaxed);
        self.inner.predict_eps(x_t, t)
    }
}

/// Deterministic sampling `tau_S → … → tau_1 → 0`; one predictor call per step.
pub fn ddim_sample<P: NoisePredictor + ?Sized>(
    model: &P,
    sched: &NoiseSchedule,
    plan: &StepPlan,
    x_big_t: &Array,
) -> Result<Array> {
    check_plan(sched, plan)?;
    let path = plan.ascending_path();
    let mut x = x_big_t.clone();
    for w in path.windows(2).rev() {
        let (t_prev, t) = (w[0], w[1]);
        let eps = model.predict_eps(&x, t)?;
        x = ddim_reverse_step(&x, &eps, t, t_prev, sched, DdimStepConfig::default())?;
    }
    Ok(x)
}

/// Inversion `0 → tau_1 → … → tau_S`; the predictor is evaluated at the
/// current point of each leg.
pub fn ddim_invert<P: NoisePredictor + ?Sized>(
    model: &P,
    sched: &NoiseSchedule,
    plan: &StepPlan,
    x0: &Array,
) -> Result<Array> {
    check_plan(sched, plan)?;
    let path = plan.ascending_path();
    let mut x = x0.clone();
    for w in path.windows(2) {
        let (t, t_next) = (w[0], w[1]);
        let eps = model.predict_eps(&x, t)?;
        x = ddim_inversion_step(&x, &eps, t, t_next, sched)?;
    }
    Ok(x)
}

fn check_plan(sched: &NoiseSchedule, plan: &StepPlan) -> Result<()> {
    if plan.total_steps() != sched.steps() {
        return Err(Error::invalid(format!(
            "step plan built for T={} used with a T={} schedule",
            plan.total_steps(),
            sched.steps()
        )));
    }
    Ok(())
}
