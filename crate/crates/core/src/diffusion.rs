//! Variance-preserving diffusion with a constant rate `β`: closed-form
//! `μ_t = e^{−βt}`, `σ_t² = 1 − e^{−2βt}`, denoising score matching, and an
//! Euler–Maruyama sampler for the reverse-time SDE.

use rand::Rng as _;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::data::Outcome;
use crate::error::{Error, Result};
use crate::nn::{TimeField, TimeNet};
use crate::risk::{GradLossFn, LossFn};
use crate::rng::Rng;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct NoiseSchedule {
    pub beta: f64,
    pub t_min: f64,
    pub t_max: f64,
}

impl Default for NoiseSchedule {
    fn default() -> Self {
        Self {
            beta: 1.0,
            t_min: 1e-3,
            t_max: 3.0,
        }
    }
}

impl NoiseSchedule {
    /// Validates `β > 0`, `0 ≤ t_min < t_max` and `μ_{t_max} ≤ 0.05`.
    pub fn new(beta: f64, t_min: f64, t_max: f64) -> Result<Self> {
        let s = Self { beta, t_min, t_max };
        s.validate()?;
        Ok(s)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.beta > 0.0) || !(self.t_min >= 0.0) || !(self.t_max > self.t_min) || !self.t_max.is_finite() {
            return Err(Error::InvalidArgument(format!("invalid schedule {self:?}")));
        }
        if (-self.beta * self.t_max).exp() > 0.05 {
            return Err(Error::InvalidArgument(format!(
                "terminal mean coefficient e^(-beta*t_max) = {} exceeds 0.05",
                (-self.beta * self.t_max).exp()
            )));
        }
        Ok(())
    }

    /// `(μ_t, σ_t)` for `t ∈ [0, t_max]`.
    pub fn at(&self, t: f64) -> Result<(f64, f64)> {
        if !(0.0..=self.t_max).contains(&t) {
            return Err(Error::InvalidArgument(format!("t={t} outside [0, {}]", self.t_max)));
        }
        Ok(self.at_unchecked(t))
    }

    fn at_unchecked(&self, t: f64) -> (f64, f64) {
        let mu = (-self.beta * t).exp();
        // 1 − e^{−2βt} without cancellation for small t.
        let var = -(-2.0 * self.beta * t).exp_m1();
        (mu, var.sqrt())
    }
}

/// `(μ_t, σ_t)`.
pub fn schedule_at(sched: &NoiseSchedule, t: f64) -> Result<(f64, f64)> {
    sched.at(t)
}

/// `y_t = μ_t y₀ + σ_t ε`.
pub fn forward_noise(sched: &NoiseSchedule, y0: &[f64], t: f64, rng: &mut Rng) -> Result<Vec<f64>> {
    let (mu, sigma) = sched.at(t)?;
    Ok(y0
        .iter()
        .map(|&y| {
            let e: f64 = StandardNormal.sample(rng);
            mu * y + sigma * e
        })
        .collect())
}

fn check(sched: &NoiseSchedule, dim: usize, y0: &[f64], mc: usize) -> Result<()> {
    if sched.t_min <= 0.0 {
        return Err(Error::InvalidArgument("t_min must be positive for score matching (σ_0 = 0)".into()));
    }
    if y0.len() != dim {
        return Err(Error::DimensionMismatch { expected: dim, got: y0.len() });
    }
    if mc == 0 {
        return Err(Error::InvalidArgument("mc must be at least 1".into()));
    }
    Ok(())
}

/// Draws `t ~ Unif[t_min, t_max)` and `ε`; writes `y_t` and the regression
/// target `(μ_t y₀ − y_t)/σ_t² = −ε/σ_t`.
fn draw_noised(sched: &NoiseSchedule, y0: &[f64], rng: &mut Rng, yt: &mut [f64], target: &mut [f64]) -> f64 {
    let t = rng.gen_range(sched.t_min..sched.t_max);
    let (mu, sigma) = sched.at_unchecked(t);
    for i in 0..y0.len() {
        let e: f64 = StandardNormal.sample(rng);
        yt[i] = mu * y0[i] + sigma * e;
        target[i] = -e / sigma;
    }
    t
}

/// `(t_max − t_min) · mean over mc draws of ‖−ε/σ_t − θ(y_t, t)‖²`.
pub fn dsm_loss(score: &(impl TimeField + ?Sized), sched: &NoiseSchedule, y0: &[f64], rng: &mut Rng, mc: usize) -> Result<f64> {
    check(sched, score.dim(), y0, mc)?;
    let d = y0.len();
    let (mut yt, mut target, mut s) = (vec![0.0; d], vec![0.0; d], vec![0.0; d]);
    let mut total = 0.0;
    for _ in 0..mc {
        let t = draw_noised(sched, y0, rng, &mut yt, &mut target);
        score.eval(&yt, t, &mut s);
        total += (0..d).map(|i| (target[i] - s[i]).powi(2)).sum::<f64>();
    }
    Ok((sched.t_max - sched.t_min) * total / mc as f64)
}

/// Adds `weight · ∇θ dsm_loss` into `grad` and returns the loss.
pub fn dsm_loss_grad(net: &TimeNet, sched: &NoiseSchedule, y0: &[f64], rng: &mut Rng, mc: usize, weight: f64, grad: &mut [f64]) -> Result<f64> {
    check(sched, net.dim(), y0, mc)?;
    let d = y0.len();
    let span = sched.t_max - sched.t_min;
    let scale = weight * span / mc as f64;
    let (mut yt, mut target) = (vec![0.0; d], vec![0.0; d]);
    let mut total = 0.0;
    for _ in 0..mc {
        let t = draw_noised(sched, y0, rng, &mut yt, &mut target);
        let mut sq = 0.0;
        net.accumulate(
            &yt,
            t,
            |s| {
                (0..d)
                    .map(|i| {
                        let r = target[i] - s[i];
                        sq += r * r;
                        -2.0 * r * scale
                    })
                    .collect()
            },
            grad,
        );
        total += sq;
    }
    Ok(span * total / mc as f64)
}

/// Euler–Maruyama for the reverse SDE from `Ỹ ~ N(0, I)` at `t_max` down to
/// `t_min`: `Ỹ ← Ỹ + β[Ỹ + 2θ(Ỹ, t)]h + √(2βh) ξ`.
pub fn diffusion_sample(score: &(impl TimeField + ?Sized), sched: &NoiseSchedule, rng: &mut Rng, steps: usize) -> Result<Vec<f64>> {
    if steps == 0 {
        return Err(Error::InvalidArgument("steps must be at least 1".into()));
    }
    let d = score.dim();
    let h = (sched.t_max - sched.t_min) / steps as f64;
    let noise = (2.0 * sched.beta * h).sqrt();
    let mut y: Vec<f64> = (0..d).map(|_| StandardNormal.sample(rng)).collect();
    let mut s = vec![0.0; d];
    for step in 0..steps {
        let t = sched.t_max - step as f64 * h;
        score.eval(&y, t, &mut s);
        for i in 0..d {
            let xi: f64 = StandardNormal.sample(rng);
            y[i] += sched.beta * (y[i] + 2.0 * s[i]) * h + noise * xi;
        }
        if y.iter().any(|v| !v.is_finite()) {
            return Err(Error::SdeDiverged { t: t - h });
        }
    }
    Ok(y)
}

/// Score of the forward marginal when `Y₀ ~ N(mean, diag(var))`:
/// `−(y − μ_t m)/(μ_t² s² + σ_t²)`.
#[derive(Debug, Clone, PartialEq)]
pub struct GaussianScore {
    pub mean: Vec<f64>,
    pub var: Vec<f64>,
    pub schedule: NoiseSchedule,
}

impl TimeField for GaussianScore {
    fn dim(&self) -> usize {
        self.mean.len()
    }

    fn eval(&self, y: &[f64], t: f64, out: &mut [f64]) {
        let (mu, sigma) = self.schedule.at_unchecked(t);
        for i in 0..self.mean.len() {
            out[i] = -(y[i] - mu * self.mean[i]) / (mu * mu * self.var[i] + sigma * sigma);
        }
    }
}

/// Binds a score field and schedule to the denoising score matching loss.
pub struct DsmLoss<'a, F: ?Sized> {
    pub score: &'a F,
    pub schedule: NoiseSchedule,
    pub mc: usize,
}

impl<F: TimeField + ?Sized> LossFn for DsmLoss<'_, F> {
    fn loss(&self, y: &Outcome, rng: &mut Rng) -> Result<f64> {
        dsm_loss(self.score, &self.schedule, y.as_real()?, rng, self.mc)
    }
}

impl GradLossFn for DsmLoss<'_, TimeNet> {
    fn num_params(&self) -> usize {
        self.score.net.num_params()
    }

    fn loss_grad(&self, y: &Outcome, rng: &mut Rng, weight: f64, grad: &mut [f64]) -> Result<f64> {
        dsm_loss_grad(self.score, &self.schedule, y.as_real()?, rng, self.mc, weight, grad)
    }
}
