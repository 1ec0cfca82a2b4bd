//! Flow matching on the linear interpolation path `(1 − t)U + tY` with a
//! standard normal source, and RK4 transport along a learned velocity field.

use rand::Rng as _;
use rand_distr::{Distribution, StandardNormal};

use crate::data::Outcome;
use crate::error::{Error, Result};
use crate::nn::{TimeField, TimeNet};
use crate::risk::{GradLossFn, LossFn};
use crate::rng::Rng;

/// Monte Carlo estimate of `∫₀¹ E‖y − U − θ((1−t)U + ty, t)‖² dt` using
/// `mc` draws of `(t, U)`.
pub fn flow_loss(field: &(impl TimeField + ?Sized), y: &[f64], rng: &mut Rng, mc: usize) -> Result<f64> {
    check(field.dim(), y, mc)?;
    let d = y.len();
    let (mut u, mut z, mut v) = (vec![0.0; d], vec![0.0; d], vec![0.0; d]);
    let mut total = 0.0;
    for _ in 0..mc {
        let t = draw_path_point(y, rng, &mut u, &mut z);
        field.eval(&z, t, &mut v);
        total += (0..d).map(|i| (y[i] - u[i] - v[i]).powi(2)).sum::<f64>();
    }
    Ok(total / mc as f64)
}

/// Adds `weight · ∇θ flow_loss` into `grad` and returns the loss; consumes
/// the same draws as [`flow_loss`].
pub fn flow_loss_grad(net: &TimeNet, y: &[f64], rng: &mut Rng, mc: usize, weight: f64, grad: &mut [f64]) -> Result<f64> {
    check(net.dim(), y, mc)?;
    let d = y.len();
    let (mut u, mut z) = (vec![0.0; d], vec![0.0; d]);
    let mut total = 0.0;
    let scale = weight / mc as f64;
    for _ in 0..mc {
        let t = draw_path_point(y, rng, &mut u, &mut z);
        let mut sq = 0.0;
        net.accumulate(
            &z,
            t,
            |v| {
                (0..d)
                    .map(|i| {
                        let r = y[i] - u[i] - v[i];
                        sq += r * r;
                        -2.0 * r * scale
                    })
                    .collect()
            },
            grad,
        );
        total += sq;
    }
    Ok(total / mc as f64)
}

fn check(dim: usize, y: &[f64], mc: usize) -> Result<()> {
    if y.len() != dim {
        return Err(Error::DimensionMismatch { expected: dim, got: y.len() });
    }
    if mc == 0 {
        return Err(Error::InvalidArgument("mc must be at least 1".into()));
    }
    Ok(())
}

/// Draws `t ~ Unif[0,1)` then `U ~ N(0, I)`; writes `U` and `(1−t)U + ty`.
fn draw_path_point(y: &[f64], rng: &mut Rng, u: &mut [f64], z: &mut [f64]) -> f64 {
    let t: f64 = rng.gen();
    for i in 0..y.len() {
        u[i] = StandardNormal.sample(rng);
        z[i] = (1.0 - t) * u[i] + t * y[i];
    }
    t
}

/// Classical RK4 for `dy/dt = θ(y, t)` from `y₀ = u` at `t = 0` to `t = 1`.
pub fn flow_sample(field: &(impl TimeField + ?Sized), u: &[f64], steps: usize) -> Result<Vec<f64>> {
    if steps == 0 {
        return Err(Error::InvalidArgument("steps must be at least 1".into()));
    }
    let d = field.dim();
    if u.len() != d {
        return Err(Error::DimensionMismatch { expected: d, got: u.len() });
    }
    let h = 1.0 / steps as f64;
    let mut y = u.to_vec();
    let (mut k1, mut k2, mut k3, mut k4, mut tmp) = (vec![0.0; d], vec![0.0; d], vec![0.0; d], vec![0.0; d], vec![0.0; d]);
    for s in 0..steps {
        let t = s as f64 * h;
        field.eval(&y, t, &mut k1);
        axpy(&y, 0.5 * h, &k1, &mut tmp);
        field.eval(&tmp, t + 0.5 * h, &mut k2);
        axpy(&y, 0.5 * h, &k2, &mut tmp);
        field.eval(&tmp, t + 0.5 * h, &mut k3);
        axpy(&y, h, &k3, &mut tmp);
        field.eval(&tmp, t + h, &mut k4);
        for i in 0..d {
            y[i] += h / 6.0 * (k1[i] + 2.0 * k2[i] + 2.0 * k3[i] + k4[i]);
        }
        if y.iter().any(|v| !v.is_finite()) {
            return Err(Error::OdeDiverged { t: t + h });
        }
    }
    Ok(y)
}

fn axpy(y: &[f64], a: f64, x: &[f64], out: &mut [f64]) {
    for i in 0..y.len() {
        out[i] = y[i] + a * x[i];
    }
}

/// `E[Y − U | (1−t)U + tY = z]` for `U ~ N(0, I)` and independent
/// `Y ~ N(mean, diag(sd²))`.
#[derive(Debug, Clone, PartialEq)]
pub struct GaussianInterpolationField {
    pub mean: Vec<f64>,
    pub sd: Vec<f64>,
}

impl TimeField for GaussianInterpolationField {
    fn dim(&self) -> usize {
        self.mean.len()
    }

    fn eval(&self, z: &[f64], t: f64, out: &mut [f64]) {
        for i in 0..self.mean.len() {
            let (m, s2) = (self.mean[i], self.sd[i] * self.sd[i]);
            let var_z = (1.0 - t).powi(2) + t * t * s2;
            let cov = t * s2 - (1.0 - t);
            out[i] = m + cov / var_z * (z[i] - t * m);
        }
    }
}

/// `θ(y, t) = c`.
#[derive(Debug, Clone, PartialEq)]
pub struct ConstantField(pub Vec<f64>);

impl TimeField for ConstantField {
    fn dim(&self) -> usize {
        self.0.len()
    }

    fn eval(&self, _y: &[f64], _t: f64, out: &mut [f64]) {
        out.copy_from_slice(&self.0);
    }
}

/// Binds a field to the flow-matching loss.
pub struct FlowLoss<'a, F: ?Sized> {
    pub field: &'a F,
    pub mc: usize,
}

impl<F: TimeField + ?Sized> LossFn for FlowLoss<'_, F> {
    fn loss(&self, y: &Outcome, rng: &mut Rng) -> Result<f64> {
        flow_loss(self.field, y.as_real()?, rng, self.mc)
    }
}

impl GradLossFn for FlowLoss<'_, TimeNet> {
    fn num_params(&self) -> usize {
        self.field.net.num_params()
    }

    fn loss_grad(&self, y: &Outcome, rng: &mut Rng, weight: f64, grad: &mut [f64]) -> Result<f64> {
        flow_loss_grad(self.field, y.as_real()?, rng, self.mc, weight, grad)
    }
}
