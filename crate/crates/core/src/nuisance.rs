//! Nuisance estimation: the clipped inverse propensity and the conditional
//! outcome sampler `ψ(u | x)` driven by one uniform coordinate.

use std::sync::Arc;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::autoreg::inverse_cdf;
use crate::data::{Observation, Outcome, Token};
use crate::error::{Error, Result};
use crate::stats::{expit, normal_cdf, normal_quantile};
use crate::synth::Dgp;

/// Default clip ceiling for the inverse propensity.
pub const DEFAULT_CLIP: f64 = 100.0;

/// Logistic propensity `P(A = a* | x) = expit(coef[0] + Σ coef[i+1] x_i)`
/// whose reciprocal is clipped into `[1, clip]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PropensityModel {
    pub coef: Vec<f64>,
    pub clip: f64,
}

impl PropensityModel {
    pub fn new(coef: Vec<f64>, clip: f64) -> Result<Self> {
        if coef.is_empty() || coef.iter().any(|c| !c.is_finite()) {
            return Err(Error::InvalidArgument("propensity coefficients must be finite and include an intercept".into()));
        }
        if !(clip >= 1.0) {
            return Err(Error::InvalidArgument(format!("clip ceiling must be >= 1, got {clip}")));
        }
        Ok(Self { coef, clip })
    }

    /// Constant propensity `p`, ignoring all `dim` features.
    pub fn constant(p: f64, dim: usize, clip: f64) -> Result<Self> {
        let mut coef = vec![0.0; dim + 1];
        coef[0] = (p / (1.0 - p)).ln();
        Self::new(coef, clip)
    }

    pub fn score(&self, x: &[f64]) -> f64 {
        self.coef[0] + self.coef[1..].iter().zip(x).map(|(c, v)| c * v).sum::<f64>()
    }

    pub fn propensity(&self, x: &[f64]) -> f64 {
        expit(self.score(x))
    }

    /// `1 / expit(score)` before clipping.
    pub fn unclipped_inverse_propensity(&self, x: &[f64]) -> f64 {
        1.0 + (-self.score(x)).exp()
    }
}

/// Clipped inverse propensity, always in `[1, clip]`.
pub fn inverse_propensity(model: &PropensityModel, x: &[f64]) -> f64 {
    let v = model.unclipped_inverse_propensity(x);
    if v.is_nan() {
        return model.clip;
    }
    v.clamp(1.0, model.clip)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PropensityConfig {
    pub lr: f64,
    pub iterations: usize,
    pub clip: f64,
    /// Features whose slopes are held at zero (deliberate misspecification).
    pub drop_features: Vec<usize>,
}

impl Default for PropensityConfig {
    fn default() -> Self {
        Self {
            lr: 2.0,
            iterations: 2000,
            clip: DEFAULT_CLIP,
            drop_features: Vec::new(),
        }
    }
}

/// Logistic regression of `1(a = a*)` on `x` by full-batch gradient descent.
pub fn fit_propensity(fold: &[Observation], a_star: u32, config: &PropensityConfig) -> Result<PropensityModel> {
    let first = fold.first().ok_or(Error::EmptyDataset)?;
    let p = first.x.len();
    let treated = fold.iter().filter(|o| o.a == a_star).count();
    if treated == 0 || treated == fold.len() {
        return Err(Error::DegenerateFold(format!("{treated} of {} observations treated", fold.len())));
    }
    if let Some(&f) = config.drop_features.iter().find(|&&f| f >= p) {
        return Err(Error::InvalidArgument(format!("cannot drop feature {f} of {p}")));
    }
    let mut coef = vec![0.0; p + 1];
    let mut grad = vec![0.0; p + 1];
    let n = fold.len() as f64;
    for _ in 0..config.iterations {
        grad.iter_mut().for_each(|g| *g = 0.0);
        let mut loss = 0.0;
        for o in fold {
            let s = coef[0] + coef[1..].iter().zip(&o.x).map(|(c, v)| c * v).sum::<f64>();
            let target = if o.a == a_star { 1.0 } else { 0.0 };
            // log(1 + e^s) − t·s, evaluated stably.
            loss += s.max(0.0) + (-s.abs()).exp().ln_1p() - target * s;
            let r = expit(s) - target;
            grad[0] += r;
            for (g, v) in grad[1..].iter_mut().zip(&o.x) {
                *g += r * v;
            }
        }
        if !loss.is_finite() {
            return Err(Error::NonFiniteLoss);
        }
        for &f in &config.drop_features {
            grad[f + 1] = 0.0;
        }
        for (c, g) in coef.iter_mut().zip(&grad) {
            *c -= config.lr * g / n;
        }
    }
    PropensityModel::new(coef, config.clip)
}

/// The law of `ψ(U | x)` for one fixed `x`.
#[derive(Debug, Clone, PartialEq)]
pub enum ConditionalLaw {
    /// Uniform over the listed outcomes; `u` selects index `⌊u·len⌋`.
    Atoms(Vec<Outcome>),
    /// Independent `N(mean_i, sd²)` coordinates.
    Gaussian { mean: Vec<f64>, sd: f64 },
    /// Finite law; `u` is mapped through the left-continuous inverse CDF.
    Discrete { support: Vec<Outcome>, probs: Vec<f64> },
}

impl ConditionalLaw {
    /// Deterministic transport of `u ∈ [0, 1)` to an outcome.
    pub fn sample(&self, u: f64) -> Outcome {
        match self {
            ConditionalLaw::Atoms(atoms) => {
                let i = ((u * atoms.len() as f64) as usize).min(atoms.len() - 1);
                atoms[i].clone()
            }
            ConditionalLaw::Gaussian { mean, sd } => {
                let u = u.clamp(1e-300, 1.0 - 1e-16);
                let mut y = Vec::with_capacity(mean.len());
                y.push(mean[0] + sd * normal_quantile(u));
                if mean.len() > 1 {
                    // Remaining coordinates come from an auxiliary stream keyed by u.
                    let mut aux = ChaCha8Rng::seed_from_u64(u.to_bits());
                    for m in &mean[1..] {
                        let z: f64 = StandardNormal.sample(&mut aux);
                        y.push(m + sd * z);
                    }
                }
                Outcome::Real(y)
            }
            ConditionalLaw::Discrete { support, probs } => support[inverse_cdf(probs, u) as usize - 1].clone(),
        }
    }
}

/// Keeps only observations with `x[feature] < threshold`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FeatureSubset {
    pub feature: usize,
    pub threshold: f64,
}

impl FeatureSubset {
    pub fn contains(&self, x: &[f64]) -> bool {
        x[self.feature] < self.threshold
    }
}

/// k-nearest-neighbour conditional sampler over stored treated observations.
#[derive(Debug, Clone)]
pub struct KnnSampler {
    xs: Vec<Vec<f64>>,
    ys: Vec<Outcome>,
    k: usize,
}

impl KnnSampler {
    pub fn k(&self) -> usize {
        self.k
    }

    pub fn len(&self) -> usize {
        self.xs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.xs.is_empty()
    }

    /// Indices of the `k` nearest stored points, ordered by (distance, index).
    pub fn neighbors(&self, x: &[f64]) -> Vec<usize> {
        let mut dist: Vec<(f64, usize)> = self
            .xs
            .iter()
            .enumerate()
            .map(|(i, xi)| (xi.iter().zip(x).map(|(a, b)| (a - b) * (a - b)).sum::<f64>(), i))
            .collect();
        let cmp = |a: &(f64, usize), b: &(f64, usize)| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1));
        if self.k < dist.len() {
            dist.select_nth_unstable_by(self.k - 1, cmp);
            dist.truncate(self.k);
        }
        dist.sort_unstable_by(cmp);
        dist.into_iter().map(|(_, i)| i).collect()
    }

    pub fn conditional(&self, x: &[f64]) -> ConditionalLaw {
        ConditionalLaw::Atoms(self.neighbors(x).into_iter().map(|i| self.ys[i].clone()).collect())
    }
}

#[derive(Debug, Clone)]
pub enum OutcomeSampler {
    Knn(KnnSampler),
    Oracle(Arc<Dgp>),
    /// k-NN fitted only on treated observations inside `subset`.
    Misspecified {
        inner: KnnSampler,
        subset: FeatureSubset,
    },
}

impl OutcomeSampler {
    /// The law of `ψ(U | x)` for `U ~ Unif[0,1)`.
    pub fn conditional(&self, x: &[f64]) -> ConditionalLaw {
        match self {
            OutcomeSampler::Knn(knn) | OutcomeSampler::Misspecified { inner: knn, .. } => knn.conditional(x),
            OutcomeSampler::Oracle(dgp) => dgp.conditional_law(x),
        }
    }
}

fn build_knn<'a>(treated: impl Iterator<Item = &'a Observation>, k: usize) -> Result<KnnSampler> {
    if k == 0 {
        return Err(Error::InvalidArgument("neighbour count must be positive".into()));
    }
    let (xs, ys): (Vec<_>, Vec<_>) = treated.map(|o| (o.x.clone(), o.y.clone())).unzip();
    if xs.len() < k {
        return Err(Error::InsufficientSupport {
            needed: k,
            available: xs.len(),
        });
    }
    Ok(KnnSampler { xs, ys, k })
}

/// Stores the treated observations of `fold`, in fold order.
pub fn fit_outcome_sampler(fold: &[Observation], a_star: u32, k: usize) -> Result<OutcomeSampler> {
    Ok(OutcomeSampler::Knn(build_knn(fold.iter().filter(|o| o.a == a_star), k)?))
}

/// Like [`fit_outcome_sampler`] but restricted to treated observations in `subset`.
pub fn fit_misspecified_outcome_sampler(fold: &[Observation], a_star: u32, k: usize, subset: FeatureSubset) -> Result<OutcomeSampler> {
    if let Some(o) = fold.first() {
        if subset.feature >= o.x.len() {
            return Err(Error::InvalidArgument(format!("subset feature {} out of range", subset.feature)));
        }
    }
    let inner = build_knn(fold.iter().filter(|o| o.a == a_star && subset.contains(&o.x)), k)?;
    Ok(OutcomeSampler::Misspecified { inner, subset })
}

/// `ψ(u | x)`.
pub fn sample_outcome(sampler: &OutcomeSampler, u: f64, x: &[f64]) -> Outcome {
    sampler.conditional(x).sample(u)
}

/// Nuisances fitted on one fold.
#[derive(Debug, Clone)]
pub struct NuisancePair {
    pub propensity: PropensityModel,
    pub outcome: OutcomeSampler,
}

/// How outcomes are discretised for the χ² diagnostic.
#[derive(Debug, Clone, PartialEq)]
pub enum Binning {
    /// Scalar outcomes; cells are `(-∞, e₀), [e₀, e₁), …, [e_last, ∞)`.
    Edges(Vec<f64>),
    /// Token outcomes; one cell per listed sequence.
    Sequences(Vec<Vec<Token>>),
}

impl Binning {
    fn cells(&self) -> usize {
        match self {
            Binning::Edges(e) => e.len() + 1,
            Binning::Sequences(s) => s.len(),
        }
    }

    fn cell_of(&self, y: &Outcome) -> Result<usize> {
        match (self, y) {
            (Binning::Edges(edges), Outcome::Real(v)) if v.len() == 1 => Ok(edges.partition_point(|&e| e <= v[0])),
            (Binning::Sequences(seqs), Outcome::Tokens(t)) => seqs
                .iter()
                .position(|s| s == t)
                .ok_or_else(|| Error::InvalidOutcome(format!("sequence {t:?} not among the listed cells"))),
            _ => Err(Error::InvalidOutcome("outcome does not match the binning".into())),
        }
    }

    /// Cell probabilities of `law`.
    pub fn probabilities(&self, law: &ConditionalLaw) -> Result<Vec<f64>> {
        let mut p = vec![0.0; self.cells()];
        match law {
            ConditionalLaw::Atoms(atoms) => {
                let w = 1.0 / atoms.len() as f64;
                for a in atoms {
                    p[self.cell_of(a)?] += w;
                }
            }
            ConditionalLaw::Discrete { support, probs } => {
                for (y, &q) in support.iter().zip(probs) {
                    if q > 0.0 {
                        p[self.cell_of(y)?] += q;
                    }
                }
            }
            ConditionalLaw::Gaussian { mean, sd } => {
                let Binning::Edges(edges) = self else {
                    return Err(Error::InvalidOutcome("Gaussian law needs edge binning".into()));
                };
                if mean.len() != 1 {
                    return Err(Error::InvalidOutcome("edge binning needs scalar outcomes".into()));
                }
                let cdf = |e: f64| normal_cdf((e - mean[0]) / sd);
                let mut prev = 0.0;
                for (i, &e) in edges.iter().enumerate() {
                    let c = cdf(e);
                    p[i] = c - prev;
                    prev = c;
                }
                p[edges.len()] = 1.0 - prev;
            }
        }
        Ok(p)
    }
}

/// `χ²(ν₁ ‖ ν₂) = Σ (p₁/p₂ − 1)² p₂`, or `+∞` when `ν₁` charges a `ν₂`-null cell.
pub fn chi2_divergence(p1: &[f64], p2: &[f64]) -> f64 {
    let mut total = 0.0;
    for (&a, &b) in p1.iter().zip(p2) {
        if b > 0.0 {
            total += (a / b - 1.0).powi(2) * b;
        } else if a > 0.0 {
            return f64::INFINITY;
        }
    }
    total
}

/// Max over `x_grid` of `χ²(law of ψ̂(·|x) ‖ P_{Y|A=a*,X=x})` on the given cells.
pub fn chi2_nuisance_diagnostic(sampler: &OutcomeSampler, dgp: &Dgp, x_grid: &[Vec<f64>], binning: &Binning) -> Result<f64> {
    let mut worst: f64 = 0.0;
    for x in x_grid {
        let est = binning.probabilities(&sampler.conditional(x))?;
        let truth = binning.probabilities(&dgp.conditional_law(x))?;
        worst = worst.max(chi2_divergence(&est, &truth));
    }
    Ok(worst)
}
