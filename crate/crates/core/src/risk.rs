//! Counterfactual risk estimators.
//!
//! The cross-fitted doubly robust risk is
//!
//! ```text
//! R_n(θ) = (1/n) Σ_j Σ_{z ∈ fold 3−j} ∫ [ 1(a=a*) α̂ʲ(x) {ℓ(θ,y) − ℓ(θ,ψ̂ʲ(u|x))} + ℓ(θ,ψ̂ʲ(u|x)) ] Π(du)
//! ```
//!
//! with the Π-integral replaced by `mc_u` uniform draws per observation.
//! The naïve, plug-in, IPW and oracle risks are the usual degenerations.
//!
//! All randomness is keyed by (observation key, role) through
//! [`RngStream::derive2`], so every estimator that touches the same term
//! uses the same uniforms and the same loss noise for it.

use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::data::{FoldedDataset, Outcome};
use crate::error::{Error, Result};
use crate::nuisance::{inverse_propensity, ConditionalLaw, NuisancePair};
use crate::rng::{Rng, RngStream};

/// Per-outcome loss `ℓ(θ, y)` with `θ` bound in.
pub trait LossFn {
    /// May consume `rng` for internal Monte Carlo.
    fn loss(&self, y: &Outcome, rng: &mut Rng) -> Result<f64>;
}

/// A loss that can also report its parameter gradient.
pub trait GradLossFn: LossFn {
    fn num_params(&self) -> usize;

    /// Adds `weight · ∇θ ℓ(θ, y)` into `grad` and returns `ℓ(θ, y)`,
    /// consuming `rng` exactly as [`LossFn::loss`] would.
    fn loss_grad(&self, y: &Outcome, rng: &mut Rng, weight: f64, grad: &mut [f64]) -> Result<f64>;
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Method {
    #[serde(rename = "oracle")]
    Oracle,
    #[serde(rename = "naive")]
    Naive,
    #[serde(rename = "plugin")]
    PlugIn,
    #[serde(rename = "ipw")]
    Ipw,
    #[serde(rename = "doublegen")]
    DoubleGen,
}

impl Method {
    pub const ALL: [Method; 5] = [Method::Naive, Method::PlugIn, Method::Ipw, Method::DoubleGen, Method::Oracle];

    pub fn name(&self) -> &'static str {
        match self {
            Method::Oracle => "oracle",
            Method::Naive => "naive",
            Method::PlugIn => "plugin",
            Method::Ipw => "ipw",
            Method::DoubleGen => "doublegen",
        }
    }

    pub fn needs_nuisances(&self) -> bool {
        matches!(self, Method::PlugIn | Method::Ipw | Method::DoubleGen)
    }
}

impl std::fmt::Display for Method {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

impl std::str::FromStr for Method {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Method::ALL
            .into_iter()
            .find(|m| m.name() == s)
            .ok_or_else(|| Error::InvalidArgument(format!("unknown method {s:?}")))
    }
}

/// Forces parts of the doubly robust risk to zero.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Ablation {
    /// Replace `α̂` by 0.
    pub zero_alpha: bool,
    /// Replace every `ℓ(θ, ψ̂(u|x))` by 0.
    pub zero_psi: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RiskSpec {
    pub method: Method,
    pub mc_u: usize,
    pub a_star: u32,
    #[serde(default)]
    pub ablation: Ablation,
}

impl RiskSpec {
    pub fn new(method: Method, mc_u: usize, a_star: u32) -> Self {
        Self {
            method,
            mc_u,
            a_star,
            ablation: Ablation::default(),
        }
    }
}

/// Data a risk may draw on. Which fields are required depends on the method.
#[derive(Debug, Clone, Copy, Default)]
pub struct RiskInput<'a> {
    pub folded: Option<&'a FoldedDataset>,
    /// `nuisances[j]` was fitted on fold `j` and is applied to fold `1 − j`.
    pub nuisances: Option<&'a [NuisancePair; 2]>,
    /// A counterfactual sample, used only by the oracle risk.
    pub counterfactual: Option<&'a [Outcome]>,
}

#[derive(Debug, Clone)]
struct Entry {
    y: Outcome,
    /// Coefficient on `ℓ(θ, y)`: `1(a = a*) α̂(x)` (or 1 for naïve/oracle).
    y_weight: f64,
    psi: Option<ConditionalLaw>,
    key: u64,
}

/// A risk with nuisances evaluated at every observation, ready for repeated
/// evaluation and gradient sampling.
#[derive(Debug, Clone)]
pub struct PreparedRisk {
    spec: RiskSpec,
    entries: Vec<Entry>,
}

/// One weighted outcome in the expansion `R(θ) = Σ w ℓ(θ, y)`.
#[derive(Debug, Clone, PartialEq)]
pub struct RiskTerm {
    pub weight: f64,
    pub outcome: Outcome,
    /// Sub-stream for this term's loss noise.
    pub loss_stream: RngStream,
}

const ROLE_Y: u64 = 0;
const ROLE_U: u64 = 1;
const ROLE_PSI_BASE: u64 = 2;

impl PreparedRisk {
    pub fn new(input: RiskInput<'_>, spec: RiskSpec) -> Result<Self> {
        if spec.mc_u == 0 {
            return Err(Error::InvalidArgument("mc_u must be at least 1".into()));
        }
        let entries = match spec.method {
            Method::Oracle => {
                let sample = input
                    .counterfactual
                    .ok_or_else(|| Error::MissingInput("oracle risk needs a counterfactual sample".into()))?;
                if sample.is_empty() {
                    return Err(Error::EmptyDataset);
                }
                sample
                    .iter()
                    .enumerate()
                    .map(|(i, y)| Entry {
                        y: y.clone(),
                        y_weight: 1.0,
                        psi: None,
                        key: i as u64,
                    })
                    .collect()
            }
            Method::Naive => {
                let folded = input.folded.ok_or_else(|| Error::MissingInput("naive risk needs data".into()))?;
                let mut entries = Vec::new();
                for j in 0..2 {
                    for (o, &idx) in folded.fold(j).iter().zip(folded.indices(j)) {
                        if o.a == spec.a_star {
                            entries.push(Entry {
                                y: o.y.clone(),
                                y_weight: 1.0,
                                psi: None,
                                key: idx as u64,
                            });
                        }
                    }
                }
                if entries.is_empty() {
                    return Err(Error::InvalidArgument("naive risk: no observation has a = a*".into()));
                }
                entries
            }
            Method::PlugIn | Method::Ipw | Method::DoubleGen => {
                let folded = input.folded.ok_or_else(|| Error::MissingInput(format!("{} risk needs data", spec.method)))?;
                let nuisances = input
                    .nuisances
                    .ok_or_else(|| Error::MissingInput(format!("{} risk needs nuisances", spec.method)))?;
                if folded.is_empty() {
                    return Err(Error::EmptyDataset);
                }
                let use_alpha = matches!(spec.method, Method::Ipw | Method::DoubleGen) && !spec.ablation.zero_alpha;
                let use_psi = matches!(spec.method, Method::PlugIn | Method::DoubleGen) && !spec.ablation.zero_psi;
                let mut entries = Vec::with_capacity(folded.len());
                // j-th nuisance pair evaluates the other fold.
                for (j, pair) in nuisances.iter().enumerate() {
                    let other = 1 - j;
                    for (o, &idx) in folded.fold(other).iter().zip(folded.indices(other)) {
                        let y_weight = if use_alpha && o.a == spec.a_star {
                            inverse_propensity(&pair.propensity, &o.x)
                        } else {
                            0.0
                        };
                        let psi = use_psi.then(|| pair.outcome.conditional(&o.x));
                        entries.push(Entry {
                            y: o.y.clone(),
                            y_weight,
                            psi,
                            key: idx as u64,
                        });
                    }
                }
                entries
            }
        };
        Ok(Self { spec, entries })
    }

    pub fn spec(&self) -> &RiskSpec {
        &self.spec
    }

    /// Number of summands (the normaliser of the risk).
    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    fn uniforms(&self, entry: &Entry, stream: &RngStream) -> Vec<f64> {
        let mut rng = stream.derive2(entry.key, ROLE_U).rng();
        (0..self.spec.mc_u).map(|_| rng.gen::<f64>()).collect()
    }

    /// Risk value. Summation runs in fold-then-index order.
    pub fn risk(&self, loss: &(impl LossFn + ?Sized), stream: &RngStream) -> Result<f64> {
        let mut total = 0.0;
        for e in &self.entries {
            total += self.entry_value(e, loss, stream)?;
        }
        let r = total / self.entries.len() as f64;
        if !r.is_finite() {
            return Err(Error::NonFiniteLoss);
        }
        Ok(r)
    }

    /// `∫ [w {ℓ(y) − ℓ(ψ̂)} + ℓ(ψ̂)] dΠ` (or `w ℓ(y)` when `ψ̂` is absent).
    fn entry_value(&self, e: &Entry, loss: &(impl LossFn + ?Sized), stream: &RngStream) -> Result<f64> {
        let ly = if e.y_weight != 0.0 {
            finite(loss.loss(&e.y, &mut stream.derive2(e.key, ROLE_Y).rng())?)?
        } else {
            0.0
        };
        let Some(psi) = &e.psi else {
            return Ok(e.y_weight * ly);
        };
        let mut acc = 0.0;
        for (m, u) in self.uniforms(e, stream).into_iter().enumerate() {
            let lpsi = finite(loss.loss(&psi.sample(u), &mut stream.derive2(e.key, ROLE_PSI_BASE + m as u64).rng())?)?;
            acc += e.y_weight * (ly - lpsi) + lpsi;
        }
        Ok(acc / self.spec.mc_u as f64)
    }

    /// Expands the risk as `Σ w ℓ(θ, y)` with the same uniforms and loss
    /// streams as [`PreparedRisk::risk`]. Zero-weight terms are omitted.
    pub fn terms(&self, stream: &RngStream) -> Vec<RiskTerm> {
        let n = self.entries.len() as f64;
        let mut out = Vec::new();
        for e in &self.entries {
            if e.y_weight != 0.0 {
                out.push(RiskTerm {
                    weight: e.y_weight / n,
                    outcome: e.y.clone(),
                    loss_stream: stream.derive2(e.key, ROLE_Y),
                });
            }
            if let Some(psi) = &e.psi {
                let w = (1.0 - e.y_weight) / (n * self.spec.mc_u as f64);
                if w != 0.0 {
                    for (m, u) in self.uniforms(e, stream).into_iter().enumerate() {
                        out.push(RiskTerm {
                            weight: w,
                            outcome: psi.sample(u),
                            loss_stream: stream.derive2(e.key, ROLE_PSI_BASE + m as u64),
                        });
                    }
                }
            }
        }
        out
    }

    /// Full-batch gradient of [`PreparedRisk::risk`] into `grad` (overwritten).
    pub fn risk_grad(&self, loss: &(impl GradLossFn + ?Sized), stream: &RngStream, grad: &mut [f64]) -> Result<f64> {
        grad.iter_mut().for_each(|g| *g = 0.0);
        let mut value = 0.0;
        for term in self.terms(stream) {
            value += term.weight * finite(loss.loss_grad(&term.outcome, &mut term.loss_stream.rng(), term.weight, grad)?)?;
        }
        Ok(value)
    }

    /// Gradient of the single bracketed term for entry `index` at uniform
    /// `u`, scaled by `scale` and added into `grad`. Returns the term value.
    pub fn gradient_term(&self, loss: &(impl GradLossFn + ?Sized), index: usize, u: f64, rng: &mut Rng, scale: f64, grad: &mut [f64]) -> Result<f64> {
        let e = self
            .entries
            .get(index)
            .ok_or_else(|| Error::InvalidArgument(format!("term index {index} out of range")))?;
        let w = e.y_weight;
        let ly = if w != 0.0 {
            finite(loss.loss_grad(&e.y, rng, scale * w, grad)?)?
        } else {
            0.0
        };
        match &e.psi {
            None => Ok(w * ly),
            Some(psi) => {
                let lpsi = finite(loss.loss_grad(&psi.sample(u), rng, scale * (1.0 - w), grad)?)?;
                Ok(w * (ly - lpsi) + lpsi)
            }
        }
    }

    /// Draws `(j, z)` uniformly over all summands (fold chosen with
    /// probability proportional to its size) and `u ~ Unif[0,1)`, then adds
    /// the gradient of that term into `grad`. Unbiased for the risk gradient
    /// as `mc_u → ∞`.
    pub fn sample_gradient_term(&self, loss: &(impl GradLossFn + ?Sized), rng: &mut Rng, scale: f64, grad: &mut [f64]) -> Result<f64> {
        let index = rng.gen_range(0..self.entries.len());
        let u: f64 = rng.gen();
        self.gradient_term(loss, index, u, rng, scale, grad)
    }
}

fn finite(v: f64) -> Result<f64> {
    if v.is_finite() {
        Ok(v)
    } else {
        Err(Error::NonFiniteLoss)
    }
}

/// Evaluates the selected risk (see [`PreparedRisk`]).
pub fn doublegen_risk(loss: &(impl LossFn + ?Sized), input: RiskInput<'_>, spec: RiskSpec, stream: &RngStream) -> Result<f64> {
    PreparedRisk::new(input, spec)?.risk(loss, stream)
}

/// One stochastic gradient term of the selected risk, written into a fresh
/// buffer.
pub fn sample_gradient_term(loss: &(impl GradLossFn + ?Sized), input: RiskInput<'_>, spec: RiskSpec, rng: &mut Rng) -> Result<Vec<f64>> {
    let prepared = PreparedRisk::new(input, spec)?;
    let mut grad = vec![0.0; loss.num_params()];
    prepared.sample_gradient_term(loss, rng, 1.0, &mut grad)?;
    Ok(grad)
}

/// Monte Carlo estimate with its standard error.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Estimate {
    pub mean: f64,
    pub se: f64,
}

/// Estimates `E_ℙ[ℓ(θ,Y) − ℓ(θ*,Y)]` from a counterfactual sample, using
/// common loss noise for both hypotheses.
pub fn generalization_error(loss: &(impl LossFn + ?Sized), reference: Option<&dyn LossFn>, sample: &[Outcome], stream: &RngStream) -> Result<Estimate> {
    let reference = reference.ok_or(Error::NoReferenceHypothesis)?;
    if sample.is_empty() {
        return Err(Error::EmptyDataset);
    }
    let diffs = sample
        .iter()
        .enumerate()
        .map(|(i, y)| {
            let s = stream.derive(i as u64);
            Ok(finite(loss.loss(y, &mut s.rng())?)? - finite(reference.loss(y, &mut s.rng())?)?)
        })
        .collect::<Result<Vec<f64>>>()?;
    let (mean, se) = crate::stats::mean_and_se(&diffs);
    Ok(Estimate { mean, se })
}
