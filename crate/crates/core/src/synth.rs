//! Synthetic confounded data-generating processes with known counterfactual
//! laws.
//!
//! Both processes draw `X`, then a binary label `A ∈ {0, 1}` with
//! `P(A = 1 | X = x) = expit(intercept + slopes·x)`, then `Y` from the
//! counterfactual conditional when `A = a* = 1` and from a contaminant law
//! otherwise. The counterfactual law is `ℙ = ∫ P_{Y | A=1, X=x} dP_X(x)`.

use std::sync::Arc;

use rand::Rng as _;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::autoreg::{ancestral_sample, exact_pmf, model_from_pmf, NextTokenModel, Pmf};
use crate::data::{Observation, Outcome};
use crate::error::{Error, Result};
use crate::nuisance::{ConditionalLaw, NuisancePair, OutcomeSampler, PropensityModel};
use crate::rng::Rng;
use crate::stats::expit;

/// The target intervention label.
pub const A_STAR: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Linear {
    pub intercept: f64,
    pub slopes: Vec<f64>,
}

impl Linear {
    pub fn eval(&self, x: &[f64]) -> f64 {
        self.intercept + self.slopes.iter().zip(x).map(|(c, v)| c * v).sum::<f64>()
    }

    /// Range of the function over the unit box `[0, 1]^p`.
    fn range_on_box(&self) -> (f64, f64) {
        let lo = self.intercept + self.slopes.iter().map(|c| c.min(0.0)).sum::<f64>();
        let hi = self.intercept + self.slopes.iter().map(|c| c.max(0.0)).sum::<f64>();
        (lo, hi)
    }
}

/// `X ~ Unif[0,1]^p`; `Y | A=1, X=x ~ N(m(x), s² I)`; `Y | A=0, X=x ~ N(m(x) + shift, s² I)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct GaussConfounded {
    pub features: usize,
    pub propensity: Linear,
    /// One mean function per outcome coordinate.
    pub means: Vec<Linear>,
    pub noise_sd: f64,
    pub contaminant_shift: f64,
    /// Required lower bound on the propensity over the feature box.
    pub min_propensity: f64,
}

impl Default for GaussConfounded {
    fn default() -> Self {
        Self {
            features: 2,
            propensity: Linear {
                intercept: -1.0,
                slopes: vec![2.5, 0.0],
            },
            means: vec![Linear {
                intercept: 1.0,
                slopes: vec![3.0, -1.0],
            }],
            noise_sd: 0.5,
            contaminant_shift: 4.0,
            min_propensity: 0.05,
        }
    }
}

/// Binary `X` with `P(X=1) = q`; per-`x` next-token tables over `[k]^d`.
///
/// Tables are given as probability rows in [`NextTokenModel`] row order
/// (prefixes grouped by length, lexicographic within a length).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TokenConfounded {
    pub k: usize,
    pub d: usize,
    pub q: f64,
    pub propensity: Linear,
    /// Tables for `x = 0` and `x = 1`.
    pub tables: Vec<Vec<Vec<f64>>>,
    /// Table used when `A ≠ a*`.
    pub contaminant: Vec<Vec<f64>>,
    pub min_propensity: f64,
}

/// Rows for a k=3, d=3 table where token 1 never appears before the end
/// token, token 2 continues and token 3 ends; `cont[j]` is P(continue) at
/// position j.
fn continue_table(cont: [f64; 3]) -> Vec<Vec<f64>> {
    let mut rows = Vec::new();
    let pad = vec![1.0, 0.0, 0.0];
    // position 1
    rows.push(vec![0.0, cont[0], 1.0 - cont[0]]);
    // position 2: prefixes (1), (2), (3)
    for first in 1..=3 {
        rows.push(if first == 3 { pad.clone() } else { vec![0.0, cont[1], 1.0 - cont[1]] });
    }
    // position 3: prefixes (a, b) in lexicographic order
    for a in 1..=3 {
        for b in 1..=3 {
            rows.push(if a == 3 || b == 3 { pad.clone() } else { vec![0.0, cont[2], 1.0 - cont[2]] });
        }
    }
    rows
}

impl Default for TokenConfounded {
    fn default() -> Self {
        Self {
            k: 3,
            d: 3,
            q: 0.5,
            // π(0) = 0.2, π(1) = 0.8
            propensity: Linear {
                intercept: -(4f64.ln()),
                slopes: vec![2.0 * 4f64.ln()],
            },
            tables: vec![continue_table([0.3, 0.4, 0.5]), continue_table([0.85, 0.8, 0.7])],
            contaminant: continue_table([0.5, 0.5, 0.5]),
            min_propensity: 0.05,
        }
    }
}

/// Serializable description of a data-generating process.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum DgpConfig {
    Gauss(GaussConfounded),
    Token(TokenConfounded),
}

impl Default for DgpConfig {
    fn default() -> Self {
        DgpConfig::Gauss(GaussConfounded::default())
    }
}

#[derive(Debug, Clone)]
pub struct TokenTables {
    pub arms: [NextTokenModel; 2],
    pub contaminant: NextTokenModel,
    pub arm_pmfs: [Pmf; 2],
    pub counterfactual_pmf: Pmf,
}

/// A validated data-generating process.
#[derive(Debug, Clone)]
pub struct Dgp {
    config: DgpConfig,
    tokens: Option<TokenTables>,
}

fn rows_to_model(k: usize, d: usize, rows: &[Vec<f64>]) -> Result<NextTokenModel> {
    let shape = NextTokenModel::uniform(k, d)?;
    if rows.len() != shape.num_rows() {
        return Err(Error::InvalidArgument(format!(
            "token table needs {} rows, got {}",
            shape.num_rows(),
            rows.len()
        )));
    }
    NextTokenModel::from_probabilities(k, d, |prefix| rows[shape.row_index(prefix)].clone())
}

impl Dgp {
    pub fn new(config: DgpConfig) -> Result<Self> {
        let tokens = match &config {
            DgpConfig::Gauss(g) => {
                if g.features == 0 || g.propensity.slopes.len() != g.features {
                    return Err(Error::InvalidArgument("propensity slopes must match the feature count".into()));
                }
                if g.means.is_empty() || g.means.iter().any(|m| m.slopes.len() != g.features) {
                    return Err(Error::InvalidArgument("each outcome mean needs one slope per feature".into()));
                }
                if !(g.noise_sd > 0.0) {
                    return Err(Error::InvalidArgument("noise_sd must be positive".into()));
                }
                let (lo, hi) = g.propensity.range_on_box();
                check_positivity(expit(lo), expit(hi), g.min_propensity)?;
                None
            }
            DgpConfig::Token(t) => {
                if !(0.0..=1.0).contains(&t.q) || t.propensity.slopes.len() != 1 || t.tables.len() != 2 {
                    return Err(Error::InvalidArgument("token DGP needs q in [0,1], one propensity slope and two tables".into()));
                }
                let (p0, p1) = (expit(t.propensity.eval(&[0.0])), expit(t.propensity.eval(&[1.0])));
                check_positivity(p0.min(p1), p0.max(p1), t.min_propensity)?;
                let arms = [rows_to_model(t.k, t.d, &t.tables[0])?, rows_to_model(t.k, t.d, &t.tables[1])?];
                let contaminant = rows_to_model(t.k, t.d, &t.contaminant)?;
                let arm_pmfs = [exact_pmf(&arms[0])?, exact_pmf(&arms[1])?];
                let counterfactual_pmf = Pmf::mixture(&[(1.0 - t.q, &arm_pmfs[0]), (t.q, &arm_pmfs[1])])?;
                Some(TokenTables {
                    arms,
                    contaminant,
                    arm_pmfs,
                    counterfactual_pmf,
                })
            }
        };
        Ok(Self { config, tokens })
    }

    pub fn config(&self) -> &DgpConfig {
        &self.config
    }

    pub fn a_star(&self) -> u32 {
        A_STAR
    }

    pub fn feature_dim(&self) -> usize {
        match &self.config {
            DgpConfig::Gauss(g) => g.features,
            DgpConfig::Token(_) => 1,
        }
    }

    pub fn outcome_dim(&self) -> usize {
        match &self.config {
            DgpConfig::Gauss(g) => g.means.len(),
            DgpConfig::Token(t) => t.d,
        }
    }

    pub fn token_tables(&self) -> Option<&TokenTables> {
        self.tokens.as_ref()
    }

    /// `π(x) = P(A = a* | X = x)`.
    pub fn propensity(&self, x: &[f64]) -> f64 {
        expit(self.propensity_linear().eval(x))
    }

    fn propensity_linear(&self) -> &Linear {
        match &self.config {
            DgpConfig::Gauss(g) => &g.propensity,
            DgpConfig::Token(t) => &t.propensity,
        }
    }

    /// The true propensity as a [`PropensityModel`] with the given clip.
    pub fn propensity_model(&self, clip: f64) -> Result<PropensityModel> {
        let lin = self.propensity_linear();
        let mut coef = vec![lin.intercept];
        coef.extend_from_slice(&lin.slopes);
        PropensityModel::new(coef, clip)
    }

    fn sample_x(&self, rng: &mut Rng) -> Vec<f64> {
        match &self.config {
            DgpConfig::Gauss(g) => (0..g.features).map(|_| rng.gen::<f64>()).collect(),
            DgpConfig::Token(t) => vec![if rng.gen::<f64>() < t.q { 1.0 } else { 0.0 }],
        }
    }

    fn sample_y(&self, x: &[f64], treated: bool, rng: &mut Rng) -> Result<Outcome> {
        match &self.config {
            DgpConfig::Gauss(g) => {
                let shift = if treated { 0.0 } else { g.contaminant_shift };
                Ok(Outcome::Real(
                    g.means
                        .iter()
                        .map(|m| {
                            let z: f64 = StandardNormal.sample(rng);
                            m.eval(x) + shift + g.noise_sd * z
                        })
                        .collect(),
                ))
            }
            DgpConfig::Token(t) => {
                let tables = self.tokens.as_ref().expect("token tables");
                let model = if treated { &tables.arms[token_arm(x)] } else { &tables.contaminant };
                let u: Vec<f64> = (0..t.d).map(|_| rng.gen::<f64>()).collect();
                Ok(Outcome::Tokens(ancestral_sample(model, &u)?))
            }
        }
    }

    /// `n` i.i.d. draws of `(X, A, Y)`.
    pub fn sample_observational(&self, n: usize, rng: &mut Rng) -> Result<Vec<Observation>> {
        if n == 0 {
            return Err(Error::InvalidArgument("n must be at least 1".into()));
        }
        (0..n)
            .map(|_| {
                let x = self.sample_x(rng);
                let treated = rng.gen::<f64>() < self.propensity(&x);
                let y = self.sample_y(&x, treated, rng)?;
                Ok(Observation {
                    x,
                    a: if treated { A_STAR } else { 0 },
                    y,
                })
            })
            .collect()
    }

    /// `n` i.i.d. draws from the counterfactual law `ℙ`.
    pub fn sample_counterfactual(&self, n: usize, rng: &mut Rng) -> Result<Vec<Outcome>> {
        if n == 0 {
            return Err(Error::InvalidArgument("n must be at least 1".into()));
        }
        (0..n)
            .map(|_| {
                let x = self.sample_x(rng);
                self.sample_y(&x, true, rng)
            })
            .collect()
    }

    /// `P_{Y | A=a*, X=x}`.
    pub fn conditional_law(&self, x: &[f64]) -> ConditionalLaw {
        match &self.config {
            DgpConfig::Gauss(g) => ConditionalLaw::Gaussian {
                mean: g.means.iter().map(|m| m.eval(x)).collect(),
                sd: g.noise_sd,
            },
            DgpConfig::Token(_) => {
                let pmf = &self.tokens.as_ref().expect("token tables").arm_pmfs[token_arm(x)];
                ConditionalLaw::Discrete {
                    support: pmf.outcomes(),
                    probs: pmf.probs.clone(),
                }
            }
        }
    }

    /// Exact pmf of `ℙ` (token processes only).
    pub fn counterfactual_pmf(&self) -> Option<&Pmf> {
        self.tokens.as_ref().map(|t| &t.counterfactual_pmf)
    }

    /// Conditional table of `ℙ`, the minimiser of the counterfactual
    /// cross-entropy risk (token processes only).
    pub fn reference_token_model(&self) -> Option<Result<NextTokenModel>> {
        let DgpConfig::Token(t) = &self.config else { return None };
        Some(model_from_pmf(&self.tokens.as_ref()?.counterfactual_pmf, t.k, t.d))
    }

    /// Mean of `ℙ` (Gaussian processes only).
    pub fn counterfactual_mean(&self) -> Option<Vec<f64>> {
        let DgpConfig::Gauss(g) = &self.config else { return None };
        // E[m(X)] with X uniform on the unit box.
        Some(g.means.iter().map(|m| m.intercept + 0.5 * m.slopes.iter().sum::<f64>()).collect())
    }
}

fn token_arm(x: &[f64]) -> usize {
    usize::from(x[0] >= 0.5)
}

fn check_positivity(lo: f64, hi: f64, min: f64) -> Result<()> {
    if !(min > 0.0) || lo < min || hi > 1.0 - min {
        return Err(Error::InvalidArgument(format!(
            "propensity range [{lo:.4}, {hi:.4}] violates positivity bound {min}"
        )));
    }
    Ok(())
}

/// True nuisances: `α(x) = 1/π(x)` (clipped at `clip`) and an exact
/// inverse-transform sampler of `P_{Y|A=a*,X=x}`.
pub fn oracle_nuisances(dgp: &Arc<Dgp>, clip: f64) -> Result<NuisancePair> {
    Ok(NuisancePair {
        propensity: dgp.propensity_model(clip)?,
        outcome: OutcomeSampler::Oracle(Arc::clone(dgp)),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::RngStream;

    #[test]
    fn default_token_tables_are_valid() {
        let dgp = Dgp::new(DgpConfig::Token(TokenConfounded::default())).unwrap();
        let pmf = dgp.counterfactual_pmf().unwrap();
        assert!((pmf.probs.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        assert!((dgp.propensity(&[0.0]) - 0.2).abs() < 1e-12);
        assert!((dgp.propensity(&[1.0]) - 0.8).abs() < 1e-12);
        for (y, &p) in pmf.support.iter().zip(&pmf.probs) {
            if p > 0.0 {
                assert!(crate::autoreg::is_canonical(y, 3), "{y:?}");
            }
        }
    }

    #[test]
    fn positivity_enforced() {
        let mut g = GaussConfounded::default();
        g.propensity.slopes = vec![10.0, 0.0];
        assert!(Dgp::new(DgpConfig::Gauss(g)).is_err());
    }

    #[test]
    fn sampling_is_seeded() {
        let dgp = Dgp::new(DgpConfig::default()).unwrap();
        let a = dgp.sample_observational(50, &mut RngStream::new(1, 1).rng()).unwrap();
        let b = dgp.sample_observational(50, &mut RngStream::new(1, 1).rng()).unwrap();
        assert_eq!(a, b);
        assert!(dgp.sample_observational(0, &mut RngStream::new(1, 1).rng()).is_err());
    }

    #[test]
    fn oracle_alpha_is_reciprocal() {
        let dgp = Arc::new(Dgp::new(DgpConfig::default()).unwrap());
        let pair = oracle_nuisances(&dgp, 100.0).unwrap();
        let x = [0.3, 0.9];
        assert!((pair.propensity.unclipped_inverse_propensity(&x) - 1.0 / dgp.propensity(&x)).abs() < 1e-12);
    }

    #[test]
    fn config_json_round_trip() {
        for cfg in [DgpConfig::Gauss(GaussConfounded::default()), DgpConfig::Token(TokenConfounded::default())] {
            let s = serde_json::to_string(&cfg).unwrap();
            assert_eq!(serde_json::from_str::<DgpConfig>(&s).unwrap(), cfg);
        }
    }
}
