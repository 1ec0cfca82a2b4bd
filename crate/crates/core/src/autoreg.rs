//! Tabular autoregressive token model.
//!
//! Tokens are 1-based. Token 1 is padding and token `k` ends the content;
//! once `k` is emitted every later position is padding. The next-token
//! distribution at position `j` is a softmax row indexed by the prefix
//! `y(1..j)`, which carries the same information as the prefix left-padded
//! with 1s to length `d − 1` together with its position.

use serde::{Deserialize, Serialize};

use crate::data::{Outcome, Token};
use crate::error::{Error, Result};
use crate::risk::{GradLossFn, LossFn};
use crate::rng::Rng;

/// Largest `k^d` for which full enumeration is attempted.
pub const MAX_ENUMERATION: u128 = 1_000_000;

#[derive(Debug, Clone, PartialEq)]
pub struct NextTokenModel {
    k: usize,
    d: usize,
    /// Row-major `(rows, k)`; `-inf` marks a zero-probability token.
    logits: Vec<f64>,
    row_offsets: Vec<usize>,
}

/// JSON form: `{k, d, logits}` with one logit row per (position, prefix).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TableJson {
    pub k: usize,
    pub d: usize,
    pub logits: Vec<Vec<f64>>,
}

fn offsets(k: usize, d: usize) -> Vec<usize> {
    let mut out = Vec::with_capacity(d + 1);
    let mut acc = 0usize;
    let mut width = 1usize;
    for _ in 0..=d {
        out.push(acc);
        acc += width;
        width *= k;
    }
    out
}

impl NextTokenModel {
    /// Table with all logits zero, i.e. uniform rows.
    pub fn uniform(k: usize, d: usize) -> Result<Self> {
        if k < 2 || d < 1 {
            return Err(Error::InvalidArgument(format!("need k >= 2 and d >= 1, got k={k}, d={d}")));
        }
        let size = (k as u128).checked_pow(d as u32).unwrap_or(u128::MAX);
        if size > MAX_ENUMERATION {
            return Err(Error::TableTooLarge(size));
        }
        let row_offsets = offsets(k, d);
        let rows = row_offsets[d];
        Ok(Self {
            k,
            d,
            logits: vec![0.0; rows * k],
            row_offsets,
        })
    }

    /// Builds a table whose row for each prefix is `probs(prefix)`.
    pub fn from_probabilities<F>(k: usize, d: usize, mut probs: F) -> Result<Self>
    where
        F: FnMut(&[Token]) -> Vec<f64>,
    {
        let mut model = Self::uniform(k, d)?;
        let mut prefix = Vec::with_capacity(d);
        for j in 0..d {
            for code in 0..k.pow(j as u32) {
                decode_prefix(code, j, k, &mut prefix);
                let p = probs(&prefix);
                if p.len() != k || p.iter().any(|v| !(*v >= 0.0)) {
                    return Err(Error::InvalidArgument(format!("bad probability row for prefix {prefix:?}")));
                }
                let total: f64 = p.iter().sum();
                if (total - 1.0).abs() > 1e-9 {
                    return Err(Error::InvalidArgument(format!("row for prefix {prefix:?} sums to {total}")));
                }
                let r = model.row_index(&prefix);
                for (l, v) in model.row_mut(r).iter_mut().zip(&p) {
                    *l = v.ln();
                }
            }
        }
        Ok(model)
    }

    /// Random logits drawn uniformly from `[-scale, scale]`.
    pub fn random(k: usize, d: usize, scale: f64, rng: &mut Rng) -> Result<Self> {
        use rand::Rng as _;
        let mut model = Self::uniform(k, d)?;
        for l in &mut model.logits {
            *l = rng.gen_range(-scale..=scale);
        }
        Ok(model)
    }

    pub fn k(&self) -> usize {
        self.k
    }

    pub fn d(&self) -> usize {
        self.d
    }

    pub fn num_rows(&self) -> usize {
        self.row_offsets[self.d]
    }

    pub fn logits(&self) -> &[f64] {
        &self.logits
    }

    pub fn logits_mut(&mut self) -> &mut [f64] {
        &mut self.logits
    }

    /// Row index for the distribution of the token following `prefix`.
    pub fn row_index(&self, prefix: &[Token]) -> usize {
        let j = prefix.len();
        debug_assert!(j < self.d);
        let code = prefix.iter().fold(0usize, |acc, &t| acc * self.k + (t as usize - 1));
        self.row_offsets[j] + code
    }

    fn row(&self, r: usize) -> &[f64] {
        &self.logits[r * self.k..(r + 1) * self.k]
    }

    fn row_mut(&mut self, r: usize) -> &mut [f64] {
        let k = self.k;
        &mut self.logits[r * k..(r + 1) * k]
    }

    /// Softmax of row `r`.
    pub fn row_probs(&self, r: usize) -> Vec<f64> {
        softmax(self.row(r))
    }

    /// Next-token probabilities after `prefix`.
    pub fn probs(&self, prefix: &[Token]) -> Vec<f64> {
        self.row_probs(self.row_index(prefix))
    }

    pub fn to_json(&self) -> TableJson {
        TableJson {
            k: self.k,
            d: self.d,
            logits: self.logits.chunks(self.k).map(<[f64]>::to_vec).collect(),
        }
    }

    pub fn from_json(json: &TableJson) -> Result<Self> {
        let mut model = Self::uniform(json.k, json.d)?;
        if json.logits.len() != model.num_rows() || json.logits.iter().any(|r| r.len() != json.k) {
            return Err(Error::Parse("logit table has the wrong shape".into()));
        }
        for (r, row) in json.logits.iter().enumerate() {
            model.row_mut(r).copy_from_slice(row);
        }
        Ok(model)
    }
}

fn decode_prefix(mut code: usize, len: usize, k: usize, out: &mut Vec<Token>) {
    out.clear();
    out.resize(len, 1);
    for slot in out.iter_mut().rev() {
        *slot = (code % k) as Token + 1;
        code /= k;
    }
}

fn softmax(logits: &[f64]) -> Vec<f64> {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = logits.iter().map(|&l| (l - max).exp()).collect();
    let total: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / total).collect()
}

fn log_softmax_at(logits: &[f64], tok: usize) -> f64 {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let lse = max + logits.iter().map(|&l| (l - max).exp()).sum::<f64>().ln();
    logits[tok] - lse
}

/// Checks length `d` and that every token lies in `[1, k]`.
pub fn check_tokens(y: &[Token], k: usize, d: usize) -> Result<()> {
    if y.len() != d {
        return Err(Error::DimensionMismatch { expected: d, got: y.len() });
    }
    if let Some(&t) = y.iter().find(|&&t| t == 0 || t as usize > k) {
        return Err(Error::InvalidOutcome(format!("token {t} outside [1, {k}]")));
    }
    Ok(())
}

/// Pad invariant: if position `j` holds token `k`, every later position holds 1.
pub fn is_pad_valid(y: &[Token], k: usize) -> bool {
    match y.iter().position(|&t| t as usize == k) {
        Some(j) => y[j + 1..].iter().all(|&t| t == 1),
        None => true,
    }
}

/// Pad invariant plus "padding only after end of content": no token 1
/// appears before the first `k`. Data sequences are expected to be canonical.
pub fn is_canonical(y: &[Token], k: usize) -> bool {
    let end = y.iter().position(|&t| t as usize == k).unwrap_or(y.len());
    is_pad_valid(y, k) && y[..end].iter().all(|&t| t != 1)
}

/// Cross-entropy `−Σ_{j: y(j) ≠ 1} log θ_{y(j)}(prefix)`.
pub fn ce_loss(model: &NextTokenModel, y: &[Token]) -> Result<f64> {
    check_tokens(y, model.k, model.d)?;
    let mut loss = 0.0;
    for (j, &t) in y.iter().enumerate() {
        if t == 1 {
            continue;
        }
        let lp = log_softmax_at(model.row(model.row_index(&y[..j])), t as usize - 1);
        if lp == f64::NEG_INFINITY {
            return Err(Error::InfiniteLoss { position: j + 1, token: t });
        }
        loss -= lp;
    }
    Ok(loss)
}

/// Adds `weight · ∇ ce_loss(model, y)` (with respect to the logits) into `grad`
/// and returns the loss.
pub fn ce_loss_grad(model: &NextTokenModel, y: &[Token], weight: f64, grad: &mut [f64]) -> Result<f64> {
    let loss = ce_loss(model, y)?;
    let k = model.k;
    for (j, &t) in y.iter().enumerate() {
        if t == 1 {
            continue;
        }
        let r = model.row_index(&y[..j]);
        let p = model.row_probs(r);
        let g = &mut grad[r * k..(r + 1) * k];
        for (m, (gm, pm)) in g.iter_mut().zip(&p).enumerate() {
            let target = if m + 1 == t as usize { 1.0 } else { 0.0 };
            *gm += weight * (pm - target);
        }
    }
    Ok(loss)
}

/// Binds a table to [`ce_loss`] for use in risks.
pub struct CrossEntropy<'a>(pub &'a NextTokenModel);

impl LossFn for CrossEntropy<'_> {
    fn loss(&self, y: &Outcome, _rng: &mut Rng) -> Result<f64> {
        ce_loss(self.0, y.as_tokens()?)
    }
}

impl GradLossFn for CrossEntropy<'_> {
    fn num_params(&self) -> usize {
        self.0.logits.len()
    }

    fn loss_grad(&self, y: &Outcome, _rng: &mut Rng, weight: f64, grad: &mut [f64]) -> Result<f64> {
        ce_loss_grad(self.0, y.as_tokens()?, weight, grad)
    }
}

/// Smallest token `m` with `F(m) ≥ u` (left-continuous generalised inverse).
pub fn inverse_cdf(probs: &[f64], u: f64) -> Token {
    let mut cum = 0.0;
    let mut last_positive = 0;
    for (m, &p) in probs.iter().enumerate() {
        if p > 0.0 {
            last_positive = m;
        }
        cum += p;
        if p > 0.0 && cum >= u {
            return m as Token + 1;
        }
    }
    // u above the rounded total mass: fall back to the last supported token.
    last_positive as Token + 1
}

/// Inverse-transform ancestral sampling driven by `u ∈ [0,1)^d`.
pub fn ancestral_sample(model: &NextTokenModel, u: &[f64]) -> Result<Vec<Token>> {
    if u.len() != model.d {
        return Err(Error::DimensionMismatch {
            expected: model.d,
            got: u.len(),
        });
    }
    let mut seq: Vec<Token> = Vec::with_capacity(model.d);
    let mut ended = false;
    for &uj in u {
        if ended {
            seq.push(1);
            continue;
        }
        let tok = inverse_cdf(&model.probs(&seq), uj);
        ended = tok as usize == model.k;
        seq.push(tok);
    }
    Ok(seq)
}

/// Probability of every pad-valid sequence, in lexicographic order.
#[derive(Debug, Clone, PartialEq)]
pub struct Pmf {
    pub support: Vec<Vec<Token>>,
    pub probs: Vec<f64>,
}

impl Pmf {
    pub fn prob_of(&self, y: &[Token]) -> f64 {
        self.support.binary_search_by(|s| s.as_slice().cmp(y)).map(|i| self.probs[i]).unwrap_or(0.0)
    }

    /// Mixture `Σ w_i pmf_i` of pmfs over the same support.
    pub fn mixture(parts: &[(f64, &Pmf)]) -> Result<Pmf> {
        let first = parts.first().ok_or_else(|| Error::InvalidArgument("empty mixture".into()))?.1;
        let mut probs = vec![0.0; first.probs.len()];
        for (w, pmf) in parts {
            if pmf.support != first.support {
                return Err(Error::InvalidArgument("mixture components have different supports".into()));
            }
            for (acc, p) in probs.iter_mut().zip(&pmf.probs) {
                *acc += w * p;
            }
        }
        Ok(Pmf {
            support: first.support.clone(),
            probs,
        })
    }

    pub fn outcomes(&self) -> Vec<Outcome> {
        self.support.iter().cloned().map(Outcome::Tokens).collect()
    }
}

/// All sequences in `[k]^d` satisfying the pad invariant, lexicographically.
pub fn pad_valid_sequences(k: usize, d: usize) -> Result<Vec<Vec<Token>>> {
    let size = (k as u128).checked_pow(d as u32).unwrap_or(u128::MAX);
    if size > MAX_ENUMERATION {
        return Err(Error::TableTooLarge(size));
    }
    let mut out = Vec::new();
    let mut seq = Vec::with_capacity(d);
    fn rec(k: usize, d: usize, seq: &mut Vec<Token>, out: &mut Vec<Vec<Token>>) {
        if seq.len() == d {
            out.push(seq.clone());
            return;
        }
        if seq.contains(&(k as Token)) {
            seq.push(1);
            rec(k, d, seq, out);
            seq.pop();
            return;
        }
        for t in 1..=k as Token {
            seq.push(t);
            rec(k, d, seq, out);
            seq.pop();
        }
    }
    rec(k, d, &mut seq, &mut out);
    Ok(out)
}

/// Exact law of [`ancestral_sample`] under `u ~ Unif[0,1)^d`.
pub fn exact_pmf(model: &NextTokenModel) -> Result<Pmf> {
    let support = pad_valid_sequences(model.k, model.d)?;
    let probs = support
        .iter()
        .map(|y| {
            let mut p = 1.0;
            let mut ended = false;
            for (j, &t) in y.iter().enumerate() {
                if ended {
                    continue;
                }
                p *= model.probs(&y[..j])[t as usize - 1];
                ended = t as usize == model.k;
            }
            p
        })
        .collect();
    Ok(Pmf { support, probs })
}

/// Conditional table implied by a pmf over pad-valid sequences. Rows for
/// prefixes with zero mass are uniform.
pub fn model_from_pmf(pmf: &Pmf, k: usize, d: usize) -> Result<NextTokenModel> {
    let mut counts = vec![0.0; NextTokenModel::uniform(k, d)?.num_rows() * k];
    let shape = NextTokenModel::uniform(k, d)?;
    for (y, &p) in pmf.support.iter().zip(&pmf.probs) {
        for (j, &t) in y.iter().enumerate() {
            if y[..j].contains(&(k as Token)) {
                break;
            }
            counts[shape.row_index(&y[..j]) * k + t as usize - 1] += p;
        }
    }
    NextTokenModel::from_probabilities(k, d, |prefix| {
        let r = shape.row_index(prefix);
        let row = &counts[r * k..(r + 1) * k];
        let total: f64 = row.iter().sum();
        if total > 0.0 {
            row.iter().map(|c| c / total).collect()
        } else {
            vec![1.0 / k as f64; k]
        }
    })
}

/// A risk that is a signed weighted sum of cross-entropy losses,
/// `Σ_i w_i ℓ(θ, y_i)`, stored as per-(row, token) weight totals.
#[derive(Debug, Clone)]
pub struct TokenRisk {
    k: usize,
    d: usize,
    weights: Vec<f64>,
}

impl TokenRisk {
    pub fn new(k: usize, d: usize) -> Result<Self> {
        let shape = NextTokenModel::uniform(k, d)?;
        Ok(Self {
            k,
            d,
            weights: vec![0.0; shape.num_rows() * k],
        })
    }

    pub fn add(&mut self, shape: &NextTokenModel, y: &[Token], weight: f64) -> Result<()> {
        check_tokens(y, self.k, self.d)?;
        for (j, &t) in y.iter().enumerate() {
            if t != 1 {
                self.weights[shape.row_index(&y[..j]) * self.k + t as usize - 1] += weight;
            }
        }
        Ok(())
    }

    pub fn from_terms<'a, I>(k: usize, d: usize, terms: I) -> Result<Self>
    where
        I: IntoIterator<Item = (f64, &'a [Token])>,
    {
        let shape = NextTokenModel::uniform(k, d)?;
        let mut risk = Self::new(k, d)?;
        for (w, y) in terms {
            risk.add(&shape, y, w)?;
        }
        Ok(risk)
    }

    /// Risk value and its gradient with respect to the logits.
    pub fn value_and_grad(&self, model: &NextTokenModel, grad: &mut [f64]) -> Result<f64> {
        let k = self.k;
        grad.iter_mut().for_each(|g| *g = 0.0);
        let mut value = 0.0;
        for r in 0..model.num_rows() {
            let w = &self.weights[r * k..(r + 1) * k];
            let mass: f64 = w.iter().sum();
            if w.iter().all(|&v| v == 0.0) {
                continue;
            }
            let p = model.row_probs(r);
            for m in 0..k {
                if w[m] != 0.0 {
                    value -= w[m] * log_softmax_at(model.row(r), m);
                }
                grad[r * k + m] = mass * p[m] - w[m];
            }
        }
        if !value.is_finite() {
            return Err(Error::Diverged("non-finite tabular risk".into()));
        }
        Ok(value)
    }

    pub fn value(&self, model: &NextTokenModel) -> Result<f64> {
        let mut grad = vec![0.0; model.logits.len()];
        self.value_and_grad(model, &mut grad)
    }

    fn row_mass(&self, r: usize) -> f64 {
        self.weights[r * self.k..(r + 1) * self.k].iter().sum()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TabularFitConfig {
    pub iterations: usize,
    pub lr: f64,
}

impl Default for TabularFitConfig {
    fn default() -> Self {
        Self { iterations: 20_000, lr: 1.0 }
    }
}

/// Full-batch gradient descent on the logits, starting from uniform rows.
///
/// Each row's step is divided by the absolute weight mass of that row so
/// rarely visited prefixes converge at the same rate as common ones.
pub fn fit_tabular(risk: &TokenRisk, config: &TabularFitConfig) -> Result<NextTokenModel> {
    let mut model = NextTokenModel::uniform(risk.k, risk.d)?;
    let mut grad = vec![0.0; model.logits.len()];
    let k = risk.k;
    for _ in 0..config.iterations {
        risk.value_and_grad(&model, &mut grad)?;
        for r in 0..model.num_rows() {
            let mass = risk.row_mass(r).abs();
            if mass == 0.0 {
                continue;
            }
            for m in 0..k {
                model.logits[r * k + m] -= config.lr * grad[r * k + m] / mass;
            }
        }
        if model.logits.iter().any(|l| !l.is_finite()) {
            return Err(Error::Diverged("non-finite logits".into()));
        }
    }
    risk.value(&model)?;
    Ok(model)
}

/// `E_P[ℓ(θ,Y)] − E_P[ℓ(θ*,Y)]` by exact summation over `target`.
pub fn exact_generalization_error(model: &NextTokenModel, reference: &NextTokenModel, target: &Pmf) -> Result<f64> {
    let mut total = 0.0;
    for (y, &p) in target.support.iter().zip(&target.probs) {
        if p > 0.0 {
            total += p * (ce_loss(model, y)? - ce_loss(reference, y)?);
        }
    }
    Ok(total)
}
