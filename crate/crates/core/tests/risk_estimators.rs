use std::sync::Arc;

use doublegen::autoreg::{ce_loss, exact_pmf, CrossEntropy, NextTokenModel};
use doublegen::data::{partition_folds, FoldedDataset, Observation};
use doublegen::diffusion::{DsmLoss, GaussianScore, NoiseSchedule};
use doublegen::eval::kl_categorical;
use doublegen::nuisance::{fit_outcome_sampler, inverse_propensity, sample_outcome, NuisancePair, PropensityModel};
use doublegen::risk::{generalization_error, Ablation, GradLossFn, LossFn, PreparedRisk};
use doublegen::synth::{oracle_nuisances, Dgp, DgpConfig, GaussConfounded, TokenConfounded};
use doublegen::{doublegen_risk, Method, Outcome, Result, RiskInput, RiskSpec, Rng, RngStream};

/// `ℓ(θ, y) = ‖y − θ‖²`.
struct Square(Vec<f64>);

impl LossFn for Square {
    fn loss(&self, y: &Outcome, _rng: &mut Rng) -> Result<f64> {
        Ok(y.as_real()?.iter().zip(&self.0).map(|(a, b)| (a - b).powi(2)).sum())
    }
}

impl GradLossFn for Square {
    fn num_params(&self) -> usize {
        self.0.len()
    }

    fn loss_grad(&self, y: &Outcome, rng: &mut Rng, weight: f64, grad: &mut [f64]) -> Result<f64> {
        for ((g, a), b) in grad.iter_mut().zip(y.as_real()?).zip(&self.0) {
            *g += weight * -2.0 * (a - b);
        }
        self.loss(y, rng)
    }
}

fn gauss_setup(n: usize, seed: u64) -> (Arc<Dgp>, FoldedDataset, [NuisancePair; 2]) {
    let dgp = Arc::new(Dgp::new(DgpConfig::Gauss(GaussConfounded::default())).unwrap());
    let obs = dgp.sample_observational(n, &mut RngStream::new(seed, 0).rng()).unwrap();
    let folded = partition_folds(&obs, &RngStream::new(seed, 1)).unwrap();
    let nuis = [0, 1].map(|j| NuisancePair {
        propensity: dgp.propensity_model(100.0).unwrap(),
        outcome: fit_outcome_sampler(folded.fold(j), 1, 5).unwrap(),
    });
    (dgp, folded, nuis)
}

fn input<'a>(folded: &'a FoldedDataset, nuis: &'a [NuisancePair; 2]) -> RiskInput<'a> {
    RiskInput {
        folded: Some(folded),
        nuisances: Some(nuis),
        counterfactual: None,
    }
}

#[test]
fn token_risk_matches_brute_force_enumeration() {
    let dgp = Arc::new(Dgp::new(DgpConfig::Token(TokenConfounded::default())).unwrap());
    let obs = dgp.sample_observational(40, &mut RngStream::new(81, 0).rng()).unwrap();
    let folded = partition_folds(&obs, &RngStream::new(81, 1)).unwrap();
    let nuis = [oracle_nuisances(&dgp, 100.0).unwrap(), oracle_nuisances(&dgp, 100.0).unwrap()];
    let model = NextTokenModel::random(3, 3, 1.0, &mut RngStream::new(82, 0).rng()).unwrap();
    let loss = CrossEntropy(&model);
    let mc = 200_000;
    let got = doublegen_risk(&loss, input(&folded, &nuis), RiskSpec::new(Method::DoubleGen, mc, 1), &RngStream::new(83, 0)).unwrap();

    // Enumerate the oracle conditional pmf instead of integrating over u.
    let tables = dgp.token_tables().unwrap();
    let expected_psi = |x: &[f64]| -> f64 {
        let pmf = &tables.arm_pmfs[usize::from(x[0] >= 0.5)];
        pmf.support
            .iter()
            .zip(&pmf.probs)
            .filter(|(_, &p)| p > 0.0)
            .map(|(y, &p)| p * ce_loss(&model, y).unwrap())
            .sum()
    };
    let mut total = 0.0;
    for o in &obs {
        let lpsi = expected_psi(&o.x);
        let w = if o.a == 1 { inverse_propensity(&nuis[0].propensity, &o.x) } else { 0.0 };
        let ly = if o.a == 1 { ce_loss(&model, o.y.as_tokens().unwrap()).unwrap() } else { 0.0 };
        total += w * (ly - lpsi) + lpsi;
    }
    let expected = total / obs.len() as f64;
    assert!((got - expected).abs() < 0.02 * expected.abs().max(1.0), "{got} vs {expected}");
}

#[test]
fn single_neighbour_risk_is_exact() {
    let (_, folded, nuis) = gauss_setup(200, 84);
    let one = [0, 1].map(|j| NuisancePair {
        propensity: nuis[j].propensity.clone(),
        outcome: fit_outcome_sampler(folded.fold(j), 1, 1).unwrap(),
    });
    let loss = Square(vec![0.3]);
    let got = doublegen_risk(&loss, input(&folded, &one), RiskSpec::new(Method::DoubleGen, 3, 1), &RngStream::new(85, 0)).unwrap();
    let mut total = 0.0;
    for j in 0..2 {
        let pair = &one[1 - j];
        for o in folded.fold(j) {
            // One neighbour: ψ(u | x) does not depend on u.
            let psi = sample_outcome(&pair.outcome, 0.5, &o.x);
            let lpsi = (psi.as_real().unwrap()[0] - 0.3).powi(2);
            let w = if o.a == 1 { inverse_propensity(&pair.propensity, &o.x) } else { 0.0 };
            let ly = (o.y.as_real().unwrap()[0] - 0.3).powi(2);
            total += w * (ly - lpsi) + lpsi;
        }
    }
    let expected = total / folded.len() as f64;
    assert!((got - expected).abs() < 1e-12 * expected.abs(), "{got} vs {expected}");
}

#[test]
fn sampled_gradient_is_unbiased() {
    let (_, folded, nuis) = gauss_setup(400, 86);
    let loss = Square(vec![-3.0]);
    let prepared = PreparedRisk::new(input(&folded, &nuis), RiskSpec::new(Method::DoubleGen, 200, 1)).unwrap();
    let mut full = vec![0.0];
    prepared.risk_grad(&loss, &RngStream::new(87, 0), &mut full).unwrap();
    let draws = 100_000;
    let mut acc = vec![0.0];
    let mut rng = RngStream::new(88, 0).rng();
    for _ in 0..draws {
        prepared.sample_gradient_term(&loss, &mut rng, 1.0 / draws as f64, &mut acc).unwrap();
    }
    let rel = (acc[0] - full[0]).abs() / full[0].abs();
    assert!(rel < 0.02, "sampled {} vs full {}", acc[0], full[0]);
}

#[test]
fn ablations_reduce_to_single_correction() {
    let (_, folded, nuis) = gauss_setup(300, 89);
    let loss = Square(vec![1.1]);
    let stream = RngStream::new(90, 0);
    let risk = |method, ablation| {
        let spec = RiskSpec {
            ablation,
            ..RiskSpec::new(method, 16, 1)
        };
        doublegen_risk(&loss, input(&folded, &nuis), spec, &stream).unwrap()
    };
    let none = Ablation::default();
    let plug = risk(Method::PlugIn, none);
    let ipw = risk(Method::Ipw, none);
    assert!(
        (risk(
            Method::DoubleGen,
            Ablation {
                zero_alpha: true,
                zero_psi: false
            }
        ) - plug)
            .abs()
            <= 1e-12
    );
    assert!(
        (risk(
            Method::DoubleGen,
            Ablation {
                zero_alpha: false,
                zero_psi: true
            }
        ) - ipw)
            .abs()
            <= 1e-12
    );
    assert_ne!(risk(Method::DoubleGen, none), plug);
}

#[test]
fn plug_in_ignores_observed_outcomes() {
    let (dgp, folded, nuis) = gauss_setup(300, 91);
    let obs = dgp.sample_observational(300, &mut RngStream::new(91, 0).rng()).unwrap();
    let scrambled: Vec<Observation> = obs
        .iter()
        .map(|o| Observation {
            y: Outcome::Real(vec![-100.0]),
            ..o.clone()
        })
        .collect();
    let refolded = partition_folds(&scrambled, &RngStream::new(91, 1)).unwrap();
    assert_eq!(refolded.indices(0), folded.indices(0));
    let loss = Square(vec![0.2]);
    let spec = RiskSpec::new(Method::PlugIn, 8, 1);
    let stream = RngStream::new(92, 0);
    let a = PreparedRisk::new(input(&folded, &nuis), spec).unwrap();
    let b = PreparedRisk::new(input(&refolded, &nuis), spec).unwrap();
    let (mut ga, mut gb) = (vec![0.0], vec![0.0]);
    assert_eq!(a.risk_grad(&loss, &stream, &mut ga).unwrap(), b.risk_grad(&loss, &stream, &mut gb).unwrap());
    assert_eq!(ga, gb);
}

#[test]
fn all_treated_with_unit_weights_is_the_oracle_risk() {
    let ys: Vec<f64> = (0..60).map(|i| (i as f64 * 0.37).sin()).collect();
    let obs: Vec<Observation> = ys
        .iter()
        .enumerate()
        .map(|(i, &y)| Observation {
            x: vec![(i % 5) as f64 / 5.0],
            a: 1,
            y: Outcome::Real(vec![y]),
        })
        .collect();
    let folded = partition_folds(&obs, &RngStream::new(93, 0)).unwrap();
    // Score 50 makes 1 + e^{−s} equal 1 in double precision.
    let unit = PropensityModel::new(vec![50.0, 0.0], 100.0).unwrap();
    let nuis = [0, 1].map(|j| NuisancePair {
        propensity: unit.clone(),
        outcome: fit_outcome_sampler(folded.fold(j), 1, 3).unwrap(),
    });
    let sample: Vec<Outcome> = ys.iter().map(|&y| Outcome::Real(vec![y])).collect();
    let loss = Square(vec![0.4]);
    let stream = RngStream::new(94, 0);
    let dg = doublegen_risk(&loss, input(&folded, &nuis), RiskSpec::new(Method::DoubleGen, 4, 1), &stream).unwrap();
    let oracle = doublegen_risk(
        &loss,
        RiskInput {
            counterfactual: Some(&sample),
            ..RiskInput::default()
        },
        RiskSpec::new(Method::Oracle, 4, 1),
        &stream,
    )
    .unwrap();
    assert!((dg - oracle).abs() <= 1e-12, "{dg} vs {oracle}");
}

#[test]
fn tabular_generalization_error_estimates_kl() {
    let dgp = Dgp::new(DgpConfig::Token(TokenConfounded::default())).unwrap();
    let reference = dgp.reference_token_model().unwrap().unwrap();
    let model = NextTokenModel::random(3, 3, 0.5, &mut RngStream::new(95, 0).rng()).unwrap();
    let sample = dgp.sample_counterfactual(50_000, &mut RngStream::new(96, 0).rng()).unwrap();
    let est = generalization_error(&CrossEntropy(&model), Some(&CrossEntropy(&reference)), &sample, &RngStream::new(97, 0)).unwrap();
    let kl = kl_categorical(&dgp.counterfactual_pmf().unwrap().probs, &exact_pmf(&model).unwrap().probs).unwrap();
    assert!((est.mean - kl).abs() < 4.0 * est.se, "{} ± {} vs {kl}", est.mean, est.se);
    assert!(generalization_error(&CrossEntropy(&model), None, &sample, &RngStream::new(97, 0)).is_err());
}

#[test]
fn gaussian_generalization_error_grows_with_mean_error() {
    let sched = NoiseSchedule::new(1.0, 0.01, 3.0).unwrap();
    let dgp = Dgp::new(DgpConfig::Gauss(GaussConfounded::default())).unwrap();
    let sample = dgp.sample_counterfactual(20_000, &mut RngStream::new(98, 0).rng()).unwrap();
    let var = 0.25 + 10.0 / 12.0;
    let score = |shift: f64| GaussianScore {
        mean: vec![2.0 + shift],
        var: vec![var],
        schedule: sched,
    };
    let truth = score(0.0);
    let reference = DsmLoss {
        score: &truth,
        schedule: sched,
        mc: 4,
    };
    let stream = RngStream::new(99, 0);
    let gaps: Vec<f64> = [0.0, 0.25, 0.5, 1.0]
        .iter()
        .map(|&s| {
            let field = score(s);
            generalization_error(
                &DsmLoss {
                    score: &field,
                    schedule: sched,
                    mc: 4,
                },
                Some(&reference),
                &sample,
                &stream,
            )
            .unwrap()
            .mean
        })
        .collect();
    assert_eq!(gaps[0], 0.0);
    assert!(gaps.windows(2).all(|w| w[1] > w[0]), "gaps {gaps:?}");
}

#[test]
fn naive_uses_treated_only() {
    let (_, folded, nuis) = gauss_setup(300, 100);
    let treated: Vec<f64> = (0..2)
        .flat_map(|j| folded.fold(j).iter())
        .filter(|o| o.a == 1)
        .map(|o| o.y.as_real().unwrap()[0])
        .collect();
    let loss = Square(vec![0.0]);
    let got = doublegen_risk(&loss, input(&folded, &nuis), RiskSpec::new(Method::Naive, 1, 1), &RngStream::new(101, 0)).unwrap();
    let expected = treated.iter().map(|y| y * y).sum::<f64>() / treated.len() as f64;
    assert!((got - expected).abs() < 1e-12 * expected);
}
