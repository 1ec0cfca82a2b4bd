use doublegen::diffusion::{diffusion_sample, dsm_loss, forward_noise, GaussianScore, NoiseSchedule};
use doublegen::flow::ConstantField;
use doublegen::nn::{TimeField, TimeNet};
use doublegen::RngStream;
use rand_distr::{Distribution, Normal};

fn mean_se(v: &[f64]) -> (f64, f64) {
    let n = v.len() as f64;
    let mean = v.iter().sum::<f64>() / n;
    let var = v.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (mean, (var / n).sqrt())
}

#[test]
fn forward_noise_has_closed_form_moments() {
    let sched = NoiseSchedule::new(1.5, 1e-3, 3.0).unwrap();
    let mut rng = RngStream::new(41, 0).rng();
    let y0 = 2.0;
    for &t in &[0.05, 0.5, 2.0] {
        let (mu, sigma) = sched.at(t).unwrap();
        let draws: Vec<f64> = (0..50_000).map(|_| forward_noise(&sched, &[y0], t, &mut rng).unwrap()[0]).collect();
        let (mean, se) = mean_se(&draws);
        assert!((mean - mu * y0).abs() < 4.0 * se, "t={t}: mean {mean} vs {}", mu * y0);
        let sq: Vec<f64> = draws.iter().map(|x| (x - mu * y0).powi(2)).collect();
        let (var, se_var) = mean_se(&sq);
        assert!((var - sigma * sigma).abs() < 4.0 * se_var, "t={t}: var {var} vs {}", sigma * sigma);
    }
    assert!(forward_noise(&sched, &[0.0], 3.5, &mut rng).is_err());
}

#[test]
fn zero_score_loss_matches_closed_form() {
    let (beta, lo, hi) = (1.0, 0.05, 3.0);
    let sched = NoiseSchedule::new(beta, lo, hi).unwrap();
    let zero = ConstantField(vec![0.0]);
    let mut rng = RngStream::new(42, 0).rng();
    // E‖ε/σ_t‖² = 1/σ_t², integrated over [t_min, t_max].
    let g = |t: f64| ((2.0 * beta * t).exp() - 1.0).ln();
    let expected = (g(hi) - g(lo)) / (2.0 * beta);
    let draws: Vec<f64> = (0..200_000).map(|_| dsm_loss(&zero, &sched, &[0.7], &mut rng, 1).unwrap()).collect();
    let (mean, se) = mean_se(&draws);
    assert!((mean - expected).abs() < 3.0 * se, "{mean} vs {expected} (se {se})");
}

#[test]
fn analytic_score_sampler_recovers_gaussian() {
    let (m, s) = (1.0, 0.5);
    let sched = NoiseSchedule::default();
    let score = GaussianScore {
        mean: vec![m],
        var: vec![s * s],
        schedule: sched,
    };
    let mut rng = RngStream::new(43, 0).rng();
    let out: Vec<f64> = (0..20_000).map(|_| diffusion_sample(&score, &sched, &mut rng, 500).unwrap()[0]).collect();
    let (mean, _) = mean_se(&out);
    let var = out.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (out.len() - 1) as f64;
    assert!((mean - m).abs() < 0.05, "mean {mean}");
    assert!((var - s * s).abs() < 0.05, "var {var}");
}

#[test]
fn true_score_has_least_expected_loss() {
    let (m, s) = (0.5, 0.8);
    let sched = NoiseSchedule::new(1.0, 0.01, 3.0).unwrap();
    let truth = GaussianScore {
        mean: vec![m],
        var: vec![s * s],
        schedule: sched,
    };
    let law = Normal::new(m, s).unwrap();
    for case in 0..5u64 {
        let net = TimeNet::new(1, 8, &mut RngStream::new(44, case).rng()).unwrap();
        let mut data = RngStream::new(45, case).rng();
        let stream = RngStream::new(46, case);
        // Common noise draws for both fields.
        let mut excess = Vec::new();
        for i in 0..20_000u64 {
            let y = [law.sample(&mut data)];
            let a = dsm_loss(&net, &sched, &y, &mut stream.derive(i).rng(), 1).unwrap();
            let b = dsm_loss(&truth, &sched, &y, &mut stream.derive(i).rng(), 1).unwrap();
            excess.push(a - b);
        }
        let (mean, se) = mean_se(&excess);
        assert!(mean > -3.0 * se, "case {case}: excess {mean} (se {se})");
    }
}

#[test]
fn standard_normal_is_stationary() {
    let sched = NoiseSchedule::default();
    let truth = GaussianScore {
        mean: vec![0.0, 0.0],
        var: vec![1.0, 1.0],
        schedule: sched,
    };
    let mut out = [0.0; 2];
    for &t in &[0.01, 0.5, 2.5] {
        truth.eval(&[0.3, -1.2], t, &mut out);
        assert!((out[0] + 0.3).abs() < 1e-12 && (out[1] - 1.2).abs() < 1e-12);
    }
    let mut rng = RngStream::new(47, 0).rng();
    let draws: Vec<f64> = (0..20_000).flat_map(|_| diffusion_sample(&truth, &sched, &mut rng, 200).unwrap()).collect();
    let (mean, se) = mean_se(&draws);
    assert!(mean.abs() < 4.0 * se, "mean {mean}");
    let sq: Vec<f64> = draws.iter().map(|x| x * x).collect();
    let (second, se2) = mean_se(&sq);
    assert!((second - 1.0).abs() < 4.0 * se2 + 0.01, "second moment {second}");
}

#[test]
fn invalid_inputs_are_rejected() {
    assert!(NoiseSchedule::new(1.0, 0.0, 1.0).is_err());
    assert!(NoiseSchedule::new(0.0, 0.0, 3.0).is_err());
    let sched = NoiseSchedule::new(1.0, 0.0, 3.0).unwrap();
    let zero = ConstantField(vec![0.0]);
    let mut rng = RngStream::new(48, 0).rng();
    assert!(dsm_loss(&zero, &sched, &[0.0], &mut rng, 1).is_err());
    let ok = NoiseSchedule::default();
    assert!(dsm_loss(&zero, &ok, &[0.0, 1.0], &mut rng, 1).is_err());
    assert!(dsm_loss(&zero, &ok, &[0.0], &mut rng, 0).is_err());
    assert!(diffusion_sample(&zero, &ok, &mut rng, 0).is_err());
}
