use doublegen::nn::{Adam, AdamConfig, Mlp, TimeField, TimeNet};
use doublegen::RngStream;
use proptest::prelude::*;
use rand::Rng as _;

fn norm(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

fn rel_err(a: &[f64], b: &[f64]) -> f64 {
    let diff: Vec<f64> = a.iter().zip(b).map(|(x, y)| x - y).collect();
    norm(&diff) / norm(a).max(norm(b)).max(1e-12)
}

/// Central differences of `⟨c, net(x)⟩`.
fn numeric_grads(net: &Mlp, x: &[f64], c: &[f64], h: f64) -> (Vec<f64>, Vec<f64>) {
    let f = |net: &Mlp, x: &[f64]| net.forward(x).unwrap().iter().zip(c).map(|(o, w)| o * w).sum::<f64>();
    let mut p = net.clone();
    let gp = (0..net.num_params())
        .map(|i| {
            let orig = p.params()[i];
            p.params_mut()[i] = orig + h;
            let up = f(&p, x);
            p.params_mut()[i] = orig - h;
            let down = f(&p, x);
            p.params_mut()[i] = orig;
            (up - down) / (2.0 * h)
        })
        .collect();
    let mut xs = x.to_vec();
    let gx = (0..x.len())
        .map(|i| {
            let orig = xs[i];
            xs[i] = orig + h;
            let up = f(net, &xs);
            xs[i] = orig - h;
            let down = f(net, &xs);
            xs[i] = orig;
            (up - down) / (2.0 * h)
        })
        .collect();
    (gp, gx)
}

#[test]
fn analytic_gradients_match_central_differences() {
    let mut rng = RngStream::new(31, 0).rng();
    for case in 0..20 {
        let widths = [rng.gen_range(1..5), rng.gen_range(1..9), rng.gen_range(1..9), rng.gen_range(1..4)];
        let net = Mlp::init(widths, &mut rng).unwrap();
        let x: Vec<f64> = (0..widths[0]).map(|_| rng.gen_range(-2.0..2.0)).collect();
        let c: Vec<f64> = (0..widths[3]).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let (gp, gx) = net.backward(&x, &c).unwrap();
        let (np, nx) = numeric_grads(&net, &x, &c, 1e-5);
        assert!(rel_err(&gp, &np) <= 1e-5, "case {case} params: {}", rel_err(&gp, &np));
        assert!(rel_err(&gx, &nx) <= 1e-5, "case {case} input: {}", rel_err(&gx, &nx));
    }
}

#[test]
fn zero_network_outputs_zero() {
    let net = Mlp::zeros([3, 4, 4, 2]).unwrap();
    assert_eq!(net.forward(&[1.0, -2.0, 0.5]).unwrap(), vec![0.0, 0.0]);
    assert!(net.forward(&[1.0]).is_err());
}

#[test]
fn adam_first_step_matches_hand_update() {
    let cfg = AdamConfig {
        lr: 0.1,
        beta1: 0.9,
        beta2: 0.999,
        eps: 1e-8,
    };
    let mut opt = Adam::new(2, cfg).unwrap();
    let mut p = vec![1.0, -1.0];
    let g = [0.5, -2.0];
    opt.step(&mut p, &g).unwrap();
    // bias-corrected moments equal g and g² after one step
    for i in 0..2 {
        let expected = [1.0, -1.0][i] - 0.1 * g[i] / (g[i].abs() + 1e-8);
        assert!((p[i] - expected).abs() < 1e-12);
    }
    // second step by hand
    let g2 = [0.1, 0.3];
    let m: Vec<f64> = (0..2).map(|i| 0.9 * 0.1 * g[i] + 0.1 * g2[i]).collect();
    let v: Vec<f64> = (0..2).map(|i| 0.999 * 0.001 * g[i] * g[i] + 0.001 * g2[i] * g2[i]).collect();
    let before = p.clone();
    opt.step(&mut p, &g2).unwrap();
    for i in 0..2 {
        let mh = m[i] / (1.0 - 0.9f64.powi(2));
        let vh = v[i] / (1.0 - 0.999f64.powi(2));
        assert!((p[i] - (before[i] - 0.1 * mh / (vh.sqrt() + 1e-8))).abs() < 1e-12);
    }
    assert_eq!(opt.step_count(), 2);
}

#[test]
fn adam_rejects_bad_input() {
    assert!(Adam::new(
        1,
        AdamConfig {
            lr: 0.0,
            ..AdamConfig::default()
        }
    )
    .is_err());
    let mut opt = Adam::new(1, AdamConfig::default()).unwrap();
    assert!(opt.step(&mut [0.0], &[f64::NAN]).is_err());
    assert!(opt.step(&mut [0.0, 1.0], &[0.0, 0.0]).is_err());
}

#[test]
fn adam_minimises_a_quadratic() {
    let mut opt = Adam::new(
        3,
        AdamConfig {
            lr: 0.05,
            ..AdamConfig::default()
        },
    )
    .unwrap();
    let target = [1.0, -2.0, 0.5];
    let mut p = vec![0.0; 3];
    for _ in 0..2000 {
        let g: Vec<f64> = p.iter().zip(&target).map(|(a, b)| 2.0 * (a - b)).collect();
        opt.step(&mut p, &g).unwrap();
    }
    assert!(rel_err(&p, &target) < 1e-3);
}

#[test]
fn time_net_field_matches_direct_forward() {
    let net = TimeNet::new(2, 5, &mut RngStream::new(2, 0).rng()).unwrap();
    let (y, t) = ([0.3, -0.7], 0.25);
    let phase = 2.0 * std::f64::consts::PI * t;
    let direct = net.net.forward(&[y[0], y[1], t, phase.sin(), phase.cos()]).unwrap();
    let mut out = [0.0; 2];
    TimeField::eval(&net, &y, t, &mut out);
    assert_eq!(out.to_vec(), direct);
}

#[test]
fn time_net_accumulate_matches_backward() {
    let net = TimeNet::new(1, 6, &mut RngStream::new(3, 0).rng()).unwrap();
    let (y, t) = ([0.4], 0.6);
    let phase = 2.0 * std::f64::consts::PI * t;
    let (expected, _) = net.net.backward(&[y[0], t, phase.sin(), phase.cos()], &[1.5]).unwrap();
    let mut grad = vec![0.0; net.net.num_params()];
    net.accumulate(&y, t, |_| vec![1.5], &mut grad);
    assert!(rel_err(&grad, &expected) < 1e-14);
}

proptest! {
    #[test]
    fn json_round_trip_is_exact(seed in any::<u64>(), h in 1usize..6) {
        let net = Mlp::init([2, h, h, 3], &mut RngStream::new(seed, 0).rng()).unwrap();
        let text = serde_json::to_string(&net.to_json()).unwrap();
        let back = Mlp::from_json(&serde_json::from_str(&text).unwrap()).unwrap();
        prop_assert_eq!(back, net);
    }

    #[test]
    fn forward_is_deterministic_and_finite(seed in any::<u64>(), x in prop::collection::vec(-50.0f64..50.0, 3)) {
        let net = Mlp::init([3, 7, 5, 2], &mut RngStream::new(seed, 0).rng()).unwrap();
        let a = net.forward(&x).unwrap();
        prop_assert!(a.iter().all(|v| v.is_finite()));
        prop_assert_eq!(a, net.forward(&x).unwrap());
    }
}
