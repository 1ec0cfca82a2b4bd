//! A fixed two-hidden-layer tanh network with hand-written reverse-mode
//! gradients, plus an Adam optimizer over flat parameter vectors.
//!
//! Parameters live in one flat buffer. For each layer the weight matrix is
//! stored row-major with shape `(out, in)`, immediately followed by the bias.

use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::Rng;

#[derive(Debug, Clone, PartialEq)]
pub struct Mlp {
    widths: [usize; 4],
    params: Vec<f64>,
}

/// Intermediate activations from one forward pass, reused by backward.
#[derive(Debug, Clone, Default)]
pub struct Cache {
    input: Vec<f64>,
    h1: Vec<f64>,
    h2: Vec<f64>,
    out: Vec<f64>,
}

impl Cache {
    pub fn output(&self) -> &[f64] {
        &self.out
    }
}

/// JSON form: `{widths, weights (row-major per layer), biases}`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MlpJson {
    pub widths: Vec<usize>,
    pub weights: Vec<Vec<f64>>,
    pub biases: Vec<Vec<f64>>,
}

fn layer_sizes(widths: &[usize; 4]) -> [(usize, usize); 3] {
    [(widths[1], widths[0]), (widths[2], widths[1]), (widths[3], widths[2])]
}

fn param_count(widths: &[usize; 4]) -> usize {
    layer_sizes(widths).iter().map(|&(o, i)| o * i + o).sum()
}

impl Mlp {
    /// All-zero network with layer widths `[input, hidden, hidden, output]`.
    pub fn zeros(widths: [usize; 4]) -> Result<Self> {
        if widths.contains(&0) {
            return Err(Error::InvalidArgument(format!("layer widths must be positive, got {widths:?}")));
        }
        Ok(Self {
            widths,
            params: vec![0.0; param_count(&widths)],
        })
    }

    /// Glorot-uniform weights, zero biases.
    pub fn init(widths: [usize; 4], rng: &mut Rng) -> Result<Self> {
        let mut net = Self::zeros(widths)?;
        let mut offset = 0;
        for (out, inp) in layer_sizes(&widths) {
            let limit = (6.0 / (out + inp) as f64).sqrt();
            for w in &mut net.params[offset..offset + out * inp] {
                *w = rng.gen_range(-limit..limit);
            }
            offset += out * inp + out;
        }
        Ok(net)
    }

    pub fn widths(&self) -> [usize; 4] {
        self.widths
    }

    pub fn input_dim(&self) -> usize {
        self.widths[0]
    }

    pub fn output_dim(&self) -> usize {
        self.widths[3]
    }

    pub fn num_params(&self) -> usize {
        self.params.len()
    }

    pub fn params(&self) -> &[f64] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [f64] {
        &mut self.params
    }

    /// (weight, bias) offsets of layer `l` in the flat buffer.
    fn offsets(&self, l: usize) -> (usize, usize) {
        let sizes = layer_sizes(&self.widths);
        let start: usize = sizes[..l].iter().map(|&(o, i)| o * i + o).sum();
        let (o, i) = sizes[l];
        (start, start + o * i)
    }

    pub fn forward(&self, input: &[f64]) -> Result<Vec<f64>> {
        if input.len() != self.input_dim() {
            return Err(Error::DimensionMismatch {
                expected: self.input_dim(),
                got: input.len(),
            });
        }
        let mut cache = Cache::default();
        self.forward_cached(input, &mut cache);
        Ok(cache.out)
    }

    /// Forward pass that keeps activations for [`Mlp::accumulate_backward`].
    /// Panics if `input` has the wrong length.
    pub fn forward_cached(&self, input: &[f64], cache: &mut Cache) {
        assert_eq!(input.len(), self.input_dim(), "input dimension");
        cache.input.clear();
        cache.input.extend_from_slice(input);
        let [_, h1, h2, q] = self.widths;
        dense(&self.params, self.offsets(0), input, h1, &mut cache.h1);
        cache.h1.iter_mut().for_each(|v| *v = v.tanh());
        dense(&self.params, self.offsets(1), &cache.h1, h2, &mut cache.h2);
        cache.h2.iter_mut().for_each(|v| *v = v.tanh());
        dense(&self.params, self.offsets(2), &cache.h2, q, &mut cache.out);
    }

    /// Exact gradients of `⟨cotangent, forward(input)⟩` with respect to the
    /// parameters and the input.
    pub fn backward(&self, input: &[f64], cotangent: &[f64]) -> Result<(Vec<f64>, Vec<f64>)> {
        if input.len() != self.input_dim() {
            return Err(Error::DimensionMismatch {
                expected: self.input_dim(),
                got: input.len(),
            });
        }
        if cotangent.len() != self.output_dim() {
            return Err(Error::DimensionMismatch {
                expected: self.output_dim(),
                got: cotangent.len(),
            });
        }
        let mut cache = Cache::default();
        self.forward_cached(input, &mut cache);
        let mut grad = vec![0.0; self.num_params()];
        let mut input_grad = vec![0.0; self.input_dim()];
        self.accumulate_backward(&cache, cotangent, &mut grad, Some(&mut input_grad));
        Ok((grad, input_grad))
    }

    /// Adds the parameter gradient for `cotangent` into `grad`; optionally
    /// writes the input gradient. `cache` must come from `forward_cached`.
    pub fn accumulate_backward(&self, cache: &Cache, cotangent: &[f64], grad: &mut [f64], input_grad: Option<&mut [f64]>) {
        assert_eq!(cotangent.len(), self.output_dim(), "cotangent dimension");
        assert_eq!(grad.len(), self.num_params(), "gradient buffer");
        let mut g2 = back_dense(&self.params, self.offsets(2), &cache.h2, cotangent, grad);
        for (g, h) in g2.iter_mut().zip(&cache.h2) {
            *g *= 1.0 - h * h;
        }
        let mut g1 = back_dense(&self.params, self.offsets(1), &cache.h1, &g2, grad);
        for (g, h) in g1.iter_mut().zip(&cache.h1) {
            *g *= 1.0 - h * h;
        }
        let gx = back_dense(&self.params, self.offsets(0), &cache.input, &g1, grad);
        if let Some(dst) = input_grad {
            dst.copy_from_slice(&gx);
        }
    }

    pub fn to_json(&self) -> MlpJson {
        let mut weights = Vec::with_capacity(3);
        let mut biases = Vec::with_capacity(3);
        for (l, (o, i)) in layer_sizes(&self.widths).into_iter().enumerate() {
            let (w, b) = self.offsets(l);
            weights.push(self.params[w..w + o * i].to_vec());
            biases.push(self.params[b..b + o].to_vec());
        }
        MlpJson {
            widths: self.widths.to_vec(),
            weights,
            biases,
        }
    }

    pub fn from_json(json: &MlpJson) -> Result<Self> {
        let widths: [usize; 4] = json
            .widths
            .as_slice()
            .try_into()
            .map_err(|_| Error::Parse(format!("expected 4 layer widths, got {}", json.widths.len())))?;
        let mut net = Self::zeros(widths)?;
        if json.weights.len() != 3 || json.biases.len() != 3 {
            return Err(Error::Parse("expected 3 weight matrices and 3 bias vectors".into()));
        }
        for (l, (o, i)) in layer_sizes(&widths).into_iter().enumerate() {
            let (w, b) = net.offsets(l);
            if json.weights[l].len() != o * i || json.biases[l].len() != o {
                return Err(Error::Parse(format!("layer {l} has the wrong shape")));
            }
            net.params[w..w + o * i].copy_from_slice(&json.weights[l]);
            net.params[b..b + o].copy_from_slice(&json.biases[l]);
        }
        if net.params.iter().any(|p| !p.is_finite()) {
            return Err(Error::Parse("non-finite parameter".into()));
        }
        Ok(net)
    }
}

fn dense(params: &[f64], (w, b): (usize, usize), input: &[f64], out_dim: usize, out: &mut Vec<f64>) {
    let n_in = input.len();
    out.clear();
    out.extend((0..out_dim).map(|r| {
        let row = &params[w + r * n_in..w + (r + 1) * n_in];
        params[b + r] + row.iter().zip(input).map(|(a, x)| a * x).sum::<f64>()
    }));
}

/// Accumulates weight/bias gradients of one affine layer and returns the
/// gradient with respect to its input.
fn back_dense(params: &[f64], (w, b): (usize, usize), input: &[f64], g_out: &[f64], grad: &mut [f64]) -> Vec<f64> {
    let n_in = input.len();
    let mut g_in = vec![0.0; n_in];
    for (r, &g) in g_out.iter().enumerate() {
        if g == 0.0 {
            continue;
        }
        grad[b + r] += g;
        let row = w + r * n_in;
        for c in 0..n_in {
            grad[row + c] += g * input[c];
            g_in[c] += g * params[row + c];
        }
    }
    g_in
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// Adam moment accumulators for one parameter vector.
#[derive(Debug, Clone)]
pub struct Adam {
    pub config: AdamConfig,
    step: u64,
    m: Vec<f64>,
    v: Vec<f64>,
}

impl Adam {
    pub fn new(num_params: usize, config: AdamConfig) -> Result<Self> {
        if !(config.lr > 0.0) {
            return Err(Error::InvalidArgument(format!("learning rate must be positive, got {}", config.lr)));
        }
        Ok(Self {
            config,
            step: 0,
            m: vec![0.0; num_params],
            v: vec![0.0; num_params],
        })
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    pub fn step(&mut self, params: &mut [f64], grads: &[f64]) -> Result<()> {
        if params.len() != self.m.len() || grads.len() != self.m.len() {
            return Err(Error::DimensionMismatch {
                expected: self.m.len(),
                got: grads.len(),
            });
        }
        if grads.iter().any(|g| !g.is_finite()) {
            return Err(Error::Diverged("non-finite gradient".into()));
        }
        let AdamConfig { lr, beta1, beta2, eps } = self.config;
        self.step += 1;
        let c1 = 1.0 - beta1.powi(self.step as i32);
        let c2 = 1.0 - beta2.powi(self.step as i32);
        for i in 0..params.len() {
            let g = grads[i];
            self.m[i] = beta1 * self.m[i] + (1.0 - beta1) * g;
            self.v[i] = beta2 * self.v[i] + (1.0 - beta2) * g * g;
            let m_hat = self.m[i] / c1;
            let v_hat = self.v[i] / c2;
            params[i] -= lr * m_hat / (v_hat.sqrt() + eps);
        }
        Ok(())
    }
}

/// Appends the time embedding `(t, sin 2πt, cos 2πt)` to `y`.
pub fn time_features(y: &[f64], t: f64, out: &mut Vec<f64>) {
    let phase = 2.0 * std::f64::consts::PI * t;
    out.clear();
    out.extend_from_slice(y);
    out.extend_from_slice(&[t, phase.sin(), phase.cos()]);
}

/// An [`Mlp`] mapping `(y, t) ∈ ℝ^d × ℝ` to `ℝ^d` through the time embedding.
#[derive(Debug, Clone, PartialEq)]
pub struct TimeNet {
    pub net: Mlp,
}

impl TimeNet {
    pub fn new(dim: usize, hidden: usize, rng: &mut Rng) -> Result<Self> {
        Ok(Self {
            net: Mlp::init([dim + 3, hidden, hidden, dim], rng)?,
        })
    }

    pub fn from_mlp(net: Mlp) -> Result<Self> {
        if net.input_dim() != net.output_dim() + 3 {
            return Err(Error::InvalidArgument(format!(
                "time-conditioned net needs input width = output width + 3, got {:?}",
                net.widths()
            )));
        }
        Ok(Self { net })
    }

    pub fn dim(&self) -> usize {
        self.net.output_dim()
    }

    pub fn eval(&self, y: &[f64], t: f64, cache: &mut Cache, features: &mut Vec<f64>) {
        time_features(y, t, features);
        self.net.forward_cached(features, cache);
    }
}

/// A map `(y, t) ↦ ℝ^d`: a flow velocity field or a diffusion score.
pub trait TimeField: Sync {
    fn dim(&self) -> usize;
    fn eval(&self, y: &[f64], t: f64, out: &mut [f64]);
}

thread_local! {
    static SCRATCH: std::cell::RefCell<(Cache, Vec<f64>)> = std::cell::RefCell::new((Cache::default(), Vec::new()));
}

impl TimeField for TimeNet {
    fn dim(&self) -> usize {
        self.net.output_dim()
    }

    fn eval(&self, y: &[f64], t: f64, out: &mut [f64]) {
        SCRATCH.with(|s| {
            let (cache, features) = &mut *s.borrow_mut();
            TimeNet::eval(self, y, t, cache, features);
            out.copy_from_slice(cache.output());
        });
    }
}

impl TimeNet {
    /// Adds `∂⟨cotangent, net(y, t)⟩/∂params` into `grad` and returns the
    /// network output at `(y, t)`.
    pub fn accumulate(&self, y: &[f64], t: f64, cotangent: impl FnOnce(&[f64]) -> Vec<f64>, grad: &mut [f64]) -> Vec<f64> {
        SCRATCH.with(|s| {
            let (cache, features) = &mut *s.borrow_mut();
            TimeNet::eval(self, y, t, cache, features);
            let out = cache.output().to_vec();
            let cot = cotangent(&out);
            self.net.accumulate_backward(cache, &cot, grad, None);
            out
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::RngStream;

    #[test]
    fn zero_net_gives_zero() {
        let net = Mlp::zeros([3, 4, 4, 2]).unwrap();
        assert_eq!(net.forward(&[1.0, -2.0, 3.0]).unwrap(), vec![0.0, 0.0]);
    }

    #[test]
    fn output_bias_is_constant() {
        let mut net = Mlp::zeros([1, 1, 1, 1]).unwrap();
        let n = net.num_params();
        net.params_mut()[n - 1] = 2.5;
        for x in [-3.0, 0.0, 7.0] {
            assert_eq!(net.forward(&[x]).unwrap(), vec![2.5]);
        }
    }

    #[test]
    fn forward_is_deterministic_and_checks_shape() {
        let net = Mlp::init([2, 8, 8, 1], &mut RngStream::new(1, 0).rng()).unwrap();
        assert_eq!(net.forward(&[0.3, 0.1]).unwrap(), net.forward(&[0.3, 0.1]).unwrap());
        assert!(matches!(net.forward(&[0.3]), Err(Error::DimensionMismatch { .. })));
        assert!(net.backward(&[0.3, 0.1], &[1.0, 2.0]).is_err());
    }

    #[test]
    fn zero_cotangent_zero_gradient() {
        let net = Mlp::init([2, 5, 5, 2], &mut RngStream::new(2, 0).rng()).unwrap();
        let (g, gx) = net.backward(&[0.5, -0.5], &[0.0, 0.0]).unwrap();
        assert!(g.iter().all(|&v| v == 0.0));
        assert!(gx.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn output_bias_gradient_is_cotangent() {
        let net = Mlp::init([1, 1, 1, 1], &mut RngStream::new(3, 0).rng()).unwrap();
        let (g, _) = net.backward(&[0.01], &[0.7]).unwrap();
        assert_eq!(*g.last().unwrap(), 0.7);
    }

    #[test]
    fn json_round_trip() {
        let net = Mlp::init([4, 3, 3, 1], &mut RngStream::new(4, 0).rng()).unwrap();
        let back = Mlp::from_json(&net.to_json()).unwrap();
        assert_eq!(back, net);
        let mut bad = net.to_json();
        bad.weights[1].pop();
        assert!(Mlp::from_json(&bad).is_err());
    }

    #[test]
    fn adam_zero_gradient_keeps_params() {
        let mut p = vec![1.0, -2.0];
        let mut opt = Adam::new(2, AdamConfig::default()).unwrap();
        for _ in 0..100 {
            opt.step(&mut p, &[0.0, 0.0]).unwrap();
        }
        assert_eq!(p, vec![1.0, -2.0]);
        assert_eq!(opt.step_count(), 100);
    }

    #[test]
    fn adam_moves_against_gradient() {
        let mut p = vec![0.0, 0.0];
        let mut opt = Adam::new(2, AdamConfig::default()).unwrap();
        opt.step(&mut p, &[3.0, -0.5]).unwrap();
        assert!(p[0] < 0.0 && p[1] > 0.0);
    }

    #[test]
    fn adam_rejects_nan_and_bad_lr() {
        let mut opt = Adam::new(1, AdamConfig::default()).unwrap();
        let err = opt.step(&mut [0.0], &[f64::NAN]).unwrap_err();
        assert!(err.to_string().starts_with("diverged"));
        assert!(Adam::new(1, AdamConfig { lr: 0.0, ..Default::default() }).is_err());
    }

    #[test]
    fn adam_is_deterministic() {
        let run = || {
            let mut p = vec![0.5; 3];
            let mut opt = Adam::new(3, AdamConfig::default()).unwrap();
            for k in 0..50 {
                let g: Vec<f64> = p.iter().map(|v| 2.0 * v + k as f64 * 0.01).collect();
                opt.step(&mut p, &g).unwrap();
            }
            p
        };
        assert_eq!(run(), run());
    }
}
