//! End-to-end experiment plumbing: configuration, nuisance scenarios,
//! training a backend against a chosen risk, sampling and evaluation.
//!
//! Everything here is a pure function of its inputs and seeds. Parallel
//! orchestration is left to callers.

use std::collections::BTreeMap;
use std::sync::Arc;

use rand::Rng as _;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::autoreg::{ancestral_sample, exact_pmf, fit_tabular, NextTokenModel, TableJson, TabularFitConfig, TokenRisk};
use crate::data::{partition_folds, FoldedDataset, Observation, Outcome};
use crate::diffusion::{diffusion_sample, DsmLoss, NoiseSchedule};
use crate::error::{Error, Result};
use crate::eval::{default_edges, kl_categorical, tv_binned, w1_auto, MetricReport};
use crate::flow::{flow_sample, FlowLoss};
use crate::nn::{Adam, AdamConfig, Mlp, MlpJson, TimeNet};
use crate::nuisance::{fit_misspecified_outcome_sampler, fit_outcome_sampler, fit_propensity, FeatureSubset, NuisancePair, PropensityConfig, DEFAULT_CLIP};
use crate::risk::{Method, PreparedRisk, RiskInput, RiskSpec};
use crate::rng::{RngStream, STREAM_COUNTERFACTUAL, STREAM_DATA, STREAM_EVAL, STREAM_FOLDS, STREAM_SAMPLE, STREAM_TRAIN};
use crate::synth::{oracle_nuisances, Dgp, DgpConfig};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Backend {
    Flow,
    Diffusion,
    Autoreg,
}

impl Backend {
    pub fn name(&self) -> &'static str {
        match self {
            Backend::Flow => "flow",
            Backend::Diffusion => "diffusion",
            Backend::Autoreg => "autoreg",
        }
    }
}

impl std::str::FromStr for Backend {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        [Backend::Flow, Backend::Diffusion, Backend::Autoreg]
            .into_iter()
            .find(|b| b.name() == s)
            .ok_or_else(|| Error::InvalidArgument(format!("unknown backend {s:?}")))
    }
}

/// Which nuisances are deliberately misspecified.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Scenario {
    BothRight,
    OutcomeWrong,
    PropensityWrong,
    BothWrong,
}

impl Scenario {
    pub const ALL: [Scenario; 4] = [Scenario::BothRight, Scenario::OutcomeWrong, Scenario::PropensityWrong, Scenario::BothWrong];

    pub fn name(&self) -> &'static str {
        match self {
            Scenario::BothRight => "both_right",
            Scenario::OutcomeWrong => "outcome_wrong",
            Scenario::PropensityWrong => "propensity_wrong",
            Scenario::BothWrong => "both_wrong",
        }
    }

    pub fn outcome_wrong(&self) -> bool {
        matches!(self, Scenario::OutcomeWrong | Scenario::BothWrong)
    }

    pub fn propensity_wrong(&self) -> bool {
        matches!(self, Scenario::PropensityWrong | Scenario::BothWrong)
    }
}

impl std::fmt::Display for Scenario {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

impl std::str::FromStr for Scenario {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Scenario::ALL
            .into_iter()
            .find(|c| c.name() == s)
            .ok_or_else(|| Error::InvalidArgument(format!("unknown scenario {s:?}")))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct NuisanceSettings {
    pub knn_k: usize,
    /// Logistic fit settings; `drop_features` is overridden per scenario.
    pub propensity: PropensityConfig,
    /// Features ignored by the propensity fit when it is meant to be wrong.
    pub propensity_drop: Vec<usize>,
    /// Treated subset the outcome sampler sees when it is meant to be wrong.
    pub outcome_subset: FeatureSubset,
    /// Use the true nuisances instead of fitted ones for correctly specified components.
    pub oracle_when_right: bool,
}

impl Default for NuisanceSettings {
    fn default() -> Self {
        Self {
            knn_k: 50,
            propensity: PropensityConfig {
                clip: DEFAULT_CLIP,
                ..PropensityConfig::default()
            },
            propensity_drop: vec![0],
            outcome_subset: FeatureSubset { feature: 0, threshold: 0.5 },
            oracle_when_right: false,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainSettings {
    pub steps: usize,
    pub batch: usize,
    pub adam: AdamConfig,
    /// The learning rate decays linearly to `adam.lr · lr_final_fraction`.
    pub lr_final_fraction: f64,
    pub hidden: usize,
    /// Π-draws per observation in the risk.
    pub mc_u: usize,
    /// Monte Carlo draws inside one flow or score matching loss evaluation.
    pub mc_loss: usize,
    pub tabular: TabularFitConfig,
    /// Steps per logged epoch.
    pub log_every: usize,
}

impl Default for TrainSettings {
    fn default() -> Self {
        Self {
            steps: 4000,
            batch: 64,
            adam: AdamConfig {
                lr: 1e-2,
                ..AdamConfig::default()
            },
            lr_final_fraction: 0.01,
            hidden: 32,
            mc_u: 8,
            mc_loss: 1,
            tabular: TabularFitConfig::default(),
            log_every: 200,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EvalSettings {
    /// Generated and reference sample size for sample-based metrics.
    pub samples: usize,
    pub bins: usize,
    pub projections: usize,
}

impl Default for EvalSettings {
    fn default() -> Self {
        Self {
            samples: 10_000,
            bins: 50,
            projections: 64,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SamplerSettings {
    pub flow_steps: usize,
    pub diffusion_steps: usize,
    pub schedule: NoiseSchedule,
}

impl Default for SamplerSettings {
    fn default() -> Self {
        Self {
            flow_steps: 100,
            diffusion_steps: 200,
            schedule: NoiseSchedule::default(),
        }
    }
}

/// One JSON document describing a full experiment.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ExperimentConfig {
    pub dgp: DgpConfig,
    pub backend: Backend,
    pub methods: Vec<Method>,
    pub scenarios: Vec<Scenario>,
    /// Explicit (scenario, method) cells; overrides the full product when set.
    pub cells: Option<Vec<(Scenario, Method)>>,
    pub n: usize,
    pub seeds: Vec<u64>,
    pub nuisance: NuisanceSettings,
    pub train: TrainSettings,
    pub sampler: SamplerSettings,
    pub eval: EvalSettings,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            dgp: DgpConfig::default(),
            backend: Backend::Flow,
            methods: vec![Method::Naive, Method::PlugIn, Method::Ipw, Method::DoubleGen],
            scenarios: Scenario::ALL.to_vec(),
            cells: None,
            n: 20_000,
            seeds: (0..10).collect(),
            nuisance: NuisanceSettings::default(),
            train: TrainSettings::default(),
            sampler: SamplerSettings::default(),
            eval: EvalSettings::default(),
        }
    }
}

impl ExperimentConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: Self = serde_json::from_str(text)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::InvalidArgument(m.to_string()));
        if self.n == 0 {
            return bad("n must be at least 1");
        }
        if self.seeds.is_empty() {
            return bad("seeds must be non-empty");
        }
        if self.cells().is_empty() {
            return bad("the experiment grid is empty");
        }
        match (&self.dgp, self.backend) {
            (DgpConfig::Token(_), Backend::Autoreg) | (DgpConfig::Gauss(_), Backend::Flow | Backend::Diffusion) => {}
            _ => return bad("backend does not match the outcome type of the dgp"),
        }
        let t = &self.train;
        if !(0.0..=1.0).contains(&t.lr_final_fraction) {
            return bad("lr_final_fraction must lie in [0, 1]");
        }
        if t.mc_u == 0 || t.mc_loss == 0 || t.batch == 0 || t.hidden == 0 || t.log_every == 0 {
            return bad("mc_u, mc_loss, batch, hidden and log_every must be positive");
        }
        if self.nuisance.knn_k == 0 {
            return bad("knn_k must be positive");
        }
        if self.sampler.flow_steps == 0 || self.sampler.diffusion_steps == 0 {
            return bad("sampler steps must be positive");
        }
        if self.eval.samples == 0 || self.eval.bins == 0 || self.eval.projections == 0 {
            return bad("eval samples, bins and projections must be positive");
        }
        self.sampler.schedule.validate()?;
        Adam::new(0, t.adam)?;
        Dgp::new(self.dgp.clone())?;
        Ok(())
    }

    /// Grid cells in a fixed order (scenario-major).
    pub fn cells(&self) -> Vec<(Scenario, Method)> {
        let mut cells = match &self.cells {
            Some(c) => c.clone(),
            None => self.scenarios.iter().flat_map(|&s| self.methods.iter().map(move |&m| (s, m))).collect(),
        };
        cells.sort();
        cells.dedup();
        cells
    }

    pub fn dgp(&self) -> Result<Arc<Dgp>> {
        Ok(Arc::new(Dgp::new(self.dgp.clone())?))
    }
}

/// Observational and counterfactual samples for one seed.
#[derive(Debug, Clone, PartialEq)]
pub struct Simulated {
    pub observations: Vec<Observation>,
    pub counterfactual: Vec<Outcome>,
}

pub fn simulate(dgp: &Dgp, n: usize, seed: u64) -> Result<Simulated> {
    Ok(Simulated {
        observations: dgp.sample_observational(n, &mut RngStream::new(seed, STREAM_DATA).rng())?,
        counterfactual: dgp.sample_counterfactual(n, &mut RngStream::new(seed, STREAM_COUNTERFACTUAL).rng())?,
    })
}

pub fn fold(observations: &[Observation], seed: u64) -> Result<FoldedDataset> {
    partition_folds(observations, &RngStream::new(seed, STREAM_FOLDS))
}

/// Cross-fitted nuisances for one scenario; `pairs[j]` is fitted on fold `j`.
pub fn fit_nuisances(dgp: &Arc<Dgp>, folded: &FoldedDataset, scenario: Scenario, settings: &NuisanceSettings) -> Result<[NuisancePair; 2]> {
    let a_star = dgp.a_star();
    let oracle = if settings.oracle_when_right {
        Some(oracle_nuisances(dgp, settings.propensity.clip)?)
    } else {
        None
    };
    let fit = |j: usize| -> Result<NuisancePair> {
        let data = folded.fold(j);
        let propensity = match (&oracle, scenario.propensity_wrong()) {
            (Some(o), false) => o.propensity.clone(),
            (_, wrong) => {
                let cfg = PropensityConfig {
                    drop_features: if wrong { settings.propensity_drop.clone() } else { Vec::new() },
                    ..settings.propensity.clone()
                };
                fit_propensity(data, a_star, &cfg)?
            }
        };
        let outcome = match (&oracle, scenario.outcome_wrong()) {
            (Some(o), false) => o.outcome.clone(),
            (_, true) => fit_misspecified_outcome_sampler(data, a_star, settings.knn_k, settings.outcome_subset)?,
            (None, false) => fit_outcome_sampler(data, a_star, settings.knn_k)?,
        };
        Ok(NuisancePair { propensity, outcome })
    };
    Ok([fit(0)?, fit(1)?])
}

/// A trained hypothesis plus what its sampler `τ(θ)` needs.
#[derive(Debug, Clone, PartialEq)]
pub enum TrainedModel {
    Flow { net: TimeNet, steps: usize },
    Diffusion { net: TimeNet, schedule: NoiseSchedule, steps: usize },
    Autoreg { table: NextTokenModel },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "backend", rename_all = "lowercase")]
pub enum ModelJson {
    Flow { steps: usize, net: MlpJson },
    Diffusion { steps: usize, schedule: NoiseSchedule, net: MlpJson },
    Autoreg { table: TableJson },
}

impl TrainedModel {
    pub fn backend(&self) -> Backend {
        match self {
            TrainedModel::Flow { .. } => Backend::Flow,
            TrainedModel::Diffusion { .. } => Backend::Diffusion,
            TrainedModel::Autoreg { .. } => Backend::Autoreg,
        }
    }

    pub fn to_json(&self) -> ModelJson {
        match self {
            TrainedModel::Flow { net, steps } => ModelJson::Flow {
                steps: *steps,
                net: net.net.to_json(),
            },
            TrainedModel::Diffusion { net, schedule, steps } => ModelJson::Diffusion {
                steps: *steps,
                schedule: *schedule,
                net: net.net.to_json(),
            },
            TrainedModel::Autoreg { table } => ModelJson::Autoreg { table: table.to_json() },
        }
    }

    pub fn from_json(json: &ModelJson) -> Result<Self> {
        let steps_ok = |s: usize| {
            if s == 0 {
                Err(Error::InvalidArgument("sampler steps must be positive".into()))
            } else {
                Ok(s)
            }
        };
        Ok(match json {
            ModelJson::Flow { steps, net } => TrainedModel::Flow {
                net: TimeNet::from_mlp(Mlp::from_json(net)?)?,
                steps: steps_ok(*steps)?,
            },
            ModelJson::Diffusion { steps, schedule, net } => {
                schedule.validate()?;
                TrainedModel::Diffusion {
                    net: TimeNet::from_mlp(Mlp::from_json(net)?)?,
                    schedule: *schedule,
                    steps: steps_ok(*steps)?,
                }
            }
            ModelJson::Autoreg { table } => TrainedModel::Autoreg {
                table: NextTokenModel::from_json(table)?,
            },
        })
    }
}

/// Average sampled risk term over one logging epoch.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub epoch: usize,
    pub risk: f64,
}

/// Builds the selected risk for one cell. The oracle risk uses the
/// counterfactual sample and never touches nuisances.
pub fn prepare_risk<'a>(
    method: Method,
    folded: &'a FoldedDataset,
    nuisances: Option<&'a [NuisancePair; 2]>,
    counterfactual: &'a [Outcome],
    a_star: u32,
    mc_u: usize,
) -> Result<PreparedRisk> {
    let input = match method {
        Method::Oracle => RiskInput {
            counterfactual: Some(counterfactual),
            ..Default::default()
        },
        Method::Naive => RiskInput {
            folded: Some(folded),
            ..Default::default()
        },
        _ => RiskInput {
            folded: Some(folded),
            nuisances,
            counterfactual: None,
        },
    };
    PreparedRisk::new(input, RiskSpec::new(method, mc_u, a_star))
}

/// Minimises the prepared risk over the backend's hypothesis class.
pub fn train(
    backend: Backend,
    outcome_dim: usize,
    k_d: Option<(usize, usize)>,
    risk: &PreparedRisk,
    train: &TrainSettings,
    sampler: &SamplerSettings,
    seed: u64,
) -> Result<(TrainedModel, Vec<EpochLog>)> {
    let stream = RngStream::new(seed, STREAM_TRAIN);
    match backend {
        Backend::Autoreg => {
            let (k, d) = k_d.ok_or_else(|| Error::InvalidArgument("autoregressive backend needs token outcomes".into()))?;
            let terms = risk.terms(&stream);
            let token_risk = TokenRisk::from_terms(
                k,
                d,
                terms
                    .iter()
                    .map(|t| Ok::<_, Error>((t.weight, t.outcome.as_tokens()?)))
                    .collect::<Result<Vec<_>>>()?,
            )?;
            let table = fit_tabular(&token_risk, &train.tabular)?;
            let value = token_risk.value(&table)?;
            Ok((TrainedModel::Autoreg { table }, vec![EpochLog { epoch: 0, risk: value }]))
        }
        Backend::Flow | Backend::Diffusion => {
            let mut net = TimeNet::new(outcome_dim, train.hidden, &mut stream.derive(0).rng())?;
            let mut adam = Adam::new(net.net.num_params(), train.adam)?;
            let mut rng = stream.derive(1).rng();
            let mut grad = vec![0.0; net.net.num_params()];
            let mut log = Vec::new();
            let (mut acc, mut count) = (0.0, 0usize);
            let scale = 1.0 / train.batch as f64;
            for step in 0..train.steps {
                let progress = step as f64 / train.steps as f64;
                adam.config.lr = train.adam.lr * (1.0 - (1.0 - train.lr_final_fraction) * progress);
                grad.iter_mut().for_each(|g| *g = 0.0);
                for _ in 0..train.batch {
                    let v = match backend {
                        Backend::Flow => {
                            let loss = FlowLoss {
                                field: &net,
                                mc: train.mc_loss,
                            };
                            risk.sample_gradient_term(&loss, &mut rng, scale, &mut grad)?
                        }
                        _ => {
                            let loss = DsmLoss {
                                score: &net,
                                schedule: sampler.schedule,
                                mc: train.mc_loss,
                            };
                            risk.sample_gradient_term(&loss, &mut rng, scale, &mut grad)?
                        }
                    };
                    acc += v;
                    count += 1;
                }
                adam.step(net.net.params_mut(), &grad)
                    .map_err(|e| Error::Diverged(format!("training step {step}: {e}")))?;
                if (step + 1) % train.log_every == 0 || step + 1 == train.steps {
                    log.push(EpochLog {
                        epoch: log.len(),
                        risk: acc / count as f64,
                    });
                    (acc, count) = (0.0, 0);
                }
            }
            let model = match backend {
                Backend::Flow => TrainedModel::Flow {
                    net,
                    steps: sampler.flow_steps,
                },
                _ => TrainedModel::Diffusion {
                    net,
                    schedule: sampler.schedule,
                    steps: sampler.diffusion_steps,
                },
            };
            Ok((model, log))
        }
    }
}

/// `count` draws of `τ(θ)(U)`. Row `i` uses its own noise stream so
/// different models sampled with the same seed are row-coupled.
pub fn generate(model: &TrainedModel, count: usize, seed: u64) -> Result<Vec<Outcome>> {
    let stream = RngStream::new(seed, STREAM_SAMPLE);
    (0..count)
        .map(|i| {
            let mut rng = stream.derive(i as u64).rng();
            Ok(match model {
                TrainedModel::Flow { net, steps } => {
                    let u: Vec<f64> = (0..net.dim()).map(|_| StandardNormal.sample(&mut rng)).collect();
                    Outcome::Real(flow_sample(net, &u, *steps)?)
                }
                TrainedModel::Diffusion { net, schedule, steps } => Outcome::Real(diffusion_sample(net, schedule, &mut rng, *steps)?),
                TrainedModel::Autoreg { table } => {
                    let u: Vec<f64> = (0..table.d()).map(|_| rng.gen::<f64>()).collect();
                    Outcome::Tokens(ancestral_sample(table, &u)?)
                }
            })
        })
        .collect()
}

/// Headline metric name for a backend: the one summaries compare on.
pub fn primary_metric(backend: Backend) -> &'static str {
    match backend {
        Backend::Autoreg => "kl",
        _ => "w1",
    }
}

/// Divergences between `τ(θ)♯Π` and `ℙ`. Token models are compared exactly;
/// real-valued models through samples against fresh draws from `ℙ`.
pub fn evaluate(dgp: &Dgp, model: &TrainedModel, eval: &EvalSettings, seed: u64) -> Result<Vec<(String, f64)>> {
    match model {
        TrainedModel::Autoreg { table } => {
            let target = dgp
                .counterfactual_pmf()
                .ok_or_else(|| Error::InvalidArgument("token model needs a token dgp".into()))?;
            let pmf = exact_pmf(table)?;
            if pmf.support != target.support {
                return Err(Error::InvalidArgument("model and dgp token spaces differ".into()));
            }
            let kl = kl_categorical(&target.probs, &pmf.probs)?;
            let tv = 0.5 * target.probs.iter().zip(&pmf.probs).map(|(p, q)| (p - q).abs()).sum::<f64>();
            Ok(vec![("kl".into(), kl), ("tv".into(), tv)])
        }
        _ => {
            let reference = dgp.sample_counterfactual(eval.samples, &mut RngStream::new(seed, STREAM_EVAL).rng())?;
            let generated = generate(model, eval.samples, seed)?;
            sample_metrics(&generated, &reference, eval, seed)
        }
    }
}

/// W₁ (sliced above one dimension) and binned TV of the first coordinate.
pub fn sample_metrics(generated: &[Outcome], reference: &[Outcome], eval: &EvalSettings, seed: u64) -> Result<Vec<(String, f64)>> {
    let real = |s: &[Outcome]| s.iter().map(|o| o.as_real().map(<[f64]>::to_vec)).collect::<Result<Vec<_>>>();
    let (g, r) = (real(generated)?, real(reference)?);
    let w1 = w1_auto(&g, &r, eval.projections, &RngStream::new(seed, STREAM_EVAL).derive(1))?;
    let (g0, r0): (Vec<f64>, Vec<f64>) = (g.iter().map(|v| v[0]).collect(), r.iter().map(|v| v[0]).collect());
    let tv = tv_binned(&g0, &r0, &default_edges(&g0, &r0, eval.bins)?)?;
    Ok(vec![("w1".into(), w1), ("tv".into(), tv)])
}

/// Data, folds and fitted nuisances shared by every cell of one seed.
#[derive(Debug, Clone)]
pub struct SeedContext {
    pub seed: u64,
    pub data: Simulated,
    pub folded: FoldedDataset,
    /// Fitting failures are kept so that only the affected cells fail.
    pub nuisances: BTreeMap<Scenario, std::result::Result<[NuisancePair; 2], String>>,
}

impl SeedContext {
    pub fn new(cfg: &ExperimentConfig, dgp: &Arc<Dgp>, seed: u64) -> Result<Self> {
        Self::from_data(cfg, dgp, seed, simulate(dgp, cfg.n, seed)?)
    }

    /// Folds `data` and fits the nuisances every configured cell needs.
    pub fn from_data(cfg: &ExperimentConfig, dgp: &Arc<Dgp>, seed: u64, data: Simulated) -> Result<Self> {
        let folded = fold(&data.observations, seed)?;
        let mut nuisances = BTreeMap::new();
        for (scenario, method) in cfg.cells() {
            if method.needs_nuisances() && !nuisances.contains_key(&scenario) {
                nuisances.insert(scenario, fit_nuisances(dgp, &folded, scenario, &cfg.nuisance).map_err(|e| e.to_string()));
            }
        }
        Ok(Self { seed, data, folded, nuisances })
    }
}

/// Outcome of one (scenario, method, seed) cell.
#[derive(Debug, Clone, PartialEq)]
pub struct CellResult {
    pub scenario: Scenario,
    pub method: Method,
    pub seed: u64,
    pub outcome: std::result::Result<Vec<(String, f64)>, String>,
    pub log: Vec<EpochLog>,
}

/// Trains one cell's model from a prepared seed context.
pub fn train_cell(cfg: &ExperimentConfig, dgp: &Arc<Dgp>, ctx: &SeedContext, scenario: Scenario, method: Method) -> Result<(TrainedModel, Vec<EpochLog>)> {
    let nuisances = match method.needs_nuisances() {
        true => Some(
            ctx.nuisances
                .get(&scenario)
                .ok_or_else(|| Error::MissingInput(format!("no nuisances for {scenario}")))?
                .as_ref()
                .map_err(|e| Error::MissingInput(format!("nuisance fit failed: {e}")))?,
        ),
        false => None,
    };
    let risk = prepare_risk(method, &ctx.folded, nuisances, &ctx.data.counterfactual, dgp.a_star(), cfg.train.mc_u)?;
    let k_d = match &cfg.dgp {
        DgpConfig::Token(t) => Some((t.k, t.d)),
        DgpConfig::Gauss(_) => None,
    };
    train(cfg.backend, dgp.outcome_dim(), k_d, &risk, &cfg.train, &cfg.sampler, ctx.seed)
}

pub fn run_cell(cfg: &ExperimentConfig, dgp: &Arc<Dgp>, ctx: &SeedContext, scenario: Scenario, method: Method) -> CellResult {
    let (outcome, log) = match train_cell(cfg, dgp, ctx, scenario, method) {
        Ok((model, log)) => (evaluate(dgp, &model, &cfg.eval, ctx.seed).map_err(|e| format!("evaluate: {e}")), log),
        Err(e) => (Err(format!("train: {e}")), Vec::new()),
    };
    CellResult {
        scenario,
        method,
        seed: ctx.seed,
        outcome,
        log,
    }
}

/// Long-format rows for the successful cells, in cell order.
pub fn metric_rows(results: &[CellResult], n: usize) -> Vec<MetricReport> {
    let mut rows = Vec::new();
    for r in results {
        if let Ok(metrics) = &r.outcome {
            for (metric, value) in metrics {
                rows.push(MetricReport {
                    scenario: r.scenario.to_string(),
                    method: r.method.to_string(),
                    metric: metric.clone(),
                    value: *value,
                    seed: r.seed,
                    n,
                });
            }
        }
    }
    rows
}

/// One row of the pivoted summary.
#[derive(Debug, Clone, PartialEq)]
pub struct SummaryRow {
    pub scenario: String,
    pub method: String,
    /// Metric → (mean, standard error, seed count).
    pub metrics: BTreeMap<String, (f64, f64, usize)>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Summary {
    pub rows: Vec<SummaryRow>,
    /// Scenario → whether doublegen's mean primary metric is at most naive's.
    pub doublegen_le_naive: BTreeMap<String, bool>,
    /// Scenario → seeds where doublegen's primary metric is at most naive's, out of paired seeds.
    pub doublegen_wins: BTreeMap<String, (usize, usize)>,
    pub primary: String,
}

/// Groups rows by (scenario, method) and averages over seeds.
pub fn summarize(reports: &[MetricReport], primary: &str) -> Summary {
    let mut groups: BTreeMap<(String, String), BTreeMap<String, Vec<f64>>> = BTreeMap::new();
    let mut by_seed: BTreeMap<(String, u64), BTreeMap<String, f64>> = BTreeMap::new();
    for r in reports {
        groups
            .entry((r.scenario.clone(), r.method.clone()))
            .or_default()
            .entry(r.metric.clone())
            .or_default()
            .push(r.value);
        if r.metric == primary {
            by_seed.entry((r.scenario.clone(), r.seed)).or_default().insert(r.method.clone(), r.value);
        }
    }
    let rows: Vec<SummaryRow> = groups
        .into_iter()
        .map(|((scenario, method), metrics)| SummaryRow {
            scenario,
            method,
            metrics: metrics
                .into_iter()
                .map(|(m, v)| {
                    let (mean, se) = crate::stats::mean_and_se(&v);
                    (m, (mean, se, v.len()))
                })
                .collect(),
        })
        .collect();
    let mut doublegen_le_naive = BTreeMap::new();
    let mean_of = |scenario: &str, method: &str| {
        rows.iter()
            .find(|r| r.scenario == scenario && r.method == method)
            .and_then(|r| r.metrics.get(primary))
            .map(|m| m.0)
    };
    for scenario in rows.iter().map(|r| r.scenario.clone()).collect::<std::collections::BTreeSet<_>>() {
        if let (Some(dg), Some(nv)) = (mean_of(&scenario, "doublegen"), mean_of(&scenario, "naive")) {
            doublegen_le_naive.insert(scenario, dg <= nv);
        }
    }
    let mut doublegen_wins: BTreeMap<String, (usize, usize)> = BTreeMap::new();
    for ((scenario, _), methods) in &by_seed {
        if let (Some(dg), Some(nv)) = (methods.get("doublegen"), methods.get("naive")) {
            let e = doublegen_wins.entry(scenario.clone()).or_default();
            e.0 += usize::from(dg <= nv);
            e.1 += 1;
        }
    }
    Summary {
        rows,
        doublegen_le_naive,
        doublegen_wins,
        primary: primary.to_string(),
    }
}

impl Summary {
    /// Plain-text table: one row per (scenario, method), `mean ± se` per metric.
    pub fn render(&self) -> String {
        let metrics: std::collections::BTreeSet<&String> = self.rows.iter().flat_map(|r| r.metrics.keys()).collect();
        let mut out = format!("{:<18} {:<10}", "scenario", "method");
        for m in &metrics {
            out.push_str(&format!(" {:>22}", m));
        }
        out.push('\n');
        for r in &self.rows {
            let mark = if r.method == "doublegen" && self.doublegen_le_naive.get(&r.scenario) == Some(&true) {
                "*"
            } else {
                ""
            };
            out.push_str(&format!("{:<18} {:<10}", r.scenario, format!("{}{}", r.method, mark)));
            for m in &metrics {
                match r.metrics.get(*m) {
                    Some((mean, se, _)) => out.push_str(&format!(" {:>22}", format!("{mean:.5} ± {se:.5}"))),
                    None => out.push_str(&format!(" {:>22}", "-")),
                }
            }
            out.push('\n');
        }
        if !self.doublegen_le_naive.is_empty() {
            out.push_str(&format!("\n* doublegen mean {} at most naive's in that scenario\n", self.primary));
            for (s, (w, n)) in &self.doublegen_wins {
                out.push_str(&format!("{s}: doublegen <= naive in {w}/{n} seeds\n"));
            }
        }
        out
    }

    /// CSV form of the pivot: `scenario,method,<metric>_mean,<metric>_se,...,doublegen_le_naive`.
    pub fn to_csv(&self) -> Result<String> {
        let metrics: Vec<String> = self
            .rows
            .iter()
            .flat_map(|r| r.metrics.keys().cloned())
            .collect::<std::collections::BTreeSet<_>>()
            .into_iter()
            .collect();
        let mut w = csv::Writer::from_writer(Vec::new());
        let mut header = vec!["scenario".to_string(), "method".to_string()];
        for m in &metrics {
            header.push(format!("{m}_mean"));
            header.push(format!("{m}_se"));
        }
        header.push("doublegen_le_naive".into());
        w.write_record(&header)?;
        for r in &self.rows {
            let mut rec = vec![r.scenario.clone(), r.method.clone()];
            for m in &metrics {
                match r.metrics.get(m) {
                    Some((mean, se, _)) => {
                        rec.push(mean.to_string());
                        rec.push(se.to_string());
                    }
                    None => rec.extend([String::new(), String::new()]),
                }
            }
            rec.push(self.doublegen_le_naive.get(&r.scenario).map(|b| b.to_string()).unwrap_or_default());
            w.write_record(&rec)?;
        }
        let bytes = w.into_inner().map_err(|e| Error::Parse(e.to_string()))?;
        String::from_utf8(bytes).map_err(|e| Error::Parse(e.to_string()))
    }
}
