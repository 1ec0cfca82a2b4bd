//! Subcommand implementations behind the `doublegen` binary.
//!
//! Output layout under `--out`:
//!
//! ```text
//! config.json                          every default materialised
//! data/seed_<s>/observational.csv      (x, a, y) rows
//! data/seed_<s>/counterfactual.csv     draws from the counterfactual law
//! models/<scenario>_<method>_seed_<s>.json
//! logs/<scenario>_<method>_seed_<s>.csv
//! metrics.csv failures.csv logs.csv summary.csv summary.txt
//! ```

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use clap::{Parser, Subcommand};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use doublegen::data::{load_observations, load_outcomes, save_observations, save_outcomes};
use doublegen::eval::{kl_categorical, read_metrics, write_metrics};
use doublegen::pipeline::{self, CellResult, EpochLog, EvalSettings, ExperimentConfig, ModelJson, Scenario, SeedContext, Simulated, TrainedModel};
use doublegen::{Method, Outcome};

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("config error: {0}")]
    Config(String),
    #[error("{stage}: {message}")]
    Runtime { stage: &'static str, message: String },
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Config(_) => 2,
            CliError::Runtime { .. } => 3,
        }
    }
}

pub type CliResult<T> = std::result::Result<T, CliError>;

trait Stage<T> {
    fn stage(self, stage: &'static str) -> CliResult<T>;
}

impl<T, E: std::fmt::Display> Stage<T> for std::result::Result<T, E> {
    fn stage(self, stage: &'static str) -> CliResult<T> {
        self.map_err(|e| CliError::Runtime { stage, message: e.to_string() })
    }
}

#[derive(Debug, Parser)]
#[command(name = "doublegen", about = "Doubly robust counterfactual generative modelling on synthetic data")]
pub struct Cli {
    /// Experiment config (JSON). Defaults are used when omitted.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Output directory.
    #[arg(long, global = true, default_value = "out")]
    pub out: PathBuf,
    /// Replaces the config's seed list with this single seed.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Worker threads for grid cells (default: all cores).
    #[arg(long, global = true)]
    pub threads: Option<usize>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Write observational and counterfactual CSVs for every seed.
    Simulate,
    /// Train one method under one nuisance scenario on simulated data.
    Train {
        #[arg(long)]
        method: String,
        #[arg(long, default_value = "both_right")]
        scenario: String,
    },
    /// Draw samples from a trained model.
    Generate {
        #[arg(long)]
        model: PathBuf,
        #[arg(long, default_value_t = 1000)]
        count: usize,
        /// Output CSV (default: <out>/samples.csv).
        #[arg(long)]
        output: Option<PathBuf>,
    },
    /// Score a model against the counterfactual law, or two sample files.
    Evaluate {
        #[arg(long)]
        model: Option<PathBuf>,
        #[arg(long)]
        samples: Option<PathBuf>,
        #[arg(long)]
        reference: Option<PathBuf>,
    },
    /// Run the full scenario × method × seed grid.
    Experiment,
    /// Rebuild the summary from an existing metrics CSV.
    Report {
        #[arg(long)]
        metrics: Option<PathBuf>,
    },
}

/// A trained model plus the cell it came from.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ModelFile {
    pub scenario: Scenario,
    pub method: Method,
    pub seed: u64,
    pub model: ModelJson,
}

pub fn load_config(path: Option<&Path>, seed: Option<u64>) -> CliResult<ExperimentConfig> {
    let mut cfg = match path {
        Some(p) => {
            let text = fs::read_to_string(p).map_err(|e| CliError::Config(format!("{}: {e}", p.display())))?;
            serde_json::from_str::<ExperimentConfig>(&text).map_err(|e| CliError::Config(e.to_string()))?
        }
        None => ExperimentConfig::default(),
    };
    if let Some(s) = seed {
        cfg.seeds = vec![s];
    }
    cfg.validate().map_err(|e| CliError::Config(e.to_string()))?;
    Ok(cfg)
}

pub fn run(cli: &Cli) -> CliResult<()> {
    let cfg = load_config(cli.config.as_deref(), cli.seed)?;
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(cli.threads.unwrap_or(0))
        .build()
        .map_err(|e| CliError::Config(e.to_string()))?;
    pool.install(|| match &cli.command {
        Command::Simulate => cmd_simulate(&cfg, &cli.out).map(|_| ()),
        Command::Train { method, scenario } => {
            let method: Method = method.parse().map_err(|e: doublegen::Error| CliError::Config(e.to_string()))?;
            let scenario: Scenario = scenario.parse().map_err(|e: doublegen::Error| CliError::Config(e.to_string()))?;
            cmd_train(&cfg, &cli.out, method, scenario).map(|_| ())
        }
        Command::Generate { model, count, output } => {
            let output = output.clone().unwrap_or_else(|| cli.out.join("samples.csv"));
            let seed = cli.seed.unwrap_or(cfg.seeds[0]);
            cmd_generate(model, *count, seed, &output, cli.config.as_ref().map(|_| &cfg))
        }
        Command::Evaluate { model, samples, reference } => {
            let metrics = cmd_evaluate(
                &cfg,
                model.as_deref(),
                samples.as_deref(),
                reference.as_deref(),
                cli.seed.unwrap_or(cfg.seeds[0]),
            )?;
            for (m, v) in &metrics {
                println!("{m},{v}");
            }
            Ok(())
        }
        Command::Experiment => {
            let summary = cmd_experiment(&cfg, &cli.out)?;
            print!("{summary}");
            Ok(())
        }
        Command::Report { metrics } => {
            let path = metrics.clone().unwrap_or_else(|| cli.out.join("metrics.csv"));
            let summary = cmd_report(&path, &cli.out, pipeline::primary_metric(cfg.backend))?;
            print!("{summary}");
            Ok(())
        }
    })
}

fn write_config(cfg: &ExperimentConfig, out: &Path) -> CliResult<()> {
    fs::create_dir_all(out).stage("output")?;
    let text = serde_json::to_string_pretty(cfg).stage("output")?;
    fs::write(out.join("config.json"), text + "\n").stage("output")
}

pub fn seed_dir(out: &Path, seed: u64) -> PathBuf {
    out.join("data").join(format!("seed_{seed}"))
}

pub fn cell_name(scenario: Scenario, method: Method, seed: u64) -> String {
    format!("{scenario}_{method}_seed_{seed}")
}

/// Writes one observational and one counterfactual CSV per seed.
pub fn cmd_simulate(cfg: &ExperimentConfig, out: &Path) -> CliResult<Vec<PathBuf>> {
    write_config(cfg, out)?;
    let dgp = cfg.dgp().stage("simulate")?;
    let mut files = Vec::new();
    for &seed in &cfg.seeds {
        let data = pipeline::simulate(&dgp, cfg.n, seed).stage("simulate")?;
        let dir = seed_dir(out, seed);
        fs::create_dir_all(&dir).stage("output")?;
        let (obs, cf) = (dir.join("observational.csv"), dir.join("counterfactual.csv"));
        save_observations(&obs, &data.observations).stage("output")?;
        save_outcomes(&cf, &data.counterfactual, None).stage("output")?;
        files.extend([obs, cf]);
    }
    Ok(files)
}

fn load_simulated(out: &Path, seed: u64) -> CliResult<Simulated> {
    let dir = seed_dir(out, seed);
    Ok(Simulated {
        observations: load_observations(&dir.join("observational.csv")).stage("load data")?,
        counterfactual: load_outcomes(&dir.join("counterfactual.csv")).stage("load data")?,
    })
}

/// Trains `method` under `scenario` for every configured seed from the
/// simulated files, writing a model file and a per-epoch risk log for each.
pub fn cmd_train(cfg: &ExperimentConfig, out: &Path, method: Method, scenario: Scenario) -> CliResult<Vec<PathBuf>> {
    let dgp = cfg.dgp().stage("train")?;
    let cell_cfg = ExperimentConfig {
        cells: Some(vec![(scenario, method)]),
        ..cfg.clone()
    };
    let mut files = Vec::new();
    for &seed in &cfg.seeds {
        let data = load_simulated(out, seed)?;
        let ctx = SeedContext::from_data(&cell_cfg, &dgp, seed, data).stage("nuisance")?;
        let (model, log) = pipeline::train_cell(&cell_cfg, &dgp, &ctx, scenario, method).stage("train")?;
        let name = cell_name(scenario, method, seed);
        let models = out.join("models");
        fs::create_dir_all(&models).stage("output")?;
        let path = models.join(format!("{name}.json"));
        let file = ModelFile {
            scenario,
            method,
            seed,
            model: model.to_json(),
        };
        fs::write(&path, serde_json::to_string(&file).stage("output")? + "\n").stage("output")?;
        let logs = out.join("logs");
        fs::create_dir_all(&logs).stage("output")?;
        fs::write(logs.join(format!("{name}.csv")), log_csv(&log)).stage("output")?;
        files.push(path);
    }
    Ok(files)
}

fn log_csv(log: &[EpochLog]) -> String {
    let mut s = String::from("epoch,risk\n");
    for e in log {
        s.push_str(&format!("{},{}\n", e.epoch, e.risk));
    }
    s
}

pub fn load_model(path: &Path) -> CliResult<(ModelFile, TrainedModel)> {
    let text = fs::read_to_string(path).stage("load model")?;
    let file: ModelFile = serde_json::from_str(&text).stage("load model")?;
    let model = TrainedModel::from_json(&file.model).stage("load model")?;
    Ok((file, model))
}

/// Samples `count` outcomes. When a config is supplied its backend must
/// match the model's.
pub fn cmd_generate(model_path: &Path, count: usize, seed: u64, output: &Path, cfg: Option<&ExperimentConfig>) -> CliResult<()> {
    let (_, model) = load_model(model_path)?;
    if let Some(cfg) = cfg {
        if cfg.backend != model.backend() {
            return Err(CliError::Runtime {
                stage: "generate",
                message: format!("model backend {} does not match config backend {}", model.backend().name(), cfg.backend.name()),
            });
        }
    }
    let samples = pipeline::generate(&model, count, seed).stage("generate")?;
    let template = match &model {
        TrainedModel::Autoreg { table } => Outcome::Tokens(vec![1; table.d()]),
        TrainedModel::Flow { net, .. } | TrainedModel::Diffusion { net, .. } => Outcome::Real(vec![0.0; net.net.output_dim()]),
    };
    if let Some(dir) = output.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).stage("output")?;
    }
    save_outcomes(output, &samples, Some(&template)).stage("output")
}

/// With `model`: divergences between the model and the configured
/// counterfactual law. With `samples` and `reference`: sample-based
/// divergences between two CSV files.
pub fn cmd_evaluate(
    cfg: &ExperimentConfig,
    model: Option<&Path>,
    samples: Option<&Path>,
    reference: Option<&Path>,
    seed: u64,
) -> CliResult<Vec<(String, f64)>> {
    match (model, samples, reference) {
        (Some(path), None, None) => {
            let (_, model) = load_model(path)?;
            let dgp = cfg.dgp().stage("evaluate")?;
            pipeline::evaluate(&dgp, &model, &cfg.eval, seed).stage("evaluate")
        }
        (None, Some(s), Some(r)) => {
            let s = load_outcomes(s).stage("load samples")?;
            let r = load_outcomes(r).stage("load samples")?;
            sample_divergences(&s, &r, &cfg.eval, seed).stage("evaluate")
        }
        _ => Err(CliError::Config("evaluate needs either --model or both --samples and --reference".into())),
    }
}

/// Sample metrics for real outcomes; empirical TV and KL(reference ‖ samples)
/// for token outcomes.
pub fn sample_divergences(samples: &[Outcome], reference: &[Outcome], eval: &EvalSettings, seed: u64) -> doublegen::Result<Vec<(String, f64)>> {
    match samples.first() {
        Some(Outcome::Tokens(_)) => {
            let mut counts: BTreeMap<Vec<u32>, (f64, f64)> = BTreeMap::new();
            for y in samples {
                counts.entry(y.as_tokens()?.to_vec()).or_default().0 += 1.0 / samples.len() as f64;
            }
            for y in reference {
                counts.entry(y.as_tokens()?.to_vec()).or_default().1 += 1.0 / reference.len() as f64;
            }
            let (p, q): (Vec<f64>, Vec<f64>) = counts.values().map(|&(s, r)| (r, s)).unzip();
            let tv = 0.5 * p.iter().zip(&q).map(|(a, b)| (a - b).abs()).sum::<f64>();
            Ok(vec![("kl".into(), kl_categorical(&p, &q)?), ("tv".into(), tv)])
        }
        _ => pipeline::sample_metrics(samples, reference, eval, seed),
    }
}

/// Runs every (scenario, method, seed) cell. Seeds are prepared in
/// parallel, then cells run in parallel; outputs are written in a fixed
/// order so reruns are byte-identical regardless of thread count.
pub fn run_grid(cfg: &ExperimentConfig) -> CliResult<Vec<CellResult>> {
    let dgp = cfg.dgp().stage("experiment")?;
    let contexts: Vec<(u64, Result<SeedContext, String>)> = cfg
        .seeds
        .par_iter()
        .map(|&seed| (seed, SeedContext::new(cfg, &dgp, seed).map_err(|e| format!("data: {e}"))))
        .collect();
    let jobs: Vec<(usize, Scenario, Method)> = (0..contexts.len()).flat_map(|i| cfg.cells().into_iter().map(move |(s, m)| (i, s, m))).collect();
    let mut results: Vec<CellResult> = jobs
        .par_iter()
        .map(|&(i, scenario, method)| {
            let (seed, ctx) = &contexts[i];
            match ctx {
                Ok(ctx) => pipeline::run_cell(cfg, &dgp, ctx, scenario, method),
                Err(e) => CellResult {
                    scenario,
                    method,
                    seed: *seed,
                    outcome: Err(e.clone()),
                    log: Vec::new(),
                },
            }
        })
        .collect();
    results.sort_by_key(|r| (r.scenario, r.method, r.seed));
    Ok(results)
}

/// Writes metrics, failures, logs and summaries; returns the rendered summary.
pub fn cmd_experiment(cfg: &ExperimentConfig, out: &Path) -> CliResult<String> {
    write_config(cfg, out)?;
    let results = run_grid(cfg)?;
    let rows = pipeline::metric_rows(&results, cfg.n);
    let file = fs::File::create(out.join("metrics.csv")).stage("output")?;
    write_metrics(std::io::BufWriter::new(file), &rows).stage("output")?;

    let mut failures = String::from("scenario,method,seed,error\n");
    let mut logs = String::from("scenario,method,seed,epoch,risk\n");
    for r in &results {
        if let Err(e) = &r.outcome {
            failures.push_str(&format!("{},{},{},\"{}\"\n", r.scenario, r.method, r.seed, e.replace('"', "'")));
        }
        for l in &r.log {
            logs.push_str(&format!("{},{},{},{},{}\n", r.scenario, r.method, r.seed, l.epoch, l.risk));
        }
    }
    fs::write(out.join("failures.csv"), failures).stage("output")?;
    fs::write(out.join("logs.csv"), logs).stage("output")?;
    write_summary(&rows, out, pipeline::primary_metric(cfg.backend))
}

fn write_summary(rows: &[doublegen::eval::MetricReport], out: &Path, primary: &str) -> CliResult<String> {
    let summary = pipeline::summarize(rows, primary);
    fs::write(out.join("summary.csv"), summary.to_csv().stage("report")?).stage("output")?;
    let text = summary.render();
    fs::write(out.join("summary.txt"), &text).stage("output")?;
    Ok(text)
}

pub fn cmd_report(metrics: &Path, out: &Path, primary: &str) -> CliResult<String> {
    let file = fs::File::open(metrics).stage("report")?;
    let rows = read_metrics(file).stage("report")?;
    fs::create_dir_all(out).stage("output")?;
    write_summary(&rows, out, primary)
}
