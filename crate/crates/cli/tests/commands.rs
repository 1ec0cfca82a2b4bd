use std::fs;
use std::path::Path;
use std::process::Command;

use doublegen::pipeline::{Backend, ExperimentConfig, Scenario};
use doublegen::synth::{DgpConfig, TokenConfounded};
use doublegen::Method;
use doublegen_cli::{cmd_experiment, cmd_generate, cmd_report, cmd_simulate, cmd_train, load_config, CliError};

fn tiny(backend: Backend) -> ExperimentConfig {
    let mut cfg = ExperimentConfig {
        backend,
        n: 400,
        seeds: vec![1],
        ..Default::default()
    };
    cfg.train.steps = 20;
    cfg.train.batch = 8;
    cfg.train.hidden = 4;
    cfg.train.tabular.iterations = 50;
    cfg.eval.samples = 100;
    cfg.sampler.flow_steps = 4;
    cfg.sampler.diffusion_steps = 4;
    cfg.nuisance.knn_k = 5;
    cfg.nuisance.propensity.iterations = 50;
    if backend == Backend::Autoreg {
        cfg.dgp = DgpConfig::Token(TokenConfounded::default());
    }
    cfg
}

fn write_config(cfg: &ExperimentConfig, path: &Path) {
    fs::write(path, serde_json::to_string_pretty(cfg).unwrap()).unwrap();
}

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_doublegen"))
}

#[test]
fn simulate_writes_two_files_per_seed_deterministically() {
    let cfg = ExperimentConfig {
        n: 1000,
        seeds: vec![3, 4],
        ..tiny(Backend::Flow)
    };
    let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
    let files = cmd_simulate(&cfg, a.path()).unwrap();
    assert_eq!(files.len(), 4);
    cmd_simulate(&cfg, b.path()).unwrap();
    for f in &files {
        let rel = f.strip_prefix(a.path()).unwrap();
        assert_eq!(fs::read(f).unwrap(), fs::read(b.path().join(rel)).unwrap(), "{}", rel.display());
    }
    let obs = fs::read_to_string(&files[0]).unwrap();
    assert!(obs.starts_with("x_1,x_2,a,y_1\n"), "{}", obs.lines().next().unwrap());
    assert_eq!(obs.lines().count(), 1001);
    assert!(a.path().join("config.json").exists());
}

#[test]
fn zero_sample_size_is_a_config_error() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("cfg.json");
    write_config(&ExperimentConfig { n: 0, ..tiny(Backend::Flow) }, &path);
    assert!(matches!(load_config(Some(&path), None), Err(CliError::Config(_))));
    let status = bin()
        .args(["--config", path.to_str().unwrap(), "--out", dir.path().to_str().unwrap(), "simulate"])
        .status()
        .unwrap();
    assert_eq!(status.code(), Some(2));
}

#[test]
fn missing_data_is_a_runtime_error() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("cfg.json");
    write_config(&tiny(Backend::Flow), &path);
    let out = bin()
        .args([
            "--config",
            path.to_str().unwrap(),
            "--out",
            dir.path().join("empty").to_str().unwrap(),
            "train",
            "--method",
            "naive",
        ])
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(3));
    assert!(String::from_utf8_lossy(&out.stderr).contains("load data"));
    let bad = bin().args(["--config", path.to_str().unwrap(), "train", "--method", "bogus"]).output().unwrap();
    assert_eq!(bad.status.code(), Some(2));
}

#[test]
fn oracle_training_never_needs_nuisances() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = tiny(Backend::Flow);
    // Far more neighbours than treated observations: every nuisance fit fails.
    cfg.nuisance.knn_k = 10_000;
    cmd_simulate(&cfg, dir.path()).unwrap();
    let files = cmd_train(&cfg, dir.path(), Method::Oracle, Scenario::BothWrong).unwrap();
    assert_eq!(files.len(), 1);
    assert!(dir.path().join("logs/both_wrong_oracle_seed_1.csv").exists());
    assert!(cmd_train(&cfg, dir.path(), Method::DoubleGen, Scenario::BothRight).is_err());
}

#[test]
fn generation_is_reproducible_and_checks_backend() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = tiny(Backend::Flow);
    cmd_simulate(&cfg, dir.path()).unwrap();
    let model = cmd_train(&cfg, dir.path(), Method::Naive, Scenario::BothRight).unwrap().remove(0);
    let (a, b, empty) = (dir.path().join("a.csv"), dir.path().join("b.csv"), dir.path().join("empty.csv"));
    cmd_generate(&model, 25, 9, &a, Some(&cfg)).unwrap();
    cmd_generate(&model, 25, 9, &b, None).unwrap();
    assert_eq!(fs::read(&a).unwrap(), fs::read(&b).unwrap());
    assert_eq!(fs::read_to_string(&a).unwrap().lines().count(), 26);
    cmd_generate(&model, 0, 9, &empty, None).unwrap();
    assert_eq!(fs::read_to_string(&empty).unwrap(), "y_1\n");
    let other = tiny(Backend::Diffusion);
    assert!(matches!(cmd_generate(&model, 5, 9, &a, Some(&other)), Err(CliError::Runtime { .. })));
}

#[test]
fn generated_rows_are_aligned_by_index() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = tiny(Backend::Autoreg);
    cmd_simulate(&cfg, dir.path()).unwrap();
    for method in [Method::Naive, Method::DoubleGen] {
        let model = cmd_train(&cfg, dir.path(), method, Scenario::BothRight).unwrap().remove(0);
        let (short, long) = (dir.path().join("short.csv"), dir.path().join("long.csv"));
        cmd_generate(&model, 10, 2, &short, None).unwrap();
        cmd_generate(&model, 40, 2, &long, None).unwrap();
        let (short, long) = (fs::read_to_string(&short).unwrap(), fs::read_to_string(&long).unwrap());
        assert!(short.starts_with("tok_1,tok_2,tok_3\n"));
        // Row i draws from its own noise stream, so a shorter run is a prefix.
        assert!(long.starts_with(&short), "{method}");
    }
}

#[test]
fn experiment_grid_counts_and_summary() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = ExperimentConfig {
        scenarios: vec![Scenario::BothRight],
        methods: vec![Method::Naive, Method::DoubleGen],
        seeds: vec![0, 1, 2],
        ..tiny(Backend::Flow)
    };
    let summary = cmd_experiment(&cfg, dir.path()).unwrap();
    let metrics = fs::read_to_string(dir.path().join("metrics.csv")).unwrap();
    for metric in ["w1", "tv"] {
        let rows = metrics.lines().filter(|l| l.split(',').nth(2) == Some(metric)).count();
        assert_eq!(rows, 6, "{metric}");
    }
    assert!(summary.contains("both_right"));
    assert_eq!(fs::read_to_string(dir.path().join("failures.csv")).unwrap(), "scenario,method,seed,error\n");
    let report = cmd_report(&dir.path().join("metrics.csv"), &dir.path().join("again"), "w1").unwrap();
    assert_eq!(report, summary);
}

#[test]
fn experiment_reruns_are_byte_identical() {
    let cfg = ExperimentConfig {
        seeds: vec![0, 1],
        ..tiny(Backend::Diffusion)
    };
    let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
    cmd_experiment(&cfg, a.path()).unwrap();
    cmd_experiment(&cfg, b.path()).unwrap();
    for f in ["metrics.csv", "summary.csv", "logs.csv", "config.json"] {
        assert_eq!(fs::read(a.path().join(f)).unwrap(), fs::read(b.path().join(f)).unwrap(), "{f}");
    }
}

#[test]
fn binary_runs_end_to_end() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("cfg.json");
    write_config(
        &ExperimentConfig {
            methods: vec![Method::Naive, Method::DoubleGen],
            scenarios: vec![Scenario::BothRight],
            ..tiny(Backend::Autoreg)
        },
        &path,
    );
    let out = dir.path().join("out");
    let run = |args: &[&str]| {
        let mut full = vec!["--config", path.to_str().unwrap(), "--out", out.to_str().unwrap(), "--threads", "2"];
        full.extend_from_slice(args);
        let o = bin().args(&full).output().unwrap();
        assert!(o.status.success(), "{args:?}: {}", String::from_utf8_lossy(&o.stderr));
        String::from_utf8(o.stdout).unwrap()
    };
    run(&["simulate"]);
    run(&["train", "--method", "doublegen"]);
    let model = out.join("models/both_right_doublegen_seed_1.json");
    run(&["generate", "--model", model.to_str().unwrap(), "--count", "50"]);
    let eval = run(&["evaluate", "--model", model.to_str().unwrap()]);
    assert!(eval.starts_with("kl,"), "{eval}");
    let summary = run(&["experiment"]);
    assert!(summary.contains("doublegen"));
    let report = run(&["report"]);
    assert_eq!(report, summary);
}
