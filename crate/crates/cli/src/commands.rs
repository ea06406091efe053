//! The subcommand bodies, callable without going through argument parsing.

use std::path::{Path, PathBuf};
use std::sync::Arc;

use activeq::bench::{evaluate, mean_stderr, value_at, BenchReport, EvalSettings};
use activeq::data::{save_csv, Manifest, ManifestEntry, RawDataset};
use activeq::strategy::{StrategyParams, StrategyRegistry};
use activeq::synth::{suite, SynthParams, DEFAULT_DIMS};
use activeq::trainer::{save_log_csv, train, TrainLogRow, TrainOutcome, TrainingSet};
use activeq::{FeatureMask, PolicyModel, QueryStrategy};
use serde::Serialize;

use crate::config::{validate_mask, AblateConfig, BenchConfig, TrainConfig};
use crate::error::{CliError, Result};

fn create_parent(path: &Path) -> Result<()> {
    match path.parent() {
        Some(dir) if !dir.as_os_str().is_empty() => {
            std::fs::create_dir_all(dir).map_err(|e| CliError::io(dir.to_path_buf(), e))
        }
        _ => Ok(()),
    }
}

pub fn load_datasets(manifest: &Path, names: &[String]) -> Result<Vec<RawDataset>> {
    let (m, base) = Manifest::read(manifest)?;
    Ok(m.load(&base, names)?)
}

/// Trains, then writes the model and (when configured) the diagnostic log.
pub fn cmd_train(cfg: &TrainConfig, progress: impl FnMut(&TrainLogRow)) -> Result<TrainOutcome> {
    cfg.validate()?;
    let datasets = load_datasets(&cfg.manifest, &cfg.datasets)?;
    let sets = datasets
        .iter()
        .map(|ds| TrainingSet::prepare(ds, cfg.k, cfg.mask(), cfg.seed))
        .collect::<activeq::Result<Vec<_>>>()?;
    let outcome = train(&sets, &cfg.options(), cfg.seed, progress)?;
    create_parent(&cfg.model_out)?;
    outcome.model.save(&cfg.model_out)?;
    if let Some(log) = &cfg.log_out {
        create_parent(log)?;
        save_log_csv(&outcome.log, log)?;
    }
    Ok(outcome)
}

#[derive(Debug, Clone)]
pub struct EvalRequest {
    pub model: Option<PathBuf>,
    pub manifest: PathBuf,
    pub datasets: Vec<String>,
    pub strategies: Vec<String>,
    pub settings: EvalSettings,
    pub out_dir: PathBuf,
}

pub fn build_strategies(names: &[String], model: Option<Arc<PolicyModel>>) -> Result<Vec<Box<dyn QueryStrategy>>> {
    if names.is_empty() {
        return Err(CliError::Invalid("at least one strategy is required".into()));
    }
    let registry = StrategyRegistry::with_builtins();
    let params = StrategyParams { model };
    Ok(names.iter().map(|n| registry.build(n, &params)).collect::<activeq::Result<_>>()?)
}

fn check_settings(s: &EvalSettings) -> Result<()> {
    if s.budget == 0 {
        return Err(CliError::Invalid("budget must be positive".into()));
    }
    if s.seeds.is_empty() {
        return Err(CliError::Invalid("at least one run is required".into()));
    }
    Ok(())
}

/// Simulates every strategy on every dataset and seed; writes `report.csv`
/// and `curves/` under the output directory.
pub fn cmd_eval(req: &EvalRequest) -> Result<BenchReport> {
    check_settings(&req.settings)?;
    let model = req.model.as_ref().map(PolicyModel::load).transpose()?.map(Arc::new);
    let strategies = build_strategies(&req.strategies, model)?;
    let datasets = load_datasets(&req.manifest, &req.datasets)?;
    let report = evaluate(&datasets, &strategies, &req.settings)?;
    report.write_dir(&req.out_dir)?;
    Ok(report)
}

/// Train on the configured split with `seed`, then evaluate on the held-out
/// split. Writes `model.bin`, `train_log.csv`, `report.csv` and `curves/`.
pub fn cmd_bench(cfg: &BenchConfig, seed: u64, progress: impl FnMut(&TrainLogRow)) -> Result<BenchReport> {
    cfg.validate()?;
    let mut tc = cfg.train_config(seed, cfg.out_dir.join("model.bin"));
    tc.log_out = Some(cfg.out_dir.join("train_log.csv"));
    let outcome = cmd_train(&tc, progress)?;
    let settings = EvalSettings {
        budget: cfg.budget,
        seeds: cfg.eval_seeds(),
        checkpoints: cfg.checkpoints.clone(),
        k: cfg.k,
        mask: tc.mask(),
    };
    check_settings(&settings)?;
    let strategies = build_strategies(&cfg.strategies, Some(Arc::new(outcome.model)))?;
    let datasets = load_datasets(&cfg.manifest, &cfg.eval)?;
    let report = evaluate(&datasets, &strategies, &settings)?;
    report.write_dir(&cfg.out_dir)?;
    Ok(report)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Preset {
    Standard,
    RareModes,
    Toy,
}

impl Preset {
    pub fn params(self) -> SynthParams {
        match self {
            Preset::Standard => SynthParams::default(),
            Preset::RareModes => SynthParams::rare_modes(0),
            Preset::Toy => SynthParams::toy(0),
        }
    }
}

#[derive(Debug, Clone)]
pub struct SynthRequest {
    pub out_dir: PathBuf,
    pub preset: Preset,
    pub seeds: Vec<u64>,
    /// Defaults to 2, 4, 8 (2 for the toy preset).
    pub dims: Option<Vec<usize>>,
    pub n: Option<usize>,
    pub anomaly_fraction: Option<f64>,
}

/// One labeled CSV per seed plus `manifest.json`, all in `out_dir`.
pub fn cmd_synth(req: &SynthRequest) -> Result<Manifest> {
    if req.seeds.is_empty() {
        return Err(CliError::Invalid("at least one seed is required".into()));
    }
    let mut base = req.preset.params();
    if let Some(n) = req.n {
        base.n = n;
    }
    if let Some(f) = req.anomaly_fraction {
        base.anomaly_fraction = f;
    }
    let dims = match (&req.dims, req.preset) {
        (Some(d), _) => d.clone(),
        (None, Preset::Toy) => vec![2],
        (None, _) => DEFAULT_DIMS.to_vec(),
    };
    if dims.contains(&0) {
        return Err(CliError::Invalid("dimensions must be positive".into()));
    }
    let outputs = suite(&req.seeds, &dims, &base)?;
    std::fs::create_dir_all(&req.out_dir).map_err(|e| CliError::io(req.out_dir.clone(), e))?;
    let mut manifest = Manifest { datasets: Vec::new() };
    for out in &outputs {
        let file = format!("{}.csv", out.dataset.name);
        save_csv(&out.dataset, req.out_dir.join(&file))?;
        manifest.datasets.push(ManifestEntry {
            name: out.dataset.name.clone(),
            path: file.into(),
            label_column: Some("label".into()),
        });
    }
    manifest.write(req.out_dir.join("manifest.json"))?;
    Ok(manifest)
}

/// One ablation variant, summarized at the budget over all eval datasets.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct AblationRow {
    pub variant: String,
    pub drop_features: String,
    pub negative_reward: f64,
    pub gamma: f64,
    pub checkpoint: usize,
    /// (strategy, mean, stderr), where each run's value is averaged over datasets first.
    pub methods: Vec<(String, f64, f64)>,
}

pub fn summarize(name: &str, cfg: &BenchConfig, report: &BenchReport) -> AblationRow {
    let seeds = cfg.eval_seeds();
    let methods = cfg
        .strategies
        .iter()
        .map(|m| {
            let per_run: Vec<f64> = seeds
                .iter()
                .map(|&s| {
                    let vals: Vec<f64> = report
                        .runs
                        .iter()
                        .filter(|r| &r.method == m && r.seed == s)
                        .map(|r| value_at(&r.curve, cfg.budget) as f64)
                        .collect();
                    vals.iter().sum::<f64>() / vals.len().max(1) as f64
                })
                .collect();
            let (mean, stderr) = mean_stderr(&per_run);
            (m.clone(), mean, stderr)
        })
        .collect();
    AblationRow {
        variant: name.to_owned(),
        drop_features: FeatureMask::dropping(&cfg.drop_features).label(),
        negative_reward: cfg.negative_reward,
        gamma: cfg.gamma.unwrap_or(cfg.ppo.gamma),
        checkpoint: cfg.budget,
        methods,
    }
}

pub fn write_ablation_csv<W: std::io::Write>(rows: &[AblationRow], writer: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(writer);
    let mut header: Vec<String> = ["variant", "drop_features", "negative_reward", "gamma", "checkpoint"]
        .map(String::from)
        .to_vec();
    if let Some(first) = rows.first() {
        for (m, _, _) in &first.methods {
            header.push(format!("{m}_mean"));
            header.push(format!("{m}_stderr"));
        }
    }
    w.write_record(&header)?;
    for r in rows {
        let mut rec = vec![
            r.variant.clone(),
            r.drop_features.clone(),
            format!("{:?}", r.negative_reward),
            format!("{:?}", r.gamma),
            r.checkpoint.to_string(),
        ];
        for (_, mean, stderr) in &r.methods {
            rec.push(format!("{mean:?}"));
            rec.push(format!("{stderr:?}"));
        }
        w.write_record(&rec)?;
    }
    w.flush().map_err(|e| CliError::io(PathBuf::from("ablation summary"), e))
}

/// Runs each variant as a full bench under `out_dir/<variant>/` and writes
/// `out_dir/ablation.csv`.
pub fn cmd_ablate(cfg: &AblateConfig, seed: u64) -> Result<Vec<AblationRow>> {
    cfg.validate()?;
    let out_dir = &cfg.bench.out_dir;
    let mut rows = Vec::new();
    for v in cfg.variants() {
        validate_mask(&v.bench.drop_features)?;
        let bench = BenchConfig {
            out_dir: out_dir.join(&v.name),
            ..v.bench
        };
        let report = cmd_bench(&bench, seed, |_| {})?;
        rows.push(summarize(&v.name, &bench, &report));
    }
    std::fs::create_dir_all(out_dir).map_err(|e| CliError::io(out_dir.clone(), e))?;
    let path = out_dir.join("ablation.csv");
    let file = std::fs::File::create(&path).map_err(|e| CliError::io(path.clone(), e))?;
    write_ablation_csv(&rows, file)?;
    Ok(rows)
}
