//! `activeq` command line: train a query policy, evaluate it against the
//! detector ranking, run benchmarks and ablations, generate synthetic data
//! and serve labeling sessions over HTTP.

pub mod commands;
pub mod config;
pub mod error;

use std::path::{Path, PathBuf};

use activeq::bench::{EvalSettings, DEFAULT_CHECKPOINTS};
use activeq::features::DEFAULT_K;
use activeq::strategy::{META_POLICY, UNSUPERVISED};
use activeq::trainer::TrainLogRow;
use activeq::FeatureMask;
use clap::{Args, Parser, Subcommand, ValueEnum};
use serde_json::{Map, Value};

use crate::commands::{EvalRequest, Preset, SynthRequest};
use crate::config::{absolute, validate_mask, AblateConfig, BenchConfig, TrainConfig};
pub use crate::error::{CliError, Result};

#[derive(Debug, Parser)]
#[command(name = "activeq", version, about = "Active anomaly discovery with a transferable query policy")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Train a policy from a JSON config; flags override config fields.
    Train(TrainArgs),
    /// Simulate sessions on labeled data and report discovered anomalies.
    Eval(EvalArgs),
    /// Train on one split and evaluate on another.
    Bench(BenchArgs),
    /// Generate labeled synthetic datasets and a manifest.
    Synth(SynthArgs),
    /// Run a bench per feature-drop, reward or gamma variant.
    Ablate(AblateArgs),
    /// Serve labeling sessions over HTTP.
    Serve(ServeArgs),
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub manifest: Option<PathBuf>,
    /// Comma-separated manifest entries.
    #[arg(long, value_delimiter = ',')]
    pub datasets: Option<Vec<String>>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub model_out: Option<PathBuf>,
    #[arg(long)]
    pub log_out: Option<PathBuf>,
    #[arg(long)]
    pub timesteps: Option<usize>,
    #[arg(long)]
    pub gamma: Option<f64>,
    #[arg(long)]
    pub negative_reward: Option<f64>,
    #[arg(long, value_delimiter = ',')]
    pub drop_features: Option<Vec<usize>>,
    #[arg(long)]
    pub quiet: bool,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    /// Required by the meta-policy strategy.
    #[arg(long)]
    pub model: Option<PathBuf>,
    #[arg(long)]
    pub manifest: PathBuf,
    #[arg(long, value_delimiter = ',')]
    pub datasets: Vec<String>,
    #[arg(long, default_value_t = 100)]
    pub budget: usize,
    /// Runs use seeds 0..runs unless --seeds is given.
    #[arg(long, default_value_t = 5)]
    pub runs: usize,
    #[arg(long, value_delimiter = ',')]
    pub seeds: Option<Vec<u64>>,
    #[arg(long, value_delimiter = ',', default_values_t = DEFAULT_CHECKPOINTS)]
    pub checkpoints: Vec<usize>,
    #[arg(long, value_delimiter = ',', default_values_t = [META_POLICY.to_owned(), UNSUPERVISED.to_owned()])]
    pub strategies: Vec<String>,
    #[arg(long, default_value_t = DEFAULT_K)]
    pub k: usize,
    #[arg(long, value_delimiter = ',')]
    pub drop_features: Vec<usize>,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct BenchArgs {
    #[arg(long)]
    pub config: PathBuf,
    /// Training seed.
    #[arg(long)]
    pub seed: u64,
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[arg(long)]
    pub timesteps: Option<usize>,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
pub enum PresetArg {
    Standard,
    RareModes,
    Toy,
}

impl From<PresetArg> for Preset {
    fn from(p: PresetArg) -> Self {
        match p {
            PresetArg::Standard => Preset::Standard,
            PresetArg::RareModes => Preset::RareModes,
            PresetArg::Toy => Preset::Toy,
        }
    }
}

#[derive(Debug, Args)]
pub struct SynthArgs {
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, value_enum, default_value = "standard")]
    pub preset: PresetArg,
    /// Seed list with ranges, e.g. `0-11` or `0,3,5-7`.
    #[arg(long, default_value = "0-11")]
    pub seeds: String,
    #[arg(long, value_delimiter = ',')]
    pub dims: Option<Vec<usize>>,
    #[arg(long)]
    pub n: Option<usize>,
    #[arg(long)]
    pub anomaly_fraction: Option<f64>,
}

#[derive(Debug, Args)]
pub struct AblateArgs {
    #[arg(long)]
    pub config: PathBuf,
    #[arg(long)]
    pub seed: u64,
}

#[derive(Debug, Args)]
pub struct ServeArgs {
    #[arg(long, env = "PORT", default_value_t = activeq_service::DEFAULT_PORT)]
    pub port: u16,
    #[arg(long, env = "MODEL_DIR", default_value = "models")]
    pub model_dir: PathBuf,
    #[arg(long, env = "SNAPSHOT_DIR")]
    pub snapshot_dir: Option<PathBuf>,
    #[arg(long, default_value_t = activeq_service::DEFAULT_UPLOAD_LIMIT)]
    pub upload_limit: usize,
}

/// Parses `0-3,7` into `[0, 1, 2, 3, 7]`.
pub fn parse_seeds(text: &str) -> Result<Vec<u64>> {
    let bad = || CliError::Invalid(format!("cannot parse seed list {text:?}"));
    let mut out = Vec::new();
    for part in text.split(',').map(str::trim).filter(|p| !p.is_empty()) {
        match part.split_once('-') {
            Some((a, b)) => {
                let (a, b): (u64, u64) = (a.trim().parse().map_err(|_| bad())?, b.trim().parse().map_err(|_| bad())?);
                if a > b {
                    return Err(bad());
                }
                out.extend(a..=b);
            }
            None => out.push(part.parse().map_err(|_| bad())?),
        }
    }
    if out.is_empty() {
        return Err(bad());
    }
    Ok(out)
}

fn path_value(p: &Path) -> Result<Value> {
    Ok(Value::String(absolute(p)?.to_string_lossy().into_owned()))
}

fn ppo_override(over: &mut Map<String, Value>, base: Option<&Value>, key: &str, value: Value) {
    let ppo = over
        .entry("ppo")
        .or_insert_with(|| base.cloned().unwrap_or_else(|| Value::Object(Map::new())));
    if let Value::Object(m) = ppo {
        m.insert(key.into(), value);
    }
}

fn read_json(path: &Path) -> Result<Value> {
    let text = std::fs::read_to_string(path).map_err(|e| CliError::io(path, e))?;
    config::parse(&text, &path.display().to_string())
}

pub fn train_config(args: &TrainArgs) -> Result<TrainConfig> {
    let file_ppo = match &args.config {
        Some(p) => read_json(p)?.get("ppo").cloned(),
        None => None,
    };
    let mut over = Map::new();
    if let Some(p) = &args.manifest {
        over.insert("manifest".into(), path_value(p)?);
    }
    if let Some(d) = &args.datasets {
        over.insert("datasets".into(), d.clone().into());
    }
    if let Some(s) = args.seed {
        over.insert("seed".into(), s.into());
    }
    if let Some(p) = &args.model_out {
        over.insert("model_out".into(), path_value(p)?);
    }
    if let Some(p) = &args.log_out {
        over.insert("log_out".into(), path_value(p)?);
    }
    if let Some(r) = args.negative_reward {
        over.insert("negative_reward".into(), r.into());
    }
    if let Some(d) = &args.drop_features {
        over.insert("drop_features".into(), d.clone().into());
    }
    if let Some(t) = args.timesteps {
        ppo_override(&mut over, file_ppo.as_ref(), "total_timesteps", t.into());
    }
    if let Some(g) = args.gamma {
        ppo_override(&mut over, file_ppo.as_ref(), "gamma", g.into());
    }
    config::load(args.config.as_deref(), over)
}

pub fn bench_config(args: &BenchArgs) -> Result<BenchConfig> {
    let mut over = Map::new();
    if let Some(p) = &args.out {
        over.insert("out_dir".into(), path_value(p)?);
    }
    if let Some(t) = args.timesteps {
        let file_ppo = read_json(&args.config)?.get("ppo").cloned();
        ppo_override(&mut over, file_ppo.as_ref(), "total_timesteps", t.into());
    }
    config::load(Some(&args.config), over)
}

fn print_progress(row: &TrainLogRow) {
    eprintln!(
        "step {:>7}  episode reward {:>8.3}  query rate {:.3}  entropy {:.3}  kl {:.5}",
        row.step, row.mean_episode_reward, row.query_rate, row.entropy, row.approx_kl
    );
}

/// Progress every `every` rollouts.
fn progress(quiet: bool, every: usize) -> impl FnMut(&TrainLogRow) {
    let mut i = 0usize;
    move |row| {
        i += 1;
        if !quiet && i % every == 0 {
            print_progress(row);
        }
    }
}

pub fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Train(args) => {
            let cfg = train_config(&args)?;
            let out = commands::cmd_train(&cfg, progress(args.quiet, 100))?;
            println!(
                "trained {} steps ({} updates); model written to {}",
                out.log.last().map_or(0, |r| r.step),
                out.updates,
                cfg.model_out.display()
            );
        }
        Command::Eval(args) => {
            validate_mask(&args.drop_features)?;
            let seeds = args.seeds.clone().unwrap_or_else(|| (0..args.runs as u64).collect());
            let req = EvalRequest {
                model: args.model,
                manifest: args.manifest,
                datasets: args.datasets,
                strategies: args.strategies,
                settings: EvalSettings {
                    budget: args.budget,
                    seeds,
                    checkpoints: args.checkpoints,
                    k: args.k,
                    mask: FeatureMask::dropping(&args.drop_features),
                },
                out_dir: args.out,
            };
            let report = commands::cmd_eval(&req)?;
            print_means(&report, &req.strategies, req.settings.budget);
            println!("report written to {}", req.out_dir.join("report.csv").display());
        }
        Command::Bench(args) => {
            let cfg = bench_config(&args)?;
            let report = commands::cmd_bench(&cfg, args.seed, progress(false, 100))?;
            print_means(&report, &cfg.strategies, cfg.budget);
            println!("results written to {}", cfg.out_dir.display());
        }
        Command::Synth(args) => {
            let req = SynthRequest {
                out_dir: args.out,
                preset: args.preset.into(),
                seeds: parse_seeds(&args.seeds)?,
                dims: args.dims,
                n: args.n,
                anomaly_fraction: args.anomaly_fraction,
            };
            let manifest = commands::cmd_synth(&req)?;
            println!("{} datasets written to {}", manifest.datasets.len(), req.out_dir.display());
        }
        Command::Ablate(args) => {
            let cfg: AblateConfig = config::load(Some(&args.config), Map::new())?;
            let rows = commands::cmd_ablate(&cfg, args.seed)?;
            for r in &rows {
                let cols: Vec<String> = r.methods.iter().map(|(m, mean, se)| format!("{m} {mean:.2} ± {se:.2}")).collect();
                println!("{:<20} {}", r.variant, cols.join("  "));
            }
            println!("summary written to {}", cfg.bench.out_dir.join("ablation.csv").display());
        }
        Command::Serve(args) => {
            let cfg = activeq_service::ServiceConfig {
                model_dir: args.model_dir,
                snapshot_dir: args.snapshot_dir,
                upload_limit: args.upload_limit,
            };
            activeq_service::serve_blocking(cfg, args.port).map_err(CliError::Service)?;
        }
    }
    Ok(())
}

fn print_means(report: &activeq::bench::BenchReport, strategies: &[String], budget: usize) {
    let cp = report.rows.iter().map(|r| r.checkpoint).filter(|&c| c <= budget).max().unwrap_or(budget);
    for m in strategies {
        if let Some(mean) = report.method_mean(m, cp) {
            println!("{m:<14} mean discovered at {cp}: {mean:.2}");
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn seed_lists() {
        assert_eq!(parse_seeds("0-3,7").unwrap(), [0, 1, 2, 3, 7]);
        assert_eq!(parse_seeds("5").unwrap(), [5]);
        assert!(parse_seeds("3-1").is_err());
        assert!(parse_seeds("x").is_err());
        assert!(parse_seeds("").is_err());
    }

    proptest::proptest! {
        #[test]
        fn seed_lists_round_trip(parts in proptest::collection::vec((0u64..500, 0u64..20, proptest::bool::ANY), 1..6)) {
            let mut text = Vec::new();
            let mut expected = Vec::new();
            for &(a, len, as_range) in &parts {
                if as_range {
                    text.push(format!("{a}-{}", a + len));
                    expected.extend(a..=a + len);
                } else {
                    text.push(a.to_string());
                    expected.push(a);
                }
            }
            proptest::prop_assert_eq!(parse_seeds(&text.join(",")).unwrap(), expected);
        }
    }

    #[test]
    fn cli_parses() {
        use clap::CommandFactory;
        Cli::command().debug_assert();
        let cli = Cli::try_parse_from(["activeq", "bench", "--config", "b.json"]);
        assert!(cli.is_err(), "bench requires --seed");
    }

    #[test]
    fn flags_override_config_file() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("t.json");
        std::fs::write(&path, r#"{"manifest": "m.json", "model_out": "a.bin", "ppo": {"gamma": 0.9, "rollout_len": 64}}"#)
            .unwrap();
        let cli = Cli::try_parse_from([
            "activeq", "train", "--config", path.to_str().unwrap(), "--timesteps", "640", "--seed", "4",
        ])
        .unwrap();
        let Command::Train(args) = cli.command else { panic!() };
        let cfg = train_config(&args).unwrap();
        assert_eq!(cfg.seed, 4);
        assert_eq!(cfg.ppo.total_timesteps, 640);
        assert_eq!(cfg.ppo.gamma, 0.9);
        assert_eq!(cfg.ppo.rollout_len, 64);
        assert_eq!(cfg.model_out, dir.path().join("a.bin"));
    }
}
