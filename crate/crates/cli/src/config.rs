//! JSON configuration files. Relative paths inside a file resolve against
//! the file's directory; values given as command-line flags are merged over
//! the file before validation, so a schema error always names the field.

use std::path::{Path, PathBuf};

use activeq::bench::DEFAULT_CHECKPOINTS;
use activeq::features::{DEFAULT_K, N_FEATURES};
use activeq::strategy::{META_POLICY, UNSUPERVISED};
use activeq::trainer::{EnvConfig, TrainOptions, DEFAULT_EPISODE_LEN};
use activeq::{FeatureMask, PpoHyper};
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use serde_json::{Map, Value};

use crate::error::{CliError, Result};

fn default_k() -> usize {
    DEFAULT_K
}

fn default_negative_reward() -> f64 {
    EnvConfig::default().normal_reward
}

fn default_episode_len() -> usize {
    DEFAULT_EPISODE_LEN
}

fn default_budget() -> usize {
    100
}

fn default_checkpoints() -> Vec<usize> {
    DEFAULT_CHECKPOINTS.to_vec()
}

fn default_strategies() -> Vec<String> {
    vec![META_POLICY.into(), UNSUPERVISED.into()]
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub manifest: PathBuf,
    /// Manifest entries to train on; empty means all.
    #[serde(default)]
    pub datasets: Vec<String>,
    #[serde(default)]
    pub seed: u64,
    pub model_out: PathBuf,
    #[serde(default)]
    pub log_out: Option<PathBuf>,
    #[serde(default = "default_k")]
    pub k: usize,
    #[serde(default)]
    pub drop_features: Vec<usize>,
    /// Reward for querying a normal instance.
    #[serde(default = "default_negative_reward")]
    pub negative_reward: f64,
    #[serde(default = "default_episode_len")]
    pub episode_len: usize,
    #[serde(default)]
    pub ppo: PpoHyper,
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        validate_mask(&self.drop_features)?;
        if !self.negative_reward.is_finite() {
            return Err(CliError::Invalid("negative_reward must be finite".into()));
        }
        if self.k == 0 || self.episode_len == 0 {
            return Err(CliError::Invalid("k and episode_len must be positive".into()));
        }
        self.ppo.validate()?;
        Ok(())
    }

    pub fn mask(&self) -> FeatureMask {
        FeatureMask::dropping(&self.drop_features)
    }

    pub fn options(&self) -> TrainOptions {
        TrainOptions {
            hyper: self.ppo,
            env: EnvConfig {
                episode_len: self.episode_len,
                normal_reward: self.negative_reward,
                ..EnvConfig::default()
            },
            ..TrainOptions::default()
        }
    }

    fn resolve(&mut self, base: &Path) {
        self.manifest = base.join(&self.manifest);
        self.model_out = base.join(&self.model_out);
        if let Some(p) = &self.log_out {
            self.log_out = Some(base.join(p));
        }
    }
}

/// Train on one list of manifest entries, evaluate on a disjoint one.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BenchConfig {
    pub manifest: PathBuf,
    pub train: Vec<String>,
    pub eval: Vec<String>,
    pub out_dir: PathBuf,
    #[serde(default = "default_budget")]
    pub budget: usize,
    /// Evaluation runs; seeds default to `0..runs`.
    #[serde(default)]
    pub runs: Option<usize>,
    #[serde(default)]
    pub seeds: Option<Vec<u64>>,
    #[serde(default = "default_checkpoints")]
    pub checkpoints: Vec<usize>,
    #[serde(default = "default_strategies")]
    pub strategies: Vec<String>,
    #[serde(default = "default_k")]
    pub k: usize,
    #[serde(default)]
    pub drop_features: Vec<usize>,
    #[serde(default = "default_negative_reward")]
    pub negative_reward: f64,
    /// Overrides `ppo.gamma`.
    #[serde(default)]
    pub gamma: Option<f64>,
    #[serde(default = "default_episode_len")]
    pub episode_len: usize,
    #[serde(default)]
    pub ppo: PpoHyper,
}

impl BenchConfig {
    pub fn validate(&self) -> Result<()> {
        if self.train.is_empty() || self.eval.is_empty() {
            return Err(CliError::Invalid("train and eval lists must be non-empty".into()));
        }
        if let Some(name) = self.train.iter().find(|n| self.eval.contains(n)) {
            return Err(CliError::Invalid(format!("dataset {name:?} is in both train and eval")));
        }
        if self.runs == Some(0) {
            return Err(CliError::Invalid("runs must be at least 1".into()));
        }
        if let (Some(r), Some(s)) = (self.runs, &self.seeds) {
            if r != s.len() {
                return Err(CliError::Invalid(format!("runs = {r} but {} seeds are listed", s.len())));
            }
        }
        if self.seeds.as_ref().is_some_and(Vec::is_empty) {
            return Err(CliError::Invalid("seeds must be non-empty".into()));
        }
        if self.budget == 0 {
            return Err(CliError::Invalid("budget must be positive".into()));
        }
        self.train_config(0, PathBuf::new()).validate()
    }

    pub fn eval_seeds(&self) -> Vec<u64> {
        match &self.seeds {
            Some(s) => s.clone(),
            None => (0..self.runs.unwrap_or(5) as u64).collect(),
        }
    }

    /// The training half of this benchmark.
    pub fn train_config(&self, seed: u64, model_out: PathBuf) -> TrainConfig {
        let mut ppo = self.ppo;
        if let Some(g) = self.gamma {
            ppo.gamma = g;
        }
        TrainConfig {
            manifest: self.manifest.clone(),
            datasets: self.train.clone(),
            seed,
            model_out,
            log_out: None,
            k: self.k,
            drop_features: self.drop_features.clone(),
            negative_reward: self.negative_reward,
            episode_len: self.episode_len,
            ppo,
        }
    }

    fn resolve(&mut self, base: &Path) {
        self.manifest = base.join(&self.manifest);
        self.out_dir = base.join(&self.out_dir);
    }
}

/// A base benchmark and the single-knob variants to run against it. With
/// every list empty the base runs once.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AblateConfig {
    pub bench: BenchConfig,
    #[serde(default)]
    pub feature_drops: Vec<Vec<usize>>,
    #[serde(default)]
    pub negative_rewards: Vec<f64>,
    #[serde(default)]
    pub gammas: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Variant {
    pub name: String,
    pub bench: BenchConfig,
}

impl AblateConfig {
    pub fn variants(&self) -> Vec<Variant> {
        let mut out = Vec::new();
        for drop in &self.feature_drops {
            let bench = BenchConfig {
                drop_features: drop.clone(),
                ..self.bench.clone()
            };
            out.push(Variant { name: format!("drop_{}", bench_mask_label(drop)), bench });
        }
        for &r in &self.negative_rewards {
            let bench = BenchConfig {
                negative_reward: r,
                ..self.bench.clone()
            };
            out.push(Variant { name: format!("reward_{r}"), bench });
        }
        for &g in &self.gammas {
            let bench = BenchConfig {
                gamma: Some(g),
                ..self.bench.clone()
            };
            out.push(Variant { name: format!("gamma_{g}"), bench });
        }
        if out.is_empty() {
            out.push(Variant { name: "base".into(), bench: self.bench.clone() });
        }
        out
    }

    pub fn validate(&self) -> Result<()> {
        self.variants().iter().try_for_each(|v| v.bench.validate())
    }

    fn resolve(&mut self, base: &Path) {
        self.bench.resolve(base);
    }
}

fn bench_mask_label(drop: &[usize]) -> String {
    if drop.iter().all(|&c| c < N_FEATURES) {
        FeatureMask::dropping(drop).label()
    } else {
        drop.iter().map(usize::to_string).collect::<Vec<_>>().join("-")
    }
}

pub fn validate_mask(drop: &[usize]) -> Result<()> {
    match drop.iter().find(|&&c| c >= N_FEATURES) {
        Some(c) => Err(CliError::Invalid(format!("feature column {c} is out of range 0..{N_FEATURES}"))),
        None => Ok(()),
    }
}

/// Config files whose relative paths resolve against their own directory.
pub trait FileConfig: DeserializeOwned {
    fn resolve_paths(&mut self, base: &Path);
}

impl FileConfig for TrainConfig {
    fn resolve_paths(&mut self, base: &Path) {
        self.resolve(base)
    }
}

impl FileConfig for BenchConfig {
    fn resolve_paths(&mut self, base: &Path) {
        self.resolve(base)
    }
}

impl FileConfig for AblateConfig {
    fn resolve_paths(&mut self, base: &Path) {
        self.resolve(base)
    }
}

/// Parses `text` strictly, reporting the path of the offending field.
pub fn parse<T: DeserializeOwned>(text: &str, origin: &str) -> Result<T> {
    let de = &mut serde_json::Deserializer::from_str(text);
    serde_path_to_error::deserialize(de).map_err(|e| schema_error(origin, e))
}

fn from_value<T: DeserializeOwned>(value: Value, origin: &str) -> Result<T> {
    serde_path_to_error::deserialize(value).map_err(|e| schema_error(origin, e))
}

fn schema_error(origin: &str, e: serde_path_to_error::Error<serde_json::Error>) -> CliError {
    CliError::Schema {
        origin: origin.to_owned(),
        field: e.path().to_string(),
        message: e.inner().to_string(),
    }
}

/// Reads an optional config file, overlays `overrides` (absolute paths or
/// plain values keyed by top-level field) and deserializes the result.
pub fn load<T: FileConfig>(file: Option<&Path>, overrides: Map<String, Value>) -> Result<T> {
    let (mut value, base, origin) = match file {
        Some(path) => {
            let text = std::fs::read_to_string(path).map_err(|e| CliError::io(path.to_path_buf(), e))?;
            let value: Value = parse(&text, &path.display().to_string())?;
            let base = path.parent().map(Path::to_path_buf).unwrap_or_default();
            (value, base, path.display().to_string())
        }
        None => (Value::Object(Map::new()), PathBuf::new(), "command line".to_owned()),
    };
    match &mut value {
        Value::Object(map) => map.extend(overrides),
        _ => {
            return Err(CliError::Schema {
                origin,
                field: ".".into(),
                message: "expected a JSON object".into(),
            })
        }
    }
    let mut cfg: T = from_value(value, &origin)?;
    cfg.resolve_paths(&base);
    Ok(cfg)
}

/// Makes a flag path absolute so that config-relative resolution leaves it alone.
pub fn absolute(path: &Path) -> Result<PathBuf> {
    std::path::absolute(path).map_err(|e| CliError::io(path.to_path_buf(), e))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn missing_field_is_named() {
        let err = parse::<TrainConfig>(r#"{"model_out": "m.bin"}"#, "c.json").unwrap_err();
        assert!(err.to_string().contains("manifest"), "{err}");
        let err = parse::<TrainConfig>(r#"{"manifest": "m", "model_out": "m.bin", "ppo": {"gamma": "x"}}"#, "c.json")
            .unwrap_err();
        assert!(err.to_string().contains("ppo.gamma"), "{err}");
        let err = parse::<TrainConfig>(r#"{"manifest": "m", "model_out": "o", "ppo": {"gama": 0.5}}"#, "c.json")
            .unwrap_err();
        assert!(err.to_string().contains("gama"), "{err}");
        let err = parse::<TrainConfig>(r#"{"manifest": "m", "model_out": "o", "sed": 1}"#, "c.json").unwrap_err();
        assert!(err.to_string().contains("sed"), "{err}");
    }

    #[test]
    fn defaults_and_resolution() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("train.json");
        std::fs::write(&path, r#"{"manifest": "data/manifest.json", "model_out": "out/m.bin"}"#).unwrap();
        let mut over = Map::new();
        over.insert("seed".into(), 9.into());
        let cfg: TrainConfig = load(Some(&path), over).unwrap();
        assert_eq!(cfg.manifest, dir.path().join("data/manifest.json"));
        assert_eq!(cfg.model_out, dir.path().join("out/m.bin"));
        assert_eq!(cfg.seed, 9);
        assert_eq!(cfg.k, DEFAULT_K);
        assert_eq!(cfg.negative_reward, -0.1);
        assert_eq!(cfg.ppo, PpoHyper::default());
    }

    #[test]
    fn bench_split_must_be_disjoint() {
        let text = r#"{"manifest": "m", "train": ["a", "b"], "eval": ["b"], "out_dir": "o"}"#;
        let cfg: BenchConfig = parse(text, "b.json").unwrap();
        assert!(cfg.validate().unwrap_err().to_string().contains("\"b\""));
        let text = r#"{"manifest": "m", "train": ["a"], "eval": ["b"], "out_dir": "o", "runs": 0}"#;
        assert!(parse::<BenchConfig>(text, "b.json").unwrap().validate().is_err());
        let text = r#"{"manifest": "m", "train": ["a"], "eval": ["b"], "out_dir": "o", "runs": 3}"#;
        let cfg: BenchConfig = parse(text, "b.json").unwrap();
        cfg.validate().unwrap();
        assert_eq!(cfg.eval_seeds(), [0, 1, 2]);
    }

    #[test]
    fn ablation_variants_change_one_knob() {
        let text = r#"{"bench": {"manifest": "m", "train": ["a"], "eval": ["b"], "out_dir": "o"},
                       "feature_drops": [[1, 2, 3]], "negative_rewards": [-10, -0.1], "gammas": [0.1, 0.6, 0.99]}"#;
        let cfg: AblateConfig = parse(text, "a.json").unwrap();
        let v = cfg.variants();
        let names: Vec<&str> = v.iter().map(|v| v.name.as_str()).collect();
        assert_eq!(names, ["drop_1-2-3", "reward_-10", "reward_-0.1", "gamma_0.1", "gamma_0.6", "gamma_0.99"]);
        assert_eq!(v[1].bench.negative_reward, -10.0);
        assert_eq!(v[1].bench.gamma, None);
        assert_eq!(v[5].bench.train_config(0, "m".into()).ppo.gamma, 0.99);
        cfg.validate().unwrap();
        let bad = AblateConfig { feature_drops: vec![vec![6]], ..cfg };
        assert!(bad.validate().is_err());
    }
}
