//! Training the meta-policy: a streaming environment over shuffled labeled
//! datasets, fixed-length rollouts, generalized advantage estimation and the
//! PPO update loop.

use serde::{Deserialize, Serialize};

use crate::data::{Label, RawDataset};
use crate::error::{Error, Result};
use crate::features::{FeatureContext, FeatureMask, MetaFeatures, QueryState, N_FEATURES};
use crate::policy::{
    adam_step, AdamState, Architecture, InputMoments, LossReport, PolicyModel, PpoBatch, PpoHyper, ACTION_QUERY,
};
use crate::rng::SeededRng;

pub const DEFAULT_EPISODE_LEN: usize = 2000;

const ENV_STREAM: u64 = 0xE4F;
const ACTION_STREAM: u64 = 0xAC7;
const MINIBATCH_STREAM: u64 = 0x3B;

pub type State = [f64; N_FEATURES];

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EnvConfig {
    pub episode_len: usize,
    pub anomaly_reward: f64,
    pub normal_reward: f64,
}

impl Default for EnvConfig {
    fn default() -> Self {
        Self {
            episode_len: DEFAULT_EPISODE_LEN,
            anomaly_reward: 1.0,
            normal_reward: -0.1,
        }
    }
}

/// A labeled dataset with its label-independent feature inputs.
#[derive(Debug, Clone)]
pub struct TrainingSet {
    pub name: String,
    pub ctx: FeatureContext,
    pub labels: Vec<Label>,
}

impl TrainingSet {
    pub fn prepare(raw: &RawDataset, k: usize, mask: FeatureMask, seed: u64) -> Result<Self> {
        let labels = raw.labels.clone().ok_or_else(|| Error::Unlabeled(raw.name.clone()))?;
        let ctx = FeatureContext::prepare(&raw.x, k, seed)?.with_mask(mask);
        Ok(Self {
            name: raw.name.clone(),
            ctx,
            labels,
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StepOutcome {
    /// `None` once the episode is over.
    pub next_state: Option<State>,
    pub reward: f64,
    pub done: bool,
    pub revealed: Option<Label>,
}

/// One instance at a time from a shuffled labeled dataset. Querying reveals
/// the label, which immediately feeds the label-dependent features of every
/// later instance in the stream.
#[derive(Debug)]
pub struct StreamEnv<'a> {
    sets: &'a [TrainingSet],
    cfg: EnvConfig,
    rng: SeededRng,
    current: usize,
    order: Vec<usize>,
    cursor: usize,
    limit: usize,
    qs: QueryState,
    mf: MetaFeatures,
    done: bool,
}

impl<'a> StreamEnv<'a> {
    pub fn new(sets: &'a [TrainingSet], cfg: EnvConfig, seed: u64) -> Result<(Self, State)> {
        let first = sets.first().ok_or(Error::NoLabeledDatasets)?;
        let mut env = Self {
            sets,
            cfg,
            rng: SeededRng::derive(seed, ENV_STREAM),
            current: 0,
            order: Vec::new(),
            cursor: 0,
            limit: 0,
            qs: QueryState::new(0),
            mf: first.ctx.cold(),
            done: true,
        };
        let state = env.reset();
        Ok((env, state))
    }

    /// Picks a dataset uniformly, draws a fresh permutation and clears labels.
    pub fn reset(&mut self) -> State {
        self.current = self.rng.index(self.sets.len());
        let set = &self.sets[self.current];
        let n = set.ctx.n();
        self.order = self.rng.permutation(n);
        self.cursor = 0;
        self.limit = self.cfg.episode_len.min(n);
        self.qs = QueryState::new(n);
        self.mf = set.ctx.cold();
        self.done = false;
        self.mf.row(self.order[0])
    }

    pub fn current_dataset(&self) -> &str {
        &self.sets[self.current].name
    }

    pub fn order(&self) -> &[usize] {
        &self.order
    }

    pub fn query_state(&self) -> &QueryState {
        &self.qs
    }

    pub fn features(&self) -> &MetaFeatures {
        &self.mf
    }

    pub fn step(&mut self, action: usize) -> Result<StepOutcome> {
        if self.done {
            return Err(Error::EpisodeDone);
        }
        let set = &self.sets[self.current];
        let idx = self.order[self.cursor];
        let (reward, revealed) = if action == ACTION_QUERY {
            let label = set.labels[idx];
            self.qs.set(idx, label)?;
            set.ctx.update(&mut self.mf, &self.qs, idx)?;
            let r = if label.is_anomaly() { self.cfg.anomaly_reward } else { self.cfg.normal_reward };
            (r, Some(label))
        } else {
            (0.0, None)
        };
        self.cursor += 1;
        self.done = self.cursor >= self.limit;
        let next_state = (!self.done).then(|| self.mf.row(self.order[self.cursor]));
        Ok(StepOutcome {
            next_state,
            reward,
            done: self.done,
            revealed,
        })
    }
}

/// Fixed-length trajectory collected with the pre-update policy.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Rollout {
    pub states: Vec<State>,
    pub actions: Vec<usize>,
    pub log_probs: Vec<f64>,
    pub rewards: Vec<f64>,
    pub values: Vec<f64>,
    /// Step `t` ended an episode.
    pub dones: Vec<bool>,
    /// Value of the state after the last step; 0 when that step ended an episode.
    pub bootstrap_value: f64,
}

impl Rollout {
    pub fn len(&self) -> usize {
        self.rewards.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rewards.is_empty()
    }
}

/// Truncated GAE. Returns `(advantages, value_targets)` with
/// `target_t = A_t + V(s_t)`. Episode ends stop both bootstrapping and the
/// backward accumulation.
pub fn gae(rollout: &Rollout, gamma: f64, lambda: f64) -> (Vec<f64>, Vec<f64>) {
    let t_len = rollout.len();
    let mut adv = vec![0.0; t_len];
    let mut running = 0.0;
    for t in (0..t_len).rev() {
        let nonterminal = if rollout.dones[t] { 0.0 } else { 1.0 };
        let next_value = if t + 1 < t_len { rollout.values[t + 1] } else { rollout.bootstrap_value };
        let delta = rollout.rewards[t] + gamma * next_value * nonterminal - rollout.values[t];
        running = delta + gamma * lambda * nonterminal * running;
        adv[t] = running;
    }
    let targets = adv.iter().zip(&rollout.values).map(|(a, v)| a + v).collect();
    (adv, targets)
}

/// Zero mean, unit (population) standard deviation.
pub fn normalize_advantages(adv: &mut [f64]) {
    let n = adv.len() as f64;
    let mean = adv.iter().sum::<f64>() / n;
    let std = (adv.iter().map(|a| (a - mean) * (a - mean)).sum::<f64>() / n).sqrt();
    for a in adv.iter_mut() {
        *a = (*a - mean) / (std + 1e-8);
    }
}

/// Diagnostics for one outer iteration (one rollout plus its updates).
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct TrainLogRow {
    pub step: usize,
    /// Mean total reward of the last (up to) ten finished episodes, or the
    /// running total of the current episode before any has finished.
    pub mean_episode_reward: f64,
    pub rollout_reward: f64,
    pub query_rate: f64,
    pub mean_query_prob: f64,
    pub policy_loss: f64,
    pub value_loss: f64,
    pub entropy: f64,
    pub approx_kl: f64,
    pub clip_fraction: f64,
}

pub const TRAIN_LOG_HEADER: [&str; 10] = [
    "step",
    "mean_episode_reward",
    "rollout_reward",
    "query_rate",
    "mean_query_prob",
    "policy_loss",
    "value_loss",
    "entropy",
    "approx_kl",
    "clip_fraction",
];

impl TrainLogRow {
    pub fn fields(&self) -> [f64; 10] {
        [
            self.step as f64,
            self.mean_episode_reward,
            self.rollout_reward,
            self.query_rate,
            self.mean_query_prob,
            self.policy_loss,
            self.value_loss,
            self.entropy,
            self.approx_kl,
            self.clip_fraction,
        ]
    }
}

/// Header plus one row per rollout; `step` as an integer, the rest in
/// round-trip float notation.
pub fn write_log_csv<W: std::io::Write>(log: &[TrainLogRow], writer: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(writer);
    let err = |e: csv::Error| Error::Csv(e.to_string());
    w.write_record(TRAIN_LOG_HEADER).map_err(err)?;
    for row in log {
        let mut rec = vec![row.step.to_string()];
        rec.extend(row.fields()[1..].iter().map(|v| format!("{v:?}")));
        w.write_record(&rec).map_err(err)?;
    }
    w.flush().map_err(|e| Error::Csv(e.to_string()))
}

pub fn save_log_csv(log: &[TrainLogRow], path: impl AsRef<std::path::Path>) -> Result<()> {
    let path = path.as_ref();
    let file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    write_log_csv(log, std::io::BufWriter::new(file))
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct TrainOptions {
    pub hyper: PpoHyper,
    pub env: EnvConfig,
    pub arch: Architecture,
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub model: PolicyModel,
    pub log: Vec<TrainLogRow>,
    pub updates: usize,
}

/// Collects `len` steps, resetting the environment whenever an episode ends.
pub fn collect_rollout(
    env: &mut StreamEnv<'_>,
    state: &mut State,
    model: &PolicyModel,
    len: usize,
    rng: &mut SeededRng,
    episodes: &mut EpisodeTracker,
) -> Result<Rollout> {
    let mut ro = Rollout::default();
    for _ in 0..len {
        let out = model.forward(state)?;
        let action = usize::from(rng.unit() < out.probs[ACTION_QUERY]);
        let step = env.step(action)?;
        ro.states.push(*state);
        ro.actions.push(action);
        ro.log_probs.push(out.log_probs[action]);
        ro.values.push(out.value);
        ro.rewards.push(step.reward);
        ro.dones.push(step.done);
        episodes.record(step.reward, step.done);
        *state = match step.next_state {
            Some(s) => s,
            None => env.reset(),
        };
    }
    ro.bootstrap_value = if *ro.dones.last().unwrap_or(&true) {
        0.0
    } else {
        model.forward(state)?.value
    };
    Ok(ro)
}

/// Re-evaluates log-probabilities and values of a rollout under `model`,
/// used after the input normalization changes. `next_state` is the state
/// following the last step.
pub fn reevaluate(ro: &mut Rollout, model: &PolicyModel, next_state: &State) -> Result<()> {
    let outs = model.forward_batch(&ro.states)?;
    for (t, out) in outs.iter().enumerate() {
        ro.log_probs[t] = out.log_probs[ro.actions[t]];
        ro.values[t] = out.value;
    }
    if !ro.dones.last().unwrap_or(&true) {
        ro.bootstrap_value = model.forward(next_state)?.value;
    }
    Ok(())
}

#[derive(Debug, Clone, Default)]
pub struct EpisodeTracker {
    running: f64,
    finished: Vec<f64>,
}

impl EpisodeTracker {
    fn record(&mut self, reward: f64, done: bool) {
        self.running += reward;
        if done {
            self.finished.push(self.running);
            self.running = 0.0;
        }
    }

    pub fn recent_mean(&self) -> f64 {
        if self.finished.is_empty() {
            return self.running;
        }
        let tail = &self.finished[self.finished.len().saturating_sub(10)..];
        tail.iter().sum::<f64>() / tail.len() as f64
    }

    pub fn finished(&self) -> &[f64] {
        &self.finished
    }
}

/// Runs PPO until `total_timesteps` (rounded up to whole rollouts).
/// Deterministic for a given seed. `on_iteration` sees each log row as it
/// is produced.
pub fn train(
    sets: &[TrainingSet],
    opts: &TrainOptions,
    seed: u64,
    mut on_iteration: impl FnMut(&TrainLogRow),
) -> Result<TrainOutcome> {
    let h = opts.hyper;
    h.validate()?;
    let (mut env, mut state) = StreamEnv::new(sets, opts.env, seed)?;
    let mut model = PolicyModel::init(opts.arch, seed);
    let mut adam = AdamState::new(&model);
    let mut action_rng = SeededRng::derive(seed, ACTION_STREAM);
    let mut batch_rng = SeededRng::derive(seed, MINIBATCH_STREAM);
    let mut episodes = EpisodeTracker::default();
    let mut moments = InputMoments::new(opts.arch.input);
    let iterations = h.total_timesteps.div_ceil(h.rollout_len);
    let minibatch = h.rollout_len / h.minibatches;
    let mut log = Vec::with_capacity(iterations);
    let mut updates = 0;

    for it in 0..iterations {
        let mut ro = collect_rollout(&mut env, &mut state, &model, h.rollout_len, &mut action_rng, &mut episodes)?;
        let sampled_log_probs = ro.log_probs.clone();
        moments.update(&ro.states);
        model.set_input_norm(moments.norm())?;
        reevaluate(&mut ro, &model, &state)?;
        let (mut adv, targets) = gae(&ro, h.gamma, h.lambda);
        normalize_advantages(&mut adv);
        let data = PpoBatch {
            states: ro.states.clone(),
            actions: ro.actions.clone(),
            old_log_probs: ro.log_probs.clone(),
            advantages: adv,
            value_targets: targets,
        };

        let mut sum = LossReport::default();
        let mut count = 0usize;
        for _ in 0..h.epochs {
            let perm = batch_rng.permutation(h.rollout_len);
            for mb in 0..h.minibatches {
                let idx = &perm[mb * minibatch..(mb + 1) * minibatch];
                let (report, mut grad) = model.backward(&data.select(idx), &h)?;
                grad.clip_norm(h.max_grad_norm);
                adam_step(&mut model, &grad, &mut adam, h.learning_rate)?;
                sum.policy_loss += report.policy_loss;
                sum.value_loss += report.value_loss;
                sum.entropy += report.entropy;
                sum.approx_kl += report.approx_kl;
                sum.clip_fraction += report.clip_fraction;
                count += 1;
                updates += 1;
            }
        }
        let c = count as f64;
        let steps = ro.len() as f64;
        let mean_query_prob = sampled_log_probs
            .iter()
            .zip(&ro.actions)
            .map(|(lp, &a)| if a == ACTION_QUERY { lp.exp() } else { 1.0 - lp.exp() })
            .sum::<f64>()
            / steps;
        let row = TrainLogRow {
            step: (it + 1) * h.rollout_len,
            mean_episode_reward: episodes.recent_mean(),
            rollout_reward: ro.rewards.iter().sum(),
            query_rate: ro.actions.iter().filter(|&&a| a == ACTION_QUERY).count() as f64 / steps,
            mean_query_prob,
            policy_loss: sum.policy_loss / c,
            value_loss: sum.value_loss / c,
            entropy: sum.entropy / c,
            approx_kl: sum.approx_kl / c,
            clip_fraction: sum.clip_fraction / c,
        };
        on_iteration(&row);
        log.push(row);
    }
    Ok(TrainOutcome { model, log, updates })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::Matrix;
    use crate::features::COL_KNN_FLAG;

    fn toy_set(n: usize, anomaly_every: usize, seed: u64) -> TrainingSet {
        let mut rng = SeededRng::new(seed);
        let rows: Vec<Vec<f64>> = (0..n).map(|_| vec![rng.normal(), rng.normal()]).collect();
        let labels = (0..n)
            .map(|i| if anomaly_every > 0 && i % anomaly_every == 0 { Label::Anomaly } else { Label::Normal })
            .collect();
        let raw = RawDataset::new(
            format!("toy{seed}"),
            vec!["a".into(), "b".into()],
            Matrix::from_rows(&rows).unwrap(),
            Some(labels),
        )
        .unwrap();
        TrainingSet::prepare(&raw, 5, FeatureMask::all(), seed).unwrap()
    }

    #[test]
    fn reset_starts_cold_and_is_deterministic() {
        let sets = vec![toy_set(30, 5, 1)];
        let (env, s) = StreamEnv::new(&sets, EnvConfig::default(), 4).unwrap();
        let cap = sets[0].ctx.d_cap();
        assert_eq!([s[1], s[2], s[4], s[5]], [cap; 4]);
        assert_eq!(s[COL_KNN_FLAG], 0.0);
        assert_eq!(env.current_dataset(), "toy1");
        let (env2, s2) = StreamEnv::new(&sets, EnvConfig::default(), 4).unwrap();
        assert_eq!(env.order(), env2.order());
        assert_eq!(s, s2);

        let two = vec![toy_set(20, 4, 1), toy_set(25, 4, 2)];
        let pick = |seed| StreamEnv::new(&two, EnvConfig::default(), seed).unwrap().0.current_dataset().to_owned();
        assert_eq!(pick(9), pick(9));
        assert!(StreamEnv::new(&[], EnvConfig::default(), 0).is_err());
    }

    #[test]
    fn rewards_follow_the_three_valued_scheme() {
        let sets = vec![toy_set(40, 2, 3)];
        let (mut env, _) = StreamEnv::new(&sets, EnvConfig::default(), 1).unwrap();
        let mut seen = (false, false);
        while !(seen.0 && seen.1) {
            let idx = env.order()[env.cursor];
            let truth = sets[0].labels[idx];
            let out = env.step(ACTION_QUERY).unwrap();
            assert_eq!(out.revealed, Some(truth));
            match truth {
                Label::Anomaly => {
                    assert_eq!(out.reward, 1.0);
                    seen.0 = true;
                }
                Label::Normal => {
                    assert_eq!(out.reward, -0.1);
                    seen.1 = true;
                }
            }
        }
        let before = env.query_state().clone();
        let out = env.step(0).unwrap();
        assert_eq!(out.reward, 0.0);
        assert_eq!(env.query_state(), &before);
    }

    #[test]
    fn episode_ends_at_dataset_size() {
        let sets = vec![toy_set(12, 3, 5)];
        let (mut env, _) = StreamEnv::new(&sets, EnvConfig::default(), 1).unwrap();
        for t in 0..12 {
            let out = env.step(t % 2).unwrap();
            assert_eq!(out.done, t == 11);
        }
        assert!(matches!(env.step(0), Err(Error::EpisodeDone)));
        let short = EnvConfig { episode_len: 5, ..EnvConfig::default() };
        let (mut env, _) = StreamEnv::new(&sets, short, 1).unwrap();
        let dones: Vec<bool> = (0..5).map(|_| env.step(0).unwrap().done).collect();
        assert_eq!(dones, [false, false, false, false, true]);
    }

    #[test]
    fn env_features_match_full_extract() {
        let sets = vec![toy_set(50, 4, 8)];
        let (mut env, _) = StreamEnv::new(&sets, EnvConfig::default(), 2).unwrap();
        for t in 0..30 {
            env.step(usize::from(t % 3 == 0)).unwrap();
            assert_eq!(env.features(), &sets[0].ctx.extract(env.query_state()).unwrap());
        }
    }

    #[test]
    fn gae_small_cases() {
        let ro = Rollout {
            states: vec![[0.0; N_FEATURES]; 3],
            actions: vec![1; 3],
            log_probs: vec![0.0; 3],
            rewards: vec![1.0, 1.0, 1.0],
            values: vec![0.0; 3],
            dones: vec![false; 3],
            bootstrap_value: 0.0,
        };
        let (adv, targets) = gae(&ro, 0.5, 1.0);
        assert_eq!(adv, vec![1.75, 1.5, 1.0]);
        assert_eq!(targets, adv);

        let zero = Rollout { rewards: vec![0.0; 3], ..ro.clone() };
        assert_eq!(gae(&zero, 0.9, 0.95).0, vec![0.0; 3]);

        let valued = Rollout { values: vec![0.3, -0.2, 0.5], bootstrap_value: 0.7, ..ro };
        let (adv, _) = gae(&valued, 0.6, 0.0);
        let deltas = [1.0 + 0.6 * -0.2 - 0.3, 1.0 + 0.6 * 0.5 + 0.2, 1.0 + 0.6 * 0.7 - 0.5];
        assert_eq!(adv, deltas.to_vec());
    }

    #[test]
    fn normalization_gives_zero_mean_unit_std() {
        let mut adv = vec![1.0, -0.1, 0.0, 0.0, 2.5, -0.1, 0.3];
        normalize_advantages(&mut adv);
        let n = adv.len() as f64;
        let mean = adv.iter().sum::<f64>() / n;
        let std = (adv.iter().map(|a| (a - mean).powi(2)).sum::<f64>() / n).sqrt();
        assert!(mean.abs() < 1e-9);
        assert!((std - 1.0).abs() < 1e-6);
    }

    #[test]
    fn one_rollout_means_one_iteration_of_sixteen_updates() {
        let sets = vec![toy_set(60, 6, 2)];
        let opts = TrainOptions {
            hyper: PpoHyper { total_timesteps: 128, ..PpoHyper::default() },
            ..TrainOptions::default()
        };
        let mut seen = 0;
        let out = train(&sets, &opts, 3, |_| seen += 1).unwrap();
        assert_eq!((out.log.len(), out.updates, seen), (1, 16, 1));
        assert_eq!(out.log[0].step, 128);
    }

    #[test]
    fn training_is_deterministic() {
        let sets = vec![toy_set(60, 6, 2), toy_set(40, 5, 3)];
        let opts = TrainOptions {
            hyper: PpoHyper { total_timesteps: 512, ..PpoHyper::default() },
            ..TrainOptions::default()
        };
        let a = train(&sets, &opts, 11, |_| {}).unwrap();
        let b = train(&sets, &opts, 11, |_| {}).unwrap();
        assert_eq!(a.model.to_bytes(), b.model.to_bytes());
        assert_eq!(a.log, b.log);
    }

    #[test]
    fn all_normal_data_teaches_the_policy_to_stop_querying() {
        let sets = vec![toy_set(300, 0, 6)];
        let opts = TrainOptions {
            hyper: PpoHyper { total_timesteps: 5000, ..PpoHyper::default() },
            ..TrainOptions::default()
        };
        let out = train(&sets, &opts, 1, |_| {}).unwrap();
        let first = out.log.first().unwrap().mean_query_prob;
        let last = out.log.last().unwrap().mean_query_prob;
        assert!(last < first, "query probability went {first} -> {last}");
        let (env, s) = StreamEnv::new(&sets, EnvConfig::default(), 0).unwrap();
        drop(env);
        let initial = PolicyModel::init(Architecture::default(), 1).forward(&s).unwrap().probs[1];
        assert!(out.model.forward(&s).unwrap().probs[1] < initial);
    }
}
