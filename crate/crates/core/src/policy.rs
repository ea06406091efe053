//! Meta-policy network: a shared two-layer tanh trunk with a two-way softmax
//! policy head and a scalar value head, trained by minimizing
//!
//! ```text
//! loss = -mean(L_clip) + c1 * mean((V(s) - V_target)^2) - c2 * mean(H(pi(.|s)))
//! ```
//!
//! which is the negated PPO objective. Gradients are analytic; the
//! nonsmooth `min`/`clip` uses the active-branch subgradient.
//!
//! Inputs pass through a fixed affine normalization, `clip((s - shift) /
//! scale, ±10)`, before the trunk. It is identity for a fresh model; training
//! fills it from running state moments ([`InputMoments`]) and it is saved with
//! the parameters. Gradients treat it as a constant.

use std::io::{Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::features::N_FEATURES;
use crate::rng::SeededRng;

pub const N_ACTIONS: usize = 2;
pub const ACTION_SKIP: usize = 0;
pub const ACTION_QUERY: usize = 1;

pub const MODEL_MAGIC: [u8; 8] = *b"AQPOLICY";
pub const MODEL_VERSION: u32 = 1;

pub const ADAM_BETA1: f64 = 0.9;
pub const ADAM_BETA2: f64 = 0.999;
pub const ADAM_EPS: f64 = 1e-5;

const TRUNK_GAIN: f64 = std::f64::consts::SQRT_2;
const POLICY_HEAD_GAIN: f64 = 0.01;
const VALUE_HEAD_GAIN: f64 = 1.0;

pub const INPUT_CLIP: f64 = 10.0;
const INPUT_VAR_EPS: f64 = 1e-8;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Architecture {
    pub input: usize,
    pub hidden1: usize,
    pub hidden2: usize,
}

impl Default for Architecture {
    fn default() -> Self {
        Self {
            input: N_FEATURES,
            hidden1: 64,
            hidden2: 64,
        }
    }
}

/// Offsets of each parameter block inside the flat vector, in file order:
/// W1, b1, W2, b2, W_pi, b_pi, W_v, b_v. Weight blocks are row-major
/// `[fan_in][fan_out]`.
#[derive(Debug, Clone, Copy)]
struct Layout {
    w1: usize,
    b1: usize,
    w2: usize,
    b2: usize,
    wpi: usize,
    bpi: usize,
    wv: usize,
    bv: usize,
    len: usize,
}

impl Architecture {
    fn layout(&self) -> Layout {
        let (i, h1, h2) = (self.input, self.hidden1, self.hidden2);
        let w1 = 0;
        let b1 = w1 + i * h1;
        let w2 = b1 + h1;
        let b2 = w2 + h1 * h2;
        let wpi = b2 + h2;
        let bpi = wpi + h2 * N_ACTIONS;
        let wv = bpi + N_ACTIONS;
        let bv = wv + h2;
        Layout {
            w1,
            b1,
            w2,
            b2,
            wpi,
            bpi,
            wv,
            bv,
            len: bv + 1,
        }
    }

    pub fn param_count(&self) -> usize {
        self.layout().len
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PpoHyper {
    pub gamma: f64,
    pub lambda: f64,
    pub clip: f64,
    pub value_coef: f64,
    pub entropy_coef: f64,
    pub learning_rate: f64,
    pub rollout_len: usize,
    pub epochs: usize,
    pub minibatches: usize,
    pub max_grad_norm: f64,
    pub total_timesteps: usize,
}

impl Default for PpoHyper {
    fn default() -> Self {
        Self {
            gamma: 0.6,
            lambda: 0.95,
            clip: 0.2,
            value_coef: 0.5,
            entropy_coef: 0.01,
            learning_rate: 2.5e-4,
            rollout_len: 128,
            epochs: 4,
            minibatches: 4,
            max_grad_norm: 0.5,
            total_timesteps: 200_000,
        }
    }
}

impl PpoHyper {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(m.into()));
        if !(self.gamma > 0.0 && self.gamma < 1.0) {
            return bad("gamma must lie in (0, 1)");
        }
        if !(self.lambda > 0.0 && self.lambda < 1.0) {
            return bad("lambda must lie in (0, 1)");
        }
        if !(self.clip > 0.0) {
            return bad("clip must be positive");
        }
        if self.rollout_len == 0 || self.epochs == 0 || self.minibatches == 0 {
            return bad("rollout_len, epochs and minibatches must be positive");
        }
        if self.minibatches > self.rollout_len {
            return bad("minibatches cannot exceed rollout_len");
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PolicyOutput {
    pub probs: [f64; N_ACTIONS],
    pub log_probs: [f64; N_ACTIONS],
    pub value: f64,
}

impl PolicyOutput {
    pub fn query_probability(&self) -> f64 {
        self.probs[ACTION_QUERY]
    }

    /// `log p(query) - log p(skip)`: same order as the query probability but
    /// keeps resolution where that probability rounds to 0 or 1.
    pub fn query_log_odds(&self) -> f64 {
        self.log_probs[ACTION_QUERY] - self.log_probs[ACTION_SKIP]
    }

    pub fn entropy(&self) -> f64 {
        -self.probs.iter().zip(&self.log_probs).map(|(p, lp)| p * lp).sum::<f64>()
    }
}

/// Per-feature `shift` and `scale` applied to raw states.
#[derive(Debug, Clone, PartialEq)]
pub struct InputNorm {
    pub shift: Vec<f64>,
    pub scale: Vec<f64>,
}

impl InputNorm {
    pub fn identity(dim: usize) -> Self {
        Self {
            shift: vec![0.0; dim],
            scale: vec![1.0; dim],
        }
    }

    pub fn dim(&self) -> usize {
        self.shift.len()
    }

    pub fn apply(&self, s: &[f64]) -> Vec<f64> {
        s.iter()
            .zip(self.shift.iter().zip(&self.scale))
            .map(|(x, (m, sd))| ((x - m) / sd).clamp(-INPUT_CLIP, INPUT_CLIP))
            .collect()
    }

    fn validate(&self) -> Result<()> {
        if self.shift.len() != self.scale.len() {
            return Err(Error::ModelFormat("input normalization lengths differ".into()));
        }
        if self.shift.iter().any(|v| !v.is_finite()) || self.scale.iter().any(|v| !(v.is_finite() && *v > 0.0)) {
            return Err(Error::ModelFormat("invalid input normalization".into()));
        }
        Ok(())
    }
}

/// Running mean and population variance of states (parallel-merge update).
#[derive(Debug, Clone, PartialEq)]
pub struct InputMoments {
    count: f64,
    mean: Vec<f64>,
    m2: Vec<f64>,
}

impl InputMoments {
    pub fn new(dim: usize) -> Self {
        Self {
            count: 0.0,
            mean: vec![0.0; dim],
            m2: vec![0.0; dim],
        }
    }

    pub fn count(&self) -> f64 {
        self.count
    }

    pub fn update<S: AsRef<[f64]>>(&mut self, states: &[S]) {
        if states.is_empty() {
            return;
        }
        let dim = self.mean.len();
        let nb = states.len() as f64;
        let mut bmean = vec![0.0; dim];
        for s in states {
            for (m, x) in bmean.iter_mut().zip(s.as_ref()) {
                *m += x / nb;
            }
        }
        let mut bm2 = vec![0.0; dim];
        for s in states {
            for ((q, x), m) in bm2.iter_mut().zip(s.as_ref()).zip(&bmean) {
                *q += (x - m) * (x - m);
            }
        }
        let total = self.count + nb;
        for j in 0..dim {
            let delta = bmean[j] - self.mean[j];
            self.mean[j] += delta * nb / total;
            self.m2[j] += bm2[j] + delta * delta * self.count * nb / total;
        }
        self.count = total;
    }

    pub fn mean(&self) -> &[f64] {
        &self.mean
    }

    pub fn variance(&self) -> Vec<f64> {
        let n = self.count.max(1.0);
        self.m2.iter().map(|q| q / n).collect()
    }

    /// `shift = mean`, `scale = sqrt(var + 1e-8)`; identity before any update.
    pub fn norm(&self) -> InputNorm {
        if self.count == 0.0 {
            return InputNorm::identity(self.mean.len());
        }
        InputNorm {
            shift: self.mean.clone(),
            scale: self.variance().iter().map(|v| (v + INPUT_VAR_EPS).sqrt()).collect(),
        }
    }
}

/// Flat parameter vector plus its shape and input normalization.
#[derive(Debug, Clone, PartialEq)]
pub struct PolicyModel {
    arch: Architecture,
    params: Vec<f64>,
    norm: InputNorm,
}

/// Same layout as the model's parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct Gradient {
    arch: Architecture,
    values: Vec<f64>,
}

impl Gradient {
    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn norm(&self) -> f64 {
        self.values.iter().map(|g| g * g).sum::<f64>().sqrt()
    }

    /// Rescales to at most `max_norm`; returns the norm before clipping.
    pub fn clip_norm(&mut self, max_norm: f64) -> f64 {
        let norm = self.norm();
        if norm > max_norm {
            let scale = max_norm / norm;
            for g in &mut self.values {
                *g *= scale;
            }
        }
        norm
    }
}

struct Trace {
    x: Vec<f64>,
    h1: Vec<f64>,
    h2: Vec<f64>,
    out: PolicyOutput,
}

impl PolicyModel {
    pub fn zeros(arch: Architecture) -> Self {
        Self {
            arch,
            params: vec![0.0; arch.param_count()],
            norm: InputNorm::identity(arch.input),
        }
    }

    /// Uniform init with variance `gain^2 / max(fan_in, fan_out)`, the entry
    /// variance of a scaled orthogonal matrix of the same shape. Gains: trunk
    /// √2, policy head 0.01, value head 1.0. Biases start at zero.
    pub fn init(arch: Architecture, seed: u64) -> Self {
        let mut model = Self::zeros(arch);
        let l = arch.layout();
        let mut rng = SeededRng::derive(seed, 0x1417);
        let mut fill = |params: &mut [f64], fan_in: usize, fan_out: usize, gain: f64| {
            let bound = gain * (3.0 / fan_in.max(fan_out) as f64).sqrt();
            for p in params {
                *p = rng.uniform(-bound, bound);
            }
        };
        fill(&mut model.params[l.w1..l.b1], arch.input, arch.hidden1, TRUNK_GAIN);
        fill(&mut model.params[l.w2..l.b2], arch.hidden1, arch.hidden2, TRUNK_GAIN);
        fill(&mut model.params[l.wpi..l.bpi], arch.hidden2, N_ACTIONS, POLICY_HEAD_GAIN);
        fill(&mut model.params[l.wv..l.bv], arch.hidden2, 1, VALUE_HEAD_GAIN);
        model
    }

    pub fn from_params(arch: Architecture, params: Vec<f64>) -> Result<Self> {
        if params.len() != arch.param_count() {
            return Err(Error::DimensionMismatch {
                expected: arch.param_count(),
                found: params.len(),
            });
        }
        if params.iter().any(|p| !p.is_finite()) {
            return Err(Error::ModelFormat("non-finite parameter".into()));
        }
        Ok(Self {
            arch,
            params,
            norm: InputNorm::identity(arch.input),
        })
    }

    pub fn input_norm(&self) -> &InputNorm {
        &self.norm
    }

    pub fn set_input_norm(&mut self, norm: InputNorm) -> Result<()> {
        norm.validate()?;
        if norm.dim() != self.arch.input {
            return Err(Error::DimensionMismatch {
                expected: self.arch.input,
                found: norm.dim(),
            });
        }
        self.norm = norm;
        Ok(())
    }

    pub fn architecture(&self) -> Architecture {
        self.arch
    }

    pub fn params(&self) -> &[f64] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [f64] {
        &mut self.params
    }

    /// Sets the policy-head bias; with a zero trunk the logits equal `bias`.
    pub fn set_policy_bias(&mut self, bias: [f64; N_ACTIONS]) {
        let l = self.arch.layout();
        self.params[l.bpi..l.bpi + N_ACTIONS].copy_from_slice(&bias);
    }

    pub fn set_value_bias(&mut self, bias: f64) {
        let l = self.arch.layout();
        self.params[l.bv] = bias;
    }

    fn trace(&self, raw: &[f64]) -> Trace {
        let x = self.norm.apply(raw);
        let s = &x;
        let a = self.arch;
        let l = a.layout();
        let p = &self.params;
        let mut h1 = p[l.b1..l.b1 + a.hidden1].to_vec();
        for (r, &x) in s.iter().enumerate() {
            let w = &p[l.w1 + r * a.hidden1..l.w1 + (r + 1) * a.hidden1];
            for (h, w) in h1.iter_mut().zip(w) {
                *h += x * w;
            }
        }
        h1.iter_mut().for_each(|h| *h = h.tanh());
        let mut h2 = p[l.b2..l.b2 + a.hidden2].to_vec();
        for (r, &x) in h1.iter().enumerate() {
            let w = &p[l.w2 + r * a.hidden2..l.w2 + (r + 1) * a.hidden2];
            for (h, w) in h2.iter_mut().zip(w) {
                *h += x * w;
            }
        }
        h2.iter_mut().for_each(|h| *h = h.tanh());
        let mut logits = [p[l.bpi], p[l.bpi + 1]];
        let mut value = p[l.bv];
        for (q, &h) in h2.iter().enumerate() {
            logits[0] += h * p[l.wpi + q * N_ACTIONS];
            logits[1] += h * p[l.wpi + q * N_ACTIONS + 1];
            value += h * p[l.wv + q];
        }
        let max = logits[0].max(logits[1]);
        let min = logits[0].min(logits[1]);
        let lse = max + (min - max).exp().ln_1p();
        let log_probs = [logits[0] - lse, logits[1] - lse];
        let out = PolicyOutput {
            probs: [log_probs[0].exp(), log_probs[1].exp()],
            log_probs,
            value,
        };
        Trace { x, h1, h2, out }
    }

    pub fn forward(&self, s: &[f64]) -> Result<PolicyOutput> {
        if s.len() != self.arch.input {
            return Err(Error::DimensionMismatch {
                expected: self.arch.input,
                found: s.len(),
            });
        }
        if s.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFiniteValue {
                context: "policy input",
                index: 0,
            });
        }
        Ok(self.trace(s).out)
    }

    /// Row-wise [`forward`](Self::forward); results are identical to single calls.
    pub fn forward_batch<S: AsRef<[f64]>>(&self, states: &[S]) -> Result<Vec<PolicyOutput>> {
        states
            .iter()
            .enumerate()
            .map(|(i, s)| {
                self.forward(s.as_ref()).map_err(|e| match e {
                    Error::NonFiniteValue { context, .. } => Error::NonFiniteValue { context, index: i },
                    other => other,
                })
            })
            .collect()
    }

    pub fn query_probabilities<S: AsRef<[f64]>>(&self, states: &[S]) -> Result<Vec<f64>> {
        Ok(self
            .forward_batch(states)?
            .iter()
            .map(PolicyOutput::query_probability)
            .collect())
    }

    pub fn ppo_loss(&self, batch: &PpoBatch, h: &PpoHyper) -> Result<LossReport> {
        self.loss_and_gradient(batch, h, false).map(|(r, _)| r)
    }

    pub fn backward(&self, batch: &PpoBatch, h: &PpoHyper) -> Result<(LossReport, Gradient)> {
        self.loss_and_gradient(batch, h, true)
            .map(|(r, g)| (r, g.expect("gradient requested")))
    }

    fn loss_and_gradient(&self, batch: &PpoBatch, h: &PpoHyper, want_grad: bool) -> Result<(LossReport, Option<Gradient>)> {
        let b = batch.len();
        if b == 0 {
            return Err(Error::Config("empty PPO batch".into()));
        }
        batch.check()?;
        let a = self.arch;
        let l = a.layout();
        let p = &self.params;
        let inv_b = 1.0 / b as f64;
        let mut grad = want_grad.then(|| vec![0.0; l.len]);
        let mut report = LossReport::default();
        let mut dh2 = vec![0.0; a.hidden2];
        let mut dh1 = vec![0.0; a.hidden1];

        for i in 0..b {
            let s = &batch.states[i];
            if s.iter().any(|v| !v.is_finite()) {
                return Err(Error::NonFiniteValue { context: "batch state", index: i });
            }
            let Trace { x, h1, h2, out } = self.trace(s);
            let act = batch.actions[i];
            let adv = batch.advantages[i];
            let ratio = (out.log_probs[act] - batch.old_log_probs[i]).exp();
            let surr1 = ratio * adv;
            let surr2 = ratio.clamp(1.0 - h.clip, 1.0 + h.clip) * adv;
            let clipped_objective = surr1.min(surr2);
            let entropy = out.entropy();
            let verr = out.value - batch.value_targets[i];
            if !(ratio.is_finite() && out.value.is_finite() && entropy.is_finite()) {
                return Err(Error::NonFiniteValue { context: "ppo loss", index: i });
            }

            report.policy_loss -= clipped_objective * inv_b;
            report.value_loss += verr * verr * inv_b;
            report.entropy += entropy * inv_b;
            report.approx_kl += (batch.old_log_probs[i] - out.log_probs[act]) * inv_b;
            if (ratio - 1.0).abs() > h.clip {
                report.clip_fraction += inv_b;
            }

            let Some(g) = grad.as_mut() else { continue };
            let g_logp = if surr1 <= surr2 { -inv_b * adv * ratio } else { 0.0 };
            let mut dlogits = [0.0; N_ACTIONS];
            for (j, d) in dlogits.iter_mut().enumerate() {
                let onehot = if j == act { 1.0 } else { 0.0 };
                *d = g_logp * (onehot - out.probs[j])
                    + h.entropy_coef * inv_b * out.probs[j] * (out.log_probs[j] + entropy);
            }
            let dv = 2.0 * h.value_coef * inv_b * verr;

            for (q, &hq) in h2.iter().enumerate() {
                g[l.wpi + q * N_ACTIONS] += hq * dlogits[0];
                g[l.wpi + q * N_ACTIONS + 1] += hq * dlogits[1];
                g[l.wv + q] += hq * dv;
                let back = p[l.wpi + q * N_ACTIONS] * dlogits[0] + p[l.wpi + q * N_ACTIONS + 1] * dlogits[1] + p[l.wv + q] * dv;
                dh2[q] = back * (1.0 - hq * hq);
            }
            g[l.bpi] += dlogits[0];
            g[l.bpi + 1] += dlogits[1];
            g[l.bv] += dv;

            for (r, &hr) in h1.iter().enumerate() {
                let row = l.w2 + r * a.hidden2;
                let mut back = 0.0;
                for q in 0..a.hidden2 {
                    g[row + q] += hr * dh2[q];
                    back += p[row + q] * dh2[q];
                }
                dh1[r] = back * (1.0 - hr * hr);
            }
            for q in 0..a.hidden2 {
                g[l.b2 + q] += dh2[q];
            }
            for (r, &x) in x.iter().enumerate() {
                let row = l.w1 + r * a.hidden1;
                for q in 0..a.hidden1 {
                    g[row + q] += x * dh1[q];
                }
            }
            for q in 0..a.hidden1 {
                g[l.b1 + q] += dh1[q];
            }
        }
        report.loss = report.policy_loss + h.value_coef * report.value_loss - h.entropy_coef * report.entropy;
        if !report.loss.is_finite() {
            return Err(Error::NonFiniteValue { context: "ppo loss", index: b - 1 });
        }
        Ok((report, grad.map(|values| Gradient { arch: a, values })))
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let mut file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
        file.write_all(&self.to_bytes()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let mut bytes = Vec::new();
        std::fs::File::open(path)
            .and_then(|mut f| f.read_to_end(&mut bytes))
            .map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes)
    }

    /// Little-endian: magic, version u32, input/hidden1/hidden2/actions u32,
    /// parameter count u64, parameters as f64 in layout order, then the
    /// input shift and scale (`input` f64 each).
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(36 + 8 * (self.params.len() + 2 * self.arch.input));
        out.extend_from_slice(&MODEL_MAGIC);
        out.extend_from_slice(&MODEL_VERSION.to_le_bytes());
        for dim in [self.arch.input, self.arch.hidden1, self.arch.hidden2, N_ACTIONS] {
            out.extend_from_slice(&(dim as u32).to_le_bytes());
        }
        out.extend_from_slice(&(self.params.len() as u64).to_le_bytes());
        for p in self.params.iter().chain(&self.norm.shift).chain(&self.norm.scale) {
            out.extend_from_slice(&p.to_le_bytes());
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut cur = bytes;
        let mut take = |n: usize| -> Result<&[u8]> {
            if cur.len() < n {
                return Err(Error::ModelFormat("truncated file".into()));
            }
            let (head, rest) = cur.split_at(n);
            cur = rest;
            Ok(head)
        };
        if take(8)? != MODEL_MAGIC {
            return Err(Error::ModelFormat("bad magic".into()));
        }
        let u32_at = |b: &[u8]| u32::from_le_bytes(b.try_into().expect("4 bytes"));
        let version = u32_at(take(4)?);
        if version != MODEL_VERSION {
            return Err(Error::ModelVersion {
                expected: MODEL_VERSION,
                found: version,
            });
        }
        let input = u32_at(take(4)?) as usize;
        let hidden1 = u32_at(take(4)?) as usize;
        let hidden2 = u32_at(take(4)?) as usize;
        let actions = u32_at(take(4)?) as usize;
        if actions != N_ACTIONS {
            return Err(Error::ModelFormat(format!("expected {N_ACTIONS} actions, found {actions}")));
        }
        let arch = Architecture { input, hidden1, hidden2 };
        let count = u64::from_le_bytes(take(8)?.try_into().expect("8 bytes")) as usize;
        if count != arch.param_count() {
            return Err(Error::ModelFormat(format!(
                "header declares {count} parameters, architecture needs {}",
                arch.param_count()
            )));
        }
        let mut read_f64s = |n: usize| -> Result<Vec<f64>> {
            (0..n)
                .map(|_| Ok(f64::from_le_bytes(take(8)?.try_into().expect("8 bytes"))))
                .collect()
        };
        let params = read_f64s(count)?;
        let norm = InputNorm {
            shift: read_f64s(input)?,
            scale: read_f64s(input)?,
        };
        if !cur.is_empty() {
            return Err(Error::ModelFormat(format!("{} trailing bytes", cur.len())));
        }
        let mut model = Self::from_params(arch, params)?;
        model.set_input_norm(norm)?;
        Ok(model)
    }
}

/// One minibatch of rollout samples.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct PpoBatch {
    pub states: Vec<[f64; N_FEATURES]>,
    pub actions: Vec<usize>,
    pub old_log_probs: Vec<f64>,
    pub advantages: Vec<f64>,
    pub value_targets: Vec<f64>,
}

impl PpoBatch {
    pub fn len(&self) -> usize {
        self.states.len()
    }

    pub fn is_empty(&self) -> bool {
        self.states.is_empty()
    }

    fn check(&self) -> Result<()> {
        let n = self.states.len();
        for len in [self.actions.len(), self.old_log_probs.len(), self.advantages.len(), self.value_targets.len()] {
            if len != n {
                return Err(Error::DimensionMismatch { expected: n, found: len });
            }
        }
        if let Some(i) = self.actions.iter().position(|&a| a >= N_ACTIONS) {
            return Err(Error::IndexOutOfRange { index: self.actions[i], len: N_ACTIONS });
        }
        Ok(())
    }

    pub fn select(&self, idx: &[usize]) -> PpoBatch {
        PpoBatch {
            states: idx.iter().map(|&i| self.states[i]).collect(),
            actions: idx.iter().map(|&i| self.actions[i]).collect(),
            old_log_probs: idx.iter().map(|&i| self.old_log_probs[i]).collect(),
            advantages: idx.iter().map(|&i| self.advantages[i]).collect(),
            value_targets: idx.iter().map(|&i| self.value_targets[i]).collect(),
        }
    }
}

/// Loss value and its components (all batch means).
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct LossReport {
    pub loss: f64,
    pub policy_loss: f64,
    pub value_loss: f64,
    pub entropy: f64,
    pub approx_kl: f64,
    pub clip_fraction: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct AdamState {
    m: Vec<f64>,
    v: Vec<f64>,
    t: u64,
}

impl AdamState {
    pub fn new(model: &PolicyModel) -> Self {
        let n = model.params.len();
        Self {
            m: vec![0.0; n],
            v: vec![0.0; n],
            t: 0,
        }
    }

    pub fn steps(&self) -> u64 {
        self.t
    }
}

/// One bias-corrected Adam step: updates `model` and `state` in place.
pub fn adam_step(model: &mut PolicyModel, grad: &Gradient, state: &mut AdamState, lr: f64) -> Result<()> {
    if grad.arch != model.arch || state.m.len() != model.params.len() {
        return Err(Error::DimensionMismatch {
            expected: model.params.len(),
            found: grad.values.len(),
        });
    }
    state.t += 1;
    let bc1 = 1.0 - ADAM_BETA1.powi(state.t as i32);
    let bc2 = 1.0 - ADAM_BETA2.powi(state.t as i32);
    for (((p, &g), m), v) in model
        .params
        .iter_mut()
        .zip(&grad.values)
        .zip(state.m.iter_mut())
        .zip(state.v.iter_mut())
    {
        *m = ADAM_BETA1 * *m + (1.0 - ADAM_BETA1) * g;
        *v = ADAM_BETA2 * *v + (1.0 - ADAM_BETA2) * g * g;
        let m_hat = *m / bc1;
        let v_hat = *v / bc2;
        *p -= lr * m_hat / (v_hat.sqrt() + ADAM_EPS);
    }
    Ok(())
}

impl Gradient {
    pub fn from_values(model: &PolicyModel, values: Vec<f64>) -> Result<Self> {
        if values.len() != model.params.len() {
            return Err(Error::DimensionMismatch {
                expected: model.params.len(),
                found: values.len(),
            });
        }
        Ok(Self { arch: model.arch, values })
    }
}
