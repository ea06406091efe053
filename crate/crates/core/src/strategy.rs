//! Query-selection strategies behind one trait, looked up by name.
//!
//! A strategy assigns a priority to every instance; the session engine
//! queries the highest-priority unqueried instance (ties to the lowest
//! index). Built-ins:
//!
//! * `meta-policy`: `pi(a = 1 | G_i)` from a trained [`PolicyModel`].
//! * `unsupervised`: the frozen Isolation Forest score, i.e. top-k by detector.

use std::fmt;
use std::sync::Arc;

use crate::error::{Error, Result};
use crate::features::{MetaFeatures, QueryState};
use crate::policy::{PolicyModel, PolicyOutput};

pub const META_POLICY: &str = "meta-policy";
pub const UNSUPERVISED: &str = "unsupervised";

/// What a strategy may look at when ranking instances.
#[derive(Debug, Clone, Copy)]
pub struct SelectionView<'a> {
    pub features: &'a MetaFeatures,
    pub detector_scores: &'a [f64],
    pub query_state: &'a QueryState,
}

pub trait QueryStrategy: Send + Sync {
    fn name(&self) -> &str;

    /// One priority per instance, higher first.
    fn priorities(&self, view: &SelectionView<'_>) -> Result<Vec<f64>>;
}

impl fmt::Debug for dyn QueryStrategy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "QueryStrategy({})", self.name())
    }
}

#[derive(Debug, Clone)]
pub struct MetaPolicyStrategy {
    model: Arc<PolicyModel>,
}

impl MetaPolicyStrategy {
    pub fn new(model: Arc<PolicyModel>) -> Self {
        Self { model }
    }

    pub fn model(&self) -> &PolicyModel {
        &self.model
    }
}

impl QueryStrategy for MetaPolicyStrategy {
    fn name(&self) -> &str {
        META_POLICY
    }

    /// Query log-odds, which orders instances like the query probability.
    fn priorities(&self, view: &SelectionView<'_>) -> Result<Vec<f64>> {
        Ok(self
            .model
            .forward_batch(&view.features.rows())?
            .iter()
            .map(PolicyOutput::query_log_odds)
            .collect())
    }
}

#[derive(Debug, Clone, Copy, Default)]
pub struct DetectorTopK;

impl QueryStrategy for DetectorTopK {
    fn name(&self) -> &str {
        UNSUPERVISED
    }

    fn priorities(&self, view: &SelectionView<'_>) -> Result<Vec<f64>> {
        Ok(view.detector_scores.to_vec())
    }
}

/// Inputs a factory may need.
#[derive(Debug, Clone, Default)]
pub struct StrategyParams {
    pub model: Option<Arc<PolicyModel>>,
}

type Factory = Box<dyn Fn(&StrategyParams) -> Result<Box<dyn QueryStrategy>> + Send + Sync>;

/// Name → factory, in registration order.
pub struct StrategyRegistry {
    entries: Vec<(String, Factory)>,
}

impl fmt::Debug for StrategyRegistry {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_list().entries(self.names()).finish()
    }
}

impl Default for StrategyRegistry {
    fn default() -> Self {
        Self::with_builtins()
    }
}

impl StrategyRegistry {
    pub fn empty() -> Self {
        Self { entries: Vec::new() }
    }

    pub fn with_builtins() -> Self {
        let mut reg = Self::empty();
        reg.register(META_POLICY, |p| {
            let model = p.model.clone().ok_or_else(|| Error::StrategyNeedsModel(META_POLICY.into()))?;
            Ok(Box::new(MetaPolicyStrategy::new(model)))
        });
        reg.register(UNSUPERVISED, |_| Ok(Box::new(DetectorTopK)));
        reg
    }

    /// Replaces an existing entry of the same name.
    pub fn register<F>(&mut self, name: &str, factory: F)
    where
        F: Fn(&StrategyParams) -> Result<Box<dyn QueryStrategy>> + Send + Sync + 'static,
    {
        let factory: Factory = Box::new(factory);
        match self.entries.iter_mut().find(|(n, _)| n == name) {
            Some(slot) => slot.1 = factory,
            None => self.entries.push((name.to_owned(), factory)),
        }
    }

    pub fn names(&self) -> Vec<&str> {
        self.entries.iter().map(|(n, _)| n.as_str()).collect()
    }

    pub fn contains(&self, name: &str) -> bool {
        self.entries.iter().any(|(n, _)| n == name)
    }

    pub fn build(&self, name: &str, params: &StrategyParams) -> Result<Box<dyn QueryStrategy>> {
        let (_, factory) = self
            .entries
            .iter()
            .find(|(n, _)| n == name)
            .ok_or_else(|| Error::UnknownStrategy(name.to_owned()))?;
        factory(params)
    }
}

/// Index of the largest priority among unqueried instances; ties go to the lowest index.
pub fn select_unqueried(priorities: &[f64], qs: &QueryState) -> Option<usize> {
    let mut best: Option<(usize, f64)> = None;
    for (i, &p) in priorities.iter().enumerate() {
        if qs.is_queried(i) {
            continue;
        }
        match best {
            Some((_, bp)) if p <= bp => {}
            _ => best = Some((i, p)),
        }
    }
    best.map(|(i, _)| i)
}
