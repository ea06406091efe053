//! Applying a selection strategy to a dataset, one analyst query at a time.
//!
//! A [`QuerySession`] alternates `next_query` / `submit_label` until the
//! budget is spent. Detector scores are fixed when the session opens; only
//! the label-dependent feature columns change afterwards.

use std::io::{Read, Write};
use std::path::Path;
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::data::{Label, Matrix, RawDataset};
use crate::detector::IsolationForest;
use crate::error::{Error, Result};
use crate::features::{FeatureContext, FeatureMask, MetaFeatures, QueryState, DEFAULT_K};
use crate::policy::PolicyModel;
use crate::strategy::{select_unqueried, DetectorTopK, MetaPolicyStrategy, QueryStrategy, SelectionView};

pub const DEFAULT_BUDGET: usize = 100;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SessionConfig {
    pub budget: usize,
    pub k: usize,
    pub seed: u64,
    #[serde(skip)]
    pub mask: FeatureMask,
}

impl Default for SessionConfig {
    fn default() -> Self {
        Self {
            budget: DEFAULT_BUDGET,
            k: DEFAULT_K,
            seed: 0,
            mask: FeatureMask::all(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct QueryRecord {
    pub index: usize,
    pub answer: Label,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub struct CurvePoint {
    /// 1-based query number.
    pub query: usize,
    pub discovered: usize,
}

#[derive(Debug, Clone)]
pub struct QuerySession {
    ctx: FeatureContext,
    features: MetaFeatures,
    state: QueryState,
    budget: usize,
    log: Vec<QueryRecord>,
    curve: Vec<usize>,
    anomalies: Vec<usize>,
    pending: Option<usize>,
    last_priorities: Option<Vec<f64>>,
}

impl QuerySession {
    /// Fits the detector, freezes its scores and computes the initial features.
    pub fn open(x_raw: &Matrix, cfg: &SessionConfig) -> Result<Self> {
        if x_raw.rows() == 0 {
            return Err(Error::InvalidDataset("empty dataset".into()));
        }
        let ctx = FeatureContext::prepare(x_raw, cfg.k, cfg.seed)?.with_mask(cfg.mask);
        Ok(Self::from_context(ctx, cfg.budget))
    }

    pub fn from_context(ctx: FeatureContext, budget: usize) -> Self {
        let n = ctx.n();
        Self {
            features: ctx.cold(),
            ctx,
            state: QueryState::new(n),
            budget,
            log: Vec::new(),
            curve: Vec::new(),
            anomalies: Vec::new(),
            pending: None,
            last_priorities: None,
        }
    }

    /// Re-applies a recorded answer log to a fresh session.
    pub fn replay(x_raw: &Matrix, cfg: &SessionConfig, log: &[QueryRecord]) -> Result<Self> {
        let mut s = Self::open(x_raw, cfg)?;
        for rec in log {
            if s.is_exhausted() {
                return Err(Error::BudgetExhausted);
            }
            s.apply(rec.index, rec.answer)?;
        }
        Ok(s)
    }

    pub fn n(&self) -> usize {
        self.ctx.n()
    }

    pub fn budget(&self) -> usize {
        self.budget
    }

    pub fn queries_used(&self) -> usize {
        self.log.len()
    }

    pub fn context(&self) -> &FeatureContext {
        &self.ctx
    }

    pub fn features(&self) -> &MetaFeatures {
        &self.features
    }

    pub fn query_state(&self) -> &QueryState {
        &self.state
    }

    pub fn detector_scores(&self) -> &[f64] {
        self.ctx.detector_scores()
    }

    pub fn log(&self) -> &[QueryRecord] {
        &self.log
    }

    /// Cumulative anomalies after each query.
    pub fn curve(&self) -> &[usize] {
        &self.curve
    }

    pub fn anomalies(&self) -> &[usize] {
        &self.anomalies
    }

    pub fn discovered(&self) -> usize {
        self.anomalies.len()
    }

    pub fn pending(&self) -> Option<usize> {
        self.pending
    }

    /// Priorities computed by the latest `next_query`.
    pub fn last_priorities(&self) -> Option<&[f64]> {
        self.last_priorities.as_deref()
    }

    pub fn is_exhausted(&self) -> bool {
        self.log.len() >= self.budget || self.state.queried_count() == self.n()
    }

    fn view(&self) -> SelectionView<'_> {
        SelectionView {
            features: &self.features,
            detector_scores: self.ctx.detector_scores(),
            query_state: &self.state,
        }
    }

    /// Scores every instance and marks the best unqueried one as pending.
    pub fn next_query(&mut self, strategy: &dyn QueryStrategy) -> Result<(usize, Vec<f64>)> {
        if self.log.len() >= self.budget {
            return Err(Error::BudgetExhausted);
        }
        let p = strategy.priorities(&self.view())?;
        if p.len() != self.n() {
            return Err(Error::DimensionMismatch { expected: self.n(), found: p.len() });
        }
        let idx = select_unqueried(&p, &self.state).ok_or(Error::AllQueried)?;
        self.pending = Some(idx);
        self.last_priorities = Some(p.clone());
        Ok((idx, p))
    }

    /// `next_query` with a meta-policy model.
    pub fn next_query_with_model(&mut self, model: &Arc<PolicyModel>) -> Result<(usize, Vec<f64>)> {
        self.next_query(&MetaPolicyStrategy::new(model.clone()))
    }

    /// Records the analyst's answer for the pending query.
    pub fn submit_label(&mut self, index: usize, answer: Label) -> Result<CurvePoint> {
        match self.pending {
            None => Err(Error::NoPendingQuery),
            Some(p) if p != index => Err(Error::NotPending { submitted: index, pending: p }),
            Some(_) => self.apply(index, answer),
        }
    }

    fn apply(&mut self, index: usize, answer: Label) -> Result<CurvePoint> {
        self.state.set(index, answer)?;
        self.ctx.update(&mut self.features, &self.state, index)?;
        self.pending = None;
        self.last_priorities = None;
        self.log.push(QueryRecord { index, answer });
        if answer.is_anomaly() {
            self.anomalies.push(index);
        }
        let discovered = self.anomalies.len();
        self.curve.push(discovered);
        Ok(CurvePoint { query: self.log.len(), discovered })
    }

    /// CSV: `query_index,cumulative_anomalies,queried_instance,answer`
    /// (answer 1 = anomaly, 0 = normal). Numeric only, so the data loader
    /// can read it back.
    pub fn write_curve_csv<W: Write>(&self, writer: W) -> Result<()> {
        write_curve_csv(&self.log, writer)
    }
}

pub const CURVE_HEADER: [&str; 4] = ["query_index", "cumulative_anomalies", "queried_instance", "answer"];

pub fn write_curve_csv<W: Write>(log: &[QueryRecord], writer: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(writer);
    let err = |e: csv::Error| Error::Csv(e.to_string());
    w.write_record(CURVE_HEADER).map_err(err)?;
    let mut found = 0;
    for (t, rec) in log.iter().enumerate() {
        found += usize::from(rec.answer.is_anomaly());
        w.write_record([
            (t + 1).to_string(),
            found.to_string(),
            rec.index.to_string(),
            rec.answer.file_value().to_string(),
        ])
        .map_err(err)?;
    }
    w.flush().map_err(|e| Error::Csv(e.to_string()))
}

/// Reads a file written by [`write_curve_csv`] back into its query log,
/// checking that the numbering and cumulative counts are consistent.
pub fn read_curve_csv<R: Read>(reader: R) -> Result<Vec<QueryRecord>> {
    let mut rdr = csv::ReaderBuilder::new().trim(csv::Trim::All).from_reader(reader);
    let header = rdr.headers().map_err(|e| Error::Csv(e.to_string()))?.clone();
    if header.iter().ne(CURVE_HEADER) {
        return Err(Error::Csv(format!("expected header {}", CURVE_HEADER.join(","))));
    }
    let mut log = Vec::new();
    let mut found = 0;
    for (t, rec) in rdr.records().enumerate() {
        let rec = rec.map_err(|e| Error::Csv(e.to_string()))?;
        let field = |j: usize| -> Result<usize> {
            rec[j].parse().map_err(|_| Error::NonNumeric {
                row: t + 1,
                column: CURVE_HEADER[j].to_owned(),
                value: rec[j].to_owned(),
            })
        };
        let answer = Label::from_file_value(&rec[3]).ok_or_else(|| Error::BadLabel {
            row: t + 1,
            value: rec[3].to_owned(),
        })?;
        found += usize::from(answer.is_anomaly());
        if field(0)? != t + 1 || field(1)? != found {
            return Err(Error::Csv(format!("row {}: query number or cumulative count out of sequence", t + 1)));
        }
        log.push(QueryRecord { index: field(2)?, answer });
    }
    Ok(log)
}

pub fn save_curve_csv(log: &[QueryRecord], path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    write_curve_csv(log, file)
}

/// Plays a session against the ground truth until the budget or the data
/// runs out. Returns the query log; its curve has length `min(budget, n)`.
pub fn run_simulated_with(
    raw: &RawDataset,
    strategy: &dyn QueryStrategy,
    cfg: &SessionConfig,
) -> Result<QuerySession> {
    let labels = raw.labels.as_ref().ok_or_else(|| Error::Unlabeled(raw.name.clone()))?;
    let session = QuerySession::open(&raw.x, cfg)?;
    simulate(session, labels, strategy)
}

/// Same as [`run_simulated_with`] but on an already prepared context.
pub fn simulate(mut session: QuerySession, labels: &[Label], strategy: &dyn QueryStrategy) -> Result<QuerySession> {
    while !session.is_exhausted() {
        let (idx, _) = session.next_query(strategy)?;
        session.submit_label(idx, labels[idx])?;
    }
    Ok(session)
}

/// Discovery curve of the meta-policy on a labeled dataset.
pub fn run_simulated(raw: &RawDataset, model: &Arc<PolicyModel>, budget: usize, seed: u64) -> Result<Vec<usize>> {
    let cfg = SessionConfig { budget, seed, ..SessionConfig::default() };
    let strategy = MetaPolicyStrategy::new(model.clone());
    Ok(run_simulated_with(raw, &strategy, &cfg)?.curve().to_vec())
}

/// Discovery curve of querying in descending detector-score order (ties by index).
pub fn unsupervised_curve(scores: &[f64], labels: &[Label], budget: usize) -> Vec<usize> {
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]).then(a.cmp(&b)));
    let mut found = 0;
    order
        .into_iter()
        .take(budget)
        .map(|i| {
            found += usize::from(labels[i].is_anomaly());
            found
        })
        .collect()
}

/// Session-based equivalent of [`unsupervised_curve`].
pub fn run_unsupervised(raw: &RawDataset, cfg: &SessionConfig) -> Result<QuerySession> {
    run_simulated_with(raw, &DetectorTopK, cfg)
}

/// `pi(a=1 | probe)` for off-dataset points given in standardized
/// coordinates, scored by `forest` and measured against the labels in `qs`.
pub fn probe_probabilities(
    model: &PolicyModel,
    ctx: &FeatureContext,
    forest: &IsolationForest,
    points: &[Vec<f64>],
    qs: &QueryState,
) -> Result<Vec<f64>> {
    points
        .iter()
        .map(|p| Ok(model.forward(&ctx.probe(p, forest.score(p)?, qs))?.query_probability()))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::policy::Architecture;
    use crate::rng::SeededRng;

    fn blob(n: usize, anomalies: &[usize], seed: u64) -> RawDataset {
        let mut rng = SeededRng::new(seed);
        let rows: Vec<Vec<f64>> = (0..n)
            .map(|i| {
                let shift = if anomalies.contains(&i) { 6.0 } else { 0.0 };
                vec![rng.normal() + shift, rng.normal() - shift, rng.normal()]
            })
            .collect();
        let labels = (0..n).map(|i| if anomalies.contains(&i) { Label::Anomaly } else { Label::Normal }).collect();
        RawDataset::new(
            "blob",
            vec!["a".into(), "b".into(), "c".into()],
            Matrix::from_rows(&rows).unwrap(),
            Some(labels),
        )
        .unwrap()
    }

    fn zero_model() -> Arc<PolicyModel> {
        Arc::new(PolicyModel::zeros(Architecture::default()))
    }

    #[test]
    fn fresh_and_zero_budget_sessions() {
        let ds = blob(20, &[3], 1);
        let s = QuerySession::open(&ds.x, &SessionConfig::default()).unwrap();
        assert!(s.curve().is_empty());
        assert!(s.query_state().raw().iter().all(|&e| e == 0));
        let mut z = QuerySession::open(&ds.x, &SessionConfig { budget: 0, ..SessionConfig::default() }).unwrap();
        assert!(z.is_exhausted());
        assert!(matches!(z.next_query_with_model(&zero_model()), Err(Error::BudgetExhausted)));
        let again = QuerySession::open(&ds.x, &SessionConfig::default()).unwrap();
        assert_eq!(again.features(), s.features());
    }

    #[test]
    fn curve_csv_round_trips_and_replays() {
        let ds = blob(30, &[3, 17, 22], 3);
        let cfg = SessionConfig { budget: 8, ..SessionConfig::default() };
        let s = run_unsupervised(&ds, &cfg).unwrap();
        let mut buf = Vec::new();
        s.write_curve_csv(&mut buf).unwrap();
        let log = read_curve_csv(buf.as_slice()).unwrap();
        assert_eq!(log, s.log());
        let again = QuerySession::replay(&ds.x, &cfg, &log).unwrap();
        assert_eq!(again.curve(), s.curve());

        let text = String::from_utf8(buf).unwrap().replacen("\n1,", "\n2,", 1);
        assert!(read_curve_csv(text.as_bytes()).is_err());
    }

    #[test]
    fn zero_model_queries_in_index_order() {
        let ds = blob(15, &[2, 9], 2);
        let mut s = QuerySession::open(&ds.x, &SessionConfig { budget: 6, ..SessionConfig::default() }).unwrap();
        let model = zero_model();
        for expect in 0..6 {
            let (idx, p) = s.next_query_with_model(&model).unwrap();
            assert!(p.iter().all(|&v| v == 0.0));
            assert_eq!(idx, expect);
            s.submit_label(idx, ds.labels.as_ref().unwrap()[idx]).unwrap();
        }
        assert_eq!(s.curve(), &[0, 0, 1, 1, 1, 1]);
        assert!(s.is_exhausted());
    }

    #[test]
    fn submit_label_rules() {
        let ds = blob(10, &[], 3);
        let mut s = QuerySession::open(&ds.x, &SessionConfig::default()).unwrap();
        assert!(matches!(s.submit_label(0, Label::Normal), Err(Error::NoPendingQuery)));
        let (idx, _) = s.next_query(&DetectorTopK).unwrap();
        let other = (idx + 1) % 10;
        assert!(matches!(s.submit_label(other, Label::Normal), Err(Error::NotPending { .. })));
        assert_eq!(s.submit_label(idx, Label::Anomaly).unwrap(), CurvePoint { query: 1, discovered: 1 });
        assert!(matches!(s.submit_label(idx, Label::Anomaly), Err(Error::NoPendingQuery)));
        let (idx2, _) = s.next_query(&DetectorTopK).unwrap();
        assert_ne!(idx2, idx);
        assert_eq!(s.submit_label(idx2, Label::Normal).unwrap().discovered, 1);
        assert_eq!(s.curve(), &[1, 1]);
        assert_eq!(s.anomalies(), &[idx]);
        assert_eq!(s.features(), &s.context().extract(s.query_state()).unwrap());
    }

    #[test]
    fn perfect_and_worst_curves() {
        let n = 30;
        let all: Vec<usize> = (0..n).collect();
        let ds = blob(n, &all, 4);
        let curve = run_simulated(&ds, &zero_model(), 12, 0).unwrap();
        assert_eq!(curve, (1..=12).collect::<Vec<_>>());
        let none = blob(n, &[], 4);
        assert_eq!(run_simulated(&none, &zero_model(), 12, 0).unwrap(), vec![0; 12]);
        assert_eq!(run_simulated(&none, &zero_model(), 100, 0).unwrap().len(), n);
        let unlabeled = RawDataset { labels: None, ..none };
        assert!(matches!(run_simulated(&unlabeled, &zero_model(), 5, 0), Err(Error::Unlabeled(_))));
    }

    #[test]
    fn unsupervised_curve_examples() {
        let labels = [Label::Normal, Label::Anomaly, Label::Anomaly, Label::Normal];
        assert_eq!(unsupervised_curve(&[0.1, 0.9, 0.8, 0.2], &labels, 2), vec![1, 2]);
        assert_eq!(unsupervised_curve(&[0.1, 0.9, 0.8, 0.2], &labels, 10).len(), 4);
        // Ties go to the lower index.
        assert_eq!(unsupervised_curve(&[0.5, 0.5, 0.5, 0.5], &labels, 2), vec![0, 1]);
    }

    #[test]
    fn session_top_k_matches_sorted_curve() {
        let ds = blob(80, &[1, 7, 30, 55, 79], 5);
        let cfg = SessionConfig { budget: 25, seed: 3, ..SessionConfig::default() };
        let s = run_unsupervised(&ds, &cfg).unwrap();
        let expected = unsupervised_curve(s.detector_scores(), ds.labels.as_ref().unwrap(), 25);
        assert_eq!(s.curve(), expected.as_slice());
    }

    #[test]
    fn replay_reproduces_features_and_curve() {
        let ds = blob(40, &[0, 5, 17], 6);
        let cfg = SessionConfig { budget: 8, seed: 2, ..SessionConfig::default() };
        let model = Arc::new(PolicyModel::init(Architecture::default(), 9));
        let s = run_simulated_with(&ds, &MetaPolicyStrategy::new(model), &cfg).unwrap();
        let r = QuerySession::replay(&ds.x, &cfg, s.log()).unwrap();
        assert_eq!(r.features(), s.features());
        assert_eq!(r.curve(), s.curve());
    }

    #[test]
    fn curve_csv_is_numeric() {
        let ds = blob(12, &[4], 7);
        let s = run_unsupervised(&ds, &SessionConfig { budget: 5, ..SessionConfig::default() }).unwrap();
        let mut buf = Vec::new();
        s.write_curve_csv(&mut buf).unwrap();
        let back = crate::data::parse_csv(buf.as_slice(), "curve", None).unwrap();
        assert_eq!(back.n(), 5);
        let cum: Vec<usize> = back.x.iter_rows().map(|r| r[1] as usize).collect();
        assert_eq!(cum, s.curve());
    }
}
