//! Transferable meta-features.
//!
//! Every instance maps to six numbers whose meaning does not depend on the
//! dataset's size or dimension, in this column order:
//!
//! | col | feature |
//! |-----|---------|
//! | 0 | detector score (Isolation Forest, higher = more anomalous) |
//! | 1 | min scaled distance to labeled anomalies |
//! | 2 | mean scaled distance to labeled anomalies |
//! | 3 | 1 if a labeled anomaly is among the k nearest neighbours |
//! | 4 | min scaled distance to labeled normals |
//! | 5 | mean scaled distance to labeled normals |
//!
//! The scaled distance is `‖u − v‖₂ / √d`. Distances are clipped to the
//! dataset's cap `d_cap`, which is also the value used while a label class
//! is still empty.
//!
//! Means are accumulated in 2⁻³² fixed point, so a sum does not depend on the
//! order labels arrived in. That is what lets [`FeatureContext::update`]
//! reproduce [`FeatureContext::extract`] bit for bit.

use std::sync::Arc;

use rayon::prelude::*;

use crate::data::{standardize, Label, Matrix};
use crate::detector::IsolationForest;
use crate::error::{Error, Result};
use crate::rng::SeededRng;

pub const N_FEATURES: usize = 6;
pub const DEFAULT_K: usize = 10;
pub const CAP_SUBSAMPLE: usize = 256;

pub const COL_DETECTOR: usize = 0;
pub const COL_MIN_ANOMALY: usize = 1;
pub const COL_MEAN_ANOMALY: usize = 2;
pub const COL_KNN_FLAG: usize = 3;
pub const COL_MIN_NORMAL: usize = 4;
pub const COL_MEAN_NORMAL: usize = 5;

pub const FEATURE_NAMES: [&str; N_FEATURES] = [
    "detector_score",
    "min_dist_anomaly",
    "mean_dist_anomaly",
    "knn_anomaly_flag",
    "min_dist_normal",
    "mean_dist_normal",
];

const FIXED_SCALE: f64 = 4_294_967_296.0; // 2^32

/// Analyst feedback per instance: -1 anomaly, 0 unqueried, +1 normal.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct QueryState {
    entries: Vec<i8>,
}

impl QueryState {
    pub fn new(n: usize) -> Self {
        Self { entries: vec![0; n] }
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn get(&self, i: usize) -> Option<Label> {
        match self.entries[i] {
            -1 => Some(Label::Anomaly),
            1 => Some(Label::Normal),
            _ => None,
        }
    }

    pub fn raw(&self) -> &[i8] {
        &self.entries
    }

    pub fn is_queried(&self, i: usize) -> bool {
        self.entries[i] != 0
    }

    /// Entries are write-once.
    pub fn set(&mut self, i: usize, label: Label) -> Result<()> {
        let len = self.entries.len();
        let slot = self
            .entries
            .get_mut(i)
            .ok_or(Error::IndexOutOfRange { index: i, len })?;
        if *slot != 0 {
            return Err(Error::AlreadyLabeled(i));
        }
        *slot = match label {
            Label::Anomaly => -1,
            Label::Normal => 1,
        };
        Ok(())
    }

    pub fn labeled(&self, label: Label) -> impl Iterator<Item = usize> + '_ {
        let code = if label.is_anomaly() { -1 } else { 1 };
        self.entries
            .iter()
            .enumerate()
            .filter(move |(_, &e)| e == code)
            .map(|(i, _)| i)
    }

    pub fn queried_count(&self) -> usize {
        self.entries.iter().filter(|&&e| e != 0).count()
    }
}

/// Which columns reach the policy. Masked columns are replaced by their
/// cold-start value (distances: `d_cap`, flag: 0, detector: 0.5) so the
/// input width stays six.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct FeatureMask(pub [bool; N_FEATURES]);

impl Default for FeatureMask {
    fn default() -> Self {
        FeatureMask([true; N_FEATURES])
    }
}

impl FeatureMask {
    pub fn all() -> Self {
        Self::default()
    }

    pub fn dropping(cols: &[usize]) -> Self {
        let mut m = [true; N_FEATURES];
        for &c in cols {
            m[c] = false;
        }
        FeatureMask(m)
    }

    pub fn is_active(&self, col: usize) -> bool {
        self.0[col]
    }

    /// Columns that are switched off, as a `-`-joined list (`"1-2-3"`), or `"none"`.
    pub fn label(&self) -> String {
        let off: Vec<String> = (0..N_FEATURES).filter(|&c| !self.0[c]).map(|c| c.to_string()).collect();
        if off.is_empty() {
            "none".into()
        } else {
            off.join("-")
        }
    }
}

pub fn scaled_distance(u: &[f64], v: &[f64]) -> f64 {
    let ss: f64 = u.iter().zip(v).map(|(a, b)| (a - b) * (a - b)).sum();
    ss.sqrt() / (u.len() as f64).sqrt()
}

/// Indices used to estimate `d_cap`.
pub fn cap_sample(n: usize, seed: u64) -> Vec<usize> {
    SeededRng::derive(seed, 0xCA9).sample_without_replacement(n, CAP_SUBSAMPLE)
}

/// Largest scaled distance between any instance and a random subsample of
/// at most 256 instances; 1.0 if every row coincides.
pub fn init_cap(x_std: &Matrix, seed: u64) -> f64 {
    let sample = cap_sample(x_std.rows(), seed);
    let cap = x_std
        .iter_rows()
        .map(|r| {
            sample
                .iter()
                .map(|&s| scaled_distance(r, x_std.row(s)))
                .fold(0.0, f64::max)
        })
        .fold(0.0, f64::max);
    if cap > 0.0 {
        cap
    } else {
        1.0
    }
}

/// k nearest other instances for each row, plus the reverse lists.
#[derive(Debug, Clone, PartialEq)]
pub struct KnnIndex {
    k: usize,
    neighbors: Vec<Vec<usize>>,
    reverse: Vec<Vec<usize>>,
}

impl KnnIndex {
    /// Ties in distance go to the lower index.
    pub fn build(x: &Matrix, k: usize) -> Self {
        let n = x.rows();
        let neighbors: Vec<Vec<usize>> = (0..n)
            .into_par_iter()
            .map(|i| {
                let mut cand: Vec<(f64, usize)> = (0..n)
                    .filter(|&j| j != i)
                    .map(|j| (scaled_distance(x.row(i), x.row(j)), j))
                    .collect();
                let take = k.min(cand.len());
                let cmp = |a: &(f64, usize), b: &(f64, usize)| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1));
                if take < cand.len() && take > 0 {
                    cand.select_nth_unstable_by(take - 1, cmp);
                }
                cand.truncate(take);
                cand.sort_by(cmp);
                cand.into_iter().map(|(_, j)| j).collect()
            })
            .collect();
        let mut reverse = vec![Vec::new(); n];
        for (i, list) in neighbors.iter().enumerate() {
            for &j in list {
                reverse[j].push(i);
            }
        }
        Self { k, neighbors, reverse }
    }

    pub fn k(&self) -> usize {
        self.k
    }

    pub fn neighbors(&self, i: usize) -> &[usize] {
        &self.neighbors[i]
    }

    /// Rows that have `j` among their neighbours.
    pub fn reverse(&self, j: usize) -> &[usize] {
        &self.reverse[j]
    }
}

#[derive(Debug, Clone, PartialEq)]
struct DistanceColumns {
    count: u64,
    min: Vec<u64>,
    sum: Vec<u128>,
}

impl DistanceColumns {
    fn empty(n: usize) -> Self {
        Self {
            count: 0,
            min: vec![u64::MAX; n],
            sum: vec![0; n],
        }
    }

    fn add(&mut self, row: usize, q: u64) {
        self.min[row] = self.min[row].min(q);
        self.sum[row] += q as u128;
    }

    fn min_mean(&self, row: usize, cap: f64) -> (f64, f64) {
        if self.count == 0 {
            return (cap, cap);
        }
        let min = (self.min[row] as f64 / FIXED_SCALE).min(cap);
        let mean = ((self.sum[row] as f64 / self.count as f64) / FIXED_SCALE).min(cap).max(min);
        (min, mean)
    }
}

fn quantize(dist: f64, cap: f64) -> u64 {
    (dist.min(cap) * FIXED_SCALE).round() as u64
}

/// The six-column feature matrix for one dataset under one query state.
#[derive(Debug, Clone, PartialEq)]
pub struct MetaFeatures {
    d_cap: f64,
    k: usize,
    mask: FeatureMask,
    detector: Vec<f64>,
    anomaly: DistanceColumns,
    normal: DistanceColumns,
    knn_flag: Vec<u8>,
    incorporated: Vec<bool>,
}

impl MetaFeatures {
    pub fn n(&self) -> usize {
        self.detector.len()
    }

    pub fn d_cap(&self) -> f64 {
        self.d_cap
    }

    pub fn k(&self) -> usize {
        self.k
    }

    pub fn mask(&self) -> FeatureMask {
        self.mask
    }

    pub fn set_mask(&mut self, mask: FeatureMask) {
        self.mask = mask;
    }

    /// Unmasked feature row.
    pub fn raw_row(&self, i: usize) -> [f64; N_FEATURES] {
        let (amin, amean) = self.anomaly.min_mean(i, self.d_cap);
        let (nmin, nmean) = self.normal.min_mean(i, self.d_cap);
        [self.detector[i], amin, amean, self.knn_flag[i] as f64, nmin, nmean]
    }

    /// Row as seen by the policy (mask applied).
    pub fn row(&self, i: usize) -> [f64; N_FEATURES] {
        apply_mask(self.raw_row(i), self.mask, self.d_cap)
    }

    pub fn rows(&self) -> Vec<[f64; N_FEATURES]> {
        (0..self.n()).map(|i| self.row(i)).collect()
    }

    pub fn to_matrix(&self) -> Matrix {
        let data = (0..self.n()).flat_map(|i| self.row(i)).collect();
        Matrix::new(self.n(), N_FEATURES, data).expect("shape")
    }
}

pub fn apply_mask(mut row: [f64; N_FEATURES], mask: FeatureMask, d_cap: f64) -> [f64; N_FEATURES] {
    for (c, v) in row.iter_mut().enumerate() {
        if !mask.is_active(c) {
            *v = match c {
                COL_DETECTOR => 0.5,
                COL_KNN_FLAG => 0.0,
                _ => d_cap,
            };
        }
    }
    row
}

/// Label-independent inputs of the feature map for one dataset.
#[derive(Debug, Clone)]
pub struct FeatureContext {
    x_std: Arc<Matrix>,
    detector: Vec<f64>,
    d_cap: f64,
    knn: KnnIndex,
    mask: FeatureMask,
}

impl FeatureContext {
    pub fn new(x_std: Arc<Matrix>, detector_scores: Vec<f64>, k: usize, d_cap: f64) -> Result<Self> {
        if detector_scores.len() != x_std.rows() {
            return Err(Error::DimensionMismatch {
                expected: x_std.rows(),
                found: detector_scores.len(),
            });
        }
        if k == 0 {
            return Err(Error::Config("k must be at least 1".into()));
        }
        let knn = KnnIndex::build(&x_std, k);
        Ok(Self {
            x_std,
            detector: detector_scores,
            d_cap,
            knn,
            mask: FeatureMask::all(),
        })
    }

    /// Standardizes `x_raw`, fits the detector and the distance cap, and
    /// indexes neighbours. Detector scores stay frozen from here on.
    pub fn prepare(x_raw: &Matrix, k: usize, seed: u64) -> Result<Self> {
        let x_std = standardize(x_raw).x;
        // A lone instance cannot be isolated; give it the neutral score.
        let scores = if x_std.rows() == 1 {
            vec![0.5]
        } else {
            IsolationForest::fit_default(&x_std, seed)?.score_all(&x_std)?
        };
        let d_cap = init_cap(&x_std, seed);
        Self::new(Arc::new(x_std), scores, k, d_cap)
    }

    pub fn with_mask(mut self, mask: FeatureMask) -> Self {
        self.mask = mask;
        self
    }

    pub fn x_std(&self) -> &Matrix {
        &self.x_std
    }

    pub fn detector_scores(&self) -> &[f64] {
        &self.detector
    }

    pub fn d_cap(&self) -> f64 {
        self.d_cap
    }

    pub fn knn(&self) -> &KnnIndex {
        &self.knn
    }

    pub fn n(&self) -> usize {
        self.x_std.rows()
    }

    /// Features with no labels yet.
    pub fn cold(&self) -> MetaFeatures {
        let n = self.n();
        MetaFeatures {
            d_cap: self.d_cap,
            k: self.knn.k(),
            mask: self.mask,
            detector: self.detector.clone(),
            anomaly: DistanceColumns::empty(n),
            normal: DistanceColumns::empty(n),
            knn_flag: vec![0; n],
            incorporated: vec![false; n],
        }
    }

    /// Full recompute from the query state.
    pub fn extract(&self, qs: &QueryState) -> Result<MetaFeatures> {
        let n = self.n();
        if qs.len() != n {
            return Err(Error::DimensionMismatch { expected: n, found: qs.len() });
        }
        let mut mf = self.cold();
        let anomalies: Vec<usize> = qs.labeled(Label::Anomaly).collect();
        let normals: Vec<usize> = qs.labeled(Label::Normal).collect();
        for (labeled, cols) in [(&anomalies, &mut mf.anomaly), (&normals, &mut mf.normal)] {
            cols.count = labeled.len() as u64;
            for i in 0..n {
                for &j in labeled {
                    let q = quantize(scaled_distance(self.x_std.row(i), self.x_std.row(j)), self.d_cap);
                    cols.add(i, q);
                }
            }
        }
        for i in 0..n {
            let hit = self.knn.neighbors(i).iter().any(|&j| qs.get(j) == Some(Label::Anomaly));
            mf.knn_flag[i] = hit as u8;
        }
        for i in 0..n {
            mf.incorporated[i] = qs.is_queried(i);
        }
        Ok(mf)
    }

    /// Folds one new label into `mf`; equal to `extract` under the updated state.
    pub fn update(&self, mf: &mut MetaFeatures, qs: &QueryState, newly_labeled: usize) -> Result<()> {
        let n = self.n();
        if newly_labeled >= n {
            return Err(Error::IndexOutOfRange { index: newly_labeled, len: n });
        }
        if mf.incorporated[newly_labeled] {
            return Err(Error::AlreadyLabeled(newly_labeled));
        }
        let label = qs.get(newly_labeled).ok_or(Error::NotLabeled(newly_labeled))?;
        let cols = match label {
            Label::Anomaly => &mut mf.anomaly,
            Label::Normal => &mut mf.normal,
        };
        cols.count += 1;
        let anchor = self.x_std.row(newly_labeled);
        for i in 0..n {
            let q = quantize(scaled_distance(self.x_std.row(i), anchor), self.d_cap);
            cols.add(i, q);
        }
        if label == Label::Anomaly {
            for &i in self.knn.reverse(newly_labeled) {
                mf.knn_flag[i] = 1;
            }
        }
        mf.incorporated[newly_labeled] = true;
        Ok(())
    }

    /// Features of a point that is not part of the dataset (e.g. a probe on
    /// a visualization grid), against the labels in `qs`.
    pub fn probe(&self, point: &[f64], detector_score: f64, qs: &QueryState) -> [f64; N_FEATURES] {
        let mut anomaly = DistanceColumns::empty(1);
        let mut normal = DistanceColumns::empty(1);
        for (label, cols) in [(Label::Anomaly, &mut anomaly), (Label::Normal, &mut normal)] {
            for j in qs.labeled(label) {
                cols.count += 1;
                cols.add(0, quantize(scaled_distance(point, self.x_std.row(j)), self.d_cap));
            }
        }
        let mut cand: Vec<(f64, usize)> = (0..self.n())
            .map(|j| (scaled_distance(point, self.x_std.row(j)), j))
            .collect();
        cand.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
        let flag = cand
            .iter()
            .take(self.knn.k())
            .any(|&(_, j)| qs.get(j) == Some(Label::Anomaly));
        let (amin, amean) = anomaly.min_mean(0, self.d_cap);
        let (nmin, nmean) = normal.min_mean(0, self.d_cap);
        apply_mask(
            [detector_score, amin, amean, flag as u8 as f64, nmin, nmean],
            self.mask,
            self.d_cap,
        )
    }
}

/// One-shot feature extraction without keeping the context around.
pub fn extract(x_std: &Matrix, detector_scores: &[f64], qs: &QueryState, k: usize, d_cap: f64) -> Result<MetaFeatures> {
    FeatureContext::new(Arc::new(x_std.clone()), detector_scores.to_vec(), k, d_cap)?.extract(qs)
}
