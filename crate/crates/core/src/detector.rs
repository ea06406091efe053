//! Isolation Forest: the unsupervised detector behind the first meta-feature.
//!
//! Scores are oriented so that higher means more anomalous and lie in (0, 1].

use crate::data::Matrix;
use crate::error::{Error, Result};
use crate::rng::SeededRng;

pub const DEFAULT_TREES: usize = 100;
pub const DEFAULT_SUBSAMPLE: usize = 256;

const EULER_GAMMA: f64 = 0.577_215_664_9;

/// Average path length of an unsuccessful BST search over `m` points,
/// used to normalize isolation depths.
pub fn avg_path_norm(m: usize) -> f64 {
    match m {
        0 | 1 => 0.0,
        2 => 1.0,
        _ => {
            let m = m as f64;
            2.0 * ((m - 1.0).ln() + EULER_GAMMA) - 2.0 * (m - 1.0) / m
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum Node {
    Internal {
        feature: usize,
        threshold: f64,
        left: usize,
        right: usize,
    },
    External {
        size: usize,
    },
}

#[derive(Debug, Clone, PartialEq)]
pub struct IsolationTree {
    nodes: Vec<Node>,
    height_limit: usize,
}

impl IsolationTree {
    fn build(x: &Matrix, sample: Vec<usize>, height_limit: usize, rng: &mut SeededRng) -> Self {
        let mut tree = IsolationTree {
            nodes: Vec::new(),
            height_limit,
        };
        tree.grow(x, sample, 0, rng);
        tree
    }

    fn grow(&mut self, x: &Matrix, idx: Vec<usize>, depth: usize, rng: &mut SeededRng) -> usize {
        let slot = self.nodes.len();
        self.nodes.push(Node::External { size: idx.len() });
        if depth >= self.height_limit || idx.len() <= 1 {
            return slot;
        }
        // Only features that still vary inside this node can split it.
        let mut ranges = Vec::new();
        for j in 0..x.cols() {
            let (lo, hi) = idx.iter().fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &i| {
                let v = x.get(i, j);
                (lo.min(v), hi.max(v))
            });
            if lo < hi {
                ranges.push((j, lo, hi));
            }
        }
        if ranges.is_empty() {
            return slot;
        }
        let (feature, lo, hi) = ranges[rng.index(ranges.len())];
        let threshold = loop {
            let t = lo + rng.open_unit() * (hi - lo);
            if t > lo && t < hi {
                break t;
            }
        };
        let (left_idx, right_idx): (Vec<usize>, Vec<usize>) =
            idx.into_iter().partition(|&i| x.get(i, feature) < threshold);
        let left = self.grow(x, left_idx, depth + 1, rng);
        let right = self.grow(x, right_idx, depth + 1, rng);
        self.nodes[slot] = Node::Internal {
            feature,
            threshold,
            left,
            right,
        };
        slot
    }

    /// Depth at which `point` lands, plus the normalization credit for the
    /// unresolved points left in a truncated external node.
    pub fn path_length(&self, point: &[f64]) -> f64 {
        let mut node = 0;
        let mut depth = 0usize;
        loop {
            match &self.nodes[node] {
                Node::Internal {
                    feature,
                    threshold,
                    left,
                    right,
                } => {
                    node = if point[*feature] < *threshold { *left } else { *right };
                    depth += 1;
                }
                Node::External { size } => return depth as f64 + avg_path_norm(*size),
            }
        }
    }

    pub fn nodes(&self) -> &[Node] {
        &self.nodes
    }

    pub fn height_limit(&self) -> usize {
        self.height_limit
    }

    /// Longest root-to-leaf edge count.
    pub fn depth(&self) -> usize {
        fn walk(nodes: &[Node], at: usize) -> usize {
            match &nodes[at] {
                Node::Internal { left, right, .. } => 1 + walk(nodes, *left).max(walk(nodes, *right)),
                Node::External { .. } => 0,
            }
        }
        walk(&self.nodes, 0)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct IsolationForest {
    trees: Vec<IsolationTree>,
    subsample: usize,
    dims: usize,
}

impl IsolationForest {
    pub fn fit(x: &Matrix, n_trees: usize, psi: usize, seed: u64) -> Result<Self> {
        let n = x.rows();
        if n < 2 {
            return Err(Error::InvalidDataset(format!(
                "isolation forest needs at least 2 instances, got {n}"
            )));
        }
        if n_trees == 0 || psi < 2 {
            return Err(Error::Config("isolation forest needs >= 1 tree and subsample >= 2".into()));
        }
        let subsample = psi.min(n);
        let height_limit = (subsample as f64).log2().ceil() as usize;
        let mut rng = SeededRng::new(seed);
        let trees = (0..n_trees)
            .map(|_| {
                let sample = rng.sample_without_replacement(n, subsample);
                IsolationTree::build(x, sample, height_limit, &mut rng)
            })
            .collect();
        Ok(Self {
            trees,
            subsample,
            dims: x.cols(),
        })
    }

    pub fn fit_default(x: &Matrix, seed: u64) -> Result<Self> {
        Self::fit(x, DEFAULT_TREES, DEFAULT_SUBSAMPLE, seed)
    }

    pub fn trees(&self) -> &[IsolationTree] {
        &self.trees
    }

    pub fn subsample(&self) -> usize {
        self.subsample
    }

    pub fn mean_path_length(&self, point: &[f64]) -> f64 {
        self.trees.iter().map(|t| t.path_length(point)).sum::<f64>() / self.trees.len() as f64
    }

    /// `2^(-E[h(x)] / c(psi))`.
    pub fn score(&self, point: &[f64]) -> Result<f64> {
        if point.len() != self.dims {
            return Err(Error::DimensionMismatch {
                expected: self.dims,
                found: point.len(),
            });
        }
        Ok(score_from_path(self.mean_path_length(point), self.subsample))
    }

    pub fn score_all(&self, x: &Matrix) -> Result<Vec<f64>> {
        x.iter_rows().map(|r| self.score(r)).collect()
    }
}

pub fn score_from_path(mean_path: f64, subsample: usize) -> f64 {
    2f64.powf(-mean_path / avg_path_norm(subsample))
}
