//! Synthetic labeled datasets: Gaussian clusters of normal points of unequal
//! size and density, plus anomalies that are partly scattered over the data's
//! bounding box and partly packed into small tight groups. Every anomaly is
//! placed outside the `separation`-sigma ellipsoid of every cluster.

use serde::{Deserialize, Serialize};

use crate::data::{Label, Matrix, RawDataset};
use crate::error::{Error, Result};
use crate::rng::SeededRng;

pub const DEFAULT_DIMS: [usize; 3] = [2, 4, 8];

const MAX_REJECTIONS: usize = 100_000;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SynthParams {
    pub n: usize,
    pub d: usize,
    pub clusters: usize,
    pub anomaly_fraction: f64,
    /// Cluster centres are drawn uniformly from `[-center_range, center_range]^d`.
    pub center_range: f64,
    /// Each cluster draws a scale uniformly from this range; its per-axis
    /// standard deviations are that scale times a factor in [0.75, 1.25).
    pub std_range: (f64, f64),
    /// Anomalies fill the normal points' bounding box scaled by this factor
    /// about its centre.
    pub box_expansion: f64,
    /// Small normal subpopulations of `minor_cluster_size` points each, on
    /// top of the `clusters` major ones.
    pub minor_clusters: usize,
    pub minor_cluster_size: usize,
    /// Number of tight anomaly groups; 0 scatters every anomaly.
    pub anomaly_groups: usize,
    /// Share of anomalies that belong to groups.
    pub grouped_fraction: f64,
    /// Per-axis standard deviation inside an anomaly group.
    pub group_std: f64,
    /// Minimum Mahalanobis-style distance (in cluster sigmas) between any
    /// anomaly and every cluster centre.
    pub separation: f64,
    pub seed: u64,
}

impl Default for SynthParams {
    fn default() -> Self {
        Self {
            n: 2000,
            d: 2,
            clusters: 3,
            anomaly_fraction: 0.03,
            center_range: 10.0,
            std_range: (0.5, 1.5),
            box_expansion: 1.5,
            minor_clusters: 0,
            minor_cluster_size: 15,
            anomaly_groups: 0,
            grouped_fraction: 0.0,
            group_std: 0.3,
            separation: 3.0,
            seed: 0,
        }
    }
}

impl SynthParams {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if !(0.0..1.0).contains(&self.anomaly_fraction) {
            return bad(format!("anomaly fraction {} must lie in [0, 1)", self.anomaly_fraction));
        }
        if self.d == 0 || self.n < 2 || self.clusters == 0 {
            return bad(format!("need d >= 1, n >= 2 and clusters >= 1 (got d={}, n={}, clusters={})", self.d, self.n, self.clusters));
        }
        if !(self.std_range.0 > 0.0 && self.std_range.0 <= self.std_range.1) || self.box_expansion < 1.0 {
            return bad("std_range must be positive and ordered; box_expansion >= 1".into());
        }
        if !(0.0..=1.0).contains(&self.grouped_fraction) || !(self.group_std > 0.0) || !(self.separation >= 0.0) {
            return bad("grouped_fraction must lie in [0, 1], group_std > 0, separation >= 0".into());
        }
        if self.anomaly_count() + self.minor_clusters * self.minor_cluster_size >= self.n {
            return bad("no room for normal instances".into());
        }
        Ok(())
    }

    /// Adds eight rare normal modes of 15 points and tightens the anomaly box
    /// to 1.2x. Rare modes look isolated to the detector until an analyst
    /// labels them, so the base detector alone no longer finds nearly every
    /// anomaly within 100 queries.
    pub fn rare_modes(seed: u64) -> Self {
        Self {
            box_expansion: 1.2,
            minor_clusters: 8,
            minor_cluster_size: 15,
            seed,
            ..Self::default()
        }
    }

    /// Small 2-D set: one normal cluster and two tight anomaly groups.
    pub fn toy(seed: u64) -> Self {
        Self {
            n: 500,
            d: 2,
            clusters: 1,
            anomaly_fraction: 0.02,
            box_expansion: 1.5,
            minor_clusters: 0,
            anomaly_groups: 2,
            grouped_fraction: 1.0,
            group_std: 0.3,
            seed,
            ..Self::default()
        }
    }

    /// `floor(fraction * n)`.
    pub fn anomaly_count(&self) -> usize {
        (self.anomaly_fraction * self.n as f64).floor() as usize
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Cluster {
    pub center: Vec<f64>,
    pub std: Vec<f64>,
    pub size: usize,
}

impl Cluster {
    /// Inside the axis-aligned `k`-sigma ellipsoid.
    pub fn contains(&self, x: &[f64], k: f64) -> bool {
        x.iter()
            .zip(&self.center)
            .zip(&self.std)
            .map(|((v, c), s)| ((v - c) / (k * s)).powi(2))
            .sum::<f64>()
            <= 1.0
    }
}

#[derive(Debug, Clone)]
pub struct SynthOutput {
    pub dataset: RawDataset,
    pub clusters: Vec<Cluster>,
}

/// Rows are emitted in shuffled order so labels are not sorted.
pub fn generate(name: &str, p: &SynthParams) -> Result<SynthOutput> {
    p.validate()?;
    let mut rng = SeededRng::derive(p.seed, 0x5E7);
    let n_anom = p.anomaly_count();
    let n_norm = p.n - n_anom;

    let mut clusters: Vec<Cluster> = (0..p.clusters + p.minor_clusters)
        .map(|_| {
            let center = (0..p.d).map(|_| rng.uniform(-p.center_range, p.center_range)).collect();
            let scale = if p.std_range.0 < p.std_range.1 { rng.uniform(p.std_range.0, p.std_range.1) } else { p.std_range.0 };
            let std = (0..p.d).map(|_| scale * rng.uniform(0.75, 1.25)).collect();
            Cluster { center, std, size: 0 }
        })
        .collect();
    for c in &mut clusters[p.clusters..] {
        c.size = p.minor_cluster_size;
    }
    let n_major = n_norm - p.minor_clusters * p.minor_cluster_size;
    // Unequal major cluster sizes: weights uniform in [1, 3).
    let weights: Vec<f64> = (0..p.clusters).map(|_| rng.uniform(1.0, 3.0)).collect();
    let total: f64 = weights.iter().sum();
    let mut assigned = 0;
    for (c, w) in clusters.iter_mut().zip(&weights) {
        c.size = ((w / total) * n_major as f64).floor() as usize;
        assigned += c.size;
    }
    clusters[0].size += n_major - assigned;

    let mut rows: Vec<(Vec<f64>, Label)> = Vec::with_capacity(p.n);
    for c in &clusters {
        for _ in 0..c.size {
            let x = c.center.iter().zip(&c.std).map(|(m, s)| m + s * rng.normal()).collect();
            rows.push((x, Label::Normal));
        }
    }
    let mut lo = vec![f64::INFINITY; p.d];
    let mut hi = vec![f64::NEG_INFINITY; p.d];
    for (x, _) in &rows {
        for j in 0..p.d {
            lo[j] = lo[j].min(x[j]);
            hi[j] = hi[j].max(x[j]);
        }
    }
    let in_box = |rng: &mut SeededRng| -> Vec<f64> {
        (0..p.d)
            .map(|j| {
                let mid = 0.5 * (lo[j] + hi[j]);
                let half = 0.5 * (hi[j] - lo[j]) * p.box_expansion;
                rng.uniform(mid - half, mid + half)
            })
            .collect()
    };
    let separated = |x: &[f64]| clusters.iter().all(|c| !c.contains(x, p.separation));
    let draw = |rng: &mut SeededRng, propose: &dyn Fn(&mut SeededRng) -> Vec<f64>| -> Result<Vec<f64>> {
        for _ in 0..MAX_REJECTIONS {
            let x = propose(rng);
            if separated(&x) {
                return Ok(x);
            }
        }
        Err(Error::Config(format!(
            "could not place an anomaly outside every {}-sigma ellipsoid; lower separation or widen the box",
            p.separation
        )))
    };

    let groups = if n_anom == 0 { 0 } else { p.anomaly_groups.min(n_anom) };
    let n_grouped = if groups == 0 { 0 } else { ((p.grouped_fraction * n_anom as f64).round() as usize).max(groups).min(n_anom) };
    let mut centres = Vec::with_capacity(groups);
    for _ in 0..groups {
        centres.push(draw(&mut rng, &|r: &mut SeededRng| in_box(r))?);
    }
    for g in 0..n_grouped {
        let centre = &centres[g % groups];
        let x = draw(&mut rng, &|r: &mut SeededRng| centre.iter().map(|m| m + p.group_std * r.normal()).collect())?;
        rows.push((x, Label::Anomaly));
    }
    for _ in n_grouped..n_anom {
        let x = draw(&mut rng, &|r: &mut SeededRng| in_box(r))?;
        rows.push((x, Label::Anomaly));
    }
    rng.shuffle(&mut rows);

    let (data, labels): (Vec<Vec<f64>>, Vec<Label>) = rows.into_iter().unzip();
    let columns = (0..p.d).map(|j| format!("x{j}")).collect();
    let dataset = RawDataset::new(name, columns, Matrix::from_rows(&data)?, Some(labels))?;
    Ok(SynthOutput { dataset, clusters })
}

/// Dataset seeds map to dimensions round-robin over `dims`.
pub fn suite(seeds: &[u64], dims: &[usize], base: &SynthParams) -> Result<Vec<SynthOutput>> {
    if dims.is_empty() {
        return Err(Error::Config("at least one dimension is required".into()));
    }
    seeds
        .iter()
        .map(|&seed| {
            let d = dims[(seed as usize) % dims.len()];
            let p = SynthParams { d, seed, ..base.clone() };
            generate(&suite_name(seed), &p)
        })
        .collect()
}

pub fn suite_name(seed: u64) -> String {
    format!("synth_{seed:02}")
}
