//! Evaluation harness: discovery curves per (dataset, seed, strategy) and
//! their aggregation at query checkpoints.

use std::path::Path;

use rayon::prelude::*;
use serde::Serialize;

use crate::data::RawDataset;
use crate::engine::{save_curve_csv, simulate, QueryRecord, QuerySession};
use crate::error::{Error, Result};
use crate::features::{FeatureContext, FeatureMask, DEFAULT_K};
use crate::strategy::QueryStrategy;

pub const DEFAULT_CHECKPOINTS: [usize; 5] = [20, 40, 60, 80, 100];
pub const REPORT_HEADER: [&str; 6] = ["dataset", "method", "checkpoint", "mean", "stderr", "runs"];

#[derive(Debug, Clone)]
pub struct EvalSettings {
    pub budget: usize,
    pub seeds: Vec<u64>,
    pub checkpoints: Vec<usize>,
    pub k: usize,
    pub mask: FeatureMask,
}

impl Default for EvalSettings {
    fn default() -> Self {
        Self {
            budget: 100,
            seeds: (0..5).collect(),
            checkpoints: DEFAULT_CHECKPOINTS.to_vec(),
            k: DEFAULT_K,
            mask: FeatureMask::all(),
        }
    }
}

/// One simulated session.
#[derive(Debug, Clone, PartialEq)]
pub struct RunCurve {
    pub dataset: String,
    pub method: String,
    pub seed: u64,
    pub log: Vec<QueryRecord>,
    pub curve: Vec<usize>,
}

impl RunCurve {
    pub fn file_name(&self) -> String {
        format!("{}__{}__seed{}.csv", self.dataset, self.method, self.seed)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ReportRow {
    pub dataset: String,
    pub method: String,
    pub checkpoint: usize,
    pub mean: f64,
    pub stderr: f64,
    pub runs: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct BenchReport {
    pub rows: Vec<ReportRow>,
    pub runs: Vec<RunCurve>,
}

/// Anomalies found after `checkpoint` queries; a curve that stopped early
/// (dataset exhausted) keeps its final value.
pub fn value_at(curve: &[usize], checkpoint: usize) -> usize {
    match curve.len().min(checkpoint) {
        0 => 0,
        len => curve[len - 1],
    }
}

/// Mean and standard error (sample std / sqrt(runs); 0 for a single run).
pub fn mean_stderr(values: &[f64]) -> (f64, f64) {
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    if values.len() < 2 {
        return (mean, 0.0);
    }
    let var = values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / (n - 1.0);
    (mean, (var / n).sqrt())
}

/// Runs every strategy on every labeled dataset for every seed. The seed
/// drives the detector fit, so all strategies in a cell share one context.
pub fn evaluate(datasets: &[RawDataset], strategies: &[Box<dyn QueryStrategy>], settings: &EvalSettings) -> Result<BenchReport> {
    if settings.seeds.is_empty() {
        return Err(Error::Config("at least one run seed is required".into()));
    }
    for ds in datasets {
        if ds.labels.is_none() {
            return Err(Error::Unlabeled(ds.name.clone()));
        }
    }
    let cells: Vec<(usize, u64)> = (0..datasets.len())
        .flat_map(|d| settings.seeds.iter().map(move |&s| (d, s)))
        .collect();
    let results: Vec<Result<Vec<RunCurve>>> = cells
        .par_iter()
        .map(|&(d, seed)| {
            let ds = &datasets[d];
            let labels = ds.labels.as_ref().expect("checked above");
            let ctx = FeatureContext::prepare(&ds.x, settings.k, seed)?.with_mask(settings.mask);
            strategies
                .iter()
                .map(|strategy| {
                    let session = QuerySession::from_context(ctx.clone(), settings.budget);
                    let done = simulate(session, labels, strategy.as_ref())?;
                    Ok(RunCurve {
                        dataset: ds.name.clone(),
                        method: strategy.name().to_owned(),
                        seed,
                        log: done.log().to_vec(),
                        curve: done.curve().to_vec(),
                    })
                })
                .collect()
        })
        .collect();
    let mut runs = Vec::new();
    for r in results {
        runs.extend(r?);
    }
    let rows = aggregate(&runs, &settings.checkpoints, settings.budget);
    Ok(BenchReport { rows, runs })
}

/// Groups runs by (dataset, method) in first-seen order.
pub fn aggregate(runs: &[RunCurve], checkpoints: &[usize], budget: usize) -> Vec<ReportRow> {
    let mut keys: Vec<(&str, &str)> = Vec::new();
    for r in runs {
        let key = (r.dataset.as_str(), r.method.as_str());
        if !keys.contains(&key) {
            keys.push(key);
        }
    }
    let mut rows = Vec::new();
    for (dataset, method) in keys {
        let group: Vec<&RunCurve> = runs.iter().filter(|r| r.dataset == dataset && r.method == method).collect();
        for &cp in checkpoints.iter().filter(|&&c| c <= budget) {
            let values: Vec<f64> = group.iter().map(|r| value_at(&r.curve, cp) as f64).collect();
            let (mean, stderr) = mean_stderr(&values);
            rows.push(ReportRow {
                dataset: dataset.to_owned(),
                method: method.to_owned(),
                checkpoint: cp,
                mean,
                stderr,
                runs: group.len(),
            });
        }
    }
    rows
}

impl BenchReport {
    pub fn row(&self, dataset: &str, method: &str, checkpoint: usize) -> Option<&ReportRow> {
        self.rows
            .iter()
            .find(|r| r.dataset == dataset && r.method == method && r.checkpoint == checkpoint)
    }

    /// Mean over datasets of the per-dataset means at `checkpoint`.
    pub fn method_mean(&self, method: &str, checkpoint: usize) -> Option<f64> {
        let vals: Vec<f64> = self
            .rows
            .iter()
            .filter(|r| r.method == method && r.checkpoint == checkpoint)
            .map(|r| r.mean)
            .collect();
        (!vals.is_empty()).then(|| vals.iter().sum::<f64>() / vals.len() as f64)
    }

    pub fn write_csv<W: std::io::Write>(&self, writer: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(writer);
        let err = |e: csv::Error| Error::Csv(e.to_string());
        w.write_record(REPORT_HEADER).map_err(err)?;
        for r in &self.rows {
            w.write_record([
                r.dataset.clone(),
                r.method.clone(),
                r.checkpoint.to_string(),
                format!("{:?}", r.mean),
                format!("{:?}", r.stderr),
                r.runs.to_string(),
            ])
            .map_err(err)?;
        }
        w.flush().map_err(|e| Error::Csv(e.to_string()))
    }

    /// Writes `report.csv` and one curve file per run under `curves/`.
    pub fn write_dir(&self, dir: &Path) -> Result<()> {
        let curves = dir.join("curves");
        std::fs::create_dir_all(&curves).map_err(|e| Error::io(&curves, e))?;
        let report = dir.join("report.csv");
        let file = std::fs::File::create(&report).map_err(|e| Error::io(&report, e))?;
        self.write_csv(file)?;
        for run in &self.runs {
            save_curve_csv(&run.log, curves.join(run.file_name()))?;
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn checkpoint_values() {
        assert_eq!(value_at(&[], 20), 0);
        assert_eq!(value_at(&[1, 1, 2], 2), 1);
        assert_eq!(value_at(&[1, 1, 2], 20), 2);
    }

    #[test]
    fn mean_and_stderr() {
        assert_eq!(mean_stderr(&[4.0]), (4.0, 0.0));
        let (m, se) = mean_stderr(&[1.0, 2.0, 3.0]);
        assert_eq!(m, 2.0);
        assert!((se - (1.0f64 / 3.0).sqrt()).abs() < 1e-15);
    }
}
