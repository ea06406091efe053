//! Tabular datasets: CSV ingestion, standardization and seeded shuffling.

use std::fs::File;
use std::io::{Read, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::SeededRng;

/// Population-std floor so constant columns standardize to zero.
pub const STD_FLOOR: f64 = 1e-8;

/// Ground truth or analyst answer for one instance.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Label {
    Anomaly,
    Normal,
}

impl Label {
    /// File encoding: 1 = anomaly, 0 = normal.
    pub fn from_file_value(v: &str) -> Option<Self> {
        match v.trim() {
            "1" | "1.0" => Some(Label::Anomaly),
            "0" | "0.0" => Some(Label::Normal),
            _ => None,
        }
    }

    pub fn file_value(self) -> u8 {
        match self {
            Label::Anomaly => 1,
            Label::Normal => 0,
        }
    }

    pub fn is_anomaly(self) -> bool {
        self == Label::Anomaly
    }
}

/// Dense row-major matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct Matrix {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl Matrix {
    pub fn new(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(Error::DimensionMismatch {
                expected: rows * cols,
                found: data.len(),
            });
        }
        Ok(Self { rows, cols, data })
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let cols = rows.first().map_or(0, Vec::len);
        let mut data = Vec::with_capacity(rows.len() * cols);
        for r in rows {
            if r.len() != cols {
                return Err(Error::DimensionMismatch {
                    expected: cols,
                    found: r.len(),
                });
            }
            data.extend_from_slice(r);
        }
        Self::new(rows.len(), cols, data)
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.data[i * self.cols + j]
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }

    pub fn iter_rows(&self) -> impl Iterator<Item = &[f64]> + '_ {
        self.data.chunks_exact(self.cols.max(1)).take(self.rows)
    }

    pub fn select_rows(&self, order: &[usize]) -> Matrix {
        let mut data = Vec::with_capacity(order.len() * self.cols);
        for &i in order {
            data.extend_from_slice(self.row(i));
        }
        Matrix {
            rows: order.len(),
            cols: self.cols,
            data,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RawDataset {
    pub name: String,
    pub columns: Vec<String>,
    pub x: Matrix,
    pub labels: Option<Vec<Label>>,
}

impl RawDataset {
    pub fn new(name: impl Into<String>, columns: Vec<String>, x: Matrix, labels: Option<Vec<Label>>) -> Result<Self> {
        let ds = Self {
            name: name.into(),
            columns,
            x,
            labels,
        };
        ds.validate()?;
        Ok(ds)
    }

    fn validate(&self) -> Result<()> {
        if self.x.rows() == 0 {
            return Err(Error::InvalidDataset("dataset has no rows".into()));
        }
        if self.x.cols() == 0 {
            return Err(Error::InvalidDataset("dataset has no feature columns".into()));
        }
        if self.columns.len() != self.x.cols() {
            return Err(Error::DimensionMismatch {
                expected: self.x.cols(),
                found: self.columns.len(),
            });
        }
        if let Some(y) = &self.labels {
            if y.len() != self.x.rows() {
                return Err(Error::DimensionMismatch {
                    expected: self.x.rows(),
                    found: y.len(),
                });
            }
        }
        if let Some(pos) = self.x.as_slice().iter().position(|v| !v.is_finite()) {
            return Err(Error::NonFinite {
                row: pos / self.x.cols() + 1,
                column: self.columns[pos % self.x.cols()].clone(),
            });
        }
        Ok(())
    }

    pub fn n(&self) -> usize {
        self.x.rows()
    }

    pub fn d(&self) -> usize {
        self.x.cols()
    }

    pub fn anomaly_count(&self) -> Option<usize> {
        self.labels
            .as_ref()
            .map(|y| y.iter().filter(|l| l.is_anomaly()).count())
    }

    /// Rows and labels co-permuted by a seeded Fisher-Yates shuffle.
    pub fn shuffled(&self, seed: u64) -> RawDataset {
        let perm = SeededRng::new(seed).permutation(self.n());
        RawDataset {
            name: self.name.clone(),
            columns: self.columns.clone(),
            x: self.x.select_rows(&perm),
            labels: self
                .labels
                .as_ref()
                .map(|y| perm.iter().map(|&i| y[i]).collect()),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct StandardizedDataset {
    pub x: Matrix,
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

/// Column-wise z-scores using the population (1/n) standard deviation.
pub fn standardize(x: &Matrix) -> StandardizedDataset {
    let (n, d) = (x.rows(), x.cols());
    let mut mean = vec![0.0; d];
    for row in x.iter_rows() {
        for (m, v) in mean.iter_mut().zip(row) {
            *m += v;
        }
    }
    for m in &mut mean {
        *m /= n as f64;
    }
    let mut var = vec![0.0; d];
    for row in x.iter_rows() {
        for ((s, v), m) in var.iter_mut().zip(row).zip(&mean) {
            *s += (v - m) * (v - m);
        }
    }
    let std: Vec<f64> = var.iter().map(|s| (s / n as f64).sqrt()).collect();
    let mut data = Vec::with_capacity(n * d);
    for row in x.iter_rows() {
        for j in 0..d {
            data.push((row[j] - mean[j]) / std[j].max(STD_FLOOR));
        }
    }
    StandardizedDataset {
        x: Matrix { rows: n, cols: d, data },
        mean,
        std,
    }
}

/// Reads a headed CSV. With `label_column`, that column becomes the labels
/// (1 = anomaly, 0 = normal); every other column must be numeric.
pub fn load_csv(path: impl AsRef<Path>, label_column: Option<&str>) -> Result<RawDataset> {
    let path = path.as_ref();
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let name = path
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_else(|| "dataset".into());
    parse_csv(file, name, label_column)
}

pub fn parse_csv<R: Read>(reader: R, name: impl Into<String>, label_column: Option<&str>) -> Result<RawDataset> {
    let mut rdr = csv::ReaderBuilder::new()
        .has_headers(true)
        .flexible(true)
        .trim(csv::Trim::All)
        .from_reader(reader);
    let header: Vec<String> = rdr
        .headers()
        .map_err(|e| Error::Csv(e.to_string()))?
        .iter()
        .map(str::to_owned)
        .collect();
    if header.is_empty() || (header.len() == 1 && header[0].is_empty()) {
        return Err(Error::InvalidDataset("missing header row".into()));
    }
    let label_idx = match label_column {
        Some(name) => Some(
            header
                .iter()
                .position(|h| h == name)
                .ok_or_else(|| Error::MissingLabelColumn(name.to_owned()))?,
        ),
        None => None,
    };
    let columns: Vec<String> = header
        .iter()
        .enumerate()
        .filter(|(j, _)| Some(*j) != label_idx)
        .map(|(_, h)| h.clone())
        .collect();

    let mut data = Vec::new();
    let mut labels = label_idx.map(|_| Vec::new());
    let mut rows = 0;
    for (r, record) in rdr.records().enumerate() {
        let row = r + 1;
        let record = record.map_err(|e| Error::Csv(e.to_string()))?;
        if record.len() != header.len() {
            return Err(Error::Ragged {
                row,
                expected: header.len(),
                found: record.len(),
            });
        }
        for (j, field) in record.iter().enumerate() {
            if Some(j) == label_idx {
                let label = Label::from_file_value(field).ok_or_else(|| Error::BadLabel {
                    row,
                    value: field.to_owned(),
                })?;
                if let Some(y) = labels.as_mut() {
                    y.push(label);
                }
                continue;
            }
            let v: f64 = field.parse().map_err(|_| Error::NonNumeric {
                row,
                column: header[j].clone(),
                value: field.to_owned(),
            })?;
            if !v.is_finite() {
                return Err(Error::NonFinite {
                    row,
                    column: header[j].clone(),
                });
            }
            data.push(v);
        }
        rows += 1;
    }
    let x = Matrix::new(rows, columns.len(), data)?;
    RawDataset::new(name, columns, x, labels)
}

/// Writes the dataset with a trailing `label` column when labels exist.
/// Values use the shortest round-trip decimal form, so reading the file back
/// reproduces every value bit for bit.
pub fn write_csv<W: Write>(ds: &RawDataset, writer: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(writer);
    let mut header = ds.columns.clone();
    if ds.labels.is_some() {
        header.push("label".into());
    }
    w.write_record(&header).map_err(|e| Error::Csv(e.to_string()))?;
    for (i, row) in ds.x.iter_rows().enumerate() {
        let mut rec: Vec<String> = row.iter().map(|v| format!("{v:?}")).collect();
        if let Some(y) = &ds.labels {
            rec.push(y[i].file_value().to_string());
        }
        w.write_record(&rec).map_err(|e| Error::Csv(e.to_string()))?;
    }
    w.flush().map_err(|e| Error::Csv(e.to_string()))?;
    Ok(())
}

pub fn save_csv(ds: &RawDataset, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    write_csv(ds, file)
}

/// Multi-dataset manifest, stored as JSON. Relative paths resolve against
/// the manifest's directory.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub datasets: Vec<ManifestEntry>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub name: String,
    pub path: PathBuf,
    #[serde(default = "default_label_column")]
    pub label_column: Option<String>,
}

fn default_label_column() -> Option<String> {
    Some("label".into())
}

impl Manifest {
    pub fn read(path: impl AsRef<Path>) -> Result<(Self, PathBuf)> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let manifest: Manifest = serde_json::from_str(&text)
            .map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        let base = path.parent().map(Path::to_path_buf).unwrap_or_default();
        Ok((manifest, base))
    }

    pub fn write(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let text = serde_json::to_string_pretty(self).expect("manifest serializes");
        std::fs::write(path, text).map_err(|e| Error::io(path, e))
    }

    pub fn entry(&self, name: &str) -> Option<&ManifestEntry> {
        self.datasets.iter().find(|e| e.name == name)
    }

    /// Loads the named datasets (all of them when `names` is empty), in the
    /// order requested.
    pub fn load(&self, base: &Path, names: &[String]) -> Result<Vec<RawDataset>> {
        let entries: Vec<&ManifestEntry> = if names.is_empty() {
            self.datasets.iter().collect()
        } else {
            names
                .iter()
                .map(|n| {
                    self.entry(n)
                        .ok_or_else(|| Error::Config(format!("dataset {n:?} is not in the manifest")))
                })
                .collect::<Result<_>>()?
        };
        entries
            .into_iter()
            .map(|e| {
                let path = if e.path.is_absolute() { e.path.clone() } else { base.join(&e.path) };
                let mut ds = load_csv(&path, e.label_column.as_deref())?;
                ds.name = e.name.clone();
                Ok(ds)
            })
            .collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn parse(text: &str, label: Option<&str>) -> Result<RawDataset> {
        parse_csv(text.as_bytes(), "t", label)
    }

    #[test]
    fn parses_labels() {
        let ds = parse("f1,f2,label\n0,0,0\n3,4,1\n", Some("label")).unwrap();
        assert_eq!((ds.n(), ds.d()), (2, 2));
        assert_eq!(ds.labels, Some(vec![Label::Normal, Label::Anomaly]));
        assert_eq!(ds.x.row(1), &[3.0, 4.0]);
    }

    #[test]
    fn label_column_is_a_feature_when_unnamed() {
        let ds = parse("f1,f2,label\n0,0,0\n3,4,1\n", None).unwrap();
        assert_eq!(ds.d(), 3);
        assert!(ds.labels.is_none());
    }

    #[test]
    fn non_numeric_cell_names_row_and_column() {
        let err = parse("f1,f2,label\na,b,0\n", Some("label")).unwrap_err();
        match err {
            Error::NonNumeric { row, column, .. } => {
                assert_eq!(row, 1);
                assert_eq!(column, "f1");
            }
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn rejects_bad_labels_ragged_rows_and_nan() {
        assert!(matches!(parse("a,label\n1,2\n", Some("label")), Err(Error::BadLabel { row: 1, .. })));
        assert!(matches!(parse("a,b\n1,2\n1\n", None), Err(Error::Ragged { row: 2, .. })));
        assert!(matches!(parse("a,b\n1,NaN\n", None), Err(Error::NonFinite { row: 1, .. })));
        assert!(matches!(parse("a,b\n", None), Err(Error::InvalidDataset(_))));
        assert!(matches!(parse("a\n1\n", Some("y")), Err(Error::MissingLabelColumn(_))));
    }

    #[test]
    fn missing_file_is_io_error() {
        assert!(matches!(load_csv("/nonexistent/x.csv", None), Err(Error::Io { .. })));
    }

    #[test]
    fn standardize_small_columns() {
        let x = Matrix::from_rows(&[vec![1.0, 5.0], vec![3.0, 5.0]]).unwrap();
        let s = standardize(&x);
        assert_eq!(s.mean, vec![2.0, 5.0]);
        assert_eq!(s.std[0], 1.0);
        assert_eq!(s.x.row(0), &[-1.0, 0.0]);
        assert_eq!(s.x.row(1), &[1.0, 0.0]);
    }

    #[test]
    fn constant_column_standardizes_to_zero() {
        let x = Matrix::from_rows(&[vec![5.0], vec![5.0], vec![5.0]]).unwrap();
        let s = standardize(&x);
        assert!(s.x.as_slice().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn standardize_matches_single_pass_oracle() {
        // Welford's single-pass update, independent of the two-pass routine.
        let col = [0.0, 0.0, 3.0, 4.0];
        let (mut mean, mut m2) = (0.0f64, 0.0f64);
        for (k, &v) in col.iter().enumerate() {
            let delta = v - mean;
            mean += delta / (k + 1) as f64;
            m2 += delta * (v - mean);
        }
        let sigma = (m2 / col.len() as f64).sqrt();
        assert_eq!(mean, 1.75);
        // sqrt(3.1875)
        assert!((sigma - 1.785_357_107_135_712_6).abs() < 1e-12);

        let x = Matrix::from_rows(&col.iter().map(|&v| vec![v]).collect::<Vec<_>>()).unwrap();
        let s = standardize(&x);
        assert!((s.mean[0] - mean).abs() < 1e-15);
        assert!((s.std[0] - sigma).abs() < 1e-12);
        for (i, &v) in col.iter().enumerate() {
            assert!((s.x.get(i, 0) - (v - mean) / sigma).abs() < 1e-12);
        }
    }

    #[test]
    fn shuffle_edge_cases() {
        let one = parse("a,label\n7,1\n", Some("label")).unwrap();
        assert_eq!(one.shuffled(9), one);
        let five = parse("a,label\n1,0\n2,1\n3,0\n4,0\n5,1\n", Some("label")).unwrap();
        assert_eq!(five.shuffled(3), five.shuffled(3));
        let mut a: Vec<u64> = five.shuffled(1).x.as_slice().iter().map(|v| v.to_bits()).collect();
        let mut b: Vec<u64> = five.shuffled(2).x.as_slice().iter().map(|v| v.to_bits()).collect();
        a.sort_unstable();
        b.sort_unstable();
        assert_eq!(a, b);
    }

    fn dataset_strategy() -> impl Strategy<Value = RawDataset> {
        (1usize..12, 1usize..4).prop_flat_map(|(n, d)| {
            (
                prop::collection::vec(-1e6f64..1e6, n * d),
                prop::collection::vec(any::<bool>(), n),
            )
                .prop_map(move |(vals, flags)| {
                    let x = Matrix::new(n, d, vals).unwrap();
                    let cols = (0..d).map(|j| format!("f{j}")).collect();
                    let y = flags
                        .into_iter()
                        .map(|b| if b { Label::Anomaly } else { Label::Normal })
                        .collect();
                    RawDataset::new("p", cols, x, Some(y)).unwrap()
                })
        })
    }

    proptest! {
        #[test]
        fn csv_round_trip_is_bit_exact(ds in dataset_strategy()) {
            let mut buf = Vec::new();
            write_csv(&ds, &mut buf).unwrap();
            let back = parse_csv(buf.as_slice(), "p", Some("label")).unwrap();
            prop_assert_eq!(back, ds);
        }

        #[test]
        fn shuffle_preserves_row_label_pairs(ds in dataset_strategy(), seed in any::<u64>()) {
            let sh = ds.shuffled(seed);
            let pairs = |d: &RawDataset| {
                let mut v: Vec<(Vec<u64>, u8)> = d.x.iter_rows().zip(d.labels.as_ref().unwrap())
                    .map(|(r, l)| (r.iter().map(|x| x.to_bits()).collect(), l.file_value()))
                    .collect();
                v.sort();
                v
            };
            prop_assert_eq!(pairs(&sh), pairs(&ds));
        }

        #[test]
        fn standardize_is_idempotent(ds in dataset_strategy()) {
            let once = standardize(&ds.x);
            let twice = standardize(&once.x);
            for j in 0..ds.d() {
                prop_assert!(twice.mean[j].abs() < 1e-9);
                if once.std[j] > 1e-6 {
                    for i in 0..ds.n() {
                        prop_assert!((once.x.get(i, j) - twice.x.get(i, j)).abs() < 1e-9);
                    }
                }
            }
        }
    }
}
