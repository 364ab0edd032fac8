//! Datasets: synthetic slice-traffic stand-in, CSV ingestion and per-client
//! partitioning.

use std::collections::HashMap;
use std::path::Path;

use ndarray::{Array2, ArrayView2, Axis};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Fraction of every class held out for testing.
pub const TEST_FRACTION: f64 = 0.2;

/// Variance below which a feature column is treated as constant.
pub const VARIANCE_FLOOR: f64 = 1e-12;

#[derive(Debug, Error)]
pub enum DataError {
    #[error("input error: {0}")]
    Input(String),
    #[error("format error at row {row}: {message}")]
    Format { row: usize, message: String },
    #[error(transparent)]
    Csv(#[from] csv::Error),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

#[derive(Clone, Debug, PartialEq)]
pub struct LabeledDataset {
    pub features: Array2<f64>,
    /// One-hot rows.
    pub labels: Array2<f64>,
    pub class_names: Vec<String>,
}

impl LabeledDataset {
    pub fn new(features: Array2<f64>, labels: Array2<f64>, class_names: Vec<String>) -> Result<Self, DataError> {
        if features.nrows() != labels.nrows() {
            return Err(DataError::Input(format!(
                "{} feature rows but {} label rows",
                features.nrows(),
                labels.nrows()
            )));
        }
        if labels.ncols() != class_names.len() {
            return Err(DataError::Input("label width does not match class names".into()));
        }
        for (i, row) in labels.rows().into_iter().enumerate() {
            let ones = row.iter().filter(|&&v| v == 1.0).count();
            let zeros = row.iter().filter(|&&v| v == 0.0).count();
            if ones != 1 || ones + zeros != row.len() {
                return Err(DataError::Input(format!("label row {i} is not one-hot")));
            }
        }
        Ok(Self {
            features,
            labels,
            class_names,
        })
    }

    pub fn len(&self) -> usize {
        self.features.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn feature_width(&self) -> usize {
        self.features.ncols()
    }

    pub fn class_count(&self) -> usize {
        self.class_names.len()
    }

    pub fn class_of(&self, row: usize) -> usize {
        self.labels.row(row).iter().position(|&v| v == 1.0).unwrap()
    }

    pub fn classes(&self) -> Vec<usize> {
        (0..self.len()).map(|i| self.class_of(i)).collect()
    }

    pub fn select(&self, rows: &[usize]) -> LabeledDataset {
        LabeledDataset {
            features: self.features.select(Axis(0), rows),
            labels: self.labels.select(Axis(0), rows),
            class_names: self.class_names.clone(),
        }
    }
}

fn one_hot(classes: &[usize], count: usize) -> Array2<f64> {
    let mut m = Array2::zeros((classes.len(), count));
    for (i, &c) in classes.iter().enumerate() {
        m[[i, c]] = 1.0;
    }
    m
}

#[derive(Clone, Debug, PartialEq)]
pub struct SyntheticData {
    pub train: LabeledDataset,
    pub test: LabeledDataset,
}

/// Gaussian clusters with identity covariance. Class `k` is centred at
/// `separation/√2 · e_k`, so every pair of class means is `separation` apart.
/// Classes are balanced and a stratified 20% test split is held out.
pub fn gen_synthetic(n: usize, d: usize, classes: usize, separation: f64, seed: u64) -> Result<SyntheticData, DataError> {
    if classes < 2 {
        return Err(DataError::Input(format!("need at least two classes, got {classes}")));
    }
    if n < classes {
        return Err(DataError::Input(format!("{n} samples cannot cover {classes} classes")));
    }
    if d < classes {
        return Err(DataError::Input(format!("feature width {d} smaller than class count {classes}")));
    }
    if !(separation >= 0.0 && separation.is_finite()) {
        return Err(DataError::Input(format!("separation must be non-negative, got {separation}")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let offset = separation / std::f64::consts::SQRT_2;
    let names: Vec<String> = (0..classes).map(|k| format!("class{k}")).collect();
    let mut train_rows = Vec::new();
    let mut test_rows = Vec::new();
    for k in 0..classes {
        let count = n / classes + usize::from(k < n % classes);
        let n_test = (count as f64 * TEST_FRACTION).round() as usize;
        for i in 0..count {
            let mut x: Vec<f64> = (0..d).map(|_| StandardNormal.sample(&mut rng)).collect();
            x[k] += offset;
            if i < n_test {
                test_rows.push((x, k));
            } else {
                train_rows.push((x, k));
            }
        }
    }
    train_rows.shuffle(&mut rng);
    test_rows.shuffle(&mut rng);
    let build = |rows: Vec<(Vec<f64>, usize)>| -> Result<LabeledDataset, DataError> {
        let classes_v: Vec<usize> = rows.iter().map(|r| r.1).collect();
        let flat: Vec<f64> = rows.into_iter().flat_map(|r| r.0).collect();
        let features = Array2::from_shape_vec((classes_v.len(), d), flat).expect("consistent shape");
        LabeledDataset::new(features, one_hot(&classes_v, classes), names.clone())
    };
    Ok(SyntheticData {
        train: build(train_rows)?,
        test: build(test_rows)?,
    })
}

/// Stratified hold-out of `TEST_FRACTION` of every class.
pub fn train_test_split(ds: &LabeledDataset, seed: u64) -> SyntheticData {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let classes = ds.classes();
    let mut train = Vec::new();
    let mut test = Vec::new();
    for k in 0..ds.class_count() {
        let mut rows: Vec<usize> = (0..ds.len()).filter(|&i| classes[i] == k).collect();
        rows.shuffle(&mut rng);
        let n_test = (rows.len() as f64 * TEST_FRACTION).round() as usize;
        test.extend_from_slice(&rows[..n_test]);
        train.extend_from_slice(&rows[n_test..]);
    }
    train.shuffle(&mut rng);
    test.shuffle(&mut rng);
    SyntheticData {
        train: ds.select(&train),
        test: ds.select(&test),
    }
}

/// Columns used when reading a CSV file.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CsvSchema {
    pub label_column: String,
    /// Feature columns in order; every non-label column when absent.
    #[serde(default)]
    pub feature_columns: Option<Vec<String>>,
}

/// Per-column standardization to zero mean and unit variance. Constant
/// columns become zero.
pub fn standardize(features: &mut Array2<f64>) {
    let n = features.nrows() as f64;
    if n == 0.0 {
        return;
    }
    for mut col in features.columns_mut() {
        let mean = col.sum() / n;
        let var = col.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
        if var < VARIANCE_FLOOR {
            col.fill(0.0);
        } else {
            let sd = var.sqrt();
            col.mapv_inplace(|v| (v - mean) / sd);
        }
    }
}

/// Reads a comma-separated file with a header row. Features are standardized;
/// labels become one-hot in first-appearance order.
pub fn load_csv(path: &Path, schema: &CsvSchema) -> Result<LabeledDataset, DataError> {
    let mut reader = csv::ReaderBuilder::new().has_headers(true).from_path(path)?;
    let headers = reader.headers()?.clone();
    let find = |name: &str| {
        headers.iter().position(|h| h == name).ok_or_else(|| DataError::Format {
            row: 0,
            message: format!("missing column `{name}`"),
        })
    };
    let label_idx = find(&schema.label_column)?;
    let feature_idx: Vec<usize> = match &schema.feature_columns {
        Some(cols) => cols.iter().map(|c| find(c)).collect::<Result<_, _>>()?,
        None => (0..headers.len()).filter(|&i| i != label_idx).collect(),
    };
    if feature_idx.is_empty() {
        return Err(DataError::Format {
            row: 0,
            message: "no feature columns".into(),
        });
    }
    let mut flat = Vec::new();
    let mut classes = Vec::new();
    let mut names: Vec<String> = Vec::new();
    let mut lookup: HashMap<String, usize> = HashMap::new();
    for (i, record) in reader.records().enumerate() {
        // header is row 0; data rows count from 1
        let row = i + 1;
        let record = record?;
        for &c in &feature_idx {
            let cell = record.get(c).ok_or_else(|| DataError::Format {
                row,
                message: format!("missing cell in column {c}"),
            })?;
            let v: f64 = cell.trim().parse().map_err(|_| DataError::Format {
                row,
                message: format!("non-numeric cell `{cell}` in column `{}`", &headers[c]),
            })?;
            if !v.is_finite() {
                return Err(DataError::Format {
                    row,
                    message: format!("non-finite cell `{cell}`"),
                });
            }
            flat.push(v);
        }
        let label = record.get(label_idx).ok_or_else(|| DataError::Format {
            row,
            message: "missing label cell".into(),
        })?;
        let next = names.len();
        let class = *lookup.entry(label.to_string()).or_insert_with(|| {
            names.push(label.to_string());
            next
        });
        classes.push(class);
    }
    let mut features = Array2::from_shape_vec((classes.len(), feature_idx.len()), flat).expect("consistent shape");
    standardize(&mut features);
    LabeledDataset::new(features, one_hot(&classes, names.len()), names)
}

/// Writes features (`f0`, `f1`, … unless names are given) and a label column.
pub fn write_csv(ds: &LabeledDataset, path: &Path, label_column: &str) -> Result<(), DataError> {
    let mut w = csv::Writer::from_path(path)?;
    let mut header: Vec<String> = (0..ds.feature_width()).map(|j| format!("f{j}")).collect();
    header.push(label_column.to_string());
    w.write_record(&header)?;
    for i in 0..ds.len() {
        let mut rec: Vec<String> = ds.features.row(i).iter().map(|v| v.to_string()).collect();
        rec.push(ds.class_names[ds.class_of(i)].clone());
        w.write_record(&rec)?;
    }
    w.flush()?;
    Ok(())
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum PartitionMode {
    OneClassPerClient,
    Iid,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct PartitionSpec {
    pub clients: usize,
    pub mode: PartitionMode,
    pub seed: u64,
}

fn even_chunks(items: &[usize], parts: usize) -> Vec<Vec<usize>> {
    let base = items.len() / parts;
    let extra = items.len() % parts;
    let mut out = Vec::with_capacity(parts);
    let mut start = 0;
    for p in 0..parts {
        let len = base + usize::from(p < extra);
        out.push(items[start..start + len].to_vec());
        start += len;
    }
    out
}

/// Row indices held by each client.
pub fn partition_indices(ds: &LabeledDataset, spec: &PartitionSpec) -> Result<Vec<Vec<usize>>, DataError> {
    let m = spec.clients;
    if m == 0 {
        return Err(DataError::Input("need at least one client".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    match spec.mode {
        PartitionMode::Iid => {
            if ds.len() < m {
                return Err(DataError::Input(format!("{} samples for {m} clients", ds.len())));
            }
            let mut idx: Vec<usize> = (0..ds.len()).collect();
            idx.shuffle(&mut rng);
            Ok(even_chunks(&idx, m))
        }
        PartitionMode::OneClassPerClient => {
            let c = ds.class_count();
            if m < c {
                return Err(DataError::Input(format!(
                    "{m} clients cannot hold {c} classes one class each"
                )));
            }
            let classes = ds.classes();
            let mut out = vec![Vec::new(); m];
            for k in 0..c {
                let owners: Vec<usize> = (0..m).filter(|client| client % c == k).collect();
                let mut rows: Vec<usize> = (0..ds.len()).filter(|&i| classes[i] == k).collect();
                if rows.len() < owners.len() {
                    return Err(DataError::Input(format!(
                        "class {k} has {} samples for {} clients",
                        rows.len(),
                        owners.len()
                    )));
                }
                rows.shuffle(&mut rng);
                let chunks = even_chunks(&rows, owners.len());
                for (owner, chunk) in owners.into_iter().zip(chunks) {
                    out[owner] = chunk;
                }
            }
            Ok(out)
        }
    }
}

pub fn partition(ds: &LabeledDataset, spec: &PartitionSpec) -> Result<Vec<LabeledDataset>, DataError> {
    Ok(partition_indices(ds, spec)?.iter().map(|rows| ds.select(rows)).collect())
}

/// Per-column mean and variance, for checks on standardized data.
pub fn column_moments(m: ArrayView2<f64>) -> Vec<(f64, f64)> {
    let n = m.nrows() as f64;
    m.columns()
        .into_iter()
        .map(|col| {
            let mean = col.sum() / n;
            let var = col.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
            (mean, var)
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::collections::HashSet;
    use std::io::Write as _;

    #[test]
    fn synthetic_is_deterministic_and_stratified() {
        let a = gen_synthetic(300, 8, 3, 4.0, 7).unwrap();
        let b = gen_synthetic(300, 8, 3, 4.0, 7).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.test.len(), 60);
        assert_eq!(a.train.len(), 240);
        for k in 0..3 {
            assert_eq!(a.test.classes().iter().filter(|&&c| c == k).count(), 20);
        }
    }

    #[test]
    fn synthetic_rejects_bad_inputs() {
        assert!(gen_synthetic(2, 8, 3, 1.0, 0).is_err());
        assert!(gen_synthetic(30, 8, 1, 1.0, 0).is_err());
        assert!(gen_synthetic(30, 2, 3, 1.0, 0).is_err());
    }

    #[test]
    fn zero_separation_gives_coinciding_means() {
        let data = gen_synthetic(30_000, 4, 3, 0.0, 1).unwrap();
        let classes = data.train.classes();
        let mut means = vec![vec![0.0; 4]; 3];
        let mut counts = [0.0; 3];
        for (i, &k) in classes.iter().enumerate() {
            counts[k] += 1.0;
            for j in 0..4 {
                means[k][j] += data.train.features[[i, j]];
            }
        }
        for k in 0..3 {
            for j in 0..4 {
                assert!((means[k][j] / counts[k]).abs() < 0.05);
            }
        }
    }

    fn write_tmp(contents: &str) -> tempfile::NamedTempFile {
        let mut f = tempfile::NamedTempFile::new().unwrap();
        f.write_all(contents.as_bytes()).unwrap();
        f
    }

    fn schema() -> CsvSchema {
        CsvSchema {
            label_column: "slice".into(),
            feature_columns: None,
        }
    }

    #[test]
    fn csv_parses_and_standardizes() {
        let f = write_tmp("a,slice,b\n1,embb,5\n2,urllc,5\n3,embb,5\n");
        let ds = load_csv(f.path(), &schema()).unwrap();
        let s = (2.0f64 / 3.0).sqrt();
        let expect_a = [-1.0 / s, 0.0, 1.0 / s];
        for i in 0..3 {
            assert!((ds.features[[i, 0]] - expect_a[i]).abs() < 1e-12);
            // constant column
            assert_eq!(ds.features[[i, 1]], 0.0);
        }
        assert_eq!(ds.class_names, vec!["embb", "urllc"]);
        assert_eq!(ds.classes(), vec![0, 1, 0]);
    }

    #[test]
    fn csv_errors_carry_row() {
        let f = write_tmp("a,slice\n1,x\nfoo,y\n");
        match load_csv(f.path(), &schema()) {
            Err(DataError::Format { row, .. }) => assert_eq!(row, 2),
            other => panic!("{other:?}"),
        }
        let f = write_tmp("a,b\n1,2\n");
        assert!(matches!(load_csv(f.path(), &schema()), Err(DataError::Format { row: 0, .. })));
    }

    #[test]
    fn csv_round_trip() {
        let data = gen_synthetic(60, 4, 3, 2.0, 3).unwrap();
        let mut ds = data.train.clone();
        standardize(&mut ds.features);
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("d.csv");
        write_csv(&ds, &path, "slice").unwrap();
        let back = load_csv(&path, &schema()).unwrap();
        assert_eq!(back.labels, ds.labels);
        for (a, b) in back.features.iter().zip(ds.features.iter()) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn one_class_mode_with_m_equal_c() {
        let data = gen_synthetic(90, 4, 3, 2.0, 3).unwrap();
        let parts = partition(
            &data.train,
            &PartitionSpec {
                clients: 3,
                mode: PartitionMode::OneClassPerClient,
                seed: 1,
            },
        )
        .unwrap();
        for (m, p) in parts.iter().enumerate() {
            assert_eq!(p.len(), 24);
            assert!(p.classes().iter().all(|&c| c == m));
        }
    }

    #[test]
    fn iid_sizes_differ_by_at_most_one() {
        let data = gen_synthetic(101, 4, 3, 2.0, 3).unwrap();
        let parts = partition(
            &data.train,
            &PartitionSpec {
                clients: 2,
                mode: PartitionMode::Iid,
                seed: 5,
            },
        )
        .unwrap();
        assert!(parts[0].len().abs_diff(parts[1].len()) <= 1);
    }

    #[test]
    fn holdout_is_stratified() {
        let full = gen_synthetic(300, 4, 3, 2.0, 1).unwrap().train;
        let split = train_test_split(&full, 4);
        assert_eq!(split.train.len() + split.test.len(), full.len());
        for k in 0..3 {
            let total = full.classes().iter().filter(|&&c| c == k).count();
            let held = split.test.classes().iter().filter(|&&c| c == k).count();
            assert_eq!(held, (total as f64 * TEST_FRACTION).round() as usize);
        }
    }

    #[test]
    fn partitions_are_disjoint_and_exhaustive() {
        let data = gen_synthetic(124, 4, 3, 2.0, 3).unwrap();
        assert_eq!(data.train.len(), 100);
        for (mode, m) in [(PartitionMode::Iid, 7), (PartitionMode::OneClassPerClient, 7)] {
            let idx = partition_indices(&data.train, &PartitionSpec { clients: m, mode, seed: 2 }).unwrap();
            let mut seen = HashSet::new();
            for part in &idx {
                assert!(!part.is_empty());
                for &i in part {
                    assert!(seen.insert(i), "row {i} assigned twice");
                }
            }
            assert_eq!(seen, (0..100).collect::<HashSet<_>>());
        }
    }

    #[test]
    fn class_with_too_few_samples_is_rejected() {
        let data = gen_synthetic(9, 4, 3, 2.0, 3).unwrap();
        let err = partition(
            &data.train,
            &PartitionSpec {
                clients: 12,
                mode: PartitionMode::OneClassPerClient,
                seed: 0,
            },
        );
        assert!(matches!(err, Err(DataError::Input(_))));
    }
}
