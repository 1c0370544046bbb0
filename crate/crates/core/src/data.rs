//! Tabular datasets: CSV ingestion with one-hot expansion, standardization,
//! splits, and the synthetic generators used by the experiments.
//!
//! Synthetic generators (all pure functions of `(n, noise_std, seed)`):
//!
//! | name        | inputs                                   | target                                                       |
//! |-------------|------------------------------------------|--------------------------------------------------------------|
//! | `step`      | evenly spaced grid on `[-1, 1]`          | `1[x > 0] + ε`                                               |
//! | `gap_blobs` | uniform on `[-2, -0.5] ∪ [0.5, 2]`       | `sin(1.5 x) + ε`                                             |
//! | `tail_line` | uniform on `[-1, 1]`                     | `sin(2 x) + ε`                                               |
//! | `friedman`  | uniform on `[0, 1]^5`                    | `10 sin(π x₁x₂) + 20 (x₃ - ½)² + 10 x₄ + 5 x₅ + ε`             |
//! | `linear`    | uniform on `[-1, 1]`                     | `2 x + 1 + ε`                                                |
//!
//! with `ε ~ N(0, noise_std²)`.

use std::collections::HashMap;
use std::fmt;
use std::io::{Read, Write};
use std::path::Path;
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng;

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum ColumnKind {
    Numeric,
    /// One indicator column of an expanded categorical field.
    OneHot { field: String, category: String },
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ColumnMeta {
    pub name: String,
    pub kind: ColumnKind,
}

/// Row-major feature matrix plus target vector.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    features: Vec<f64>,
    n_features: usize,
    pub target: Vec<f64>,
    pub columns: Vec<ColumnMeta>,
    pub target_name: String,
}

impl Dataset {
    pub fn new(features: Vec<f64>, n_features: usize, target: Vec<f64>) -> Result<Self> {
        let columns = (0..n_features)
            .map(|j| ColumnMeta { name: format!("x{j}"), kind: ColumnKind::Numeric })
            .collect();
        Self::with_columns(features, target, columns, "y".to_string())
    }

    pub fn with_columns(
        features: Vec<f64>,
        target: Vec<f64>,
        columns: Vec<ColumnMeta>,
        target_name: String,
    ) -> Result<Self> {
        let p = columns.len();
        if p == 0 {
            return Err(Error::data("dataset needs at least one feature column"));
        }
        if features.len() != target.len() * p {
            return Err(Error::data(format!(
                "{} feature values do not form {} rows of {p}",
                features.len(),
                target.len()
            )));
        }
        if features.iter().chain(&target).any(|v| !v.is_finite()) {
            return Err(Error::data("dataset contains non-finite values"));
        }
        Ok(Self { features, n_features: p, target, columns, target_name })
    }

    pub fn from_rows(rows: &[Vec<f64>], target: Vec<f64>) -> Result<Self> {
        let p = rows.first().map_or(0, |r| r.len());
        if rows.iter().any(|r| r.len() != p) {
            return Err(Error::data("ragged feature rows"));
        }
        Self::new(rows.concat(), p, target)
    }

    pub fn len(&self) -> usize {
        self.target.len()
    }

    pub fn is_empty(&self) -> bool {
        self.target.is_empty()
    }

    pub fn n_features(&self) -> usize {
        self.n_features
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.features[i * self.n_features..(i + 1) * self.n_features]
    }

    pub fn rows(&self) -> Vec<&[f64]> {
        self.features.chunks(self.n_features).collect()
    }

    pub fn features(&self) -> &[f64] {
        &self.features
    }

    pub fn column(&self, j: usize) -> Vec<f64> {
        (0..self.len()).map(|i| self.features[i * self.n_features + j]).collect()
    }

    pub fn select(&self, indices: &[usize]) -> Dataset {
        let mut features = Vec::with_capacity(indices.len() * self.n_features);
        for &i in indices {
            features.extend_from_slice(self.row(i));
        }
        Dataset {
            features,
            n_features: self.n_features,
            target: indices.iter().map(|&i| self.target[i]).collect(),
            columns: self.columns.clone(),
            target_name: self.target_name.clone(),
        }
    }

    /// Write as a comma-separated table with a header row; the target is the last column.
    pub fn write_csv<W: Write>(&self, writer: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(writer);
        let mut header: Vec<&str> = self.columns.iter().map(|c| c.name.as_str()).collect();
        header.push(&self.target_name);
        w.write_record(&header).map_err(csv_err)?;
        for i in 0..self.len() {
            let mut rec: Vec<String> = self.row(i).iter().map(|v| v.to_string()).collect();
            rec.push(self.target[i].to_string());
            w.write_record(&rec).map_err(csv_err)?;
        }
        w.flush()?;
        Ok(())
    }

    pub fn save_csv(&self, path: impl AsRef<Path>) -> Result<()> {
        let file = std::fs::File::create(path.as_ref())?;
        self.write_csv(std::io::BufWriter::new(file))
    }
}

fn csv_err(e: csv::Error) -> Error {
    Error::data(format!("csv: {e}"))
}

/// Read a schema sidecar: one categorical column name per line, `#` comments allowed.
pub fn read_schema(path: impl AsRef<Path>) -> Result<Vec<String>> {
    let text = std::fs::read_to_string(path.as_ref())?;
    Ok(text
        .lines()
        .map(|l| l.split('#').next().unwrap_or("").trim())
        .filter(|l| !l.is_empty())
        .map(str::to_string)
        .collect())
}

pub fn load_table(path: impl AsRef<Path>, target_column: &str, categorical: &[String]) -> Result<Dataset> {
    let path = path.as_ref();
    let file = std::fs::File::open(path).map_err(|e| Error::data(format!("{}: {e}", path.display())))?;
    read_table(file, target_column, categorical).map_err(|e| e.context(path.display()))
}

/// Parse a header-first comma-separated table. Columns named in
/// `categorical` are one-hot expanded with categories in order of first
/// appearance; every other cell must parse as a finite number.
pub fn read_table<R: Read>(reader: R, target_column: &str, categorical: &[String]) -> Result<Dataset> {
    parse_table(reader, target_column, categorical, true)
}

/// Like [`load_table`] but the target column may be absent, in which case
/// every column is a feature and the target is all zeros.
pub fn load_inputs(path: impl AsRef<Path>, target_column: &str, categorical: &[String]) -> Result<Dataset> {
    let path = path.as_ref();
    let file = std::fs::File::open(path).map_err(|e| Error::data(format!("{}: {e}", path.display())))?;
    parse_table(file, target_column, categorical, false).map_err(|e| e.context(path.display()))
}

fn parse_table<R: Read>(reader: R, target_column: &str, categorical: &[String], require_target: bool) -> Result<Dataset> {
    let mut rdr = csv::ReaderBuilder::new().has_headers(true).from_reader(reader);
    let header: Vec<String> = rdr.headers().map_err(csv_err)?.iter().map(|h| h.trim().to_string()).collect();
    if header.is_empty() || header.iter().all(|h| h.is_empty()) {
        return Err(Error::data("empty file"));
    }
    let target_idx = header.iter().position(|h| h == target_column);
    if require_target && target_idx.is_none() {
        return Err(Error::data(format!("target column '{target_column}' not found")));
    }
    for c in categorical {
        if !header.contains(c) {
            return Err(Error::data(format!("categorical column '{c}' not found")));
        }
        if c == target_column {
            return Err(Error::data("the target column cannot be categorical"));
        }
    }
    let records: Vec<csv::StringRecord> = rdr.records().collect::<std::result::Result<_, _>>().map_err(csv_err)?;
    if records.is_empty() {
        return Err(Error::data("file has a header but no rows"));
    }

    let parse = |row: usize, col: usize, cell: &str| -> Result<f64> {
        let v: f64 = cell.trim().parse().map_err(|_| {
            Error::data(format!("row {}, column '{}': cannot parse '{cell}'", row + 1, header[col]))
        })?;
        if !v.is_finite() {
            return Err(Error::data(format!("row {}, column '{}': non-finite value", row + 1, header[col])));
        }
        Ok(v)
    };

    // Category levels per categorical column, in first-appearance order.
    let mut levels: HashMap<usize, Vec<String>> = HashMap::new();
    for (col, name) in header.iter().enumerate() {
        if categorical.contains(name) {
            let mut seen: Vec<String> = Vec::new();
            for rec in &records {
                let cell = rec.get(col).unwrap_or("").trim().to_string();
                if !seen.contains(&cell) {
                    seen.push(cell);
                }
            }
            levels.insert(col, seen);
        }
    }

    let mut columns = Vec::new();
    for (col, name) in header.iter().enumerate() {
        if Some(col) == target_idx {
            continue;
        }
        match levels.get(&col) {
            Some(cats) => columns.extend(cats.iter().map(|c| ColumnMeta {
                name: format!("{name}={c}"),
                kind: ColumnKind::OneHot { field: name.clone(), category: c.clone() },
            })),
            None => columns.push(ColumnMeta { name: name.clone(), kind: ColumnKind::Numeric }),
        }
    }
    if columns.is_empty() {
        return Err(Error::data("no feature columns besides the target"));
    }

    let mut features = Vec::with_capacity(records.len() * columns.len());
    let mut target = Vec::with_capacity(records.len());
    for (row, rec) in records.iter().enumerate() {
        if rec.len() != header.len() {
            return Err(Error::data(format!(
                "row {} has {} cells, header has {}",
                row + 1,
                rec.len(),
                header.len()
            )));
        }
        for (col, cell) in rec.iter().enumerate() {
            if Some(col) == target_idx {
                target.push(parse(row, col, cell)?);
            } else if let Some(cats) = levels.get(&col) {
                let cell = cell.trim();
                features.extend(cats.iter().map(|c| if c == cell { 1.0 } else { 0.0 }));
            } else {
                features.push(parse(row, col, cell)?);
            }
        }
    }
    if target_idx.is_none() {
        target = vec![0.0; records.len()];
    }
    Dataset::with_columns(features, target, columns, target_column.to_string())
}

/// Per-column affine transform to zero mean and unit (population) variance.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Standardization {
    pub feature_mean: Vec<f64>,
    pub feature_std: Vec<f64>,
    pub target_mean: f64,
    pub target_std: f64,
    /// Columns whose std was zero and forced to one.
    pub constant_features: Vec<bool>,
    pub constant_target: bool,
}

fn mean_std(values: impl Iterator<Item = f64> + Clone) -> (f64, f64, bool) {
    let n = values.clone().count() as f64;
    let mean = values.clone().sum::<f64>() / n;
    let var = values.map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
    let std = var.sqrt();
    if std > 1e-12 * mean.abs().max(1.0) {
        (mean, std, false)
    } else {
        (mean, 1.0, true)
    }
}

impl Standardization {
    pub fn fit(train: &Dataset) -> Result<Self> {
        if train.is_empty() {
            return Err(Error::invalid("cannot standardize an empty dataset"));
        }
        let p = train.n_features();
        let mut feature_mean = Vec::with_capacity(p);
        let mut feature_std = Vec::with_capacity(p);
        let mut constant_features = Vec::with_capacity(p);
        for j in 0..p {
            let (m, s, c) = mean_std((0..train.len()).map(|i| train.row(i)[j]));
            feature_mean.push(m);
            feature_std.push(s);
            constant_features.push(c);
        }
        let (target_mean, target_std, constant_target) = mean_std(train.target.iter().copied());
        Ok(Self { feature_mean, feature_std, target_mean, target_std, constant_features, constant_target })
    }

    /// The identity transform on `p` features.
    pub fn identity(p: usize) -> Self {
        Self {
            feature_mean: vec![0.0; p],
            feature_std: vec![1.0; p],
            target_mean: 0.0,
            target_std: 1.0,
            constant_features: vec![false; p],
            constant_target: false,
        }
    }

    pub fn n_features(&self) -> usize {
        self.feature_mean.len()
    }

    pub fn features(&self, x: &[f64]) -> Vec<f64> {
        x.iter()
            .zip(self.feature_mean.iter().zip(&self.feature_std))
            .map(|(v, (m, s))| (v - m) / s)
            .collect()
    }

    pub fn inverse_features(&self, z: &[f64]) -> Vec<f64> {
        z.iter()
            .zip(self.feature_mean.iter().zip(&self.feature_std))
            .map(|(v, (m, s))| v * s + m)
            .collect()
    }

    pub fn target(&self, y: f64) -> f64 {
        (y - self.target_mean) / self.target_std
    }

    pub fn inverse_target(&self, z: f64) -> f64 {
        z * self.target_std + self.target_mean
    }

    pub fn transform(&self, data: &Dataset) -> Result<Dataset> {
        if data.n_features() != self.n_features() {
            return Err(Error::invalid(format!(
                "dataset has {} features, standardization expects {}",
                data.n_features(),
                self.n_features()
            )));
        }
        let mut features = Vec::with_capacity(data.features().len());
        for i in 0..data.len() {
            features.extend(self.features(data.row(i)));
        }
        Ok(Dataset {
            features,
            n_features: data.n_features,
            target: data.target.iter().map(|&y| self.target(y)).collect(),
            columns: data.columns.clone(),
            target_name: data.target_name.clone(),
        })
    }

    pub fn inverse_transform(&self, data: &Dataset) -> Result<Dataset> {
        let mut features = Vec::with_capacity(data.features().len());
        for i in 0..data.len() {
            features.extend(self.inverse_features(data.row(i)));
        }
        Ok(Dataset {
            features,
            n_features: data.n_features,
            target: data.target.iter().map(|&y| self.inverse_target(y)).collect(),
            columns: data.columns.clone(),
            target_name: data.target_name.clone(),
        })
    }
}

/// Fit statistics on `train` and apply them to `apply_to`.
pub fn standardize(train: &Dataset, apply_to: &Dataset) -> Result<(Dataset, Standardization)> {
    let stats = Standardization::fit(train)?;
    Ok((stats.transform(apply_to)?, stats))
}

/// Assignment of row indices to disjoint parts.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SplitPlan {
    /// Part index of every row.
    pub assignment: Vec<usize>,
    pub parts: usize,
}

impl SplitPlan {
    pub fn indices(&self, part: usize) -> Vec<usize> {
        (0..self.assignment.len()).filter(|&i| self.assignment[i] == part).collect()
    }

    pub fn complement(&self, part: usize) -> Vec<usize> {
        (0..self.assignment.len()).filter(|&i| self.assignment[i] != part).collect()
    }

    /// For a train/test plan: part 0.
    pub fn train(&self) -> Vec<usize> {
        self.indices(0)
    }

    /// For a train/test plan: part 1.
    pub fn test(&self) -> Vec<usize> {
        self.indices(1)
    }
}

fn shuffled(n: usize, seed: u64, label: &str) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..n).collect();
    idx.shuffle(&mut rng::stream(seed, label));
    idx
}

/// Shuffled k-fold assignment; fold sizes differ by at most one.
pub fn kfold(n: usize, k: usize, seed: u64) -> Result<SplitPlan> {
    if k < 2 || k > n {
        return Err(Error::invalid(format!("k-fold needs 2 <= k <= n (k={k}, n={n})")));
    }
    let mut assignment = vec![0; n];
    for (pos, i) in shuffled(n, seed, "kfold").into_iter().enumerate() {
        assignment[i] = pos % k;
    }
    Ok(SplitPlan { assignment, parts: k })
}

/// Shuffled split with `round(fraction · n)` training rows (part 0) and the rest test (part 1).
pub fn train_test_split(n: usize, fraction: f64, seed: u64) -> Result<SplitPlan> {
    if fraction.is_nan() || fraction <= 0.0 || fraction >= 1.0 {
        return Err(Error::invalid(format!("train fraction must be in (0, 1), got {fraction}")));
    }
    let n_train = (fraction * n as f64).round() as usize;
    if n_train == 0 || n_train == n {
        return Err(Error::invalid(format!("split of {n} rows at {fraction} leaves an empty part")));
    }
    let mut assignment = vec![1; n];
    for &i in &shuffled(n, seed, "train-test")[..n_train] {
        assignment[i] = 0;
    }
    Ok(SplitPlan { assignment, parts: 2 })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SynthKind {
    Step,
    GapBlobs,
    TailLine,
    Friedman,
    Linear,
}

impl SynthKind {
    pub const ALL: [SynthKind; 5] =
        [SynthKind::Step, SynthKind::GapBlobs, SynthKind::TailLine, SynthKind::Friedman, SynthKind::Linear];

    pub fn name(self) -> &'static str {
        match self {
            SynthKind::Step => "step",
            SynthKind::GapBlobs => "gap_blobs",
            SynthKind::TailLine => "tail_line",
            SynthKind::Friedman => "friedman",
            SynthKind::Linear => "linear",
        }
    }

    /// Noiseless generating function.
    pub fn truth(self, x: &[f64]) -> f64 {
        match self {
            SynthKind::Step => {
                if x[0] > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
            SynthKind::GapBlobs => (1.5 * x[0]).sin(),
            SynthKind::TailLine => (2.0 * x[0]).sin(),
            SynthKind::Friedman => {
                10.0 * (std::f64::consts::PI * x[0] * x[1]).sin()
                    + 20.0 * (x[2] - 0.5).powi(2)
                    + 10.0 * x[3]
                    + 5.0 * x[4]
            }
            SynthKind::Linear => 2.0 * x[0] + 1.0,
        }
    }

    pub fn input_dim(self) -> usize {
        match self {
            SynthKind::Friedman => 5,
            _ => 1,
        }
    }
}

impl fmt::Display for SynthKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for SynthKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        SynthKind::ALL
            .into_iter()
            .find(|k| k.name() == s)
            .ok_or_else(|| Error::invalid(format!("unknown synthetic dataset '{s}'")))
    }
}

pub fn synth(kind: SynthKind, n: usize, noise_std: f64, seed: u64) -> Result<Dataset> {
    if n < 2 {
        return Err(Error::invalid("synthetic datasets need n >= 2"));
    }
    if noise_std.is_nan() || noise_std < 0.0 {
        return Err(Error::invalid("noise_std must be non-negative"));
    }
    let mut rng = rng::stream(seed, kind.name());
    let p = kind.input_dim();
    let mut rows: Vec<Vec<f64>> = Vec::with_capacity(n);
    for i in 0..n {
        let x = match kind {
            SynthKind::Step => vec![-1.0 + 2.0 * i as f64 / (n - 1) as f64],
            SynthKind::GapBlobs => {
                let u: f64 = rng.random_range(0.5..2.0);
                vec![if i % 2 == 0 { -u } else { u }]
            }
            SynthKind::TailLine | SynthKind::Linear => vec![rng.random_range(-1.0..1.0)],
            SynthKind::Friedman => (0..p).map(|_| rng.random::<f64>()).collect(),
        };
        rows.push(x);
    }
    let noise = Normal::new(0.0, noise_std.max(0.0)).map_err(|e| Error::invalid(e.to_string()))?;
    let target = rows
        .iter()
        .map(|x| {
            let eps = if noise_std > 0.0 { noise.sample(&mut rng) } else { 0.0 };
            kind.truth(x) + eps
        })
        .collect();
    Dataset::from_rows(&rows, target)
}
