//! Preprocessing, the Gaussian-kernel baseline, an SMO solver for
//! precomputed kernels, and binary classification metrics.

use std::io::{Read, Write};
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::kernel::{GramKind, GramMatrix, KernelError};

#[derive(Debug, Error)]
pub enum LearnError {
    #[error("training split is empty")]
    EmptyTrain,
    #[error("non-finite value at row {row}, column {col}")]
    NonFinite { row: usize, col: usize },
    #[error("row {row} has {actual} features, expected {expected}")]
    LengthMismatch {
        row: usize,
        expected: usize,
        actual: usize,
    },
    #[error("label {0} is not +1 or -1")]
    BadLabel(String),
    #[error("class {0:+} has no samples")]
    ClassAbsent(i8),
    #[error("class {class:+} has {available} samples, {requested} requested")]
    Insufficient {
        class: i8,
        requested: usize,
        available: usize,
    },
    #[error("requested {requested} features, dataset has {available}")]
    TooManyFeatures { requested: usize, available: usize },
    #[error("train fraction {0} must lie strictly between 0 and 1")]
    BadFraction(f64),
    #[error("Gaussian bandwidth must be positive and finite, got {0}")]
    BadAlpha(f64),
    #[error("regularization C must be positive and finite, got {0}")]
    BadC(f64),
    #[error("tolerance must be positive, got {0}")]
    BadTol(f64),
    #[error("kernel is {rows}x{cols}, expected {expected_rows}x{expected_cols}")]
    Shape {
        rows: usize,
        cols: usize,
        expected_rows: usize,
        expected_cols: usize,
    },
    #[error("training kernel is not symmetric (defect {0:e})")]
    NotSymmetric(f64),
    #[error("SMO stopped after {iterations} iterations with KKT violation {violation:e}")]
    NonConvergence { iterations: usize, violation: f64 },
    #[error("only class {class:+} present, AUC is undefined")]
    SingleClass { class: i8, partial: Box<Metrics> },
    #[error("scores ({scores}) and labels ({labels}) differ in length or are empty")]
    ScoreCount { scores: usize, labels: usize },
    #[error("dataset CSV has no `{0}` column")]
    MissingColumn(String),
    #[error("line {line}, column `{column}`: cannot parse `{value}`")]
    Parse {
        line: usize,
        column: String,
        value: String,
    },
    #[error(transparent)]
    Csv(#[from] csv::Error),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Kernel(#[from] KernelError),
}

pub const LABEL_COLUMN: &str = "class";

/// Labelled feature matrix.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Dataset {
    pub feature_names: Vec<String>,
    pub features: Vec<Vec<f64>>,
    pub labels: Vec<i8>,
    /// Per-feature `(min, max)` of the training split, once rescaled.
    pub rescale_params: Option<Vec<(f64, f64)>>,
}

fn parse_label(raw: &str) -> Result<Option<i8>, LearnError> {
    match raw.trim().to_ascii_lowercase().as_str() {
        "1" | "+1" | "1.0" | "illicit" => Ok(Some(1)),
        // "2" is how the public transaction dataset spells licit
        "-1" | "-1.0" | "2" | "licit" => Ok(Some(-1)),
        "unknown" => Ok(None),
        other => Err(LearnError::BadLabel(other.to_string())),
    }
}

fn is_id_column(name: &str) -> bool {
    matches!(name.trim().to_ascii_lowercase().as_str(), "txid" | "id")
}

impl Dataset {
    pub fn new(features: Vec<Vec<f64>>, labels: Vec<i8>) -> Result<Self, LearnError> {
        let m = features.first().map_or(0, Vec::len);
        let names = (0..m).map(|j| format!("f{j}")).collect();
        Self::with_names(names, features, labels)
    }

    pub fn with_names(
        feature_names: Vec<String>,
        features: Vec<Vec<f64>>,
        labels: Vec<i8>,
    ) -> Result<Self, LearnError> {
        if features.len() != labels.len() {
            return Err(LearnError::ScoreCount {
                scores: features.len(),
                labels: labels.len(),
            });
        }
        if let Some(&bad) = labels.iter().find(|&&y| y != 1 && y != -1) {
            return Err(LearnError::BadLabel(bad.to_string()));
        }
        check_matrix(&features, feature_names.len())?;
        Ok(Self {
            feature_names,
            features,
            labels,
            rescale_params: None,
        })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn num_features(&self) -> usize {
        self.feature_names.len()
    }

    pub fn count(&self, label: i8) -> usize {
        self.labels.iter().filter(|&&y| y == label).count()
    }

    pub fn subset(&self, indices: &[usize]) -> Dataset {
        Dataset {
            feature_names: self.feature_names.clone(),
            features: indices.iter().map(|&i| self.features[i].clone()).collect(),
            labels: indices.iter().map(|&i| self.labels[i]).collect(),
            rescale_params: self.rescale_params.clone(),
        }
    }

    /// Keeps the first `m` feature columns.
    pub fn select_features(&self, m: usize) -> Result<Dataset, LearnError> {
        if m > self.num_features() {
            return Err(LearnError::TooManyFeatures {
                requested: m,
                available: self.num_features(),
            });
        }
        Ok(Dataset {
            feature_names: self.feature_names[..m].to_vec(),
            features: self.features.iter().map(|r| r[..m].to_vec()).collect(),
            labels: self.labels.clone(),
            rescale_params: self.rescale_params.as_ref().map(|p| p[..m].to_vec()),
        })
    }

    /// Reads a headed CSV with a `class` column. Rows labelled `unknown` are
    /// skipped and identifier columns (`txId`, `id`) are ignored.
    pub fn from_csv_reader(reader: impl Read) -> Result<Self, LearnError> {
        let mut rdr = csv::ReaderBuilder::new().trim(csv::Trim::All).from_reader(reader);
        let headers = rdr.headers()?.clone();
        let label_col = headers
            .iter()
            .position(|h| h == LABEL_COLUMN)
            .ok_or_else(|| LearnError::MissingColumn(LABEL_COLUMN.into()))?;
        let feature_cols: Vec<usize> = (0..headers.len())
            .filter(|&c| c != label_col && !is_id_column(&headers[c]))
            .collect();
        let names = feature_cols.iter().map(|&c| headers[c].to_string()).collect();
        let mut features = Vec::new();
        let mut labels = Vec::new();
        for (line, record) in rdr.records().enumerate() {
            let record = record?;
            let Some(y) = parse_label(&record[label_col])? else {
                continue;
            };
            let row = feature_cols
                .iter()
                .map(|&c| {
                    record[c].parse::<f64>().map_err(|_| LearnError::Parse {
                        line: line + 2,
                        column: headers[c].to_string(),
                        value: record[c].to_string(),
                    })
                })
                .collect::<Result<Vec<_>, _>>()?;
            features.push(row);
            labels.push(y);
        }
        Self::with_names(names, features, labels)
    }

    pub fn read_csv(path: &Path) -> Result<Self, LearnError> {
        Self::from_csv_reader(std::fs::File::open(path)?)
    }

    /// Writes features then the `class` column; values use shortest
    /// round-trip formatting so output is byte-stable.
    pub fn write_csv(&self, writer: impl Write) -> Result<(), LearnError> {
        let mut w = csv::Writer::from_writer(writer);
        let mut header = self.feature_names.clone();
        header.push(LABEL_COLUMN.into());
        w.write_record(&header)?;
        for (row, y) in self.features.iter().zip(&self.labels) {
            let mut rec: Vec<String> = row.iter().map(|v| v.to_string()).collect();
            rec.push(y.to_string());
            w.write_record(&rec)?;
        }
        w.flush()?;
        Ok(())
    }
}

fn check_matrix(rows: &[Vec<f64>], m: usize) -> Result<(), LearnError> {
    for (i, r) in rows.iter().enumerate() {
        if r.len() != m {
            return Err(LearnError::LengthMismatch {
                row: i,
                expected: m,
                actual: r.len(),
            });
        }
        if let Some(j) = r.iter().position(|v| !v.is_finite()) {
            return Err(LearnError::NonFinite { row: i, col: j });
        }
    }
    Ok(())
}

/// Per-feature `(min, max)` of the training rows.
pub fn fit_rescale(train: &[Vec<f64>]) -> Result<Vec<(f64, f64)>, LearnError> {
    let first = train.first().ok_or(LearnError::EmptyTrain)?;
    check_matrix(train, first.len())?;
    Ok((0..first.len())
        .map(|j| {
            train.iter().fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), r| {
                (lo.min(r[j]), hi.max(r[j]))
            })
        })
        .collect())
}

/// Maps each feature onto `[0, 2]` with the given extrema, clamping values
/// outside them. Constant features map to 1.
pub fn apply_rescale(rows: &[Vec<f64>], params: &[(f64, f64)]) -> Result<Vec<Vec<f64>>, LearnError> {
    check_matrix(rows, params.len())?;
    Ok(rows
        .iter()
        .map(|r| {
            r.iter()
                .zip(params)
                .map(|(&v, &(lo, hi))| {
                    if hi > lo {
                        (2.0 * (v - lo) / (hi - lo)).clamp(0.0, 2.0)
                    } else {
                        1.0
                    }
                })
                .collect()
        })
        .collect())
}

/// Rescaled `(train, other, params)` using training extrema only.
pub fn rescale(
    train: &[Vec<f64>],
    other: &[Vec<f64>],
) -> Result<(Vec<Vec<f64>>, Vec<Vec<f64>>, Vec<(f64, f64)>), LearnError> {
    let params = fit_rescale(train)?;
    Ok((apply_rescale(train, &params)?, apply_rescale(other, &params)?, params))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Split {
    pub train: Dataset,
    pub test: Dataset,
    pub train_indices: Vec<usize>,
    pub test_indices: Vec<usize>,
}

fn class_indices(ds: &Dataset, label: i8) -> Vec<usize> {
    (0..ds.len()).filter(|&i| ds.labels[i] == label).collect()
}

/// Class-stratified split: each class contributes `round(fraction * n_c)`
/// samples to training. Index lists are ascending.
pub fn split(ds: &Dataset, train_fraction: f64, seed: u64) -> Result<Split, LearnError> {
    if !(train_fraction > 0.0 && train_fraction < 1.0) {
        return Err(LearnError::BadFraction(train_fraction));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (mut train_idx, mut test_idx) = (Vec::new(), Vec::new());
    for label in [1, -1] {
        let mut idx = class_indices(ds, label);
        if idx.is_empty() {
            return Err(LearnError::ClassAbsent(label));
        }
        idx.shuffle(&mut rng);
        let n_train = (train_fraction * idx.len() as f64).round() as usize;
        train_idx.extend_from_slice(&idx[..n_train]);
        test_idx.extend_from_slice(&idx[n_train..]);
    }
    train_idx.sort_unstable();
    test_idx.sort_unstable();
    Ok(Split {
        train: ds.subset(&train_idx),
        test: ds.subset(&test_idx),
        train_indices: train_idx,
        test_indices: test_idx,
    })
}

/// Split followed by rescaling both parts with training extrema.
pub fn split_and_rescale(ds: &Dataset, train_fraction: f64, seed: u64) -> Result<Split, LearnError> {
    let mut s = split(ds, train_fraction, seed)?;
    let (tr, te, params) = rescale(&s.train.features, &s.test.features)?;
    s.train.features = tr;
    s.test.features = te;
    s.train.rescale_params = Some(params.clone());
    s.test.rescale_params = Some(params);
    Ok(s)
}

/// Draws `n_per_class` samples of each class, returned in original order.
pub fn balance(ds: &Dataset, n_per_class: usize, seed: u64) -> Result<Dataset, LearnError> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut keep = Vec::with_capacity(2 * n_per_class);
    for label in [1, -1] {
        let mut idx = class_indices(ds, label);
        if idx.len() < n_per_class {
            return Err(LearnError::Insufficient {
                class: label,
                requested: n_per_class,
                available: idx.len(),
            });
        }
        idx.shuffle(&mut rng);
        keep.extend_from_slice(&idx[..n_per_class]);
    }
    keep.sort_unstable();
    Ok(ds.subset(&keep))
}

/// Seeded two-class generator: each class is a mixture of Gaussian blobs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SyntheticSpec {
    pub n_per_class: usize,
    pub m: usize,
    pub blobs_per_class: usize,
    /// Distance between the two class means, in units of `spread`.
    pub separation: f64,
    /// Standard deviation of points around their blob centre.
    pub spread: f64,
    /// Exponentiate every coordinate, giving heavy-tailed positive features.
    pub log_scale: bool,
    pub seed: u64,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        Self {
            n_per_class: 100,
            m: 15,
            blobs_per_class: 2,
            separation: 4.0,
            spread: 1.0,
            log_scale: false,
            seed: 0,
        }
    }
}

pub fn synthetic(spec: &SyntheticSpec) -> Result<Dataset, LearnError> {
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let std_normal = Normal::new(0.0, 1.0).expect("unit normal");
    let m = spec.m;
    let mut dir: Vec<f64> = (0..m).map(|_| std_normal.sample(&mut rng)).collect();
    let norm = dir.iter().map(|v| v * v).sum::<f64>().sqrt().max(f64::MIN_POSITIVE);
    dir.iter_mut().for_each(|v| *v /= norm);
    let half = 0.5 * spec.separation * spec.spread;
    let mut centres = Vec::new();
    for label in [1i8, -1] {
        for _ in 0..spec.blobs_per_class.max(1) {
            // blobs of a class spread orthogonally-ish around the class mean
            let c: Vec<f64> = dir
                .iter()
                .map(|&u| f64::from(label) * half * u + 0.5 * spec.spread * std_normal.sample(&mut rng))
                .collect();
            centres.push((label, c));
        }
    }
    let per_blob = spec.blobs_per_class.max(1);
    let mut features = Vec::with_capacity(2 * spec.n_per_class);
    let mut labels = Vec::with_capacity(2 * spec.n_per_class);
    for (ci, label) in [1i8, -1].into_iter().enumerate() {
        for s in 0..spec.n_per_class {
            let (_, centre) = &centres[ci * per_blob + s % per_blob];
            let row = centre
                .iter()
                .map(|&c| {
                    let v = c + spec.spread * std_normal.sample(&mut rng);
                    if spec.log_scale {
                        v.exp()
                    } else {
                        v
                    }
                })
                .collect();
            features.push(row);
            labels.push(label);
        }
    }
    Dataset::new(features, labels)
}

/// `1 / (m * var)` with the population variance of every entry of `train`.
pub fn default_alpha(train: &[Vec<f64>]) -> Result<f64, LearnError> {
    let m = train.first().ok_or(LearnError::EmptyTrain)?.len();
    check_matrix(train, m)?;
    let n = (train.len() * m) as f64;
    let mean = train.iter().flatten().sum::<f64>() / n;
    let var = train.iter().flatten().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
    let alpha = 1.0 / (m as f64 * var);
    if !(alpha.is_finite() && alpha > 0.0) {
        return Err(LearnError::BadAlpha(alpha));
    }
    Ok(alpha)
}

/// `exp(-alpha |x - x'|^2)` between every row and column sample.
pub fn gaussian_gram(
    rows: &[Vec<f64>],
    cols: &[Vec<f64>],
    alpha: f64,
    kind: GramKind,
) -> Result<GramMatrix, LearnError> {
    if !(alpha.is_finite() && alpha > 0.0) {
        return Err(LearnError::BadAlpha(alpha));
    }
    let m = rows.first().or(cols.first()).map_or(0, Vec::len);
    check_matrix(rows, m)?;
    check_matrix(cols, m)?;
    let k = |a: &[f64], b: &[f64]| {
        let d2: f64 = a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum();
        (-alpha * d2).exp()
    };
    let (nr, nc) = (rows.len(), cols.len());
    let mut e = vec![0.0; nr * nc];
    match kind {
        GramKind::Train => {
            if rows != cols {
                return Err(KernelError::TrainNotSquare.into());
            }
            for i in 0..nr {
                e[i * nc + i] = 1.0;
                for j in i + 1..nc {
                    let v = k(&rows[i], &rows[j]);
                    e[i * nc + j] = v;
                    e[j * nc + i] = v;
                }
            }
        }
        GramKind::Test => {
            for i in 0..nr {
                for j in 0..nc {
                    e[i * nc + j] = k(&rows[i], &cols[j]);
                }
            }
        }
    }
    Ok(GramMatrix::new(kind, nr, nc, e)?)
}

pub const DEFAULT_TOL: f64 = 1e-3;
pub const DEFAULT_MAX_ITER: usize = 100_000;
const TAU: f64 = 1e-12;

#[derive(Debug, Clone, PartialEq)]
pub struct SvmOptions {
    pub c: f64,
    pub tol: f64,
    pub max_iter: usize,
    /// Record the dual objective after every update.
    pub trace_objective: bool,
}

impl SvmOptions {
    pub fn new(c: f64) -> Self {
        Self {
            c,
            tol: DEFAULT_TOL,
            max_iter: DEFAULT_MAX_ITER,
            trace_objective: false,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SvmModel {
    /// `alpha_i * y_i` for every training point.
    pub dual_coefs: Vec<f64>,
    pub bias: f64,
    pub c: f64,
    pub tol: f64,
    pub support_indices: Vec<usize>,
    pub iterations: usize,
    /// Final maximal KKT violation `m(alpha) - M(alpha)`.
    pub violation: f64,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub objective_trace: Vec<f64>,
}

impl SvmModel {
    pub fn alphas(&self, labels: &[i8]) -> Vec<f64> {
        self.dual_coefs
            .iter()
            .zip(labels)
            .map(|(a, &y)| a * f64::from(y))
            .collect()
    }
}

/// Soft-margin SVM dual on a precomputed kernel with default tolerance and
/// iteration cap.
pub fn svm_train(k: &GramMatrix, labels: &[i8], c: f64, tol: f64) -> Result<SvmModel, LearnError> {
    svm_train_with(k, labels, &SvmOptions { tol, ..SvmOptions::new(c) })
}

/// SMO with maximal-violating-pair selection.
///
/// Minimises `f(a) = a'Qa/2 - e'a` with `Q_ij = y_i y_j K_ij`,
/// `0 <= a_i <= C` and `y'a = 0`, stopping once `m(a) - M(a) <= tol`.
pub fn svm_train_with(k: &GramMatrix, labels: &[i8], opts: &SvmOptions) -> Result<SvmModel, LearnError> {
    let n = labels.len();
    if k.rows() != n || k.cols() != n {
        return Err(LearnError::Shape {
            rows: k.rows(),
            cols: k.cols(),
            expected_rows: n,
            expected_cols: n,
        });
    }
    if n == 0 {
        return Err(LearnError::EmptyTrain);
    }
    if !(opts.c.is_finite() && opts.c > 0.0) {
        return Err(LearnError::BadC(opts.c));
    }
    if !(opts.tol > 0.0) {
        return Err(LearnError::BadTol(opts.tol));
    }
    if let Some(&bad) = labels.iter().find(|&&y| y != 1 && y != -1) {
        return Err(LearnError::BadLabel(bad.to_string()));
    }
    let defect = k.symmetry_defect();
    if defect > 1e-8 {
        return Err(LearnError::NotSymmetric(defect));
    }
    for label in [1, -1] {
        if !labels.contains(&label) {
            return Err(LearnError::ClassAbsent(label));
        }
    }
    let c = opts.c;
    let y: Vec<f64> = labels.iter().map(|&v| f64::from(v)).collect();
    let kij = |i: usize, j: usize| k.get(i, j);
    let mut alpha = vec![0.0; n];
    let mut grad = vec![-1.0; n];
    let mut trace = Vec::new();
    let objective = |alpha: &[f64], grad: &[f64]| {
        alpha.iter().zip(grad).map(|(a, g)| 0.5 * a - 0.5 * a * g).sum::<f64>()
    };
    if opts.trace_objective {
        trace.push(0.0);
    }
    let in_up = |a: f64, y: f64| (y > 0.0 && a < c) || (y < 0.0 && a > 0.0);
    let in_low = |a: f64, y: f64| (y > 0.0 && a > 0.0) || (y < 0.0 && a < c);

    let mut iterations = 0;
    let violation = loop {
        let mut i = None;
        let mut gmax = f64::NEG_INFINITY;
        let mut j = None;
        let mut gmin = f64::INFINITY;
        for t in 0..n {
            let v = -y[t] * grad[t];
            if in_up(alpha[t], y[t]) && v > gmax {
                gmax = v;
                i = Some(t);
            }
            if in_low(alpha[t], y[t]) && v < gmin {
                gmin = v;
                j = Some(t);
            }
        }
        let gap = gmax - gmin;
        let (Some(i), Some(j)) = (i, j) else { break 0.0 };
        if gap <= opts.tol {
            break gap;
        }
        if iterations >= opts.max_iter {
            return Err(LearnError::NonConvergence {
                iterations,
                violation: gap,
            });
        }
        iterations += 1;

        let (old_i, old_j) = (alpha[i], alpha[j]);
        let q_ij = y[i] * y[j] * kij(i, j);
        let (kii, kjj) = (kij(i, i), kij(j, j));
        if y[i] != y[j] {
            let mut quad = kii + kjj + 2.0 * q_ij;
            if quad <= 0.0 {
                quad = TAU;
            }
            let delta = (-grad[i] - grad[j]) / quad;
            let diff = alpha[i] - alpha[j];
            alpha[i] += delta;
            alpha[j] += delta;
            if diff > 0.0 {
                if alpha[j] < 0.0 {
                    alpha[j] = 0.0;
                    alpha[i] = diff;
                }
            } else if alpha[i] < 0.0 {
                alpha[i] = 0.0;
                alpha[j] = -diff;
            }
            if diff > 0.0 {
                if alpha[i] > c {
                    alpha[i] = c;
                    alpha[j] = c - diff;
                }
            } else if alpha[j] > c {
                alpha[j] = c;
                alpha[i] = c + diff;
            }
        } else {
            let mut quad = kii + kjj - 2.0 * q_ij;
            if quad <= 0.0 {
                quad = TAU;
            }
            let delta = (grad[i] - grad[j]) / quad;
            let sum = alpha[i] + alpha[j];
            alpha[i] -= delta;
            alpha[j] += delta;
            if sum > c {
                if alpha[i] > c {
                    alpha[i] = c;
                    alpha[j] = sum - c;
                }
            } else if alpha[j] < 0.0 {
                alpha[j] = 0.0;
                alpha[i] = sum;
            }
            if sum > c {
                if alpha[j] > c {
                    alpha[j] = c;
                    alpha[i] = sum - c;
                }
            } else if alpha[i] < 0.0 {
                alpha[i] = 0.0;
                alpha[j] = sum;
            }
        }
        let (di, dj) = (alpha[i] - old_i, alpha[j] - old_j);
        for t in 0..n {
            grad[t] += y[t] * (y[i] * kij(t, i) * di + y[j] * kij(t, j) * dj);
        }
        if opts.trace_objective {
            trace.push(objective(&alpha, &grad));
        }
    };

    // bias from free support vectors, else the midpoint of the feasible range
    let (mut ub, mut lb) = (f64::INFINITY, f64::NEG_INFINITY);
    let (mut sum_free, mut n_free) = (0.0, 0usize);
    for t in 0..n {
        let yg = y[t] * grad[t];
        if alpha[t] >= c {
            if y[t] < 0.0 {
                ub = ub.min(yg);
            } else {
                lb = lb.max(yg);
            }
        } else if alpha[t] <= 0.0 {
            if y[t] > 0.0 {
                ub = ub.min(yg);
            } else {
                lb = lb.max(yg);
            }
        } else {
            n_free += 1;
            sum_free += yg;
        }
    }
    let rho = if n_free > 0 {
        sum_free / n_free as f64
    } else {
        (ub + lb) / 2.0
    };

    Ok(SvmModel {
        dual_coefs: alpha.iter().zip(&y).map(|(a, y)| a * y).collect(),
        bias: -rho,
        c,
        tol: opts.tol,
        support_indices: (0..n).filter(|&t| alpha[t] > 0.0).collect(),
        iterations,
        violation,
        objective_trace: trace,
    })
}

/// `score_j = sum_i coef_i K[j][i] + bias` over support vectors.
pub fn decision_scores(model: &SvmModel, k_eval: &GramMatrix) -> Result<Vec<f64>, LearnError> {
    if k_eval.cols() != model.dual_coefs.len() {
        return Err(LearnError::Shape {
            rows: k_eval.rows(),
            cols: k_eval.cols(),
            expected_rows: k_eval.rows(),
            expected_cols: model.dual_coefs.len(),
        });
    }
    Ok((0..k_eval.rows())
        .map(|j| {
            let row = k_eval.row(j);
            model
                .support_indices
                .iter()
                .map(|&i| model.dual_coefs[i] * row[i])
                .sum::<f64>()
                + model.bias
        })
        .collect())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    pub accuracy: f64,
    pub balanced_accuracy: f64,
    pub precision: f64,
    pub recall: f64,
    pub auc: f64,
    /// `(false positive rate, true positive rate)` from `(0, 0)` to `(1, 1)`.
    pub roc_points: Vec<(f64, f64)>,
    pub true_positives: usize,
    pub false_positives: usize,
    pub true_negatives: usize,
    pub false_negatives: usize,
}

/// ROC curve sweeping the threshold down through the sorted scores; tied
/// scores move diagonally.
pub fn roc_curve(scores: &[f64], labels: &[i8]) -> Vec<(f64, f64)> {
    let p = labels.iter().filter(|&&y| y == 1).count() as f64;
    let n = labels.len() as f64 - p;
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]));
    let mut points = vec![(0.0, 0.0)];
    let (mut tp, mut fp) = (0usize, 0usize);
    let mut k = 0;
    while k < order.len() {
        let s = scores[order[k]];
        while k < order.len() && scores[order[k]] == s {
            if labels[order[k]] == 1 {
                tp += 1;
            } else {
                fp += 1;
            }
            k += 1;
        }
        points.push((fp as f64 / n, tp as f64 / p));
    }
    points
}

pub fn trapezoid_area(points: &[(f64, f64)]) -> f64 {
    points
        .windows(2)
        .map(|w| (w[1].0 - w[0].0) * (w[1].1 + w[0].1) * 0.5)
        .sum()
}

/// `P(score_+ > score_-) + P(score_+ = score_-) / 2` over all pairs.
pub fn pairwise_auc(scores: &[f64], labels: &[i8]) -> f64 {
    let pos: Vec<f64> = (0..scores.len()).filter(|&i| labels[i] == 1).map(|i| scores[i]).collect();
    let neg: Vec<f64> = (0..scores.len()).filter(|&i| labels[i] != 1).map(|i| scores[i]).collect();
    let mut credit = 0.0;
    for &a in &pos {
        for &b in &neg {
            if a > b {
                credit += 1.0;
            } else if a == b {
                credit += 0.5;
            }
        }
    }
    credit / (pos.len() * neg.len()) as f64
}

/// Threshold metrics plus ROC/AUC. Scores strictly above `threshold` are
/// predicted positive.
pub fn evaluate(scores: &[f64], labels: &[i8], threshold: f64) -> Result<Metrics, LearnError> {
    if scores.len() != labels.len() || scores.is_empty() {
        return Err(LearnError::ScoreCount {
            scores: scores.len(),
            labels: labels.len(),
        });
    }
    let (mut tp, mut fp, mut tn, mut fn_) = (0, 0, 0, 0);
    for (&s, &y) in scores.iter().zip(labels) {
        match (s > threshold, y == 1) {
            (true, true) => tp += 1,
            (true, false) => fp += 1,
            (false, false) => tn += 1,
            (false, true) => fn_ += 1,
        }
    }
    let ratio = |a: usize, b: usize| if b == 0 { 0.0 } else { a as f64 / b as f64 };
    let recall = ratio(tp, tp + fn_);
    let specificity = ratio(tn, tn + fp);
    let (n_pos, n_neg) = (tp + fn_, tn + fp);
    let mut metrics = Metrics {
        accuracy: ratio(tp + tn, scores.len()),
        balanced_accuracy: 0.5 * (recall + specificity),
        precision: ratio(tp, tp + fp),
        recall,
        auc: f64::NAN,
        roc_points: Vec::new(),
        true_positives: tp,
        false_positives: fp,
        true_negatives: tn,
        false_negatives: fn_,
    };
    if n_pos == 0 || n_neg == 0 {
        let class = if n_pos == 0 { -1 } else { 1 };
        metrics.balanced_accuracy = if n_pos == 0 { specificity } else { recall };
        return Err(LearnError::SingleClass {
            class,
            partial: Box::new(metrics),
        });
    }
    metrics.roc_points = roc_curve(scores, labels);
    metrics.auc = trapezoid_area(&metrics.roc_points);
    Ok(metrics)
}

/// Eight log-spaced regularization values from 0.01 to 4.
pub fn c_grid() -> Vec<f64> {
    (0..8).map(|i| 0.01 * 400f64.powf(f64::from(i) / 7.0)).collect()
}

/// Nearest-centroid baseline: `|x - mu_-|^2 - |x - mu_+|^2`.
pub fn nearest_centroid_scores(
    train: &[Vec<f64>],
    labels: &[i8],
    eval: &[Vec<f64>],
) -> Result<Vec<f64>, LearnError> {
    let m = train.first().ok_or(LearnError::EmptyTrain)?.len();
    check_matrix(train, m)?;
    check_matrix(eval, m)?;
    let centroid = |label: i8| -> Result<Vec<f64>, LearnError> {
        let members: Vec<&Vec<f64>> = train.iter().zip(labels).filter(|(_, &y)| y == label).map(|(r, _)| r).collect();
        if members.is_empty() {
            return Err(LearnError::ClassAbsent(label));
        }
        let mut mu = vec![0.0; m];
        for r in &members {
            mu.iter_mut().zip(r.iter()).for_each(|(a, b)| *a += b);
        }
        mu.iter_mut().for_each(|a| *a /= members.len() as f64);
        Ok(mu)
    };
    let (pos, neg) = (centroid(1)?, centroid(-1)?);
    let d2 = |a: &[f64], b: &[f64]| a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>();
    Ok(eval.iter().map(|x| d2(x, &neg) - d2(x, &pos)).collect())
}
