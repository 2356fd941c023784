//! Datasets, preprocessing, inference task suites and metrics.

mod synthetic;
mod tabular;

pub use synthetic::{gen_gaussian_chain, gen_shhs_surrogate, gen_toy_line, gen_toy_line_with_noise, GaussianChain, ShhsSurrogate};
pub use tabular::{load_csv, load_dermatology, parse_dermatology, CsvSpec, DERMATOLOGY_FEATURES, DERMATOLOGY_TARGETS};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::model::{VariableKind, VariableSpec};

#[derive(Debug, thiserror::Error)]
pub enum DataError {
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Csv(#[from] csv::Error),
    #[error("line {line}: expected {expected} columns, got {got}")]
    ColumnCount { line: usize, expected: usize, got: usize },
    #[error("line {line}, column {column}: cannot parse {value:?}")]
    Parse { line: usize, column: usize, value: String },
    #[error("line {line}, column {column}: missing value not allowed here")]
    Missing { line: usize, column: usize },
    #[error("column {0} is out of range")]
    ColumnIndex(usize),
    #[error("dataset has no rows")]
    Empty,
    #[error("length mismatch: {0} vs {1}")]
    Length(usize, usize),
    #[error("invalid task: {0}")]
    Task(String),
    #[error("invalid argument: {0}")]
    Argument(String),
}

/// Disjoint train/validation/test row indices.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Split {
    pub train: Vec<usize>,
    pub val: Vec<usize>,
    pub test: Vec<usize>,
}

impl Split {
    pub const DEFAULT_RATIOS: (f64, f64) = (0.7, 0.1);

    /// Shuffles `0..m` with `seed` and cuts it into 70/10/20 parts.
    pub fn seeded(m: usize, seed: u64) -> Self {
        Self::with_ratios(m, seed, Self::DEFAULT_RATIOS.0, Self::DEFAULT_RATIOS.1)
    }

    /// Train fraction `train`, validation fraction `val`, test the rest.
    pub fn with_ratios(m: usize, seed: u64, train: f64, val: f64) -> Self {
        let mut idx: Vec<usize> = (0..m).collect();
        idx.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
        let n_train = ((m as f64) * train).round() as usize;
        let n_val = (((m as f64) * val).round() as usize).min(m - n_train.min(m));
        let n_train = n_train.min(m);
        let test = idx.split_off(n_train + n_val);
        let val = idx.split_off(n_train);
        Self { train: idx, val, test }
    }

    /// Every row in the training part.
    pub fn all_train(m: usize) -> Self {
        Self {
            train: (0..m).collect(),
            val: Vec::new(),
            test: Vec::new(),
        }
    }
}

/// Rows of features `x` (length `D`, possibly zero) and variables `v`
/// (length `N`), with the factorization the variables follow.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub x: Vec<Vec<f64>>,
    pub v: Vec<Vec<f64>>,
    pub variables: Vec<VariableSpec>,
    pub split: Split,
}

impl Dataset {
    pub fn new(x: Vec<Vec<f64>>, v: Vec<Vec<f64>>, variables: Vec<VariableSpec>, split: Split) -> Result<Self, DataError> {
        if x.len() != v.len() {
            return Err(DataError::Length(x.len(), v.len()));
        }
        if x.is_empty() {
            return Err(DataError::Empty);
        }
        let d = x[0].len();
        if let Some(r) = x.iter().find(|r| r.len() != d) {
            return Err(DataError::Length(d, r.len()));
        }
        if let Some(r) = v.iter().find(|r| r.len() != variables.len()) {
            return Err(DataError::Length(variables.len(), r.len()));
        }
        let m = x.len();
        let mut seen = vec![false; m];
        for &i in split.train.iter().chain(&split.val).chain(&split.test) {
            if i >= m || std::mem::replace(&mut seen[i], true) {
                return Err(DataError::Argument(format!("split index {i} invalid or repeated")));
            }
        }
        Ok(Self { x, v, variables, split })
    }

    pub fn len(&self) -> usize {
        self.x.len()
    }

    pub fn is_empty(&self) -> bool {
        self.x.is_empty()
    }

    pub fn feature_dim(&self) -> usize {
        self.x.first().map_or(0, Vec::len)
    }

    pub fn num_vars(&self) -> usize {
        self.variables.len()
    }

    /// Same data with a different split.
    pub fn with_split(mut self, split: Split) -> Result<Self, DataError> {
        self.split = split;
        Self::new(self.x, self.v, self.variables, self.split)
    }

    /// Statistics of the training rows.
    pub fn fit_standardizer(&self) -> Standardizer {
        Standardizer::fit(&self.x, &self.v, &self.split.train)
    }

    /// Copy with every row mapped through `st`.
    pub fn standardized(&self, st: &Standardizer) -> Self {
        Self {
            x: self.x.iter().map(|r| st.x_forward(r)).collect(),
            v: self.v.iter().map(|r| st.v_forward(r)).collect(),
            variables: self.variables.clone(),
            split: self.split.clone(),
        }
    }

    /// Row subset, in the given order.
    pub fn rows(&self, idx: &[usize]) -> (Vec<Vec<f64>>, Vec<Vec<f64>>) {
        (
            idx.iter().map(|&i| self.x[i].clone()).collect(),
            idx.iter().map(|&i| self.v[i].clone()).collect(),
        )
    }
}

/// Per-column affine standardization fitted on training rows.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Standardizer {
    pub x_mean: Vec<f64>,
    pub x_std: Vec<f64>,
    pub v_mean: Vec<f64>,
    pub v_std: Vec<f64>,
}

impl Standardizer {
    /// Columns with zero spread get unit scale.
    pub fn fit(x: &[Vec<f64>], v: &[Vec<f64>], rows: &[usize]) -> Self {
        let (x_mean, x_std) = column_stats(x, rows);
        let (v_mean, v_std) = column_stats(v, rows);
        Self {
            x_mean,
            x_std,
            v_mean,
            v_std,
        }
    }

    /// The identity map for `d` features and `n` variables.
    pub fn identity(d: usize, n: usize) -> Self {
        Self {
            x_mean: vec![0.0; d],
            x_std: vec![1.0; d],
            v_mean: vec![0.0; n],
            v_std: vec![1.0; n],
        }
    }

    pub fn x_forward(&self, x: &[f64]) -> Vec<f64> {
        affine_forward(x, &self.x_mean, &self.x_std)
    }

    pub fn v_forward(&self, v: &[f64]) -> Vec<f64> {
        affine_forward(v, &self.v_mean, &self.v_std)
    }

    pub fn v_inverse(&self, z: &[f64]) -> Vec<f64> {
        z.iter()
            .zip(self.v_mean.iter().zip(&self.v_std))
            .map(|(z, (m, s))| z * s + m)
            .collect()
    }

    pub fn x_inverse(&self, z: &[f64]) -> Vec<f64> {
        z.iter()
            .zip(self.x_mean.iter().zip(&self.x_std))
            .map(|(z, (m, s))| z * s + m)
            .collect()
    }

    /// Value of variable `n` in original units.
    pub fn v_inverse_one(&self, n: usize, z: f64) -> f64 {
        z * self.v_std[n] + self.v_mean[n]
    }
}

fn affine_forward(x: &[f64], mean: &[f64], std: &[f64]) -> Vec<f64> {
    x.iter().zip(mean.iter().zip(std)).map(|(x, (m, s))| (x - m) / s).collect()
}

fn column_stats(rows: &[Vec<f64>], idx: &[usize]) -> (Vec<f64>, Vec<f64>) {
    let d = rows.first().map_or(0, Vec::len);
    let n = idx.len() as f64;
    let mut mean = vec![0.0; d];
    for &i in idx {
        for (m, x) in mean.iter_mut().zip(&rows[i]) {
            *m += x;
        }
    }
    mean.iter_mut().for_each(|m| *m /= n);
    let mut var = vec![0.0; d];
    for &i in idx {
        for ((s, x), m) in var.iter_mut().zip(&rows[i]).zip(&mean) {
            *s += (x - m) * (x - m);
        }
    }
    let std = var
        .into_iter()
        .map(|s| {
            let sd = (s / n).sqrt();
            if sd > 0.0 && sd.is_finite() {
                sd
            } else {
                1.0
            }
        })
        .collect();
    (mean, std)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum MetricKind {
    Rmse,
    Accuracy,
}

impl MetricKind {
    /// Accuracy for binary variables, RMSE otherwise.
    pub fn for_variables(variables: &[VariableSpec]) -> Self {
        if variables.iter().all(|v| v.kind == VariableKind::BinaryAsContinuous) && !variables.is_empty() {
            MetricKind::Accuracy
        } else {
            MetricKind::Rmse
        }
    }

    pub fn evaluate(self, pred: &[f64], truth: &[f64]) -> Result<f64, DataError> {
        match self {
            MetricKind::Rmse => rmse(pred, truth),
            MetricKind::Accuracy => accuracy(pred, truth),
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            MetricKind::Rmse => "rmse",
            MetricKind::Accuracy => "accuracy",
        }
    }
}

fn check_pair(pred: &[f64], truth: &[f64]) -> Result<(), DataError> {
    if pred.len() != truth.len() {
        return Err(DataError::Length(pred.len(), truth.len()));
    }
    if pred.is_empty() {
        return Err(DataError::Empty);
    }
    Ok(())
}

/// Root mean squared error pooled over all entries.
pub fn rmse(pred: &[f64], truth: &[f64]) -> Result<f64, DataError> {
    check_pair(pred, truth)?;
    let sse: f64 = pred.iter().zip(truth).map(|(p, t)| (p - t) * (p - t)).sum();
    Ok((sse / pred.len() as f64).sqrt())
}

/// `{0, 1}` label of a prediction; exactly 0.5 maps to 1.
pub fn binarize(p: f64) -> f64 {
    if p >= 0.5 {
        1.0
    } else {
        0.0
    }
}

/// Fraction of entries whose thresholded prediction equals the label.
pub fn accuracy(pred: &[f64], truth: &[f64]) -> Result<f64, DataError> {
    check_pair(pred, truth)?;
    let hits = pred.iter().zip(truth).filter(|(p, t)| binarize(**p) == **t).count();
    Ok(hits as f64 / pred.len() as f64)
}

/// Predict `targets` from `x` and the remaining variables.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Task {
    pub targets: Vec<usize>,
    pub metric: MetricKind,
}

impl Task {
    pub fn new(targets: Vec<usize>, metric: MetricKind) -> Self {
        Self { targets, metric }
    }

    pub fn observed(&self, n_vars: usize) -> Vec<usize> {
        (0..n_vars).filter(|i| !self.targets.contains(i)).collect()
    }

    pub fn validate(&self, n_vars: usize) -> Result<(), DataError> {
        if self.targets.is_empty() {
            return Err(DataError::Task("empty target set".into()));
        }
        for (i, &t) in self.targets.iter().enumerate() {
            if t >= n_vars {
                return Err(DataError::Task(format!("target {t} out of range for {n_vars} variables")));
            }
            if self.targets[..i].contains(&t) {
                return Err(DataError::Task(format!("target {t} repeated")));
            }
        }
        Ok(())
    }

    /// Column label such as `v1+v3` (one-based).
    pub fn label(&self, variables: &[VariableSpec]) -> String {
        let mut t = self.targets.clone();
        t.sort_unstable();
        t.iter()
            .map(|&i| variables.get(i).map_or_else(|| format!("v{}", i + 1), |v| v.name.clone()))
            .collect::<Vec<_>>()
            .join("+")
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct TaskSuite {
    pub tasks: Vec<Task>,
}

impl TaskSuite {
    pub fn validate(&self, n_vars: usize) -> Result<(), DataError> {
        self.tasks.iter().try_for_each(|t| t.validate(n_vars))
    }

    /// The target subsets of the sleep-study table, one-based
    /// `{1,3} {4,5} {1,3,6,7} {2,6,7} {3,5,8} {4,5,6} {4,6,7}`.
    pub fn shhs() -> Self {
        let sets: [&[usize]; 7] = [&[1, 3], &[4, 5], &[1, 3, 6, 7], &[2, 6, 7], &[3, 5, 8], &[4, 5, 6], &[4, 6, 7]];
        Self {
            tasks: sets
                .iter()
                .map(|s| Task::new(s.iter().map(|i| i - 1).collect(), MetricKind::Accuracy))
                .collect(),
        }
    }

    /// The dermatology target subsets `{1} {2} {1,2} {1,3}` (one-based).
    pub fn dermatology() -> Self {
        let sets: [&[usize]; 4] = [&[0], &[1], &[0, 1], &[0, 2]];
        Self {
            tasks: sets.iter().map(|s| Task::new(s.to_vec(), MetricKind::Rmse)).collect(),
        }
    }

    /// Every non-empty proper subset of `n_vars` variables, smallest first.
    pub fn all_subsets(n_vars: usize, metric: MetricKind) -> Self {
        let mut tasks: Vec<Task> = (1..(1usize << n_vars) - 1)
            .map(|mask| Task::new((0..n_vars).filter(|i| mask & (1 << i) != 0).collect(), metric))
            .collect();
        tasks.sort_by(|a, b| a.targets.len().cmp(&b.targets.len()).then(a.targets.cmp(&b.targets)));
        Self { tasks }
    }
}
