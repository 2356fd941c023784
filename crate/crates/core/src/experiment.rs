//! Experiment protocol: standardize, train, run task suites per method and
//! tabulate metrics together with inference iteration counts.

use std::fmt::{self, Write as _};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::baselines::{prior_only_predict, random_init_infer, DirectRegressor};
use crate::data::{DataError, Dataset, Standardizer, Task, TaskSuite};
use crate::inference::{infer, InferenceError, InferenceOptions, ModeChoice};
use crate::model::{Architecture, Assignment, BinModel, ModelError};
use crate::training::{cbin_train, Samples, TrainConfig, TrainError, TrainReport};

#[derive(Debug, thiserror::Error)]
pub enum ExperimentError {
    #[error(transparent)]
    Data(#[from] DataError),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Inference(#[from] InferenceError),
    #[error(transparent)]
    Train(#[from] TrainError),
    #[error("no model supplied for method {0}")]
    MissingModel(Method),
    #[error("split `{0}` is empty")]
    EmptySplit(&'static str),
}

/// A row of the results table.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Method {
    PriorOnly,
    RandomInit,
    Bin,
    Cbin,
    Retrain,
}

impl Method {
    pub const ALL: [Method; 5] = [Method::PriorOnly, Method::RandomInit, Method::Bin, Method::Cbin, Method::Retrain];

    pub fn label(self) -> &'static str {
        match self {
            Method::PriorOnly => "PO",
            Method::RandomInit => "RI",
            Method::Bin => "BIN",
            Method::Cbin => "CBIN",
            Method::Retrain => "Retrain",
        }
    }
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.label())
    }
}

/// A dataset standardized with statistics of its training split.
#[derive(Debug, Clone)]
pub struct Prepared {
    pub data: Dataset,
    pub standardizer: Standardizer,
}

impl Prepared {
    pub fn new(raw: &Dataset) -> Self {
        let standardizer = raw.fit_standardizer();
        Self {
            data: raw.standardized(&standardizer),
            standardizer,
        }
    }

    pub fn train(&self) -> (Vec<Vec<f64>>, Vec<Vec<f64>>) {
        self.data.rows(&self.data.split.train)
    }

    pub fn val(&self) -> (Vec<Vec<f64>>, Vec<Vec<f64>>) {
        self.data.rows(&self.data.split.val)
    }

    pub fn test(&self) -> (Vec<Vec<f64>>, Vec<Vec<f64>>) {
        self.data.rows(&self.data.split.test)
    }
}

/// Fresh model initialized from `cfg.seed` and trained on the training
/// split, with the validation split (if any) logged per epoch.
pub fn train_model(prepared: &Prepared, arch: &Architecture, cfg: &TrainConfig) -> Result<(BinModel, TrainReport), ExperimentError> {
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut model = BinModel::new(prepared.data.feature_dim(), prepared.data.variables.clone(), arch, &mut rng)?;
    let (tx, tv) = prepared.train();
    if tx.is_empty() {
        return Err(ExperimentError::EmptySplit("train"));
    }
    let (vx, vv) = prepared.val();
    let val = (!vx.is_empty()).then(|| Samples::new(&vx, &vv));
    let report = cbin_train(&mut model, Samples::new(&tx, &tv), val, cfg)?;
    Ok((model, report))
}

/// One retrained regressor per task of `suite`, in suite order.
pub fn train_retrain(prepared: &Prepared, suite: &TaskSuite, arch: &Architecture, cfg: &TrainConfig) -> Result<Vec<DirectRegressor>, ExperimentError> {
    let (tx, tv) = prepared.train();
    if tx.is_empty() {
        return Err(ExperimentError::EmptySplit("train"));
    }
    suite
        .tasks
        .iter()
        .enumerate()
        .map(|(i, task)| {
            let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed.wrapping_add(i as u64));
            let mut r = DirectRegressor::new(prepared.data.feature_dim(), &prepared.data.variables, task, arch, &mut rng)?;
            r.fit(Samples::new(&tx, &tv), None, cfg)?;
            Ok(r)
        })
        .collect()
}

/// Models available to a suite run; rows whose model is absent are skipped
/// when not requested, and are an error when requested.
#[derive(Debug, Clone, Copy, Default)]
pub struct MethodModels<'a> {
    pub bin: Option<&'a BinModel>,
    pub cbin: Option<&'a BinModel>,
    /// Indexed like the suite's tasks.
    pub retrain: Option<&'a [DirectRegressor]>,
}

/// Per-sample result of one task.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SampleOutcome {
    /// Full value vector in original units.
    pub values: Vec<f64>,
    /// Joint NLL in standardized units; `None` for Retrain.
    pub final_loss: Option<f64>,
    pub iterations: usize,
    pub mode: String,
}

/// Aggregate result of one (method, task) cell.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TaskEval {
    pub method: Method,
    pub task: String,
    pub metric: String,
    pub value: f64,
    pub mean_iterations: f64,
    pub mean_final_loss: Option<f64>,
    #[serde(skip)]
    pub samples: Vec<SampleOutcome>,
}

/// Runs `method` on `task` over the given standardized rows. Metrics are
/// computed in original units.
pub fn evaluate_task(
    method: Method,
    models: &MethodModels,
    task_index: usize,
    task: &Task,
    prepared: &Prepared,
    rows: (&[Vec<f64>], &[Vec<f64>]),
    opts: &InferenceOptions,
    mode: ModeChoice,
    seed: u64,
) -> Result<TaskEval, ExperimentError> {
    let n_vars = prepared.data.num_vars();
    task.validate(n_vars)?;
    let (xs, vs) = rows;
    if xs.is_empty() {
        return Err(ExperimentError::EmptySplit("evaluation"));
    }
    let observed = task.observed(n_vars);
    let st = &prepared.standardizer;
    let samples: Vec<SampleOutcome> = (0..xs.len())
        .into_par_iter()
        .map(|i| -> Result<SampleOutcome, ExperimentError> {
            let (x, v) = (&xs[i], &vs[i]);
            let a = Assignment::observe(v, &observed)?;
            let (values, final_loss, iterations, mode_name) = match method {
                Method::PriorOnly => {
                    let m = models.bin.ok_or(ExperimentError::MissingModel(method))?;
                    let p = prior_only_predict(m, x, &a)?;
                    let loss = m.joint_nll(x, p.values())?;
                    (p.values().to_vec(), Some(loss), 0, "prior_only".to_string())
                }
                Method::RandomInit => {
                    let m = models.bin.ok_or(ExperimentError::MissingModel(method))?;
                    let r = random_init_infer(m, x, &a, opts, seed.wrapping_add(i as u64))?;
                    (r.values, Some(r.final_loss), r.iterations_used, r.mode.name().to_string())
                }
                Method::Bin | Method::Cbin => {
                    let m = if method == Method::Bin { models.bin } else { models.cbin }.ok_or(ExperimentError::MissingModel(method))?;
                    let r = infer(m, x, &a, mode, opts)?;
                    (r.values, Some(r.final_loss), r.iterations_used, r.mode.name().to_string())
                }
                Method::Retrain => {
                    let r = models
                        .retrain
                        .and_then(|rs| rs.get(task_index))
                        .ok_or(ExperimentError::MissingModel(method))?;
                    (r.predict(x, v)?, None, 0, "retrain".to_string())
                }
            };
            Ok(SampleOutcome {
                values: st.v_inverse(&values),
                final_loss,
                iterations,
                mode: mode_name,
            })
        })
        .collect::<Result<_, _>>()?;
    let mut pred = Vec::with_capacity(samples.len() * task.targets.len());
    let mut truth = Vec::with_capacity(pred.capacity());
    for (s, v) in samples.iter().zip(vs) {
        let orig = st.v_inverse(v);
        for &t in &task.targets {
            pred.push(s.values[t]);
            truth.push(orig[t]);
        }
    }
    let n = samples.len() as f64;
    let losses: Option<Vec<f64>> = samples.iter().map(|s| s.final_loss).collect();
    Ok(TaskEval {
        method,
        task: task.label(&prepared.data.variables),
        metric: task.metric.name().to_string(),
        value: task.metric.evaluate(&pred, &truth)?,
        mean_iterations: samples.iter().map(|s| s.iterations as f64).sum::<f64>() / n,
        mean_final_loss: losses.map(|l| l.iter().sum::<f64>() / n),
        samples,
    })
}

/// Methods-by-tasks results.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct ResultsTable {
    pub cells: Vec<TaskEval>,
}

impl ResultsTable {
    pub fn get(&self, method: Method, task: &str) -> Option<&TaskEval> {
        self.cells.iter().find(|c| c.method == method && c.task == task)
    }

    /// Long format: one line per (method, task) cell.
    pub fn to_csv(&self, config_hash: &str) -> String {
        let mut out = String::from("config_hash,method,task,metric,value,mean_iterations,mean_final_loss\n");
        for c in &self.cells {
            let loss = c.mean_final_loss.map_or_else(String::new, |l| format!("{l:.6}"));
            let _ = writeln!(out, "{config_hash},{},{},{},{:.6},{:.3},{loss}", c.method, c.task, c.metric, c.value, c.mean_iterations);
        }
        out
    }

    /// Table layout: rows are methods, columns are target sets, each
    /// followed by its mean iteration count.
    pub fn to_wide_csv(&self) -> String {
        let mut tasks: Vec<&str> = Vec::new();
        let mut methods: Vec<Method> = Vec::new();
        for c in &self.cells {
            if !tasks.contains(&c.task.as_str()) {
                tasks.push(&c.task);
            }
            if !methods.contains(&c.method) {
                methods.push(c.method);
            }
        }
        let mut out = String::from("method");
        for t in &tasks {
            let _ = write!(out, ",{t},{t} iters");
        }
        out.push('\n');
        for m in methods {
            out.push_str(m.label());
            for t in &tasks {
                match self.get(m, t) {
                    Some(c) => {
                        let _ = write!(out, ",{:.4},{:.1}", c.value, c.mean_iterations);
                    }
                    None => out.push_str(",,"),
                }
            }
            out.push('\n');
        }
        out
    }
}

/// Evaluates each requested method on every task of `suite` over the test
/// split. Retrain is only run when requested.
pub fn run_suite(
    prepared: &Prepared,
    suite: &TaskSuite,
    methods: &[Method],
    models: &MethodModels,
    opts: &InferenceOptions,
    mode: ModeChoice,
    seed: u64,
) -> Result<ResultsTable, ExperimentError> {
    suite.validate(prepared.data.num_vars())?;
    let (tx, tv) = prepared.test();
    let mut table = ResultsTable::default();
    for &method in methods {
        for (i, task) in suite.tasks.iter().enumerate() {
            table.cells.push(evaluate_task(method, models, i, task, prepared, (&tx, &tv), opts, mode, seed)?);
        }
    }
    Ok(table)
}

/// One cell of the inner-iteration grid.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GridPoint {
    pub inner_iters: usize,
    pub lambda_c: f64,
    /// Mean test-time inference iterations over all suite tasks.
    pub mean_iterations: f64,
    /// Mean metric over all suite tasks.
    pub metric: f64,
}

/// Trains one model per `(T_in, λ_c)` pair and records the mean test-time
/// iterations of general inference and the mean suite metric.
pub fn inner_iteration_grid(
    prepared: &Prepared,
    suite: &TaskSuite,
    arch: &Architecture,
    base: &TrainConfig,
    inner_iters: &[usize],
    lambdas: &[f64],
    opts: &InferenceOptions,
) -> Result<Vec<GridPoint>, ExperimentError> {
    let mut grid = Vec::new();
    for &lambda_c in lambdas {
        for &t in inner_iters {
            let cfg = TrainConfig {
                lambda_c,
                inner_iters: t,
                ..base.clone()
            };
            let (model, _) = train_model(prepared, arch, &cfg)?;
            let models = MethodModels {
                bin: Some(&model),
                ..Default::default()
            };
            let table = run_suite(prepared, suite, &[Method::Bin], &models, opts, ModeChoice::General, base.seed)?;
            let k = table.cells.len() as f64;
            grid.push(GridPoint {
                inner_iters: t,
                lambda_c,
                mean_iterations: table.cells.iter().map(|c| c.mean_iterations).sum::<f64>() / k,
                metric: table.cells.iter().map(|c| c.value).sum::<f64>() / k,
            });
        }
    }
    Ok(grid)
}

pub fn grid_to_csv(grid: &[GridPoint], config_hash: &str) -> String {
    let mut out = String::from("config_hash,inner_iters,lambda_c,mean_iterations,metric\n");
    for g in grid {
        let _ = writeln!(out, "{config_hash},{},{},{:.3},{:.6}", g.inner_iters, g.lambda_c, g.mean_iterations, g.metric);
    }
    out
}
