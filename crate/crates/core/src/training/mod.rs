//! Maximum-likelihood warmup and composite-likelihood training.
//!
//! Training minimizes, per minibatch, the mean over samples of
//!
//! `L_all = L(V) + λ_c Σ_j [ L(V̂_{S_j}, V_{−S_j}) − L_marg(V_{−S_j}; S_j) ]`
//!
//! where `V̂_{S_j}` comes from a short inner-loop inference and is held
//! fixed while differentiating with respect to the parameters.

mod objective;

pub use objective::{composite_loss, composite_terms};

use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Adam, AutodiffError};
use crate::inference::{init_targets, InferenceError, ValueObjective};
use crate::model::{Assignment, BinModel, ModelError};

#[derive(Debug, thiserror::Error)]
pub enum TrainError {
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Inference(#[from] InferenceError),
    #[error(transparent)]
    Autodiff(#[from] AutodiffError),
    #[error("no training samples")]
    Empty,
    #[error("sample {index} has {got} values, expected {expected}")]
    Shape { index: usize, expected: usize, got: usize },
    #[error("composite-likelihood subset {0:?} is not a proper prefix of the variable order")]
    Subset(Vec<usize>),
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("loss diverged in epoch {epoch}, batch {batch}")]
    Diverged { epoch: usize, batch: usize },
}

/// Hyperparameters of the training procedure.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    /// Weight of the composite-likelihood terms.
    pub lambda_c: f64,
    /// Joint-likelihood epochs before the composite terms are switched on.
    pub warmup_epochs: usize,
    /// Epochs with composite terms.
    pub epochs: usize,
    /// Inner-loop inference steps per subset and minibatch.
    pub inner_iters: usize,
    /// Outer Adam learning rate.
    pub lr: f64,
    /// Inner-loop Adam step size on target values.
    pub inner_lr: f64,
    pub batch_size: usize,
    /// Marginalized subsets; `None` means the prefixes `{0..j}` for
    /// `j = 0..N−2`.
    pub cl_subsets: Option<Vec<Vec<usize>>>,
    /// Differentiate through the marginal term of each `L_j`. When off, the
    /// term enters the loss value as a fixed baseline.
    pub marginal_gradient: bool,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lambda_c: 0.0,
            warmup_epochs: 50,
            epochs: 50,
            inner_iters: 8,
            lr: 1e-3,
            inner_lr: 0.05,
            batch_size: 32,
            cl_subsets: None,
            marginal_gradient: true,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), TrainError> {
        let bad = |m: &str| Err(TrainError::Config(m.to_string()));
        if !(self.lambda_c >= 0.0) || !self.lambda_c.is_finite() {
            return bad("lambda_c must be a non-negative number");
        }
        if !(self.lr > 0.0) || !(self.inner_lr > 0.0) {
            return bad("learning rates must be positive");
        }
        if self.batch_size == 0 {
            return bad("batch_size must be at least 1");
        }
        Ok(())
    }

    /// Prefix lengths `k_j` of the configured subsets.
    pub fn subset_prefixes(&self, model: &BinModel) -> Result<Vec<usize>, TrainError> {
        match &self.cl_subsets {
            None => Ok((1..model.num_vars()).collect()),
            Some(sets) => sets
                .iter()
                .map(|s| {
                    if s.is_empty() {
                        return Err(TrainError::Subset(s.clone()));
                    }
                    match model.prefix_len(s) {
                        Ok(k) if k < model.num_vars() => Ok(k),
                        _ => Err(TrainError::Subset(s.clone())),
                    }
                })
                .collect(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Phase {
    Warmup,
    Composite,
}

/// One line of the training log.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub phase: Phase,
    /// Mean joint NLL over the training samples, before each batch update.
    pub joint_nll: f64,
    /// Mean `L_j` per composite subset; empty when the terms are off.
    pub cl_terms: Vec<f64>,
    pub val_joint_nll: Option<f64>,
    /// Inner-loop Adam steps taken per sample, summed over subsets.
    pub inner_iterations: usize,
    /// Inner-loop iterates that went non-finite and were reset.
    pub inner_resets: usize,
    pub seconds: f64,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct TrainReport {
    pub epochs: Vec<EpochRecord>,
}

impl TrainReport {
    /// One JSON object per line.
    pub fn to_json_lines(&self) -> String {
        self.epochs
            .iter()
            .map(|e| serde_json::to_string(e).expect("records serialize") + "\n")
            .collect()
    }

    pub fn joint_nll(&self) -> Vec<f64> {
        self.epochs.iter().map(|e| e.joint_nll).collect()
    }
}

/// Training rows: features and variable values, row-aligned.
#[derive(Debug, Clone, Copy)]
pub struct Samples<'a> {
    pub x: &'a [Vec<f64>],
    pub v: &'a [Vec<f64>],
}

impl<'a> Samples<'a> {
    pub fn new(x: &'a [Vec<f64>], v: &'a [Vec<f64>]) -> Self {
        assert_eq!(x.len(), v.len(), "features and values must be row-aligned");
        Self { x, v }
    }

    pub fn len(&self) -> usize {
        self.x.len()
    }

    pub fn is_empty(&self) -> bool {
        self.x.is_empty()
    }

    fn check(&self, model: &BinModel) -> Result<(), TrainError> {
        if self.is_empty() {
            return Err(TrainError::Empty);
        }
        for (i, (x, v)) in self.x.iter().zip(self.v).enumerate() {
            if x.len() != model.feature_dim() {
                return Err(TrainError::Shape {
                    index: i,
                    expected: model.feature_dim(),
                    got: x.len(),
                });
            }
            if v.len() != model.num_vars() {
                return Err(TrainError::Shape {
                    index: i,
                    expected: model.num_vars(),
                    got: v.len(),
                });
            }
        }
        Ok(())
    }
}

/// Inner-loop estimate of the variables in the prefix `0..k` of one sample:
/// feedforward initialization followed by `iters` Adam steps of size `lr`
/// on the joint NLL. Returns the full value vector holding the last
/// iterate, and whether a non-finite iterate forced a reset to the
/// initialization.
pub fn inner_loop_infer(
    model: &BinModel,
    x: &[f64],
    v: &[f64],
    k: usize,
    iters: usize,
    lr: f64,
) -> Result<(Vec<f64>, bool), TrainError> {
    let targets: Vec<usize> = (0..k).collect();
    let observed: Vec<usize> = (k..model.num_vars()).collect();
    let start = init_targets(model, x, &Assignment::observe(v, &observed)?)?.values().to_vec();
    if iters == 0 || targets.is_empty() {
        return Ok((start, false));
    }
    let mut obj = ValueObjective::new(model, x, &start, &targets, &(0..model.num_vars()).collect::<Vec<_>>());
    let mut t: Vec<f64> = start[..k].to_vec();
    let mut grad = vec![0.0; k];
    let mut adam = Adam::new(k);
    for _ in 0..iters {
        let ok = obj.eval(&t, &mut grad).map(|l| l.is_finite()).unwrap_or(false)
            && adam.step(&mut t, &grad, lr).is_ok()
            && t.iter().all(|a| a.is_finite());
        if !ok {
            return Ok((start, true));
        }
    }
    let mut out = start;
    out[..k].copy_from_slice(&t);
    Ok((out, false))
}

/// Joint-likelihood training for `cfg.warmup_epochs` epochs.
pub fn warmup_train(model: &mut BinModel, train: Samples, val: Option<Samples>, cfg: &TrainConfig) -> Result<TrainReport, TrainError> {
    let mut t = Trainer::new(model, cfg)?;
    let mut report = TrainReport::default();
    for _ in 0..cfg.warmup_epochs {
        report.epochs.push(t.epoch(model, train, val, Phase::Warmup, &[])?);
    }
    Ok(report)
}

/// Warmup followed by `cfg.epochs` epochs with composite-likelihood terms.
/// With `lambda_c = 0` this is plain joint-likelihood training for
/// `warmup_epochs + epochs` epochs.
pub fn cbin_train(model: &mut BinModel, train: Samples, val: Option<Samples>, cfg: &TrainConfig) -> Result<TrainReport, TrainError> {
    let prefixes = cfg.subset_prefixes(model)?;
    let mut t = Trainer::new(model, cfg)?;
    let mut report = TrainReport::default();
    for _ in 0..cfg.warmup_epochs {
        report.epochs.push(t.epoch(model, train, val, Phase::Warmup, &[])?);
    }
    let active: &[usize] = if cfg.lambda_c > 0.0 { &prefixes } else { &[] };
    for _ in 0..cfg.epochs {
        report.epochs.push(t.epoch(model, train, val, Phase::Composite, active)?);
    }
    Ok(report)
}

/// Samples per recorded tape when computing batch gradients. Fixed so the
/// summation order does not depend on the thread count.
const CHUNK: usize = 8;

struct Trainer {
    cfg: TrainConfig,
    adam: Adam,
    rng: ChaCha8Rng,
    epoch: usize,
}

impl Trainer {
    fn new(model: &BinModel, cfg: &TrainConfig) -> Result<Self, TrainError> {
        cfg.validate()?;
        Ok(Self {
            cfg: cfg.clone(),
            adam: Adam::new(model.num_params()),
            rng: ChaCha8Rng::seed_from_u64(cfg.seed),
            epoch: 0,
        })
    }

    fn epoch(
        &mut self,
        model: &mut BinModel,
        train: Samples,
        val: Option<Samples>,
        phase: Phase,
        prefixes: &[usize],
    ) -> Result<EpochRecord, TrainError> {
        train.check(model)?;
        let started = Instant::now();
        let mut order: Vec<usize> = (0..train.len()).collect();
        order.shuffle(&mut self.rng);
        let mut joint_sum = 0.0;
        let mut cl_sums = vec![0.0; prefixes.len()];
        let mut resets = 0;
        for (b, batch) in order.chunks(self.cfg.batch_size).enumerate() {
            let hats = self.inner_estimates(model, train, batch, prefixes)?;
            resets += hats.iter().flatten().filter(|h| h.1).count();
            let chunks: Vec<Vec<usize>> = (0..batch.len()).collect::<Vec<_>>().chunks(CHUNK).map(<[usize]>::to_vec).collect();
            let parts = chunks
                .par_iter()
                .map(|c| objective::chunk_gradient(model, train, batch, c, &hats, prefixes, self.cfg.lambda_c, self.cfg.marginal_gradient))
                .collect::<Result<Vec<_>, _>>()?;
            let mut grad = vec![0.0; model.grad_len()];
            let mut batch_joint = 0.0;
            for p in &parts {
                for (g, d) in grad.iter_mut().zip(&p.grad) {
                    *g += d;
                }
                batch_joint += p.joint;
                for (s, c) in cl_sums.iter_mut().zip(&p.cl) {
                    *s += c;
                }
            }
            if !batch_joint.is_finite() || grad.iter().any(|g| !g.is_finite()) {
                return Err(TrainError::Diverged { epoch: self.epoch, batch: b });
            }
            joint_sum += batch_joint;
            let scale = 1.0 / batch.len() as f64;
            grad.iter_mut().for_each(|g| *g *= scale);
            let raw = model.pullback(&grad);
            let mut params = model.params();
            self.adam
                .step(&mut params, &raw, self.cfg.lr)
                .map_err(|_| TrainError::Diverged { epoch: self.epoch, batch: b })?;
            model.set_params(&params);
        }
        let n = train.len() as f64;
        let val_joint_nll = match val {
            Some(s) if !s.is_empty() => Some(mean_joint_nll(model, s)?),
            _ => None,
        };
        let record = EpochRecord {
            epoch: self.epoch,
            phase,
            joint_nll: joint_sum / n,
            cl_terms: cl_sums.iter().map(|s| s / n).collect(),
            val_joint_nll,
            inner_iterations: if prefixes.is_empty() { 0 } else { self.cfg.inner_iters * prefixes.len() },
            inner_resets: resets,
            seconds: started.elapsed().as_secs_f64(),
        };
        self.epoch += 1;
        Ok(record)
    }

    /// `hats[j][i]` is the inner-loop estimate for subset `j` and batch
    /// position `i`.
    fn inner_estimates(
        &self,
        model: &BinModel,
        train: Samples,
        batch: &[usize],
        prefixes: &[usize],
    ) -> Result<Vec<Vec<(Vec<f64>, bool)>>, TrainError> {
        prefixes
            .iter()
            .map(|&k| {
                batch
                    .par_iter()
                    .map(|&i| inner_loop_infer(model, &train.x[i], &train.v[i], k, self.cfg.inner_iters, self.cfg.inner_lr))
                    .collect()
            })
            .collect()
    }
}

/// Mean joint NLL over `samples`.
pub fn mean_joint_nll(model: &BinModel, samples: Samples) -> Result<f64, TrainError> {
    let total = samples
        .x
        .par_iter()
        .zip(samples.v)
        .map(|(x, v)| model.joint_nll(x, v))
        .collect::<Result<Vec<_>, _>>()?
        .iter()
        .sum::<f64>();
    Ok(total / samples.len() as f64)
}
