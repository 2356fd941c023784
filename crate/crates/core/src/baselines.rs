//! Prior-Only, Random-Initialization and per-task Retrain baselines.

use std::fmt;
use std::str::FromStr;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::data::Task;
use crate::inference::{general_infer, init_targets, Init, InferenceError, InferenceOptions, InferenceResult};
use crate::model::{Architecture, Assignment, BinModel, ModelError, VariableSpec};
use crate::training::{cbin_train, Samples, TrainConfig, TrainError, TrainReport};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BaselineKind {
    PriorOnly,
    RandomInit,
    Retrain,
}

impl BaselineKind {
    pub const ALL: [BaselineKind; 3] = [BaselineKind::PriorOnly, BaselineKind::RandomInit, BaselineKind::Retrain];

    pub fn name(self) -> &'static str {
        match self {
            BaselineKind::PriorOnly => "prior_only",
            BaselineKind::RandomInit => "random_init",
            BaselineKind::Retrain => "retrain",
        }
    }
}

impl fmt::Display for BaselineKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for BaselineKind {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "prior_only" | "po" => Ok(BaselineKind::PriorOnly),
            "random_init" | "ri" => Ok(BaselineKind::RandomInit),
            "retrain" => Ok(BaselineKind::Retrain),
            other => Err(format!("unknown baseline `{other}`")),
        }
    }
}

/// Feedforward initialization reported as the final prediction.
pub fn prior_only_predict(model: &BinModel, x: &[f64], observed: &Assignment) -> Result<Assignment, InferenceError> {
    init_targets(model, x, observed)
}

/// General inference from a seeded `N(0, 1)` draw of the targets.
pub fn random_init_infer(
    model: &BinModel,
    x: &[f64],
    observed: &Assignment,
    opts: &InferenceOptions,
    seed: u64,
) -> Result<InferenceResult, InferenceError> {
    let opts = InferenceOptions {
        init: Init::Random { seed },
        ..opts.clone()
    };
    general_infer(model, x, observed, &opts)
}

/// Task-specific regressor: one subnetwork per target fed `[x; V_{−S}]`.
///
/// Stored as a [`BinModel`] whose variables are the targets, each a root
/// with the augmented feature vector as input.
#[derive(Debug, Clone, PartialEq)]
pub struct DirectRegressor {
    targets: Vec<usize>,
    observed: Vec<usize>,
    n_vars: usize,
    model: BinModel,
}

impl DirectRegressor {
    pub fn new<R: Rng>(
        feature_dim: usize,
        variables: &[VariableSpec],
        task: &Task,
        arch: &Architecture,
        rng: &mut R,
    ) -> Result<Self, ModelError> {
        let n_vars = variables.len();
        let observed = task.observed(n_vars);
        let heads = task
            .targets
            .iter()
            .map(|&t| VariableSpec::new(variables.get(t).map_or_else(|| format!("v{}", t + 1), |v| v.name.clone()), vec![]))
            .collect();
        let model = BinModel::new(feature_dim + observed.len(), heads, arch, rng)?;
        Ok(Self {
            targets: task.targets.clone(),
            observed,
            n_vars,
            model,
        })
    }

    pub fn model(&self) -> &BinModel {
        &self.model
    }

    pub fn targets(&self) -> &[usize] {
        &self.targets
    }

    /// `[x; v_observed]`.
    pub fn input(&self, x: &[f64], v: &[f64]) -> Vec<f64> {
        let mut z = x.to_vec();
        z.extend(self.observed.iter().map(|&i| v[i]));
        z
    }

    /// Gaussian-NLL training of all heads for `warmup_epochs + epochs`
    /// epochs; the composite weight is ignored.
    pub fn fit(&mut self, train: Samples, val: Option<Samples>, cfg: &TrainConfig) -> Result<TrainReport, TrainError> {
        let (zx, zv) = self.reshape(train);
        let val = val.map(|s| self.reshape(s));
        let cfg = TrainConfig {
            lambda_c: 0.0,
            cl_subsets: None,
            ..cfg.clone()
        };
        cbin_train(
            &mut self.model,
            Samples::new(&zx, &zv),
            val.as_ref().map(|(x, v)| Samples::new(x, v)),
            &cfg,
        )
    }

    fn reshape(&self, s: Samples) -> (Vec<Vec<f64>>, Vec<Vec<f64>>) {
        let x = s.x.iter().zip(s.v).map(|(x, v)| self.input(x, v)).collect();
        let v = s.v.iter().map(|v| self.targets.iter().map(|&t| v[t]).collect()).collect();
        (x, v)
    }

    /// Full value vector with the targets replaced by the predicted means.
    /// Entries of `v` at the targets are ignored.
    pub fn predict(&self, x: &[f64], v: &[f64]) -> Result<Vec<f64>, ModelError> {
        if v.len() != self.n_vars {
            return Err(ModelError::ValueCount {
                expected: self.n_vars,
                got: v.len(),
            });
        }
        let z = self.input(x, v);
        let heads = vec![0.0; self.targets.len()];
        let mut out = v.to_vec();
        for (h, &t) in self.targets.iter().enumerate() {
            out[t] = self.model.conditional_moments_at(h, &z, &heads)?.0;
        }
        Ok(out)
    }
}
