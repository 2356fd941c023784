//! Factorized joint models: one NPN subnetwork per conditional
//! `p(v_n | X, parents(v_n))`.
//!
//! Variable indices are zero-based positions in topological (declaration)
//! order. Every parent index is smaller than the index of its child.

mod bound;
pub mod checkpoint;

pub use bound::BoundModel;
pub use checkpoint::{load_checkpoint, save_checkpoint, Checkpoint, CheckpointError};

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::npn::{gaussian_nll, Activation, GaussianMoments, NpnError, NpnLinearLayer, NpnSubnetwork, OUTPUT_VARIANCE_FLOOR};

#[derive(Debug, thiserror::Error)]
pub enum ModelError {
    #[error(transparent)]
    Npn(#[from] NpnError),
    #[error("variable {variable} lists parent {parent}, which does not precede it")]
    ParentOrder { variable: usize, parent: usize },
    #[error("variable {variable} lists parent {parent} twice")]
    DuplicateParent { variable: usize, parent: usize },
    #[error("expected {expected} subnetworks, got {got}")]
    SubnetCount { expected: usize, got: usize },
    #[error("subnetwork {variable} takes {got} inputs, expected {expected}")]
    SubnetInput { variable: usize, expected: usize, got: usize },
    #[error("expected {expected} features, got {got}")]
    FeatureDim { expected: usize, got: usize },
    #[error("expected {expected} variable values, got {got}")]
    ValueCount { expected: usize, got: usize },
    #[error("variable {0} is not assigned")]
    Unassigned(usize),
    #[error("variable {0} has a non-finite value")]
    NonFinite(usize),
    #[error("marginalized set must be a prefix {{0..k}} of the variable order")]
    NotPrefix,
    #[error("unknown variable {0:?}")]
    UnknownVariable(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum VariableKind {
    #[default]
    Continuous,
    /// A {0, 1} variable modeled with a Gaussian head and read out by
    /// thresholding at 0.5.
    BinaryAsContinuous,
}

impl VariableKind {
    pub(crate) fn code(self) -> u8 {
        match self {
            VariableKind::Continuous => 0,
            VariableKind::BinaryAsContinuous => 1,
        }
    }

    pub(crate) fn from_code(code: u8) -> Option<Self> {
        match code {
            0 => Some(VariableKind::Continuous),
            1 => Some(VariableKind::BinaryAsContinuous),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct VariableSpec {
    pub name: String,
    #[serde(default)]
    pub kind: VariableKind,
    /// Parent indices in the order their values are fed to the subnetwork.
    pub parents: Vec<usize>,
}

impl VariableSpec {
    pub fn new(name: impl Into<String>, parents: Vec<usize>) -> Self {
        Self {
            name: name.into(),
            kind: VariableKind::Continuous,
            parents,
        }
    }

    pub fn with_kind(mut self, kind: VariableKind) -> Self {
        self.kind = kind;
        self
    }
}

/// The full chain rule factorization: variable `n` has parents `0..n`.
pub fn chain_factorization<S: AsRef<str>>(names: &[S]) -> Vec<VariableSpec> {
    names
        .iter()
        .enumerate()
        .map(|(n, name)| VariableSpec::new(name.as_ref(), (0..n).collect()))
        .collect()
}

/// Hidden layer widths and activation shared by every subnetwork.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Architecture {
    pub hidden: Vec<usize>,
    pub activation: Activation,
}

impl Default for Architecture {
    fn default() -> Self {
        Self {
            hidden: vec![64, 64],
            activation: Activation::Relu,
        }
    }
}

impl Architecture {
    /// A single linear NPN layer per conditional.
    pub fn linear() -> Self {
        Self {
            hidden: Vec::new(),
            activation: Activation::Identity,
        }
    }
}

/// Values for some or all variables of a model.
#[derive(Debug, Clone, PartialEq)]
pub struct Assignment {
    values: Vec<f64>,
    observed: Vec<bool>,
}

impl Assignment {
    /// Nothing assigned.
    pub fn empty(n: usize) -> Self {
        Self {
            values: vec![f64::NAN; n],
            observed: vec![false; n],
        }
    }

    /// Every variable assigned.
    pub fn full(values: Vec<f64>) -> Result<Self, ModelError> {
        if let Some(i) = values.iter().position(|v| !v.is_finite()) {
            return Err(ModelError::NonFinite(i));
        }
        let observed = vec![true; values.len()];
        Ok(Self { values, observed })
    }

    /// Assigns the variables whose entry is `Some`.
    pub fn from_options(values: &[Option<f64>]) -> Result<Self, ModelError> {
        let mut a = Self::empty(values.len());
        for (i, v) in values.iter().enumerate() {
            if let Some(v) = v {
                a.set(i, *v)?;
            }
        }
        Ok(a)
    }

    /// Keeps the values at `observed` indices of a full vector.
    pub fn observe(values: &[f64], observed: &[usize]) -> Result<Self, ModelError> {
        let mut a = Self::empty(values.len());
        for &i in observed {
            a.set(i, values[i])?;
        }
        Ok(a)
    }

    pub fn set(&mut self, n: usize, value: f64) -> Result<(), ModelError> {
        if !value.is_finite() {
            return Err(ModelError::NonFinite(n));
        }
        self.values[n] = value;
        self.observed[n] = true;
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn get(&self, n: usize) -> Option<f64> {
        self.observed[n].then_some(self.values[n])
    }

    pub fn is_observed(&self, n: usize) -> bool {
        self.observed[n]
    }

    pub fn is_complete(&self) -> bool {
        self.observed.iter().all(|&o| o)
    }

    /// Raw values; unassigned entries are NaN.
    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn observed_indices(&self) -> Vec<usize> {
        (0..self.len()).filter(|&i| self.observed[i]).collect()
    }

    pub fn unobserved_indices(&self) -> Vec<usize> {
        (0..self.len()).filter(|&i| !self.observed[i]).collect()
    }

    /// All values, failing on the first unassigned variable.
    pub fn complete_values(&self) -> Result<&[f64], ModelError> {
        match self.observed.iter().position(|&o| !o) {
            Some(i) => Err(ModelError::Unassigned(i)),
            None => Ok(&self.values),
        }
    }
}

/// A factorized model `p(V | X) = Π_n p(v_n | X, parents(v_n))`.
#[derive(Debug, Clone, PartialEq)]
pub struct BinModel {
    feature_dim: usize,
    variables: Vec<VariableSpec>,
    subnets: Vec<NpnSubnetwork>,
}

impl BinModel {
    pub fn new<R: Rng>(
        feature_dim: usize,
        variables: Vec<VariableSpec>,
        arch: &Architecture,
        rng: &mut R,
    ) -> Result<Self, ModelError> {
        validate_factorization(&variables)?;
        let subnets = variables
            .iter()
            .map(|v| NpnSubnetwork::init(feature_dim + v.parents.len(), &arch.hidden, arch.activation, rng))
            .collect();
        Self::from_parts(feature_dim, variables, subnets)
    }

    pub fn from_parts(
        feature_dim: usize,
        variables: Vec<VariableSpec>,
        subnets: Vec<NpnSubnetwork>,
    ) -> Result<Self, ModelError> {
        validate_factorization(&variables)?;
        if subnets.len() != variables.len() {
            return Err(ModelError::SubnetCount {
                expected: variables.len(),
                got: subnets.len(),
            });
        }
        for (n, (v, s)) in variables.iter().zip(&subnets).enumerate() {
            let expected = feature_dim + v.parents.len();
            if s.input_dim() != expected {
                return Err(ModelError::SubnetInput {
                    variable: n,
                    expected,
                    got: s.input_dim(),
                });
            }
        }
        Ok(Self {
            feature_dim,
            variables,
            subnets,
        })
    }

    /// Single-layer model with deterministic weights:
    /// `v_n ~ N(coefficients[n] · [x; parents] + offsets[n], variances[n])`.
    pub fn linear(
        feature_dim: usize,
        variables: Vec<VariableSpec>,
        coefficients: Vec<Vec<f64>>,
        offsets: Vec<f64>,
        variances: Vec<f64>,
    ) -> Result<Self, ModelError> {
        if coefficients.len() != variables.len() || offsets.len() != variables.len() || variances.len() != variables.len() {
            return Err(ModelError::SubnetCount {
                expected: variables.len(),
                got: coefficients.len().min(offsets.len()).min(variances.len()),
            });
        }
        let mut subnets = Vec::with_capacity(variables.len());
        for (n, v) in variables.iter().enumerate() {
            let inputs = feature_dim + v.parents.len();
            if variances[n] <= OUTPUT_VARIANCE_FLOOR {
                return Err(NpnError::NonPositiveVariance(variances[n]).into());
            }
            let layer = NpnLinearLayer::from_moments(
                inputs,
                1,
                coefficients[n].clone(),
                vec![0.0; inputs],
                vec![offsets[n]],
                vec![variances[n] - OUTPUT_VARIANCE_FLOOR],
            )?;
            subnets.push(NpnSubnetwork::from_layers(vec![layer], Activation::Identity)?);
        }
        Self::from_parts(feature_dim, variables, subnets)
    }

    pub fn feature_dim(&self) -> usize {
        self.feature_dim
    }

    pub fn num_vars(&self) -> usize {
        self.variables.len()
    }

    pub fn variables(&self) -> &[VariableSpec] {
        &self.variables
    }

    pub fn parents(&self, n: usize) -> &[usize] {
        &self.variables[n].parents
    }

    pub fn subnets(&self) -> &[NpnSubnetwork] {
        &self.subnets
    }

    pub fn index_of(&self, name: &str) -> Result<usize, ModelError> {
        self.variables
            .iter()
            .position(|v| v.name == name)
            .ok_or_else(|| ModelError::UnknownVariable(name.to_string()))
    }

    /// The model of the first `k` variables alone.
    pub fn prefix_model(&self, k: usize) -> Result<Self, ModelError> {
        Self::from_parts(
            self.feature_dim,
            self.variables[..k].to_vec(),
            self.subnets[..k].to_vec(),
        )
    }

    pub fn num_params(&self) -> usize {
        self.subnets.iter().map(NpnSubnetwork::num_params).sum()
    }

    /// Length of the effective-parameter gradient gathered from a
    /// [`BoundModel`].
    pub fn grad_len(&self) -> usize {
        self.subnets.iter().map(NpnSubnetwork::grad_len).sum()
    }

    pub fn params(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.num_params());
        for s in &self.subnets {
            s.write_params(&mut out);
        }
        out
    }

    pub fn set_params(&mut self, params: &[f64]) {
        assert_eq!(params.len(), self.num_params(), "parameter vector length");
        let mut used = 0;
        for s in &mut self.subnets {
            used += s.read_params(&params[used..]);
        }
    }

    /// Raw-parameter gradient from an effective-parameter gradient.
    pub fn pullback(&self, eff: &[f64]) -> Vec<f64> {
        assert_eq!(eff.len(), self.grad_len(), "effective gradient length");
        let mut out = Vec::with_capacity(self.num_params());
        let mut used = 0;
        for s in &self.subnets {
            used += s.pullback(&eff[used..], &mut out);
        }
        out
    }

    fn check_x(&self, x: &[f64]) -> Result<(), ModelError> {
        if x.len() != self.feature_dim {
            return Err(ModelError::FeatureDim {
                expected: self.feature_dim,
                got: x.len(),
            });
        }
        Ok(())
    }

    fn check_values(&self, v: &[f64]) -> Result<(), ModelError> {
        if v.len() != self.num_vars() {
            return Err(ModelError::ValueCount {
                expected: self.num_vars(),
                got: v.len(),
            });
        }
        Ok(())
    }

    /// `[x; values of parents(n)]`.
    pub fn conditional_input(&self, n: usize, x: &[f64], values: &[f64]) -> Vec<f64> {
        let mut input = Vec::with_capacity(self.subnets[n].input_dim());
        input.extend_from_slice(x);
        input.extend(self.variables[n].parents.iter().map(|&p| values[p]));
        input
    }

    /// `(μ, s)` of `v_n` given `x` and the parent values in `values`
    /// (a full-length slice; only the parents of `n` are read).
    pub fn conditional_moments_at(&self, n: usize, x: &[f64], values: &[f64]) -> Result<(f64, f64), ModelError> {
        self.check_x(x)?;
        self.check_values(values)?;
        if let Some(&p) = self.variables[n].parents.iter().find(|&&p| !values[p].is_finite()) {
            return Err(ModelError::Unassigned(p));
        }
        Ok(self.subnets[n].forward_point(&self.conditional_input(n, x, values))?)
    }

    /// `(μ, s)` of `v_n`; every parent must be assigned.
    pub fn conditional_moments(&self, n: usize, x: &[f64], assignment: &Assignment) -> Result<(f64, f64), ModelError> {
        if let Some(&p) = self.variables[n].parents.iter().find(|&&p| !assignment.is_observed(p)) {
            return Err(ModelError::Unassigned(p));
        }
        self.conditional_moments_at(n, x, assignment.values())
    }

    /// Per-variable terms `−log p(v_n | x, parents)` (without `½ log 2π`).
    pub fn term_nlls(&self, x: &[f64], values: &[f64]) -> Result<Vec<f64>, ModelError> {
        self.check_values(values)?;
        if let Some(i) = values.iter().position(|v| !v.is_finite()) {
            return Err(ModelError::Unassigned(i));
        }
        (0..self.num_vars())
            .map(|n| {
                let (m, s) = self.conditional_moments_at(n, x, values)?;
                Ok(gaussian_nll(values[n], m, s)?)
            })
            .collect()
    }

    pub fn joint_nll(&self, x: &[f64], values: &[f64]) -> Result<f64, ModelError> {
        Ok(self.term_nlls(x, values)?.iter().sum())
    }

    /// Sum of the NLL terms listed in `terms`.
    pub fn partial_nll(&self, x: &[f64], values: &[f64], terms: &[usize]) -> Result<f64, ModelError> {
        let mut total = 0.0;
        for &n in terms {
            let (m, s) = self.conditional_moments_at(n, x, values)?;
            total += gaussian_nll(values[n], m, s)?;
        }
        Ok(total)
    }

    /// Returns `k` when `marginalized` is exactly `{0, .., k−1}`.
    pub fn prefix_len(&self, marginalized: &[usize]) -> Result<usize, ModelError> {
        let mut sorted = marginalized.to_vec();
        sorted.sort_unstable();
        sorted.dedup();
        if sorted.len() != marginalized.len()
            || sorted.iter().enumerate().any(|(i, &s)| i != s)
            || sorted.len() >= self.num_vars().max(1)
        {
            return Err(ModelError::NotPrefix);
        }
        Ok(sorted.len())
    }

    /// Moments of every variable once the first `k` variables are
    /// integrated out. Entries `n < k` are the propagated marginals of the
    /// prefix; entries `n ≥ k` condition on the observed values of parents
    /// outside the prefix and on the propagated moments of those inside it.
    pub fn marginal_moments(&self, x: &[f64], values: &[f64], k: usize) -> Result<Vec<(f64, f64)>, ModelError> {
        self.check_x(x)?;
        self.check_values(values)?;
        let mut moments: Vec<(f64, f64)> = Vec::with_capacity(self.num_vars());
        for n in 0..self.num_vars() {
            let parents = &self.variables[n].parents;
            let mut mean = Vec::with_capacity(self.feature_dim + parents.len());
            mean.extend_from_slice(x);
            let mut variance = vec![0.0; self.feature_dim];
            for &p in parents {
                if p < k {
                    mean.push(moments[p].0);
                    variance.push(moments[p].1);
                } else {
                    if !values[p].is_finite() {
                        return Err(ModelError::Unassigned(p));
                    }
                    mean.push(values[p]);
                    variance.push(0.0);
                }
            }
            let input = GaussianMoments::new(mean, variance)?;
            moments.push(self.subnets[n].forward(&input)?);
        }
        Ok(moments)
    }

    /// `−log p(V_{−S} | x)` with `S` a prefix of the variable order,
    /// approximated by moment propagation through the prefix.
    pub fn marginal_nll(&self, x: &[f64], values: &[f64], marginalized: &[usize]) -> Result<f64, ModelError> {
        let k = self.prefix_len(marginalized)?;
        let moments = self.marginal_moments(x, values, k)?;
        let mut total = 0.0;
        for (n, &(m, s)) in moments.iter().enumerate().skip(k) {
            if !values[n].is_finite() {
                return Err(ModelError::Unassigned(n));
            }
            total += gaussian_nll(values[n], m, s)?;
        }
        Ok(total)
    }
}

fn validate_factorization(variables: &[VariableSpec]) -> Result<(), ModelError> {
    for (n, v) in variables.iter().enumerate() {
        for (i, &p) in v.parents.iter().enumerate() {
            if p >= n {
                return Err(ModelError::ParentOrder { variable: n, parent: p });
            }
            if v.parents[..i].contains(&p) {
                return Err(ModelError::DuplicateParent { variable: n, parent: p });
            }
        }
    }
    Ok(())
}
