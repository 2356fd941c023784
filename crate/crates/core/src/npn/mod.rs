//! Gaussian natural-parameter network layers.
//!
//! Activations and weights are Gaussian; layers map input (mean, variance)
//! pairs to output (mean, variance) pairs in closed form. Each conditional of
//! a model is one [`NpnSubnetwork`] whose output is a single Gaussian.

mod graph;
mod layer;
mod subnet;

pub use graph::{gaussian_nll_node, BoundLayer, BoundSubnet};
pub use layer::{EffectiveLayer, NpnLinearLayer, INIT_WEIGHT_VARIANCE};
pub use subnet::{NpnSubnetwork, OUTPUT_VARIANCE_FLOOR};

use crate::special::relu_moments;

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum NpnError {
    #[error("dimension mismatch: expected {expected}, got {got}")]
    Dimension { expected: usize, got: usize },
    #[error("variance must be positive, got {0}")]
    NonPositiveVariance(f64),
    #[error("variance must be non-negative and finite, got {0}")]
    NegativeVariance(f64),
    #[error("non-finite moment")]
    NonFinite,
}

/// Per-component means and variances of a diagonal Gaussian. A
/// deterministic value has variance exactly zero.
#[derive(Debug, Clone, PartialEq)]
pub struct GaussianMoments {
    pub mean: Vec<f64>,
    pub variance: Vec<f64>,
}

impl GaussianMoments {
    pub fn new(mean: Vec<f64>, variance: Vec<f64>) -> Result<Self, NpnError> {
        if mean.len() != variance.len() {
            return Err(NpnError::Dimension {
                expected: mean.len(),
                got: variance.len(),
            });
        }
        if let Some(&v) = variance.iter().find(|v| !(**v >= 0.0) || !v.is_finite()) {
            return Err(NpnError::NegativeVariance(v));
        }
        Ok(Self { mean, variance })
    }

    pub fn deterministic(mean: Vec<f64>) -> Self {
        let variance = vec![0.0; mean.len()];
        Self { mean, variance }
    }

    pub fn scalar(mean: f64, variance: f64) -> Self {
        Self {
            mean: vec![mean],
            variance: vec![variance],
        }
    }

    pub fn len(&self) -> usize {
        self.mean.len()
    }

    pub fn is_empty(&self) -> bool {
        self.mean.is_empty()
    }
}

/// Nonlinearity applied between linear layers.
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    Identity,
    Relu,
}

impl Activation {
    pub(crate) fn code(self) -> u8 {
        match self {
            Activation::Identity => 0,
            Activation::Relu => 1,
        }
    }

    pub(crate) fn from_code(code: u8) -> Option<Self> {
        match code {
            0 => Some(Activation::Identity),
            1 => Some(Activation::Relu),
            _ => None,
        }
    }
}

/// Moments of `f(z)` for `z ~ N(mean, var)` componentwise. For ReLU these
/// are the exact rectified-Gaussian moments.
pub fn npn_activation(input: &GaussianMoments, kind: Activation) -> Result<GaussianMoments, NpnError> {
    if input.mean.iter().chain(&input.variance).any(|x| !x.is_finite()) {
        return Err(NpnError::NonFinite);
    }
    if let Some(&v) = input.variance.iter().find(|v| **v < 0.0) {
        return Err(NpnError::NegativeVariance(v));
    }
    Ok(match kind {
        Activation::Identity => input.clone(),
        Activation::Relu => {
            let (mean, variance) = input
                .mean
                .iter()
                .zip(&input.variance)
                .map(|(&m, &v)| relu_moments(m, v))
                .unzip();
            GaussianMoments { mean, variance }
        }
    })
}

/// Gaussian negative log-likelihood without the `½ log 2π` constant:
/// `(μ − v)² / (2s) + ½ log s`.
pub fn gaussian_nll(target: f64, mean: f64, variance: f64) -> Result<f64, NpnError> {
    if !(variance > 0.0) {
        return Err(NpnError::NonPositiveVariance(variance));
    }
    let r = mean - target;
    Ok(r * r / (2.0 * variance) + 0.5 * variance.ln())
}
