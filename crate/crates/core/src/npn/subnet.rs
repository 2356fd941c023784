use rand::Rng;

use super::layer::{EffectiveLayer, NpnLinearLayer, INIT_WEIGHT_VARIANCE};
use super::{npn_activation, Activation, GaussianMoments, NpnError};

/// Added to the propagated output variance so the conditional variance is
/// bounded away from zero.
pub const OUTPUT_VARIANCE_FLOOR: f64 = 1e-6;

/// Initial output-head bias variance, one unit in standardized coordinates.
const INIT_OUTPUT_BIAS_VARIANCE: f64 = 1.0;

/// A stack of NPN linear layers with `hidden_activation` between them and an
/// identity output layer of width one. The output is the conditional
/// `(μ, s)` of one variable.
///
/// The output variance is the propagated variance plus
/// [`OUTPUT_VARIANCE_FLOOR`]; since the output bias variance is a softplus
/// it is strictly positive. Keeping the link affine leaves single-layer
/// subnetworks exact under uncertain inputs.
#[derive(Debug, Clone, PartialEq)]
pub struct NpnSubnetwork {
    layers: Vec<NpnLinearLayer>,
    hidden_activation: Activation,
    effective: Vec<EffectiveLayer>,
}

impl NpnSubnetwork {
    pub fn init<R: Rng>(input_dim: usize, hidden: &[usize], activation: Activation, rng: &mut R) -> Self {
        let mut layers = Vec::with_capacity(hidden.len() + 1);
        let mut fan_in = input_dim;
        for &h in hidden {
            layers.push(NpnLinearLayer::init(fan_in, h, INIT_WEIGHT_VARIANCE, rng));
            fan_in = h;
        }
        layers.push(NpnLinearLayer::init(fan_in, 1, INIT_OUTPUT_BIAS_VARIANCE, rng));
        Self::from_layers(layers, activation).expect("consistent shapes by construction")
    }

    pub fn from_layers(layers: Vec<NpnLinearLayer>, hidden_activation: Activation) -> Result<Self, NpnError> {
        let Some(last) = layers.last() else {
            return Err(NpnError::Dimension { expected: 1, got: 0 });
        };
        if last.outputs != 1 {
            return Err(NpnError::Dimension {
                expected: 1,
                got: last.outputs,
            });
        }
        for pair in layers.windows(2) {
            if pair[0].outputs != pair[1].inputs {
                return Err(NpnError::Dimension {
                    expected: pair[0].outputs,
                    got: pair[1].inputs,
                });
            }
        }
        let effective = layers.iter().map(NpnLinearLayer::effective).collect();
        Ok(Self {
            layers,
            hidden_activation,
            effective,
        })
    }

    /// A subnetwork that outputs `(mean, variance)` whatever its input.
    pub fn constant(input_dim: usize, mean: f64, variance: f64) -> Result<Self, NpnError> {
        if !(variance > OUTPUT_VARIANCE_FLOOR) {
            return Err(NpnError::NonPositiveVariance(variance));
        }
        let layer = NpnLinearLayer::from_moments(
            input_dim,
            1,
            vec![0.0; input_dim],
            vec![0.0; input_dim],
            vec![mean],
            vec![variance - OUTPUT_VARIANCE_FLOOR],
        )?;
        Self::from_layers(vec![layer], Activation::Identity)
    }

    pub fn input_dim(&self) -> usize {
        self.layers[0].inputs
    }

    pub fn layers(&self) -> &[NpnLinearLayer] {
        &self.layers
    }

    pub fn hidden_activation(&self) -> Activation {
        self.hidden_activation
    }

    pub fn effective(&self) -> &[EffectiveLayer] {
        &self.effective
    }

    pub fn num_params(&self) -> usize {
        self.layers.iter().map(NpnLinearLayer::num_params).sum()
    }

    /// Length of the effective-parameter gradient of this subnetwork.
    pub fn grad_len(&self) -> usize {
        self.effective.iter().map(EffectiveLayer::grad_len).sum()
    }

    pub fn write_params(&self, out: &mut Vec<f64>) {
        for l in &self.layers {
            l.write_params(out);
        }
    }

    pub fn read_params(&mut self, src: &[f64]) -> usize {
        let mut used = 0;
        for l in &mut self.layers {
            used += l.read_params(&src[used..]);
        }
        self.effective = self.layers.iter().map(NpnLinearLayer::effective).collect();
        used
    }

    /// Maps an effective-parameter gradient to a raw-parameter gradient.
    pub fn pullback(&self, eff: &[f64], out: &mut Vec<f64>) -> usize {
        let mut used = 0;
        for l in &self.layers {
            used += l.pullback(&eff[used..], out);
        }
        used
    }

    /// Output `(μ, s)` for the given input moments.
    pub fn forward(&self, input: &GaussianMoments) -> Result<(f64, f64), NpnError> {
        let mut cur = self.effective[0].forward(input)?;
        for layer in &self.effective[1..] {
            cur = npn_activation(&cur, self.hidden_activation)?;
            cur = layer.forward(&cur)?;
        }
        debug_assert_eq!(cur.len(), 1);
        let (m, s) = (cur.mean[0], cur.variance[0] + OUTPUT_VARIANCE_FLOOR);
        if !m.is_finite() || !s.is_finite() {
            return Err(NpnError::NonFinite);
        }
        Ok((m, s))
    }

    /// Output `(μ, s)` for deterministic inputs.
    pub fn forward_point(&self, input: &[f64]) -> Result<(f64, f64), NpnError> {
        self.forward(&GaussianMoments::deterministic(input.to_vec()))
    }
}
