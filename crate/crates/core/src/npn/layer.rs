use rand::Rng;

use crate::special::{sigmoid, softplus, softplus_inv};

use super::{GaussianMoments, NpnError};

/// Initial weight and hidden-bias variance after the softplus map.
pub const INIT_WEIGHT_VARIANCE: f64 = 1e-3;

/// Gaussian NPN linear layer with independent weights `w ~ N(W_m, W_s)` and
/// biases `b ~ N(b_m, b_s)`.
///
/// The variances are stored unconstrained and mapped through softplus, so
/// `W_s` and `b_s` stay non-negative for any raw value. Matrices are
/// row-major `outputs x inputs`.
#[derive(Debug, Clone, PartialEq)]
pub struct NpnLinearLayer {
    pub inputs: usize,
    pub outputs: usize,
    pub weight_mean: Vec<f64>,
    pub weight_var_raw: Vec<f64>,
    pub bias_mean: Vec<f64>,
    pub bias_var_raw: Vec<f64>,
}

/// Parameters of a layer as they enter moment propagation.
#[derive(Debug, Clone, PartialEq)]
pub struct EffectiveLayer {
    pub inputs: usize,
    pub outputs: usize,
    pub w_mean: Vec<f64>,
    pub w_var: Vec<f64>,
    /// `W_m ∘ W_m`, kept so the per-sample graphs do not recompute it.
    pub w_mean_sq: Vec<f64>,
    pub b_mean: Vec<f64>,
    pub b_var: Vec<f64>,
}

impl NpnLinearLayer {
    /// Fan-in scaled uniform means, zero bias means, small variances.
    pub fn init<R: Rng>(inputs: usize, outputs: usize, bias_var: f64, rng: &mut R) -> Self {
        let bound = 1.0 / (inputs.max(1) as f64).sqrt();
        let weight_mean = (0..inputs * outputs)
            .map(|_| rng.gen_range(-bound..bound))
            .collect();
        Self {
            inputs,
            outputs,
            weight_mean,
            weight_var_raw: vec![softplus_inv(INIT_WEIGHT_VARIANCE); inputs * outputs],
            bias_mean: vec![0.0; outputs],
            bias_var_raw: vec![softplus_inv(bias_var); outputs],
        }
    }

    /// Layer from explicit effective values. Zero variances map to a raw
    /// value whose softplus underflows to exactly zero.
    pub fn from_moments(
        inputs: usize,
        outputs: usize,
        weight_mean: Vec<f64>,
        weight_var: Vec<f64>,
        bias_mean: Vec<f64>,
        bias_var: Vec<f64>,
    ) -> Result<Self, NpnError> {
        if weight_mean.len() != inputs * outputs || weight_var.len() != inputs * outputs {
            return Err(NpnError::Dimension {
                expected: inputs * outputs,
                got: weight_mean.len().min(weight_var.len()),
            });
        }
        if bias_mean.len() != outputs || bias_var.len() != outputs {
            return Err(NpnError::Dimension {
                expected: outputs,
                got: bias_mean.len().min(bias_var.len()),
            });
        }
        let raw = |v: f64| -> Result<f64, NpnError> {
            if v < 0.0 || !v.is_finite() {
                Err(NpnError::NegativeVariance(v))
            } else if v == 0.0 {
                Ok(-1000.0)
            } else {
                Ok(softplus_inv(v))
            }
        };
        Ok(Self {
            inputs,
            outputs,
            weight_mean,
            weight_var_raw: weight_var.into_iter().map(raw).collect::<Result<_, _>>()?,
            bias_mean,
            bias_var_raw: bias_var.into_iter().map(raw).collect::<Result<_, _>>()?,
        })
    }

    pub fn num_params(&self) -> usize {
        2 * (self.inputs * self.outputs + self.outputs)
    }

    pub fn weight_var(&self) -> Vec<f64> {
        self.weight_var_raw.iter().map(|&r| softplus(r)).collect()
    }

    pub fn bias_var(&self) -> Vec<f64> {
        self.bias_var_raw.iter().map(|&r| softplus(r)).collect()
    }

    pub fn effective(&self) -> EffectiveLayer {
        EffectiveLayer {
            inputs: self.inputs,
            outputs: self.outputs,
            w_mean: self.weight_mean.clone(),
            w_var: self.weight_var(),
            w_mean_sq: self.weight_mean.iter().map(|w| w * w).collect(),
            b_mean: self.bias_mean.clone(),
            b_var: self.bias_var(),
        }
    }

    /// Raw parameters in the order `W_m, W_s raw, b_m, b_s raw`.
    pub fn write_params(&self, out: &mut Vec<f64>) {
        out.extend_from_slice(&self.weight_mean);
        out.extend_from_slice(&self.weight_var_raw);
        out.extend_from_slice(&self.bias_mean);
        out.extend_from_slice(&self.bias_var_raw);
    }

    /// Inverse of [`write_params`](Self::write_params); returns how many
    /// values were consumed.
    pub fn read_params(&mut self, src: &[f64]) -> usize {
        let nw = self.inputs * self.outputs;
        let nb = self.outputs;
        self.weight_mean.copy_from_slice(&src[..nw]);
        self.weight_var_raw.copy_from_slice(&src[nw..2 * nw]);
        self.bias_mean.copy_from_slice(&src[2 * nw..2 * nw + nb]);
        self.bias_var_raw.copy_from_slice(&src[2 * nw + nb..2 * nw + 2 * nb]);
        2 * (nw + nb)
    }

    /// Chains gradients with respect to the effective parameters (laid out
    /// as `w_mean, w_var, w_mean_sq, b_mean, b_var`) back to the raw ones.
    /// Returns how many effective values were consumed.
    pub fn pullback(&self, eff: &[f64], out: &mut Vec<f64>) -> usize {
        let nw = self.inputs * self.outputs;
        let nb = self.outputs;
        let (g_wm, rest) = eff.split_at(nw);
        let (g_ws, rest) = rest.split_at(nw);
        let (g_wsq, rest) = rest.split_at(nw);
        let (g_bm, rest) = rest.split_at(nb);
        let g_bs = &rest[..nb];
        out.extend(
            g_wm.iter()
                .zip(g_wsq)
                .zip(&self.weight_mean)
                .map(|((a, b), w)| a + 2.0 * w * b),
        );
        out.extend(g_ws.iter().zip(&self.weight_var_raw).map(|(g, r)| g * sigmoid(*r)));
        out.extend_from_slice(g_bm);
        out.extend(g_bs.iter().zip(&self.bias_var_raw).map(|(g, r)| g * sigmoid(*r)));
        3 * nw + 2 * nb
    }

    /// Moment propagation through the layer:
    /// `mean = W_m x_m + b_m` and
    /// `var = W_s (x_s + x_m²) + (W_m ∘ W_m) x_s + b_s`.
    pub fn forward(&self, input: &GaussianMoments) -> Result<GaussianMoments, NpnError> {
        self.effective().forward(input)
    }
}

impl EffectiveLayer {
    /// Number of values this layer contributes to an effective gradient.
    pub fn grad_len(&self) -> usize {
        3 * self.inputs * self.outputs + 2 * self.outputs
    }

    pub fn forward(&self, input: &GaussianMoments) -> Result<GaussianMoments, NpnError> {
        if input.len() != self.inputs {
            return Err(NpnError::Dimension {
                expected: self.inputs,
                got: input.len(),
            });
        }
        let cols = self.inputs;
        let xm = &input.mean;
        let xs = &input.variance;
        let deterministic = xs.iter().all(|&s| s == 0.0);
        let mut mean = Vec::with_capacity(self.outputs);
        let mut variance = Vec::with_capacity(self.outputs);
        for r in 0..self.outputs {
            let row = r * cols..(r + 1) * cols;
            let wm = &self.w_mean[row.clone()];
            let ws = &self.w_var[row.clone()];
            let mut m = self.b_mean[r];
            let mut v = self.b_var[r];
            if deterministic {
                for c in 0..cols {
                    m += wm[c] * xm[c];
                    v += ws[c] * xm[c] * xm[c];
                }
            } else {
                let wsq = &self.w_mean_sq[row];
                for c in 0..cols {
                    m += wm[c] * xm[c];
                    v += ws[c] * (xs[c] + xm[c] * xm[c]) + wsq[c] * xs[c];
                }
            }
            mean.push(m);
            variance.push(v);
        }
        Ok(GaussianMoments { mean, variance })
    }
}
