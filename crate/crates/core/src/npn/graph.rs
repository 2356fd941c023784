//! Recording NPN computations on a [`Tape`].

use crate::autodiff::{Gradients, Tape, Var};

use super::layer::EffectiveLayer;
use super::subnet::{NpnSubnetwork, OUTPUT_VARIANCE_FLOOR};
use super::Activation;

/// Tape handles for the effective parameters of one layer.
#[derive(Debug, Clone, Copy)]
pub struct BoundLayer {
    pub inputs: usize,
    pub outputs: usize,
    pub w_mean: Var,
    pub w_var: Var,
    pub w_mean_sq: Var,
    pub b_mean: Var,
    pub b_var: Var,
}

impl BoundLayer {
    pub fn bind(tape: &mut Tape, layer: &EffectiveLayer, trainable: bool) -> Self {
        let mut put = |v: &Vec<f64>| {
            if trainable {
                tape.leaf(v.clone())
            } else {
                tape.constant(v.clone())
            }
        };
        Self {
            inputs: layer.inputs,
            outputs: layer.outputs,
            w_mean: put(&layer.w_mean),
            w_var: put(&layer.w_var),
            w_mean_sq: put(&layer.w_mean_sq),
            b_mean: put(&layer.b_mean),
            b_var: put(&layer.b_var),
        }
    }

    /// Moment propagation. `var = None` means a deterministic input and
    /// skips the terms that vanish with zero input variance.
    pub fn forward(&self, tape: &mut Tape, mean: Var, var: Option<Var>) -> (Var, Var) {
        let (r, c) = (self.outputs, self.inputs);
        let m = tape.matvec(self.w_mean, mean, r, c);
        let m = tape.add(m, self.b_mean);
        let m_sq = tape.square(mean);
        let v = match var {
            None => tape.matvec(self.w_var, m_sq, r, c),
            Some(s) => {
                let second = tape.add(s, m_sq);
                let a = tape.matvec(self.w_var, second, r, c);
                let b = tape.matvec(self.w_mean_sq, s, r, c);
                tape.add(a, b)
            }
        };
        let v = tape.add(v, self.b_var);
        (m, v)
    }

    pub fn gather(&self, grads: &Gradients, out: &mut Vec<f64>) {
        for v in [self.w_mean, self.w_var, self.w_mean_sq, self.b_mean, self.b_var] {
            out.extend_from_slice(&grads.wrt(v));
        }
    }
}

/// A subnetwork whose parameters live on a tape.
#[derive(Debug, Clone)]
pub struct BoundSubnet {
    pub layers: Vec<BoundLayer>,
    pub activation: Activation,
}

impl BoundSubnet {
    pub fn bind(tape: &mut Tape, net: &NpnSubnetwork, trainable: bool) -> Self {
        Self {
            layers: net
                .effective()
                .iter()
                .map(|l| BoundLayer::bind(tape, l, trainable))
                .collect(),
            activation: net.hidden_activation(),
        }
    }

    pub fn input_dim(&self) -> usize {
        self.layers[0].inputs
    }

    /// Scalar `(μ, s)` nodes for the given input moments.
    pub fn forward(&self, tape: &mut Tape, mean: Var, var: Option<Var>) -> (Var, Var) {
        let (mut m, mut v) = self.layers[0].forward(tape, mean, var);
        for layer in &self.layers[1..] {
            let (am, av) = match self.activation {
                Activation::Identity => (m, v),
                Activation::Relu => (tape.relu_mean(m, v), tape.relu_var(m, v)),
            };
            (m, v) = layer.forward(tape, am, Some(av));
        }
        let v = tape.offset(v, OUTPUT_VARIANCE_FLOOR);
        (m, v)
    }

    /// Appends the effective-parameter gradient in the layout expected by
    /// [`NpnSubnetwork::pullback`].
    pub fn gather(&self, grads: &Gradients, out: &mut Vec<f64>) {
        for l in &self.layers {
            l.gather(grads, out);
        }
    }
}

/// `(μ − target)² / (2s) + ½ log s` as a scalar node.
pub fn gaussian_nll_node(tape: &mut Tape, target: Var, mean: Var, var: Var) -> Var {
    let r = tape.sub(mean, target);
    let r2 = tape.square(r);
    let q = tape.div(r2, var);
    let q = tape.scale(q, 0.5);
    let l = tape.log(var);
    let l = tape.scale(l, 0.5);
    tape.add(q, l)
}
