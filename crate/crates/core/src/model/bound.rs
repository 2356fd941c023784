use crate::autodiff::{Gradients, Tape, Var};
use crate::npn::{gaussian_nll_node, BoundSubnet};

use super::BinModel;

/// A model whose subnetworks are recorded on a tape, either as trainable
/// leaves or as constants.
#[derive(Debug, Clone)]
pub struct BoundModel {
    subnets: Vec<BoundSubnet>,
    parents: Vec<Vec<usize>>,
    feature_dim: usize,
}

impl BoundModel {
    pub fn bind(tape: &mut Tape, model: &BinModel, trainable: bool) -> Self {
        Self {
            subnets: model
                .subnets()
                .iter()
                .map(|s| BoundSubnet::bind(tape, s, trainable))
                .collect(),
            parents: model.variables().iter().map(|v| v.parents.clone()).collect(),
            feature_dim: model.feature_dim(),
        }
    }

    pub fn num_vars(&self) -> usize {
        self.subnets.len()
    }

    /// Conditional `(μ, s)` nodes of `v_n` with deterministic inputs.
    pub fn conditional(&self, tape: &mut Tape, n: usize, x: Var, values: &[Var]) -> (Var, Var) {
        let mut parts = Vec::with_capacity(1 + self.parents[n].len());
        parts.push(x);
        parts.extend(self.parents[n].iter().map(|&p| values[p]));
        let input = tape.concat(&parts);
        self.subnets[n].forward(tape, input, None)
    }

    /// NLL term of `v_n`.
    pub fn term(&self, tape: &mut Tape, n: usize, x: Var, values: &[Var]) -> Var {
        let (m, s) = self.conditional(tape, n, x, values);
        gaussian_nll_node(tape, values[n], m, s)
    }

    /// Sum of the NLL terms in `terms`, which must be non-empty.
    pub fn nll(&self, tape: &mut Tape, x: Var, values: &[Var], terms: impl IntoIterator<Item = usize>) -> Var {
        let parts: Vec<Var> = terms.into_iter().map(|n| self.term(tape, n, x, values)).collect();
        tape.add_all(&parts)
    }

    pub fn joint_nll(&self, tape: &mut Tape, x: Var, values: &[Var]) -> Var {
        self.nll(tape, x, values, 0..self.num_vars())
    }

    /// Marginal NLL of the variables from `k` on, with the first `k`
    /// integrated out by moment propagation.
    pub fn marginal_nll(&self, tape: &mut Tape, x: Var, values: &[Var], k: usize) -> Var {
        let n_vars = self.num_vars();
        assert!(k < n_vars, "at least one variable must remain");
        let zero = tape.scalar(0.0);
        let x_var = tape.constant(vec![0.0; self.feature_dim]);
        let mut moments: Vec<(Var, Var)> = Vec::with_capacity(n_vars);
        let mut terms = Vec::with_capacity(n_vars - k);
        for n in 0..n_vars {
            let parents = &self.parents[n];
            let mut means = vec![x];
            let mut vars = vec![x_var];
            let mut uncertain = false;
            for &p in parents {
                if p < k {
                    means.push(moments[p].0);
                    vars.push(moments[p].1);
                    uncertain = true;
                } else {
                    means.push(values[p]);
                    vars.push(zero);
                }
            }
            let mean = tape.concat(&means);
            let var = uncertain.then(|| tape.concat(&vars));
            let (m, s) = self.subnets[n].forward(tape, mean, var);
            moments.push((m, s));
            if n >= k {
                terms.push(gaussian_nll_node(tape, values[n], m, s));
            }
        }
        tape.add_all(&terms)
    }

    /// Effective-parameter gradient in the layout of
    /// [`BinModel::pullback`].
    pub fn gather(&self, grads: &Gradients) -> Vec<f64> {
        let mut out = Vec::new();
        for s in &self.subnets {
            s.gather(grads, &mut out);
        }
        out
    }

    /// Adds the effective-parameter gradient into `out`.
    pub fn accumulate(&self, grads: &Gradients, out: &mut [f64]) {
        let mut at = 0;
        for s in &self.subnets {
            for l in &s.layers {
                let (nw, nb) = (l.inputs * l.outputs, l.outputs);
                for (v, len) in [(l.w_mean, nw), (l.w_var, nw), (l.w_mean_sq, nw), (l.b_mean, nb), (l.b_var, nb)] {
                    grads.accumulate_into(v, &mut out[at..at + len]);
                    at += len;
                }
            }
        }
    }
}
