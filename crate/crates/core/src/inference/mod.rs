//! MAP queries over arbitrary variable subsets.
//!
//! Every query takes the features `x` and an [`Assignment`] whose assigned
//! entries are the observed variables; the unassigned ones are the targets.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::autodiff::{Adam, AutodiffError, Tape, Var};
use crate::model::{Assignment, BinModel, BoundModel, ModelError};

/// Consecutive iterations compared by the stopping rule.
pub const STOP_WINDOW: usize = 10;

#[derive(Debug, thiserror::Error)]
pub enum InferenceError {
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Autodiff(#[from] AutodiffError),
    #[error("no target variables")]
    NoTargets,
    #[error("loss is not finite at the initial point")]
    NonFiniteInitialLoss,
    #[error("observed variable {observed} depends on target {target}; forward prediction does not apply")]
    NotForwardCompatible { observed: usize, target: usize },
    #[error("hybrid inference needs the last variable to be a target")]
    LastVariableObserved,
    #[error("given initial values have length {got}, expected {expected}")]
    InitLength { expected: usize, got: usize },
}

/// Starting point for the target values.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Init {
    /// The feedforward sweep of [`init_targets`].
    Feedforward,
    /// Independent standard normal draws.
    Random { seed: u64 },
    /// Target entries of a full-length vector.
    Given(Vec<f64>),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct InferenceOptions {
    pub max_iters: usize,
    pub lr: f64,
    /// Stop once the best loss improves by less than this fraction over
    /// [`STOP_WINDOW`] iterations.
    pub rel_tol: f64,
    pub init: Init,
}

impl Default for InferenceOptions {
    fn default() -> Self {
        Self {
            max_iters: 500,
            lr: 0.05,
            rel_tol: 1e-6,
            init: Init::Feedforward,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Mode {
    Forward,
    Hybrid,
    General,
}

impl Mode {
    pub fn name(self) -> &'static str {
        match self {
            Mode::Forward => "forward",
            Mode::Hybrid => "hybrid",
            Mode::General => "general",
        }
    }
}

/// Requested mode; `Auto` picks the cheapest applicable one.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ModeChoice {
    #[default]
    Auto,
    Forward,
    Hybrid,
    General,
}

#[derive(Debug, Clone, PartialEq)]
pub struct InferenceResult {
    /// Observed values and estimates together.
    pub values: Vec<f64>,
    pub targets: Vec<usize>,
    /// Joint NLL at `values`.
    pub final_loss: f64,
    pub iterations_used: usize,
    pub converged: bool,
    pub mode: Mode,
}

impl InferenceResult {
    pub fn estimates(&self) -> Vec<(usize, f64)> {
        self.targets.iter().map(|&t| (t, self.values[t])).collect()
    }

    pub fn target_values(&self) -> Vec<f64> {
        self.targets.iter().map(|&t| self.values[t]).collect()
    }
}

/// Fills every target, in topological order, with its conditional mean
/// given the observed and already filled parents.
pub fn init_targets(model: &BinModel, x: &[f64], observed: &Assignment) -> Result<Assignment, InferenceError> {
    let mut out = observed.clone();
    for n in 0..model.num_vars() {
        if !out.is_observed(n) {
            let (mu, _) = model.conditional_moments(n, x, &out)?;
            out.set(n, mu)?;
        }
    }
    Ok(out)
}

/// Joint NLL of a set of terms as a function of the target values.
pub(crate) struct ValueObjective {
    tape: Tape,
    leaves: Vec<Var>,
    root: Var,
}

impl ValueObjective {
    /// `values` must be complete; entries at `targets` become variables.
    pub(crate) fn new(model: &BinModel, x: &[f64], values: &[f64], targets: &[usize], terms: &[usize]) -> Self {
        let mut tape = Tape::new();
        let bound = BoundModel::bind(&mut tape, model, false);
        let xv = tape.constant(x.to_vec());
        let mut leaves = Vec::with_capacity(targets.len());
        let vars: Vec<Var> = values
            .iter()
            .enumerate()
            .map(|(n, &v)| {
                if targets.contains(&n) {
                    let l = tape.scalar_leaf(v);
                    leaves.push(l);
                    l
                } else {
                    tape.scalar(v)
                }
            })
            .collect();
        let root = bound.nll(&mut tape, xv, &vars, terms.iter().copied());
        Self { tape, leaves, root }
    }

    /// Loss and gradient at target values `t`.
    pub(crate) fn eval(&mut self, t: &[f64], grad: &mut [f64]) -> Result<f64, AutodiffError> {
        for (&l, &v) in self.leaves.iter().zip(t) {
            self.tape.set_leaf(l, &[v])?;
        }
        self.tape.evaluate()?;
        let g = self.tape.backward(self.root)?;
        for (o, &l) in grad.iter_mut().zip(&self.leaves) {
            *o = g.wrt(l)[0];
        }
        Ok(self.tape.scalar_value(self.root))
    }
}

fn starting_values(model: &BinModel, x: &[f64], observed: &Assignment, init: &Init) -> Result<Vec<f64>, InferenceError> {
    let mut values = init_targets(model, x, observed)?.values().to_vec();
    match init {
        Init::Feedforward => {}
        Init::Random { seed } => {
            let mut rng = ChaCha8Rng::seed_from_u64(*seed);
            for n in observed.unobserved_indices() {
                values[n] = StandardNormal.sample(&mut rng);
            }
        }
        Init::Given(given) => {
            if given.len() != values.len() {
                return Err(InferenceError::InitLength {
                    expected: values.len(),
                    got: given.len(),
                });
            }
            for n in observed.unobserved_indices() {
                if !given[n].is_finite() {
                    return Err(ModelError::NonFinite(n).into());
                }
                values[n] = given[n];
            }
        }
    }
    Ok(values)
}

struct Descent {
    best: Vec<f64>,
    iterations: usize,
    converged: bool,
}

/// Adam on the target values; keeps the best iterate.
fn descend(
    model: &BinModel,
    x: &[f64],
    values: &[f64],
    targets: &[usize],
    terms: &[usize],
    opts: &InferenceOptions,
) -> Result<Descent, InferenceError> {
    let mut obj = ValueObjective::new(model, x, values, targets, terms);
    let mut t: Vec<f64> = targets.iter().map(|&n| values[n]).collect();
    let mut grad = vec![0.0; t.len()];
    let mut adam = Adam::new(t.len());
    let mut loss = match obj.eval(&t, &mut grad) {
        Ok(l) if l.is_finite() => l,
        _ => return Err(InferenceError::NonFiniteInitialLoss),
    };
    let mut best = t.clone();
    let mut best_loss = loss;
    // history[i] = best loss after i steps
    let mut history = vec![best_loss];
    let mut iterations = 0;
    let mut converged = false;
    while iterations < opts.max_iters {
        if !grad.iter().all(|g| g.is_finite()) || adam.step(&mut t, &grad, opts.lr).is_err() {
            break;
        }
        iterations += 1;
        loss = match obj.eval(&t, &mut grad) {
            Ok(l) if l.is_finite() => l,
            _ => break,
        };
        if loss < best_loss {
            best_loss = loss;
            best.copy_from_slice(&t);
        }
        history.push(best_loss);
        if iterations >= STOP_WINDOW {
            let before = history[iterations - STOP_WINDOW];
            if before - best_loss < opts.rel_tol * before.abs().max(f64::MIN_POSITIVE) {
                converged = true;
                break;
            }
        }
    }
    let mut full = values.to_vec();
    for (&n, &v) in targets.iter().zip(&best) {
        full[n] = v;
    }
    Ok(Descent {
        best: full,
        iterations,
        converged,
    })
}

/// MAP estimate of all unobserved variables by gradient descent on the
/// joint NLL, started from `opts.init`. Returns the best iterate seen.
pub fn general_infer(
    model: &BinModel,
    x: &[f64],
    observed: &Assignment,
    opts: &InferenceOptions,
) -> Result<InferenceResult, InferenceError> {
    let targets = observed.unobserved_indices();
    if targets.is_empty() {
        return Err(InferenceError::NoTargets);
    }
    let start = starting_values(model, x, observed, &opts.init)?;
    let terms: Vec<usize> = (0..model.num_vars()).collect();
    let d = descend(model, x, &start, &targets, &terms, opts)?;
    // Recorded and plain evaluation can differ in the last bits; report the
    // plain loss and never a point worse than the start under it.
    let start_loss = model.joint_nll(x, &start)?;
    let best_loss = model.joint_nll(x, &d.best)?;
    let (values, final_loss) = if best_loss <= start_loss {
        (d.best, best_loss)
    } else {
        (start, start_loss)
    };
    Ok(InferenceResult {
        values,
        targets,
        final_loss,
        iterations_used: d.iterations,
        converged: d.converged,
        mode: Mode::General,
    })
}

/// Every variable reachable backwards from `n` through parent links.
fn ancestors(model: &BinModel, n: usize) -> Vec<bool> {
    let mut seen = vec![false; model.num_vars()];
    let mut stack: Vec<usize> = model.parents(n).to_vec();
    while let Some(p) = stack.pop() {
        if !std::mem::replace(&mut seen[p], true) {
            stack.extend_from_slice(model.parents(p));
        }
    }
    seen
}

/// `Ok` when no observed variable has a target ancestor, so one
/// topological sweep of conditional means uses all the evidence.
pub fn check_forward_compatible(model: &BinModel, observed: &Assignment) -> Result<(), InferenceError> {
    for n in observed.observed_indices() {
        let anc = ancestors(model, n);
        if let Some(t) = (0..n).find(|&t| anc[t] && !observed.is_observed(t)) {
            return Err(InferenceError::NotForwardCompatible { observed: n, target: t });
        }
    }
    Ok(())
}

/// One sweep of conditional means; no iterations.
pub fn forward_predict(model: &BinModel, x: &[f64], observed: &Assignment) -> Result<InferenceResult, InferenceError> {
    check_forward_compatible(model, observed)?;
    let filled = init_targets(model, x, observed)?;
    let values = filled.values().to_vec();
    Ok(InferenceResult {
        final_loss: model.joint_nll(x, &values)?,
        values,
        targets: observed.unobserved_indices(),
        iterations_used: 0,
        converged: true,
        mode: Mode::Forward,
    })
}

/// Gradient descent for the targets before the last observed variable `q`
/// using the NLL terms up to `q`, then a forward sweep for the targets
/// after `q`.
pub fn hybrid_infer(
    model: &BinModel,
    x: &[f64],
    observed: &Assignment,
    opts: &InferenceOptions,
) -> Result<InferenceResult, InferenceError> {
    let n_vars = model.num_vars();
    if n_vars == 0 || observed.is_observed(n_vars - 1) {
        return Err(InferenceError::LastVariableObserved);
    }
    let targets = observed.unobserved_indices();
    let Some(q) = observed.observed_indices().last().copied() else {
        return forward_predict(model, x, observed).map(|r| InferenceResult {
            mode: Mode::Hybrid,
            ..r
        });
    };
    let early: Vec<usize> = targets.iter().copied().filter(|&t| t < q).collect();
    let mut current = observed.clone();
    let mut iterations = 0;
    let mut converged = true;
    if !early.is_empty() {
        // Targets after q cannot enter terms up to q, so they are left unset.
        let mut prefix = Assignment::empty(q + 1);
        for n in 0..=q {
            if let Some(v) = observed.get(n) {
                prefix.set(n, v)?;
            }
        }
        let sub = model.prefix_model(q + 1)?;
        let start = starting_values(&sub, x, &prefix, &opts.init)?;
        let terms: Vec<usize> = (0..=q).collect();
        let d = descend(&sub, x, &start, &early, &terms, opts)?;
        for &t in &early {
            current.set(t, d.best[t])?;
        }
        iterations = d.iterations;
        converged = d.converged;
    }
    let filled = init_targets(model, x, &current)?;
    let values = filled.values().to_vec();
    Ok(InferenceResult {
        final_loss: model.joint_nll(x, &values)?,
        values,
        targets,
        iterations_used: iterations,
        converged,
        mode: Mode::Hybrid,
    })
}

/// The mode `Auto` resolves to: forward when applicable, hybrid when the
/// last variable is a target, general otherwise.
pub fn select_mode(model: &BinModel, observed: &Assignment) -> Mode {
    if check_forward_compatible(model, observed).is_ok() {
        Mode::Forward
    } else if !observed.is_observed(model.num_vars() - 1) {
        Mode::Hybrid
    } else {
        Mode::General
    }
}

pub fn infer(
    model: &BinModel,
    x: &[f64],
    observed: &Assignment,
    mode: ModeChoice,
    opts: &InferenceOptions,
) -> Result<InferenceResult, InferenceError> {
    if observed.unobserved_indices().is_empty() {
        return Err(InferenceError::NoTargets);
    }
    let mode = match mode {
        ModeChoice::Auto => select_mode(model, observed),
        ModeChoice::Forward => Mode::Forward,
        ModeChoice::Hybrid => Mode::Hybrid,
        ModeChoice::General => Mode::General,
    };
    match mode {
        Mode::Forward => forward_predict(model, x, observed),
        Mode::Hybrid => hybrid_infer(model, x, observed, opts),
        Mode::General => general_infer(model, x, observed, opts),
    }
}
