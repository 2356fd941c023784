use crate::autodiff::Tape;
use crate::model::{BinModel, BoundModel, ModelError};

use super::{Samples, TrainError};

pub(super) struct ChunkGradient {
    /// Effective-parameter gradient summed over the chunk.
    pub grad: Vec<f64>,
    /// Summed joint NLL of the observed values.
    pub joint: f64,
    /// Summed `L_j` per subset.
    pub cl: Vec<f64>,
}

/// Gradient of the summed per-sample objective over the batch positions in
/// `chunk`. The inner-loop estimates in `hats` enter as constants, and so
/// does the marginal term unless `marginal_gradient` is set.
pub(super) fn chunk_gradient(
    model: &BinModel,
    train: Samples,
    batch: &[usize],
    chunk: &[usize],
    hats: &[Vec<(Vec<f64>, bool)>],
    prefixes: &[usize],
    lambda_c: f64,
    marginal_gradient: bool,
) -> Result<ChunkGradient, TrainError> {
    let mut tape = Tape::new();
    let bound = BoundModel::bind(&mut tape, model, true);
    let mut losses = Vec::with_capacity(chunk.len());
    let mut joints = Vec::with_capacity(chunk.len());
    let mut cls = Vec::with_capacity(chunk.len());
    for &pos in chunk {
        let i = batch[pos];
        let x = tape.constant(train.x[i].clone());
        let v: Vec<_> = train.v[i].iter().map(|&a| tape.scalar(a)).collect();
        let joint = bound.joint_nll(&mut tape, x, &v);
        joints.push(joint);
        let mut terms = vec![joint];
        let mut sample_cl = Vec::with_capacity(prefixes.len());
        for (j, &k) in prefixes.iter().enumerate() {
            let hat: Vec<_> = hats[j][pos].0.iter().map(|&a| tape.scalar(a)).collect();
            let completed = bound.joint_nll(&mut tape, x, &hat);
            let marginal = if marginal_gradient {
                bound.marginal_nll(&mut tape, x, &v, k)
            } else {
                let subset: Vec<usize> = (0..k).collect();
                tape.scalar(model.marginal_nll(&train.x[i], &train.v[i], &subset)?)
            };
            let l = tape.sub(completed, marginal);
            sample_cl.push(l);
            terms.push(tape.scale(l, lambda_c));
        }
        cls.push(sample_cl);
        losses.push(tape.add_all(&terms));
    }
    let root = tape.add_all(&losses);
    let grads = tape.backward(root)?;
    let mut grad = vec![0.0; model.grad_len()];
    bound.accumulate(&grads, &mut grad);
    let joint = joints.iter().map(|&j| tape.scalar_value(j)).sum();
    let cl = (0..prefixes.len())
        .map(|j| cls.iter().map(|s| tape.scalar_value(s[j])).sum())
        .collect();
    Ok(ChunkGradient { grad, joint, cl })
}

/// Joint NLL of `v` and the composite terms
/// `L_j = L(V̂_j) − L_marg(V_{−S_j}; S_j)` for the prefix lengths `k_j`,
/// evaluated without a tape.
pub fn composite_terms(
    model: &BinModel,
    x: &[f64],
    v: &[f64],
    hats: &[Vec<f64>],
    prefixes: &[usize],
) -> Result<(f64, Vec<f64>), ModelError> {
    assert_eq!(hats.len(), prefixes.len(), "one estimate per subset");
    let joint = model.joint_nll(x, v)?;
    let terms = prefixes
        .iter()
        .zip(hats)
        .map(|(&k, hat)| {
            let subset: Vec<usize> = (0..k).collect();
            Ok(model.joint_nll(x, hat)? - model.marginal_nll(x, v, &subset)?)
        })
        .collect::<Result<Vec<_>, ModelError>>()?;
    Ok((joint, terms))
}

/// Per-sample composite objective `L(V) + λ_c Σ_j L_j`.
pub fn composite_loss(
    model: &BinModel,
    x: &[f64],
    v: &[f64],
    hats: &[Vec<f64>],
    prefixes: &[usize],
    lambda_c: f64,
) -> Result<f64, ModelError> {
    let (joint, terms) = composite_terms(model, x, v, hats, prefixes)?;
    Ok(joint + lambda_c * terms.iter().sum::<f64>())
}
