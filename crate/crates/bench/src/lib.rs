//! Fixtures shared by the benchmarks.

use cbin_core::data::gen_gaussian_chain;
use cbin_core::model::chain_factorization;
use cbin_core::{Activation, Architecture, BinModel, Prepared};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// A fully connected chain over `n_vars` variables with `hidden` units per
/// layer in two ReLU layers.
pub fn chain_model(n_vars: usize, feature_dim: usize, hidden: usize, seed: u64) -> BinModel {
    let names: Vec<String> = (1..=n_vars).map(|i| format!("v{i}")).collect();
    let arch = Architecture {
        hidden: vec![hidden, hidden],
        activation: Activation::Relu,
    };
    BinModel::new(feature_dim, chain_factorization(&names), &arch, &mut ChaCha8Rng::seed_from_u64(seed)).expect("valid model")
}

/// `(x, v)` drawn uniformly from `[-1, 1]`.
pub fn random_point(model: &BinModel, seed: u64) -> (Vec<f64>, Vec<f64>) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let x = (0..model.feature_dim()).map(|_| rng.gen_range(-1.0..1.0)).collect();
    let v = (0..model.num_vars()).map(|_| rng.gen_range(-1.0..1.0)).collect();
    (x, v)
}

/// Standardized Gaussian-chain data.
pub fn chain_data(n_vars: usize, rows: usize, seed: u64) -> Prepared {
    Prepared::new(&gen_gaussian_chain(n_vars, rows, seed).0)
}
