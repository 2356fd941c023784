use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use super::{Dataset, Split};
use crate::model::{chain_factorization, VariableKind, VariableSpec};

/// Six-point line `v_2 = 3 v_1 + 1 + ε` with `v_1 ~ U(0, 1)`,
/// `ε ~ N(0, 1)` and no features.
pub fn gen_toy_line(m: usize, seed: u64) -> Dataset {
    gen_toy_line_with_noise(m, seed, 1.0)
}

/// [`gen_toy_line`] with noise standard deviation `noise_std`.
pub fn gen_toy_line_with_noise(m: usize, seed: u64, noise_std: f64) -> Dataset {
    assert!(m >= 2, "toy line needs at least two points");
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let v = (0..m)
        .map(|_| {
            let v1: f64 = rng.gen_range(0.0..1.0);
            let eps: f64 = rng.sample(StandardNormal);
            vec![v1, 3.0 * v1 + 1.0 + noise_std * eps]
        })
        .collect();
    Dataset::new(vec![Vec::new(); m], v, chain_factorization(&["v1", "v2"]), Split::all_train(m))
        .expect("consistent shapes by construction")
}

/// Linear-Gaussian structural chain given features `x ~ N(0, I)`:
/// `v_n = weights[n] · [x; v_0 .. v_{n−1}] + offsets[n] + noise_std[n] · ε`.
#[derive(Debug, Clone, PartialEq)]
pub struct GaussianChain {
    pub feature_dim: usize,
    pub weights: Vec<Vec<f64>>,
    pub offsets: Vec<f64>,
    pub noise_std: Vec<f64>,
}

impl GaussianChain {
    pub const DEFAULT_FEATURE_DIM: usize = 4;

    pub fn random<R: Rng>(n_vars: usize, feature_dim: usize, rng: &mut R) -> Self {
        let weights = (0..n_vars)
            .map(|n| {
                let mut w: Vec<f64> = (0..feature_dim).map(|_| rng.gen_range(-1.0..1.0)).collect();
                w.extend((0..n).map(|_| rng.gen_range(-0.7..0.7)));
                w
            })
            .collect();
        Self {
            feature_dim,
            weights,
            offsets: (0..n_vars).map(|_| rng.gen_range(-0.5..0.5)).collect(),
            noise_std: (0..n_vars).map(|_| rng.gen_range(0.3..0.8)).collect(),
        }
    }

    pub fn num_vars(&self) -> usize {
        self.weights.len()
    }

    /// Coefficient of `v_j` in the structural mean of `v_n`, `j < n`.
    pub fn parent_weight(&self, n: usize, j: usize) -> f64 {
        self.weights[n][self.feature_dim + j]
    }

    /// Mean of `v_n` given `x` and the earlier values in `v`.
    pub fn structural_mean(&self, n: usize, x: &[f64], v: &[f64]) -> f64 {
        let w = &self.weights[n];
        let mut m = self.offsets[n];
        m += w[..self.feature_dim].iter().zip(x).map(|(a, b)| a * b).sum::<f64>();
        m += w[self.feature_dim..].iter().zip(v).map(|(a, b)| a * b).sum::<f64>();
        m
    }

    pub fn sample_row<R: Rng>(&self, x: &[f64], rng: &mut R) -> Vec<f64> {
        let mut v = Vec::with_capacity(self.num_vars());
        for n in 0..self.num_vars() {
            let eps: f64 = rng.sample(StandardNormal);
            v.push(self.structural_mean(n, x, &v) + self.noise_std[n] * eps);
        }
        v
    }

    /// Mean vector and covariance matrix of `V` given `x`.
    pub fn moments_given_x(&self, x: &[f64]) -> (Vec<f64>, Vec<Vec<f64>>) {
        let n_vars = self.num_vars();
        let mut mean = Vec::with_capacity(n_vars);
        for n in 0..n_vars {
            let m = self.structural_mean(n, x, &mean);
            mean.push(m);
        }
        let mut cov = vec![vec![0.0; n_vars]; n_vars];
        for n in 0..n_vars {
            for m in 0..n {
                let c: f64 = (0..n).map(|j| self.parent_weight(n, j) * cov[j][m]).sum();
                cov[n][m] = c;
                cov[m][n] = c;
            }
            let var: f64 = (0..n).map(|j| self.parent_weight(n, j) * cov[j][n]).sum();
            cov[n][n] = var + self.noise_std[n] * self.noise_std[n];
        }
        (mean, cov)
    }

    pub fn generate(&self, m: usize, seed: u64) -> Dataset {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut xs = Vec::with_capacity(m);
        let mut vs = Vec::with_capacity(m);
        for _ in 0..m {
            let x: Vec<f64> = (0..self.feature_dim).map(|_| rng.sample(StandardNormal)).collect();
            vs.push(self.sample_row(&x, &mut rng));
            xs.push(x);
        }
        let names: Vec<String> = (1..=self.num_vars()).map(|i| format!("v{i}")).collect();
        Dataset::new(xs, vs, chain_factorization(&names), Split::seeded(m, seed))
            .expect("consistent shapes by construction")
    }
}

/// `m` rows from a random [`GaussianChain`] with
/// [`GaussianChain::DEFAULT_FEATURE_DIM`] features. The chain's
/// coefficients are returned for use as an oracle.
pub fn gen_gaussian_chain(n_vars: usize, m: usize, seed: u64) -> (Dataset, GaussianChain) {
    assert!(n_vars >= 2, "a chain needs at least two variables");
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x9e37_79b9_7f4a_7c15);
    let chain = GaussianChain::random(n_vars, GaussianChain::DEFAULT_FEATURE_DIM, &mut rng);
    (chain.generate(m, seed), chain)
}

/// Tabular stand-in for the sleep-study setting: dense features and
/// correlated latent scores binarized at their training-split means.
///
/// Score `n` is
/// `feature_scale · a_n·x / √D + coupling · l_n·h + noise · ε`, with
/// `h ~ N(0, I_3)` shared factors that the features do not reveal and
/// `a_n, l_n` fixed by the seed.
#[derive(Debug, Clone, PartialEq)]
pub struct ShhsSurrogate {
    pub feature_dim: usize,
    pub n_scores: usize,
    pub feature_scale: f64,
    pub coupling: f64,
    pub noise: f64,
}

impl Default for ShhsSurrogate {
    fn default() -> Self {
        Self {
            feature_dim: 16,
            n_scores: 8,
            feature_scale: 1.0,
            coupling: 1.0,
            noise: 0.6,
        }
    }
}

const SHARED_FACTORS: usize = 3;

impl ShhsSurrogate {
    pub fn generate(&self, m: usize, seed: u64) -> Dataset {
        assert!(m >= 2, "need at least two rows");
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let d = self.feature_dim;
        let a: Vec<Vec<f64>> = (0..self.n_scores)
            .map(|_| (0..d).map(|_| rng.sample(StandardNormal)).collect())
            .collect();
        let l: Vec<Vec<f64>> = (0..self.n_scores)
            .map(|_| (0..SHARED_FACTORS).map(|_| rng.gen_range(-1.0..1.0)).collect())
            .collect();
        let norm = (d.max(1) as f64).sqrt();
        let mut xs = Vec::with_capacity(m);
        let mut zs = Vec::with_capacity(m);
        for _ in 0..m {
            let x: Vec<f64> = (0..d).map(|_| rng.sample(StandardNormal)).collect();
            let h: Vec<f64> = (0..SHARED_FACTORS).map(|_| rng.sample(StandardNormal)).collect();
            let z: Vec<f64> = (0..self.n_scores)
                .map(|n| {
                    let fx: f64 = a[n].iter().zip(&x).map(|(a, x)| a * x).sum::<f64>() / norm;
                    let fh: f64 = l[n].iter().zip(&h).map(|(l, h)| l * h).sum();
                    let eps: f64 = rng.sample(StandardNormal);
                    self.feature_scale * fx + self.coupling * fh + self.noise * eps
                })
                .collect();
            xs.push(x);
            zs.push(z);
        }
        let split = Split::seeded(m, seed);
        let thresholds: Vec<f64> = (0..self.n_scores)
            .map(|n| split.train.iter().map(|&i| zs[i][n]).sum::<f64>() / split.train.len() as f64)
            .collect();
        let v = zs
            .iter()
            .map(|z| z.iter().zip(&thresholds).map(|(z, t)| if z >= t { 1.0 } else { 0.0 }).collect())
            .collect();
        let variables: Vec<VariableSpec> = chain_factorization(&(1..=self.n_scores).map(|i| format!("v{i}")).collect::<Vec<_>>())
            .into_iter()
            .map(|v| v.with_kind(VariableKind::BinaryAsContinuous))
            .collect();
        Dataset::new(xs, v, variables, split).expect("consistent shapes by construction")
    }
}

/// [`ShhsSurrogate::default`] with `m` rows.
pub fn gen_shhs_surrogate(m: usize, seed: u64) -> Dataset {
    ShhsSurrogate::default().generate(m, seed)
}
