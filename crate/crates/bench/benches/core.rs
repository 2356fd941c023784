use std::hint::black_box;

use cbin_bench::{chain_data, chain_model, random_point};
use cbin_core::autodiff::Tape;
use cbin_core::inference::general_infer;
use cbin_core::model::BoundModel;
use cbin_core::npn::NpnLinearLayer;
use cbin_core::training::{cbin_train, Samples};
use cbin_core::{Architecture, Assignment, BinModel, InferenceOptions, TrainConfig};
use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn layer_forward(c: &mut Criterion) {
    let mut group = c.benchmark_group("npn_layer_forward");
    for width in [8, 64, 256] {
        let layer = NpnLinearLayer::init(width, width, 1e-3, &mut ChaCha8Rng::seed_from_u64(0));
        let input = cbin_core::npn::GaussianMoments::new(vec![0.3; width], vec![0.1; width]).unwrap();
        group.bench_with_input(BenchmarkId::from_parameter(width), &width, |b, _| b.iter(|| layer.forward(black_box(&input)).unwrap()));
    }
    group.finish();
}

fn joint_nll(c: &mut Criterion) {
    let model = chain_model(4, 8, 64, 1);
    let (x, v) = random_point(&model, 2);
    c.bench_function("joint_nll/plain", |b| b.iter(|| model.joint_nll(black_box(&x), black_box(&v)).unwrap()));
    c.bench_function("joint_nll/gradient", |b| {
        b.iter(|| {
            let mut t = Tape::new();
            let bound = BoundModel::bind(&mut t, &model, true);
            let xv = t.constant(x.clone());
            let vals: Vec<_> = v.iter().map(|&a| t.scalar_leaf(a)).collect();
            let root = bound.joint_nll(&mut t, xv, &vals);
            let g = t.backward(root).unwrap();
            model.pullback(&bound.gather(&g))
        })
    });
}

fn inference(c: &mut Criterion) {
    let model = chain_model(4, 8, 64, 3);
    let (x, v) = random_point(&model, 4);
    let a = Assignment::observe(&v, &[1, 3]).unwrap();
    let opts = InferenceOptions::default();
    c.bench_function("general_infer/4vars_2targets", |b| b.iter(|| general_infer(&model, black_box(&x), &a, &opts).unwrap()));
}

fn training_epoch(c: &mut Criterion) {
    let data = chain_data(3, 512, 5);
    let (tx, tv) = data.train();
    let init = BinModel::new(data.data.feature_dim(), data.data.variables.clone(), &Architecture::default(), &mut ChaCha8Rng::seed_from_u64(6)).unwrap();
    let mut group = c.benchmark_group("training_epoch");
    group.sample_size(10);
    for (name, lambda_c) in [("bin", 0.0), ("cbin", 0.1)] {
        let cfg = TrainConfig {
            lambda_c,
            warmup_epochs: 0,
            epochs: 1,
            ..Default::default()
        };
        group.bench_function(name, |b| {
            b.iter(|| {
                let mut m = init.clone();
                cbin_train(&mut m, Samples::new(&tx, &tv), None, &cfg).unwrap()
            })
        });
    }
    group.finish();
}

criterion_group!(benches, layer_forward, joint_nll, inference, training_epoch);
criterion_main!(benches);
