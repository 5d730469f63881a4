use criterion::{criterion_group, criterion_main, BatchSize, Criterion};
use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use riskfuse_core::bnn::{BnnConfig, BnnModel};
use riskfuse_core::calibration::fit_temperature;
use riskfuse_core::explain::tree_shap;
use riskfuse_core::gbdt::{fit_tree, GbdtData, GbdtModel, GbdtParams, TreeParams};
use riskfuse_core::metrics::{auc_pr, auc_roc};
use std::hint::black_box;

fn problem(n: usize, d: usize, seed: u64) -> (Array2<f64>, Vec<u8>) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let x = Array2::from_shape_fn((n, d), |_| rng.random_range(-2.0..2.0));
    let y = (0..n)
        .map(|i| u8::from(x[[i, 0]] - 0.5 * x[[i, 1]] + rng.random_range(-1.0..1.0) > 0.0))
        .collect();
    (x, y)
}

fn metrics(c: &mut Criterion) {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let s: Vec<f64> = (0..20_000).map(|_| rng.random()).collect();
    let y: Vec<u8> = s
        .iter()
        .map(|&p| u8::from(rng.random::<f64>() < p))
        .collect();
    c.bench_function("auc_roc_20k", |b| {
        b.iter(|| auc_roc(black_box(&s), &y).unwrap())
    });
    c.bench_function("auc_pr_20k", |b| {
        b.iter(|| auc_pr(black_box(&s), &y).unwrap())
    });
    c.bench_function("fit_temperature_20k", |b| {
        b.iter(|| fit_temperature(black_box(&s), &y).unwrap())
    });
}

fn trees(c: &mut Criterion) {
    let (x, y) = problem(10_000, 20, 2);
    let grad: Vec<f64> = y.iter().map(|&v| 0.5 - f64::from(v)).collect();
    let hess = vec![0.25; y.len()];
    let params = TreeParams {
        max_depth: 4,
        min_child_rows: 20,
        lambda_reg: 1.0,
        gamma: 0.0,
    };
    c.bench_function("fit_tree_10k_x20", |b| {
        b.iter(|| fit_tree(&grad, &hess, x.view(), params).unwrap())
    });

    let groups: Vec<String> = (0..y.len())
        .map(|i| if i % 2 == 0 { "A" } else { "B" }.to_string())
        .collect();
    let data = GbdtData {
        x: x.view(),
        y: &y,
        groups: &groups,
    };
    let model = GbdtModel::fit(
        &data,
        None,
        &GbdtParams {
            n_rounds: 50,
            ..GbdtParams::default().unconstrained()
        },
    )
    .unwrap();
    let row = x.row(0).to_vec();
    c.bench_function("tree_shap_50_trees", |b| {
        b.iter(|| tree_shap(&model, black_box(&row)).unwrap())
    });
}

fn bnn(c: &mut Criterion) {
    let (x, y) = problem(256, 20, 3);
    let cfg = BnnConfig {
        hidden: vec![64, 64],
        ..BnnConfig::default()
    };
    let model = BnnModel::new(20, &cfg).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    c.bench_function("bnn_elbo_batch256", |b| {
        b.iter_batched(
            || {
                vec![(0..model.n_params())
                    .map(|_| rng.random_range(-1.0..1.0))
                    .collect::<Vec<f64>>()]
            },
            |noise| model.elbo_with_noise(x.view(), &y, 20_000, &noise).unwrap(),
            BatchSize::SmallInput,
        )
    });
    c.bench_function("bnn_predict_mc_256x30", |b| {
        b.iter(|| model.predict_mc(x.view(), 30, 5).unwrap())
    });
}

criterion_group!(benches, metrics, trees, bnn);
criterion_main!(benches);
