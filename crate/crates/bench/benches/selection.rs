use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use panelsel::data::split;
use panelsel::model::{init_params, joint_loss, Batch};
use panelsel::selection::{relaxed_permutation, straight_through_mask};
use panelsel::trainer::train;
use panelsel::{ModelConfig, Tape, Tensor, TrainConfig};
use panelsel_bench::recovery_dataset;

fn random(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> Tensor {
    Tensor::matrix(
        rows,
        cols,
        (0..rows * cols).map(|_| rng.gen_range(-1.0..1.0)).collect(),
    )
    .unwrap()
}

fn relaxed_perm(c: &mut Criterion) {
    let mut group = c.benchmark_group("relaxed_permutation");
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    for d in [100, 500, 1000] {
        let s: Vec<f64> = (0..d).map(|_| rng.gen_range(-1.0..1.0)).collect();
        group.bench_with_input(BenchmarkId::from_parameter(d), &s, |b, s| {
            b.iter(|| {
                let mut t = Tape::new();
                let v = t.leaf(Tensor::vector(s.clone()).requiring_grad());
                let pi = relaxed_permutation(&mut t, v, 0.5).unwrap();
                let total = t.sum(pi).unwrap();
                t.backward(total).unwrap();
            })
        });
    }
    group.finish();
}

fn matmul(c: &mut Criterion) {
    let mut group = c.benchmark_group("matmul_forward_backward");
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    for (n, k, m) in [(64, 100, 128), (64, 1000, 128)] {
        let (a, w) = (random(&mut rng, n, k), random(&mut rng, k, m));
        group.bench_function(format!("{n}x{k}x{m}"), |b| {
            b.iter(|| {
                let mut t = Tape::new();
                let a = t.constant(a.clone());
                let w = t.leaf(w.clone().requiring_grad());
                let y = t.matmul(a, w).unwrap();
                let total = t.sum(y).unwrap();
                t.backward(total).unwrap();
            })
        });
    }
    group.finish();
}

fn training(c: &mut Criterion) {
    let ds = split(&recovery_dataset(2000, 100, 0), 0);
    let tc = TrainConfig {
        epochs: 1,
        ..TrainConfig::default()
    };
    let mc = ModelConfig::with_defaults(
        100,
        8,
        ds.task_specs(),
        tc.total_steps(ds.train_rows().len()),
    )
    .unwrap();
    let params = init_params(&mc, &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
    let rows: Vec<usize> = ds.train_rows()[..tc.batch_size].to_vec();
    let batch = Batch {
        x: ds.x.select_rows(&rows),
        labels: ds.labels.iter().map(|c| c.gather(&rows)).collect(),
    };

    c.bench_function("training_step (batch 64, d 100)", |b| {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        b.iter(|| {
            let mut t = Tape::new();
            let vars = params.register(&mut t, true);
            let mask =
                straight_through_mask(&mut t, vars.scores, 1.0, 20, Some(&mut rng), 1.0).unwrap();
            let loss = joint_loss(&mut t, &batch, &vars, &mc, &mask).unwrap();
            t.backward(loss).unwrap();
        })
    });

    let mut group = c.benchmark_group("training_epoch");
    group.sample_size(10);
    group.bench_function("N 2000, d 100", |b| {
        b.iter(|| train(&ds, &mc, &tc).unwrap())
    });
    group.finish();
}

criterion_group!(benches, relaxed_perm, matmul, training);
criterion_main!(benches);
