//! Whole-pipeline benchmarks: one distillation step (the unrolled
//! second-order core) and one evaluation repeat. As with `kernels`,
//! compare `--no-default-features` against the default rayon build.

use criterion::{criterion_group, criterion_main, Criterion};
use std::hint::black_box;

use nsd_core::dataset::{load_dataset, BlobsSpec, DataSource, Dataset};
use nsd_core::decomposition::{BudgetSpec, LabelRule};
use nsd_core::evalharness::{evaluate_synthetic, EvalTrainConfig};
use nsd_core::matching::{distill_step, train_expert, DistillConfig, ExpertBank, ExpertConfig};
use nsd_core::models::ModelSpec;
use nsd_core::rng::SeedSplitter;
use nsd_core::transforms::{init_distill_state, TransformKind, TransformTag};

fn setup() -> (Dataset, Dataset, ExpertBank, ModelSpec, BudgetSpec) {
    let (train, test) = load_dataset(&DataSource::Blobs(BlobsSpec::default()), true).unwrap();
    let model = ModelSpec::conv_net(2, 8, train.image_shape(), 2);
    let cfg = ExpertConfig { epochs: 4, snapshot_stride: 1, batch_size: 200, ..Default::default() };
    let traj = train_expert(&train, &model, &cfg, 1).unwrap();
    let bank = ExpertBank::new(vec![traj], train.fingerprint.clone()).unwrap();
    let budget = BudgetSpec::new(2, 1, train.image_shape()).unwrap();
    (train, test, bank, model, budget)
}

fn bench_pipeline(c: &mut Criterion) {
    let (train, test, bank, model, budget) = setup();
    let split = SeedSplitter::new(3);
    let state = init_distill_state(
        &budget,
        &TransformKind::new(TransformTag::Random),
        2,
        1,
        None,
        None,
        LabelRule::PerClassTensors,
        &split,
        Some(&train),
    )
    .unwrap();

    let cfg = DistillConfig {
        inner_steps: 5,
        batch_size: 16,
        real_batch_size: 16,
        iterations: 1,
        checkpoint_interval: 0,
        ..Default::default()
    };
    c.bench_function("distill_step_n5_b16", |b| {
        b.iter(|| {
            let mut s = state.clone();
            black_box(distill_step(&mut s, &bank, &train, &cfg, &split, 1).unwrap());
        })
    });

    let eval_cfg = EvalTrainConfig { epochs: 20, repeats: 2, augment: false, ..Default::default() };
    c.bench_function("evaluate_2_repeats_20_epochs", |b| {
        b.iter(|| {
            black_box(
                evaluate_synthetic(&state, &test, &model, &eval_cfg, &split, "bench").unwrap(),
            );
        })
    });
}

criterion_group! {
    name = benches;
    config = Criterion::default().sample_size(10);
    targets = bench_pipeline
}
criterion_main!(benches);
