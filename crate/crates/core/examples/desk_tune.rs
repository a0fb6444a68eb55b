//! Scratch harness for tuning the desk task: compares spectral
//! distillation, raw-pixel distillation, and the random-subset baseline
//! across seeds and prints medians with timings.

use std::time::Instant;

use nsd_core::dataset::{load_dataset, BlobsSpec, DataSource};
use nsd_core::decomposition::{raw_pixel_state, BudgetSpec};
use nsd_core::diffmath::NdArray;
use nsd_core::evalharness::{evaluate_synthetic, random_subset_baseline, EvalTrainConfig};
use nsd_core::matching::{distill, train_expert, DistillConfig, ExpertBank, ExpertConfig};
use nsd_core::models::ModelSpec;
use nsd_core::rng::SeedSplitter;
use nsd_core::transforms::{init_distill_state, TransformKind, TransformTag};

fn median(mut v: Vec<f64>) -> f64 {
    v.sort_by(|a, b| a.partial_cmp(b).unwrap());
    v[v.len() / 2]
}

fn arg<T: std::str::FromStr>(n: usize, default: T) -> T {
    std::env::args().nth(n).and_then(|s| s.parse().ok()).unwrap_or(default)
}

fn main() {
    let outer_lr: f64 = arg(1, 10.0);
    let iterations: u64 = arg(2, 300);
    let noise: f64 = arg(3, 0.25);
    let inner_steps: usize = arg(4, 5);
    let gamma: f64 = arg(5, 0.1);
    let inner_lr: f64 = arg(6, 0.02);
    let span: usize = arg(7, 2);
    let seeds: u64 = arg(8, 5);
    println!(
        "outer_lr={outer_lr} iters={iterations} noise={noise} N={inner_steps} gamma={gamma} \
         alpha={inner_lr} M={span} seeds={seeds}"
    );

    let t0 = Instant::now();
    let blob_spec = BlobsSpec { noise, ..Default::default() };
    let (train, test) = load_dataset(&DataSource::Blobs(blob_spec), true).unwrap();
    let budget = BudgetSpec::new(2, 1, train.image_shape()).unwrap();
    let model = ModelSpec::conv_net(2, 8, train.image_shape(), 2);

    // Short minibatch trajectories: every segment is early-phase, where
    // matching carries signal (late micro-segments are untrackable).
    let expert_cfg =
        ExpertConfig { epochs: 8, snapshot_stride: 1, batch_size: 16, ..Default::default() };
    let bank_split = SeedSplitter::new(1000);
    let trajectories: Vec<_> = (0..2)
        .map(|k| {
            use rand::Rng;
            let seed = bank_split.indexed("expert", k).gen::<u64>();
            train_expert(&train, &model, &expert_cfg, seed).unwrap()
        })
        .collect();
    let bank = ExpertBank::new(trajectories, train.fingerprint.clone()).unwrap();
    println!("experts trained in {:.1?}", t0.elapsed());

    let eval_cfg = EvalTrainConfig { epochs: 200, augment: false, ..Default::default() };
    let distill_cfg = DistillConfig {
        inner_steps,
        expert_span: span,
        inner_lr,
        guided_weight: gamma,
        outer_lr,
        outer_momentum: 0.9,
        iterations,
        batch_size: 16,
        real_batch_size: 16,
        checkpoint_interval: 0,
        ..Default::default()
    };

    let mut spectral = Vec::new();
    let mut raw = Vec::new();
    let mut subset = Vec::new();
    for seed in 0..seeds {
        let split = SeedSplitter::new(seed);

        let t = Instant::now();
        let mut state = init_distill_state(
            &budget,
            &TransformKind::new(TransformTag::Random),
            2,
            1,
            None,
            None,
            nsd_core::decomposition::LabelRule::PerClassTensors,
            &split,
            Some(&train),
        )
        .unwrap();
        let log =
            distill(&mut state, &bank, &train, &distill_cfg, &split, |_| {}, |_| Ok(())).unwrap();
        let rep = evaluate_synthetic(&state, &test, &model, &eval_cfg, &split, "d").unwrap();
        spectral.push(rep.mean);
        println!(
            "seed {seed} spectral: acc {:.3} ({:.1?}) first {:.3} last {:.3}",
            rep.mean,
            t.elapsed(),
            log.first().map(|m| m.combined).unwrap_or(f64::NAN),
            log.last().map(|m| m.combined).unwrap_or(f64::NAN),
        );

        let t = Instant::now();
        let mut rng = split.stream("state/raw");
        let mut raw_state =
            raw_pixel_state(&budget, |shape| NdArray::normal(shape, 1.0, &mut rng)).unwrap();
        let mut raw_cfg = distill_cfg.clone();
        raw_cfg.guided_weight = 0.0;
        let log =
            distill(&mut raw_state, &bank, &train, &raw_cfg, &split, |_| {}, |_| Ok(())).unwrap();
        let rep = evaluate_synthetic(&raw_state, &test, &model, &eval_cfg, &split, "d").unwrap();
        raw.push(rep.mean);
        println!(
            "seed {seed} raw: acc {:.3} ({:.1?}) first {:.3} last {:.3}",
            rep.mean,
            t.elapsed(),
            log.first().map(|m| m.combined).unwrap_or(f64::NAN),
            log.last().map(|m| m.combined).unwrap_or(f64::NAN),
        );

        let rep =
            random_subset_baseline(&train, &test, &budget, &model, &eval_cfg, &split, "d").unwrap();
        subset.push(rep.mean);
        println!("seed {seed} subset: acc {:.3}", rep.mean);
    }
    println!(
        "medians: spectral {:.3} raw {:.3} subset {:.3} (total {:.1?})",
        median(spectral),
        median(raw),
        median(subset),
        t0.elapsed()
    );
}
