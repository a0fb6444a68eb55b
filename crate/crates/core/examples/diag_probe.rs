use nsd_core::dataset::{load_dataset, BlobsSpec, DataSource};
use nsd_core::decomposition::{raw_pixel_state, BudgetSpec, LabelRule};
use nsd_core::diffmath::NdArray;
use nsd_core::evalharness::{evaluate_synthetic, EvalTrainConfig};
use nsd_core::matching::{distill, train_expert, DistillConfig, ExpertBank, ExpertConfig};
use nsd_core::models::{evaluate, ModelSpec};
use nsd_core::rng::SeedSplitter;
use nsd_core::transforms::{init_distill_state, TransformKind, TransformTag};

fn class_mean(images: &NdArray, labels: &[usize], class: usize) -> Vec<f64> {
    let tail: usize = images.shape()[1..].iter().product();
    let mut acc = vec![0.0; tail];
    let mut n = 0.0;
    for (i, &l) in labels.iter().enumerate() {
        if l == class {
            for p in 0..tail {
                acc[p] += images.data()[i * tail + p];
            }
            n += 1.0;
        }
    }
    for v in &mut acc {
        *v /= n;
    }
    acc
}

fn cosine(a: &[f64], b: &[f64]) -> f64 {
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let na: f64 = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb: f64 = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    dot / (na * nb + 1e-12)
}

fn main() {
    let alpha: f64 = std::env::args().nth(1).and_then(|s| s.parse().ok()).unwrap_or(0.02);
    let outer: f64 = std::env::args().nth(2).and_then(|s| s.parse().ok()).unwrap_or(10.0);
    let iters: u64 = std::env::args().nth(3).and_then(|s| s.parse().ok()).unwrap_or(300);
    let raw_arm: bool = std::env::args().nth(4).map(|s| s == "raw").unwrap_or(false);

    let (train, test) = load_dataset(&DataSource::Blobs(BlobsSpec::default()), true).unwrap();
    let budget = BudgetSpec::new(2, 1, train.image_shape()).unwrap();
    let model = ModelSpec::conv_net(2, 8, train.image_shape(), 2);
    let cfg = ExpertConfig { epochs: 20, snapshot_stride: 1, batch_size: 16, ..Default::default() };
    let split0 = SeedSplitter::new(1000);
    let trajs: Vec<_> = (0..2)
        .map(|k| {
            use rand::Rng;
            train_expert(&train, &model, &cfg, split0.indexed("expert", k).gen()).unwrap()
        })
        .collect();
    let bank = ExpertBank::new(trajs, train.fingerprint.clone()).unwrap();

    let split = SeedSplitter::new(0);
    let mut state = if raw_arm {
        let mut rng = split.stream("state/raw");
        raw_pixel_state(&budget, |shape| NdArray::uniform(shape, -0.5, 0.5, &mut rng)).unwrap()
    } else {
        init_distill_state(
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
        .unwrap()
    };
    let dcfg = DistillConfig {
        inner_steps: 5,
        inner_lr: alpha,
        outer_lr: outer,
        guided_weight: 0.1,
        batch_size: 16,
        real_batch_size: 16,
        iterations: iters,
        checkpoint_interval: 0,
        ..Default::default()
    };
    let log = distill(&mut state, &bank, &train, &dcfg, &split, |_| {}, |_| Ok(())).unwrap();
    println!(
        "loss first {:.3} last {:.3}",
        log.first().unwrap().combined,
        log.last().unwrap().combined
    );

    let (images, labels) = state.synthesize_values().unwrap();
    let m0 = class_mean(&train.images, &train.labels, 0);
    let m1 = class_mean(&train.images, &train.labels, 1);
    let tail: usize = images.shape()[1..].iter().product();
    for i in 0..labels.len() {
        let img = &images.data()[i * tail..(i + 1) * tail];
        let norm: f64 = img.iter().map(|v| v * v).sum::<f64>().sqrt();
        println!(
            "synth {i} label {} |x| {:.2} cos(m0) {:+.3} cos(m1) {:+.3} cos(m0-m1) {:+.3}",
            labels[i],
            norm,
            cosine(img, &m0),
            cosine(img, &m1),
            cosine(
                img,
                &m0.iter().zip(&m1).map(|(a, b)| a - b).collect::<Vec<_>>()
            ),
        );
    }

    // Can a fresh model fit the synthetic set, and does that transfer?
    let eval_cfg = EvalTrainConfig { epochs: 200, augment: false, repeats: 1, ..Default::default() };
    let rep = evaluate_synthetic(&state, &test, &model, &eval_cfg, &split, "d").unwrap();
    println!("test acc {:.3}", rep.mean);

    // Train accuracy on the synthetic points themselves.
    let mut params = nsd_core::models::build_model(&model, 123).unwrap();
    let mut velocity = vec![0.0; params.flat().len()];
    for _ in 0..200 {
        nsd_core::models::sgd_step(
            &model, &mut params, &mut velocity, &images, &labels, 0.01, 0.9, 0.0,
        )
        .unwrap();
    }
    let (_, fit) = evaluate(&model, &params, &images, &labels).unwrap();
    let (_, transfer) = evaluate(&model, &params, &test.images, &test.labels).unwrap();
    println!("fit-on-synth {fit:.3} transfer {transfer:.3}");
}
