//! Why does the spectral arm stall? Print per-slot gradient norms and
//! track the image/prototype alignment over outer iterations.

use nsd_core::dataset::{load_dataset, BlobsSpec, DataSource};
use nsd_core::decomposition::{BudgetSpec, LabelRule, Slot};
use nsd_core::matching::{distill, distill_step, train_expert, DistillConfig, ExpertBank, ExpertConfig};
use nsd_core::models::ModelSpec;
use nsd_core::rng::SeedSplitter;
use nsd_core::transforms::{init_distill_state, TransformKind, TransformTag};

fn main() {
    let outer_lr: f64 = std::env::args().nth(1).and_then(|s| s.parse().ok()).unwrap_or(3.0);
    let alpha: f64 = std::env::args().nth(2).and_then(|s| s.parse().ok()).unwrap_or(0.1);
    let (train, test) = load_dataset(&DataSource::Blobs(BlobsSpec::default()), true).unwrap();
    let budget = BudgetSpec::new(2, 1, train.image_shape()).unwrap();
    let model = ModelSpec::conv_net(2, 8, train.image_shape(), 2);
    let cfg = ExpertConfig { epochs: 8, snapshot_stride: 1, batch_size: 16, ..Default::default() };
    let split0 = SeedSplitter::new(1000);
    let trajs: Vec<_> = (0..2)
        .map(|k| {
            use rand::Rng;
            train_expert(&train, &model, &cfg, split0.indexed("expert", k).gen()).unwrap()
        })
        .collect();
    let bank = ExpertBank::new(trajs, train.fingerprint.clone()).unwrap();

    let split = SeedSplitter::new(0);
    let mut state = init_distill_state(
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

    let (images, _) = state.synthesize_values().unwrap();
    let istd = {
        let n = images.len() as f64;
        let m: f64 = images.data().iter().sum::<f64>() / n;
        (images.data().iter().map(|v| (v - m) * (v - m)).sum::<f64>() / n).sqrt()
    };
    println!("init image std {istd:.3}");
    for (k, slot) in state.trainable_slots().iter().enumerate() {
        let v = state.slot_values(*slot);
        println!("slot {k} {slot:?} shape {:?} norm {:.4}", v.shape(), v.sq_norm().sqrt());
    }

    let dcfg = DistillConfig {
        inner_steps: 5,
        inner_lr: alpha,
        outer_lr,
        guided_weight: 0.1,
        batch_size: 16,
        real_batch_size: 16,
        iterations: 300,
        checkpoint_interval: 0,
        ..Default::default()
    };

    // One manual step to inspect gradient norms per slot.
    {
        let mut probe_state = state.clone();
        let before: Vec<f64> = probe_state
            .trainable_slots()
            .iter()
            .map(|s| probe_state.slot_values(*s).sq_norm().sqrt())
            .collect();
        distill_step(&mut probe_state, &bank, &train, &dcfg, &split, 1).unwrap();
        for (k, slot) in probe_state.trainable_slots().iter().enumerate() {
            // velocity after 1 step = gradient
            let g = &probe_state.velocities[k];
            println!(
                "slot {k} {slot:?}: grad norm {:.3e}, value norm {:.3} -> {:.3}",
                g.sq_norm().sqrt(),
                before[k],
                probe_state.slot_values(*slot).sq_norm().sqrt()
            );
        }
    }

    let mut it = 0u64;
    distill(&mut state, &bank, &train, &dcfg, &split, |m| {
        it += 1;
        if it % 50 == 0 || it <= 3 {
            println!("iter {} combined {:.4}", m.iteration, m.combined);
        }
    }, |_| Ok(()))
    .unwrap();

    let (images, labels) = state.synthesize_values().unwrap();
    let tail: usize = images.shape()[1..].iter().product();
    // class means
    let mut m0 = vec![0.0; tail];
    let mut m1 = vec![0.0; tail];
    let (mut n0, mut n1) = (0.0, 0.0);
    for (i, &l) in train.labels.iter().enumerate() {
        let img = &train.images.data()[i * tail..(i + 1) * tail];
        if l == 0 {
            for p in 0..tail {
                m0[p] += img[p];
            }
            n0 += 1.0;
        } else {
            for p in 0..tail {
                m1[p] += img[p];
            }
            n1 += 1.0;
        }
    }
    for p in 0..tail {
        m0[p] /= n0;
        m1[p] /= n1;
    }
    let cos = |a: &[f64], b: &[f64]| {
        let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
        dot / (a.iter().map(|v| v * v).sum::<f64>().sqrt()
            * b.iter().map(|v| v * v).sum::<f64>().sqrt()
            + 1e-12)
    };
    let diff: Vec<f64> = m0.iter().zip(&m1).map(|(a, b)| a - b).collect();
    for i in 0..labels.len() {
        let img = &images.data()[i * tail..(i + 1) * tail];
        println!(
            "synth {i} label {} |x| {:.2} cos(m0-m1) {:+.3}",
            labels[i],
            img.iter().map(|v| v * v).sum::<f64>().sqrt(),
            cos(img, &diff)
        );
    }
    let eval_cfg = nsd_core::evalharness::EvalTrainConfig {
        epochs: 200,
        augment: false,
        ..Default::default()
    };
    let rep =
        nsd_core::evalharness::evaluate_synthetic(&state, &test, &model, &eval_cfg, &split, "d")
            .unwrap();
    println!("test acc {:.3}", rep.mean);
}
