use std::time::Instant;

use nsd_core::dataset::{load_dataset, BlobsSpec, DataSource};
use nsd_core::decomposition::BudgetSpec;
use nsd_core::matching::{distill_step, train_expert, DistillConfig, ExpertBank, ExpertConfig};
use nsd_core::models::ModelSpec;
use nsd_core::rng::SeedSplitter;
use nsd_core::transforms::{init_distill_state, TransformKind, TransformTag};

fn main() {
    let (train, _) = load_dataset(&DataSource::Blobs(BlobsSpec::default()), true).unwrap();
    for (width, batch, n) in
        [(16usize, 32usize, 10usize), (8, 16, 10), (8, 16, 5), (4, 16, 5), (8, 32, 5)]
    {
        let model = ModelSpec::conv_net(2, width, train.image_shape(), 2);
        let expert_cfg =
            ExpertConfig { epochs: 2, snapshot_stride: 1, batch_size: 32, ..Default::default() };
        let t = Instant::now();
        let traj = train_expert(&train, &model, &expert_cfg, 1).unwrap();
        let expert_time = t.elapsed();
        let bank = ExpertBank::new(vec![traj], train.fingerprint.clone()).unwrap();
        let budget = BudgetSpec::new(2, 1, train.image_shape()).unwrap();
        let split = SeedSplitter::new(0);
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
        let cfg = DistillConfig {
            inner_steps: n,
            batch_size: batch,
            real_batch_size: batch,
            iterations: 3,
            checkpoint_interval: 0,
            ..Default::default()
        };
        let t = Instant::now();
        for it in 1..=3u64 {
            distill_step(&mut state, &bank, &train, &cfg, &split, it).unwrap();
        }
        println!(
            "width {width} batch {batch} N {n}: {:.0?}/iter (expert 2ep: {:.0?})",
            t.elapsed() / 3,
            expert_time
        );
    }
}
