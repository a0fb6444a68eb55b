use nsd_core::dataset::{load_dataset, BlobsSpec, DataSource};
use nsd_core::matching::{train_expert, ExpertConfig};
use nsd_core::models::{evaluate, ModelSpec};

fn main() {
    for noise in [0.25, 0.35] {
        let spec = BlobsSpec { noise, ..Default::default() };
        let (train, test) = load_dataset(&DataSource::Blobs(spec), true).unwrap();
        let model = ModelSpec::conv_net(2, 8, train.image_shape(), 2);
        for (epochs, batch, stride) in
            [(20usize, 16usize, 1usize), (40, 200, 1), (150, 200, 4), (300, 200, 8)]
        {
            let cfg = ExpertConfig {
                epochs,
                snapshot_stride: stride,
                batch_size: batch,
                ..Default::default()
            };
            let traj = train_expert(&train, &model, &cfg, 1).unwrap();
            let (_, acc) =
                evaluate(&model, traj.snapshots.last().unwrap(), &test.images, &test.labels)
                    .unwrap();
            let (_, mid) = evaluate(
                &model,
                &traj.snapshots[traj.snapshots.len() / 2],
                &test.images,
                &test.labels,
            )
            .unwrap();
            println!(
                "noise {noise} epochs {epochs} batch {batch}: snapshots {} mid-acc {mid:.3} final-acc {acc:.3}",
                traj.snapshots.len()
            );
        }
    }
}
