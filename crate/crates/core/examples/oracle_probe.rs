//! Oracle check for the desk regime: if a student trained on the class
//! means (the ideal ipc-1 distillate) cannot cover an expert segment,
//! no optimizer will find synthetic data that does.

use nsd_core::dataset::{load_dataset, BlobsSpec, DataSource};
use nsd_core::diffmath::{Graph, NdArray};
use nsd_core::matching::{train_expert, ExpertConfig};
use nsd_core::models::{evaluate, forward_loss, ModelSpec, ParamVector};

fn class_mean_images(train: &nsd_core::dataset::Dataset) -> (NdArray, Vec<usize>) {
    let tail: usize = train.images.shape()[1..].iter().product();
    let mut data = Vec::new();
    let mut labels = Vec::new();
    for c in 0..train.num_classes {
        let rows = train.indices_of_class(c);
        let mut mean = vec![0.0; tail];
        for &r in &rows {
            for p in 0..tail {
                mean[p] += train.images.data()[r * tail + p];
            }
        }
        for v in &mut mean {
            *v /= rows.len() as f64;
        }
        data.extend(mean);
        labels.push(c);
    }
    let mut shape = vec![train.num_classes];
    shape.extend(&train.images.shape()[1..]);
    (NdArray::new(shape, data).unwrap(), labels)
}

/// Train `steps` plain-SGD steps from `start` on the given images and
/// report the normalized distance to `target`.
fn track(
    spec: &ModelSpec,
    start: &ParamVector,
    target: &ParamVector,
    images: &NdArray,
    labels: &[usize],
    steps: usize,
    alpha: f64,
    momentum: f64,
) -> f64 {
    let mut params = start.clone();
    let mut velocity = vec![0.0; params.flat().len()];
    for _ in 0..steps {
        nsd_core::models::sgd_step(
            spec, &mut params, &mut velocity, images, labels, alpha, momentum, 0.0,
        )
        .unwrap();
    }
    let num = nsd_core::models::param_distance(&params, target).unwrap();
    let den = nsd_core::models::param_distance(start, target).unwrap();
    num / den
}

fn main() {
    let (train, test) = load_dataset(&DataSource::Blobs(BlobsSpec::default()), true).unwrap();
    let model = ModelSpec::conv_net(2, 8, train.image_shape(), 2);
    let (means, mean_labels) = class_mean_images(&train);

    // Also check: how good is training on class means directly?
    {
        let mut g = Graph::new();
        let _ = &mut g;
        let mut params = nsd_core::models::build_model(&model, 9).unwrap();
        let mut velocity = vec![0.0; params.flat().len()];
        for _ in 0..200 {
            nsd_core::models::sgd_step(
                &model, &mut params, &mut velocity, &means, &mean_labels, 0.01, 0.9, 0.0,
            )
            .unwrap();
        }
        let (_, acc) = evaluate(&model, &params, &test.images, &test.labels).unwrap();
        println!("train-on-class-means test acc: {acc:.3}");
        let _ = forward_loss;
    }

    for (label, epochs, batch) in [("fullbatch20", 20usize, 200usize), ("fullbatch60", 60, 200), ("minibatch20", 20, 16)] {
        let cfg = ExpertConfig { epochs, snapshot_stride: 1, batch_size: batch, ..Default::default() };
        let traj = train_expert(&train, &model, &cfg, 1).unwrap();
        let (_, final_acc) =
            evaluate(&model, traj.snapshots.last().unwrap(), &test.images, &test.labels).unwrap();
        println!("--- expert {label}: {} snapshots, final acc {final_acc:.3}", traj.len());
        for start in [0usize, 2, 8] {
            if start + 2 >= traj.len() {
                continue;
            }
            for (n, alpha, mom) in [
                (5usize, 0.04f64, 0.0f64),
                (5, 0.1, 0.0),
                (10, 0.04, 0.0),
                (5, 0.01, 0.9),
                (10, 0.01, 0.9),
            ] {
                let r_mean = track(
                    &model,
                    &traj.snapshots[start],
                    &traj.snapshots[start + 2],
                    &means,
                    &mean_labels,
                    n,
                    alpha,
                    mom,
                );
                println!(
                    "  start {start} M=2: N={n} alpha={alpha} mom={mom}: class-means ratio {r_mean:.3}"
                );
            }
        }
    }
}
