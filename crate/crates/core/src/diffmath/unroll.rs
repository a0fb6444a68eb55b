//! Unrolled inner SGD with gradients flowing back to the data.
//!
//! The whole tape is retained across the N inner steps: with desk-scale
//! models and N <= ~30 that costs little memory and keeps every update
//! auditable as plain graph nodes.

use crate::error::{Error, Result};

use super::array::NdArray;
use super::graph::{GradientMap, Graph, NodeId};

/// One inner mini-batch: image rows plus their labels. The image node
/// must be synthesized from live (differentiable) parameters.
#[derive(Debug, Clone)]
pub struct InnerBatch {
    pub images: NodeId,
    pub labels: Vec<usize>,
}

/// Run `batches.len()` SGD steps from `init` under `loss_fn`, emitting
/// every update into the graph. Returns the node ids of the final
/// parameters; gradients of anything built on them flow through all
/// inner updates.
pub fn run_unrolled_sgd(
    g: &mut Graph,
    init: &[NodeId],
    batches: &[InnerBatch],
    lr: f64,
    momentum: f64,
    mut loss_fn: impl FnMut(&mut Graph, &[NodeId], &InnerBatch) -> Result<NodeId>,
) -> Result<Vec<NodeId>> {
    if batches.is_empty() {
        return Err(Error::Contract("unrolled SGD needs at least one step".into()));
    }
    for (t, b) in batches.iter().enumerate() {
        if !g.has_trainable_ancestor(b.images) {
            return Err(Error::Contract(format!(
                "inner batch {t} is detached: no path from trainable leaves to the images"
            )));
        }
    }
    let mut theta: Vec<NodeId> = init.to_vec();
    let mut velocity: Option<Vec<NodeId>> = None;
    for batch in batches {
        let loss = loss_fn(g, &theta, batch)?;
        let grads = g.grad_nodes(loss, &theta)?;
        let update: Vec<NodeId> = if momentum == 0.0 {
            grads
        } else {
            let prev = velocity.take();
            let mut v_next = Vec::with_capacity(grads.len());
            for (k, gk) in grads.iter().enumerate() {
                let v = match &prev {
                    None => *gk,
                    Some(vs) => {
                        let damped = g.scale(vs[k], momentum);
                        g.add(damped, *gk)?
                    }
                };
                v_next.push(v);
            }
            velocity = Some(v_next.clone());
            v_next
        };
        let mut next = Vec::with_capacity(theta.len());
        for (p, u) in theta.iter().zip(&update) {
            let step = g.scale(*u, lr);
            next.push(g.sub(*p, step)?);
        }
        theta = next;
    }
    Ok(theta)
}

/// Gradients of an outer loss, built on the unrolled final parameters,
/// with respect to every trainable leaf. Returns the map together with
/// the final parameter values.
pub fn unrolled_sgd_gradients(
    g: &mut Graph,
    init: &[NdArray],
    batches: &[InnerBatch],
    lr: f64,
    momentum: f64,
    loss_fn: impl FnMut(&mut Graph, &[NodeId], &InnerBatch) -> Result<NodeId>,
    outer_loss: impl FnOnce(&mut Graph, &[NodeId]) -> Result<NodeId>,
) -> Result<(GradientMap, Vec<NdArray>)> {
    let theta0: Vec<NodeId> = init.iter().map(|v| g.input(v.clone())).collect();
    let theta_n = run_unrolled_sgd(g, &theta0, batches, lr, momentum, loss_fn)?;
    let loss = outer_loss(g, &theta_n)?;
    let grads = g.backward(loss)?;
    let finals = theta_n.iter().map(|&id| g.value(id).clone()).collect();
    Ok((grads, finals))
}
