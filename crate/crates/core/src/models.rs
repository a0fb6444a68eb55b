//! Student/teacher networks with flat parameter-vector views.
//!
//! The ConvNet family is block = [conv3x3 -> instance norm -> relu ->
//! 2x2 average pool, stride 2] x depth, then flatten and a linear
//! classifier. A small MLP is available for fast tests.

use std::sync::Arc;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::diffmath::{
    avg_pool2, conv2d_bias, instance_norm, linear, softmax_cross_entropy, Graph, NdArray, NodeId,
};
use crate::error::{Error, Result};

pub const INSTANCE_NORM_EPS: f64 = 1e-5;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ModelFamily {
    ConvNet,
    Mlp,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ModelSpec {
    pub family: ModelFamily,
    pub depth: usize,
    pub width: usize,
    /// (channels, height, width)
    pub input_shape: (usize, usize, usize),
    pub num_classes: usize,
}

impl ModelSpec {
    pub fn conv_net(depth: usize, width: usize, input_shape: (usize, usize, usize), num_classes: usize) -> Self {
        Self { family: ModelFamily::ConvNet, depth, width, input_shape, num_classes }
    }

    pub fn mlp(depth: usize, width: usize, input_shape: (usize, usize, usize), num_classes: usize) -> Self {
        Self { family: ModelFamily::Mlp, depth, width, input_shape, num_classes }
    }

    pub fn validate(&self) -> Result<()> {
        if self.depth < 1 || self.width < 1 || self.num_classes < 1 {
            return Err(Error::Config(format!(
                "model needs depth, width, classes >= 1, got {self:?}"
            )));
        }
        if self.family == ModelFamily::ConvNet {
            let (_, h, w) = self.input_shape;
            let div = 1usize << self.depth;
            if h % div != 0 || w % div != 0 {
                return Err(Error::Config(format!(
                    "conv net of depth {} needs input divisible by {div}, got {h}x{w}",
                    self.depth
                )));
            }
        }
        Ok(())
    }

    /// Flattened feature count in front of the classifier.
    pub fn feature_len(&self) -> usize {
        match self.family {
            ModelFamily::ConvNet => {
                let (_, h, w) = self.input_shape;
                let div = 1usize << self.depth;
                self.width * (h / div) * (w / div)
            }
            ModelFamily::Mlp => self.width,
        }
    }

    pub fn input_len(&self) -> usize {
        let (c, h, w) = self.input_shape;
        c * h * w
    }

    /// Deterministic name -> (shape, offset) table for this spec.
    pub fn layout(&self) -> Arc<Layout> {
        let mut entries = Vec::new();
        let mut offset = 0usize;
        let mut push = |name: String, shape: Vec<usize>| {
            let len: usize = shape.iter().product();
            entries.push(LayoutEntry { name, shape, offset, len });
            offset += len;
        };
        match self.family {
            ModelFamily::ConvNet => {
                let mut in_c = self.input_shape.0;
                for d in 0..self.depth {
                    push(format!("block{d}.conv.w"), vec![self.width, in_c, 3, 3]);
                    push(format!("block{d}.conv.b"), vec![self.width]);
                    push(format!("block{d}.norm.gamma"), vec![self.width]);
                    push(format!("block{d}.norm.beta"), vec![self.width]);
                    in_c = self.width;
                }
            }
            ModelFamily::Mlp => {
                let mut in_f = self.input_len();
                for d in 0..self.depth {
                    push(format!("layer{d}.w"), vec![in_f, self.width]);
                    push(format!("layer{d}.b"), vec![self.width]);
                    in_f = self.width;
                }
            }
        }
        push("fc.w".into(), vec![self.feature_len(), self.num_classes]);
        push("fc.b".into(), vec![self.num_classes]);
        Arc::new(Layout { entries, total: offset })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LayoutEntry {
    pub name: String,
    pub shape: Vec<usize>,
    pub offset: usize,
    pub len: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Layout {
    pub entries: Vec<LayoutEntry>,
    pub total: usize,
}

/// A flat parameter vector plus the layout that interprets it.
#[derive(Debug, Clone, PartialEq)]
pub struct ParamVector {
    data: Vec<f64>,
    layout: Arc<Layout>,
}

impl ParamVector {
    pub fn zeros(layout: Arc<Layout>) -> Self {
        Self { data: vec![0.0; layout.total], layout }
    }

    pub fn from_flat(layout: Arc<Layout>, data: Vec<f64>) -> Result<Self> {
        if data.len() != layout.total {
            return Err(Error::Contract(format!(
                "flat vector of {} for layout of {}",
                data.len(),
                layout.total
            )));
        }
        Ok(Self { data, layout })
    }

    pub fn layout(&self) -> &Arc<Layout> {
        &self.layout
    }

    pub fn flat(&self) -> &[f64] {
        &self.data
    }

    pub fn flat_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn entry_value(&self, k: usize) -> NdArray {
        let e = &self.layout.entries[k];
        NdArray::new(e.shape.clone(), self.data[e.offset..e.offset + e.len].to_vec())
            .expect("layout entry is consistent")
    }

    /// Rebuild a flat vector from per-entry arrays (the unflatten half
    /// of the round trip).
    pub fn from_entries(layout: Arc<Layout>, values: &[NdArray]) -> Result<Self> {
        if values.len() != layout.entries.len() {
            return Err(Error::Contract(format!(
                "{} entry arrays for layout of {} entries",
                values.len(),
                layout.entries.len()
            )));
        }
        let mut data = vec![0.0; layout.total];
        for (e, v) in layout.entries.iter().zip(values) {
            if v.shape() != e.shape.as_slice() {
                return Err(Error::Contract(format!(
                    "entry {} expects shape {:?}, got {:?}",
                    e.name,
                    e.shape,
                    v.shape()
                )));
            }
            data[e.offset..e.offset + e.len].copy_from_slice(v.data());
        }
        Ok(Self { data, layout })
    }

    /// Insert as graph leaves that gradients flow through but that are
    /// not outer-optimization targets.
    pub fn to_input_nodes(&self, g: &mut Graph) -> Vec<NodeId> {
        (0..self.layout.entries.len()).map(|k| g.input(self.entry_value(k))).collect()
    }

    /// Insert as trainable graph leaves.
    pub fn to_param_nodes(&self, g: &mut Graph) -> Vec<NodeId> {
        (0..self.layout.entries.len()).map(|k| g.param(self.entry_value(k))).collect()
    }

    /// Insert as constants (frozen weights).
    pub fn to_const_nodes(&self, g: &mut Graph) -> Vec<NodeId> {
        (0..self.layout.entries.len()).map(|k| g.constant(self.entry_value(k))).collect()
    }

    pub fn round_to_f32(&mut self) {
        for v in &mut self.data {
            *v = *v as f32 as f64;
        }
    }

    pub fn same_layout(&self, other: &Self) -> bool {
        self.layout == other.layout
    }
}

/// Squared L2 distance between two parameter vectors.
pub fn param_distance(a: &ParamVector, b: &ParamVector) -> Result<f64> {
    if !a.same_layout(b) {
        return Err(Error::Contract("param_distance: layouts differ".into()));
    }
    Ok(a.flat().iter().zip(b.flat()).map(|(x, y)| (x - y) * (x - y)).sum())
}

/// Kaiming-style fan-in initialization, deterministic per seed.
/// Weights ~ N(0, sqrt(2 / fan_in)); biases zero; norm affine at (1, 0).
pub fn build_model(spec: &ModelSpec, seed: u64) -> Result<ParamVector> {
    spec.validate()?;
    let layout = spec.layout();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut values = Vec::with_capacity(layout.entries.len());
    for e in &layout.entries {
        let v = if e.name.ends_with(".w") {
            let fan_in: usize = if e.shape.len() == 4 {
                e.shape[1] * e.shape[2] * e.shape[3]
            } else {
                e.shape[0]
            };
            NdArray::normal(&e.shape, (2.0 / fan_in as f64).sqrt(), &mut rng)
        } else if e.name.ends_with(".gamma") {
            NdArray::full(&e.shape, 1.0)
        } else {
            NdArray::zeros(&e.shape)
        };
        values.push(v);
    }
    let mut params = ParamVector::from_entries(layout, &values)?;
    // Parameter vectors are persisted as f32 snapshots; build them on
    // the f32 grid so save/load never changes a trajectory.
    params.round_to_f32();
    Ok(params)
}

/// Logits for a batch, with parameters given as graph nodes aligned to
/// the spec's layout.
pub fn forward_logits(
    g: &mut Graph,
    spec: &ModelSpec,
    params: &[NodeId],
    images: NodeId,
) -> Result<NodeId> {
    let layout = spec.layout();
    if params.len() != layout.entries.len() {
        return Err(Error::Contract(format!(
            "{} parameter nodes for a layout of {}",
            params.len(),
            layout.entries.len()
        )));
    }
    let batch = g.shape(images)[0];
    let (c, h, w) = spec.input_shape;
    if g.shape(images) != [batch, c, h, w] {
        return Err(Error::Dimension(format!(
            "images {:?} do not match model input {:?}",
            g.shape(images),
            (c, h, w)
        )));
    }
    let feat = forward_features(g, spec, params, images)?;
    let n = params.len();
    linear(g, feat, params[n - 2], params[n - 1])
}

/// The flattened features in front of the classifier (used as a frozen
/// embedding by the distribution-matching baseline).
pub fn forward_features(
    g: &mut Graph,
    spec: &ModelSpec,
    params: &[NodeId],
    images: NodeId,
) -> Result<NodeId> {
    let layout = spec.layout();
    if params.len() != layout.entries.len() {
        return Err(Error::Contract(format!(
            "{} parameter nodes for a layout of {}",
            params.len(),
            layout.entries.len()
        )));
    }
    let batch = g.shape(images)[0];
    let mut x = images;
    let mut k = 0usize;
    match spec.family {
        ModelFamily::ConvNet => {
            for _ in 0..spec.depth {
                let (wt, b, gamma, beta) = (params[k], params[k + 1], params[k + 2], params[k + 3]);
                k += 4;
                let y = conv2d_bias(g, x, wt, b)?;
                let n = instance_norm(g, y, gamma, beta, INSTANCE_NORM_EPS)?;
                let r = g.relu(n);
                x = avg_pool2(g, r)?;
            }
            g.reshape(x, vec![batch, spec.feature_len()])
        }
        ModelFamily::Mlp => {
            x = g.reshape(x, vec![batch, spec.input_len()])?;
            for _ in 0..spec.depth {
                let (wt, b) = (params[k], params[k + 1]);
                k += 2;
                let y = linear(g, x, wt, b)?;
                x = g.relu(y);
            }
            Ok(x)
        }
    }
}

/// Mean cross-entropy of the model on a labelled batch; differentiable
/// with respect to both the parameters and the images.
pub fn forward_loss(
    g: &mut Graph,
    spec: &ModelSpec,
    params: &[NodeId],
    images: NodeId,
    labels: &[usize],
) -> Result<NodeId> {
    let logits = forward_logits(g, spec, params, images)?;
    softmax_cross_entropy(g, logits, labels)
}

/// Loss and top-1 accuracy of a parameter vector on plain arrays.
pub fn evaluate(
    spec: &ModelSpec,
    params: &ParamVector,
    images: &NdArray,
    labels: &[usize],
) -> Result<(f64, f64)> {
    let mut g = Graph::new();
    let nodes = params.to_const_nodes(&mut g);
    let x = g.constant(images.clone());
    let logits = forward_logits(&mut g, spec, &nodes, x)?;
    let loss = softmax_cross_entropy(&mut g, logits, labels)?;
    let l = g.value(loss).data()[0];
    let v = g.value(logits);
    let c = spec.num_classes;
    let mut correct = 0usize;
    for (i, &label) in labels.iter().enumerate() {
        let row = &v.data()[i * c..(i + 1) * c];
        let mut best = 0usize;
        for j in 1..c {
            if row[j] > row[best] {
                best = j;
            }
        }
        if best == label {
            correct += 1;
        }
    }
    Ok((l, correct as f64 / labels.len() as f64))
}

/// One SGD step on plain values; `velocity` must match the layout length.
/// Weight decay is applied as `g + wd * theta` before the momentum update.
#[allow(clippy::too_many_arguments)]
pub fn sgd_step(
    spec: &ModelSpec,
    params: &mut ParamVector,
    velocity: &mut Vec<f64>,
    images: &NdArray,
    labels: &[usize],
    lr: f64,
    momentum: f64,
    weight_decay: f64,
) -> Result<f64> {
    let mut g = Graph::new();
    let nodes = params.to_param_nodes(&mut g);
    let x = g.constant(images.clone());
    let loss = forward_loss(&mut g, spec, &nodes, x, labels)?;
    let value = g.value(loss).data()[0];
    let grads = g.backward(loss)?;
    if velocity.len() != params.flat().len() {
        *velocity = vec![0.0; params.flat().len()];
    }
    let layout = params.layout().clone();
    for (k, e) in layout.entries.iter().enumerate() {
        let grad = grads.get(nodes[k]).expect("param nodes are trainable");
        for (i, gv) in grad.data().iter().enumerate() {
            let slot = e.offset + i;
            let g_eff = gv + weight_decay * params.flat()[slot];
            velocity[slot] = momentum * velocity[slot] + g_eff;
            params.flat_mut()[slot] -= lr * velocity[slot];
        }
    }
    Ok(value)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn conv_net_feature_trace() {
        let spec = ModelSpec::conv_net(3, 128, (3, 32, 32), 10);
        assert_eq!(spec.feature_len(), 128 * 4 * 4);
        let desk = ModelSpec::conv_net(2, 16, (1, 8, 8), 2);
        assert_eq!(desk.feature_len(), 16 * 2 * 2);
    }

    #[test]
    fn indivisible_input_is_a_config_error() {
        let spec = ModelSpec::conv_net(3, 8, (1, 12, 12), 2);
        assert!(matches!(spec.validate(), Err(Error::Config(_))));
    }

    #[test]
    fn same_seed_same_params() {
        let spec = ModelSpec::conv_net(2, 8, (1, 8, 8), 2);
        let a = build_model(&spec, 42).unwrap();
        let b = build_model(&spec, 42).unwrap();
        assert_eq!(a, b);
        let c = build_model(&spec, 43).unwrap();
        assert_ne!(a, c);
    }

    #[test]
    fn flatten_unflatten_is_identity() {
        let spec = ModelSpec::mlp(2, 5, (1, 3, 3), 2);
        let p = build_model(&spec, 1).unwrap();
        let entries: Vec<NdArray> =
            (0..p.layout().entries.len()).map(|k| p.entry_value(k)).collect();
        let q = ParamVector::from_entries(p.layout().clone(), &entries).unwrap();
        assert_eq!(p, q);
    }

    #[test]
    fn zero_final_layer_gives_ln_c_loss() {
        let spec = ModelSpec::mlp(1, 4, (1, 2, 2), 3);
        let mut p = build_model(&spec, 9).unwrap();
        // Zero the classifier weights and bias: logits are uniform.
        let layout = p.layout().clone();
        for e in &layout.entries {
            if e.name.starts_with("fc.") {
                p.flat_mut()[e.offset..e.offset + e.len].fill(0.0);
            }
        }
        let images = NdArray::full(&[5, 1, 2, 2], 0.3);
        let (loss, _) = evaluate(&spec, &p, &images, &[0, 1, 2, 0, 1]).unwrap();
        assert!((loss - (3.0f64).ln()).abs() < 1e-9);
    }

    #[test]
    fn confident_correct_logits_drive_loss_to_zero() {
        // Hand-build logits through a 1x1-image MLP is awkward; check the
        // loss op directly through forward_loss with a crafted classifier.
        let spec = ModelSpec::mlp(1, 2, (1, 1, 1), 2);
        let layout = spec.layout();
        let mut p = ParamVector::zeros(layout.clone());
        for e in &layout.entries {
            match e.name.as_str() {
                // hidden = relu(x * 1 + 1) is positive for x in [0, 1]
                "layer0.w" => p.flat_mut()[e.offset..e.offset + e.len].fill(1.0),
                "layer0.b" => p.flat_mut()[e.offset..e.offset + e.len].fill(1.0),
                // big margin towards class 0
                "fc.w" => {
                    p.flat_mut()[e.offset] = 30.0;
                    p.flat_mut()[e.offset + 1] = -30.0;
                    p.flat_mut()[e.offset + 2] = 30.0;
                    p.flat_mut()[e.offset + 3] = -30.0;
                }
                _ => {}
            }
        }
        let images = NdArray::full(&[3, 1, 1, 1], 0.5);
        let (loss, acc) = evaluate(&spec, &p, &images, &[0, 0, 0]).unwrap();
        assert!(loss < 1e-9, "loss {loss}");
        assert_eq!(acc, 1.0);
    }

    #[test]
    fn param_distance_counts_unit_bumps() {
        let spec = ModelSpec::mlp(1, 3, (1, 2, 2), 2);
        let a = build_model(&spec, 5).unwrap();
        let mut b = a.clone();
        assert_eq!(param_distance(&a, &b).unwrap(), 0.0);
        b.flat_mut()[7] += 1.0;
        assert!((param_distance(&a, &b).unwrap() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn forward_is_bit_stable() {
        let spec = ModelSpec::conv_net(1, 4, (1, 4, 4), 2);
        let p = build_model(&spec, 3).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let images = NdArray::uniform(&[2, 1, 4, 4], 0.0, 1.0, &mut rng);
        let a = evaluate(&spec, &p, &images, &[0, 1]).unwrap();
        let b = evaluate(&spec, &p, &images, &[0, 1]).unwrap();
        assert_eq!(a.0.to_bits(), b.0.to_bits());
    }
}
