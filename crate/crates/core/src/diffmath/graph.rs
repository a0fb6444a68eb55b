//! Reverse-mode differentiation on an append-only computation graph.
//!
//! The backward pass does not write gradient values directly: it emits
//! new graph nodes that *compute* the adjoints. Gradients are therefore
//! ordinary differentiable values, which is what lets an outer loss look
//! through N inner SGD updates (each built from emitted gradient nodes)
//! all the way back to the distillation parameters.
//!
//! The primitive set is closed under differentiation: every adjoint is
//! expressed with the same primitives, so second and higher order
//! gradients need no extra rules. Convolution stays a direct kernel by
//! forming a closed triple (`Conv2d`, `ConvBwdInput`, `ConvBwdWeight`)
//! whose adjoints reference each other.

use std::collections::HashMap;
use std::sync::Arc;

use crate::error::{Error, Result};
use crate::par;

use super::array::NdArray;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct NodeId(pub(crate) usize);

impl NodeId {
    pub fn index(&self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    Add,
    Sub,
    Mul,
    /// y = scale * x + shift, elementwise with constant coefficients.
    Affine { scale: f64 },
    Matmul,
    Conv2d,
    ConvBwdInput,
    ConvBwdWeight,
    Permute(Vec<usize>),
    Reshape,
    /// Stretch extent-1 axes of the input up to the node's own shape.
    BroadcastTo,
    ReduceSum { axes: Vec<usize>, keepdims: bool },
    Relu,
    Exp,
    Ln,
    Sqrt,
    Recip,
    Gather { map: Arc<Vec<usize>> },
    ScatterAdd { map: Arc<Vec<usize>> },
    /// Concatenate any number of parents along axis 0.
    Concat0,
}

#[derive(Debug)]
struct Node {
    value: NdArray,
    op: Op,
    parents: Vec<NodeId>,
    requires_grad: bool,
    trainable: bool,
}

/// Gradient values for the trainable leaves of a graph.
#[derive(Debug, Default)]
pub struct GradientMap {
    grads: HashMap<NodeId, NdArray>,
}

impl GradientMap {
    pub fn get(&self, id: NodeId) -> Option<&NdArray> {
        self.grads.get(&id)
    }

    pub fn len(&self) -> usize {
        self.grads.len()
    }

    pub fn is_empty(&self) -> bool {
        self.grads.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&NodeId, &NdArray)> {
        self.grads.iter()
    }
}

#[derive(Debug, Default)]
pub struct Graph {
    nodes: Vec<Node>,
}

impl Graph {
    pub fn new() -> Self {
        Self { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: NdArray, op: Op, parents: Vec<NodeId>) -> NodeId {
        let requires_grad = parents.iter().any(|p| self.nodes[p.0].requires_grad);
        self.nodes.push(Node { value, op, parents, requires_grad, trainable: false });
        NodeId(self.nodes.len() - 1)
    }

    /// A leaf that gradients never flow into.
    pub fn constant(&mut self, value: NdArray) -> NodeId {
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            parents: vec![],
            requires_grad: false,
            trainable: false,
        });
        NodeId(self.nodes.len() - 1)
    }

    /// A leaf that participates in differentiation but is not an
    /// optimization target (student weights inside an unroll).
    pub fn input(&mut self, value: NdArray) -> NodeId {
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            parents: vec![],
            requires_grad: true,
            trainable: false,
        });
        NodeId(self.nodes.len() - 1)
    }

    /// A trainable leaf: [`Graph::backward`] reports a gradient for every
    /// one of these, zeros included.
    pub fn param(&mut self, value: NdArray) -> NodeId {
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            parents: vec![],
            requires_grad: true,
            trainable: true,
        });
        NodeId(self.nodes.len() - 1)
    }

    pub fn value(&self, id: NodeId) -> &NdArray {
        &self.nodes[id.0].value
    }

    pub fn shape(&self, id: NodeId) -> &[usize] {
        self.nodes[id.0].value.shape()
    }

    pub fn requires_grad(&self, id: NodeId) -> bool {
        self.nodes[id.0].requires_grad
    }

    pub fn is_trainable(&self, id: NodeId) -> bool {
        self.nodes[id.0].trainable
    }

    pub fn trainable_leaves(&self) -> Vec<NodeId> {
        (0..self.nodes.len()).filter(|&i| self.nodes[i].trainable).map(NodeId).collect()
    }

    /// True when any trainable leaf is an ancestor of `id`.
    pub fn has_trainable_ancestor(&self, id: NodeId) -> bool {
        let mut seen = vec![false; id.0 + 1];
        let mut stack = vec![id];
        while let Some(n) = stack.pop() {
            if seen[n.0] {
                continue;
            }
            seen[n.0] = true;
            if self.nodes[n.0].trainable {
                return true;
            }
            stack.extend(self.nodes[n.0].parents.iter().copied());
        }
        false
    }

    // ---- elementwise primitives -------------------------------------------------

    fn same_shape(&self, op: &str, a: NodeId, b: NodeId) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::Dimension(format!(
                "{op}: shapes {:?} and {:?} differ",
                self.shape(a),
                self.shape(b)
            )));
        }
        Ok(())
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.same_shape("add", a, b)?;
        let v = zip(self.value(a), self.value(b), |x, y| x + y);
        Ok(self.push(v, Op::Add, vec![a, b]))
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.same_shape("sub", a, b)?;
        let v = zip(self.value(a), self.value(b), |x, y| x - y);
        Ok(self.push(v, Op::Sub, vec![a, b]))
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.same_shape("mul", a, b)?;
        let v = zip(self.value(a), self.value(b), |x, y| x * y);
        Ok(self.push(v, Op::Mul, vec![a, b]))
    }

    pub fn affine(&mut self, a: NodeId, scale: f64, shift: f64) -> NodeId {
        let v = map(self.value(a), |x| scale * x + shift);
        self.push(v, Op::Affine { scale }, vec![a])
    }

    pub fn scale(&mut self, a: NodeId, s: f64) -> NodeId {
        self.affine(a, s, 0.0)
    }

    pub fn neg(&mut self, a: NodeId) -> NodeId {
        self.affine(a, -1.0, 0.0)
    }

    pub fn relu(&mut self, a: NodeId) -> NodeId {
        let v = map(self.value(a), |x| if x > 0.0 { x } else { 0.0 });
        self.push(v, Op::Relu, vec![a])
    }

    pub fn exp(&mut self, a: NodeId) -> NodeId {
        let v = map(self.value(a), f64::exp);
        self.push(v, Op::Exp, vec![a])
    }

    pub fn ln(&mut self, a: NodeId) -> Result<NodeId> {
        if self.value(a).data().iter().any(|&x| x <= 0.0) {
            return Err(Error::Contract("ln: input must be strictly positive".into()));
        }
        let v = map(self.value(a), f64::ln);
        Ok(self.push(v, Op::Ln, vec![a]))
    }

    pub fn sqrt(&mut self, a: NodeId) -> Result<NodeId> {
        if self.value(a).data().iter().any(|&x| x <= 0.0) {
            return Err(Error::Contract("sqrt: input must be strictly positive".into()));
        }
        let v = map(self.value(a), f64::sqrt);
        Ok(self.push(v, Op::Sqrt, vec![a]))
    }

    pub fn recip(&mut self, a: NodeId) -> Result<NodeId> {
        if self.value(a).data().iter().any(|&x| x == 0.0) {
            return Err(Error::Contract("recip: input must be nonzero".into()));
        }
        let v = map(self.value(a), |x| 1.0 / x);
        Ok(self.push(v, Op::Recip, vec![a]))
    }

    // ---- shape primitives -------------------------------------------------------

    pub fn permute(&mut self, a: NodeId, axes: &[usize]) -> Result<NodeId> {
        let shape = self.shape(a).to_vec();
        if axes.len() != shape.len() {
            return Err(Error::Dimension(format!(
                "permute: {} axes for rank {}",
                axes.len(),
                shape.len()
            )));
        }
        let mut seen = vec![false; axes.len()];
        for &ax in axes {
            if ax >= axes.len() || seen[ax] {
                return Err(Error::Dimension(format!("permute: invalid axes {axes:?}")));
            }
            seen[ax] = true;
        }
        let v = permute_value(self.value(a), axes);
        Ok(self.push(v, Op::Permute(axes.to_vec()), vec![a]))
    }

    pub fn transpose2(&mut self, a: NodeId) -> Result<NodeId> {
        self.permute(a, &[1, 0])
    }

    pub fn reshape(&mut self, a: NodeId, shape: Vec<usize>) -> Result<NodeId> {
        let v = self.value(a).reshaped(shape)?;
        Ok(self.push(v, Op::Reshape, vec![a]))
    }

    /// Stretch extent-1 axes up to `shape`. A scalar `[1]` input may be
    /// broadcast to any shape; otherwise ranks must match.
    pub fn broadcast_to(&mut self, a: NodeId, shape: Vec<usize>) -> Result<NodeId> {
        let src = self.shape(a).to_vec();
        let a = if src == [1] && shape.len() != 1 {
            self.reshape(a, vec![1; shape.len()])?
        } else {
            a
        };
        let src = self.shape(a).to_vec();
        if src.len() != shape.len()
            || src.iter().zip(&shape).any(|(&s, &d)| s != d && s != 1)
        {
            return Err(Error::Dimension(format!(
                "broadcast_to: cannot stretch {src:?} to {shape:?}"
            )));
        }
        if src == shape {
            // Still emit a node so adjoint bookkeeping stays uniform.
            let v = self.value(a).clone();
            return Ok(self.push(v, Op::BroadcastTo, vec![a]));
        }
        let v = broadcast_value(self.value(a), &shape);
        Ok(self.push(v, Op::BroadcastTo, vec![a]))
    }

    /// Sum over `axes`. With `keepdims` the reduced axes stay as extent 1;
    /// otherwise they are removed (a full reduction yields shape `[1]`).
    /// Accumulation is sequential, in a fixed order.
    pub fn reduce_sum(&mut self, a: NodeId, axes: &[usize], keepdims: bool) -> Result<NodeId> {
        let shape = self.shape(a).to_vec();
        let mut mark = vec![false; shape.len()];
        for &ax in axes {
            if ax >= shape.len() {
                return Err(Error::Dimension(format!(
                    "reduce_sum: axis {ax} out of range for rank {}",
                    shape.len()
                )));
            }
            mark[ax] = true;
        }
        let v = reduce_sum_value(self.value(a), &mark, keepdims);
        Ok(self.push(v, Op::ReduceSum { axes: axes.to_vec(), keepdims }, vec![a]))
    }

    pub fn sum_all(&mut self, a: NodeId) -> Result<NodeId> {
        let axes: Vec<usize> = (0..self.shape(a).len()).collect();
        self.reduce_sum(a, &axes, false)
    }

    pub fn mean_all(&mut self, a: NodeId) -> Result<NodeId> {
        let n = self.value(a).len() as f64;
        let s = self.sum_all(a)?;
        Ok(self.scale(s, 1.0 / n))
    }

    // ---- gather / scatter -------------------------------------------------------

    /// `out[i] = a[map[i]]` over flat indices; `out` takes `out_shape`.
    pub fn gather(&mut self, a: NodeId, map: Arc<Vec<usize>>, out_shape: Vec<usize>) -> Result<NodeId> {
        let n: usize = out_shape.iter().product();
        if n != map.len() {
            return Err(Error::Dimension(format!(
                "gather: map has {} entries but out shape {:?} wants {n}",
                map.len(),
                out_shape
            )));
        }
        let src = self.value(a);
        if let Some(&bad) = map.iter().find(|&&i| i >= src.len()) {
            return Err(Error::Range(format!("gather: index {bad} out of {}", src.len())));
        }
        let data: Vec<f64> = map.iter().map(|&i| src.data()[i]).collect();
        let v = NdArray::new(out_shape, data)?;
        Ok(self.push(v, Op::Gather { map }, vec![a]))
    }

    /// `out[map[i]] += a[i]`; `out` starts at zero with `out_shape`.
    pub fn scatter_add(&mut self, a: NodeId, map: Arc<Vec<usize>>, out_shape: Vec<usize>) -> Result<NodeId> {
        let src = self.value(a);
        if map.len() != src.len() {
            return Err(Error::Dimension(format!(
                "scatter_add: map has {} entries for input of {}",
                map.len(),
                src.len()
            )));
        }
        let n: usize = out_shape.iter().product();
        if let Some(&bad) = map.iter().find(|&&i| i >= n) {
            return Err(Error::Range(format!("scatter_add: index {bad} out of {n}")));
        }
        let mut data = vec![0.0; n];
        for (k, &i) in map.iter().enumerate() {
            data[i] += src.data()[k];
        }
        let v = NdArray::new(out_shape, data)?;
        Ok(self.push(v, Op::ScatterAdd { map }, vec![a]))
    }

    /// Concatenate along axis 0. All parents must agree on the tail shape.
    pub fn concat0(&mut self, parts: &[NodeId]) -> Result<NodeId> {
        if parts.is_empty() {
            return Err(Error::Range("concat0: no inputs".into()));
        }
        let tail = self.shape(parts[0])[1..].to_vec();
        let mut rows = 0usize;
        for &p in parts {
            let s = self.shape(p);
            if s[1..] != tail[..] {
                return Err(Error::Dimension(format!(
                    "concat0: tail {:?} differs from {:?}",
                    &s[1..],
                    tail
                )));
            }
            rows += s[0];
        }
        let mut shape = vec![rows];
        shape.extend(&tail);
        let mut data = Vec::with_capacity(shape.iter().product());
        for &p in parts {
            data.extend_from_slice(self.value(p).data());
        }
        let v = NdArray::new(shape, data)?;
        Ok(self.push(v, Op::Concat0, parts.to_vec()))
    }

    // ---- linear algebra primitives ----------------------------------------------

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(Error::Dimension(format!(
                "matmul: {sa:?} x {sb:?} do not chain"
            )));
        }
        let v = matmul_value(self.value(a), self.value(b));
        Ok(self.push(v, Op::Matmul, vec![a, b]))
    }

    /// 3x3 convolution, stride 1, zero padding 1.
    /// `x: (B, Ci, H, W)`, `w: (Co, Ci, 3, 3)` -> `(B, Co, H, W)`.
    pub fn conv2d(&mut self, x: NodeId, w: NodeId) -> Result<NodeId> {
        let (sx, sw) = (self.shape(x), self.shape(w));
        if sx.len() != 4 || sw.len() != 4 || sw[2] != 3 || sw[3] != 3 || sx[1] != sw[1] {
            return Err(Error::Dimension(format!(
                "conv2d: image {sx:?} with kernel {sw:?}"
            )));
        }
        let v = conv2d_value(self.value(x), self.value(w));
        Ok(self.push(v, Op::Conv2d, vec![x, w]))
    }

    fn conv_bwd_input(&mut self, gy: NodeId, w: NodeId) -> NodeId {
        let v = conv_bwd_input_value(self.value(gy), self.value(w));
        self.push(v, Op::ConvBwdInput, vec![gy, w])
    }

    fn conv_bwd_weight(&mut self, x: NodeId, gy: NodeId) -> NodeId {
        let v = conv_bwd_weight_value(self.value(x), self.value(gy));
        self.push(v, Op::ConvBwdWeight, vec![x, gy])
    }

    // ---- backward ---------------------------------------------------------------

    /// Emit adjoint nodes for everything `loss` depends on and return the
    /// adjoint of each `wrt` node (a zeros constant if disconnected).
    /// The returned nodes are differentiable like any other value.
    pub fn grad_nodes(&mut self, loss: NodeId, wrt: &[NodeId]) -> Result<Vec<NodeId>> {
        let adj = self.backward_nodes(loss)?;
        Ok(wrt
            .iter()
            .map(|id| match adj.get(&id.0) {
                Some(&g) => g,
                None => {
                    let z = NdArray::zeros(self.shape(*id));
                    self.constant(z)
                }
            })
            .collect())
    }

    /// Gradient values of `loss` with respect to every trainable leaf.
    /// Leaves the loss does not touch map to zeros.
    pub fn backward(&mut self, loss: NodeId) -> Result<GradientMap> {
        let leaves = self.trainable_leaves();
        let adj = self.backward_nodes(loss)?;
        let mut grads = HashMap::new();
        for leaf in leaves {
            let g = match adj.get(&leaf.0) {
                Some(&gid) => self.value(gid).clone(),
                None => NdArray::zeros(self.shape(leaf)),
            };
            grads.insert(leaf, g);
        }
        Ok(GradientMap { grads })
    }

    fn backward_nodes(&mut self, loss: NodeId) -> Result<HashMap<usize, NodeId>> {
        if self.value(loss).len() != 1 {
            return Err(Error::Contract(format!(
                "backward: loss must be scalar, got shape {:?}",
                self.shape(loss)
            )));
        }
        let mut adj: HashMap<usize, NodeId> = HashMap::new();
        let seed_shape = self.shape(loss).to_vec();
        let seed = self.constant(NdArray::full(&seed_shape, 1.0));
        adj.insert(loss.0, seed);

        for id in (0..=loss.0).rev() {
            let Some(&g) = adj.get(&id) else { continue };
            let op = self.nodes[id].op.clone();
            let parents = self.nodes[id].parents.clone();
            match op {
                Op::Leaf => {}
                Op::Add => {
                    self.accumulate(&mut adj, parents[0], g)?;
                    self.accumulate(&mut adj, parents[1], g)?;
                }
                Op::Sub => {
                    self.accumulate(&mut adj, parents[0], g)?;
                    if self.nodes[parents[1].0].requires_grad {
                        let n = self.neg(g);
                        self.accumulate(&mut adj, parents[1], n)?;
                    }
                }
                Op::Mul => {
                    let (a, b) = (parents[0], parents[1]);
                    if self.nodes[a.0].requires_grad {
                        let c = self.mul(g, b)?;
                        self.accumulate(&mut adj, a, c)?;
                    }
                    if self.nodes[b.0].requires_grad {
                        let c = self.mul(g, a)?;
                        self.accumulate(&mut adj, b, c)?;
                    }
                }
                Op::Affine { scale } => {
                    if self.nodes[parents[0].0].requires_grad {
                        let c = self.scale(g, scale);
                        self.accumulate(&mut adj, parents[0], c)?;
                    }
                }
                Op::Matmul => {
                    let (a, b) = (parents[0], parents[1]);
                    if self.nodes[a.0].requires_grad {
                        let bt = self.transpose2(b)?;
                        let c = self.matmul(g, bt)?;
                        self.accumulate(&mut adj, a, c)?;
                    }
                    if self.nodes[b.0].requires_grad {
                        let at = self.transpose2(a)?;
                        let c = self.matmul(at, g)?;
                        self.accumulate(&mut adj, b, c)?;
                    }
                }
                Op::Conv2d => {
                    let (x, w) = (parents[0], parents[1]);
                    if self.nodes[x.0].requires_grad {
                        let c = self.conv_bwd_input(g, w);
                        self.accumulate(&mut adj, x, c)?;
                    }
                    if self.nodes[w.0].requires_grad {
                        let c = self.conv_bwd_weight(x, g);
                        self.accumulate(&mut adj, w, c)?;
                    }
                }
                Op::ConvBwdInput => {
                    // u = conv_bwd_input(gy, w); upstream g is x-shaped.
                    let (gy, w) = (parents[0], parents[1]);
                    if self.nodes[gy.0].requires_grad {
                        let c = self.conv2d(g, w)?;
                        self.accumulate(&mut adj, gy, c)?;
                    }
                    if self.nodes[w.0].requires_grad {
                        let c = self.conv_bwd_weight(g, gy);
                        self.accumulate(&mut adj, w, c)?;
                    }
                }
                Op::ConvBwdWeight => {
                    // v = conv_bwd_weight(x, gy); upstream g is w-shaped.
                    let (x, gy) = (parents[0], parents[1]);
                    if self.nodes[x.0].requires_grad {
                        let c = self.conv_bwd_input(gy, g);
                        self.accumulate(&mut adj, x, c)?;
                    }
                    if self.nodes[gy.0].requires_grad {
                        let c = self.conv2d(x, g)?;
                        self.accumulate(&mut adj, gy, c)?;
                    }
                }
                Op::Permute(axes) => {
                    if self.nodes[parents[0].0].requires_grad {
                        let mut inv = vec![0usize; axes.len()];
                        for (i, &ax) in axes.iter().enumerate() {
                            inv[ax] = i;
                        }
                        let c = self.permute(g, &inv)?;
                        self.accumulate(&mut adj, parents[0], c)?;
                    }
                }
                Op::Reshape => {
                    if self.nodes[parents[0].0].requires_grad {
                        let shape = self.shape(parents[0]).to_vec();
                        let c = self.reshape(g, shape)?;
                        self.accumulate(&mut adj, parents[0], c)?;
                    }
                }
                Op::BroadcastTo => {
                    if self.nodes[parents[0].0].requires_grad {
                        let src = self.shape(parents[0]).to_vec();
                        let dst = self.shape(NodeId(id)).to_vec();
                        let stretched: Vec<usize> = (0..src.len())
                            .filter(|&d| src[d] == 1 && dst[d] != 1)
                            .collect();
                        let c = if stretched.is_empty() {
                            self.reshape(g, src)?
                        } else {
                            let r = self.reduce_sum(g, &stretched, true)?;
                            self.reshape(r, src)?
                        };
                        self.accumulate(&mut adj, parents[0], c)?;
                    }
                }
                Op::ReduceSum { axes, keepdims } => {
                    if self.nodes[parents[0].0].requires_grad {
                        let src = self.shape(parents[0]).to_vec();
                        let mut keep_shape = src.clone();
                        for &ax in &axes {
                            keep_shape[ax] = 1;
                        }
                        let g2 = if keepdims { g } else { self.reshape(g, keep_shape)? };
                        let c = self.broadcast_to(g2, src)?;
                        self.accumulate(&mut adj, parents[0], c)?;
                    }
                }
                Op::Relu => {
                    if self.nodes[parents[0].0].requires_grad {
                        let mask = map(self.value(parents[0]), |x| if x > 0.0 { 1.0 } else { 0.0 });
                        let m = self.constant(mask);
                        let c = self.mul(g, m)?;
                        self.accumulate(&mut adj, parents[0], c)?;
                    }
                }
                Op::Exp => {
                    if self.nodes[parents[0].0].requires_grad {
                        let c = self.mul(g, NodeId(id))?;
                        self.accumulate(&mut adj, parents[0], c)?;
                    }
                }
                Op::Ln => {
                    if self.nodes[parents[0].0].requires_grad {
                        let r = self.recip(parents[0])?;
                        let c = self.mul(g, r)?;
                        self.accumulate(&mut adj, parents[0], c)?;
                    }
                }
                Op::Sqrt => {
                    if self.nodes[parents[0].0].requires_grad {
                        let r = self.recip(NodeId(id))?;
                        let gr = self.mul(g, r)?;
                        let c = self.scale(gr, 0.5);
                        self.accumulate(&mut adj, parents[0], c)?;
                    }
                }
                Op::Recip => {
                    if self.nodes[parents[0].0].requires_grad {
                        let y2 = self.mul(NodeId(id), NodeId(id))?;
                        let gy = self.mul(g, y2)?;
                        let c = self.neg(gy);
                        self.accumulate(&mut adj, parents[0], c)?;
                    }
                }
                Op::Gather { map } => {
                    if self.nodes[parents[0].0].requires_grad {
                        let shape = self.shape(parents[0]).to_vec();
                        let c = self.scatter_add(g, map, shape)?;
                        self.accumulate(&mut adj, parents[0], c)?;
                    }
                }
                Op::ScatterAdd { map } => {
                    if self.nodes[parents[0].0].requires_grad {
                        let shape = self.shape(parents[0]).to_vec();
                        let c = self.gather(g, map, shape)?;
                        self.accumulate(&mut adj, parents[0], c)?;
                    }
                }
                Op::Concat0 => {
                    let tail: usize = self.shape(NodeId(id))[1..].iter().product();
                    let mut offset = 0usize;
                    for &p in &parents {
                        let rows = self.shape(p)[0];
                        if self.nodes[p.0].requires_grad {
                            let map: Vec<usize> =
                                (offset * tail..(offset + rows) * tail).collect();
                            let shape = self.shape(p).to_vec();
                            let c = self.gather(g, Arc::new(map), shape)?;
                            self.accumulate(&mut adj, p, c)?;
                        }
                        offset += rows;
                    }
                }
            }
        }
        Ok(adj)
    }

    fn accumulate(
        &mut self,
        adj: &mut HashMap<usize, NodeId>,
        parent: NodeId,
        contrib: NodeId,
    ) -> Result<()> {
        if !self.nodes[parent.0].requires_grad {
            return Ok(());
        }
        match adj.get(&parent.0) {
            None => {
                adj.insert(parent.0, contrib);
            }
            Some(&prev) => {
                let s = self.add(prev, contrib)?;
                adj.insert(parent.0, s);
            }
        }
        Ok(())
    }
}

// ---- value kernels -----------------------------------------------------------

fn map(a: &NdArray, f: impl Fn(f64) -> f64) -> NdArray {
    let data = a.data().iter().map(|&x| f(x)).collect();
    NdArray::new(a.shape().to_vec(), data).expect("map preserves shape")
}

fn zip(a: &NdArray, b: &NdArray, f: impl Fn(f64, f64) -> f64) -> NdArray {
    let data = a.data().iter().zip(b.data()).map(|(&x, &y)| f(x, y)).collect();
    NdArray::new(a.shape().to_vec(), data).expect("zip preserves shape")
}

fn permute_value(a: &NdArray, axes: &[usize]) -> NdArray {
    let src_shape = a.shape();
    let dst_shape: Vec<usize> = axes.iter().map(|&ax| src_shape[ax]).collect();
    let src_strides = a.strides();
    let mut out = NdArray::zeros(&dst_shape);
    let rank = axes.len();
    let mut idx = vec![0usize; rank];
    let data = a.data();
    for slot in 0..out.len() {
        let mut off = 0;
        for d in 0..rank {
            off += idx[d] * src_strides[axes[d]];
        }
        out.data_mut()[slot] = data[off];
        for d in (0..rank).rev() {
            idx[d] += 1;
            if idx[d] < dst_shape[d] {
                break;
            }
            idx[d] = 0;
        }
    }
    out
}

fn broadcast_value(a: &NdArray, shape: &[usize]) -> NdArray {
    let src_shape = a.shape();
    let src_strides = a.strides();
    let rank = shape.len();
    let mut out = NdArray::zeros(shape);
    let mut idx = vec![0usize; rank];
    let data = a.data();
    for slot in 0..out.len() {
        let mut off = 0;
        for d in 0..rank {
            if src_shape[d] != 1 {
                off += idx[d] * src_strides[d];
            }
        }
        out.data_mut()[slot] = data[off];
        for d in (0..rank).rev() {
            idx[d] += 1;
            if idx[d] < shape[d] {
                break;
            }
            idx[d] = 0;
        }
    }
    out
}

fn reduce_sum_value(a: &NdArray, reduced: &[bool], keepdims: bool) -> NdArray {
    let src_shape = a.shape();
    let rank = src_shape.len();
    let mut out_shape: Vec<usize> = Vec::new();
    for d in 0..rank {
        if reduced[d] {
            if keepdims {
                out_shape.push(1);
            }
        } else {
            out_shape.push(src_shape[d]);
        }
    }
    if out_shape.is_empty() {
        out_shape.push(1);
    }
    let mut out = NdArray::zeros(&out_shape);
    // Destination stride for each source axis (0 when reduced away).
    let mut dst_strides = vec![0usize; rank];
    {
        let mut stride = 1usize;
        for d in (0..rank).rev() {
            if !reduced[d] {
                dst_strides[d] = stride;
                stride *= src_shape[d];
            } else if keepdims {
                dst_strides[d] = 0;
            }
        }
    }
    let mut idx = vec![0usize; rank];
    let data = a.data();
    for (slot, &v) in data.iter().enumerate() {
        let _ = slot;
        let mut off = 0;
        for d in 0..rank {
            off += idx[d] * dst_strides[d];
        }
        out.data_mut()[off] += v;
        for d in (0..rank).rev() {
            idx[d] += 1;
            if idx[d] < src_shape[d] {
                break;
            }
            idx[d] = 0;
        }
    }
    out
}

/// Work is split by output rows; each entry is accumulated sequentially
/// by exactly one task, so the result does not depend on thread count.
fn matmul_value(a: &NdArray, b: &NdArray) -> NdArray {
    let (m, k) = (a.shape()[0], a.shape()[1]);
    let n = b.shape()[1];
    let mut out = NdArray::zeros(&[m, n]);
    let ad = a.data();
    let bd = b.data();
    par::for_each_chunk_mut(out.data_mut(), n, |i, row| {
        for p in 0..k {
            let av = ad[i * k + p];
            if av == 0.0 {
                continue;
            }
            let brow = &bd[p * n..(p + 1) * n];
            for (j, r) in row.iter_mut().enumerate() {
                *r += av * brow[j];
            }
        }
    });
    out
}

fn conv2d_value(x: &NdArray, w: &NdArray) -> NdArray {
    let (b, ci, h, wd) = (x.shape()[0], x.shape()[1], x.shape()[2], x.shape()[3]);
    let co = w.shape()[0];
    let mut out = NdArray::zeros(&[b, co, h, wd]);
    let xd = x.data();
    let kd = w.data();
    let plane = h * wd;
    par::for_each_chunk_mut(out.data_mut(), co * plane, |bi, chunk| {
        for o in 0..co {
            for i in 0..h {
                for j in 0..wd {
                    let mut acc = 0.0;
                    for c in 0..ci {
                        let xbase = (bi * ci + c) * plane;
                        let wbase = (o * ci + c) * 9;
                        for dy in 0..3usize {
                            let y = i as isize + dy as isize - 1;
                            if y < 0 || y >= h as isize {
                                continue;
                            }
                            for dx in 0..3usize {
                                let xx = j as isize + dx as isize - 1;
                                if xx < 0 || xx >= wd as isize {
                                    continue;
                                }
                                acc += xd[xbase + y as usize * wd + xx as usize]
                                    * kd[wbase + dy * 3 + dx];
                            }
                        }
                    }
                    chunk[o * plane + i * wd + j] = acc;
                }
            }
        }
    });
    out
}

fn conv_bwd_input_value(gy: &NdArray, w: &NdArray) -> NdArray {
    let (b, co, h, wd) = (gy.shape()[0], gy.shape()[1], gy.shape()[2], gy.shape()[3]);
    let ci = w.shape()[1];
    let mut out = NdArray::zeros(&[b, ci, h, wd]);
    let gd = gy.data();
    let kd = w.data();
    let plane = h * wd;
    par::for_each_chunk_mut(out.data_mut(), ci * plane, |bi, chunk| {
        for c in 0..ci {
            for u in 0..h {
                for v in 0..wd {
                    let mut acc = 0.0;
                    for o in 0..co {
                        let gbase = (bi * co + o) * plane;
                        let wbase = (o * ci + c) * 9;
                        for dy in 0..3usize {
                            let i = u as isize - (dy as isize - 1);
                            if i < 0 || i >= h as isize {
                                continue;
                            }
                            for dx in 0..3usize {
                                let j = v as isize - (dx as isize - 1);
                                if j < 0 || j >= wd as isize {
                                    continue;
                                }
                                acc += gd[gbase + i as usize * wd + j as usize]
                                    * kd[wbase + dy * 3 + dx];
                            }
                        }
                    }
                    chunk[c * plane + u * wd + v] = acc;
                }
            }
        }
    });
    out
}

fn conv_bwd_weight_value(x: &NdArray, gy: &NdArray) -> NdArray {
    let (b, ci, h, wd) = (x.shape()[0], x.shape()[1], x.shape()[2], x.shape()[3]);
    let co = gy.shape()[1];
    let mut out = NdArray::zeros(&[co, ci, 3, 3]);
    let xd = x.data();
    let gd = gy.data();
    let plane = h * wd;
    par::for_each_chunk_mut(out.data_mut(), ci * 9, |o, chunk| {
        for c in 0..ci {
            for dy in 0..3usize {
                for dx in 0..3usize {
                    let mut acc = 0.0;
                    for bi in 0..b {
                        let gbase = (bi * co + o) * plane;
                        let xbase = (bi * ci + c) * plane;
                        for i in 0..h {
                            let y = i as isize + dy as isize - 1;
                            if y < 0 || y >= h as isize {
                                continue;
                            }
                            for j in 0..wd {
                                let xx = j as isize + dx as isize - 1;
                                if xx < 0 || xx >= wd as isize {
                                    continue;
                                }
                                acc += gd[gbase + i * wd + j]
                                    * xd[xbase + y as usize * wd + xx as usize];
                            }
                        }
                    }
                    chunk[c * 9 + dy * 3 + dx] = acc;
                }
            }
        }
    });
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn backward_of_sum_is_ones() {
        let mut g = Graph::new();
        let x = g.param(NdArray::new(vec![2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap());
        let s = g.sum_all(x).unwrap();
        let grads = g.backward(s).unwrap();
        assert_eq!(grads.get(x).unwrap(), &NdArray::full(&[2, 2], 1.0));
    }

    #[test]
    fn backward_of_sq_norm_is_2x() {
        let mut g = Graph::new();
        let x = g.param(NdArray::new(vec![2], vec![1.0, -2.0]).unwrap());
        let x2 = g.mul(x, x).unwrap();
        let s = g.sum_all(x2).unwrap();
        let grads = g.backward(s).unwrap();
        assert_eq!(grads.get(x).unwrap(), &NdArray::new(vec![2], vec![2.0, -4.0]).unwrap());
    }

    #[test]
    fn backward_rejects_non_scalar_loss() {
        let mut g = Graph::new();
        let x = g.param(NdArray::zeros(&[2, 2]));
        let y = g.relu(x);
        assert!(matches!(g.backward(y), Err(Error::Contract(_))));
    }

    #[test]
    fn untouched_trainable_leaves_get_zeros() {
        let mut g = Graph::new();
        let x = g.param(NdArray::scalar(2.0));
        let unused = g.param(NdArray::zeros(&[3]));
        let y = g.mul(x, x).unwrap();
        let grads = g.backward(y).unwrap();
        assert_eq!(grads.get(unused).unwrap(), &NdArray::zeros(&[3]));
        assert_eq!(grads.get(x).unwrap(), &NdArray::scalar(4.0));
    }

    #[test]
    fn matmul_matches_hand_result() {
        let mut g = Graph::new();
        let a = g.constant(NdArray::new(vec![2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap());
        let b = g.constant(NdArray::new(vec![2, 2], vec![5.0, 6.0, 7.0, 8.0]).unwrap());
        let c = g.matmul(a, b).unwrap();
        assert_eq!(g.value(c).data(), &[19.0, 22.0, 43.0, 50.0]);
    }

    #[test]
    fn second_order_gradient_of_cube() {
        // y = x^3, dy/dx = 3x^2, d2y/dx2 = 6x.
        let mut g = Graph::new();
        let x = g.input(NdArray::scalar(2.0));
        let x2 = g.mul(x, x).unwrap();
        let y = g.mul(x2, x).unwrap();
        let dy = g.grad_nodes(y, &[x]).unwrap()[0];
        assert_eq!(g.value(dy).data()[0], 12.0);
        let d2y = g.grad_nodes(dy, &[x]).unwrap()[0];
        assert_eq!(g.value(d2y).data()[0], 12.0);
    }

    #[test]
    fn gather_scatter_round_trip_adjoints() {
        let mut g = Graph::new();
        let x = g.param(NdArray::new(vec![4], vec![1.0, 2.0, 3.0, 4.0]).unwrap());
        let m = Arc::new(vec![3usize, 0, 3]);
        let y = g.gather(x, m, vec![3]).unwrap();
        assert_eq!(g.value(y).data(), &[4.0, 1.0, 4.0]);
        let s = g.sum_all(y).unwrap();
        let grads = g.backward(s).unwrap();
        assert_eq!(grads.get(x).unwrap().data(), &[1.0, 0.0, 0.0, 2.0]);
    }

    #[test]
    fn reduce_and_broadcast_are_adjoint_pairs() {
        let mut g = Graph::new();
        let x = g.param(NdArray::from_fn(&[2, 3], |i| (i[0] * 3 + i[1]) as f64));
        let s = g.reduce_sum(x, &[1], true).unwrap();
        assert_eq!(g.value(s).data(), &[3.0, 12.0]);
        let b = g.broadcast_to(s, vec![2, 3]).unwrap();
        let t = g.sum_all(b).unwrap();
        let grads = g.backward(t).unwrap();
        assert_eq!(grads.get(x).unwrap(), &NdArray::full(&[2, 3], 3.0));
    }
}
