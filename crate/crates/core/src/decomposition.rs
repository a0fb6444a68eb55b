//! Spectrum tensors, separable kernels, pairwise combination into a
//! synthetic dataset, and storage-budget accounting.
//!
//! A synthetic image block is a 4-mode tensor `T (t1, t2, t3, t4)`
//! decoded by one factor matrix per mode, `K_n (t_n, u_n)`. Every
//! tensor combines with every kernel, so parameters are shared across
//! many synthesized samples; mode 1 is batch-like and yields `u1`
//! images per (tensor, kernel) pair.

use crate::diffmath::{mode_product, Graph, NdArray, NodeId};
use crate::error::{Error, Result};

/// The learnable 4-mode coefficient block for one class (or shared).
#[derive(Debug, Clone, PartialEq)]
pub struct SpectrumTensor {
    pub dims: [usize; 4],
    pub values: NdArray,
    /// Class this tensor synthesizes images for, when the label rule
    /// assigns labels per tensor.
    pub class_id: Option<usize>,
}

impl SpectrumTensor {
    pub fn new(values: NdArray, class_id: Option<usize>) -> Result<Self> {
        if values.rank() != 4 {
            return Err(Error::Dimension(format!(
                "spectrum tensor must have 4 modes, got {:?}",
                values.shape()
            )));
        }
        let dims = [values.shape()[0], values.shape()[1], values.shape()[2], values.shape()[3]];
        Ok(Self { dims, values, class_id })
    }
}

/// One per-mode factor matrix `(t_n, u_n)`.
#[derive(Debug, Clone, PartialEq)]
pub struct KernelFactor {
    /// Mode index in 1..=4.
    pub mode: usize,
    pub values: NdArray,
    pub trainable: bool,
    /// Whether this factor's scalars must be shipped. Frozen analytic
    /// factors (DCT, wavelet, identity) are reconstructible from code
    /// and count zero; anything learned or data-derived counts fully.
    pub counts_storage: bool,
}

impl KernelFactor {
    pub fn new(mode: usize, values: NdArray, trainable: bool, counts_storage: bool) -> Result<Self> {
        if !(1..=4).contains(&mode) {
            return Err(Error::Range(format!("factor mode {mode} not in 1..=4")));
        }
        if values.rank() != 2 {
            return Err(Error::Dimension(format!(
                "factor must be a matrix, got {:?}",
                values.shape()
            )));
        }
        if mode == 1 && values.shape()[0] > values.shape()[1] {
            return Err(Error::Dimension(format!(
                "mode 1 factor needs t1 <= u1, got {:?}",
                values.shape()
            )));
        }
        Ok(Self { mode, values, trainable, counts_storage })
    }

    pub fn in_extent(&self) -> usize {
        self.values.shape()[0]
    }

    pub fn out_extent(&self) -> usize {
        self.values.shape()[1]
    }
}

/// Exactly one factor per mode.
#[derive(Debug, Clone, PartialEq)]
pub struct SeparableKernel {
    pub factors: [KernelFactor; 4],
    pub kernel_id: usize,
}

impl SeparableKernel {
    pub fn new(mut factors: Vec<KernelFactor>, kernel_id: usize) -> Result<Self> {
        if factors.len() != 4 {
            return Err(Error::Contract(format!("kernel needs 4 factors, got {}", factors.len())));
        }
        factors.sort_by_key(|f| f.mode);
        let modes: Vec<usize> = factors.iter().map(|f| f.mode).collect();
        if modes != [1, 2, 3, 4] {
            return Err(Error::Contract(format!("factor modes must be 1..=4 without repeats, got {modes:?}")));
        }
        let f: [KernelFactor; 4] = factors.try_into().expect("length checked");
        Ok(Self { factors: f, kernel_id })
    }

    pub fn in_extents(&self) -> [usize; 4] {
        [0, 1, 2, 3].map(|n| self.factors[n].in_extent())
    }

    pub fn out_extents(&self) -> [usize; 4] {
        [0, 1, 2, 3].map(|n| self.factors[n].out_extent())
    }
}

/// A constructed kernel plus, for data-derived kinds, the spectrum
/// values that go with it.
#[derive(Debug, Clone)]
pub struct FactorBundle {
    pub kernel: SeparableKernel,
    pub spectrum_init: Option<crate::diffmath::NdArray>,
}

/// How synthesized images inherit class labels.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LabelRule {
    /// Tensors are partitioned evenly across classes; kernels are shared.
    PerClassTensors,
    /// Kernels are partitioned evenly across classes; tensors are shared.
    PerClassKernels,
    /// Labels cycle through classes by pair index.
    PerPair,
}

impl LabelRule {
    pub fn name(&self) -> &'static str {
        match self {
            LabelRule::PerClassTensors => "per-class-tensors",
            LabelRule::PerClassKernels => "per-class-kernels",
            LabelRule::PerPair => "per-pair",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "per-class-tensors" => Ok(LabelRule::PerClassTensors),
            "per-class-kernels" => Ok(LabelRule::PerClassKernels),
            "per-pair" => Ok(LabelRule::PerPair),
            other => Err(Error::Config(format!("unknown label rule {other:?}"))),
        }
    }
}

/// Eq.-style storage budget: `C * ipc * channels * H * W` stored scalars.
#[derive(Debug, Clone, PartialEq)]
pub struct BudgetSpec {
    pub num_classes: usize,
    pub ipc: usize,
    /// (channels, height, width)
    pub image_shape: (usize, usize, usize),
}

impl BudgetSpec {
    pub fn new(num_classes: usize, ipc: usize, image_shape: (usize, usize, usize)) -> Result<Self> {
        let (c, h, w) = image_shape;
        if num_classes == 0 || ipc == 0 || c == 0 || h == 0 || w == 0 {
            return Err(Error::Config(format!(
                "budget needs positive classes/ipc/shape, got C={num_classes} ipc={ipc} shape={image_shape:?}"
            )));
        }
        Ok(Self { num_classes, ipc, image_shape })
    }

    pub fn budget_scalars(&self) -> usize {
        let (c, h, w) = self.image_shape;
        self.num_classes * self.ipc * c * h * w
    }

    /// Budget as a percentage of a full training set of `train_images`
    /// images of the same shape.
    pub fn ratio_percent(&self, train_images: usize) -> Result<f64> {
        let (c, h, w) = self.image_shape;
        let full = train_images * c * h * w;
        if full == 0 {
            return Err(Error::Range("ratio against an empty training set".into()));
        }
        let r = 100.0 * self.budget_scalars() as f64 / full as f64;
        if !(r > 0.0 && r <= 100.0) {
            return Err(Error::Range(format!("ratio {r}% outside (0, 100]")));
        }
        Ok(r)
    }
}

/// Where a trainable array lives inside a [`DistillState`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Slot {
    Tensor(usize),
    /// (kernel index, mode index 0..4)
    Factor(usize, usize),
}

/// The full distillation state: tensors, kernels, labelling, and the
/// outer optimizer's velocity buffers and step counter.
#[derive(Debug, Clone, PartialEq)]
pub struct DistillState {
    pub tensors: Vec<SpectrumTensor>,
    pub kernels: Vec<SeparableKernel>,
    pub label_rule: LabelRule,
    pub num_classes: usize,
    pub step: u64,
    pub velocities: Vec<NdArray>,
}

/// Node handles for one graph's view of a state.
#[derive(Debug, Clone)]
pub struct StateNodes {
    pub tensors: Vec<NodeId>,
    pub factors: Vec<[NodeId; 4]>,
}

impl DistillState {
    pub fn new(
        tensors: Vec<SpectrumTensor>,
        kernels: Vec<SeparableKernel>,
        label_rule: LabelRule,
        num_classes: usize,
    ) -> Result<Self> {
        if tensors.is_empty() || kernels.is_empty() {
            return Err(Error::Contract("state needs at least one tensor and one kernel".into()));
        }
        let dims = tensors[0].dims;
        for t in &tensors {
            if t.dims != dims {
                return Err(Error::Dimension(format!(
                    "tensor dims {:?} differ from {:?}",
                    t.dims, dims
                )));
            }
        }
        let out = kernels[0].out_extents();
        for k in &kernels {
            if k.in_extents() != dims {
                return Err(Error::Dimension(format!(
                    "kernel {} in-extents {:?} do not match tensor dims {:?}",
                    k.kernel_id,
                    k.in_extents(),
                    dims
                )));
            }
            if k.out_extents() != out {
                return Err(Error::Dimension(format!(
                    "kernel {} out-extents {:?} differ from {:?}",
                    k.kernel_id,
                    k.out_extents(),
                    out
                )));
            }
        }
        match label_rule {
            LabelRule::PerClassTensors if tensors.len() % num_classes != 0 => {
                return Err(Error::Config(format!(
                    "{} tensors do not partition into {num_classes} classes",
                    tensors.len()
                )));
            }
            LabelRule::PerClassKernels if kernels.len() % num_classes != 0 => {
                return Err(Error::Config(format!(
                    "{} kernels do not partition into {num_classes} classes",
                    kernels.len()
                )));
            }
            _ => {}
        }
        let mut state = Self { tensors, kernels, label_rule, num_classes, step: 0, velocities: vec![] };
        // Persisted values live on the f32 grid from the start, so a
        // zero-lr step (or a save/load) never changes them.
        state.round_to_f32();
        state.velocities = state
            .trainable_slots()
            .iter()
            .map(|s| NdArray::zeros(state.slot_values(*s).shape()))
            .collect();
        if let LabelRule::PerClassTensors = state.label_rule {
            let per = state.tensors.len() / state.num_classes;
            for (i, t) in state.tensors.iter_mut().enumerate() {
                t.class_id = Some(i / per);
            }
        }
        Ok(state)
    }

    pub fn num_tensors(&self) -> usize {
        self.tensors.len()
    }

    pub fn num_kernels(&self) -> usize {
        self.kernels.len()
    }

    pub fn tensor_dims(&self) -> [usize; 4] {
        self.tensors[0].dims
    }

    pub fn image_dims(&self) -> [usize; 4] {
        self.kernels[0].out_extents()
    }

    /// Images per (tensor, kernel) pair.
    pub fn images_per_pair(&self) -> usize {
        self.image_dims()[0]
    }

    pub fn total_images(&self) -> usize {
        self.num_tensors() * self.num_kernels() * self.images_per_pair()
    }

    pub fn trainable_slots(&self) -> Vec<Slot> {
        let mut slots: Vec<Slot> = (0..self.tensors.len()).map(Slot::Tensor).collect();
        for (j, k) in self.kernels.iter().enumerate() {
            for (n, f) in k.factors.iter().enumerate() {
                if f.trainable {
                    slots.push(Slot::Factor(j, n));
                }
            }
        }
        slots
    }

    pub fn slot_values(&self, slot: Slot) -> &NdArray {
        match slot {
            Slot::Tensor(i) => &self.tensors[i].values,
            Slot::Factor(j, n) => &self.kernels[j].factors[n].values,
        }
    }

    pub fn slot_values_mut(&mut self, slot: Slot) -> &mut NdArray {
        match slot {
            Slot::Tensor(i) => &mut self.tensors[i].values,
            Slot::Factor(j, n) => &mut self.kernels[j].factors[n].values,
        }
    }

    /// Range-checked pair index (1-based on both sides).
    pub fn pair_index(&self, i: usize, j: usize) -> Result<usize> {
        if i < 1 || i > self.num_tensors() {
            return Err(Error::Range(format!("tensor index {i} not in 1..={}", self.num_tensors())));
        }
        pair_index(i, j, self.num_kernels())
    }

    /// Class label for the images of pair `(i, j)` (1-based).
    pub fn label_for(&self, i: usize, j: usize) -> Result<usize> {
        let c = self.num_classes;
        Ok(match self.label_rule {
            LabelRule::PerClassTensors => (i - 1) / (self.num_tensors() / c),
            LabelRule::PerClassKernels => (j - 1) / (self.num_kernels() / c),
            LabelRule::PerPair => (self.pair_index(i, j)? - 1) % c,
        })
    }

    /// Insert this state's arrays into a graph: trainable values become
    /// trainable leaves, frozen factors become constants.
    pub fn emit_nodes(&self, g: &mut Graph) -> StateNodes {
        let tensors = self.tensors.iter().map(|t| g.param(t.values.clone())).collect();
        let factors = self
            .kernels
            .iter()
            .map(|k| {
                [0, 1, 2, 3].map(|n| {
                    let f = &k.factors[n];
                    if f.trainable {
                        g.param(f.values.clone())
                    } else {
                        g.constant(f.values.clone())
                    }
                })
            })
            .collect();
        StateNodes { tensors, factors }
    }

    /// Synthesize every requested pair into one image block, ordered by
    /// pair index then mode-1 slot, with labels from the label rule.
    pub fn synthesize_dataset(
        &self,
        g: &mut Graph,
        nodes: &StateNodes,
        selection: Option<&[(usize, usize)]>,
    ) -> Result<(NodeId, Vec<usize>)> {
        let all: Vec<(usize, usize)>;
        let pairs: &[(usize, usize)] = match selection {
            Some(s) => s,
            None => {
                all = (1..=self.num_tensors())
                    .flat_map(|i| (1..=self.num_kernels()).map(move |j| (i, j)))
                    .collect();
                &all
            }
        };
        if pairs.is_empty() {
            return Err(Error::Range("synthesize_dataset: empty pair selection".into()));
        }
        let mut blocks = Vec::with_capacity(pairs.len());
        let mut labels = Vec::with_capacity(pairs.len() * self.images_per_pair());
        for &(i, j) in pairs {
            self.pair_index(i, j)?;
            let block = synthesize_pair(g, nodes.tensors[i - 1], &nodes.factors[j - 1])?;
            blocks.push(block);
            let label = self.label_for(i, j)?;
            labels.extend(std::iter::repeat(label).take(self.images_per_pair()));
        }
        let images = g.concat0(&blocks)?;
        Ok((images, labels))
    }

    /// Detached synthesis: plain image values and labels, no gradients.
    pub fn synthesize_values(&self) -> Result<(NdArray, Vec<usize>)> {
        let mut g = Graph::new();
        let nodes = self.emit_nodes(&mut g);
        let (images, labels) = self.synthesize_dataset(&mut g, &nodes, None)?;
        Ok((g.value(images).clone(), labels))
    }

    /// Stored-scalar count: spectrum entries plus every factor that must
    /// be shipped.
    pub fn parameter_count(&self) -> usize {
        let tensor_scalars: usize =
            self.tensors.iter().map(|t| t.dims.iter().product::<usize>()).sum();
        let kernel_scalars: usize = self
            .kernels
            .iter()
            .map(|k| {
                k.factors
                    .iter()
                    .filter(|f| f.counts_storage)
                    .map(|f| f.in_extent() * f.out_extent())
                    .sum::<usize>()
            })
            .sum();
        tensor_scalars + kernel_scalars
    }

    /// Snap all persisted arrays to the f32 grid.
    pub fn round_to_f32(&mut self) {
        for t in &mut self.tensors {
            t.values.round_to_f32();
        }
        for k in &mut self.kernels {
            for f in &mut k.factors {
                f.values.round_to_f32();
            }
        }
        for v in &mut self.velocities {
            v.round_to_f32();
        }
    }
}

impl DistillState {
    /// Serialize into the shared tensor-container format: arrays
    /// `spectrum/<i>`, `kernel/<j>/mode<n>`, `velocity/<k>`, `labels`,
    /// plus metadata for extents, flags, the label rule, and the step
    /// counter.
    pub fn to_container(&self) -> Result<crate::container::TensorContainer> {
        use crate::container::TensorContainer;
        let mut c = TensorContainer::new();
        for (i, t) in self.tensors.iter().enumerate() {
            c.insert_array(&format!("spectrum/{i}"), &t.values)?;
            if let Some(class) = t.class_id {
                c.insert_meta(&format!("class_t{i}"), &class.to_string())?;
            }
        }
        for (j, k) in self.kernels.iter().enumerate() {
            for (n, f) in k.factors.iter().enumerate() {
                c.insert_array(&format!("kernel/{j}/mode{}", n + 1), &f.values)?;
                c.insert_meta(
                    &format!("flags_k{j}m{}", n + 1),
                    &format!("{}{}", f.trainable as u8, f.counts_storage as u8),
                )?;
            }
        }
        for (k, v) in self.velocities.iter().enumerate() {
            c.insert_array(&format!("velocity/{k}"), v)?;
        }
        let labels: Vec<f64> = {
            let mut out = Vec::new();
            for i in 1..=self.num_tensors() {
                for j in 1..=self.num_kernels() {
                    let label = self.label_for(i, j)? as f64;
                    out.extend(std::iter::repeat(label).take(self.images_per_pair()));
                }
            }
            out
        };
        c.insert_array("labels", &NdArray::new(vec![labels.len()], labels)?)?;
        c.insert_meta("tensors", &self.num_tensors().to_string())?;
        c.insert_meta("kernels", &self.num_kernels().to_string())?;
        c.insert_meta("label_rule", self.label_rule.name())?;
        c.insert_meta("classes", &self.num_classes.to_string())?;
        c.insert_meta("step", &self.step.to_string())?;
        Ok(c)
    }

    pub fn from_container(c: &crate::container::TensorContainer) -> Result<Self> {
        let n_t: usize = c.require_meta("tensors")?.parse().map_err(|_| bad_meta("tensors"))?;
        let n_k: usize = c.require_meta("kernels")?.parse().map_err(|_| bad_meta("kernels"))?;
        let classes: usize =
            c.require_meta("classes")?.parse().map_err(|_| bad_meta("classes"))?;
        let step: u64 = c.require_meta("step")?.parse().map_err(|_| bad_meta("step"))?;
        let label_rule = LabelRule::parse(c.require_meta("label_rule")?)?;
        let mut tensors = Vec::with_capacity(n_t);
        for i in 0..n_t {
            let values = c.get_array(&format!("spectrum/{i}"))?;
            let class_id = c
                .get_meta(&format!("class_t{i}"))
                .map(|s| s.parse().map_err(|_| bad_meta("class")))
                .transpose()?;
            tensors.push(SpectrumTensor::new(values, class_id)?);
        }
        let mut kernels = Vec::with_capacity(n_k);
        for j in 0..n_k {
            let mut factors = Vec::with_capacity(4);
            for mode in 1..=4usize {
                let values = c.get_array(&format!("kernel/{j}/mode{mode}"))?;
                let flags = c.require_meta(&format!("flags_k{j}m{mode}"))?;
                let bytes = flags.as_bytes();
                if bytes.len() != 2 {
                    return Err(bad_meta("flags"));
                }
                factors.push(KernelFactor::new(
                    mode,
                    values,
                    bytes[0] == b'1',
                    bytes[1] == b'1',
                )?);
            }
            kernels.push(SeparableKernel::new(factors, j)?);
        }
        let mut state = DistillState::new(tensors, kernels, label_rule, classes)?;
        state.step = step;
        for k in 0..state.velocities.len() {
            state.velocities[k] = c.get_array(&format!("velocity/{k}"))?;
        }
        Ok(state)
    }
}

fn bad_meta(what: &str) -> Error {
    Error::Data(format!("metadata {what:?} is malformed"))
}

/// Eq.-style global image index: `j + (i - 1) * n_k`, 1-based.
/// The tensor-side upper bound is the caller's to enforce;
/// [`DistillState::pair_index`] checks both sides.
pub fn pair_index(i: usize, j: usize, n_k: usize) -> Result<usize> {
    if i < 1 {
        return Err(Error::Range(format!("tensor index {i} must be >= 1")));
    }
    if j < 1 || j > n_k {
        return Err(Error::Range(format!("kernel index {j} not in 1..={n_k}")));
    }
    Ok(j + (i - 1) * n_k)
}

/// Decode one spectrum tensor through four chained mode products.
pub fn synthesize_pair(g: &mut Graph, tensor: NodeId, factors: &[NodeId; 4]) -> Result<NodeId> {
    let mut x = tensor;
    for (mode, &f) in factors.iter().enumerate() {
        x = mode_product(g, x, f, mode)?;
    }
    Ok(x)
}

#[derive(Debug, Clone, PartialEq)]
pub struct BudgetReport {
    pub ok: bool,
    pub stored: usize,
    pub allowed: usize,
    pub utilization: f64,
}

/// Compare stored scalars against the allowance. Reports, never errors:
/// an over-budget state is a finding.
pub fn budget_check(state: &DistillState, budget: &BudgetSpec) -> BudgetReport {
    let stored = state.parameter_count();
    let allowed = budget.budget_scalars();
    BudgetReport {
        ok: stored <= allowed,
        stored,
        allowed,
        utilization: stored as f64 / allowed as f64,
    }
}

pub const DEFAULT_ORACLE_CAP: usize = 1_000_000;

/// Materialize the dense 8-mode kernel
/// `K[a,b,c,d,p,q,r,s] = k1[a,p] k2[b,q] k3[c,r] k4[d,s]`.
/// Test oracle only; refuses to build anything above `cap` entries.
pub fn compose_full_kernel(kernel: &SeparableKernel, cap: usize) -> Result<NdArray> {
    let t = kernel.in_extents();
    let u = kernel.out_extents();
    let size: usize = t.iter().chain(u.iter()).product();
    if size > cap {
        return Err(Error::OracleCap { size, cap });
    }
    let mut shape = t.to_vec();
    shape.extend_from_slice(&u);
    let f = &kernel.factors;
    Ok(NdArray::from_fn(&shape, |idx| {
        f[0].values.at(&[idx[0], idx[4]])
            * f[1].values.at(&[idx[1], idx[5]])
            * f[2].values.at(&[idx[2], idx[6]])
            * f[3].values.at(&[idx[3], idx[7]])
    }))
}

/// Contract a 4-mode tensor against a dense 8-mode kernel (oracle path).
pub fn contract_full(t: &NdArray, full: &NdArray) -> Result<NdArray> {
    if t.rank() != 4 || full.rank() != 8 || full.shape()[..4] != *t.shape() {
        return Err(Error::Dimension(format!(
            "contract_full: tensor {:?} against kernel {:?}",
            t.shape(),
            full.shape()
        )));
    }
    let u = &full.shape()[4..];
    let out_shape = u.to_vec();
    let t_shape = t.shape().to_vec();
    Ok(NdArray::from_fn(&out_shape, |uidx| {
        let mut acc = 0.0;
        let mut tidx = [0usize; 4];
        loop {
            let mut fidx = [0usize; 8];
            fidx[..4].copy_from_slice(&tidx);
            fidx[4..].copy_from_slice(uidx);
            acc += t.at(&tidx) * full.at(&fidx);
            // advance tidx
            let mut d = 3usize;
            loop {
                tidx[d] += 1;
                if tidx[d] < t_shape[d] {
                    break;
                }
                tidx[d] = 0;
                if d == 0 {
                    return acc;
                }
                d -= 1;
            }
        }
    }))
}

/// The resolved dimension plan for a decomposition.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct DimsPlan {
    pub t: [usize; 4],
    pub u: [usize; 4],
}

/// Spatial schedule: half resolution for ipc <= 10, else 7/8.
pub fn schedule_spatial(extent: usize, ipc: usize) -> usize {
    if ipc <= 10 {
        (extent / 2).max(1)
    } else {
        ((7 * extent + 7) / 8).max(1)
    }
}

fn stored_for(n_t: usize, n_k: usize, t: [usize; 4], u: [usize; 4]) -> usize {
    let v: usize = t.iter().product();
    let kernel: usize = (0..4).map(|n| t[n] * u[n]).sum();
    n_t * v + n_k * kernel
}

/// Resolve "auto" dims for learnable (stored) kernels: t2 binds to the
/// channel count, t3/t4 follow the spatial schedule, and t1 is maximized
/// greedily subject to the budget and t1 < u1. When `u1` is not given it
/// takes the smallest admissible value, t1 + 1.
pub fn auto_dims(
    budget: &BudgetSpec,
    n_tensors: usize,
    n_kernels: usize,
    u1: Option<usize>,
) -> Result<DimsPlan> {
    let (c, h, w) = budget.image_shape;
    let (t3, t4) = (schedule_spatial(h, budget.ipc), schedule_spatial(w, budget.ipc));
    let allowed = budget.budget_scalars();
    let feasible = |t1: usize, u1: usize| {
        stored_for(n_tensors, n_kernels, [t1, c, t3, t4], [u1, c, h, w]) <= allowed
    };
    let (t1, u1) = match u1 {
        Some(u1) => {
            let mut best = None;
            for t1 in (1..u1).rev() {
                if feasible(t1, u1) {
                    best = Some(t1);
                    break;
                }
            }
            match best {
                Some(t1) => (t1, u1),
                None => {
                    return Err(Error::Config(format!(
                        "no feasible t1 < {u1} under budget {allowed}"
                    )))
                }
            }
        }
        None => {
            let cap = allowed / (n_tensors * c * t3 * t4).max(1) + 1;
            let mut best = None;
            for t1 in (1..=cap).rev() {
                if feasible(t1, t1 + 1) {
                    best = Some((t1, t1 + 1));
                    break;
                }
            }
            match best {
                Some(pair) => pair,
                None => {
                    return Err(Error::Config(format!(
                        "no feasible (t1, u1) under budget {allowed}"
                    )))
                }
            }
        }
    };
    Ok(DimsPlan { t: [t1, c, t3, t4], u: [u1, c, h, w] })
}

/// Raw-pixel state at the same budget: identity frozen kernels, one
/// tensor per class shaped like an image stack. This is the
/// "decomposition off" arm.
pub fn raw_pixel_state(
    budget: &BudgetSpec,
    init: impl FnMut(&[usize]) -> NdArray,
) -> Result<DistillState> {
    let mut init = init;
    let (c, h, w) = budget.image_shape;
    let dims = [budget.ipc, c, h, w];
    let tensors: Vec<SpectrumTensor> = (0..budget.num_classes)
        .map(|class| SpectrumTensor::new(init(&dims), Some(class)))
        .collect::<Result<_>>()?;
    let factors: Vec<KernelFactor> = (1..=4)
        .map(|mode| KernelFactor::new(mode, NdArray::identity(dims[mode - 1]), false, false))
        .collect::<Result<_>>()?;
    let kernel = SeparableKernel::new(factors, 0)?;
    DistillState::new(tensors, vec![kernel], LabelRule::PerClassTensors, budget.num_classes)
}
