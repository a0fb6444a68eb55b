//! Expert-trajectory generation and the distillation loop: unrolled
//! student training on synthetic data, match loss against expert
//! segments, real-guided loss, and the combined outer update.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::dataset::Dataset;
use crate::decomposition::{DistillState, Slot};
use crate::diffmath::{run_unrolled_sgd, Graph, InnerBatch, NdArray, NodeId};
use crate::error::{Error, Result};
use crate::models::{
    build_model, forward_features, forward_loss, param_distance, sgd_step, ModelSpec, ParamVector,
};
use crate::rng::SeedSplitter;

/// Ordered parameter snapshots from training one teacher.
#[derive(Debug, Clone, PartialEq)]
pub struct Trajectory {
    pub snapshots: Vec<ParamVector>,
    pub spec: ModelSpec,
    pub seed: u64,
    /// Epochs between consecutive snapshots.
    pub stride: usize,
}

impl Trajectory {
    pub fn validate(&self) -> Result<()> {
        if self.snapshots.len() < 2 {
            return Err(Error::Config(format!(
                "trajectory needs >= 2 snapshots, got {}",
                self.snapshots.len()
            )));
        }
        let layout = self.snapshots[0].layout();
        if self.snapshots.iter().any(|s| s.layout() != layout) {
            return Err(Error::Contract("trajectory snapshots disagree on layout".into()));
        }
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.snapshots.len()
    }

    pub fn is_empty(&self) -> bool {
        self.snapshots.is_empty()
    }
}

/// Persisted teacher trajectories plus the fingerprint of the data they
/// were trained on.
#[derive(Debug, Clone, PartialEq)]
pub struct ExpertBank {
    pub trajectories: Vec<Trajectory>,
    pub fingerprint: String,
}

impl ExpertBank {
    pub fn new(trajectories: Vec<Trajectory>, fingerprint: String) -> Result<Self> {
        if trajectories.is_empty() {
            return Err(Error::Contract("expert bank is empty".into()));
        }
        let spec = trajectories[0].spec.clone();
        for t in &trajectories {
            t.validate()?;
            if t.spec != spec {
                return Err(Error::Contract("expert bank mixes model specs".into()));
            }
        }
        Ok(Self { trajectories, fingerprint })
    }

    pub fn spec(&self) -> &ModelSpec {
        &self.trajectories[0].spec
    }
}

impl Trajectory {
    /// One container per trajectory: `theta/<t>` flat arrays plus the
    /// model spec, seed, stride, and dataset fingerprint.
    pub fn to_container(&self, fingerprint: &str) -> Result<crate::container::TensorContainer> {
        use crate::container::TensorContainer;
        self.validate()?;
        let mut c = TensorContainer::new();
        for (t, snap) in self.snapshots.iter().enumerate() {
            let flat = NdArray::new(vec![snap.flat().len()], snap.flat().to_vec())?;
            c.insert_array(&format!("theta/{t}"), &flat)?;
        }
        let family = match self.spec.family {
            crate::models::ModelFamily::ConvNet => "convnet",
            crate::models::ModelFamily::Mlp => "mlp",
        };
        c.insert_meta("family", family)?;
        c.insert_meta("depth", &self.spec.depth.to_string())?;
        c.insert_meta("width", &self.spec.width.to_string())?;
        let (ic, ih, iw) = self.spec.input_shape;
        c.insert_meta("input", &format!("{ic}x{ih}x{iw}"))?;
        c.insert_meta("classes", &self.spec.num_classes.to_string())?;
        c.insert_meta("seed", &self.seed.to_string())?;
        c.insert_meta("stride", &self.stride.to_string())?;
        c.insert_meta("snapshots", &self.snapshots.len().to_string())?;
        c.insert_meta("fingerprint", fingerprint)?;
        Ok(c)
    }

    /// Returns the trajectory and the fingerprint it was stored with.
    pub fn from_container(c: &crate::container::TensorContainer) -> Result<(Self, String)> {
        let meta_err = |k: &str| Error::Data(format!("trajectory metadata {k:?} is malformed"));
        let family = match c.require_meta("family")? {
            "convnet" => crate::models::ModelFamily::ConvNet,
            "mlp" => crate::models::ModelFamily::Mlp,
            other => return Err(Error::Data(format!("unknown model family {other:?}"))),
        };
        let depth: usize = c.require_meta("depth")?.parse().map_err(|_| meta_err("depth"))?;
        let width: usize = c.require_meta("width")?.parse().map_err(|_| meta_err("width"))?;
        let input = c.require_meta("input")?;
        let parts: Vec<usize> = input
            .split('x')
            .map(|p| p.parse().map_err(|_| meta_err("input")))
            .collect::<Result<_>>()?;
        if parts.len() != 3 {
            return Err(meta_err("input"));
        }
        let classes: usize = c.require_meta("classes")?.parse().map_err(|_| meta_err("classes"))?;
        let seed: u64 = c.require_meta("seed")?.parse().map_err(|_| meta_err("seed"))?;
        let stride: usize = c.require_meta("stride")?.parse().map_err(|_| meta_err("stride"))?;
        let count: usize =
            c.require_meta("snapshots")?.parse().map_err(|_| meta_err("snapshots"))?;
        let fingerprint = c.require_meta("fingerprint")?.to_string();
        let spec = ModelSpec {
            family,
            depth,
            width,
            input_shape: (parts[0], parts[1], parts[2]),
            num_classes: classes,
        };
        spec.validate()?;
        let layout = spec.layout();
        let mut snapshots = Vec::with_capacity(count);
        for t in 0..count {
            let flat = c.get_array(&format!("theta/{t}"))?;
            snapshots.push(ParamVector::from_flat(layout.clone(), flat.into_data())?);
        }
        let traj = Trajectory { snapshots, spec, seed, stride };
        traj.validate()?;
        Ok((traj, fingerprint))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ExpertConfig {
    pub epochs: usize,
    pub snapshot_stride: usize,
    pub lr: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    pub batch_size: usize,
}

impl Default for ExpertConfig {
    fn default() -> Self {
        Self { epochs: 20, snapshot_stride: 1, lr: 0.01, momentum: 0.9, weight_decay: 5e-4, batch_size: 32 }
    }
}

/// SGD on real data, snapshotting every `snapshot_stride` epochs
/// (the initialization included). Deterministic per seed.
pub fn train_expert(
    dataset: &Dataset,
    spec: &ModelSpec,
    cfg: &ExpertConfig,
    seed: u64,
) -> Result<Trajectory> {
    if dataset.is_empty() {
        return Err(Error::Data("expert training on an empty dataset".into()));
    }
    if cfg.epochs == 0 {
        return Err(Error::Config("expert training needs >= 1 epoch (trajectory length >= 2)".into()));
    }
    if cfg.snapshot_stride == 0 {
        return Err(Error::Config("snapshot stride must be >= 1".into()));
    }
    let mut params = build_model(spec, seed)?;
    let mut velocity = vec![0.0; params.flat().len()];
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x9e37_79b9_7f4a_7c15);
    let mut snapshots = vec![snapshot_of(&params)];
    let n = dataset.len();
    for epoch in 1..=cfg.epochs {
        let mut order: Vec<usize> = (0..n).collect();
        for i in (1..n).rev() {
            let j = rng.gen_range(0..=i);
            order.swap(i, j);
        }
        for chunk in order.chunks(cfg.batch_size.max(1)) {
            let (images, labels) = dataset.subset(chunk)?;
            sgd_step(
                spec,
                &mut params,
                &mut velocity,
                &images,
                &labels,
                cfg.lr,
                cfg.momentum,
                cfg.weight_decay,
            )?;
        }
        if epoch % cfg.snapshot_stride == 0 || epoch == cfg.epochs {
            snapshots.push(snapshot_of(&params));
        }
    }
    let traj = Trajectory { snapshots, spec: spec.clone(), seed, stride: cfg.snapshot_stride };
    traj.validate()?;
    Ok(traj)
}

fn snapshot_of(params: &ParamVector) -> ParamVector {
    let mut s = params.clone();
    s.round_to_f32();
    s
}

#[derive(Debug, Clone, PartialEq)]
pub struct DistillConfig {
    /// Inner unrolled steps N.
    pub inner_steps: usize,
    /// Expert span M: the target snapshot is M strides ahead of the start.
    pub expert_span: usize,
    pub inner_lr: f64,
    pub inner_momentum: f64,
    /// Weight of the real-guided loss. Zero disables it entirely.
    pub guided_weight: f64,
    pub outer_lr: f64,
    pub outer_momentum: f64,
    pub iterations: u64,
    pub batch_size: usize,
    pub real_batch_size: usize,
    pub normalize_match: bool,
    pub checkpoint_interval: u64,
}

impl Default for DistillConfig {
    fn default() -> Self {
        Self {
            inner_steps: 10,
            expert_span: 2,
            inner_lr: 0.02,
            inner_momentum: 0.0,
            guided_weight: 0.1,
            outer_lr: 100.0,
            outer_momentum: 0.9,
            iterations: 1000,
            batch_size: 32,
            real_batch_size: 32,
            normalize_match: true,
            checkpoint_interval: 100,
        }
    }
}

impl DistillConfig {
    pub fn validate(&self) -> Result<()> {
        if self.inner_steps < 1 {
            return Err(Error::Config("inner_steps must be >= 1".into()));
        }
        if self.expert_span < 1 {
            return Err(Error::Config("expert_span must be >= 1".into()));
        }
        if self.inner_lr <= 0.0 {
            return Err(Error::Config("inner_lr must be positive".into()));
        }
        if self.guided_weight < 0.0 {
            return Err(Error::Config("guided_weight must be >= 0".into()));
        }
        if self.batch_size < 1 || self.real_batch_size < 1 {
            return Err(Error::Config("batch sizes must be >= 1".into()));
        }
        Ok(())
    }
}

/// Distance between the unrolled student and the expert target.
/// Unnormalized: `||theta_s - theta_target||^2`. Normalized divides by
/// `||theta_start - theta_target||^2` so segments of different length
/// compare on one scale.
pub fn match_loss(
    g: &mut Graph,
    student_final: &[NodeId],
    expert_start: &ParamVector,
    expert_target: &ParamVector,
    normalized: bool,
) -> Result<NodeId> {
    if !expert_start.same_layout(expert_target) {
        return Err(Error::Contract("match_loss: expert layouts differ".into()));
    }
    let entries = expert_target.layout().entries.len();
    if student_final.len() != entries {
        return Err(Error::Contract(format!(
            "match_loss: student has {} entries, expert {}",
            student_final.len(),
            entries
        )));
    }
    let mut total: Option<NodeId> = None;
    for (k, &s) in student_final.iter().enumerate() {
        let target = g.constant(expert_target.entry_value(k));
        if g.shape(s) != g.shape(target) {
            return Err(Error::Contract(format!(
                "match_loss: entry {k} shapes differ: {:?} vs {:?}",
                g.shape(s),
                g.shape(target)
            )));
        }
        let term = crate::diffmath::sq_l2(g, s, target)?;
        total = Some(match total {
            None => term,
            Some(t) => g.add(t, term)?,
        });
    }
    let num = total.expect("layouts are non-empty");
    if normalized {
        let denom = param_distance(expert_start, expert_target)?;
        if denom == 0.0 {
            return Err(Error::DegenerateSegment);
        }
        Ok(g.scale(num, 1.0 / denom))
    } else {
        Ok(num)
    }
}

/// Cross-entropy of the unrolled student on a real batch; the gradient
/// path runs back through the unroll to the distillation parameters.
pub fn real_guided_loss(
    g: &mut Graph,
    spec: &ModelSpec,
    student_final: &[NodeId],
    real_images: &NdArray,
    real_labels: &[usize],
) -> Result<NodeId> {
    let images = g.constant(real_images.clone());
    forward_loss(g, spec, student_final, images, real_labels)
}

#[derive(Debug, Clone, PartialEq)]
pub struct StepMetrics {
    pub iteration: u64,
    pub match_loss: f64,
    /// Absent when the guided term is disabled (gamma = 0).
    pub guided_loss: Option<f64>,
    pub combined: f64,
}

#[derive(Debug)]
pub struct StepReport {
    pub metrics: StepMetrics,
    /// theta after the N inner steps, for replay checks.
    pub final_student: ParamVector,
    /// (trajectory index, start snapshot index).
    pub picked: (usize, usize),
    /// Synthetic-image row indices drawn for each inner step.
    pub batch_indices: Vec<Vec<usize>>,
    /// Detached copy of the synthetic dataset used this step.
    pub synth_images: NdArray,
    pub synth_labels: Vec<usize>,
}

fn sample_with_replacement(rng: &mut impl Rng, n: usize, k: usize) -> Vec<usize> {
    (0..k).map(|_| rng.gen_range(0..n)).collect()
}

/// One outer iteration: sample an expert segment, unroll the
/// student on freshly synthesized data, combine match and guided losses,
/// and apply one momentum-SGD step to every trainable tensor and factor.
pub fn distill_step(
    state: &mut DistillState,
    bank: &ExpertBank,
    real: &Dataset,
    cfg: &DistillConfig,
    split: &SeedSplitter,
    iteration: u64,
) -> Result<StepReport> {
    cfg.validate()?;
    let spec = bank.spec().clone();

    // Segment sampling: uniform over trajectories, then over valid starts.
    let mut pick = split.indexed("distill/pick", iteration);
    let traj_idx = pick.gen_range(0..bank.trajectories.len());
    let traj = &bank.trajectories[traj_idx];
    if traj.len() <= cfg.expert_span {
        return Err(Error::Sampling(format!(
            "trajectory of {} snapshots cannot serve span M = {}",
            traj.len(),
            cfg.expert_span
        )));
    }
    let start = pick.gen_range(0..traj.len() - cfg.expert_span);

    let mut g = Graph::new();
    let nodes = state.emit_nodes(&mut g);
    let (images, labels) = state.synthesize_dataset(&mut g, &nodes, None)?;
    let total_images = state.total_images();

    let mut batch_rng = split.indexed("distill/batch", iteration);
    let mut batches = Vec::with_capacity(cfg.inner_steps);
    let mut batch_indices = Vec::with_capacity(cfg.inner_steps);
    for _ in 0..cfg.inner_steps {
        let idx = sample_with_replacement(&mut batch_rng, total_images, cfg.batch_size);
        let batch_images = crate::diffmath::select_rows(&mut g, images, &idx)?;
        let batch_labels: Vec<usize> = idx.iter().map(|&r| labels[r]).collect();
        batches.push(InnerBatch { images: batch_images, labels: batch_labels });
        batch_indices.push(idx);
    }

    let theta0 = traj.snapshots[start].to_input_nodes(&mut g);
    let theta_n = run_unrolled_sgd(
        &mut g,
        &theta0,
        &batches,
        cfg.inner_lr,
        cfg.inner_momentum,
        |g, theta, batch| forward_loss(g, &spec, theta, batch.images, &batch.labels),
    )?;

    let ell = match_loss(
        &mut g,
        &theta_n,
        &traj.snapshots[start],
        &traj.snapshots[start + cfg.expert_span],
        cfg.normalize_match,
    )?;

    // gamma = 0 must not even evaluate the guided term.
    let (total, guided_value) = if cfg.guided_weight > 0.0 {
        let mut real_rng = split.indexed("distill/real", iteration);
        let idx = sample_with_replacement(&mut real_rng, real.len(), cfg.real_batch_size);
        let (real_images, real_labels) = real.subset(&idx)?;
        let guided = real_guided_loss(&mut g, &spec, &theta_n, &real_images, &real_labels)?;
        let scaled = g.scale(guided, cfg.guided_weight);
        let combined = g.add(scaled, ell)?;
        (combined, Some(g.value(guided).data()[0]))
    } else {
        (ell, None)
    };

    let match_value = g.value(ell).data()[0];
    let combined_value = g.value(total).data()[0];
    let grads = g.backward(total)?;

    // Outer momentum SGD on every trainable slot, snapped back to the
    // f32 grid so checkpoints restart bit-exactly.
    let slots = state.trainable_slots();
    for (k, slot) in slots.iter().enumerate() {
        let node = match *slot {
            Slot::Tensor(i) => nodes.tensors[i],
            Slot::Factor(j, n) => nodes.factors[j][n],
        };
        let grad = grads.get(node).expect("trainable slots map to trainable leaves");
        let v = &mut state.velocities[k];
        for (vi, gi) in v.data_mut().iter_mut().zip(grad.data()) {
            *vi = cfg.outer_momentum * *vi + gi;
        }
        v.round_to_f32();
        let v_snapshot = v.clone();
        let x = state.slot_values_mut(*slot);
        for (xi, vi) in x.data_mut().iter_mut().zip(v_snapshot.data()) {
            *xi -= cfg.outer_lr * vi;
        }
        x.round_to_f32();
    }
    state.step = iteration;

    let final_student = ParamVector::from_entries(
        traj.snapshots[start].layout().clone(),
        &theta_n.iter().map(|&id| g.value(id).clone()).collect::<Vec<_>>(),
    )?;
    Ok(StepReport {
        metrics: StepMetrics {
            iteration,
            match_loss: match_value,
            guided_loss: guided_value,
            combined: combined_value,
        },
        final_student,
        picked: (traj_idx, start),
        batch_indices,
        synth_images: g.value(images).clone(),
        synth_labels: labels,
    })
}

/// Run the outer loop from the state's current step up to
/// `cfg.iterations`, reporting metrics per step and checkpointing every
/// `cfg.checkpoint_interval` iterations.
pub fn distill(
    state: &mut DistillState,
    bank: &ExpertBank,
    real: &Dataset,
    cfg: &DistillConfig,
    split: &SeedSplitter,
    mut on_metrics: impl FnMut(&StepMetrics),
    mut checkpoint: impl FnMut(&DistillState) -> Result<()>,
) -> Result<Vec<StepMetrics>> {
    cfg.validate()?;
    let mut log = Vec::new();
    let first = state.step + 1;
    for iteration in first..=cfg.iterations {
        let report = distill_step(state, bank, real, cfg, split, iteration)?;
        on_metrics(&report.metrics);
        log.push(report.metrics);
        if cfg.checkpoint_interval > 0 && iteration % cfg.checkpoint_interval == 0 {
            checkpoint(state)?;
        }
    }
    Ok(log)
}

/// Distribution-matching baseline: squared distance between per-class
/// mean embeddings of synthetic and real batches under a frozen,
/// randomly initialized embedding network.
#[derive(Debug)]
pub struct DmLoss {
    pub loss: NodeId,
    /// Classes missing from one side, skipped with a warning metric.
    pub skipped_classes: Vec<usize>,
}

pub fn dm_loss(
    g: &mut Graph,
    synth_images: NodeId,
    synth_labels: &[usize],
    real_images: &NdArray,
    real_labels: &[usize],
    embed_spec: &ModelSpec,
    embed_seed: u64,
) -> Result<DmLoss> {
    let embed = build_model(embed_spec, embed_seed)?;
    let embed_nodes = embed.to_const_nodes(g);
    let num_classes = embed_spec.num_classes;

    let synth_feat = forward_features(g, embed_spec, &embed_nodes, synth_images)?;
    let real_in = g.constant(real_images.clone());
    let real_feat = forward_features(g, embed_spec, &embed_nodes, real_in)?;

    let mut total: Option<NodeId> = None;
    let mut skipped = Vec::new();
    for class in 0..num_classes {
        let s_rows: Vec<usize> =
            (0..synth_labels.len()).filter(|&i| synth_labels[i] == class).collect();
        let r_rows: Vec<usize> =
            (0..real_labels.len()).filter(|&i| real_labels[i] == class).collect();
        if s_rows.is_empty() || r_rows.is_empty() {
            skipped.push(class);
            continue;
        }
        let s_sel = crate::diffmath::select_rows(g, synth_feat, &s_rows)?;
        let r_sel = crate::diffmath::select_rows(g, real_feat, &r_rows)?;
        let s_sum = g.reduce_sum(s_sel, &[0], false)?;
        let s_mean = g.scale(s_sum, 1.0 / s_rows.len() as f64);
        let r_sum = g.reduce_sum(r_sel, &[0], false)?;
        let r_mean = g.scale(r_sum, 1.0 / r_rows.len() as f64);
        let term = crate::diffmath::sq_l2(g, s_mean, r_mean)?;
        total = Some(match total {
            None => term,
            Some(t) => g.add(t, term)?,
        });
    }
    let loss = match total {
        Some(t) => t,
        None => g.constant(NdArray::scalar(0.0)),
    };
    Ok(DmLoss { loss, skipped_classes: skipped })
}

/// Gradient-matching baseline: per-layer cosine distance between the
/// parameter gradients on real and synthetic batches at `params`.
#[derive(Debug)]
pub struct DcLoss {
    pub loss: NodeId,
    /// Layers whose gradient vanished on either side (distance 0).
    pub skipped_layers: Vec<String>,
}

pub fn dc_loss(
    g: &mut Graph,
    spec: &ModelSpec,
    params: &ParamVector,
    synth_images: NodeId,
    synth_labels: &[usize],
    real_images: &NdArray,
    real_labels: &[usize],
) -> Result<DcLoss> {
    let theta = params.to_input_nodes(g);
    let real_in = g.constant(real_images.clone());
    let loss_real = forward_loss(g, spec, &theta, real_in, real_labels)?;
    let g_real = g.grad_nodes(loss_real, &theta)?;
    let loss_syn = forward_loss(g, spec, &theta, synth_images, synth_labels)?;
    let g_syn = g.grad_nodes(loss_syn, &theta)?;

    let layout = params.layout().clone();
    let mut total: Option<NodeId> = None;
    let mut skipped = Vec::new();
    for (k, entry) in layout.entries.iter().enumerate() {
        let a = g_real[k];
        let b = g_syn[k];
        let a_zero = g.value(a).sq_norm() == 0.0;
        let b_zero = g.value(b).sq_norm() == 0.0;
        if a_zero || b_zero {
            skipped.push(entry.name.clone());
            continue;
        }
        let ab = g.mul(a, b)?;
        let dot = g.sum_all(ab)?;
        let a2 = g.mul(a, a)?;
        let na2 = g.sum_all(a2)?;
        let na = g.sqrt(na2)?;
        let b2 = g.mul(b, b)?;
        let nb2 = g.sum_all(b2)?;
        let nb = g.sqrt(nb2)?;
        let denom = g.mul(na, nb)?;
        let rden = g.recip(denom)?;
        let cos = g.mul(dot, rden)?;
        let dist = g.affine(cos, -1.0, 1.0);
        total = Some(match total {
            None => dist,
            Some(t) => g.add(t, dist)?,
        });
    }
    let loss = match total {
        Some(t) => t,
        None => g.constant(NdArray::scalar(0.0)),
    };
    Ok(DcLoss { loss, skipped_layers: skipped })
}
