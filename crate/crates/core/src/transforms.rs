//! Kernel-factor construction from classical spectral transforms:
//! cosine-basis kernels, single-level Haar band splitting, and truncated
//! SVD, each in a fixed and a learnable variant.

use rand::Rng;

use crate::decomposition::{FactorBundle, KernelFactor, SeparableKernel};
use crate::diffmath::NdArray;
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TransformTag {
    Random,
    Dct,
    Ldct,
    Dwt,
    Svd,
    Lsvd,
}

impl TransformTag {
    pub fn name(&self) -> &'static str {
        match self {
            TransformTag::Random => "random",
            TransformTag::Dct => "dct",
            TransformTag::Ldct => "ldct",
            TransformTag::Dwt => "dwt",
            TransformTag::Svd => "svd",
            TransformTag::Lsvd => "lsvd",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "random" => Ok(TransformTag::Random),
            "dct" => Ok(TransformTag::Dct),
            "ldct" => Ok(TransformTag::Ldct),
            "dwt" => Ok(TransformTag::Dwt),
            "svd" => Ok(TransformTag::Svd),
            "lsvd" => Ok(TransformTag::Lsvd),
            other => Err(Error::Config(format!("unknown transform kind {other:?}"))),
        }
    }
}

/// Which transform backs the kernel factors, plus its knobs.
#[derive(Debug, Clone, PartialEq)]
pub struct TransformKind {
    pub tag: TransformTag,
    /// Keep-probability per detail band (LH, HL, HH); wavelet only.
    pub band_probs: [f64; 3],
    /// Truncation rank; SVD variants only. Defaults to t1.
    pub truncation_rank: Option<usize>,
}

impl TransformKind {
    pub fn new(tag: TransformTag) -> Self {
        Self { tag, band_probs: [1.0; 3], truncation_rank: None }
    }

    pub fn validate(&self) -> Result<()> {
        if self.band_probs.iter().any(|p| !(0.0..=1.0).contains(p)) {
            return Err(Error::Config(format!(
                "band probabilities must lie in [0, 1], got {:?}",
                self.band_probs
            )));
        }
        if let Some(r) = self.truncation_rank {
            if r < 1 {
                return Err(Error::Config("truncation rank must be >= 1".into()));
            }
        }
        Ok(())
    }

    /// Learnable variants carry the leading "L".
    pub fn trainable(&self) -> bool {
        matches!(self.tag, TransformTag::Random | TransformTag::Ldct | TransformTag::Lsvd)
    }
}

// ---- cosine basis -------------------------------------------------------------

/// Cosine kernel `K[i, j] = cos(pi / n * (j + 0.5) * (i + 0.5))`,
/// 0-based, shape `(m, n)`.
pub fn dct_kernel(m: usize, n: usize) -> NdArray {
    let f = std::f64::consts::PI / n as f64;
    NdArray::from_fn(&[m, n], |idx| (f * (idx[1] as f64 + 0.5) * (idx[0] as f64 + 0.5)).cos())
}

/// The matching inverse: `(2/n) * K^T`, shape `(n, m)`. Round trips are
/// exact on square sizes and an orthogonal projection when m < n.
pub fn dct_inverse_kernel(m: usize, n: usize) -> NdArray {
    let k = dct_kernel(m, n);
    let s = 2.0 / n as f64;
    NdArray::from_fn(&[n, m], |idx| s * k.at(&[idx[1], idx[0]]))
}

// ---- Haar ---------------------------------------------------------------------

/// Single-level orthonormal Haar analysis of `(C, H, W)` into four
/// half-resolution bands `[LL, LH, HL, HH]`. Each coefficient is the
/// inner product with a unit-norm 2x2 basis vector, so energy is
/// preserved exactly.
pub fn haar_split(image: &NdArray) -> Result<[NdArray; 4]> {
    let s = image.shape();
    if s.len() != 3 {
        return Err(Error::Dimension(format!("haar_split: image must be (C,H,W), got {s:?}")));
    }
    let (c, h, w) = (s[0], s[1], s[2]);
    if h % 2 != 0 || w % 2 != 0 {
        return Err(Error::Dimension(format!("haar_split: extents {h}x{w} must be even")));
    }
    let mut bands = [
        NdArray::zeros(&[c, h / 2, w / 2]),
        NdArray::zeros(&[c, h / 2, w / 2]),
        NdArray::zeros(&[c, h / 2, w / 2]),
        NdArray::zeros(&[c, h / 2, w / 2]),
    ];
    for ch in 0..c {
        for i in 0..h / 2 {
            for j in 0..w / 2 {
                let a = image.at(&[ch, 2 * i, 2 * j]);
                let b = image.at(&[ch, 2 * i, 2 * j + 1]);
                let cc = image.at(&[ch, 2 * i + 1, 2 * j]);
                let d = image.at(&[ch, 2 * i + 1, 2 * j + 1]);
                bands[0].set(&[ch, i, j], (a + b + cc + d) / 2.0);
                bands[1].set(&[ch, i, j], (a - b + cc - d) / 2.0);
                bands[2].set(&[ch, i, j], (a + b - cc - d) / 2.0);
                bands[3].set(&[ch, i, j], (a - b - cc + d) / 2.0);
            }
        }
    }
    Ok(bands)
}

/// Exact inverse of [`haar_split`].
pub fn haar_merge(bands: &[NdArray; 4]) -> Result<NdArray> {
    let s = bands[0].shape().to_vec();
    if s.len() != 3 || bands.iter().any(|b| b.shape() != s) {
        return Err(Error::Dimension("haar_merge: bands must share a (C,H,W) shape".into()));
    }
    let (c, h2, w2) = (s[0], s[1], s[2]);
    let mut image = NdArray::zeros(&[c, h2 * 2, w2 * 2]);
    for ch in 0..c {
        for i in 0..h2 {
            for j in 0..w2 {
                let ll = bands[0].at(&[ch, i, j]);
                let lh = bands[1].at(&[ch, i, j]);
                let hl = bands[2].at(&[ch, i, j]);
                let hh = bands[3].at(&[ch, i, j]);
                image.set(&[ch, 2 * i, 2 * j], (ll + lh + hl + hh) / 2.0);
                image.set(&[ch, 2 * i, 2 * j + 1], (ll - lh + hl - hh) / 2.0);
                image.set(&[ch, 2 * i + 1, 2 * j], (ll + lh - hl - hh) / 2.0);
                image.set(&[ch, 2 * i + 1, 2 * j + 1], (ll - lh - hl + hh) / 2.0);
            }
        }
    }
    Ok(image)
}

/// Keep or zero whole detail bands. LL always survives: dropping it
/// destroys the image mean and destabilizes distillation. Deterministic
/// under a fixed seed; draws happen in LH, HL, HH order.
pub fn haar_band_sample(
    bands: &[NdArray; 4],
    rng: &mut impl Rng,
    probs: [f64; 3],
) -> Result<[NdArray; 4]> {
    if probs.iter().any(|p| !(0.0..=1.0).contains(p)) {
        return Err(Error::Config(format!("band probabilities {probs:?} outside [0, 1]")));
    }
    let mut out = bands.clone();
    for (b, &p) in probs.iter().enumerate() {
        if !rng.gen_bool(p) {
            out[b + 1] = NdArray::zeros(bands[b + 1].shape());
        }
    }
    Ok(out)
}

// ---- SVD ----------------------------------------------------------------------

/// Thin SVD by one-sided Jacobi sweeps: `a = U diag(sigma) V^T` with
/// `U (m, r)`, `V (n, r)`, `r = min(m, n)`, singular values descending.
pub fn svd(a: &NdArray) -> Result<(NdArray, Vec<f64>, NdArray)> {
    let s = a.shape();
    if s.len() != 2 {
        return Err(Error::Dimension(format!("svd: need a matrix, got {s:?}")));
    }
    let (m, n) = (s[0], s[1]);
    if m < n {
        let at = NdArray::from_fn(&[n, m], |idx| a.at(&[idx[1], idx[0]]));
        let (u, sig, v) = svd(&at)?;
        return Ok((v, sig, u));
    }
    // Columns of `w` converge to sigma_j * u_j while `v` accumulates the
    // rotations.
    let mut w: Vec<Vec<f64>> = (0..n).map(|j| (0..m).map(|i| a.at(&[i, j])).collect()).collect();
    let mut v: Vec<Vec<f64>> = (0..n)
        .map(|j| (0..n).map(|i| if i == j { 1.0 } else { 0.0 }).collect())
        .collect();
    let eps = 1e-14;
    for _sweep in 0..60 {
        let mut converged = true;
        for p in 0..n {
            for q in (p + 1)..n {
                let alpha: f64 = w[p].iter().map(|x| x * x).sum();
                let beta: f64 = w[q].iter().map(|x| x * x).sum();
                let gamma: f64 = w[p].iter().zip(&w[q]).map(|(x, y)| x * y).sum();
                if gamma.abs() <= eps * (alpha * beta).sqrt() || gamma == 0.0 {
                    continue;
                }
                converged = false;
                let zeta = (beta - alpha) / (2.0 * gamma);
                let t = zeta.signum() / (zeta.abs() + (1.0 + zeta * zeta).sqrt());
                let c = 1.0 / (1.0 + t * t).sqrt();
                let sline = c * t;
                for i in 0..m {
                    let (wp, wq) = (w[p][i], w[q][i]);
                    w[p][i] = c * wp - sline * wq;
                    w[q][i] = sline * wp + c * wq;
                }
                for i in 0..n {
                    let (vp, vq) = (v[p][i], v[q][i]);
                    v[p][i] = c * vp - sline * vq;
                    v[q][i] = sline * vp + c * vq;
                }
            }
        }
        if converged {
            break;
        }
    }
    let mut order: Vec<usize> = (0..n).collect();
    let norms: Vec<f64> = w.iter().map(|col| col.iter().map(|x| x * x).sum::<f64>().sqrt()).collect();
    order.sort_by(|&i, &j| norms[j].partial_cmp(&norms[i]).expect("finite norms"));
    let mut u = NdArray::zeros(&[m, n]);
    let mut vv = NdArray::zeros(&[n, n]);
    let mut sigma = Vec::with_capacity(n);
    for (slot, &j) in order.iter().enumerate() {
        let s_j = norms[j];
        sigma.push(s_j);
        if s_j > 0.0 {
            for i in 0..m {
                u.set(&[i, slot], w[j][i] / s_j);
            }
        }
        for i in 0..n {
            vv.set(&[i, slot], v[j][i]);
        }
    }
    Ok((u, sigma, vv))
}

/// Spectrum/kernel split of an image batch: flatten `(B, C, H, W)` to
/// `(B, C*H*W)`, decompose, keep the leading `rank` right-singular rows
/// as the spectrum and `(U Sigma)^T` columns as the mode-1 factor.
pub struct SvdInit {
    /// `(rank, C, H, W)` — rows of V^T reshaped back to image layout.
    pub spectrum: NdArray,
    /// `(rank, B)` — the mode-1 factor mapping spectrum slots to images.
    pub factor: NdArray,
    pub singular_values: Vec<f64>,
}

pub fn svd_init(images: &NdArray, rank: usize) -> Result<SvdInit> {
    let s = images.shape();
    if s.len() != 4 {
        return Err(Error::Dimension(format!("svd_init: images must be (B,C,H,W), got {s:?}")));
    }
    let (b, c, h, w) = (s[0], s[1], s[2], s[3]);
    let chw = c * h * w;
    if rank > b.min(chw) {
        return Err(Error::Range(format!(
            "rank {rank} exceeds min(B, C*H*W) = {}",
            b.min(chw)
        )));
    }
    let m = images.reshaped(vec![b, chw])?;
    let (u, sigma, v) = svd(&m)?;
    let spectrum = NdArray::from_fn(&[rank, c, h, w], |idx| {
        let chw_idx = (idx[1] * h + idx[2]) * w + idx[3];
        v.at(&[chw_idx, idx[0]])
    });
    let factor = NdArray::from_fn(&[rank, b], |idx| u.at(&[idx[1], idx[0]]) * sigma[idx[0]]);
    Ok(SvdInit { spectrum, factor, singular_values: sigma })
}

// ---- kernel construction ------------------------------------------------------

fn random_factor(mode: usize, t: usize, u: usize, rng: &mut impl Rng) -> Result<KernelFactor> {
    let scale = 1.0 / (t as f64).sqrt();
    let values = NdArray::uniform(&[t, u], -0.5 * scale, 0.5 * scale, rng);
    KernelFactor::new(mode, values, true, true)
}

/// Spatial decode factor from the cosine basis: `(2/u) * dct_kernel(t, u)^T`
/// transposed into the `(t, u)` orientation mode products expect.
fn dct_factor(mode: usize, t: usize, u: usize, trainable: bool) -> Result<KernelFactor> {
    let inv = dct_inverse_kernel(t, u); // (u, t): decode matrix
    let values = NdArray::from_fn(&[t, u], |idx| inv.at(&[idx[1], idx[0]]));
    KernelFactor::new(mode, values, trainable, trainable)
}

/// Haar synthesis factor. `t == u` uses the full one-level basis with
/// coefficients ordered [low | high]; `t == u/2` keeps the lowpass half
/// only. Other pairings are not supported.
fn dwt_factor(mode: usize, t: usize, u: usize) -> Result<KernelFactor> {
    if u % 2 != 0 || (t != u && t != u / 2) {
        return Err(Error::Config(format!(
            "wavelet factor needs t == u or t == u/2 with even u, got ({t}, {u})"
        )));
    }
    let s = 1.0 / 2.0f64.sqrt();
    let mut values = NdArray::zeros(&[t, u]);
    for a in 0..u / 2 {
        if a < t {
            values.set(&[a, 2 * a], s);
            values.set(&[a, 2 * a + 1], s);
        }
        let hi = u / 2 + a;
        if hi < t {
            values.set(&[hi, 2 * a], s);
            values.set(&[hi, 2 * a + 1], -s);
        }
    }
    KernelFactor::new(mode, values, false, false)
}

fn identity_factor(mode: usize, t: usize, u: usize) -> Result<KernelFactor> {
    if t != u {
        return Err(Error::Config(format!(
            "identity factor for mode {mode} needs t == u, got ({t}, {u})"
        )));
    }
    KernelFactor::new(mode, NdArray::identity(t), false, false)
}

/// Build one separable kernel of the requested kind for dims `t -> u`.
/// SVD variants also initialize the spectrum and need a real image batch
/// of at least `u1` images.
pub fn make_kernel_factors(
    kind: &TransformKind,
    t: [usize; 4],
    u: [usize; 4],
    kernel_id: usize,
    images: Option<&NdArray>,
    rng: &mut impl Rng,
) -> Result<FactorBundle> {
    kind.validate()?;
    let trainable = kind.trainable();
    match kind.tag {
        TransformTag::Random => {
            let factors = (1..=4)
                .map(|m| random_factor(m, t[m - 1], u[m - 1], rng))
                .collect::<Result<Vec<_>>>()?;
            Ok(FactorBundle { kernel: SeparableKernel::new(factors, kernel_id)?, spectrum_init: None })
        }
        TransformTag::Dct | TransformTag::Ldct => {
            let factors = vec![
                random_factor(1, t[0], u[0], rng)?,
                random_factor(2, t[1], u[1], rng)?,
                dct_factor(3, t[2], u[2], trainable)?,
                dct_factor(4, t[3], u[3], trainable)?,
            ];
            Ok(FactorBundle { kernel: SeparableKernel::new(factors, kernel_id)?, spectrum_init: None })
        }
        TransformTag::Dwt => {
            let factors = vec![
                random_factor(1, t[0], u[0], rng)?,
                random_factor(2, t[1], u[1], rng)?,
                dwt_factor(3, t[2], u[2])?,
                dwt_factor(4, t[3], u[3])?,
            ];
            Ok(FactorBundle { kernel: SeparableKernel::new(factors, kernel_id)?, spectrum_init: None })
        }
        TransformTag::Svd | TransformTag::Lsvd => {
            let images = images.ok_or_else(|| {
                Error::Config("SVD kernel construction needs a real image batch".into())
            })?;
            let s = images.shape().to_vec();
            if t[1] != u[1] || t[2] != u[2] || t[3] != u[3] {
                return Err(Error::Config(format!(
                    "SVD variants keep modes 2-4 at image size; got t={t:?} u={u:?}"
                )));
            }
            if s[1] != u[1] || s[2] != u[2] || s[3] != u[3] {
                return Err(Error::Config(format!(
                    "image batch {s:?} does not match image dims {u:?}"
                )));
            }
            if s[0] < u[0] {
                return Err(Error::Range(format!(
                    "need at least u1 = {} images for the SVD factor, got {}",
                    u[0], s[0]
                )));
            }
            let rank = kind.truncation_rank.unwrap_or(t[0]);
            if rank != t[0] {
                return Err(Error::Config(format!(
                    "truncation rank {rank} must equal t1 = {}",
                    t[0]
                )));
            }
            let batch = if s[0] == u[0] {
                images.clone()
            } else {
                let chw = s[1] * s[2] * s[3];
                NdArray::new(
                    vec![u[0], s[1], s[2], s[3]],
                    images.data()[..u[0] * chw].to_vec(),
                )?
            };
            let init = svd_init(&batch, rank)?;
            let factors = vec![
                KernelFactor::new(1, init.factor, trainable, true)?,
                identity_factor(2, t[1], u[1])?,
                identity_factor(3, t[2], u[2])?,
                identity_factor(4, t[3], u[3])?,
            ];
            Ok(FactorBundle {
                kernel: SeparableKernel::new(factors, kernel_id)?,
                spectrum_init: Some(init.spectrum),
            })
        }
    }
}

/// Build a full distillation state of the requested kind. Tensors start
/// from uniform noise in `[-0.5, 0.5]` (SVD variants start from the
/// decomposition of real data instead); kernels come from
/// [`make_kernel_factors`]. Budget-driven dims resolve through
/// [`auto_dims`] unless overridden.
#[allow(clippy::too_many_arguments)]
pub fn init_distill_state(
    budget: &crate::decomposition::BudgetSpec,
    kind: &TransformKind,
    n_tensors: usize,
    n_kernels: usize,
    u1: Option<usize>,
    dims_override: Option<crate::decomposition::DimsPlan>,
    label_rule: crate::decomposition::LabelRule,
    split: &crate::rng::SeedSplitter,
    data: Option<&crate::dataset::Dataset>,
) -> Result<crate::decomposition::DistillState> {
    use crate::decomposition::{auto_dims, DimsPlan, DistillState, SpectrumTensor};

    kind.validate()?;
    let svd_like = matches!(kind.tag, TransformTag::Svd | TransformTag::Lsvd);
    let plan: DimsPlan = match dims_override {
        Some(p) => p,
        None if svd_like => {
            // SVD keeps modes 2-4 at image size; only t1 is compressed.
            let (c, h, w) = budget.image_shape;
            let chw = c * h * w;
            let u1 = u1.unwrap_or(budget.ipc.max(2) * 2);
            let allowed = budget.budget_scalars();
            let denom = n_tensors * chw + n_kernels * u1;
            let t1 = (allowed / denom).clamp(0, u1);
            if t1 < 1 {
                return Err(Error::Config(format!(
                    "no feasible SVD rank under budget {allowed}"
                )));
            }
            DimsPlan { t: [t1, c, h, w], u: [u1, c, h, w] }
        }
        None => auto_dims(budget, n_tensors, n_kernels, u1)?,
    };

    let mut kernels = Vec::with_capacity(n_kernels);
    let mut svd_spectrum: Option<NdArray> = None;
    for j in 0..n_kernels {
        let mut rng = split.indexed("state/kernel", j as u64);
        let images = data.map(|d| &d.images);
        let bundle = make_kernel_factors(kind, plan.t, plan.u, j, images, &mut rng)?;
        if svd_spectrum.is_none() {
            svd_spectrum = bundle.spectrum_init;
        }
        kernels.push(bundle.kernel);
    }

    let tensors: Vec<SpectrumTensor> = (0..n_tensors)
        .map(|i| {
            let values = if svd_like {
                let data = data.ok_or_else(|| {
                    Error::Config("SVD state initialization needs a dataset".into())
                })?;
                // Per-tensor spectra from the decomposition of that
                // tensor's class samples (falling back to the shared
                // kernel batch when classes are not assigned).
                let per = n_tensors / budget.num_classes.max(1);
                let class = if per > 0 { (i / per).min(budget.num_classes - 1) } else { 0 };
                let rows = data.indices_of_class(class);
                if rows.len() >= plan.u[0] {
                    let (batch, _) = data.subset(&rows[..plan.u[0]])?;
                    svd_init(&batch, plan.t[0])?.spectrum
                } else {
                    svd_spectrum
                        .clone()
                        .ok_or_else(|| Error::Config("SVD spectrum unavailable".into()))?
                }
            } else {
                let mut rng = split.indexed("state/tensor", i as u64);
                NdArray::uniform(&plan.t, -0.5, 0.5, &mut rng)
            };
            SpectrumTensor::new(values, None)
        })
        .collect::<Result<_>>()?;

    let mut state = DistillState::new(tensors, kernels, label_rule, budget.num_classes)?;
    if !svd_like {
        calibrate_image_scale(&mut state)?;
    }
    Ok(state)
}

/// Condition the product parameterization at init: every trainable
/// piece (tensors and trainable factors) is first normalized to unit
/// RMS, then the correction that brings synthesized pixels to unit
/// standard deviation is split evenly across those pieces. Without this
/// the scale collects in one piece and the others see gradients orders
/// of magnitude apart; tiny image scales additionally park the first
/// conv activations near the instance-norm epsilon, where the 1/sigma
/// factor blows gradients up. (Synthesis is multilinear, so both steps
/// are exact.)
fn calibrate_image_scale(state: &mut crate::decomposition::DistillState) -> Result<()> {
    let rms = |v: &NdArray| (v.sq_norm() / v.len() as f64).sqrt();
    let rescale = |v: &mut NdArray, s: f64| {
        for x in v.data_mut() {
            *x *= s;
        }
    };

    for t in &mut state.tensors {
        let r = rms(&t.values);
        if r > 0.0 {
            rescale(&mut t.values, 1.0 / r);
        }
    }
    for k in &mut state.kernels {
        for f in &mut k.factors {
            if f.trainable {
                let r = rms(&f.values);
                if r > 0.0 {
                    rescale(&mut f.values, 1.0 / r);
                }
            }
        }
    }

    let (images, _) = state.synthesize_values()?;
    let n = images.len() as f64;
    let mean: f64 = images.data().iter().sum::<f64>() / n;
    let var: f64 = images.data().iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
    if var > 0.0 {
        // One multiplicative piece per tensor chain plus one per
        // trainable factor mode of a kernel (kernels share a pattern).
        let trainable_modes =
            state.kernels[0].factors.iter().filter(|f| f.trainable).count();
        let pieces = 1 + trainable_modes;
        let per_piece = (1.0 / var.sqrt()).powf(1.0 / pieces as f64);
        for t in &mut state.tensors {
            rescale(&mut t.values, per_piece);
        }
        for k in &mut state.kernels {
            for f in &mut k.factors {
                if f.trainable {
                    rescale(&mut f.values, per_piece);
                }
            }
        }
    }
    for t in &mut state.tensors {
        t.values.round_to_f32();
    }
    for k in &mut state.kernels {
        for f in &mut k.factors {
            f.values.round_to_f32();
        }
    }
    Ok(())
}
