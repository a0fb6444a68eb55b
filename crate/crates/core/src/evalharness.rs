//! Training fresh models on synthesized data and testing on held-out
//! real data, plus ablation grids, inter-dimensional similarity, and
//! image-grid export.

use std::fs::File;
use std::io::{BufWriter, Read, Write};
use std::path::Path;

use rand::Rng;
use sha2::{Digest, Sha256};

use crate::dataset::{hex, Dataset};
use crate::decomposition::{budget_check, BudgetSpec, DistillState, LabelRule};
use crate::diffmath::NdArray;
use crate::error::{Error, Result};
use crate::matching::{distill, DistillConfig, ExpertBank, StepMetrics};
use crate::models::{build_model, evaluate, sgd_step, ModelSpec};
use crate::par;
use crate::rng::SeedSplitter;
use crate::transforms::{init_distill_state, TransformKind};

#[derive(Debug, Clone, PartialEq)]
pub struct EvalTrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub momentum: f64,
    /// Horizontal flip + pad-2 random crop during training. Toggleable
    /// off for determinism checks.
    pub augment: bool,
    pub repeats: usize,
}

impl Default for EvalTrainConfig {
    fn default() -> Self {
        Self { epochs: 200, batch_size: 32, lr: 0.01, momentum: 0.9, augment: true, repeats: 5 }
    }
}

/// Per-repeat accuracies with their mean and (population) deviation.
#[derive(Debug, Clone, PartialEq)]
pub struct EvalReport {
    pub accuracies: Vec<f64>,
    pub mean: f64,
    pub std: f64,
    pub spec: ModelSpec,
    pub config_digest: String,
}

impl EvalReport {
    fn from_accuracies(accuracies: Vec<f64>, spec: ModelSpec, config_digest: String) -> Self {
        let n = accuracies.len() as f64;
        let mean = accuracies.iter().sum::<f64>() / n;
        let var = accuracies.iter().map(|a| (a - mean) * (a - mean)).sum::<f64>() / n;
        Self { accuracies, mean, std: var.sqrt(), spec, config_digest }
    }

    /// One line per report, machine-readable.
    pub fn to_line(&self) -> String {
        let accs: Vec<String> = self.accuracies.iter().map(|a| format!("{a:.6}")).collect();
        format!(
            "mean={:.6} std={:.6} repeats={} accs=[{}] digest={}",
            self.mean,
            self.std,
            self.accuracies.len(),
            accs.join(","),
            self.config_digest
        )
    }
}

fn augment_batch(images: &NdArray, rng: &mut impl Rng) -> NdArray {
    let s = images.shape();
    let (n, c, h, w) = (s[0], s[1], s[2], s[3]);
    let mut out = NdArray::zeros(s);
    for i in 0..n {
        let flip = rng.gen_bool(0.5);
        let dy = rng.gen_range(0..=4usize) as isize - 2;
        let dx = rng.gen_range(0..=4usize) as isize - 2;
        for ch in 0..c {
            for y in 0..h {
                for x in 0..w {
                    let sx = if flip { w - 1 - x } else { x };
                    let (py, px) = (y as isize + dy, sx as isize + dx);
                    let v = if py >= 0 && py < h as isize && px >= 0 && px < w as isize {
                        images.at(&[i, ch, py as usize, px as usize])
                    } else {
                        0.0
                    };
                    out.set(&[i, ch, y, x], v);
                }
            }
        }
    }
    out
}

/// Train a fresh model on the given images and return its top-1 test
/// accuracy. Deterministic per seed.
pub fn train_and_test(
    spec: &ModelSpec,
    train_images: &NdArray,
    train_labels: &[usize],
    test: &Dataset,
    cfg: &EvalTrainConfig,
    seed: u64,
) -> Result<f64> {
    let split = SeedSplitter::new(seed);
    let mut params = build_model(spec, split.stream("model").gen())?;
    let mut velocity = vec![0.0; params.flat().len()];
    let mut rng = split.stream("epochs");
    let n = train_labels.len();
    for _epoch in 0..cfg.epochs {
        let mut order: Vec<usize> = (0..n).collect();
        for i in (1..n).rev() {
            let j = rng.gen_range(0..=i);
            order.swap(i, j);
        }
        for chunk in order.chunks(cfg.batch_size.max(1)) {
            let mut images = select_value_rows(train_images, chunk);
            let labels: Vec<usize> = chunk.iter().map(|&i| train_labels[i]).collect();
            if cfg.augment {
                images = augment_batch(&images, &mut rng);
            }
            sgd_step(spec, &mut params, &mut velocity, &images, &labels, cfg.lr, cfg.momentum, 0.0)?;
        }
    }
    let (_, acc) = evaluate(spec, &params, &test.images, &test.labels)?;
    Ok(acc)
}

fn select_value_rows(images: &NdArray, rows: &[usize]) -> NdArray {
    let s = images.shape();
    let tail: usize = s[1..].iter().product();
    let mut data = Vec::with_capacity(rows.len() * tail);
    for &r in rows {
        data.extend_from_slice(&images.data()[r * tail..(r + 1) * tail]);
    }
    let mut shape = vec![rows.len()];
    shape.extend(&s[1..]);
    NdArray::new(shape, data).expect("row selection is consistent")
}

/// The evaluation protocol: per repeat, synthesize (values detached),
/// train a fresh model, test; report mean and deviation over repeats.
/// Repeats run in parallel with independent pre-assigned seeds.
pub fn evaluate_synthetic(
    state: &DistillState,
    test: &Dataset,
    spec: &ModelSpec,
    cfg: &EvalTrainConfig,
    split: &SeedSplitter,
    config_digest: &str,
) -> Result<EvalReport> {
    if cfg.repeats < 1 {
        return Err(Error::Config("evaluation needs at least one repeat".into()));
    }
    let (images, labels) = state.synthesize_values()?;
    let results = par::map_indexed(cfg.repeats, |r| {
        let mut seed_rng = split.indexed("eval/repeat", r as u64);
        train_and_test(spec, &images, &labels, test, cfg, seed_rng.gen())
    });
    let accuracies = results.into_iter().collect::<Result<Vec<f64>>>()?;
    Ok(EvalReport::from_accuracies(accuracies, spec.clone(), config_digest.to_string()))
}

/// The control arm: ipc real images drawn per class, trained and tested
/// the same way.
pub fn random_subset_baseline(
    train: &Dataset,
    test: &Dataset,
    budget: &BudgetSpec,
    spec: &ModelSpec,
    cfg: &EvalTrainConfig,
    split: &SeedSplitter,
    config_digest: &str,
) -> Result<EvalReport> {
    for class in 0..budget.num_classes {
        let available = train.indices_of_class(class).len();
        if budget.ipc > available {
            return Err(Error::Range(format!(
                "ipc {} exceeds the {available} samples of class {class}",
                budget.ipc
            )));
        }
    }
    let results = par::map_indexed(cfg.repeats, |r| {
        let mut rng = split.indexed("baseline/repeat", r as u64);
        let mut chosen = Vec::with_capacity(budget.ipc * budget.num_classes);
        for class in 0..budget.num_classes {
            let mut pool = train.indices_of_class(class);
            for k in 0..budget.ipc {
                let pick = rng.gen_range(0..pool.len() - k) + k;
                pool.swap(k, pick);
            }
            chosen.extend_from_slice(&pool[..budget.ipc]);
        }
        let (images, labels) = train.subset(&chosen)?;
        train_and_test(spec, &images, &labels, test, cfg, rng.gen())
    });
    let accuracies = results.into_iter().collect::<Result<Vec<f64>>>()?;
    Ok(EvalReport::from_accuracies(accuracies, spec.clone(), config_digest.to_string()))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SimAxis {
    Batch,
    Height,
    Width,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SimilarityMatrix {
    pub values: NdArray,
    /// Slices with zero norm; their similarity is defined as 0 against
    /// everything, the diagonal included.
    pub zero_slices: Vec<usize>,
}

impl SimilarityMatrix {
    pub fn mean_off_diagonal(&self) -> f64 {
        let k = self.values.shape()[0];
        if k < 2 {
            return 0.0;
        }
        let mut acc = 0.0;
        for i in 0..k {
            for j in 0..k {
                if i != j {
                    acc += self.values.at(&[i, j]);
                }
            }
        }
        acc / (k * (k - 1)) as f64
    }
}

/// Pairwise cosine similarity between unfoldings of a `(B, C, H, W)`
/// block along the chosen axis.
pub fn dimension_similarity(images: &NdArray, axis: SimAxis) -> Result<SimilarityMatrix> {
    let s = images.shape();
    if s.len() != 4 {
        return Err(Error::Dimension(format!("similarity wants (B,C,H,W), got {s:?}")));
    }
    let (b, c, h, w) = (s[0], s[1], s[2], s[3]);
    if b < 2 {
        return Err(Error::Contract("similarity needs a batch of at least 2".into()));
    }
    let (k, vec_len) = match axis {
        SimAxis::Batch => (b, c * h * w),
        SimAxis::Height => (h, b * c * w),
        SimAxis::Width => (w, b * c * h),
    };
    let mut rows = vec![vec![0.0f64; vec_len]; k];
    for bi in 0..b {
        for ci in 0..c {
            for y in 0..h {
                for x in 0..w {
                    let v = images.at(&[bi, ci, y, x]);
                    match axis {
                        SimAxis::Batch => rows[bi][(ci * h + y) * w + x] = v,
                        SimAxis::Height => rows[y][(bi * c + ci) * w + x] = v,
                        SimAxis::Width => rows[x][(bi * c + ci) * h + y] = v,
                    }
                }
            }
        }
    }
    let norms: Vec<f64> = rows.iter().map(|r| r.iter().map(|v| v * v).sum::<f64>().sqrt()).collect();
    let zero_slices: Vec<usize> = (0..k).filter(|&i| norms[i] == 0.0).collect();
    let mut values = NdArray::zeros(&[k, k]);
    for i in 0..k {
        for j in 0..k {
            let v = if norms[i] == 0.0 || norms[j] == 0.0 {
                0.0
            } else if i == j {
                1.0
            } else {
                let dot: f64 = rows[i].iter().zip(&rows[j]).map(|(a, b)| a * b).sum();
                dot / (norms[i] * norms[j])
            };
            values.set(&[i, j], v);
        }
    }
    Ok(SimilarityMatrix { values, zero_slices })
}

// ---- ablation grid ------------------------------------------------------------

/// Everything a grid cell needs besides its own setting.
pub struct GridBase<'a> {
    pub train: &'a Dataset,
    pub test: &'a Dataset,
    pub bank: &'a ExpertBank,
    pub budget: &'a BudgetSpec,
    pub distill: DistillConfig,
    pub eval: EvalTrainConfig,
    pub model: ModelSpec,
    pub seed: u64,
    pub n_tensors: usize,
    pub n_kernels: usize,
    pub u1: Option<usize>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct CellSetting {
    /// Off means the raw-pixel arm at the same budget.
    pub decomposition: bool,
    pub gamma: f64,
    /// Optional (t1, t3) override; t4 follows t3.
    pub dims: Option<(usize, usize)>,
    pub transform: TransformKind,
}

impl CellSetting {
    pub fn digest(&self) -> String {
        let mut h = Sha256::new();
        h.update(format!(
            "dec={} gamma={} dims={:?} transform={}",
            self.decomposition,
            self.gamma,
            self.dims,
            self.transform.tag.name()
        ));
        hex(&h.finalize())[..16].to_string()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum CellOutcome {
    Ok { report: EvalReport, state_digest: String, metrics: Vec<StepMetrics> },
    /// The requested dims blow the budget; the grid continues.
    Infeasible { stored: usize, allowed: usize },
}

#[derive(Debug, Clone, PartialEq)]
pub struct GridCell {
    pub setting: CellSetting,
    pub digest: String,
    pub outcome: CellOutcome,
}

pub fn state_digest(state: &DistillState) -> String {
    let mut h = Sha256::new();
    for t in &state.tensors {
        for v in t.values.to_f32_vec() {
            h.update(v.to_le_bytes());
        }
    }
    for k in &state.kernels {
        for f in &k.factors {
            for v in f.values.to_f32_vec() {
                h.update(v.to_le_bytes());
            }
        }
    }
    hex(&h.finalize())[..16].to_string()
}

/// Distill + evaluate one cell. Cells are self-seeded from the setting
/// digest, so results do not depend on grid order.
pub fn run_cell(base: &GridBase<'_>, setting: &CellSetting) -> Result<GridCell> {
    let digest = setting.digest();
    let split = SeedSplitter::new(base.seed).scoped(&format!("cell/{digest}"));
    let mut state = if setting.decomposition {
        let dims_override = setting.dims.map(|(t1, t3)| {
            let (c, h, w) = base.budget.image_shape;
            let u1 = base.u1.unwrap_or(t1 + 1);
            crate::decomposition::DimsPlan { t: [t1, c, t3, t3], u: [u1, c, h, w] }
        });
        init_distill_state(
            base.budget,
            &setting.transform,
            base.n_tensors,
            base.n_kernels,
            base.u1,
            dims_override,
            LabelRule::PerClassTensors,
            &split,
            Some(base.train),
        )?
    } else {
        let mut rng = split.stream("state/raw");
        crate::decomposition::raw_pixel_state(base.budget, |shape| {
            NdArray::uniform(shape, -0.5, 0.5, &mut rng)
        })?
    };
    let report_budget = budget_check(&state, base.budget);
    if !report_budget.ok {
        return Ok(GridCell {
            setting: setting.clone(),
            digest,
            outcome: CellOutcome::Infeasible {
                stored: report_budget.stored,
                allowed: report_budget.allowed,
            },
        });
    }
    let mut cfg = base.distill.clone();
    cfg.guided_weight = setting.gamma;
    let metrics = distill(&mut state, base.bank, base.train, &cfg, &split, |_| {}, |_| Ok(()))?;
    let report = evaluate_synthetic(&state, base.test, &base.model, &base.eval, &split, &digest)?;
    Ok(GridCell {
        setting: setting.clone(),
        digest: digest.clone(),
        outcome: CellOutcome::Ok { report, state_digest: state_digest(&state), metrics },
    })
}

/// Cartesian product over the requested axes. Cells run in parallel;
/// each is independently seeded, so the table is order-independent.
pub fn ablation_grid(base: &GridBase<'_>, settings: &[CellSetting]) -> Result<Vec<GridCell>> {
    if settings.is_empty() {
        return Err(Error::Range("ablation grid with no cells".into()));
    }
    par::map_indexed(settings.len(), |k| run_cell(base, &settings[k]))
        .into_iter()
        .collect()
}

/// Expand axis value lists into the full cartesian product.
pub fn cartesian_settings(
    decomposition: &[bool],
    gammas: &[f64],
    dims: &[Option<(usize, usize)>],
    transforms: &[TransformKind],
) -> Vec<CellSetting> {
    let mut out = Vec::new();
    for &dec in decomposition {
        for &gamma in gammas {
            for &d in dims {
                for t in transforms {
                    out.push(CellSetting { decomposition: dec, gamma, dims: d, transform: t.clone() });
                }
            }
        }
    }
    out
}

/// Ablation table: one row per cell, decomposition and guided-loss
/// columns checked or blank.
pub fn format_grid(cells: &[GridCell], ipc: usize) -> String {
    let mut s = String::new();
    s.push_str(&format!(
        "{:<4} {:<4} {:<7} {:<10} {:<4} {:<18} {}\n",
        "MTT", "Dec", "Guided", "Transform", "IPC", "Acc", "Cell"
    ));
    for cell in cells {
        let dec = if cell.setting.decomposition { "x" } else { "" };
        let guided = if cell.setting.gamma > 0.0 { "x" } else { "" };
        let acc = match &cell.outcome {
            CellOutcome::Ok { report, .. } => {
                format!("{:.1}+-{:.1}", 100.0 * report.mean, 100.0 * report.std)
            }
            CellOutcome::Infeasible { stored, allowed } => {
                format!("infeasible {stored}>{allowed}")
            }
        };
        s.push_str(&format!(
            "{:<4} {:<4} {:<7} {:<10} {:<4} {:<18} {}\n",
            "x",
            dec,
            guided,
            cell.setting.transform.tag.name(),
            ipc,
            acc,
            cell.digest
        ));
    }
    s
}

/// Machine-readable grid lines.
pub fn grid_lines(cells: &[GridCell]) -> String {
    let mut s = String::new();
    for cell in cells {
        let (status, detail) = match &cell.outcome {
            CellOutcome::Ok { report, state_digest, .. } => (
                "ok",
                format!("mean={:.6} std={:.6} state={}", report.mean, report.std, state_digest),
            ),
            CellOutcome::Infeasible { stored, allowed } => {
                ("infeasible", format!("stored={stored} allowed={allowed}"))
            }
        };
        s.push_str(&format!(
            "cell={} dec={} gamma={} transform={} status={status} {detail}\n",
            cell.digest,
            cell.setting.decomposition as u8,
            cell.setting.gamma,
            cell.setting.transform.tag.name(),
        ));
    }
    s
}

// ---- image export -------------------------------------------------------------

/// Synthesize every image, min-max normalize each to `[0, 255]`
/// (mid-gray for zero range), and write one binary PGM/PPM grid.
pub fn export_images(state: &DistillState, path: &Path, grid_cols: usize) -> Result<()> {
    if grid_cols < 1 {
        return Err(Error::Config("grid needs at least one column".into()));
    }
    let (images, _) = state.synthesize_values()?;
    let s = images.shape();
    let (n, c, h, w) = (s[0], s[1], s[2], s[3]);
    if c != 1 && c != 3 {
        return Err(Error::Config(format!("image export supports 1 or 3 channels, got {c}")));
    }
    let cols = grid_cols.min(n);
    let rows = n.div_ceil(cols);
    let (gh, gw) = (rows * h, cols * w);
    let mut canvas = vec![0u8; gh * gw * c];
    for i in 0..n {
        let (gr, gc) = (i / cols, i % cols);
        let plane = h * w;
        let base = i * c * plane;
        let slice = &images.data()[base..base + c * plane];
        let min = slice.iter().copied().fold(f64::INFINITY, f64::min);
        let max = slice.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        for ch in 0..c {
            for y in 0..h {
                for x in 0..w {
                    let v = slice[ch * plane + y * w + x];
                    let byte = if max > min {
                        ((v - min) / (max - min) * 255.0).round().clamp(0.0, 255.0) as u8
                    } else {
                        128
                    };
                    let (py, px) = (gr * h + y, gc * w + x);
                    canvas[(py * gw + px) * c + ch] = byte;
                }
            }
        }
    }
    let mut f = BufWriter::new(File::create(path)?);
    let magic = if c == 1 { "P5" } else { "P6" };
    write!(f, "{magic}\n{gw} {gh}\n255\n")?;
    f.write_all(&canvas)?;
    f.flush()?;
    Ok(())
}

/// Parse a binary PGM (P5) or PPM (P6) file back into header + bytes.
pub fn read_pnm(path: &Path) -> Result<(usize, usize, usize, Vec<u8>)> {
    let mut bytes = Vec::new();
    File::open(path)?.read_to_end(&mut bytes)?;
    let header_end = bytes
        .iter()
        .enumerate()
        .filter(|(_, &b)| b == b'\n')
        .map(|(i, _)| i)
        .nth(2)
        .ok_or(Error::Format { offset: 0, msg: "missing PNM header".into() })?;
    let header = std::str::from_utf8(&bytes[..header_end])
        .map_err(|_| Error::Format { offset: 0, msg: "header is not UTF-8".into() })?;
    let mut lines = header.lines();
    let magic = lines.next().unwrap_or_default();
    let channels = match magic {
        "P5" => 1,
        "P6" => 3,
        other => {
            return Err(Error::Format { offset: 0, msg: format!("unknown magic {other:?}") })
        }
    };
    let dims = lines.next().unwrap_or_default();
    let mut it = dims.split_whitespace();
    let (w, h): (usize, usize) = match (it.next(), it.next()) {
        (Some(w), Some(h)) => (
            w.parse().map_err(|_| Error::Format { offset: 3, msg: "bad width".into() })?,
            h.parse().map_err(|_| Error::Format { offset: 3, msg: "bad height".into() })?,
        ),
        _ => return Err(Error::Format { offset: 3, msg: "missing dimensions".into() }),
    };
    let data = bytes[header_end + 1..].to_vec();
    if data.len() != w * h * channels {
        return Err(Error::Format {
            offset: (header_end + 1) as u64,
            msg: format!("payload {} bytes, want {}", data.len(), w * h * channels),
        });
    }
    Ok((w, h, channels, data))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataset::{load_dataset, BlobsSpec, DataSource};
    use crate::decomposition::raw_pixel_state;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn identical_images_give_all_ones_similarity() {
        let one = NdArray::uniform(&[1, 1, 4, 4], 0.1, 1.0, &mut ChaCha8Rng::seed_from_u64(1));
        let mut batch = NdArray::zeros(&[3, 1, 4, 4]);
        for i in 0..3 {
            for p in 0..16 {
                batch.data_mut()[i * 16 + p] = one.data()[p];
            }
        }
        let sim = dimension_similarity(&batch, SimAxis::Batch).unwrap();
        for v in sim.values.data() {
            assert!((v - 1.0).abs() < 1e-12);
        }
        assert!(sim.zero_slices.is_empty());
    }

    #[test]
    fn height_constant_image_is_all_ones_on_h_axis() {
        let mut batch = NdArray::zeros(&[2, 1, 4, 3]);
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        for i in 0..2 {
            let row = NdArray::uniform(&[3], 0.1, 1.0, &mut rng);
            for y in 0..4 {
                for x in 0..3 {
                    batch.set(&[i, 0, y, x], row.data()[x]);
                }
            }
        }
        let sim = dimension_similarity(&batch, SimAxis::Height).unwrap();
        for v in sim.values.data() {
            assert!((v - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn similarity_matches_brute_force_cosine() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let batch = NdArray::uniform(&[4, 2, 3, 3], -1.0, 1.0, &mut rng);
        let sim = dimension_similarity(&batch, SimAxis::Batch).unwrap();
        let flat = |i: usize| -> Vec<f64> { batch.data()[i * 18..(i + 1) * 18].to_vec() };
        for i in 0..4 {
            for j in 0..4 {
                let (a, b) = (flat(i), flat(j));
                let dot: f64 = a.iter().zip(&b).map(|(x, y)| x * y).sum();
                let na = a.iter().map(|v| v * v).sum::<f64>().sqrt();
                let nb = b.iter().map(|v| v * v).sum::<f64>().sqrt();
                let want = if i == j { 1.0 } else { dot / (na * nb) };
                assert!((sim.values.at(&[i, j]) - want).abs() < 1e-9);
                assert!((sim.values.at(&[i, j]) - sim.values.at(&[j, i])).abs() < 1e-12);
                assert!(sim.values.at(&[i, j]).abs() <= 1.0 + 1e-12);
            }
        }
    }

    #[test]
    fn zero_slices_are_flagged_and_zeroed() {
        let mut batch = NdArray::zeros(&[3, 1, 2, 2]);
        for p in 0..4 {
            batch.data_mut()[p] = 1.0; // only sample 0 is nonzero
        }
        let sim = dimension_similarity(&batch, SimAxis::Batch).unwrap();
        assert_eq!(sim.zero_slices, vec![1, 2]);
        assert_eq!(sim.values.at(&[1, 1]), 0.0);
        assert_eq!(sim.values.at(&[0, 1]), 0.0);
        assert_eq!(sim.values.at(&[0, 0]), 1.0);
    }

    #[test]
    fn repeats_one_gives_zero_std_and_reports_are_deterministic() {
        let spec = BlobsSpec { train_per_class: 20, test_per_class: 10, ..Default::default() };
        let (train, test) = load_dataset(&DataSource::Blobs(spec), true).unwrap();
        let budget = BudgetSpec::new(2, 1, (1, 8, 8)).unwrap();
        let split = SeedSplitter::new(3);
        let mut rng = split.stream("init");
        let state =
            raw_pixel_state(&budget, |shape| NdArray::uniform(shape, -0.5, 0.5, &mut rng)).unwrap();
        let _ = train;
        let model = ModelSpec::conv_net(1, 4, (1, 8, 8), 2);
        let cfg = EvalTrainConfig { epochs: 5, repeats: 1, ..Default::default() };
        let a = evaluate_synthetic(&state, &test, &model, &cfg, &split, "digest").unwrap();
        assert_eq!(a.std, 0.0);
        assert_eq!(a.accuracies.len(), 1);
        let b = evaluate_synthetic(&state, &test, &model, &cfg, &split, "digest").unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn evaluation_does_not_mutate_the_state() {
        let spec = BlobsSpec { train_per_class: 10, test_per_class: 10, ..Default::default() };
        let (_, test) = load_dataset(&DataSource::Blobs(spec), true).unwrap();
        let budget = BudgetSpec::new(2, 1, (1, 8, 8)).unwrap();
        let split = SeedSplitter::new(4);
        let mut rng = split.stream("init");
        let state =
            raw_pixel_state(&budget, |shape| NdArray::uniform(shape, -0.5, 0.5, &mut rng)).unwrap();
        let before = state_digest(&state);
        let model = ModelSpec::conv_net(1, 4, (1, 8, 8), 2);
        let cfg = EvalTrainConfig { epochs: 3, repeats: 2, ..Default::default() };
        evaluate_synthetic(&state, &test, &model, &cfg, &split, "d").unwrap();
        assert_eq!(state_digest(&state), before);
    }

    #[test]
    fn random_subset_rejects_oversized_budgets() {
        let spec = BlobsSpec { train_per_class: 3, test_per_class: 3, ..Default::default() };
        let (train, test) = load_dataset(&DataSource::Blobs(spec), true).unwrap();
        let budget = BudgetSpec::new(2, 5, (1, 8, 8)).unwrap();
        let model = ModelSpec::conv_net(1, 4, (1, 8, 8), 2);
        let cfg = EvalTrainConfig { epochs: 1, repeats: 1, ..Default::default() };
        let split = SeedSplitter::new(5);
        assert!(matches!(
            random_subset_baseline(&train, &test, &budget, &model, &cfg, &split, "d"),
            Err(Error::Range(_))
        ));
    }

    #[test]
    fn full_budget_subset_uses_every_sample() {
        let spec = BlobsSpec { train_per_class: 4, test_per_class: 3, ..Default::default() };
        let (train, _) = load_dataset(&DataSource::Blobs(spec), true).unwrap();
        let budget = BudgetSpec::new(2, 4, (1, 8, 8)).unwrap();
        // With ipc == per-class count the sampled multiset is the whole
        // training set (sampling is per class without replacement).
        let split = SeedSplitter::new(6);
        let mut rng = split.indexed("baseline/repeat", 0);
        let mut chosen = Vec::new();
        for class in 0..budget.num_classes {
            let mut pool = train.indices_of_class(class);
            for k in 0..budget.ipc {
                let pick = rng.gen_range(0..pool.len() - k) + k;
                pool.swap(k, pick);
            }
            chosen.extend_from_slice(&pool[..budget.ipc]);
        }
        chosen.sort_unstable();
        assert_eq!(chosen, (0..train.len()).collect::<Vec<_>>());
    }

    #[test]
    fn export_and_reparse_round_trips() {
        let budget = BudgetSpec::new(2, 1, (1, 4, 4)).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let state =
            raw_pixel_state(&budget, |shape| NdArray::uniform(shape, -0.5, 0.5, &mut rng)).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("grid.pgm");
        export_images(&state, &path, 2).unwrap();
        let (w, h, c, data) = read_pnm(&path).unwrap();
        assert_eq!((w, h, c), (8, 4, 1));
        let (images, _) = state.synthesize_values().unwrap();
        // Recompute the normalization for image 0 and compare its block.
        let slice = &images.data()[0..16];
        let min = slice.iter().copied().fold(f64::INFINITY, f64::min);
        let max = slice.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        for y in 0..4 {
            for x in 0..4 {
                let want = ((slice[y * 4 + x] - min) / (max - min) * 255.0)
                    .round()
                    .clamp(0.0, 255.0) as u8;
                assert_eq!(data[y * 8 + x], want);
            }
        }
    }

    #[test]
    fn constant_image_exports_as_mid_gray() {
        let budget = BudgetSpec::new(1, 1, (1, 4, 4)).unwrap();
        let state = raw_pixel_state(&budget, |shape| NdArray::full(shape, 0.37)).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("flat.pgm");
        export_images(&state, &path, 1).unwrap();
        let (w, h, c, data) = read_pnm(&path).unwrap();
        assert_eq!((w, h, c), (4, 4, 1));
        assert!(data.iter().all(|&b| b == 128));
    }
}
