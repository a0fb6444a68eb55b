//! Run configuration: flat `section.key = value` text, every field with
//! a default, unknown keys rejected, and a stable digest over the
//! resolved values.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use sha2::{Digest, Sha256};

use crate::dataset::{hex, BlobsSpec, DataSource, Dataset, NormStats};
use crate::decomposition::{BudgetSpec, DimsPlan, LabelRule};
use crate::error::{Error, Result};
use crate::evalharness::EvalTrainConfig;
use crate::matching::{DistillConfig, ExpertConfig};
use crate::models::{ModelFamily, ModelSpec};
use crate::transforms::{TransformKind, TransformTag};

/// Either a concrete value or "auto", resolved by the dimension schedule.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum AutoOr {
    Auto,
    Value(usize),
}

impl AutoOr {
    fn parse(s: &str) -> Result<Self> {
        if s == "auto" {
            Ok(AutoOr::Auto)
        } else {
            Ok(AutoOr::Value(parse_num(s, "a count or \"auto\"")?))
        }
    }

    fn show(&self) -> String {
        match self {
            AutoOr::Auto => "auto".into(),
            AutoOr::Value(v) => v.to_string(),
        }
    }

    pub fn value(&self) -> Option<usize> {
        match self {
            AutoOr::Auto => None,
            AutoOr::Value(v) => Some(*v),
        }
    }
}

fn parse_num<T: std::str::FromStr>(s: &str, what: &str) -> Result<T> {
    s.parse().map_err(|_| Error::Config(format!("expected {what}, got {s:?}")))
}

fn parse_bool(s: &str) -> Result<bool> {
    match s {
        "true" | "1" | "on" => Ok(true),
        "false" | "0" | "off" => Ok(false),
        other => Err(Error::Config(format!("expected a boolean, got {other:?}"))),
    }
}

/// The full, flat configuration. Field defaults are the desk-scale
/// settings; see `set` for the key names.
#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub seed: u64,
    pub out_dir: PathBuf,

    pub dataset_source: String,
    pub dataset_classes: usize,
    pub dataset_train_per_class: usize,
    pub dataset_test_per_class: usize,
    pub dataset_height: usize,
    pub dataset_width: usize,
    pub dataset_noise: f64,
    pub dataset_seed: u64,
    pub dataset_images: PathBuf,
    pub dataset_labels: PathBuf,
    pub dataset_path: PathBuf,
    pub dataset_channels: usize,
    pub dataset_normalize: bool,

    pub budget_ipc: usize,

    pub decomp_transform: String,
    pub decomp_tensors: AutoOr,
    pub decomp_kernels: usize,
    pub decomp_u1: AutoOr,
    pub decomp_t1: AutoOr,
    pub decomp_t3: AutoOr,
    pub decomp_label_rule: String,
    pub decomp_band_lh: f64,
    pub decomp_band_hl: f64,
    pub decomp_band_hh: f64,

    pub model_family: String,
    pub model_depth: usize,
    pub model_width: usize,

    pub expert_count: usize,
    pub expert_epochs: usize,
    pub expert_stride: usize,
    pub expert_lr: f64,
    pub expert_momentum: f64,
    pub expert_weight_decay: f64,
    pub expert_batch_size: usize,

    pub distill_iterations: u64,
    pub distill_inner_steps: usize,
    pub distill_expert_span: usize,
    pub distill_inner_lr: f64,
    pub distill_inner_momentum: f64,
    pub distill_guided_weight: f64,
    pub distill_outer_lr: f64,
    pub distill_outer_momentum: f64,
    pub distill_batch_size: usize,
    pub distill_real_batch_size: usize,
    pub distill_normalize_match: bool,
    pub distill_checkpoint_interval: u64,

    pub eval_repeats: usize,
    pub eval_epochs: usize,
    pub eval_batch_size: usize,
    pub eval_lr: f64,
    pub eval_momentum: f64,
    pub eval_augment: bool,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seed: 7,
            out_dir: PathBuf::from("out"),
            dataset_source: "blobs".into(),
            dataset_classes: 2,
            dataset_train_per_class: 100,
            dataset_test_per_class: 100,
            dataset_height: 8,
            dataset_width: 8,
            dataset_noise: 0.25,
            dataset_seed: 7,
            dataset_images: PathBuf::new(),
            dataset_labels: PathBuf::new(),
            dataset_path: PathBuf::new(),
            dataset_channels: 1,
            dataset_normalize: true,
            budget_ipc: 1,
            decomp_transform: "random".into(),
            decomp_tensors: AutoOr::Auto,
            decomp_kernels: 1,
            decomp_u1: AutoOr::Auto,
            decomp_t1: AutoOr::Auto,
            decomp_t3: AutoOr::Auto,
            decomp_label_rule: "per-class-tensors".into(),
            decomp_band_lh: 1.0,
            decomp_band_hl: 1.0,
            decomp_band_hh: 1.0,
            model_family: "convnet".into(),
            model_depth: 2,
            model_width: 16,
            expert_count: 2,
            expert_epochs: 20,
            expert_stride: 1,
            expert_lr: 0.01,
            expert_momentum: 0.9,
            expert_weight_decay: 5e-4,
            expert_batch_size: 32,
            distill_iterations: 1000,
            distill_inner_steps: 10,
            distill_expert_span: 2,
            distill_inner_lr: 0.02,
            distill_inner_momentum: 0.0,
            distill_guided_weight: 0.1,
            distill_outer_lr: 100.0,
            distill_outer_momentum: 0.9,
            distill_batch_size: 32,
            distill_real_batch_size: 32,
            distill_normalize_match: true,
            distill_checkpoint_interval: 100,
            eval_repeats: 5,
            eval_epochs: 200,
            eval_batch_size: 32,
            eval_lr: 0.01,
            eval_momentum: 0.9,
            eval_augment: true,
        }
    }
}

impl RunConfig {
    /// Parse `key = value` lines ('#' starts a comment). Unknown keys
    /// are an error, not a warning.
    pub fn from_str(text: &str) -> Result<Self> {
        let mut cfg = Self::default();
        for (lineno, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let Some((key, value)) = line.split_once('=') else {
                return Err(Error::Config(format!(
                    "line {}: expected key = value, got {raw:?}",
                    lineno + 1
                )));
            };
            cfg.set(key.trim(), value.trim())?;
        }
        Ok(cfg)
    }

    pub fn from_file(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        Self::from_str(&text)
    }

    pub fn apply_overrides<S: AsRef<str>>(&mut self, overrides: &[S]) -> Result<()> {
        for o in overrides {
            let o = o.as_ref();
            let Some((key, value)) = o.split_once('=') else {
                return Err(Error::Config(format!("override {o:?} is not key=value")));
            };
            self.set(key.trim(), value.trim())?;
        }
        Ok(())
    }

    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        match key {
            "seed" => self.seed = parse_num(value, "a u64 seed")?,
            "out.dir" => self.out_dir = PathBuf::from(value),
            "dataset.source" => {
                if !["blobs", "idx", "raw"].contains(&value) {
                    return Err(Error::Config(format!("unknown dataset source {value:?}")));
                }
                self.dataset_source = value.into();
            }
            "dataset.classes" => self.dataset_classes = parse_num(value, "a class count")?,
            "dataset.train_per_class" => {
                self.dataset_train_per_class = parse_num(value, "a sample count")?
            }
            "dataset.test_per_class" => {
                self.dataset_test_per_class = parse_num(value, "a sample count")?
            }
            "dataset.height" => self.dataset_height = parse_num(value, "an extent")?,
            "dataset.width" => self.dataset_width = parse_num(value, "an extent")?,
            "dataset.noise" => self.dataset_noise = parse_num(value, "a noise level")?,
            "dataset.seed" => self.dataset_seed = parse_num(value, "a u64 seed")?,
            "dataset.images" => self.dataset_images = PathBuf::from(value),
            "dataset.labels" => self.dataset_labels = PathBuf::from(value),
            "dataset.path" => self.dataset_path = PathBuf::from(value),
            "dataset.channels" => self.dataset_channels = parse_num(value, "a channel count")?,
            "dataset.normalize" => self.dataset_normalize = parse_bool(value)?,
            "budget.ipc" => self.budget_ipc = parse_num(value, "images per class")?,
            "decomp.transform" => {
                TransformTag::parse(value)?;
                self.decomp_transform = value.into();
            }
            "decomp.tensors" => self.decomp_tensors = AutoOr::parse(value)?,
            "decomp.kernels" => self.decomp_kernels = parse_num(value, "a kernel count")?,
            "decomp.u1" => self.decomp_u1 = AutoOr::parse(value)?,
            "decomp.t1" => self.decomp_t1 = AutoOr::parse(value)?,
            "decomp.t3" => self.decomp_t3 = AutoOr::parse(value)?,
            "decomp.label_rule" => {
                LabelRule::parse(value)?;
                self.decomp_label_rule = value.into();
            }
            "decomp.band_lh" => self.decomp_band_lh = parse_num(value, "a probability")?,
            "decomp.band_hl" => self.decomp_band_hl = parse_num(value, "a probability")?,
            "decomp.band_hh" => self.decomp_band_hh = parse_num(value, "a probability")?,
            "model.family" => {
                if !["convnet", "mlp"].contains(&value) {
                    return Err(Error::Config(format!("unknown model family {value:?}")));
                }
                self.model_family = value.into();
            }
            "model.depth" => self.model_depth = parse_num(value, "a depth")?,
            "model.width" => self.model_width = parse_num(value, "a width")?,
            "expert.count" => self.expert_count = parse_num(value, "a trajectory count")?,
            "expert.epochs" => self.expert_epochs = parse_num(value, "an epoch count")?,
            "expert.stride" => self.expert_stride = parse_num(value, "a stride")?,
            "expert.lr" => self.expert_lr = parse_num(value, "a learning rate")?,
            "expert.momentum" => self.expert_momentum = parse_num(value, "a momentum")?,
            "expert.weight_decay" => self.expert_weight_decay = parse_num(value, "a decay")?,
            "expert.batch_size" => self.expert_batch_size = parse_num(value, "a batch size")?,
            "distill.iterations" => self.distill_iterations = parse_num(value, "a count")?,
            "distill.inner_steps" => self.distill_inner_steps = parse_num(value, "a count")?,
            "distill.expert_span" => self.distill_expert_span = parse_num(value, "a span")?,
            "distill.inner_lr" => self.distill_inner_lr = parse_num(value, "a learning rate")?,
            "distill.inner_momentum" => {
                self.distill_inner_momentum = parse_num(value, "a momentum")?
            }
            "distill.guided_weight" => {
                self.distill_guided_weight = parse_num(value, "a weight")?
            }
            "distill.outer_lr" => self.distill_outer_lr = parse_num(value, "a learning rate")?,
            "distill.outer_momentum" => {
                self.distill_outer_momentum = parse_num(value, "a momentum")?
            }
            "distill.batch_size" => self.distill_batch_size = parse_num(value, "a batch size")?,
            "distill.real_batch_size" => {
                self.distill_real_batch_size = parse_num(value, "a batch size")?
            }
            "distill.normalize_match" => self.distill_normalize_match = parse_bool(value)?,
            "distill.checkpoint_interval" => {
                self.distill_checkpoint_interval = parse_num(value, "an interval")?
            }
            "eval.repeats" => self.eval_repeats = parse_num(value, "a repeat count")?,
            "eval.epochs" => self.eval_epochs = parse_num(value, "an epoch count")?,
            "eval.batch_size" => self.eval_batch_size = parse_num(value, "a batch size")?,
            "eval.lr" => self.eval_lr = parse_num(value, "a learning rate")?,
            "eval.momentum" => self.eval_momentum = parse_num(value, "a momentum")?,
            "eval.augment" => self.eval_augment = parse_bool(value)?,
            other => return Err(Error::Config(format!("unknown config key {other:?}"))),
        }
        Ok(())
    }

    /// Canonical sorted key=value listing of every resolved field.
    pub fn canonical(&self) -> String {
        let mut lines = vec![
            format!("budget.ipc={}", self.budget_ipc),
            format!("dataset.channels={}", self.dataset_channels),
            format!("dataset.classes={}", self.dataset_classes),
            format!("dataset.height={}", self.dataset_height),
            format!("dataset.images={}", self.dataset_images.display()),
            format!("dataset.labels={}", self.dataset_labels.display()),
            format!("dataset.noise={}", self.dataset_noise),
            format!("dataset.normalize={}", self.dataset_normalize),
            format!("dataset.path={}", self.dataset_path.display()),
            format!("dataset.seed={}", self.dataset_seed),
            format!("dataset.source={}", self.dataset_source),
            format!("dataset.test_per_class={}", self.dataset_test_per_class),
            format!("dataset.train_per_class={}", self.dataset_train_per_class),
            format!("dataset.width={}", self.dataset_width),
            format!("decomp.band_hh={}", self.decomp_band_hh),
            format!("decomp.band_hl={}", self.decomp_band_hl),
            format!("decomp.band_lh={}", self.decomp_band_lh),
            format!("decomp.kernels={}", self.decomp_kernels),
            format!("decomp.label_rule={}", self.decomp_label_rule),
            format!("decomp.t1={}", self.decomp_t1.show()),
            format!("decomp.t3={}", self.decomp_t3.show()),
            format!("decomp.tensors={}", self.decomp_tensors.show()),
            format!("decomp.transform={}", self.decomp_transform),
            format!("decomp.u1={}", self.decomp_u1.show()),
            format!("distill.batch_size={}", self.distill_batch_size),
            format!("distill.checkpoint_interval={}", self.distill_checkpoint_interval),
            format!("distill.expert_span={}", self.distill_expert_span),
            format!("distill.guided_weight={}", self.distill_guided_weight),
            format!("distill.inner_lr={}", self.distill_inner_lr),
            format!("distill.inner_momentum={}", self.distill_inner_momentum),
            format!("distill.inner_steps={}", self.distill_inner_steps),
            format!("distill.iterations={}", self.distill_iterations),
            format!("distill.normalize_match={}", self.distill_normalize_match),
            format!("distill.outer_lr={}", self.distill_outer_lr),
            format!("distill.outer_momentum={}", self.distill_outer_momentum),
            format!("distill.real_batch_size={}", self.distill_real_batch_size),
            format!("eval.augment={}", self.eval_augment),
            format!("eval.batch_size={}", self.eval_batch_size),
            format!("eval.epochs={}", self.eval_epochs),
            format!("eval.lr={}", self.eval_lr),
            format!("eval.momentum={}", self.eval_momentum),
            format!("eval.repeats={}", self.eval_repeats),
            format!("expert.batch_size={}", self.expert_batch_size),
            format!("expert.count={}", self.expert_count),
            format!("expert.epochs={}", self.expert_epochs),
            format!("expert.lr={}", self.expert_lr),
            format!("expert.momentum={}", self.expert_momentum),
            format!("expert.stride={}", self.expert_stride),
            format!("expert.weight_decay={}", self.expert_weight_decay),
            format!("model.depth={}", self.model_depth),
            format!("model.family={}", self.model_family),
            format!("model.width={}", self.model_width),
            format!("out.dir={}", self.out_dir.display()),
            format!("seed={}", self.seed),
        ];
        lines.sort();
        let mut s = String::new();
        for l in lines {
            let _ = writeln!(s, "{l}");
        }
        s
    }

    /// Stable digest of the resolved config plus, when available, the
    /// normalization stats the data was loaded with.
    pub fn digest(&self, norm: Option<&NormStats>) -> String {
        let mut h = Sha256::new();
        h.update(self.canonical());
        if let Some(n) = norm {
            for v in n.mean.iter().chain(&n.std) {
                h.update(v.to_le_bytes());
            }
        }
        hex(&h.finalize())[..16].to_string()
    }

    pub fn data_source(&self) -> Result<DataSource> {
        Ok(match self.dataset_source.as_str() {
            "blobs" => DataSource::Blobs(BlobsSpec {
                classes: self.dataset_classes,
                train_per_class: self.dataset_train_per_class,
                test_per_class: self.dataset_test_per_class,
                height: self.dataset_height,
                width: self.dataset_width,
                noise: self.dataset_noise,
                seed: self.dataset_seed,
            }),
            "idx" => DataSource::Idx {
                images: self.dataset_images.clone(),
                labels: self.dataset_labels.clone(),
            },
            "raw" => DataSource::Raw {
                path: self.dataset_path.clone(),
                channels: self.dataset_channels,
                height: self.dataset_height,
                width: self.dataset_width,
                classes: self.dataset_classes,
            },
            other => return Err(Error::Config(format!("unknown dataset source {other:?}"))),
        })
    }

    pub fn budget(&self, train: &Dataset) -> Result<BudgetSpec> {
        BudgetSpec::new(train.num_classes, self.budget_ipc, train.image_shape())
    }

    pub fn model_spec(&self, train: &Dataset) -> Result<ModelSpec> {
        let family = match self.model_family.as_str() {
            "convnet" => ModelFamily::ConvNet,
            "mlp" => ModelFamily::Mlp,
            other => return Err(Error::Config(format!("unknown model family {other:?}"))),
        };
        let spec = ModelSpec {
            family,
            depth: self.model_depth,
            width: self.model_width,
            input_shape: train.image_shape(),
            num_classes: train.num_classes,
        };
        spec.validate()?;
        Ok(spec)
    }

    pub fn transform_kind(&self) -> Result<TransformKind> {
        let mut kind = TransformKind::new(TransformTag::parse(&self.decomp_transform)?);
        kind.band_probs = [self.decomp_band_lh, self.decomp_band_hl, self.decomp_band_hh];
        kind.truncation_rank = self.decomp_t1.value();
        kind.validate()?;
        Ok(kind)
    }

    pub fn label_rule(&self) -> Result<LabelRule> {
        LabelRule::parse(&self.decomp_label_rule)
    }

    pub fn n_tensors(&self, num_classes: usize) -> usize {
        self.decomp_tensors.value().unwrap_or(num_classes)
    }

    /// Explicit (t1, t3) turn into a dims override; otherwise the
    /// budget-driven schedule decides.
    pub fn dims_override(&self, budget: &BudgetSpec) -> Result<Option<DimsPlan>> {
        match (self.decomp_t1.value(), self.decomp_t3.value()) {
            (None, None) => Ok(None),
            (Some(t1), t3) => {
                let (c, h, w) = budget.image_shape;
                let t3 = t3.unwrap_or_else(|| crate::decomposition::schedule_spatial(h, budget.ipc));
                let u1 = self.decomp_u1.value().unwrap_or(t1 + 1);
                Ok(Some(DimsPlan { t: [t1, c, t3, t3], u: [u1, c, h, w] }))
            }
            (None, Some(_)) => Err(Error::Config(
                "decomp.t3 override requires decomp.t1 as well".into(),
            )),
        }
    }

    pub fn expert_config(&self) -> ExpertConfig {
        ExpertConfig {
            epochs: self.expert_epochs,
            snapshot_stride: self.expert_stride,
            lr: self.expert_lr,
            momentum: self.expert_momentum,
            weight_decay: self.expert_weight_decay,
            batch_size: self.expert_batch_size,
        }
    }

    pub fn distill_config(&self) -> DistillConfig {
        DistillConfig {
            inner_steps: self.distill_inner_steps,
            expert_span: self.distill_expert_span,
            inner_lr: self.distill_inner_lr,
            inner_momentum: self.distill_inner_momentum,
            guided_weight: self.distill_guided_weight,
            outer_lr: self.distill_outer_lr,
            outer_momentum: self.distill_outer_momentum,
            iterations: self.distill_iterations,
            batch_size: self.distill_batch_size,
            real_batch_size: self.distill_real_batch_size,
            normalize_match: self.distill_normalize_match,
            checkpoint_interval: self.distill_checkpoint_interval,
        }
    }

    pub fn eval_config(&self) -> EvalTrainConfig {
        EvalTrainConfig {
            epochs: self.eval_epochs,
            batch_size: self.eval_batch_size,
            lr: self.eval_lr,
            momentum: self.eval_momentum,
            augment: self.eval_augment,
            repeats: self.eval_repeats,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.budget_ipc == 0 {
            return Err(Error::Config("budget.ipc must be >= 1".into()));
        }
        if self.decomp_kernels == 0 {
            return Err(Error::Config("decomp.kernels must be >= 1".into()));
        }
        if self.expert_count == 0 {
            return Err(Error::Config("expert.count must be >= 1".into()));
        }
        if self.eval_repeats == 0 {
            return Err(Error::Config("eval.repeats must be >= 1".into()));
        }
        self.distill_config().validate()?;
        self.transform_kind()?;
        self.label_rule()?;
        Ok(())
    }
}
