//! Dataset ingestion: generated blob tasks, IDX file pairs, and raw
//! binary records, all normalized the same way and fingerprinted so
//! expert banks can refuse to mix with foreign data.

use std::fs;
use std::path::{Path, PathBuf};

use rand::Rng;
use sha2::{Digest, Sha256};

use crate::diffmath::NdArray;
use crate::error::{Error, Result};
use crate::rng::SeedSplitter;

/// Labeled image arrays, `(N, C, H, W)` in `[0, 1]` before normalization.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub images: NdArray,
    pub labels: Vec<usize>,
    pub num_classes: usize,
    /// Per-channel normalization applied to the images, if any.
    pub norm: Option<NormStats>,
    pub fingerprint: String,
}

#[derive(Debug, Clone, PartialEq)]
pub struct NormStats {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn image_shape(&self) -> (usize, usize, usize) {
        let s = self.images.shape();
        (s[1], s[2], s[3])
    }

    /// Rows of the image block for the given sample indices.
    pub fn subset(&self, indices: &[usize]) -> Result<(NdArray, Vec<usize>)> {
        let s = self.images.shape();
        let tail: usize = s[1..].iter().product();
        let mut data = Vec::with_capacity(indices.len() * tail);
        let mut labels = Vec::with_capacity(indices.len());
        for &i in indices {
            if i >= self.len() {
                return Err(Error::Range(format!("sample {i} out of {}", self.len())));
            }
            data.extend_from_slice(&self.images.data()[i * tail..(i + 1) * tail]);
            labels.push(self.labels[i]);
        }
        let mut shape = vec![indices.len()];
        shape.extend(&s[1..]);
        Ok((NdArray::new(shape, data)?, labels))
    }

    pub fn indices_of_class(&self, class: usize) -> Vec<usize> {
        (0..self.len()).filter(|&i| self.labels[i] == class).collect()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum DataSource {
    /// Deterministic class-prototype blobs rendered as images.
    Blobs(BlobsSpec),
    /// IDX image/label file pair (big-endian, u8 pixels).
    Idx { images: PathBuf, labels: PathBuf },
    /// Records of `label u8 | C*H*W f32 LE pixels in [0, 1]`.
    Raw { path: PathBuf, channels: usize, height: usize, width: usize, classes: usize },
}

/// Spec for the generated desk task: each class has a smoothed random
/// prototype in `[0.15, 0.85]`; samples add pixelwise Gaussian noise.
#[derive(Debug, Clone, PartialEq)]
pub struct BlobsSpec {
    pub classes: usize,
    pub train_per_class: usize,
    pub test_per_class: usize,
    pub height: usize,
    pub width: usize,
    pub noise: f64,
    pub seed: u64,
}

impl Default for BlobsSpec {
    fn default() -> Self {
        Self {
            classes: 2,
            train_per_class: 100,
            test_per_class: 100,
            height: 8,
            width: 8,
            noise: 0.25,
            seed: 7,
        }
    }
}

/// Load the train/test pair for a source, scale to `[0, 1]`, and (when
/// `normalize` is set) standardize per channel with train-set stats.
pub fn load_dataset(source: &DataSource, normalize: bool) -> Result<(Dataset, Dataset)> {
    let (mut train, mut test) = match source {
        DataSource::Blobs(spec) => load_blobs(spec)?,
        DataSource::Idx { images, labels } => {
            let all = load_idx_pair(images, labels)?;
            // File sources carry no split; hold out every fifth sample.
            split_holdout(all, 5)?
        }
        DataSource::Raw { path, channels, height, width, classes } => {
            let all = load_raw(path, *channels, *height, *width, *classes)?;
            split_holdout(all, 5)?
        }
    };
    if normalize {
        let stats = channel_stats(&train.images);
        apply_norm(&mut train.images, &stats);
        apply_norm(&mut test.images, &stats);
        train.norm = Some(stats.clone());
        test.norm = Some(stats);
    }
    train.images.round_to_f32();
    test.images.round_to_f32();
    train.fingerprint = fingerprint(&train.images, &train.labels);
    test.fingerprint = fingerprint(&test.images, &test.labels);
    Ok((train, test))
}

fn load_blobs(spec: &BlobsSpec) -> Result<(Dataset, Dataset)> {
    if spec.classes < 1 || spec.train_per_class < 1 || spec.test_per_class < 1 {
        return Err(Error::Config(format!("blob spec needs positive sizes: {spec:?}")));
    }
    let split = SeedSplitter::new(spec.seed);
    let prototypes: Vec<NdArray> = (0..spec.classes)
        .map(|c| {
            let mut rng = split.indexed("blobs/prototype", c as u64);
            let raw = NdArray::uniform(&[spec.height, spec.width], 0.0, 1.0, &mut rng);
            let smooth = box_blur(&box_blur(&raw));
            rescale(&smooth, 0.15, 0.85)
        })
        .collect();
    let make = |label: &str, per_class: usize| -> Result<Dataset> {
        let n = per_class * spec.classes;
        let mut images = NdArray::zeros(&[n, 1, spec.height, spec.width]);
        let mut labels = Vec::with_capacity(n);
        let plane = spec.height * spec.width;
        for c in 0..spec.classes {
            let mut rng = split.indexed(&format!("blobs/{label}"), c as u64);
            for k in 0..per_class {
                let row = c * per_class + k;
                for p in 0..plane {
                    let noise: f64 = rng.sample(rand_distr::StandardNormal);
                    let v = (prototypes[c].data()[p] + spec.noise * noise).clamp(0.0, 1.0);
                    images.data_mut()[row * plane + p] = v;
                }
                labels.push(c);
            }
        }
        Ok(Dataset {
            images,
            labels,
            num_classes: spec.classes,
            norm: None,
            fingerprint: String::new(),
        })
    };
    Ok((make("train", spec.train_per_class)?, make("test", spec.test_per_class)?))
}

fn box_blur(a: &NdArray) -> NdArray {
    let (h, w) = (a.shape()[0], a.shape()[1]);
    NdArray::from_fn(&[h, w], |idx| {
        let (i, j) = (idx[0] as isize, idx[1] as isize);
        let mut acc = 0.0;
        let mut n = 0.0;
        for di in -1..=1isize {
            for dj in -1..=1isize {
                let (y, x) = (i + di, j + dj);
                if y >= 0 && y < h as isize && x >= 0 && x < w as isize {
                    acc += a.at(&[y as usize, x as usize]);
                    n += 1.0;
                }
            }
        }
        acc / n
    })
}

fn rescale(a: &NdArray, lo: f64, hi: f64) -> NdArray {
    let min = a.data().iter().copied().fold(f64::INFINITY, f64::min);
    let max = a.data().iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let span = if max > min { max - min } else { 1.0 };
    NdArray::from_fn(a.shape(), |idx| lo + (a.at(idx) - min) / span * (hi - lo))
}

fn split_holdout(all: Dataset, every: usize) -> Result<(Dataset, Dataset)> {
    let test_idx: Vec<usize> = (0..all.len()).filter(|i| i % every == every - 1).collect();
    let train_idx: Vec<usize> = (0..all.len()).filter(|i| i % every != every - 1).collect();
    if train_idx.is_empty() || test_idx.is_empty() {
        return Err(Error::Data(format!("{} samples cannot form a train/test split", all.len())));
    }
    let (train_images, train_labels) = all.subset(&train_idx)?;
    let (test_images, test_labels) = all.subset(&test_idx)?;
    Ok((
        Dataset {
            images: train_images,
            labels: train_labels,
            num_classes: all.num_classes,
            norm: None,
            fingerprint: String::new(),
        },
        Dataset {
            images: test_images,
            labels: test_labels,
            num_classes: all.num_classes,
            norm: None,
            fingerprint: String::new(),
        },
    ))
}

const IDX_IMAGES_MAGIC: u32 = 0x0000_0803;
const IDX_LABELS_MAGIC: u32 = 0x0000_0801;

fn load_idx_pair(images_path: &Path, labels_path: &Path) -> Result<Dataset> {
    let img_bytes = fs::read(images_path)?;
    let lab_bytes = fs::read(labels_path)?;

    let be_u32 = |bytes: &[u8], at: usize, what: &str| -> Result<u32> {
        let slice = bytes.get(at..at + 4).ok_or(Error::Format {
            offset: at as u64,
            msg: format!("truncated while reading {what}"),
        })?;
        Ok(u32::from_be_bytes(slice.try_into().expect("four bytes")))
    };

    let magic = be_u32(&img_bytes, 0, "image magic")?;
    if magic != IDX_IMAGES_MAGIC {
        return Err(Error::Format {
            offset: 0,
            msg: format!("image magic {magic:#010x}, want {IDX_IMAGES_MAGIC:#010x}"),
        });
    }
    let n = be_u32(&img_bytes, 4, "image count")? as usize;
    let h = be_u32(&img_bytes, 8, "rows")? as usize;
    let w = be_u32(&img_bytes, 12, "cols")? as usize;
    let want = 16 + n * h * w;
    if img_bytes.len() != want {
        return Err(Error::Format {
            offset: img_bytes.len().min(want) as u64,
            msg: format!("image payload is {} bytes, want {want}", img_bytes.len()),
        });
    }

    let lmagic = be_u32(&lab_bytes, 0, "label magic")?;
    if lmagic != IDX_LABELS_MAGIC {
        return Err(Error::Format {
            offset: 0,
            msg: format!("label magic {lmagic:#010x}, want {IDX_LABELS_MAGIC:#010x}"),
        });
    }
    let ln = be_u32(&lab_bytes, 4, "label count")? as usize;
    if ln != n {
        return Err(Error::Format {
            offset: 4,
            msg: format!("{ln} labels for {n} images"),
        });
    }
    if lab_bytes.len() != 8 + n {
        return Err(Error::Format {
            offset: lab_bytes.len().min(8 + n) as u64,
            msg: format!("label payload is {} bytes, want {}", lab_bytes.len(), 8 + n),
        });
    }

    let data: Vec<f64> = img_bytes[16..].iter().map(|&b| b as f64 / 255.0).collect();
    let labels: Vec<usize> = lab_bytes[8..].iter().map(|&b| b as usize).collect();
    let num_classes = labels.iter().copied().max().unwrap_or(0) + 1;
    Ok(Dataset {
        images: NdArray::new(vec![n, 1, h, w], data)?,
        labels,
        num_classes,
        norm: None,
        fingerprint: String::new(),
    })
}

fn load_raw(path: &Path, channels: usize, height: usize, width: usize, classes: usize) -> Result<Dataset> {
    let bytes = fs::read(path)?;
    let pixels = channels * height * width;
    let record = 1 + 4 * pixels;
    if bytes.is_empty() || bytes.len() % record != 0 {
        return Err(Error::Format {
            offset: (bytes.len() / record * record) as u64,
            msg: format!("file is {} bytes, not a multiple of record size {record}", bytes.len()),
        });
    }
    let n = bytes.len() / record;
    let mut images = NdArray::zeros(&[n, channels, height, width]);
    let mut labels = Vec::with_capacity(n);
    for r in 0..n {
        let base = r * record;
        let label = bytes[base] as usize;
        if label >= classes {
            return Err(Error::Format {
                offset: base as u64,
                msg: format!("label {label} out of {classes} classes"),
            });
        }
        labels.push(label);
        for p in 0..pixels {
            let at = base + 1 + 4 * p;
            let v = f32::from_le_bytes(bytes[at..at + 4].try_into().expect("four bytes")) as f64;
            if !(-1e-6..=1.0 + 1e-6).contains(&v) {
                return Err(Error::Format {
                    offset: at as u64,
                    msg: format!("pixel {v} outside [0, 1]"),
                });
            }
            images.data_mut()[r * pixels + p] = v.clamp(0.0, 1.0);
        }
    }
    Ok(Dataset { images, labels, num_classes: classes, norm: None, fingerprint: String::new() })
}

fn channel_stats(images: &NdArray) -> NormStats {
    let s = images.shape();
    let (n, c, h, w) = (s[0], s[1], s[2], s[3]);
    let plane = h * w;
    let mut mean = vec![0.0; c];
    let mut std = vec![0.0; c];
    for ch in 0..c {
        let mut acc = 0.0;
        for i in 0..n {
            let base = (i * c + ch) * plane;
            for p in 0..plane {
                acc += images.data()[base + p];
            }
        }
        mean[ch] = acc / (n * plane) as f64;
        let mut var = 0.0;
        for i in 0..n {
            let base = (i * c + ch) * plane;
            for p in 0..plane {
                var += (images.data()[base + p] - mean[ch]).powi(2);
            }
        }
        var /= (n * plane) as f64;
        // Constant channels normalize to zero rather than blowing up.
        std[ch] = if var > 1e-12 { var.sqrt() } else { 1.0 };
    }
    NormStats { mean, std }
}

fn apply_norm(images: &mut NdArray, stats: &NormStats) {
    let s = images.shape().to_vec();
    let (n, c, h, w) = (s[0], s[1], s[2], s[3]);
    let plane = h * w;
    for i in 0..n {
        for ch in 0..c {
            let base = (i * c + ch) * plane;
            for p in 0..plane {
                let v = &mut images.data_mut()[base + p];
                *v = (*v - stats.mean[ch]) / stats.std[ch];
            }
        }
    }
}

/// Stable digest of the exact array contents and labels.
pub fn fingerprint(images: &NdArray, labels: &[usize]) -> String {
    let mut h = Sha256::new();
    for &e in images.shape() {
        h.update((e as u64).to_le_bytes());
    }
    for v in images.data() {
        h.update((*v as f32).to_le_bytes());
    }
    for &l in labels {
        h.update((l as u64).to_le_bytes());
    }
    hex(&h.finalize())
}

pub fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}
