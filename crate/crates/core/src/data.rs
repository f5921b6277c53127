//! Labelled datasets: synthetic generators, CSV and IDX loaders, splits.

use std::f64::consts::PI;
use std::fs;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::Rng as _;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::autodiff::Tensor;
use crate::rng::{self, Domain};

const IMAGE_MAGIC: u32 = 0x0000_0803;
const LABEL_MAGIC: u32 = 0x0000_0801;

#[derive(Debug, Error)]
pub enum DataError {
    #[error("{path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
    #[error("bad magic 0x{got:08x}, expected 0x{expected:08x}")]
    BadMagic { expected: u32, got: u32 },
    #[error("truncated label file")]
    TruncatedLabels,
    #[error("truncated image file")]
    TruncatedImages,
    #[error("{images} images but {labels} labels")]
    CountMismatch { images: usize, labels: usize },
    #[error("line {line}: expected {expected} fields, got {got}")]
    RowLength { line: usize, expected: usize, got: usize },
    #[error("line {line}: {msg}")]
    Parse { line: usize, msg: String },
    #[error("label {label} out of range for {classes} classes")]
    LabelOutOfRange { label: usize, classes: usize },
    #[error("{0} split is empty")]
    EmptySplit(&'static str),
    #[error("invalid data parameter: {0}")]
    Invalid(String),
}

pub type Result<T> = std::result::Result<T, DataError>;

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub features: Tensor<f32>,
    pub labels: Vec<usize>,
    pub num_classes: usize,
}

impl Dataset {
    pub fn new(features: Tensor<f32>, labels: Vec<usize>, num_classes: usize) -> Result<Self> {
        if features.rows() != labels.len() {
            return Err(DataError::Invalid(format!("{} rows but {} labels", features.rows(), labels.len())));
        }
        if let Some(&label) = labels.iter().find(|&&l| l >= num_classes) {
            return Err(DataError::LabelOutOfRange { label, classes: num_classes });
        }
        Ok(Dataset { features, labels, num_classes })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn input_dim(&self) -> usize {
        self.features.cols()
    }

    pub fn subset(&self, idx: &[usize]) -> Dataset {
        Dataset {
            features: self.features.gather_rows(idx),
            labels: idx.iter().map(|&i| self.labels[i]).collect(),
            num_classes: self.num_classes,
        }
    }

    /// Shuffles with the `(seed, Split)` stream and holds out
    /// `round(len * val_fraction)` rows for validation.
    pub fn split(&self, val_fraction: f64, seed: u64) -> Result<(Dataset, Dataset)> {
        if !(0.0..1.0).contains(&val_fraction) {
            return Err(DataError::Invalid(format!("val_fraction {val_fraction} outside [0, 1)")));
        }
        let mut idx: Vec<usize> = (0..self.len()).collect();
        idx.shuffle(&mut rng::stream(seed, Domain::Split, 0));
        let n_val = (self.len() as f64 * val_fraction).round() as usize;
        let (val, train) = idx.split_at(n_val);
        if train.is_empty() {
            return Err(DataError::EmptySplit("train"));
        }
        if val.is_empty() {
            return Err(DataError::EmptySplit("validation"));
        }
        Ok((self.subset(train), self.subset(val)))
    }
}

/// Where a dataset comes from.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case", deny_unknown_fields)]
pub enum DataSource {
    SyntheticSpirals { n: usize, noise: f64 },
    SyntheticBlobs { n: usize, centers: usize, dim: usize, std: f64 },
    Csv { path: PathBuf, num_classes: usize },
    Idx { images: PathBuf, labels: PathBuf, num_classes: usize },
}

impl DataSource {
    pub fn load(&self, seed: u64) -> Result<Dataset> {
        match self {
            DataSource::SyntheticSpirals { n, noise } => spirals(*n, *noise, seed),
            DataSource::SyntheticBlobs { n, centers, dim, std } => blobs(*n, *centers, *dim, *std, seed),
            DataSource::Csv { path, num_classes } => load_csv(path, *num_classes),
            DataSource::Idx { images, labels, num_classes } => load_idx(images, labels, *num_classes),
        }
    }
}

/// Two interleaved spiral arms, one per class, each sweeping 1.5 turns.
/// Row `i` belongs to class `i % 2`. Gaussian noise of std `noise` is added
/// to both coordinates.
pub fn spirals(n: usize, noise: f64, seed: u64) -> Result<Dataset> {
    if n < 2 || !(noise >= 0.0) {
        return Err(DataError::Invalid(format!("spirals n={n} noise={noise}")));
    }
    let mut rng = rng::stream(seed, Domain::Data, 0);
    let normal = Normal::new(0.0, noise).expect("non-negative std");
    let per_class = n.div_ceil(2);
    let mut data = Vec::with_capacity(2 * n);
    let mut labels = Vec::with_capacity(n);
    for i in 0..n {
        let class = i % 2;
        let k = i / 2;
        let frac = if per_class > 1 { k as f64 / (per_class - 1) as f64 } else { 0.0 };
        let t = 0.25 * PI + frac * 3.0 * PI;
        let phase = class as f64 * PI;
        let r = t / (3.25 * PI);
        let x = r * (t + phase).cos() + normal.sample(&mut rng);
        let y = r * (t + phase).sin() + normal.sample(&mut rng);
        data.push(x as f32);
        data.push(y as f32);
        labels.push(class);
    }
    Dataset::new(Tensor::from_vec(n, 2, data).expect("sized"), labels, 2)
}

/// `centers` isotropic Gaussian clusters in `dim` dimensions, centres drawn
/// uniformly from `[-5, 5]^dim`. Row `i` belongs to cluster `i % centers`.
pub fn blobs(n: usize, centers: usize, dim: usize, std: f64, seed: u64) -> Result<Dataset> {
    if n == 0 || centers < 2 || dim == 0 || !(std >= 0.0) {
        return Err(DataError::Invalid(format!("blobs n={n} centers={centers} dim={dim} std={std}")));
    }
    let mut rng = rng::stream(seed, Domain::Data, 1);
    let mids: Vec<Vec<f64>> = (0..centers).map(|_| (0..dim).map(|_| rng.random_range(-5.0..5.0)).collect()).collect();
    let normal = Normal::new(0.0, std).expect("non-negative std");
    let mut data = Vec::with_capacity(n * dim);
    let mut labels = Vec::with_capacity(n);
    for i in 0..n {
        let c = i % centers;
        data.extend(mids[c].iter().map(|m| (m + normal.sample(&mut rng)) as f32));
        labels.push(c);
    }
    Dataset::new(Tensor::from_vec(n, dim, data).expect("sized"), labels, centers)
}

/// Headerless numeric CSV; the final column is an integer class label.
pub fn load_csv(path: &Path, num_classes: usize) -> Result<Dataset> {
    let text = read(path)?;
    parse_csv(&text, num_classes)
}

pub fn parse_csv(text: &str, num_classes: usize) -> Result<Dataset> {
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(false)
        .flexible(true)
        .trim(csv::Trim::All)
        .from_reader(text.as_bytes());
    let mut width = None;
    let mut data = Vec::new();
    let mut labels = Vec::new();
    for (i, rec) in reader.records().enumerate() {
        let line = i + 1;
        let rec = rec.map_err(|e| DataError::Parse { line, msg: e.to_string() })?;
        let expected = *width.get_or_insert(rec.len());
        if rec.len() != expected || expected < 2 {
            return Err(DataError::RowLength { line, expected: expected.max(2), got: rec.len() });
        }
        for field in rec.iter().take(expected - 1) {
            let v: f32 = field.parse().map_err(|_| DataError::Parse { line, msg: format!("not a number: {field:?}") })?;
            data.push(v);
        }
        let raw = &rec[expected - 1];
        let label: usize = raw.parse().map_err(|_| DataError::Parse { line, msg: format!("not a class label: {raw:?}") })?;
        if label >= num_classes {
            return Err(DataError::LabelOutOfRange { label, classes: num_classes });
        }
        labels.push(label);
    }
    let cols = width.map_or(0, |w| w - 1);
    if labels.is_empty() {
        return Err(DataError::Invalid("csv contains no rows".into()));
    }
    Dataset::new(Tensor::from_vec(labels.len(), cols, data).expect("sized"), labels, num_classes)
}

/// IDX image/label pair. Images are `u8` with magic `0x00000803` and three
/// big-endian dimensions; labels use magic `0x00000801` and one. Pixels are
/// scaled to `[0, 1]` and flattened row-major.
pub fn load_idx(images: &Path, labels: &Path, num_classes: usize) -> Result<Dataset> {
    let img = fs::read(images).map_err(|source| DataError::Io { path: images.into(), source })?;
    let lab = fs::read(labels).map_err(|source| DataError::Io { path: labels.into(), source })?;
    parse_idx(&img, &lab, num_classes)
}

pub fn parse_idx(images: &[u8], labels: &[u8], num_classes: usize) -> Result<Dataset> {
    let label_values = parse_idx_labels(labels)?;
    let (count, pixels_per, pixels) = parse_idx_images(images)?;
    if count != label_values.len() {
        return Err(DataError::CountMismatch { images: count, labels: label_values.len() });
    }
    let labels: Vec<usize> = label_values.into_iter().map(usize::from).collect();
    if let Some(&label) = labels.iter().find(|&&l| l >= num_classes) {
        return Err(DataError::LabelOutOfRange { label, classes: num_classes });
    }
    let data = pixels.iter().map(|&p| p as f32 / 255.0).collect();
    Dataset::new(Tensor::from_vec(count, pixels_per, data).expect("sized"), labels, num_classes)
}

pub fn parse_idx_labels(bytes: &[u8]) -> Result<Vec<u8>> {
    let header = read_header(bytes, LABEL_MAGIC, 1, DataError::TruncatedLabels)?;
    let n = header[0];
    let body = &bytes[8..];
    if body.len() < n {
        return Err(DataError::TruncatedLabels);
    }
    Ok(body[..n].to_vec())
}

/// Returns `(count, rows * cols, pixels)`.
pub fn parse_idx_images(bytes: &[u8]) -> Result<(usize, usize, &[u8])> {
    let header = read_header(bytes, IMAGE_MAGIC, 3, DataError::TruncatedImages)?;
    let per = header[1] * header[2];
    let total = header[0].checked_mul(per).ok_or(DataError::TruncatedImages)?;
    let body = &bytes[16..];
    if body.len() < total {
        return Err(DataError::TruncatedImages);
    }
    Ok((header[0], per, &body[..total]))
}

fn read_header(bytes: &[u8], magic: u32, dims: usize, truncated: DataError) -> Result<Vec<usize>> {
    let word = |i: usize| bytes.get(4 * i..4 * i + 4).map(|b| u32::from_be_bytes(b.try_into().unwrap()));
    let got = word(0).ok_or_else(|| clone_truncated(&truncated))?;
    if got != magic {
        return Err(DataError::BadMagic { expected: magic, got });
    }
    (1..=dims).map(|i| word(i).map(|v| v as usize).ok_or_else(|| clone_truncated(&truncated))).collect()
}

fn clone_truncated(e: &DataError) -> DataError {
    match e {
        DataError::TruncatedLabels => DataError::TruncatedLabels,
        _ => DataError::TruncatedImages,
    }
}

fn read(path: &Path) -> Result<String> {
    fs::read_to_string(path).map_err(|source| DataError::Io { path: path.into(), source })
}

/// Serializes an IDX label file.
pub fn encode_idx_labels(labels: &[u8]) -> Vec<u8> {
    let mut out = LABEL_MAGIC.to_be_bytes().to_vec();
    out.extend((labels.len() as u32).to_be_bytes());
    out.extend_from_slice(labels);
    out
}

/// Serializes an IDX image file of `count` images of `rows x cols`.
pub fn encode_idx_images(rows: usize, cols: usize, pixels: &[u8]) -> Vec<u8> {
    let count = pixels.len() / (rows * cols).max(1);
    let mut out = IMAGE_MAGIC.to_be_bytes().to_vec();
    for d in [count, rows, cols] {
        out.extend((d as u32).to_be_bytes());
    }
    out.extend_from_slice(pixels);
    out
}
