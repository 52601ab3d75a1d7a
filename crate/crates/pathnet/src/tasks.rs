//! Supervised tasks: MNIST IDX ingestion, binary digit-pair tasks with
//! salt-and-pepper corruption, and small synthetic problems.
//!
//! A [`TaskSpec`] is a cheap, cloneable factory. Each consumer (the serial
//! loop, or one async worker) opens its own [`TaskStream`] with a distinct
//! stream id; streams are never shared between threads.

use std::fmt;
use std::fs;
use std::io::Read;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use byteorder::{BigEndian, ByteOrder};
use flate2::read::GzDecoder;
use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::{mix, Matrix, RngStream};

pub const IDX_IMAGES_MAGIC: u32 = 0x0000_0803;
pub const IDX_LABELS_MAGIC: u32 = 0x0000_0801;

/// Conventional MNIST training file names (optionally with `.gz`).
pub const MNIST_TRAIN_IMAGES: &str = "train-images-idx3-ubyte";
pub const MNIST_TRAIN_LABELS: &str = "train-labels-idx1-ubyte";

/// Images as raw bytes (row-major, one image per `rows * cols` block).
#[derive(Clone, Debug, PartialEq)]
pub struct IdxImages {
    pub count: usize,
    pub rows: usize,
    pub cols: usize,
    pub pixels: Vec<u8>,
}

impl IdxImages {
    pub fn image(&self, i: usize) -> &[u8] {
        let n = self.rows * self.cols;
        &self.pixels[i * n..(i + 1) * n]
    }

    /// Pixel values scaled to `[0, 1]`.
    pub fn image_f64(&self, i: usize) -> Vec<f64> {
        self.image(i).iter().map(|&p| f64::from(p) / 255.0).collect()
    }
}

fn read_maybe_gz(path: &Path) -> Result<Vec<u8>> {
    let raw = fs::read(path)
        .map_err(|e| Error::Data(format!("cannot read {}: {e}", path.display())))?;
    if raw.starts_with(&[0x1f, 0x8b]) {
        let mut out = Vec::new();
        GzDecoder::new(raw.as_slice())
            .read_to_end(&mut out)
            .map_err(|e| Error::Format {
                what: "gzip stream",
                offset: 0,
                reason: e.to_string(),
            })?;
        Ok(out)
    } else {
        Ok(raw)
    }
}

fn idx_header(bytes: &[u8], magic: u32, dims: usize, what: &'static str) -> Result<Vec<usize>> {
    let need = 4 + 4 * dims;
    if bytes.len() < need {
        return Err(Error::Format {
            what,
            offset: bytes.len() as u64,
            reason: format!("header needs {need} bytes"),
        });
    }
    let found = BigEndian::read_u32(&bytes[0..4]);
    if found != magic {
        return Err(Error::Format {
            what,
            offset: 0,
            reason: format!("bad magic {found:#010x}, expected {magic:#010x}"),
        });
    }
    Ok((0..dims)
        .map(|d| BigEndian::read_u32(&bytes[4 + 4 * d..8 + 4 * d]) as usize)
        .collect())
}

pub fn parse_idx_images(bytes: &[u8]) -> Result<IdxImages> {
    let dims = idx_header(bytes, IDX_IMAGES_MAGIC, 3, "IDX image file")?;
    let (count, rows, cols) = (dims[0], dims[1], dims[2]);
    let expected = 16 + count * rows * cols;
    if bytes.len() != expected {
        return Err(Error::Format {
            what: "IDX image file",
            offset: bytes.len().min(expected) as u64,
            reason: format!("expected {expected} bytes, file has {}", bytes.len()),
        });
    }
    Ok(IdxImages {
        count,
        rows,
        cols,
        pixels: bytes[16..].to_vec(),
    })
}

pub fn parse_idx_labels(bytes: &[u8]) -> Result<Vec<u8>> {
    let dims = idx_header(bytes, IDX_LABELS_MAGIC, 1, "IDX label file")?;
    let expected = 8 + dims[0];
    if bytes.len() != expected {
        return Err(Error::Format {
            what: "IDX label file",
            offset: bytes.len().min(expected) as u64,
            reason: format!("expected {expected} bytes, file has {}", bytes.len()),
        });
    }
    Ok(bytes[8..].to_vec())
}

pub fn load_idx_images(path: &Path) -> Result<IdxImages> {
    parse_idx_images(&read_maybe_gz(path)?)
}

pub fn load_idx_labels(path: &Path) -> Result<Vec<u8>> {
    parse_idx_labels(&read_maybe_gz(path)?)
}

/// Loads a matching image/label pair of IDX files (plain or gzipped).
pub fn load_idx(images: &Path, labels: &Path) -> Result<MnistData> {
    let images = load_idx_images(images)?;
    let labels = load_idx_labels(labels)?;
    if images.count != labels.len() {
        return Err(Error::Data(format!(
            "{} images but {} labels",
            images.count,
            labels.len()
        )));
    }
    Ok(MnistData { images, labels })
}

#[derive(Clone, Debug, PartialEq)]
pub struct MnistData {
    pub images: IdxImages,
    pub labels: Vec<u8>,
}

impl MnistData {
    /// Finds the MNIST training files in `dir`, preferring uncompressed.
    pub fn load_dir(dir: &Path) -> Result<Self> {
        let find = |stem: &str| -> Result<PathBuf> {
            [stem.to_string(), format!("{stem}.gz")]
                .into_iter()
                .map(|name| dir.join(name))
                .find(|p| p.is_file())
                .ok_or_else(|| {
                    Error::Data(format!(
                        "{stem}[.gz] not found in {} (see `pathnet fetch-data`)",
                        dir.display()
                    ))
                })
        };
        load_idx(&find(MNIST_TRAIN_IMAGES)?, &find(MNIST_TRAIN_LABELS)?)
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }
}

/// With probability `noise_prob` per pixel, replace it by 0 or 1 (equally
/// likely); otherwise keep it.
pub fn salt_pepper(image: &[f64], noise_prob: f64, rng: &mut RngStream) -> Vec<f64> {
    let mut out = image.to_vec();
    salt_pepper_in_place(&mut out, noise_prob, rng);
    out
}

pub fn salt_pepper_in_place(image: &mut [f64], noise_prob: f64, rng: &mut RngStream) {
    if noise_prob <= 0.0 {
        return;
    }
    for p in image.iter_mut() {
        if rng.gen_bool(noise_prob.min(1.0)) {
            *p = if rng.gen_bool(0.5) { 1.0 } else { 0.0 };
        }
    }
}

/// Two MNIST digits relabelled `a → 0`, `b → 1`.
#[derive(Debug)]
pub struct BinaryMnistTask {
    pub digits: (u8, u8),
    pub noise_prob: f64,
    dim: usize,
    /// Filtered images, scaled to `[0, 1]`, one row per image.
    images: Vec<f64>,
    labels: Vec<usize>,
}

impl BinaryMnistTask {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    fn image(&self, i: usize) -> &[f64] {
        &self.images[i * self.dim..(i + 1) * self.dim]
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case", tag = "kind")]
pub enum SyntheticKind {
    /// `x ~ U[0,1]^d`, label = sign of a fixed random hyperplane through the centre.
    LinearlySeparable,
    /// `x ~ U[0,1]^d`, label = `(x0 > ½) xor (x1 > ½)`.
    Xor,
    /// `x ∈ {0,1}^d` uniformly, label = parity of the first `k` bits.
    Parity { k: usize },
}

impl fmt::Display for SyntheticKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            SyntheticKind::LinearlySeparable => write!(f, "linear"),
            SyntheticKind::Xor => write!(f, "xor"),
            SyntheticKind::Parity { k } => write!(f, "parity{k}"),
        }
    }
}

#[derive(Clone, Debug)]
pub struct SyntheticTask {
    pub kind: SyntheticKind,
    pub dim: usize,
    pub seed: u64,
    hyperplane: Vec<f64>,
}

impl SyntheticTask {
    /// Accuracy of the optimal classifier. All generators are noiseless.
    pub fn bayes_accuracy(&self) -> f64 {
        1.0
    }

    pub fn label(&self, x: &[f64]) -> usize {
        match self.kind {
            SyntheticKind::LinearlySeparable => {
                let s: f64 = x
                    .iter()
                    .zip(&self.hyperplane)
                    .map(|(xi, w)| (xi - 0.5) * w)
                    .sum();
                usize::from(s > 0.0)
            }
            SyntheticKind::Xor => usize::from((x[0] > 0.5) ^ (x[1] > 0.5)),
            SyntheticKind::Parity { k } => x[..k].iter().filter(|&&v| v > 0.5).count() % 2,
        }
    }

    fn sample(&self, rng: &mut RngStream) -> Vec<f64> {
        match self.kind {
            SyntheticKind::Parity { .. } => (0..self.dim)
                .map(|_| if rng.gen_bool(0.5) { 1.0 } else { 0.0 })
                .collect(),
            _ => (0..self.dim).map(|_| rng.gen::<f64>()).collect(),
        }
    }
}

#[derive(Clone, Debug)]
enum TaskSource {
    BinaryMnist(Arc<BinaryMnistTask>),
    Synthetic(Arc<SyntheticTask>),
}

/// A supervised task: how to draw samples, how many classes, and when to stop.
#[derive(Clone, Debug)]
pub struct TaskSpec {
    pub id: String,
    pub classes: usize,
    pub input_dim: usize,
    pub stop_threshold: f64,
    pub seed: u64,
    source: TaskSource,
}

pub const DEFAULT_STOP_THRESHOLD: f64 = 0.998;

/// Builds the `a`-vs-`b` task from the digits in `data`.
pub fn make_binary_task(
    data: &MnistData,
    digits: (u8, u8),
    noise_prob: f64,
    seed: u64,
) -> Result<TaskSpec> {
    let (a, b) = digits;
    if a == b || a > 9 || b > 9 {
        return Err(Error::Input(format!(
            "digit pair ({a}, {b}) must be two distinct digits in 0..=9"
        )));
    }
    if !(0.0..=1.0).contains(&noise_prob) {
        return Err(Error::Input(format!("noise_prob {noise_prob} outside [0, 1]")));
    }
    let dim = data.images.rows * data.images.cols;
    let mut images = Vec::new();
    let mut labels = Vec::new();
    let (mut na, mut nb) = (0, 0);
    for (i, &l) in data.labels.iter().enumerate() {
        let mapped = if l == a {
            na += 1;
            0
        } else if l == b {
            nb += 1;
            1
        } else {
            continue;
        };
        images.extend(data.images.image(i).iter().map(|&p| f64::from(p) / 255.0));
        labels.push(mapped);
    }
    if na == 0 || nb == 0 {
        return Err(Error::Data(format!(
            "digit pair ({a}, {b}) has {na} and {nb} images; both classes must be present"
        )));
    }
    Ok(TaskSpec {
        id: format!("mnist-{a}v{b}"),
        classes: 2,
        input_dim: dim,
        stop_threshold: DEFAULT_STOP_THRESHOLD,
        seed,
        source: TaskSource::BinaryMnist(Arc::new(BinaryMnistTask {
            digits,
            noise_prob,
            dim,
            images,
            labels,
        })),
    })
}

pub fn make_synthetic(kind: SyntheticKind, dim: usize, seed: u64) -> Result<TaskSpec> {
    if dim < 2 {
        return Err(Error::Input(format!("synthetic tasks need dim >= 2, got {dim}")));
    }
    if let SyntheticKind::Parity { k } = kind {
        if k == 0 || k > dim {
            return Err(Error::Input(format!("parity width {k} must be in 1..={dim}")));
        }
    }
    let mut rng = RngStream::new(mix(seed), u64::MAX);
    let hyperplane = (0..dim).map(|_| rng.gen_range(-1.0..1.0)).collect();
    Ok(TaskSpec {
        id: format!("synthetic-{kind}-{dim}"),
        classes: 2,
        input_dim: dim,
        stop_threshold: DEFAULT_STOP_THRESHOLD,
        seed,
        source: TaskSource::Synthetic(Arc::new(SyntheticTask {
            kind,
            dim,
            seed,
            hyperplane,
        })),
    })
}

impl TaskSpec {
    pub fn with_id(mut self, id: impl Into<String>) -> Self {
        self.id = id.into();
        self
    }

    pub fn with_threshold(mut self, stop_threshold: f64) -> Self {
        self.stop_threshold = stop_threshold;
        self
    }

    pub fn binary_mnist(&self) -> Option<&BinaryMnistTask> {
        match &self.source {
            TaskSource::BinaryMnist(t) => Some(t),
            TaskSource::Synthetic(_) => None,
        }
    }

    pub fn synthetic(&self) -> Option<&SyntheticTask> {
        match &self.source {
            TaskSource::Synthetic(t) => Some(t),
            TaskSource::BinaryMnist(_) => None,
        }
    }

    /// Opens an independent sample stream. Equal `(seed, stream_id)` give
    /// equal sample sequences.
    pub fn stream(&self, stream_id: u64) -> TaskStream {
        TaskStream {
            task_id: self.id.clone(),
            source: self.source.clone(),
            input_dim: self.input_dim,
            rng: RngStream::new(mix(self.seed), stream_id),
            order: Vec::new(),
            pos: 0,
        }
    }
}

/// An infinite, seeded sequence of labelled samples.
pub struct TaskStream {
    task_id: String,
    source: TaskSource,
    input_dim: usize,
    rng: RngStream,
    order: Vec<usize>,
    pos: usize,
}

/// A mini-batch: one sample per row of `x`.
#[derive(Clone, Debug, PartialEq)]
pub struct Batch {
    pub x: Matrix,
    pub labels: Vec<usize>,
}

impl TaskStream {
    pub fn task_id(&self) -> &str {
        &self.task_id
    }

    pub fn input_dim(&self) -> usize {
        self.input_dim
    }

    fn next_into(&mut self, out: &mut [f64]) -> usize {
        match &self.source {
            TaskSource::BinaryMnist(task) => {
                if self.pos == self.order.len() {
                    self.order = (0..task.len()).collect();
                    self.order.shuffle(&mut self.rng);
                    self.pos = 0;
                }
                let i = self.order[self.pos];
                self.pos += 1;
                out.copy_from_slice(task.image(i));
                salt_pepper_in_place(out, task.noise_prob, &mut self.rng);
                task.labels[i]
            }
            TaskSource::Synthetic(task) => {
                let x = task.sample(&mut self.rng);
                let label = task.label(&x);
                out.copy_from_slice(&x);
                label
            }
        }
    }

    pub fn next_sample(&mut self) -> (Vec<f64>, usize) {
        let mut x = vec![0.0; self.input_dim];
        let label = self.next_into(&mut x);
        (x, label)
    }

    pub fn next_batch(&mut self, size: usize) -> Batch {
        let mut x = Matrix::zeros(size, self.input_dim);
        let labels = (0..size).map(|r| self.next_into(x.row_mut(r))).collect();
        Batch { x, labels }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn idx_images(count: u32, rows: u32, cols: u32, pixels: &[u8]) -> Vec<u8> {
        let mut v = Vec::new();
        for w in [IDX_IMAGES_MAGIC, count, rows, cols] {
            v.extend_from_slice(&w.to_be_bytes());
        }
        v.extend_from_slice(pixels);
        v
    }

    fn idx_labels(labels: &[u8]) -> Vec<u8> {
        let mut v = Vec::new();
        v.extend_from_slice(&IDX_LABELS_MAGIC.to_be_bytes());
        v.extend_from_slice(&(labels.len() as u32).to_be_bytes());
        v.extend_from_slice(labels);
        v
    }

    /// Tiny dataset: two 2x2 images per digit 0..=9, pixel value = digit*20.
    pub(crate) fn toy_mnist() -> MnistData {
        let mut pixels = Vec::new();
        let mut labels = Vec::new();
        for d in 0..10u8 {
            for k in 0..2u8 {
                pixels.extend([d * 20, d * 20 + k, 0, 255]);
                labels.push(d);
            }
        }
        MnistData {
            images: IdxImages {
                count: 20,
                rows: 2,
                cols: 2,
                pixels,
            },
            labels,
        }
    }

    #[test]
    fn parses_two_image_fixture() {
        let pixels: Vec<u8> = (0..8).map(|i| i * 30).collect();
        let bytes = idx_images(2, 2, 2, &pixels);
        let images = parse_idx_images(&bytes).unwrap();
        assert_eq!((images.count, images.rows, images.cols), (2, 2, 2));
        assert_eq!(images.image(1), &pixels[4..]);
        assert_eq!(images.image_f64(0)[1], 30.0 / 255.0);
        let labels = parse_idx_labels(&idx_labels(&[3, 7])).unwrap();
        assert_eq!(labels, vec![3, 7]);
    }

    #[test]
    fn label_file_length_is_header_plus_count() {
        assert_eq!(idx_labels(&[1, 2, 3, 4, 5]).len(), 8 + 5);
    }

    #[test]
    fn bad_magic_reports_offset_zero() {
        let mut bytes = idx_images(1, 1, 1, &[0]);
        bytes[3] = 0x01;
        assert!(matches!(
            parse_idx_images(&bytes),
            Err(Error::Format { offset: 0, .. })
        ));
        assert!(matches!(
            parse_idx_labels(&idx_images(1, 1, 1, &[0])),
            Err(Error::Format { offset: 0, .. })
        ));
    }

    #[test]
    fn truncated_file_reports_offset() {
        let bytes = idx_images(2, 2, 2, &[0; 7]);
        match parse_idx_images(&bytes) {
            Err(Error::Format { offset, .. }) => assert_eq!(offset, 16 + 7),
            other => panic!("{other:?}"),
        }
        match parse_idx_images(&bytes[..10]) {
            Err(Error::Format { offset, .. }) => assert_eq!(offset, 10),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn gzip_files_load_transparently() {
        use flate2::write::GzEncoder;
        use std::io::Write;
        let dir = tempfile::tempdir().unwrap();
        let img = idx_images(1, 2, 2, &[0, 85, 170, 255]);
        let mut enc = GzEncoder::new(Vec::new(), flate2::Compression::default());
        enc.write_all(&img).unwrap();
        fs::write(dir.path().join("train-images-idx3-ubyte.gz"), enc.finish().unwrap()).unwrap();
        fs::write(dir.path().join("train-labels-idx1-ubyte"), idx_labels(&[4])).unwrap();
        let data = MnistData::load_dir(dir.path()).unwrap();
        assert_eq!(data.labels, vec![4]);
        assert_eq!(data.images.image_f64(0), vec![0.0, 1.0 / 3.0, 2.0 / 3.0, 1.0]);
    }

    #[test]
    fn missing_files_are_data_errors() {
        let dir = tempfile::tempdir().unwrap();
        assert!(matches!(MnistData::load_dir(dir.path()), Err(Error::Data(_))));
    }

    #[test]
    fn salt_pepper_zero_is_identity() {
        let img: Vec<f64> = (0..50).map(|i| i as f64 / 50.0).collect();
        assert_eq!(salt_pepper(&img, 0.0, &mut RngStream::new(1, 0)), img);
    }

    #[test]
    fn salt_pepper_full_noise_is_binary_and_balanced() {
        let img = vec![0.3; 20_000];
        let out = salt_pepper(&img, 1.0, &mut RngStream::new(2, 0));
        assert!(out.iter().all(|&p| p == 0.0 || p == 1.0));
        let mean = out.iter().sum::<f64>() / out.len() as f64;
        let sigma = (0.25 / out.len() as f64).sqrt();
        assert!((mean - 0.5).abs() < 3.0 * sigma, "mean {mean}");
    }

    #[test]
    fn salt_pepper_half_noise_corrupts_half() {
        // Pixels at 0.5 change exactly when corrupted.
        let img = vec![0.5; 784];
        let mut rng = RngStream::new(3, 0);
        let trials = 400;
        let total: usize = (0..trials)
            .map(|_| salt_pepper(&img, 0.5, &mut rng).iter().filter(|&&p| p != 0.5).count())
            .sum();
        let n = (784 * trials) as f64;
        let sigma = (n * 0.25).sqrt();
        assert!((total as f64 - n * 0.5).abs() < 3.0 * sigma);
    }

    #[test]
    fn binary_task_filters_and_relabels() {
        let data = toy_mnist();
        let task = make_binary_task(&data, (5, 6), 0.0, 1).unwrap();
        assert_eq!(task.id, "mnist-5v6");
        let mut s = task.stream(0);
        for _ in 0..40 {
            let (x, label) = s.next_sample();
            // First pixel encodes the original digit.
            let digit = (x[0] * 255.0 / 20.0).round() as usize;
            assert!(digit == 5 || digit == 6);
            assert_eq!(label, usize::from(digit == 6));
        }
    }

    #[test]
    fn binary_task_errors() {
        let data = toy_mnist();
        assert!(matches!(make_binary_task(&data, (3, 3), 0.5, 0), Err(Error::Input(_))));
        let mut only_fives = data.clone();
        only_fives.labels.iter_mut().for_each(|l| *l = 5);
        assert!(matches!(
            make_binary_task(&only_fives, (5, 6), 0.5, 0),
            Err(Error::Data(_))
        ));
    }

    #[test]
    fn streams_are_reproducible_and_noise_is_redrawn() {
        let data = toy_mnist();
        let task = make_binary_task(&data, (1, 2), 0.5, 42).unwrap();
        let a: Vec<_> = {
            let mut s = task.stream(3);
            (0..1000).map(|_| s.next_sample()).collect()
        };
        let b: Vec<_> = {
            let mut s = task.stream(3);
            (0..1000).map(|_| s.next_sample()).collect()
        };
        assert_eq!(a, b);
        // Four images, so the same image recurs many times with fresh noise.
        let distinct: std::collections::HashSet<Vec<u64>> = a
            .iter()
            .map(|(x, _)| x.iter().map(|v| v.to_bits()).collect())
            .collect();
        assert!(distinct.len() > 4);
        assert!(a.iter().flat_map(|(x, _)| x).all(|&v| (0.0..=1.0).contains(&v)));
    }

    #[test]
    fn parity_two_is_xor() {
        let parity = make_synthetic(SyntheticKind::Parity { k: 2 }, 6, 1).unwrap();
        let xor = make_synthetic(SyntheticKind::Xor, 6, 1).unwrap();
        let mut s = parity.stream(0);
        for _ in 0..500 {
            let (x, label) = s.next_sample();
            assert_eq!(label, xor.synthetic().unwrap().label(&x));
            assert!(x.iter().all(|&v| v == 0.0 || v == 1.0));
        }
    }

    #[test]
    fn synthetic_rejects_tiny_dim() {
        assert!(make_synthetic(SyntheticKind::Xor, 1, 0).is_err());
        assert!(make_synthetic(SyntheticKind::Parity { k: 4 }, 3, 0).is_err());
    }
}
