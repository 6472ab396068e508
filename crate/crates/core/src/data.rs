//! Labeled datasets: MNIST IDX files, synthetic Gaussian blobs, and seeded
//! mini-batch ordering.

use std::fs;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

const IMAGES_MAGIC: [u8; 4] = [0, 0, 0x08, 0x03];
const LABELS_MAGIC: [u8; 4] = [0, 0, 0x08, 0x01];

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    inputs: Tensor,
    labels: Vec<usize>,
    class_count: usize,
}

impl Dataset {
    /// `inputs` is `[N, ...]` with one label per leading row.
    pub fn new(inputs: Tensor, labels: Vec<usize>, class_count: usize) -> Result<Self> {
        if labels.is_empty() {
            return Err(Error::Config("a dataset needs at least one sample".into()));
        }
        if inputs.ndim() < 2 || inputs.shape()[0] != labels.len() {
            return Err(Error::Config(format!(
                "{} labels for inputs of shape {:?}",
                labels.len(),
                inputs.shape()
            )));
        }
        if let Some(&bad) = labels.iter().find(|&&l| l >= class_count) {
            return Err(Error::Config(format!("label {bad} out of range for {class_count} classes")));
        }
        Ok(Self { inputs, labels, class_count })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn inputs(&self) -> &Tensor {
        &self.inputs
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    pub fn class_count(&self) -> usize {
        self.class_count
    }

    /// Per-sample input shape.
    pub fn sample_shape(&self) -> &[usize] {
        &self.inputs.shape()[1..]
    }

    /// The first `k` samples (all of them if `k >= len`).
    pub fn subset(&self, k: usize) -> Result<Self> {
        let k = k.min(self.len());
        let idx: Vec<usize> = (0..k).collect();
        let (inputs, labels) = self.gather(&idx);
        Self::new(inputs, labels, self.class_count)
    }

    /// Inputs and labels of the given samples, in order.
    pub fn gather(&self, indices: &[usize]) -> (Tensor, Vec<usize>) {
        (self.inputs.select_rows(indices), indices.iter().map(|&i| self.labels[i]).collect())
    }
}

/// Reads an IDX image file (`0x00000803`) into `[N, 1, H, W]`, scaling
/// bytes to `[0, 1]` by dividing by 255.
pub fn load_idx_images(path: impl AsRef<Path>) -> Result<Tensor> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    let dims = parse_header(&bytes, IMAGES_MAGIC, 3, path)?;
    let [n, h, w] = [dims[0], dims[1], dims[2]];
    let payload = payload(&bytes, 16, n * h * w, path)?;
    Tensor::new(vec![n, 1, h, w], payload.iter().map(|&b| f64::from(b) / 255.0).collect())
}

/// Reads an IDX label file (`0x00000801`).
pub fn load_idx_labels(path: impl AsRef<Path>) -> Result<Vec<usize>> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    let dims = parse_header(&bytes, LABELS_MAGIC, 1, path)?;
    Ok(payload(&bytes, 8, dims[0], path)?.iter().map(|&b| usize::from(b)).collect())
}

fn parse_header(bytes: &[u8], magic: [u8; 4], ndims: usize, path: &Path) -> Result<Vec<usize>> {
    let header_len = 4 + 4 * ndims;
    let short = || {
        Error::format(
            path,
            format!("file is {} bytes, shorter than the {header_len}-byte IDX header", bytes.len()),
        )
    };
    if bytes.len() < 4 {
        return Err(short());
    }
    if bytes[..4] != magic {
        return Err(Error::format(
            path,
            format!("bad magic {:02x?}, expected {:02x?}", &bytes[..4], magic),
        ));
    }
    if bytes.len() < header_len {
        return Err(short());
    }
    Ok(bytes[4..header_len]
        .chunks_exact(4)
        .map(|c| u32::from_be_bytes([c[0], c[1], c[2], c[3]]) as usize)
        .collect())
}

fn payload<'a>(bytes: &'a [u8], offset: usize, expected: usize, path: &Path) -> Result<&'a [u8]> {
    let actual = bytes.len() - offset;
    if actual != expected {
        return Err(Error::format(
            path,
            format!("payload length mismatch: header implies {expected} bytes, found {actual}"),
        ));
    }
    Ok(&bytes[offset..])
}

/// Writes `[N, 1, H, W]` (or `[N, H, W]`) values in `[0, 1]` as IDX bytes,
/// rounding `v * 255`.
pub fn write_idx_images(path: impl AsRef<Path>, images: &Tensor) -> Result<()> {
    let path = path.as_ref();
    let (n, h, w) = match *images.shape() {
        [n, 1, h, w] | [n, h, w] => (n, h, w),
        ref s => return Err(Error::Config(format!("cannot write images of shape {s:?} as IDX"))),
    };
    if images.data().iter().any(|v| !(0.0..=1.0).contains(v)) {
        return Err(Error::Config("IDX image values must lie in [0, 1]".into()));
    }
    let mut bytes = Vec::with_capacity(16 + images.len());
    bytes.extend_from_slice(&IMAGES_MAGIC);
    for d in [n, h, w] {
        bytes.extend_from_slice(&(d as u32).to_be_bytes());
    }
    bytes.extend(images.data().iter().map(|v| (v * 255.0).round() as u8));
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

pub fn write_idx_labels(path: impl AsRef<Path>, labels: &[usize]) -> Result<()> {
    let path = path.as_ref();
    let mut bytes = Vec::with_capacity(8 + labels.len());
    bytes.extend_from_slice(&LABELS_MAGIC);
    bytes.extend_from_slice(&(labels.len() as u32).to_be_bytes());
    for &l in labels {
        bytes.push(u8::try_from(l).map_err(|_| Error::Config(format!("label {l} does not fit in a byte")))?);
    }
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Split {
    Train,
    Test,
}

/// Loads `train-*` or `t10k-*` IDX files from an MNIST directory.
pub fn load_mnist(dir: impl AsRef<Path>, split: Split) -> Result<Dataset> {
    let dir = dir.as_ref();
    let prefix = match split {
        Split::Train => "train",
        Split::Test => "t10k",
    };
    let images = load_idx_images(dir.join(format!("{prefix}-images-idx3-ubyte")))?;
    let labels = load_idx_labels(dir.join(format!("{prefix}-labels-idx1-ubyte")))?;
    Dataset::new(images, labels, 10)
}

/// Unit-variance Gaussian blobs, one per class, centered at
/// `separation * (+-e_k)` with `k = class mod dim` and the sign flipping
/// for every wrap-around. Samples are grouped by class.
pub fn synthetic_blobs(
    n_per_class: usize,
    class_count: usize,
    dim: usize,
    separation: f64,
    seed: u64,
) -> Result<Dataset> {
    if n_per_class == 0 || class_count == 0 || dim == 0 {
        return Err(Error::Config("blob counts and dimension must be positive".into()));
    }
    if class_count > 2 * dim {
        return Err(Error::Config(format!("{class_count} classes need dim >= {}", class_count.div_ceil(2))));
    }
    if !(separation.is_finite() && separation >= 0.0) {
        return Err(Error::Config(format!("separation must be finite and >= 0, got {separation}")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = n_per_class * class_count;
    let mut values = Vec::with_capacity(n * dim);
    let mut labels = Vec::with_capacity(n);
    for class in 0..class_count {
        let axis = class % dim;
        let sign = if (class / dim).is_multiple_of(2) { 1.0 } else { -1.0 };
        for _ in 0..n_per_class {
            for k in 0..dim {
                let noise: f64 = StandardNormal.sample(&mut rng);
                let center = if k == axis { sign * separation } else { 0.0 };
                values.push(center + noise);
            }
            labels.push(class);
        }
    }
    Dataset::new(Tensor::new(vec![n, dim], values)?, labels, class_count)
}

/// Seeded permutation of `0..len` chunked into `ceil(len / batch_size)`
/// batches. The order depends only on `(seed, epoch)`; the last batch may be
/// short.
pub fn shuffled_batches(len: usize, batch_size: usize, seed: u64, epoch: u64) -> Vec<Vec<usize>> {
    assert!(batch_size >= 1, "batch size must be positive");
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(epoch);
    let mut order: Vec<usize> = (0..len).collect();
    order.shuffle(&mut rng);
    order.chunks(batch_size).map(<[usize]>::to_vec).collect()
}

pub fn batches(data: &Dataset, batch_size: usize, seed: u64, epoch: u64) -> Vec<Vec<usize>> {
    shuffled_batches(data.len(), batch_size, seed, epoch)
}
