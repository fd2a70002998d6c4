//! MNIST in IDX format: parsing, the fixed train/validation/test split, and
//! seeded mini-batches.

use std::io::Read;
use std::path::{Path, PathBuf};

use flate2::read::GzDecoder;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::RngStream;
use crate::scalar::Scalar;
use crate::tensor::Tensor;

pub const IDX_TYPE_U8: u8 = 0x08;

/// Examples in the canonical MNIST training file.
pub const MNIST_TRAIN_TOTAL: usize = 60_000;
/// Tail of the training file held out for validation.
pub const MNIST_VALIDATION: usize = 10_000;

/// Raw IDX contents: declared dimensions and the u8 payload.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct IdxArray {
    pub dims: Vec<usize>,
    pub data: Vec<u8>,
}

pub fn parse_idx_raw(bytes: &[u8]) -> Result<IdxArray> {
    if bytes.len() < 4 {
        return Err(Error::IdxTruncated {
            expected: 4,
            actual: bytes.len(),
        });
    }
    if bytes[0] != 0 || bytes[1] != 0 {
        return Err(Error::IdxBadMagic([bytes[0], bytes[1]]));
    }
    if bytes[2] != IDX_TYPE_U8 {
        return Err(Error::IdxUnsupportedType(bytes[2]));
    }
    let ndim = bytes[3] as usize;
    let header = 4 + 4 * ndim;
    if bytes.len() < header {
        return Err(Error::IdxTruncated {
            expected: header,
            actual: bytes.len(),
        });
    }
    let dims: Vec<usize> = bytes[4..header]
        .chunks_exact(4)
        .map(|c| u32::from_be_bytes([c[0], c[1], c[2], c[3]]) as usize)
        .collect();
    let count: usize = dims.iter().product();
    let expected = header + count;
    if bytes.len() < expected {
        return Err(Error::IdxTruncated {
            expected,
            actual: bytes.len(),
        });
    }
    Ok(IdxArray {
        dims,
        data: bytes[header..expected].to_vec(),
    })
}

/// Parses an IDX u8 array into a tensor scaled to `[0, 1]` (value / 255).
pub fn parse_idx<T: Scalar>(bytes: &[u8]) -> Result<Tensor<T>> {
    let raw = parse_idx_raw(bytes)?;
    let scale = T::one() / T::lit(255.0);
    let data = raw.data.iter().map(|&b| T::lit(b as f64) * scale).collect();
    Tensor::new(&raw.dims, data)
}

pub fn write_idx(dims: &[usize], data: &[u8]) -> Result<Vec<u8>> {
    let count: usize = dims.iter().product();
    if count != data.len() || dims.len() > u8::MAX as usize {
        return Err(Error::InvalidShape {
            shape: dims.to_vec(),
            reason: format!("payload of {} bytes does not match", data.len()),
        });
    }
    let mut out = vec![0, 0, IDX_TYPE_U8, dims.len() as u8];
    for &d in dims {
        let d = u32::try_from(d).map_err(|_| Error::InvalidShape {
            shape: dims.to_vec(),
            reason: "dimension exceeds u32".into(),
        })?;
        out.extend_from_slice(&d.to_be_bytes());
    }
    out.extend_from_slice(data);
    Ok(out)
}

/// Reads a file, transparently gunzipping it when it starts with the gzip
/// magic number.
pub fn read_maybe_gz(path: &Path) -> Result<Vec<u8>> {
    let bytes = std::fs::read(path)?;
    if bytes.starts_with(&[0x1f, 0x8b]) {
        let mut out = Vec::new();
        GzDecoder::new(&bytes[..]).read_to_end(&mut out)?;
        Ok(out)
    } else {
        Ok(bytes)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset<T> {
    /// `[n, 1, rows, cols]`, values in `[0, 1]`.
    pub images: Tensor<T>,
    pub labels: Vec<usize>,
}

impl<T: Scalar> Dataset<T> {
    pub fn new(images: Tensor<T>, labels: Vec<usize>) -> Result<Self> {
        if images.rows() != labels.len() {
            return Err(Error::ShapeMismatch {
                op: "dataset",
                left: images.shape().to_vec(),
                right: vec![labels.len()],
            });
        }
        Ok(Self { images, labels })
    }

    /// Builds a dataset from parsed image (`[n, rows, cols]`) and label
    /// (`[n]`) IDX arrays.
    pub fn from_idx(images: &[u8], labels: &[u8]) -> Result<Self> {
        let img: Tensor<T> = parse_idx(images)?;
        let lab = parse_idx_raw(labels)?;
        if lab.dims.len() != 1 {
            return Err(Error::InvalidShape {
                shape: lab.dims,
                reason: "label file must be 1-d".into(),
            });
        }
        let shape = img.shape().to_vec();
        let mut nchw = vec![shape[0], 1];
        nchw.extend_from_slice(&shape[1..]);
        Self::new(img.reshape(&nchw)?, lab.data.iter().map(|&l| l as usize).collect())
    }

    /// Serializes back to (images, labels) IDX bytes.
    pub fn to_idx(&self) -> Result<(Vec<u8>, Vec<u8>)> {
        let shape = self.images.shape();
        let mut dims = vec![shape[0]];
        dims.extend_from_slice(&shape[2..]);
        let pixels: Vec<u8> = self
            .images
            .data()
            .iter()
            .map(|v| (v.to_f64().unwrap_or(0.0) * 255.0).round().clamp(0.0, 255.0) as u8)
            .collect();
        let labels: Vec<u8> = self.labels.iter().map(|&l| l as u8).collect();
        Ok((write_idx(&dims, &pixels)?, write_idx(&[labels.len()], &labels)?))
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn slice(&self, start: usize, end: usize) -> Result<Self> {
        Ok(Self {
            images: self.images.slice_rows(start, end)?,
            labels: self.labels[start..end].to_vec(),
        })
    }

    pub fn label_histogram(&self, classes: usize) -> Vec<usize> {
        let mut h = vec![0; classes];
        for &l in &self.labels {
            if l < classes {
                h[l] += 1;
            }
        }
        h
    }

    /// Seeded shuffled mini-batches covering every example once.
    pub fn batches(&self, batch_size: usize, epoch_seed: u64) -> Result<Batches<'_, T>> {
        batches(self, batch_size, epoch_seed)
    }
}

/// The three datasets every run sees.
#[derive(Debug, Clone)]
pub struct Splits<T> {
    pub train: Dataset<T>,
    pub val: Dataset<T>,
    pub test: Dataset<T>,
}

/// First `len - n_val` training examples train, the last `n_val` validate; no
/// shuffling. The test set passes through.
pub fn split_with<T: Scalar>(
    train_file: Dataset<T>,
    test_file: Dataset<T>,
    n_val: usize,
) -> Result<Splits<T>> {
    let n = train_file.len();
    if n_val == 0 || n_val >= n {
        return Err(Error::SplitCount {
            expected: n_val + 1,
            actual: n,
        });
    }
    let train = train_file.slice(0, n - n_val)?;
    let val = train_file.slice(n - n_val, n)?;
    Ok(Splits {
        train,
        val,
        test: test_file,
    })
}

/// The 50,000 / 10,000 / 10,000 MNIST split.
pub fn split<T: Scalar>(train_file: Dataset<T>, test_file: Dataset<T>) -> Result<Splits<T>> {
    if train_file.len() != MNIST_TRAIN_TOTAL {
        return Err(Error::SplitCount {
            expected: MNIST_TRAIN_TOTAL,
            actual: train_file.len(),
        });
    }
    split_with(train_file, test_file, MNIST_VALIDATION)
}

pub struct Batches<'a, T> {
    data: &'a Dataset<T>,
    order: Vec<usize>,
    batch_size: usize,
    pos: usize,
}

impl<T> Batches<'_, T> {
    pub fn num_batches(&self) -> usize {
        self.order.len().div_ceil(self.batch_size)
    }

    pub fn order(&self) -> &[usize] {
        &self.order
    }
}

impl<T: Scalar> Iterator for Batches<'_, T> {
    type Item = (Tensor<T>, Vec<usize>);

    fn next(&mut self) -> Option<Self::Item> {
        if self.pos >= self.order.len() {
            return None;
        }
        let end = (self.pos + self.batch_size).min(self.order.len());
        let idx = &self.order[self.pos..end];
        self.pos = end;
        let images = self
            .data
            .images
            .select_rows(idx)
            .expect("permutation indices are in range");
        let labels = idx.iter().map(|&i| self.data.labels[i]).collect();
        Some((images, labels))
    }
}

pub fn batches<T: Scalar>(
    data: &Dataset<T>,
    batch_size: usize,
    epoch_seed: u64,
) -> Result<Batches<'_, T>> {
    if data.is_empty() {
        return Err(Error::EmptyDataset);
    }
    if batch_size == 0 {
        return Err(Error::InvalidConfig("batch_size must be at least 1".into()));
    }
    Ok(Batches {
        data,
        order: RngStream::new(epoch_seed).permutation(data.len()),
        batch_size,
        pos: 0,
    })
}

/// File names of the four IDX files inside an MNIST directory.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct MnistFiles {
    pub train_images: String,
    pub train_labels: String,
    pub test_images: String,
    pub test_labels: String,
}

impl Default for MnistFiles {
    fn default() -> Self {
        Self {
            train_images: "train-images-idx3-ubyte".into(),
            train_labels: "train-labels-idx1-ubyte".into(),
            test_images: "t10k-images-idx3-ubyte".into(),
            test_labels: "t10k-labels-idx1-ubyte".into(),
        }
    }
}

/// Environment variable naming the MNIST directory.
pub const MNIST_DIR_ENV: &str = "MNIST_DIR";

fn resolve(dir: &Path, name: &str) -> Result<PathBuf> {
    let plain = dir.join(name);
    if plain.exists() {
        return Ok(plain);
    }
    let gz = dir.join(format!("{name}.gz"));
    if gz.exists() {
        return Ok(gz);
    }
    Err(Error::Io(std::io::Error::new(
        std::io::ErrorKind::NotFound,
        format!("{} (or .gz) not found", plain.display()),
    )))
}

/// Loads the four files (raw or gzipped) and applies [`split`].
pub fn load_mnist<T: Scalar>(dir: &Path, files: &MnistFiles) -> Result<Splits<T>> {
    let load = |img: &str, lab: &str| -> Result<Dataset<T>> {
        Dataset::from_idx(
            &read_maybe_gz(&resolve(dir, img)?)?,
            &read_maybe_gz(&resolve(dir, lab)?)?,
        )
    };
    let train = load(&files.train_images, &files.train_labels)?;
    let test = load(&files.test_images, &files.test_labels)?;
    split(train, test)
}
