//! Dataset ingestion: IDX-format MNIST files, a synthetic bimodal toy
//! generator, and deterministic train/test splitting.
//!
//! Images are stored as continuous values in `[0, 1]` and binarized at
//! training time, so each epoch can resample the binarization.

use std::fmt;
use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::Rng;

use crate::dist::{LikelihoodFamily, ModalitySpec};
use crate::rng::{RngHub, StreamKind};
use crate::tensor::{Scalar, Tensor};

const IMAGE_MAGIC: u32 = 2051;
const LABEL_MAGIC: u32 = 2049;
const MNIST_CLASSES: usize = 10;

#[derive(Debug)]
pub enum DataError {
    Io { path: PathBuf, source: std::io::Error },
    WrongMagic { path: PathBuf, expected: u32, got: u32 },
    Truncated { path: PathBuf, expected: usize, got: usize },
    CountMismatch { images: usize, labels: usize },
    Invalid { detail: String },
}

impl fmt::Display for DataError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            DataError::Io { path, source } => write!(f, "{}: {source}", path.display()),
            DataError::WrongMagic { path, expected, got } => {
                write!(f, "{}: expected magic {expected}, got {got}", path.display())
            }
            DataError::Truncated { path, expected, got } => write!(
                f,
                "{}: truncated payload, expected {expected} bytes, got {got}",
                path.display()
            ),
            DataError::CountMismatch { images, labels } => {
                write!(f, "image count {images} does not match label count {labels}")
            }
            DataError::Invalid { detail } => write!(f, "{detail}"),
        }
    }
}

impl std::error::Error for DataError {}

/// Paired image / label records with their modality declarations.
#[derive(Debug, Clone)]
pub struct BimodalDataset {
    /// `[n, x_dim]` values in `[0, 1]`, row-major, one record per datum.
    pub x: Tensor<f64>,
    /// `[n, w_dim]` one-hot (or binary-vector) labels.
    pub w: Tensor<f64>,
    pub x_spec: ModalitySpec,
    pub w_spec: ModalitySpec,
    /// Provenance tag: "all", "train" or "test".
    pub split: String,
}

impl BimodalDataset {
    pub fn new(
        x: Tensor<f64>,
        w: Tensor<f64>,
        x_spec: ModalitySpec,
        w_spec: ModalitySpec,
        split: impl Into<String>,
    ) -> Result<Self, DataError> {
        if x.shape()[0] != w.shape()[0] {
            return Err(DataError::CountMismatch {
                images: x.shape()[0],
                labels: w.shape()[0],
            });
        }
        if x.shape()[1] != x_spec.dim || w.shape()[1] != w_spec.dim {
            return Err(DataError::Invalid {
                detail: format!(
                    "record widths ({}, {}) do not match modality dims ({}, {})",
                    x.shape()[1],
                    w.shape()[1],
                    x_spec.dim,
                    w_spec.dim
                ),
            });
        }
        if w_spec.family == LikelihoodFamily::CategoricalLogits {
            for i in 0..w.shape()[0] {
                let row = w.row(i);
                let ones = row.iter().filter(|&&v| v == 1.0).count();
                let zeros = row.iter().filter(|&&v| v == 0.0).count();
                if ones != 1 || ones + zeros != row.len() {
                    return Err(DataError::Invalid {
                        detail: format!("label row {i} is not one-hot"),
                    });
                }
            }
        }
        Ok(BimodalDataset {
            x,
            w,
            x_spec,
            w_spec,
            split: split.into(),
        })
    }

    pub fn len(&self) -> usize {
        self.x.shape()[0]
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Typed batch of the given records.
    pub fn batch<T: Scalar>(&self, indices: &[usize]) -> (Tensor<T>, Tensor<T>) {
        (
            self.x.gather_rows(indices).cast(),
            self.w.gather_rows(indices).cast(),
        )
    }

    /// Class index of record `i` (categorical labels).
    pub fn label_of(&self, i: usize) -> usize {
        self.w
            .row(i)
            .iter()
            .position(|&v| v == 1.0)
            .expect("validated one-hot")
    }
}

fn read_u32_be(bytes: &[u8], offset: usize) -> u32 {
    u32::from_be_bytes([bytes[offset], bytes[offset + 1], bytes[offset + 2], bytes[offset + 3]])
}

fn read_file(path: &Path) -> Result<Vec<u8>, DataError> {
    fs::read(path).map_err(|source| DataError::Io {
        path: path.to_path_buf(),
        source,
    })
}

/// Parse the standard MNIST IDX pair: big-endian magics 2051 (images) and
/// 2049 (labels), unsigned-byte payloads. Pixels are scaled to `[0, 1]` by
/// `/255`; labels are one-hot encoded over 10 classes.
pub fn load_idx(images_path: &Path, labels_path: &Path) -> Result<BimodalDataset, DataError> {
    let img_bytes = read_file(images_path)?;
    let lbl_bytes = read_file(labels_path)?;

    if img_bytes.len() < 16 {
        return Err(DataError::Truncated {
            path: images_path.to_path_buf(),
            expected: 16,
            got: img_bytes.len(),
        });
    }
    let magic = read_u32_be(&img_bytes, 0);
    if magic != IMAGE_MAGIC {
        return Err(DataError::WrongMagic {
            path: images_path.to_path_buf(),
            expected: IMAGE_MAGIC,
            got: magic,
        });
    }
    let n = read_u32_be(&img_bytes, 4) as usize;
    let rows = read_u32_be(&img_bytes, 8) as usize;
    let cols = read_u32_be(&img_bytes, 12) as usize;
    let expected = 16 + n * rows * cols;
    if img_bytes.len() != expected {
        return Err(DataError::Truncated {
            path: images_path.to_path_buf(),
            expected,
            got: img_bytes.len(),
        });
    }

    if lbl_bytes.len() < 8 {
        return Err(DataError::Truncated {
            path: labels_path.to_path_buf(),
            expected: 8,
            got: lbl_bytes.len(),
        });
    }
    let magic = read_u32_be(&lbl_bytes, 0);
    if magic != LABEL_MAGIC {
        return Err(DataError::WrongMagic {
            path: labels_path.to_path_buf(),
            expected: LABEL_MAGIC,
            got: magic,
        });
    }
    let n_labels = read_u32_be(&lbl_bytes, 4) as usize;
    let expected = 8 + n_labels;
    if lbl_bytes.len() != expected {
        return Err(DataError::Truncated {
            path: labels_path.to_path_buf(),
            expected,
            got: lbl_bytes.len(),
        });
    }
    if n != n_labels {
        return Err(DataError::CountMismatch {
            images: n,
            labels: n_labels,
        });
    }

    let dim = rows * cols;
    let mut x = Vec::with_capacity(n * dim);
    for &b in &img_bytes[16..] {
        x.push(b as f64 / 255.0);
    }
    let mut w = vec![0.0; n * MNIST_CLASSES];
    for (i, &b) in lbl_bytes[8..].iter().enumerate() {
        let label = b as usize;
        if label >= MNIST_CLASSES {
            return Err(DataError::Invalid {
                detail: format!("label {label} out of range at record {i}"),
            });
        }
        w[i * MNIST_CLASSES + label] = 1.0;
    }

    BimodalDataset::new(
        Tensor::new(&[n, dim], x).expect("sized buffer"),
        Tensor::new(&[n, MNIST_CLASSES], w).expect("sized buffer"),
        ModalitySpec::bernoulli_image("x", rows, cols),
        ModalitySpec::categorical_label("w", MNIST_CLASSES),
        "all",
    )
}

/// Inverse of [`load_idx`]: write the dataset back out as an IDX pair.
/// Loading a file pair and writing it again reproduces the bytes exactly.
pub fn write_idx(
    dataset: &BimodalDataset,
    images_path: &Path,
    labels_path: &Path,
) -> Result<(), DataError> {
    let n = dataset.len();
    let (rows, cols) = match dataset.x_spec.shape.as_slice() {
        [r, c] => (*r, *c),
        other => {
            return Err(DataError::Invalid {
                detail: format!("image modality shape {other:?} is not two-dimensional"),
            })
        }
    };

    let mut img = Vec::with_capacity(16 + n * rows * cols);
    img.extend_from_slice(&IMAGE_MAGIC.to_be_bytes());
    img.extend_from_slice(&(n as u32).to_be_bytes());
    img.extend_from_slice(&(rows as u32).to_be_bytes());
    img.extend_from_slice(&(cols as u32).to_be_bytes());
    for &v in dataset.x.data() {
        img.push((v * 255.0).round() as u8);
    }

    let mut lbl = Vec::with_capacity(8 + n);
    lbl.extend_from_slice(&LABEL_MAGIC.to_be_bytes());
    lbl.extend_from_slice(&(n as u32).to_be_bytes());
    for i in 0..n {
        lbl.push(dataset.label_of(i) as u8);
    }

    let write = |path: &Path, bytes: &[u8]| -> Result<(), DataError> {
        let mut f = fs::File::create(path).map_err(|source| DataError::Io {
            path: path.to_path_buf(),
            source,
        })?;
        f.write_all(bytes).map_err(|source| DataError::Io {
            path: path.to_path_buf(),
            source,
        })
    };
    write(images_path, &img)?;
    write(labels_path, &lbl)
}

/// Class prototypes of the toy generator: pixel `i` of class `c` is lit when
/// `i` falls in the `c`-th of `classes` contiguous pixel blocks.
pub fn toy_prototypes(classes: usize, dim: usize) -> Vec<Vec<f64>> {
    (0..classes)
        .map(|c| {
            (0..dim)
                .map(|i| if i * classes / dim == c { 1.0 } else { 0.0 })
                .collect()
        })
        .collect()
}

/// Synthetic bimodal dataset: each record is a class prototype with every
/// pixel independently flipped with probability `noise`, paired with the
/// one-hot class label. Bit-reproducible per seed.
pub fn make_toy(
    classes: usize,
    dim: usize,
    n_per_class: usize,
    noise: f64,
    seed: u64,
) -> Result<BimodalDataset, DataError> {
    if classes < 2 || dim < classes || n_per_class == 0 {
        return Err(DataError::Invalid {
            detail: format!(
                "toy generator needs classes >= 2, dim >= classes, n_per_class >= 1; \
                 got classes={classes}, dim={dim}, n_per_class={n_per_class}"
            ),
        });
    }
    if !(0.0..=1.0).contains(&noise) {
        return Err(DataError::Invalid {
            detail: format!("noise probability {noise} outside [0, 1]"),
        });
    }
    let protos = toy_prototypes(classes, dim);
    let n = classes * n_per_class;
    let mut rng = RngHub::new(seed).stream(StreamKind::Data, 0);
    let mut x = Vec::with_capacity(n * dim);
    let mut w = vec![0.0; n * classes];
    for c in 0..classes {
        for r in 0..n_per_class {
            let record = c * n_per_class + r;
            w[record * classes + c] = 1.0;
            for &p in &protos[c] {
                let flip = rng.gen_range(0.0..1.0) < noise;
                x.push(if flip { 1.0 - p } else { p });
            }
        }
    }
    BimodalDataset::new(
        Tensor::new(&[n, dim], x).expect("sized buffer"),
        Tensor::new(&[n, classes], w).expect("sized buffer"),
        // Display toy images on the squarest grid that fits.
        ModalitySpec::bernoulli_image("x", square_rows(dim), dim / square_rows(dim)),
        ModalitySpec::categorical_label("w", classes),
        "all",
    )
}

fn square_rows(dim: usize) -> usize {
    let mut r = (dim as f64).sqrt() as usize;
    while r > 1 && !dim.is_multiple_of(r) {
        r -= 1;
    }
    r.max(1)
}

/// Disjoint, exhaustive, seed-deterministic split into
/// (`floor(n * fraction)` train records, remainder test records).
pub fn split(
    dataset: &BimodalDataset,
    train_fraction: f64,
    seed: u64,
) -> Result<(BimodalDataset, BimodalDataset), DataError> {
    if !(train_fraction > 0.0 && train_fraction < 1.0) {
        return Err(DataError::Invalid {
            detail: format!("train fraction {train_fraction} outside (0, 1)"),
        });
    }
    let n = dataset.len();
    let mut order: Vec<usize> = (0..n).collect();
    let mut rng = RngHub::new(seed).stream(StreamKind::Shuffle, 0);
    order.shuffle(&mut rng);
    let n_train = (n as f64 * train_fraction).floor() as usize;
    let (train_idx, test_idx) = order.split_at(n_train);

    let part = |idx: &[usize], tag: &str| {
        BimodalDataset::new(
            dataset.x.gather_rows(idx),
            dataset.w.gather_rows(idx),
            dataset.x_spec.clone(),
            dataset.w_spec.clone(),
            tag,
        )
    };
    Ok((part(train_idx, "train")?, part(test_idx, "test")?))
}

/// The pinned desk-scale fixture: 10 classes, 64 pixels (8x8), 600 records
/// per class, 5% pixel noise, split 5/6 into 5000 train / 1000 test records.
pub fn toy_fixture(seed: u64) -> (BimodalDataset, BimodalDataset) {
    let all = make_toy(10, 64, 600, 0.05, seed).expect("pinned fixture parameters are valid");
    split(&all, 5.0 / 6.0, seed).expect("pinned fraction is valid")
}
