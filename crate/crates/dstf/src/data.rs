//! Dataset ingestion: MNIST IDX files and a seeded synthetic blob
//! generator for fast tests.
//!
//! The parsers work on byte slices so fuzzers can drive them directly;
//! file loading is a thin wrapper.

use crate::error::{Error, Result};
use crate::rng::substream;
use crate::tensor::Tensor;
use std::path::Path;

pub const IDX_IMAGES_MAGIC: u32 = 0x0000_0803;
pub const IDX_LABELS_MAGIC: u32 = 0x0000_0801;

/// Conventional MNIST normalization constants.
pub const MNIST_MEAN: f32 = 0.1307;
pub const MNIST_STD: f32 = 0.3081;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Split {
    Train,
    Test,
}

impl Split {
    pub fn name(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Test => "test",
        }
    }
}

#[derive(Debug, Clone)]
pub struct Dataset {
    /// [N, C, H, W], scaled to [0,1] and optionally normalized.
    pub images: Tensor,
    pub labels: Vec<u8>,
    pub split: Split,
    pub num_classes: usize,
    /// (mean, std) that was applied after the 1/255 scaling, if any.
    pub normalization: Option<(f32, f32)>,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    /// Per-sample shape [C, H, W].
    pub fn sample_shape(&self) -> &[usize] {
        &self.images.shape()[1..]
    }

    fn validate(&self) -> Result<()> {
        if self.images.shape()[0] != self.labels.len() {
            return Err(Error::IdxCountMismatch {
                images: self.images.shape()[0],
                labels: self.labels.len(),
            });
        }
        if let Some(&bad) = self.labels.iter().find(|&&y| y as usize >= self.num_classes) {
            return Err(Error::Data(format!(
                "label {bad} out of range for {} classes",
                self.num_classes
            )));
        }
        Ok(())
    }
}

fn read_be_u32(bytes: &[u8], off: usize) -> Result<u32> {
    let end = off + 4;
    if bytes.len() < end {
        return Err(Error::IdxTruncated { needed: end, available: bytes.len() });
    }
    Ok(u32::from_be_bytes([bytes[off], bytes[off + 1], bytes[off + 2], bytes[off + 3]]))
}

/// Raw contents of an IDX image file: pixel bytes plus (count, rows, cols).
pub fn parse_idx_images(bytes: &[u8]) -> Result<(Vec<u8>, usize, usize, usize)> {
    let magic = read_be_u32(bytes, 0)?;
    if magic != IDX_IMAGES_MAGIC {
        return Err(Error::IdxBadMagic { expected: IDX_IMAGES_MAGIC, found: magic });
    }
    let n = read_be_u32(bytes, 4)? as usize;
    let h = read_be_u32(bytes, 8)? as usize;
    let w = read_be_u32(bytes, 12)? as usize;
    let needed = 16usize
        .checked_add(n.checked_mul(h).and_then(|v| v.checked_mul(w)).ok_or_else(|| {
            Error::Data(format!("image extents overflow: {n}x{h}x{w}"))
        })?)
        .ok_or_else(|| Error::Data("image extents overflow".into()))?;
    if bytes.len() < needed {
        return Err(Error::IdxTruncated { needed, available: bytes.len() });
    }
    Ok((bytes[16..needed].to_vec(), n, h, w))
}

/// Raw contents of an IDX label file.
pub fn parse_idx_labels(bytes: &[u8]) -> Result<Vec<u8>> {
    let magic = read_be_u32(bytes, 0)?;
    if magic != IDX_LABELS_MAGIC {
        return Err(Error::IdxBadMagic { expected: IDX_LABELS_MAGIC, found: magic });
    }
    let n = read_be_u32(bytes, 4)? as usize;
    let needed = 8usize
        .checked_add(n)
        .ok_or_else(|| Error::Data("label count overflow".into()))?;
    if bytes.len() < needed {
        return Err(Error::IdxTruncated { needed, available: bytes.len() });
    }
    Ok(bytes[8..needed].to_vec())
}

/// Loads an MNIST-style IDX image/label pair. Pixels are scaled by 1/255;
/// when `normalize` is set the conventional (mean, std) transform is
/// applied on top and recorded in the dataset.
pub fn load_mnist_idx(
    images_path: &Path,
    labels_path: &Path,
    split: Split,
    normalize: bool,
) -> Result<Dataset> {
    let img_bytes = std::fs::read(images_path)
        .map_err(|e| Error::Data(format!("{}: {e}", images_path.display())))?;
    let lbl_bytes = std::fs::read(labels_path)
        .map_err(|e| Error::Data(format!("{}: {e}", labels_path.display())))?;
    let (pixels, n, h, w) = parse_idx_images(&img_bytes)?;
    let labels = parse_idx_labels(&lbl_bytes)?;
    if n != labels.len() {
        return Err(Error::IdxCountMismatch { images: n, labels: labels.len() });
    }
    if n == 0 || h == 0 || w == 0 {
        return Err(Error::Data(format!("empty IDX data: {n}x{h}x{w}")));
    }
    let normalization = normalize.then_some((MNIST_MEAN, MNIST_STD));
    let data: Vec<f32> = match normalization {
        Some((m, s)) => pixels.iter().map(|&p| (p as f32 / 255.0 - m) / s).collect(),
        None => pixels.iter().map(|&p| p as f32 / 255.0).collect(),
    };
    let ds = Dataset {
        images: Tensor::new(vec![n, 1, h, w], data)?,
        labels,
        split,
        num_classes: 10,
        normalization,
    };
    ds.validate()?;
    Ok(ds)
}

/// Standard MNIST file names inside a data directory.
pub fn mnist_pair_paths(dir: &Path, split: Split) -> (std::path::PathBuf, std::path::PathBuf) {
    match split {
        Split::Train => (
            dir.join("train-images-idx3-ubyte"),
            dir.join("train-labels-idx1-ubyte"),
        ),
        Split::Test => (
            dir.join("t10k-images-idx3-ubyte"),
            dir.join("t10k-labels-idx1-ubyte"),
        ),
    }
}

pub fn load_mnist_dir(dir: &Path, split: Split, normalize: bool) -> Result<Dataset> {
    let (img, lbl) = mnist_pair_paths(dir, split);
    load_mnist_idx(&img, &lbl, split, normalize)
}

/// Deterministic 1x8x8 Gaussian-blob classification set: class c is a
/// spatial bump at a class-specific grid position with per-sample
/// amplitude jitter and uniform pixel noise; linearly separable at this
/// scale. Labels are assigned round-robin so every class appears.
pub fn synthetic_dataset(seed: u64, n: usize, classes: usize) -> Result<Dataset> {
    use rand::Rng;
    if classes < 2 || n < classes {
        return Err(Error::Precondition(format!(
            "need n >= classes >= 2, got n={n}, classes={classes}"
        )));
    }
    if classes > 16 {
        return Err(Error::Precondition(format!(
            "synthetic generator supports at most 16 classes, got {classes}"
        )));
    }
    const SIDE: usize = 8;
    let mut rng = substream(seed, "synthetic");
    let mut data = vec![0.0f32; n * SIDE * SIDE];
    let mut labels = Vec::with_capacity(n);
    for i in 0..n {
        let c = i % classes;
        labels.push(c as u8);
        // blob centers on a 4x4 grid of cell midpoints
        let cy = 1.0 + 2.0 * (c / 4) as f32;
        let cx = 1.0 + 2.0 * (c % 4) as f32;
        let amp = 0.7 + 0.3 * rng.random::<f32>();
        let img = &mut data[i * SIDE * SIDE..][..SIDE * SIDE];
        for y in 0..SIDE {
            for x in 0..SIDE {
                let d2 = (y as f32 - cy).powi(2) + (x as f32 - cx).powi(2);
                let blob = amp * (-d2 / 2.0).exp();
                let noise = 0.1 * (rng.random::<f32>() - 0.5);
                img[y * SIDE + x] = (blob + noise).clamp(0.0, 1.0);
            }
        }
    }
    let ds = Dataset {
        images: Tensor::new(vec![n, 1, SIDE, SIDE], data)?,
        labels,
        split: Split::Train,
        num_classes: classes,
        normalization: None,
    };
    ds.validate()?;
    Ok(ds)
}

/// Mini-batch sequence over a dataset. A seeded RNG shuffles the sample
/// order; without one the original order is kept. The final partial batch
/// is included.
pub struct BatchIter<'a> {
    ds: &'a Dataset,
    order: Vec<usize>,
    batch_size: usize,
    cursor: usize,
}

pub fn batch_iterator(
    ds: &Dataset,
    batch_size: usize,
    shuffle: Option<rand_chacha::ChaCha8Rng>,
) -> BatchIter<'_> {
    assert!(batch_size >= 1, "batch_size must be at least 1");
    let mut order: Vec<usize> = (0..ds.len()).collect();
    if let Some(mut rng) = shuffle {
        use rand::seq::SliceRandom;
        order.shuffle(&mut rng);
    }
    BatchIter { ds, order, batch_size, cursor: 0 }
}

impl Iterator for BatchIter<'_> {
    type Item = (Tensor, Vec<u8>);

    fn next(&mut self) -> Option<Self::Item> {
        if self.cursor >= self.order.len() {
            return None;
        }
        let end = (self.cursor + self.batch_size).min(self.order.len());
        let idx = &self.order[self.cursor..end];
        self.cursor = end;

        let sample: usize = self.ds.sample_shape().iter().product();
        let mut data = Vec::with_capacity(idx.len() * sample);
        let mut labels = Vec::with_capacity(idx.len());
        let src = self.ds.images.data();
        for &i in idx {
            data.extend_from_slice(&src[i * sample..][..sample]);
            labels.push(self.ds.labels[i]);
        }
        let mut shape = vec![idx.len()];
        shape.extend_from_slice(self.ds.sample_shape());
        Some((Tensor::new(shape, data).expect("batch shape"), labels))
    }
}
