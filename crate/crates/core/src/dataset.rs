//! MNIST ingestion: IDX parsing, normalization, the 50,000/10,000 split and
//! seeded mini-batching.

use std::fs;
use std::io::Read;
use std::path::Path;

use flate2::read::GzDecoder;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::network::{IMAGE_PIXELS, IMAGE_SIDE, NUM_CLASSES};
use crate::seed::{derive_seed, Stream};
use crate::tensor::Tensor;

pub const IMAGE_MAGIC: u32 = 0x0000_0803;
pub const LABEL_MAGIC: u32 = 0x0000_0801;
pub const TRAIN_FILE_COUNT: usize = 60_000;
pub const TRAIN_SPLIT: usize = 50_000;
pub const HOLDOUT_SPLIT: usize = 10_000;

pub const TRAIN_IMAGES_FILE: &str = "train-images-idx3-ubyte";
pub const TRAIN_LABELS_FILE: &str = "train-labels-idx1-ubyte";

/// Raw images from an IDX3 file.
#[derive(Debug, Clone, PartialEq, Eq)]
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
}

fn be_u32(bytes: &[u8], at: usize, what: &'static str) -> Result<u32> {
    bytes
        .get(at..at + 4)
        .map(|b| u32::from_be_bytes(b.try_into().expect("4 bytes")))
        .ok_or(Error::Truncated {
            what,
            needed: at + 4,
            available: bytes.len(),
        })
}

fn check_magic(bytes: &[u8], expected: u32) -> Result<()> {
    let found = be_u32(bytes, 0, "IDX header")?;
    if found != expected {
        return Err(Error::BadMagic { expected, found });
    }
    Ok(())
}

pub fn parse_idx_images(bytes: &[u8]) -> Result<IdxImages> {
    check_magic(bytes, IMAGE_MAGIC)?;
    let count = be_u32(bytes, 4, "IDX header")? as usize;
    let rows = be_u32(bytes, 8, "IDX header")? as usize;
    let cols = be_u32(bytes, 12, "IDX header")? as usize;
    let needed = count * rows * cols;
    let payload = &bytes[16..];
    if payload.len() != needed {
        if payload.len() < needed {
            return Err(Error::Truncated {
                what: "IDX image payload",
                needed,
                available: payload.len(),
            });
        }
        return Err(Error::CountMismatch(format!(
            "header declares {needed} pixel bytes, file has {}",
            payload.len()
        )));
    }
    Ok(IdxImages {
        count,
        rows,
        cols,
        pixels: payload.to_vec(),
    })
}

/// Parses an IDX1 label file; every label must be a valid MNIST class.
pub fn parse_idx_labels(bytes: &[u8]) -> Result<Vec<u8>> {
    check_magic(bytes, LABEL_MAGIC)?;
    let count = be_u32(bytes, 4, "IDX header")? as usize;
    let payload = &bytes[8..];
    if payload.len() != count {
        return Err(if payload.len() < count {
            Error::Truncated {
                what: "IDX label payload",
                needed: count,
                available: payload.len(),
            }
        } else {
            Error::CountMismatch(format!(
                "header declares {count} labels, file has {}",
                payload.len()
            ))
        });
    }
    if let Some((index, &label)) = payload
        .iter()
        .enumerate()
        .find(|(_, &l)| l as usize >= NUM_CLASSES)
    {
        return Err(Error::LabelOutOfRange {
            index,
            label: label as usize,
            classes: NUM_CLASSES,
        });
    }
    Ok(payload.to_vec())
}

pub fn normalize(raw: u8) -> f64 {
    f64::from(raw) / 255.0
}

/// Reads a file, transparently inflating gzip content.
pub fn read_maybe_gz(path: impl AsRef<Path>) -> Result<Vec<u8>> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    if bytes.starts_with(&[0x1f, 0x8b]) {
        let mut out = Vec::new();
        GzDecoder::new(&bytes[..])
            .read_to_end(&mut out)
            .map_err(|e| Error::io(path, e))?;
        Ok(out)
    } else {
        Ok(bytes)
    }
}

/// Images (`N×1×28×28`, values in `[0,1]`) with their class labels.
#[derive(Debug, Clone, PartialEq)]
pub struct LabeledDataset {
    images: Vec<f64>,
    labels: Vec<usize>,
}

impl LabeledDataset {
    pub fn new(images: Vec<f64>, labels: Vec<usize>) -> Result<Self> {
        if images.len() != labels.len() * IMAGE_PIXELS {
            return Err(Error::CountMismatch(format!(
                "{} pixel values for {} labels",
                images.len(),
                labels.len()
            )));
        }
        if let Some(v) = images.iter().find(|v| !(0.0..=1.0).contains(*v)) {
            return Err(Error::invalid(
                "dataset",
                format!("pixel {v} outside [0, 1]"),
            ));
        }
        if let Some((index, &label)) = labels.iter().enumerate().find(|(_, &l)| l >= NUM_CLASSES) {
            return Err(Error::LabelOutOfRange {
                index,
                label,
                classes: NUM_CLASSES,
            });
        }
        Ok(Self { images, labels })
    }

    pub fn from_idx(images: &IdxImages, labels: &[u8]) -> Result<Self> {
        if images.rows != IMAGE_SIDE || images.cols != IMAGE_SIDE {
            return Err(Error::shape(
                "dataset",
                format!("expected 28x28 images, got {}x{}", images.rows, images.cols),
            ));
        }
        if images.count != labels.len() {
            return Err(Error::CountMismatch(format!(
                "{} images but {} labels",
                images.count,
                labels.len()
            )));
        }
        Self::new(
            images.pixels.iter().map(|&b| normalize(b)).collect(),
            labels.iter().map(|&l| l as usize).collect(),
        )
    }

    /// Loads the 60,000-example MNIST training file pair from `dir`, either
    /// raw or gzip-compressed (a `.gz` suffix is tried when the plain name is
    /// missing).
    pub fn load_mnist_train(dir: impl AsRef<Path>) -> Result<Self> {
        let dir = dir.as_ref();
        let find = |name: &str| {
            let plain = dir.join(name);
            if plain.exists() {
                plain
            } else {
                dir.join(format!("{name}.gz"))
            }
        };
        let images = parse_idx_images(&read_maybe_gz(find(TRAIN_IMAGES_FILE))?)?;
        let labels = parse_idx_labels(&read_maybe_gz(find(TRAIN_LABELS_FILE))?)?;
        Self::from_idx(&images, &labels)
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    pub fn label(&self, i: usize) -> usize {
        self.labels[i]
    }

    pub fn image(&self, i: usize) -> &[f64] {
        &self.images[i * IMAGE_PIXELS..(i + 1) * IMAGE_PIXELS]
    }

    pub fn images(&self) -> &[f64] {
        &self.images
    }

    pub fn subset(&self, indices: &[usize]) -> Self {
        let mut images = Vec::with_capacity(indices.len() * IMAGE_PIXELS);
        let mut labels = Vec::with_capacity(indices.len());
        for &i in indices {
            images.extend_from_slice(self.image(i));
            labels.push(self.labels[i]);
        }
        Self { images, labels }
    }

    /// First `n` examples (or all of them).
    pub fn head(&self, n: usize) -> Self {
        let idx: Vec<usize> = (0..n.min(self.len())).collect();
        self.subset(&idx)
    }

    /// `indices` gathered into a `B×1×28×28` tensor plus labels.
    pub fn gather(&self, indices: &[usize]) -> (Tensor, Vec<usize>) {
        let mut data = Vec::with_capacity(indices.len() * IMAGE_PIXELS);
        let mut labels = Vec::with_capacity(indices.len());
        for &i in indices {
            data.extend_from_slice(self.image(i));
            labels.push(self.labels[i]);
        }
        let t = Tensor::new(vec![indices.len(), 1, IMAGE_SIDE, IMAGE_SIDE], data)
            .expect("non-empty batch");
        (t, labels)
    }

    /// Consecutive chunks in storage order, for evaluation.
    pub fn chunks(&self, size: usize) -> impl Iterator<Item = Vec<usize>> + '_ {
        let size = size.max(1);
        (0..self.len())
            .step_by(size)
            .map(move |s| (s..(s + size).min(self.len())).collect())
    }
}

/// Seeded permutation of the 60,000-example training file into a 50,000
/// training set and a 10,000 holdout. Returns the index lists as well.
pub fn split(
    data: &LabeledDataset,
    seed: u64,
) -> Result<(LabeledDataset, LabeledDataset, Vec<usize>, Vec<usize>)> {
    if data.len() != TRAIN_FILE_COUNT {
        return Err(Error::CountMismatch(format!(
            "split expects {TRAIN_FILE_COUNT} examples, got {}",
            data.len()
        )));
    }
    let (train_idx, holdout_idx) =
        split_indices(data.len(), TRAIN_SPLIT, derive_seed(seed, Stream::Split, 0));
    Ok((
        data.subset(&train_idx),
        data.subset(&holdout_idx),
        train_idx,
        holdout_idx,
    ))
}

pub(crate) fn split_indices(n: usize, first: usize, seed: u64) -> (Vec<usize>, Vec<usize>) {
    let mut idx: Vec<usize> = (0..n).collect();
    idx.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let rest = idx.split_off(first);
    (idx, rest)
}

/// Seeded shuffle of `0..len` cut into batches; the final short batch is kept.
pub fn batches(len: usize, batch_size: usize, seed: u64) -> Result<Vec<Vec<usize>>> {
    if batch_size == 0 {
        return Err(Error::invalid("batches", "batch size must be at least 1"));
    }
    let mut idx: Vec<usize> = (0..len).collect();
    idx.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    Ok(idx.chunks(batch_size).map(<[usize]>::to_vec).collect())
}
