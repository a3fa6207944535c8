//! IDX image/label parsing and deterministic batching.
//!
//! Pixels are kept as the raw bytes and scaled by 1/255 when a batch is
//! assembled, which keeps the full training split at under 30 MB.

use alloc::format;
use alloc::string::String;
use alloc::vec::Vec;

use rand::seq::SliceRandom;

use crate::rng::{stream, SHUFFLE};
use crate::{Error, Result};

pub const IMAGES_MAGIC: u32 = 0x0000_0803;
pub const LABELS_MAGIC: u32 = 0x0000_0801;

/// The digit classes the experiments train on.
pub const DIGITS_0_TO_5: [u8; 6] = [0, 1, 2, 3, 4, 5];

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pixels: Vec<u8>,
    labels: Vec<u8>,
    rows: usize,
    cols: usize,
    /// Digest of the source files; empty when built in memory.
    pub checksum: String,
}

fn read_u32(bytes: &[u8], at: usize, what: &str) -> Result<u32> {
    bytes
        .get(at..at + 4)
        .map(|b| u32::from_be_bytes([b[0], b[1], b[2], b[3]]))
        .ok_or_else(|| Error::format(format!("{what}: truncated header")))
}

/// Parses an IDX image file and its label file from memory.
pub fn parse_idx(images: &[u8], labels: &[u8]) -> Result<Dataset> {
    let magic = read_u32(images, 0, "images")?;
    if magic != IMAGES_MAGIC {
        return Err(Error::format(format!("images: bad magic {magic:#010x}")));
    }
    let n = read_u32(images, 4, "images")? as usize;
    let rows = read_u32(images, 8, "images")? as usize;
    let cols = read_u32(images, 12, "images")? as usize;
    let body = &images[16..];
    let expected = n
        .checked_mul(rows)
        .and_then(|v| v.checked_mul(cols))
        .ok_or_else(|| Error::format("images: dimensions overflow"))?;
    if body.len() != expected {
        return Err(Error::format(format!(
            "images: expected {expected} pixel bytes, found {}",
            body.len()
        )));
    }

    let magic = read_u32(labels, 0, "labels")?;
    if magic != LABELS_MAGIC {
        return Err(Error::format(format!("labels: bad magic {magic:#010x}")));
    }
    let nl = read_u32(labels, 4, "labels")? as usize;
    let lbody = &labels[8..];
    if lbody.len() != nl {
        return Err(Error::format(format!("labels: expected {nl} bytes, found {}", lbody.len())));
    }
    if nl != n {
        return Err(Error::format(format!("{n} images but {nl} labels")));
    }
    Ok(Dataset { pixels: body.to_vec(), labels: lbody.to_vec(), rows, cols, checksum: String::new() })
}

/// Serializes images and labels back to the two IDX byte streams.
pub fn encode_idx(ds: &Dataset) -> (Vec<u8>, Vec<u8>) {
    let mut images = Vec::with_capacity(16 + ds.pixels.len());
    for v in [IMAGES_MAGIC, ds.len() as u32, ds.rows as u32, ds.cols as u32] {
        images.extend_from_slice(&v.to_be_bytes());
    }
    images.extend_from_slice(&ds.pixels);
    let mut labels = Vec::with_capacity(8 + ds.labels.len());
    labels.extend_from_slice(&LABELS_MAGIC.to_be_bytes());
    labels.extend_from_slice(&(ds.len() as u32).to_be_bytes());
    labels.extend_from_slice(&ds.labels);
    (images, labels)
}

impl Dataset {
    /// Builds a dataset from raw 8-bit pixels.
    pub fn from_raw(pixels: Vec<u8>, labels: Vec<u8>, rows: usize, cols: usize) -> Result<Self> {
        if rows == 0 || cols == 0 || pixels.len() != labels.len() * rows * cols {
            return Err(Error::invalid("pixel buffer does not match labels and image size"));
        }
        Ok(Self { pixels, labels, rows, cols, checksum: String::new() })
    }

    pub fn with_checksum(mut self, checksum: impl Into<String>) -> Self {
        self.checksum = checksum.into();
        self
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn dim(&self) -> usize {
        self.rows * self.cols
    }

    pub fn labels(&self) -> &[u8] {
        &self.labels
    }

    pub fn raw_image(&self, k: usize) -> &[u8] {
        &self.pixels[k * self.dim()..(k + 1) * self.dim()]
    }

    /// Pixel values of image `k` scaled to `[0, 1]`.
    pub fn image(&self, k: usize) -> impl Iterator<Item = f64> + '_ {
        self.raw_image(k).iter().map(|&b| f64::from(b) / 255.0)
    }

    /// Writes the selected images row by row into `out` (`len * dim`).
    pub fn gather(&self, indices: &[usize], out: &mut [f64]) {
        let d = self.dim();
        assert_eq!(out.len(), indices.len() * d, "gather buffer has the wrong size");
        for (row, &k) in out.chunks_exact_mut(d).zip(indices) {
            for (o, &b) in row.iter_mut().zip(self.raw_image(k)) {
                *o = f64::from(b) / 255.0;
            }
        }
    }

    /// All images as one `n * dim` matrix.
    pub fn to_matrix(&self) -> Vec<f64> {
        self.pixels.iter().map(|&b| f64::from(b) / 255.0).collect()
    }

    /// The first `n` samples (all of them if `n` exceeds the length).
    pub fn take(&self, n: usize) -> Dataset {
        let n = n.min(self.len());
        Dataset {
            pixels: self.pixels[..n * self.dim()].to_vec(),
            labels: self.labels[..n].to_vec(),
            rows: self.rows,
            cols: self.cols,
            checksum: self.checksum.clone(),
        }
    }
}

/// Order-preserving subset of the samples whose label is in `keep`.
pub fn filter_digits(ds: &Dataset, keep: &[u8]) -> Result<Dataset> {
    let d = ds.dim();
    let mut pixels = Vec::new();
    let mut labels = Vec::new();
    for (k, &l) in ds.labels.iter().enumerate() {
        if keep.contains(&l) {
            labels.push(l);
            pixels.extend_from_slice(&ds.pixels[k * d..(k + 1) * d]);
        }
    }
    if labels.is_empty() {
        return Err(Error::invalid("label filter left no samples"));
    }
    log::info!("kept {} of {} samples", labels.len(), ds.len());
    Ok(Dataset { pixels, labels, rows: ds.rows, cols: ds.cols, checksum: ds.checksum.clone() })
}

/// Shuffled index batches for one epoch; a pure function of `(seed, epoch)`.
/// The last batch may be short.
pub fn batches(n: usize, batch_size: usize, seed: u64, epoch: u64) -> Result<Vec<Vec<usize>>> {
    if batch_size == 0 {
        return Err(Error::invalid("batch size must be at least 1"));
    }
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut stream(seed, SHUFFLE, epoch));
    Ok(order.chunks(batch_size).map(|c| c.to_vec()).collect())
}
