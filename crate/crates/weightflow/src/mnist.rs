//! Reading the standard MNIST files from disk.

use std::collections::BTreeMap;
use std::io::Read;
use std::path::Path;

use flate2::read::GzDecoder;
use weightflow_core::dataset::{parse_idx, Dataset};

use crate::error::{Error, Result};
use crate::sha256_hex;

pub const TRAIN_IMAGES: &str = "train-images-idx3-ubyte";
pub const TRAIN_LABELS: &str = "train-labels-idx1-ubyte";
pub const TEST_IMAGES: &str = "t10k-images-idx3-ubyte";
pub const TEST_LABELS: &str = "t10k-labels-idx1-ubyte";

const GZIP_MAGIC: [u8; 2] = [0x1f, 0x8b];

/// Reads `dir/name`, falling back to `dir/name.gz`. Returns the file name
/// actually used and the decompressed bytes.
fn read_maybe_gz(dir: &Path, name: &str) -> Result<(String, Vec<u8>, Vec<u8>)> {
    let plain = dir.join(name);
    let gz_name = format!("{name}.gz");
    let (used, path) = if plain.is_file() { (name.to_string(), plain) } else { (gz_name.clone(), dir.join(&gz_name)) };
    let raw = std::fs::read(&path).map_err(|e| Error::io(&path, e))?;
    let bytes = if raw.starts_with(&GZIP_MAGIC) {
        let mut out = Vec::new();
        GzDecoder::new(raw.as_slice()).read_to_end(&mut out).map_err(|e| Error::io(&path, e))?;
        out
    } else {
        raw.clone()
    };
    Ok((used, raw, bytes))
}

/// The training split in `dir`, with the SHA-256 of each source file.
pub fn load_train(dir: &Path) -> Result<(Dataset, BTreeMap<String, String>)> {
    let (img_name, img_raw, images) = read_maybe_gz(dir, TRAIN_IMAGES)?;
    let (lab_name, lab_raw, labels) = read_maybe_gz(dir, TRAIN_LABELS)?;
    let ds = parse_idx(&images, &labels).map_err(|e| Error::parse(dir, e.to_string()))?;
    let mut sums = BTreeMap::new();
    sums.insert(img_name, sha256_hex(&img_raw));
    sums.insert(lab_name, sha256_hex(&lab_raw));
    let combined = sums.values().cloned().collect::<Vec<_>>().join(":");
    log::info!("loaded {} training images from {}", ds.len(), dir.display());
    Ok((ds.with_checksum(sha256_hex(combined.as_bytes())), sums))
}
