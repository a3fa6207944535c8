//! File formats, run directories and the training / evolution / comparison
//! pipeline on top of `weightflow-core`.

pub mod config;
pub mod error;
pub mod formats;
pub mod heatmap;
pub mod mnist;
pub mod pipeline;
pub mod run;

pub use error::{Error, Result};

/// Lower-case hex SHA-256 of `bytes`.
pub fn sha256_hex(bytes: &[u8]) -> String {
    use sha2::{Digest, Sha256};
    Sha256::digest(bytes).iter().map(|b| format!("{b:02x}")).collect()
}
