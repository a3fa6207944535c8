//! Run directory: artifacts plus a `manifest.json` that indexes them by
//! SHA-256 and records the configuration that produced them.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::sha256_hex;

pub const MANIFEST: &str = "manifest.json";

/// Stage names used as keys of the artifact index.
pub const TRAIN: &str = "train";
pub const EVOLVE: &str = "evolve";
pub const COMPARE: &str = "compare";
pub const TERMINAL: &str = "terminal";

const DOWNSTREAM: [&str; 3] = [EVOLVE, COMPARE, TERMINAL];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ArchRecord {
    pub input_dim: usize,
    pub encoder_hidden: Vec<usize>,
    pub decoder_hidden: Vec<usize>,
    pub activation: String,
    pub output_activation: String,
    pub bottleneck_bias: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainRecord {
    pub epochs: u32,
    pub batch_size: usize,
    pub eta: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub digits: Vec<u8>,
    pub train_samples: usize,
    pub compare_samples: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub tool_version: String,
    pub seed: u64,
    /// SHA-256 of the canonical JSON of `arch` and `train`.
    pub config_digest: String,
    pub arch: ArchRecord,
    pub train: TrainRecord,
    /// Source file name to SHA-256.
    pub data: BTreeMap<String, String>,
    /// Loss of the initial weights over the training set.
    pub initial_loss: f64,
    /// Mean training loss of each epoch.
    pub loss_curve: Vec<f64>,
    /// Parameters of the later stages, keyed by stage.
    pub stages: BTreeMap<String, serde_json::Value>,
    /// Stage to (relative path to SHA-256).
    pub artifacts: BTreeMap<String, BTreeMap<String, String>>,
}

impl Manifest {
    pub fn digest_config(arch: &ArchRecord, train: &TrainRecord, seed: u64) -> String {
        let v = serde_json::json!({ "arch": arch, "train": train, "seed": seed });
        sha256_hex(v.to_string().as_bytes())
    }
}

pub struct RunDir {
    root: PathBuf,
    pub manifest: Manifest,
}

fn write_file(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(parent) = path.parent() {
        std::fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
    }
    std::fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

impl RunDir {
    /// Starts a fresh run in `root`, removing the artifacts of any run
    /// previously recorded there.
    pub fn create(root: &Path, manifest: Manifest) -> Result<Self> {
        if root.join(MANIFEST).is_file() {
            let old = Self::load_manifest(root)?;
            for stage in old.artifacts.values() {
                for rel in stage.keys() {
                    remove_quietly(&root.join(rel));
                }
            }
        }
        std::fs::create_dir_all(root).map_err(|e| Error::io(root, e))?;
        Ok(Self { root: root.to_path_buf(), manifest })
    }

    fn load_manifest(root: &Path) -> Result<Manifest> {
        let path = root.join(MANIFEST);
        let text = std::fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
        serde_json::from_str(&text).map_err(|e| Error::parse(&path, e.to_string()))
    }

    /// Opens an existing run and checks every indexed artifact.
    pub fn open(root: &Path) -> Result<Self> {
        let manifest = Self::load_manifest(root)?;
        let run = Self { root: root.to_path_buf(), manifest };
        for stage in run.manifest.artifacts.values() {
            for (rel, digest) in stage {
                let path = run.root.join(rel);
                let bytes = std::fs::read(&path).map_err(|e| Error::io(&path, e))?;
                if &sha256_hex(&bytes) != digest {
                    return Err(Error::Digest(path));
                }
            }
        }
        Ok(run)
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    /// Drops the artifacts of `stage` and of every stage that depends on it.
    pub fn reset_stage(&mut self, stage: &str) {
        let mut drop: Vec<&str> = vec![stage];
        if stage == TRAIN {
            drop.extend(DOWNSTREAM);
        }
        for s in drop {
            if let Some(files) = self.manifest.artifacts.remove(s) {
                for rel in files.keys() {
                    remove_quietly(&self.root.join(rel));
                }
            }
            if s != TRAIN {
                self.manifest.stages.remove(s);
            }
        }
    }

    pub fn write(&mut self, stage: &str, rel: &str, bytes: &[u8]) -> Result<()> {
        write_file(&self.root.join(rel), bytes)?;
        self.manifest.artifacts.entry(stage.to_string()).or_default().insert(rel.to_string(), sha256_hex(bytes));
        Ok(())
    }

    /// Reads an indexed artifact.
    pub fn read(&self, rel: &str) -> Result<Vec<u8>> {
        let path = self.root.join(rel);
        if !self.manifest.artifacts.values().any(|s| s.contains_key(rel)) {
            return Err(Error::NotFound(path));
        }
        std::fs::read(&path).map_err(|e| Error::io(&path, e))
    }

    pub fn read_text(&self, rel: &str) -> Result<String> {
        let bytes = self.read(rel)?;
        String::from_utf8(bytes).map_err(|_| Error::parse(self.root.join(rel), "not UTF-8"))
    }

    pub fn path(&self, rel: &str) -> PathBuf {
        self.root.join(rel)
    }

    pub fn save(&self) -> Result<()> {
        let mut text = serde_json::to_string_pretty(&self.manifest).expect("manifest serializes");
        text.push('\n');
        write_file(&self.root.join(MANIFEST), text.as_bytes())
    }
}

fn remove_quietly(path: &Path) {
    if let Err(e) = std::fs::remove_file(path) {
        if e.kind() != std::io::ErrorKind::NotFound {
            log::warn!("could not remove {}: {e}", path.display());
        }
    }
}

pub fn epoch_dir(epoch: u32) -> String {
    format!("epoch_{epoch:03}")
}

pub fn snapshot_path(epoch: u32, layer: u32) -> String {
    format!("{}/layer_{layer}.bin", epoch_dir(epoch))
}

pub fn adam_path(epoch: u32, layer: u32, moment: &str) -> String {
    format!("{}/layer_{layer}.adam_{moment}.bin", epoch_dir(epoch))
}

pub fn encoder_path(epoch: u32) -> String {
    format!("{}/encoder_outputs.bin", epoch_dir(epoch))
}

pub fn density_path(epoch: u32, layer: u32) -> String {
    format!("{}/density_layer_{layer}.csv", epoch_dir(epoch))
}

pub const ROW_UPDATES: &str = "row_updates.jsonl";
pub const SOLVER_LOG: &str = "solver_log.jsonl";
pub const COMPARISON_CSV: &str = "comparison.csv";
pub const CS_REPORT: &str = "cs_report.json";
pub const CURVES_CSV: &str = "curves.csv";
