//! Seeded dataset files and their manifest.

use std::fs;
use std::path::{Path, PathBuf};

use milodo::problems::{generate, ProblemKind};
use milodo::seeds::derive_seed;
use milodo::Optimizee64;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::config::{ExperimentConfig, SplitPlan};
use crate::error::{CliError, CliResult};

pub const MANIFEST: &str = "manifest.toml";

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Split {
    Train,
    Test,
}

impl Split {
    fn index(self) -> u64 {
        match self {
            Split::Train => 0,
            Split::Test => 1,
        }
    }

    fn dir(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Test => "test",
        }
    }
}

/// Seed of the `k`-th instance of a split.
pub fn instance_seed(seed: u64, split: Split, k: usize) -> u64 {
    derive_seed(seed, &[split.index(), k as u64])
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ManifestEntry {
    /// path relative to the dataset directory
    pub file: String,
    pub kind: ProblemKind,
    pub n: usize,
    pub d: usize,
    pub samples: usize,
    pub lambda: f64,
    /// generator seed, hex
    pub seed: String,
    pub sha256: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub schema_version: u32,
    /// experiment seed, hex
    pub seed: String,
    pub train: Vec<ManifestEntry>,
    pub test: Vec<ManifestEntry>,
}

impl Manifest {
    pub fn entries(&self, split: Split) -> &[ManifestEntry] {
        match split {
            Split::Train => &self.train,
            Split::Test => &self.test,
        }
    }
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

fn write(path: &Path, bytes: &[u8]) -> CliResult<()> {
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent).map_err(|e| CliError::io(parent, e))?;
    }
    fs::write(path, bytes).map_err(|e| CliError::io(path, e))
}

fn generate_split(dir: &Path, seed: u64, split: Split, plan: &SplitPlan) -> CliResult<Vec<ManifestEntry>> {
    // generation runs in parallel; files are written afterwards in index order
    let built: Vec<(ManifestEntry, Vec<u8>)> = (0..plan.len())
        .into_par_iter()
        .map(|k| {
            let shape = plan.shape_of(k).expect("index within plan");
            let s = instance_seed(seed, split, k);
            let bytes = generate(plan.kind, shape, s)?.to_bytes();
            let entry = ManifestEntry {
                file: format!("{}/{k:05}.bin", split.dir()),
                kind: plan.kind,
                n: shape.n,
                d: shape.d,
                samples: shape.samples,
                lambda: shape.lambda,
                seed: format!("{s:016x}"),
                sha256: sha256_hex(&bytes),
            };
            Ok((entry, bytes))
        })
        .collect::<Result<_, milodo::Error>>()?;
    let mut entries = Vec::with_capacity(built.len());
    for (entry, bytes) in built {
        write(&dir.join(&entry.file), &bytes)?;
        entries.push(entry);
    }
    Ok(entries)
}

#[derive(Debug, Clone)]
pub struct GenReport {
    pub dir: PathBuf,
    pub train: usize,
    pub test: usize,
    /// SHA-256 of the manifest file
    pub manifest_sha256: String,
}

pub fn cmd_gen_data(cfg: &ExperimentConfig) -> CliResult<GenReport> {
    cfg.validate()?;
    let (train_plan, test_plan) = cfg.data.plans()?;
    let dir = cfg.data_dir();
    let manifest = Manifest {
        schema_version: 1,
        seed: format!("{:016x}", cfg.seed),
        train: generate_split(&dir, cfg.seed, Split::Train, &train_plan)?,
        test: generate_split(&dir, cfg.seed, Split::Test, &test_plan)?,
    };
    let text = toml::to_string(&manifest).expect("manifest serializes");
    write(&dir.join(MANIFEST), text.as_bytes())?;
    Ok(GenReport {
        dir,
        train: manifest.train.len(),
        test: manifest.test.len(),
        manifest_sha256: sha256_hex(text.as_bytes()),
    })
}

pub fn read_manifest(dir: &Path) -> CliResult<Manifest> {
    let path = dir.join(MANIFEST);
    let text = fs::read_to_string(&path)
        .map_err(|e| CliError::Config(format!("no dataset at {} ({e}); run gen-data first", dir.display())))?;
    toml::from_str(&text).map_err(|e| CliError::Config(format!("{}: {e}", path.display())))
}

/// Loads up to `limit` instances of a split, checking every file against its hash.
pub fn load_split(dir: &Path, split: Split, limit: Option<usize>) -> CliResult<Vec<Optimizee64>> {
    let manifest = read_manifest(dir)?;
    let entries = manifest.entries(split);
    let take = limit.map_or(entries.len(), |l| l.min(entries.len()));
    if take == 0 {
        return Err(CliError::Config(format!("dataset split `{}` is empty", split.dir())));
    }
    entries[..take]
        .par_iter()
        .map(|e| {
            let path = dir.join(&e.file);
            let bytes = fs::read(&path).map_err(|err| CliError::Config(format!("{}: {err}", path.display())))?;
            if sha256_hex(&bytes) != e.sha256 {
                return Err(CliError::Config(format!("{} does not match its manifest hash", path.display())));
            }
            Ok(Optimizee64::from_bytes(&bytes)?)
        })
        .collect()
}
