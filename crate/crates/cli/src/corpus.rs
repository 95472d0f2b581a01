//! The corpus manifest written by `gen-data` and read by `train` and
//! `benchmark`.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use flowtie::container::load_dataset;
use flowtie::microscope::FourDDataset;

use crate::error::{CliError, Result};

pub const CORPUS_FILE: &str = "corpus.json";

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
}

/// One generated training or validation structure.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StructureEntry {
    pub name: String,
    /// Dataset directory relative to the corpus root.
    pub path: String,
    pub split: Split,
    pub seed: u64,
    pub cells: usize,
    pub lattice: f64,
    pub thickness: f64,
}

/// One held-out test dataset (preset or user structure).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TestEntry {
    pub label: String,
    pub material: String,
    pub path: String,
    pub cells: usize,
    pub thickness: f64,
}

/// Acquisition settings shared by every dataset in a corpus.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Acquisition {
    pub n: usize,
    pub scan: usize,
    pub accel_kv: f64,
    pub semi_angle_mrad: f64,
    pub defocus_step: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Corpus {
    pub kind: String,
    pub version: String,
    pub seed: u64,
    pub acquisition: Acquisition,
    pub structures: Vec<StructureEntry>,
    pub tests: Vec<TestEntry>,
}

impl Corpus {
    pub fn load(root: &Path) -> Result<Self> {
        let path = root.join(CORPUS_FILE);
        let text = fs::read_to_string(&path).map_err(|e| CliError::io(&path, e))?;
        let corpus: Corpus = serde_json::from_str(&text)?;
        if corpus.kind != "flowtie-corpus" {
            return Err(CliError::Corpus {
                path,
                reason: format!("unexpected kind {:?}", corpus.kind),
            });
        }
        Ok(corpus)
    }

    pub fn save(&self, root: &Path) -> Result<()> {
        let path = root.join(CORPUS_FILE);
        let mut text = serde_json::to_string_pretty(self)?;
        text.push('\n');
        fs::write(&path, text).map_err(|e| CliError::io(&path, e))
    }

    pub fn split(&self, split: Split) -> impl Iterator<Item = &StructureEntry> {
        self.structures.iter().filter(move |s| s.split == split)
    }

    /// Loads every dataset of one split.
    pub fn load_split(&self, root: &Path, split: Split) -> Result<Vec<FourDDataset>> {
        self.split(split)
            .map(|s| Ok(load_dataset(&root.join(&s.path))?))
            .collect()
    }

    pub fn test_path(&self, root: &Path, entry: &TestEntry) -> PathBuf {
        root.join(&entry.path)
    }
}
