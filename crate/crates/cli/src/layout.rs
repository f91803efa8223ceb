//! On-disk layout of one experiment directory.

use std::path::{Path, PathBuf};

#[derive(Clone, Debug)]
pub struct Layout {
    root: PathBuf,
}

impl Layout {
    pub fn new(root: PathBuf) -> Self {
        Self { root }
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    pub fn corpus(&self) -> PathBuf {
        self.root.join("corpus")
    }

    pub fn base(&self) -> PathBuf {
        self.root.join("base")
    }

    pub fn base_checkpoint(&self) -> PathBuf {
        self.base().join("base.ckpt")
    }

    /// Edit records with locality ground truth from the trained base.
    pub fn base_records(&self) -> PathBuf {
        self.base().join("records.jsonl")
    }

    pub fn train_log(&self) -> PathBuf {
        self.base().join("train_log.json")
    }

    pub fn runs(&self) -> PathBuf {
        self.root.join("runs")
    }

    pub fn ablation_csv(&self) -> PathBuf {
        self.root.join("ablate").join("ablation.csv")
    }

    pub fn report(&self) -> PathBuf {
        self.root.join("report")
    }
}
