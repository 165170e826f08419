//! Experiment drivers behind the CLI subcommands.

use std::fs;
use std::path::{Path, PathBuf};

use anyhow::Context;

pub mod counterexample;
pub mod figures;
pub mod train;
pub mod verify;

/// Output directory; files are always written through [`OutDir::write`]
/// so every artifact lands in one place.
#[derive(Debug, Clone)]
pub struct OutDir {
    root: PathBuf,
}

impl OutDir {
    pub fn new(root: PathBuf) -> anyhow::Result<Self> {
        fs::create_dir_all(&root).with_context(|| format!("creating output directory {}", root.display()))?;
        Ok(Self { root })
    }

    pub fn write(&self, name: &str, contents: &str) -> anyhow::Result<PathBuf> {
        let path = self.root.join(name);
        fs::write(&path, contents).with_context(|| format!("writing {}", path.display()))?;
        Ok(path)
    }

    pub fn path(&self) -> &Path {
        &self.root
    }
}
