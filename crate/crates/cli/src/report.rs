//! Deterministic JSON and CSV report files.

use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use serde::Serialize;

/// A directory that receives one command's report files.
pub struct ReportDir {
    root: PathBuf,
    written: Vec<PathBuf>,
}

impl ReportDir {
    pub fn create(root: impl Into<PathBuf>) -> Result<Self> {
        let root = root.into();
        std::fs::create_dir_all(&root).with_context(|| format!("creating output directory {}", root.display()))?;
        Ok(ReportDir {
            root,
            written: Vec::new(),
        })
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    /// Files written so far, in write order.
    pub fn written(&self) -> &[PathBuf] {
        &self.written
    }

    /// Pretty-printed JSON with a trailing newline.
    pub fn json<T: Serialize + ?Sized>(&mut self, name: &str, value: &T) -> Result<PathBuf> {
        let mut text = serde_json::to_string_pretty(value).with_context(|| format!("serializing {name}"))?;
        text.push('\n');
        self.bytes(name, text.as_bytes())
    }

    /// One header row plus one row per record.
    pub fn csv<T: Serialize>(&mut self, name: &str, records: &[T]) -> Result<PathBuf> {
        let mut w = csv::Writer::from_writer(Vec::new());
        for r in records {
            w.serialize(r).with_context(|| format!("serializing a row of {name}"))?;
        }
        let bytes = w.into_inner().map_err(|e| anyhow::anyhow!("finishing {name}: {e}"))?;
        self.bytes(name, &bytes)
    }

    fn bytes(&mut self, name: &str, bytes: &[u8]) -> Result<PathBuf> {
        let path = self.root.join(name);
        std::fs::write(&path, bytes).with_context(|| format!("writing {}", path.display()))?;
        self.written.push(path.clone());
        Ok(path)
    }
}
