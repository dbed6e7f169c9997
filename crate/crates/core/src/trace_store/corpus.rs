use std::collections::BTreeSet;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::{read_trace, read_trace_meta, ActivationTrace, Correctness, TaskCategory, TraceMeta};
use crate::error::{Error, Result};

pub const MANIFEST_SCHEMA_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ManifestEntry {
    /// Relative paths resolve against the manifest's directory.
    pub path: String,
    pub task_category: TaskCategory,
    pub correctness: Correctness,
    pub model_name: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CorpusManifest {
    pub schema_version: u32,
    pub entries: Vec<ManifestEntry>,
}

impl Default for CorpusManifest {
    fn default() -> Self {
        CorpusManifest {
            schema_version: MANIFEST_SCHEMA_VERSION,
            entries: Vec::new(),
        }
    }
}

impl CorpusManifest {
    pub fn read(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let manifest: CorpusManifest =
            serde_json::from_str(&text).map_err(|e| Error::Manifest(format!("{}: {e}", path.display())))?;
        if manifest.schema_version != MANIFEST_SCHEMA_VERSION {
            return Err(Error::Manifest(format!(
                "unsupported manifest schema_version {}",
                manifest.schema_version
            )));
        }
        Ok(manifest)
    }

    pub fn write(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let mut text = serde_json::to_string_pretty(self).map_err(|e| Error::Manifest(e.to_string()))?;
        text.push('\n');
        fs::write(path, text).map_err(|e| Error::io(path, e))
    }

    pub fn push(&mut self, path: impl Into<String>, meta: &TraceMeta) {
        self.entries.push(ManifestEntry {
            path: path.into(),
            task_category: meta.task_category.clone(),
            correctness: meta.correctness,
            model_name: meta.model_name.clone(),
        });
    }
}

/// A manifest entry with its metadata read; tensors load on demand.
#[derive(Debug, Clone)]
pub struct CorpusEntry {
    pub path: PathBuf,
    pub meta: TraceMeta,
}

impl CorpusEntry {
    pub fn load(&self) -> Result<ActivationTrace> {
        let trace = read_trace(&self.path)?;
        if trace.meta != self.meta {
            return Err(Error::Manifest(format!(
                "{} changed since the corpus was opened",
                self.path.display()
            )));
        }
        Ok(trace)
    }
}

/// Corpus entries in manifest order.
#[derive(Debug, Clone, Default)]
pub struct Corpus {
    pub entries: Vec<CorpusEntry>,
}

impl Corpus {
    pub fn from_manifest(manifest: &CorpusManifest, base_dir: &Path) -> Result<Self> {
        let mut seen = BTreeSet::new();
        let mut entries = Vec::with_capacity(manifest.entries.len());
        for entry in &manifest.entries {
            if !seen.insert(entry.path.as_str()) {
                return Err(Error::Manifest(format!("duplicate path {}", entry.path)));
            }
            let path = base_dir.join(&entry.path);
            if !path.is_file() {
                return Err(Error::Manifest(format!("missing trace file {}", path.display())));
            }
            let meta = read_trace_meta(&path)?;
            let mut disagreements = Vec::new();
            if meta.task_category != entry.task_category {
                disagreements.push(format!(
                    "task_category {} vs {}",
                    entry.task_category, meta.task_category
                ));
            }
            if meta.correctness != entry.correctness {
                disagreements.push(format!("correctness {:?} vs {:?}", entry.correctness, meta.correctness));
            }
            if meta.model_name != entry.model_name {
                disagreements.push(format!("model_name {} vs {}", entry.model_name, meta.model_name));
            }
            if !disagreements.is_empty() {
                return Err(Error::Manifest(format!(
                    "{}: manifest disagrees with file ({})",
                    path.display(),
                    disagreements.join(", ")
                )));
            }
            entries.push(CorpusEntry { path, meta });
        }
        Ok(Corpus { entries })
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = &CorpusEntry> {
        self.entries.iter()
    }

    /// Loads every trace, in manifest order.
    pub fn load_all(&self) -> Result<Vec<ActivationTrace>> {
        self.entries.iter().map(CorpusEntry::load).collect()
    }
}

/// Opens the manifest at `manifest_path`, resolving entries against its
/// directory.
pub fn load_corpus(manifest_path: impl AsRef<Path>) -> Result<Corpus> {
    let manifest_path = manifest_path.as_ref();
    let manifest = CorpusManifest::read(manifest_path)?;
    let base = manifest_path.parent().unwrap_or_else(|| Path::new("."));
    Corpus::from_manifest(&manifest, base)
}

#[cfg(test)]
mod tests {
    use super::super::test_support::*;
    use super::super::write_trace;
    use super::*;

    fn write_corpus(dir: &Path, names: &[&str]) -> CorpusManifest {
        let mut manifest = CorpusManifest::default();
        for (i, name) in names.iter().enumerate() {
            let mut m = meta(vec![0], 1, 3, 1, 2);
            m.task_id = format!("task-{i}");
            let t = trace_from_fn(m, |_, r, c| (r + c + i) as f32);
            write_trace(&t, dir.join(name)).unwrap();
            manifest.push(*name, &t.meta);
        }
        manifest
    }

    #[test]
    fn manifest_order_is_iteration_order() {
        let dir = tempfile::tempdir().unwrap();
        let manifest = write_corpus(dir.path(), &["c.spectra", "a.spectra", "b.spectra"]);
        manifest.write(dir.path().join("manifest.json")).unwrap();
        let corpus = load_corpus(dir.path().join("manifest.json")).unwrap();
        let ids: Vec<_> = corpus.iter().map(|e| e.meta.task_id.as_str()).collect();
        assert_eq!(ids, ["task-0", "task-1", "task-2"]);
        assert_eq!(corpus.load_all().unwrap().len(), 3);
    }

    #[test]
    fn missing_file_is_named() {
        let dir = tempfile::tempdir().unwrap();
        let mut manifest = write_corpus(dir.path(), &["a.spectra"]);
        manifest.entries.push(ManifestEntry {
            path: "gone.spectra".into(),
            task_category: TaskCategory::Factual,
            correctness: Correctness::Unlabeled,
            model_name: "m".into(),
        });
        let err = Corpus::from_manifest(&manifest, dir.path()).unwrap_err();
        assert!(err.to_string().contains("gone.spectra"), "{err}");
    }

    #[test]
    fn empty_manifest_is_empty_corpus() {
        let corpus = Corpus::from_manifest(&CorpusManifest::default(), Path::new(".")).unwrap();
        assert!(corpus.is_empty());
    }

    #[test]
    fn disagreement_and_duplicates_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let mut manifest = write_corpus(dir.path(), &["a.spectra"]);
        manifest.entries[0].correctness = Correctness::Correct;
        assert!(Corpus::from_manifest(&manifest, dir.path()).is_err());

        let mut manifest = write_corpus(dir.path(), &["a.spectra"]);
        manifest.entries.push(manifest.entries[0].clone());
        let err = Corpus::from_manifest(&manifest, dir.path()).unwrap_err();
        assert!(err.to_string().contains("duplicate"));
    }
}
