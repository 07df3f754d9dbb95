use std::collections::BTreeSet;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// On-disk form of `manifest.json`. Tensor paths are relative to the manifest's directory.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub model_id: String,
    pub d_model: usize,
    pub n_layers: usize,
    pub n_heads: usize,
    pub seq_len: usize,
    /// Softmax temperature; `None` means `sqrt(d_head)`.
    #[serde(default)]
    pub temperature: Option<f64>,
    /// Attention matrices carry a causal mask.
    #[serde(default)]
    pub causal: bool,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub embeddings: Option<String>,
    pub entries: Vec<ManifestEntry>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub layer: usize,
    pub head: usize,
    pub q: String,
    pub k: String,
    pub v: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub attn: Option<String>,
}

/// Resolved manifest: every path is checked to exist.
#[derive(Debug, Clone)]
pub struct DumpIndex {
    pub model_id: String,
    pub d_model: usize,
    pub n_layers: usize,
    pub n_heads: usize,
    pub seq_len: usize,
    pub temperature: Option<f64>,
    pub causal: bool,
    pub embeddings: Option<PathBuf>,
    pub entries: Vec<DumpEntry>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct DumpEntry {
    pub layer: usize,
    pub head: usize,
    pub q: PathBuf,
    pub k: PathBuf,
    pub v: PathBuf,
    pub attn: Option<PathBuf>,
}

impl DumpIndex {
    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }
}

/// Reads `manifest.json` (or the given file) and resolves its tensor paths.
///
/// Accepts either the manifest file or the dump directory containing it.
pub fn read_manifest(path: impl AsRef<Path>) -> Result<DumpIndex> {
    let path = path.as_ref();
    let file = if path.is_dir() {
        path.join("manifest.json")
    } else {
        path.to_path_buf()
    };
    let text = fs::read_to_string(&file).map_err(|e| Error::io(&file, e))?;
    let manifest: Manifest =
        serde_json::from_str(&text).map_err(|e| Error::Manifest(e.to_string()))?;
    let root = file.parent().unwrap_or(Path::new("."));
    resolve(manifest, root)
}

pub fn write_manifest(manifest: &Manifest, dir: impl AsRef<Path>) -> Result<PathBuf> {
    let file = dir.as_ref().join("manifest.json");
    let text = serde_json::to_string_pretty(manifest)
        .map_err(|e| Error::Manifest(e.to_string()))?;
    fs::write(&file, text).map_err(|e| Error::io(&file, e))?;
    Ok(file)
}

fn resolve(manifest: Manifest, root: &Path) -> Result<DumpIndex> {
    if let Some(t) = manifest.temperature {
        if !(t.is_finite() && t > 0.0) {
            return Err(Error::Manifest(format!("temperature must be positive, got {t}")));
        }
    }
    let existing = |rel: &str| -> Result<PathBuf> {
        let p = root.join(rel);
        if p.is_file() {
            Ok(p)
        } else {
            Err(Error::MissingFile(p))
        }
    };

    let mut seen = BTreeSet::new();
    let mut entries = Vec::with_capacity(manifest.entries.len());
    for e in &manifest.entries {
        if !seen.insert((e.layer, e.head)) {
            return Err(Error::Manifest(format!(
                "duplicate entry for layer {} head {}",
                e.layer, e.head
            )));
        }
        entries.push(DumpEntry {
            layer: e.layer,
            head: e.head,
            q: existing(&e.q)?,
            k: existing(&e.k)?,
            v: existing(&e.v)?,
            attn: e.attn.as_deref().map(existing).transpose()?,
        });
    }
    let embeddings = manifest.embeddings.as_deref().map(existing).transpose()?;

    Ok(DumpIndex {
        model_id: manifest.model_id,
        d_model: manifest.d_model,
        n_layers: manifest.n_layers,
        n_heads: manifest.n_heads,
        seq_len: manifest.seq_len,
        temperature: manifest.temperature,
        causal: manifest.causal,
        embeddings,
        entries,
    })
}
