//! Run manifests and the artifact directory they describe.

use std::collections::BTreeMap;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use ripa_core::SystemConfig;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::{CliError, Command};

pub const MANIFEST_FILE: &str = "manifest.json";

/// Everything needed to rerun a command and check its outputs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub tool: String,
    pub version: String,
    pub subcommand: String,
    pub command: Command,
    pub config_path: Option<PathBuf>,
    pub overrides: Vec<String>,
    /// Fully resolved configuration the run used.
    pub config: SystemConfig,
    pub config_hash: String,
    pub seed: u64,
    pub output_directory: PathBuf,
    /// SHA-256 of every artifact, keyed by path relative to the output directory.
    pub artifacts: BTreeMap<String, String>,
}

impl RunManifest {
    pub fn load(path: impl AsRef<Path>) -> Result<Self, CliError> {
        let text = fs::read_to_string(path.as_ref())
            .map_err(|e| CliError::Validation(format!("{}: {e}", path.as_ref().display())))?;
        serde_json::from_str(&text).map_err(|e| CliError::Validation(format!("bad manifest: {e}")))
    }
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    Sha256::digest(bytes).iter().map(|b| format!("{b:02x}")).collect()
}

/// Hash of the canonical JSON form of a value.
pub fn json_hash<T: Serialize>(value: &T) -> Result<String, CliError> {
    Ok(sha256_hex(
        &serde_json::to_vec(value).map_err(|e| CliError::Numerical(e.to_string()))?,
    ))
}

/// Writer rooted at the output directory. Paths are relative and may not
/// climb out of the root.
#[derive(Debug, Clone)]
pub struct Artifacts {
    root: PathBuf,
}

impl Artifacts {
    pub fn create(root: impl Into<PathBuf>) -> Result<Self, CliError> {
        let root = root.into();
        fs::create_dir_all(&root)?;
        Ok(Self { root })
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    /// Absolute path for `rel`, with parent directories created.
    pub fn path(&self, rel: &str) -> Result<PathBuf, CliError> {
        let rel_path = Path::new(rel);
        if rel_path.is_absolute()
            || rel_path
                .components()
                .any(|c| matches!(c, std::path::Component::ParentDir))
        {
            return Err(CliError::Validation(format!(
                "artifact path {rel:?} leaves the output directory"
            )));
        }
        let p = self.root.join(rel_path);
        if let Some(parent) = p.parent() {
            fs::create_dir_all(parent)?;
        }
        Ok(p)
    }

    pub fn bytes(&self, rel: &str, data: &[u8]) -> Result<(), CliError> {
        fs::write(self.path(rel)?, data)?;
        Ok(())
    }

    pub fn json<T: Serialize + ?Sized>(&self, rel: &str, value: &T) -> Result<(), CliError> {
        let mut text = serde_json::to_string_pretty(value).map_err(|e| CliError::Numerical(e.to_string()))?;
        text.push('\n');
        self.bytes(rel, text.as_bytes())
    }

    /// CSV with a header and float rows.
    pub fn rows(&self, rel: &str, header: &[&str], rows: impl IntoIterator<Item = Vec<f64>>) -> Result<(), CliError> {
        let mut buf = Vec::new();
        ripa_core::export::write_rows_csv(&mut buf, header, rows)?;
        self.bytes(rel, &buf)
    }

    pub fn text_file(&self, rel: &str) -> Result<fs::File, CliError> {
        Ok(fs::File::create(self.path(rel)?)?)
    }

    /// Hashes of all files below the root except the top-level manifest.
    pub fn digest(&self) -> Result<BTreeMap<String, String>, CliError> {
        let mut out = BTreeMap::new();
        hash_tree(&self.root, &self.root, &mut out)?;
        out.remove(MANIFEST_FILE);
        Ok(out)
    }

    pub fn write_manifest(&self, manifest: &RunManifest) -> Result<(), CliError> {
        let mut f = self.text_file(MANIFEST_FILE)?;
        let text = serde_json::to_string_pretty(manifest).map_err(|e| CliError::Numerical(e.to_string()))?;
        f.write_all(text.as_bytes())?;
        f.write_all(b"\n")?;
        Ok(())
    }
}

fn hash_tree(root: &Path, dir: &Path, out: &mut BTreeMap<String, String>) -> Result<(), CliError> {
    let mut entries: Vec<_> = fs::read_dir(dir)?.collect::<Result<_, _>>()?;
    entries.sort_by_key(|e| e.file_name());
    for e in entries {
        let p = e.path();
        if e.file_type()?.is_dir() {
            hash_tree(root, &p, out)?;
        } else {
            let rel = p.strip_prefix(root).expect("below root");
            let key = rel
                .components()
                .map(|c| c.as_os_str().to_string_lossy())
                .collect::<Vec<_>>()
                .join("/");
            out.insert(key, sha256_hex(&fs::read(&p)?));
        }
    }
    Ok(())
}
