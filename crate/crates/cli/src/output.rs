//! Staged output writing and run manifests.
//!
//! Every output is first written into a temporary directory next to its
//! destination and only moved into place once the whole command succeeded.
//! The run manifest is moved last, so its presence marks a complete run.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use anyhow::Context;
use serde::Serialize;
use sha2::{Digest, Sha256};
use tempfile::TempDir;

use crate::error::{CliError, Kind, Result};

/// Name of the manifest written inside directory outputs.
pub const MANIFEST_NAME: &str = "run.json";

#[derive(Debug, Clone, Serialize)]
pub struct RunManifest {
    pub command: String,
    pub tool_version: String,
    pub config: serde_json::Value,
    pub seeds: BTreeMap<String, u64>,
    pub inputs: BTreeMap<String, String>,
    pub outputs: Vec<String>,
    /// SHA-256 of every output file, keyed by path relative to its output.
    pub artifacts: BTreeMap<String, String>,
}

impl RunManifest {
    pub fn new(command: &str, config: serde_json::Value) -> Self {
        Self {
            command: command.to_owned(),
            tool_version: env!("CARGO_PKG_VERSION").to_owned(),
            config,
            seeds: BTreeMap::new(),
            inputs: BTreeMap::new(),
            outputs: Vec::new(),
            artifacts: BTreeMap::new(),
        }
    }

    pub fn seed(mut self, name: &str, value: u64) -> Self {
        self.seeds.insert(name.to_owned(), value);
        self
    }

    pub fn input(mut self, name: &str, path: &Path) -> Self {
        self.inputs.insert(name.to_owned(), path.display().to_string());
        self
    }
}

fn io_err(path: &Path, e: std::io::Error, what: &str) -> CliError {
    CliError::new(Kind::Io, anyhow::Error::new(e).context(format!("{what} {}", path.display())))
}

pub fn sha256_file(path: &Path) -> Result<String> {
    let bytes = fs::read(path).map_err(|e| io_err(path, e, "cannot read"))?;
    Ok(hex::encode(Sha256::digest(&bytes)))
}

fn hash_into(root: &Path, dir: &Path, prefix: &str, out: &mut BTreeMap<String, String>) -> Result<()> {
    let mut entries: Vec<_> = fs::read_dir(dir)
        .map_err(|e| io_err(dir, e, "cannot list"))?
        .collect::<std::io::Result<_>>()
        .map_err(|e| io_err(dir, e, "cannot list"))?;
    entries.sort_by_key(|e| e.file_name());
    for entry in entries {
        let path = entry.path();
        if path.is_dir() {
            hash_into(root, &path, prefix, out)?;
        } else {
            let rel = path.strip_prefix(root).unwrap_or(&path);
            let key: Vec<_> = rel.components().map(|c| c.as_os_str().to_string_lossy()).collect();
            out.insert(format!("{prefix}{}", key.join("/")), sha256_file(&path)?);
        }
    }
    Ok(())
}

fn parent_of(path: &Path) -> PathBuf {
    match path.parent() {
        Some(p) if !p.as_os_str().is_empty() => p.to_path_buf(),
        _ => PathBuf::from("."),
    }
}

/// A directory may be replaced if it is empty or holds an earlier run's output.
fn check_replaceable(path: &Path) -> Result<()> {
    if !path.exists() {
        return Ok(());
    }
    if !path.is_dir() {
        return Err(CliError::usage(format!("{} exists and is not a directory", path.display())));
    }
    let empty = fs::read_dir(path).map_err(|e| io_err(path, e, "cannot list"))?.next().is_none();
    if empty || path.join(MANIFEST_NAME).is_file() {
        Ok(())
    } else {
        Err(CliError::usage(format!(
            "refusing to replace non-empty directory {} that holds no {MANIFEST_NAME}",
            path.display()
        )))
    }
}

enum Entry {
    File,
    Dir,
}

pub struct Staging {
    tmp: TempDir,
    entries: Vec<(PathBuf, PathBuf, Entry)>,
}

impl Staging {
    /// Stages next to `anchor`, the main output of the command.
    pub fn near(anchor: &Path) -> Result<Self> {
        let parent = parent_of(anchor);
        fs::create_dir_all(&parent).map_err(|e| io_err(&parent, e, "cannot create"))?;
        let tmp = tempfile::Builder::new()
            .prefix(".tmgp-staging-")
            .tempdir_in(&parent)
            .map_err(|e| io_err(&parent, e, "cannot stage output in"))?;
        Ok(Self {
            tmp,
            entries: Vec::new(),
        })
    }

    fn staged_name(&self) -> PathBuf {
        self.tmp.path().join(format!("out{}", self.entries.len()))
    }

    /// Returns the staging path of a file that will end up at `dest`.
    pub fn file(&mut self, dest: &Path) -> Result<PathBuf> {
        if dest.is_dir() {
            return Err(CliError::usage(format!("{} is a directory", dest.display())));
        }
        let staged = self.staged_name();
        self.entries.push((staged.clone(), dest.to_path_buf(), Entry::File));
        Ok(staged)
    }

    /// Returns the staging path of a directory that will replace `dest`.
    pub fn dir(&mut self, dest: &Path) -> Result<PathBuf> {
        check_replaceable(dest)?;
        let staged = self.staged_name();
        fs::create_dir_all(&staged).map_err(|e| io_err(&staged, e, "cannot create"))?;
        self.entries.push((staged.clone(), dest.to_path_buf(), Entry::Dir));
        Ok(staged)
    }

    /// Hashes the staged outputs, writes the manifest to `manifest_path` and
    /// moves everything into place, manifest last.
    pub fn commit(self, mut manifest: RunManifest, manifest_path: &Path) -> Result<()> {
        for (staged, dest, kind) in &self.entries {
            manifest.outputs.push(dest.display().to_string());
            match kind {
                Entry::File => {
                    let name = dest.file_name().map_or_else(String::new, |n| n.to_string_lossy().into_owned());
                    manifest.artifacts.insert(name, sha256_file(staged)?);
                }
                Entry::Dir => {
                    // A manifest written inside the directory is not hashed.
                    let mut hashes = BTreeMap::new();
                    hash_into(staged, staged, "", &mut hashes)?;
                    hashes.remove(MANIFEST_NAME);
                    manifest.artifacts.extend(hashes);
                }
            }
        }
        let json = serde_json::to_string_pretty(&manifest)
            .context("cannot serialize run manifest")
            .map_err(|e| CliError::new(Kind::Io, e))?;
        let staged_manifest = self.tmp.path().join("manifest.json");
        fs::write(&staged_manifest, json + "\n").map_err(|e| io_err(&staged_manifest, e, "cannot write"))?;

        for (staged, dest, kind) in &self.entries {
            if let Entry::Dir = kind {
                if dest.exists() {
                    let old = self.tmp.path().join("replaced");
                    fs::rename(dest, &old).map_err(|e| io_err(dest, e, "cannot move aside"))?;
                }
            } else if let Some(parent) = dest.parent().filter(|p| !p.as_os_str().is_empty()) {
                fs::create_dir_all(parent).map_err(|e| io_err(parent, e, "cannot create"))?;
            }
            move_path(staged, dest)?;
        }
        move_path(&staged_manifest, manifest_path)
    }
}

fn move_path(from: &Path, to: &Path) -> Result<()> {
    if fs::rename(from, to).is_ok() {
        return Ok(());
    }
    // Different file system: fall back to copy for plain files.
    if from.is_file() {
        fs::copy(from, to).map_err(|e| io_err(to, e, "cannot write"))?;
        return Ok(());
    }
    Err(CliError::new(
        Kind::Io,
        anyhow::anyhow!("cannot move {} to {}", from.display(), to.display()),
    ))
}

/// `model.tmgp` → `model.run.json`.
pub fn manifest_beside(path: &Path) -> PathBuf {
    path.with_extension("run.json")
}
