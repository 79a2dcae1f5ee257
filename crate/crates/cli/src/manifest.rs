//! Per-directory manifest: every artifact with its SHA-256 and the names of
//! the inputs it was derived from.

use std::collections::HashSet;
use std::fs;
use std::path::{Path, PathBuf};

use headrank_core::model::checkpoint::sha256_hex;
use serde::{Deserialize, Serialize};

use crate::error::{CliError, CliResult};

pub const MANIFEST_FILE: &str = "manifest.json";
pub const MANIFEST_VERSION: u32 = 1;

/// A file from outside the directory, pinned by checksum.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ExternalInput {
    pub name: String,
    pub path: String,
    pub sha256: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ArtifactRecord {
    /// File name inside the directory.
    pub name: String,
    pub sha256: String,
    /// Names of external inputs or earlier artifacts.
    pub inputs: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Manifest {
    pub version: u32,
    pub command: String,
    pub inputs: Vec<ExternalInput>,
    pub artifacts: Vec<ArtifactRecord>,
}

impl Manifest {
    pub fn new(command: &str) -> Self {
        Self {
            version: MANIFEST_VERSION,
            command: command.to_string(),
            inputs: Vec::new(),
            artifacts: Vec::new(),
        }
    }

    pub fn to_json(&self) -> String {
        let mut s = serde_json::to_string_pretty(self).expect("manifest serializes");
        s.push('\n');
        s
    }

    pub fn from_json(text: &str, path: &Path) -> CliResult<Self> {
        serde_json::from_str(text).map_err(|e| CliError::Manifest {
            path: path.display().to_string(),
            reason: e.to_string(),
        })
    }

    pub fn load(dir: &Path) -> CliResult<Self> {
        let path = dir.join(MANIFEST_FILE);
        let text = fs::read_to_string(&path).map_err(|e| CliError::io(&path, e))?;
        Self::from_json(&text, &path)
    }

    pub fn artifact(&self, name: &str) -> Option<&ArtifactRecord> {
        self.artifacts.iter().find(|a| a.name == name)
    }

    fn known(&self, name: &str) -> bool {
        self.inputs.iter().any(|i| i.name == name) || self.artifact(name).is_some()
    }

    /// Structural checks only: unique names, inputs that resolve to external
    /// inputs or earlier artifacts (which makes the graph acyclic).
    pub fn check_structure(&self, path: &Path) -> CliResult<()> {
        let fail = |reason: String| CliError::Manifest {
            path: path.display().to_string(),
            reason,
        };
        if self.version != MANIFEST_VERSION {
            return Err(fail(format!("unsupported version {}", self.version)));
        }
        let mut seen: HashSet<&str> = HashSet::new();
        for i in &self.inputs {
            if !seen.insert(&i.name) {
                return Err(fail(format!("duplicate name {}", i.name)));
            }
        }
        for a in &self.artifacts {
            for input in &a.inputs {
                if !seen.contains(input.as_str()) {
                    let reason = if self.known(input) {
                        format!("{} depends on {input}, which is not upstream of it", a.name)
                    } else {
                        format!("{} depends on unknown {input}", a.name)
                    };
                    return Err(fail(reason));
                }
            }
            if !seen.insert(&a.name) {
                return Err(fail(format!("duplicate name {}", a.name)));
            }
        }
        Ok(())
    }
}

/// Refuses a file whose checksum disagrees with the manifest in its
/// directory, if there is one. Returns the file bytes and checksum.
pub fn read_verified(path: &Path) -> CliResult<(Vec<u8>, String)> {
    let bytes = fs::read(path).map_err(|e| CliError::io(path, e))?;
    let actual = sha256_hex(&bytes);
    let dir = path.parent().unwrap_or(Path::new("."));
    let dir = if dir.as_os_str().is_empty() { Path::new(".") } else { dir };
    if dir.join(MANIFEST_FILE).is_file() {
        let manifest = Manifest::load(dir)?;
        let name = path.file_name().map(|n| n.to_string_lossy().to_string()).unwrap_or_default();
        if let Some(record) = manifest.artifact(&name) {
            if record.sha256 != actual {
                return Err(CliError::Stale {
                    path: path.display().to_string(),
                    expected: record.sha256.clone(),
                    actual,
                });
            }
        }
    }
    Ok((bytes, actual))
}

/// Walks the manifest of `dir`: structure, every artifact's checksum and every
/// external input that still exists.
pub fn validate_dir(dir: &Path) -> CliResult<Manifest> {
    let manifest = Manifest::load(dir)?;
    manifest.check_structure(&dir.join(MANIFEST_FILE))?;
    for a in &manifest.artifacts {
        let path = dir.join(&a.name);
        let bytes = fs::read(&path).map_err(|e| CliError::io(&path, e))?;
        let actual = sha256_hex(&bytes);
        if actual != a.sha256 {
            return Err(CliError::Stale {
                path: path.display().to_string(),
                expected: a.sha256.clone(),
                actual,
            });
        }
    }
    for i in &manifest.inputs {
        let path = PathBuf::from(&i.path);
        let bytes = fs::read(&path).map_err(|e| CliError::io(&path, e))?;
        let actual = sha256_hex(&bytes);
        if actual != i.sha256 {
            return Err(CliError::Stale {
                path: i.path.clone(),
                expected: i.sha256.clone(),
                actual,
            });
        }
    }
    Ok(manifest)
}

/// Output directory being written by one command.
pub struct OutputDir {
    dir: PathBuf,
    manifest: Manifest,
}

impl OutputDir {
    pub fn create(dir: &Path, command: &str) -> CliResult<Self> {
        fs::create_dir_all(dir).map_err(|e| CliError::io(dir, e))?;
        Ok(Self {
            dir: dir.to_path_buf(),
            manifest: Manifest::new(command),
        })
    }

    pub fn path(&self) -> &Path {
        &self.dir
    }

    pub fn manifest(&self) -> &Manifest {
        &self.manifest
    }

    /// Reads an input file (refusing stale ones) and pins it in the manifest.
    pub fn input(&mut self, name: &str, path: &Path) -> CliResult<Vec<u8>> {
        let (bytes, sha256) = read_verified(path)?;
        self.manifest.inputs.push(ExternalInput {
            name: name.to_string(),
            path: path.display().to_string(),
            sha256,
        });
        Ok(bytes)
    }

    pub fn write(&mut self, name: &str, bytes: &[u8], inputs: &[&str]) -> CliResult<PathBuf> {
        for i in inputs {
            if !self.manifest.known(i) {
                return Err(CliError::Manifest {
                    path: self.dir.join(MANIFEST_FILE).display().to_string(),
                    reason: format!("{name} depends on unknown {i}"),
                });
            }
        }
        let path = self.dir.join(name);
        fs::write(&path, bytes).map_err(|e| CliError::io(&path, e))?;
        self.manifest.artifacts.push(ArtifactRecord {
            name: name.to_string(),
            sha256: sha256_hex(bytes),
            inputs: inputs.iter().map(|s| s.to_string()).collect(),
        });
        Ok(path)
    }

    pub fn finish(self) -> CliResult<Manifest> {
        let path = self.dir.join(MANIFEST_FILE);
        fs::write(&path, self.manifest.to_json()).map_err(|e| CliError::io(&path, e))?;
        Ok(self.manifest)
    }
}
