use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

pub const MANIFEST_FILE: &str = "manifest.json";

/// Everything needed to reproduce a run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub tool: String,
    pub version: String,
    pub command: String,
    /// Arguments after the program name, as given.
    pub argv: Vec<String>,
    /// Directory relative input paths were resolved against.
    pub cwd: PathBuf,
    pub seed: u64,
    pub generator: String,
    /// Description of each attached model.
    pub backends: BTreeMap<String, String>,
    /// Resolved settings of the command.
    pub settings: serde_json::Value,
    /// SHA-256 of every input file, keyed by path.
    pub inputs: BTreeMap<String, String>,
    /// SHA-256 of every output file, keyed by path relative to the run directory.
    pub outputs: BTreeMap<String, String>,
}

pub fn digest_file(path: &Path) -> anyhow::Result<String> {
    let bytes = std::fs::read(path).with_context(|| format!("reading {}", path.display()))?;
    Ok(format!("{:x}", Sha256::digest(&bytes)))
}

/// Files below `root`, sorted, as paths relative to `root`.
pub(crate) fn list_files(root: &Path) -> anyhow::Result<Vec<PathBuf>> {
    let mut out = Vec::new();
    let mut stack = vec![PathBuf::new()];
    while let Some(rel) = stack.pop() {
        let dir = root.join(&rel);
        for entry in std::fs::read_dir(&dir).with_context(|| format!("listing {}", dir.display()))? {
            let entry = entry?;
            let rel = rel.join(entry.file_name());
            if entry.file_type()?.is_dir() {
                stack.push(rel);
            } else {
                out.push(rel);
            }
        }
    }
    out.sort();
    Ok(out)
}

/// Digests of `path` itself or, for a folder, of every file below it.
pub(crate) fn digest_inputs(paths: &[PathBuf]) -> anyhow::Result<BTreeMap<String, String>> {
    let mut out = BTreeMap::new();
    for p in paths {
        if p.is_dir() {
            for rel in list_files(p)? {
                let full = p.join(rel);
                out.insert(full.display().to_string(), digest_file(&full)?);
            }
        } else {
            out.insert(p.display().to_string(), digest_file(p)?);
        }
    }
    Ok(out)
}

impl Manifest {
    pub fn load(path: &Path) -> anyhow::Result<Self> {
        let text = std::fs::read_to_string(path).with_context(|| format!("reading manifest {}", path.display()))?;
        serde_json::from_str(&text).with_context(|| format!("parsing manifest {}", path.display()))
    }

    pub fn save(&self, path: &Path) -> anyhow::Result<()> {
        std::fs::write(path, serde_json::to_string_pretty(self)? + "\n")
            .with_context(|| format!("writing {}", path.display()))
    }

    /// Digests every output file in `dir`, except the manifest itself.
    pub(crate) fn digest_outputs(dir: &Path) -> anyhow::Result<BTreeMap<String, String>> {
        let mut out = BTreeMap::new();
        for rel in list_files(dir)? {
            if rel == Path::new(MANIFEST_FILE) {
                continue;
            }
            let key = rel.components().map(|c| c.as_os_str().to_string_lossy()).collect::<Vec<_>>().join("/");
            out.insert(key, digest_file(&dir.join(&rel))?);
        }
        Ok(out)
    }

    /// Errors if any recorded input changed or is missing.
    pub(crate) fn check_inputs(&self, rebased: &[PathBuf]) -> anyhow::Result<()> {
        let now = digest_inputs(rebased)?;
        let recorded: Vec<&String> = self.inputs.values().collect();
        let current: Vec<&String> = now.values().collect();
        if recorded != current {
            bail!("the inputs of this run changed since it was recorded");
        }
        Ok(())
    }

    /// Human-readable differences between two output sets.
    pub fn output_differences(&self, other: &Manifest) -> Vec<String> {
        let mut diffs = Vec::new();
        for (name, digest) in &self.outputs {
            match other.outputs.get(name) {
                None => diffs.push(format!("{name}: missing from the re-run")),
                Some(d) if d != digest => diffs.push(format!("{name}: contents differ")),
                Some(_) => {}
            }
        }
        for name in other.outputs.keys() {
            if !self.outputs.contains_key(name) {
                diffs.push(format!("{name}: not in the record"));
            }
        }
        diffs
    }
}
