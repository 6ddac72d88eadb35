//! Run manifests: the exact arguments of a command plus digests of the files
//! it read and wrote, enough to re-run it and confirm the same bytes come out.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use fnm_core::io::{load_json, save_json};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

pub const MANIFEST_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunManifest {
    pub schema_version: u32,
    pub tool_version: String,
    /// Arguments after the program name, without `--manifest`.
    pub args: Vec<String>,
    /// SHA-256 of every input, keyed by the path as given.
    pub inputs: BTreeMap<String, String>,
    pub outputs: BTreeMap<String, String>,
}

/// Files a command touched, in the order it touched them.
#[derive(Debug, Default, Clone)]
pub struct Touched {
    pub inputs: Vec<PathBuf>,
    pub outputs: Vec<PathBuf>,
}

impl Touched {
    pub fn read(&mut self, p: &Path) {
        self.inputs.push(p.to_path_buf());
    }

    pub fn wrote(&mut self, p: &Path) {
        self.outputs.push(p.to_path_buf());
    }
}

pub fn digest(path: &Path) -> Result<String> {
    let bytes = std::fs::read(path).with_context(|| format!("cannot read {}", path.display()))?;
    Ok(hex::encode(Sha256::digest(&bytes)))
}

fn digests(paths: &[PathBuf]) -> Result<BTreeMap<String, String>> {
    paths
        .iter()
        .map(|p| Ok((p.display().to_string(), digest(p)?)))
        .collect()
}

impl RunManifest {
    pub fn record(args: Vec<String>, touched: &Touched) -> Result<Self> {
        Ok(Self {
            schema_version: MANIFEST_VERSION,
            tool_version: env!("CARGO_PKG_VERSION").to_string(),
            args,
            inputs: digests(&touched.inputs)?,
            outputs: digests(&touched.outputs)?,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        Ok(save_json(self, path)?)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let m: RunManifest = load_json(path)?;
        if m.schema_version != MANIFEST_VERSION {
            bail!(fnm_core::Error::SchemaVersion {
                found: m.schema_version,
                expected: MANIFEST_VERSION,
            });
        }
        Ok(m)
    }

    /// Inputs whose current content differs from the recorded digest.
    pub fn changed_inputs(&self) -> Result<Vec<String>> {
        let mut changed = Vec::new();
        for (p, d) in &self.inputs {
            if digest(Path::new(p))? != *d {
                changed.push(p.clone());
            }
        }
        Ok(changed)
    }

    /// Outputs whose current content differs from the recorded digest.
    pub fn differing_outputs(&self) -> Result<Vec<String>> {
        let mut differ = Vec::new();
        for (p, d) in &self.outputs {
            if digest(Path::new(p))? != *d {
                differ.push(p.clone());
            }
        }
        Ok(differ)
    }
}

/// Removes `--manifest <path>` and `--manifest=<path>` from an argument list.
pub fn strip_manifest_flag(args: &[String]) -> Vec<String> {
    let mut out = Vec::with_capacity(args.len());
    let mut skip = false;
    for a in args {
        if skip {
            skip = false;
        } else if a == "--manifest" {
            skip = true;
        } else if !a.starts_with("--manifest=") {
            out.push(a.clone());
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn manifest_flag_is_removed_in_both_spellings() {
        let args: Vec<String> = ["eval", "--manifest", "m.json", "--iou", "0.5", "--manifest=x"]
            .iter()
            .map(|s| s.to_string())
            .collect();
        assert_eq!(strip_manifest_flag(&args), ["eval", "--iou", "0.5"]);
    }
}
