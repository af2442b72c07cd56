//! Run-directory manifest: content digests of every deterministic output
//! plus the argv needed to reproduce the run. `verify-run` re-executes the
//! stored command into a scratch directory and compares digests.

use std::collections::BTreeMap;
use std::path::Path;

use anyhow::{bail, Context, Result};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

pub const MANIFEST_NAME: &str = "manifest.json";
pub const RESOLVED_CONFIG_NAME: &str = "config.resolved.toml";

/// Placeholder in the stored argv for the resolved config path; expanded
/// against whichever run directory is being replayed.
pub const CONFIG_PLACEHOLDER: &str = "@resolved";

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Manifest {
    /// Subcommand and arguments, without the output directory.
    pub command: Vec<String>,
    /// Seeds the run depended on.
    pub seeds: Vec<u64>,
    /// Deterministic outputs: relative name -> sha256.
    pub files: BTreeMap<String, String>,
    /// Outputs excluded from digest comparison (wall-clock timings).
    pub volatile: Vec<String>,
}

pub fn sha256_hex(path: &Path) -> Result<String> {
    let bytes =
        std::fs::read(path).with_context(|| format!("cannot read {}", path.display()))?;
    let digest = Sha256::digest(&bytes);
    Ok(digest.iter().map(|b| format!("{b:02x}")).collect())
}

pub fn sha256_hex_bytes(bytes: &[u8]) -> String {
    Sha256::digest(bytes).iter().map(|b| format!("{b:02x}")).collect()
}

/// An output file a command produced, by name relative to the run dir.
#[derive(Debug, Clone)]
pub struct OutputFile {
    pub name: String,
    pub volatile: bool,
}

impl OutputFile {
    pub fn stable(name: impl Into<String>) -> Self {
        Self { name: name.into(), volatile: false }
    }

    pub fn volatile(name: impl Into<String>) -> Self {
        Self { name: name.into(), volatile: true }
    }
}

/// Digest the declared outputs and write the manifest into `out_dir`.
pub fn write_manifest(
    out_dir: &Path,
    command: Vec<String>,
    seeds: Vec<u64>,
    outputs: &[OutputFile],
) -> Result<Manifest> {
    let mut files = BTreeMap::new();
    let mut volatile = Vec::new();
    for out in outputs {
        if out.volatile {
            volatile.push(out.name.clone());
        } else {
            files.insert(out.name.clone(), sha256_hex(&out_dir.join(&out.name))?);
        }
    }
    let manifest = Manifest { command, seeds, files, volatile };
    let json = serde_json::to_string_pretty(&manifest)?;
    std::fs::write(out_dir.join(MANIFEST_NAME), json)?;
    Ok(manifest)
}

pub fn load_manifest(run_dir: &Path) -> Result<Manifest> {
    let path = run_dir.join(MANIFEST_NAME);
    let text = std::fs::read_to_string(&path)
        .with_context(|| format!("cannot read {}", path.display()))?;
    Ok(serde_json::from_str(&text)?)
}

/// Compare the digests recorded in `manifest` against the files found in
/// `replay_dir`. Returns the mismatched names.
pub fn compare_outputs(manifest: &Manifest, replay_dir: &Path) -> Result<Vec<String>> {
    let mut mismatched = Vec::new();
    for (name, digest) in &manifest.files {
        let replayed = replay_dir.join(name);
        if !replayed.exists() {
            mismatched.push(format!("{name} (missing)"));
            continue;
        }
        if &sha256_hex(&replayed)? != digest {
            mismatched.push(name.clone());
        }
    }
    Ok(mismatched)
}

/// Expand the stored argv against a run directory, substituting the
/// resolved-config placeholder.
pub fn replay_argv(manifest: &Manifest, run_dir: &Path, replay_out: &Path) -> Result<Vec<String>> {
    if manifest.command.is_empty() {
        bail!("manifest has an empty command");
    }
    let mut argv = Vec::with_capacity(manifest.command.len() + 2);
    for arg in &manifest.command {
        if arg == CONFIG_PLACEHOLDER {
            argv.push(run_dir.join(RESOLVED_CONFIG_NAME).to_string_lossy().into_owned());
        } else {
            argv.push(arg.clone());
        }
    }
    argv.push("--out".into());
    argv.push(replay_out.to_string_lossy().into_owned());
    Ok(argv)
}
