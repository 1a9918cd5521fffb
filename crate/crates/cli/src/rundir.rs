use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use serde_json::Value;

use crate::config::{sha256_hex, write_json};
use crate::{CliError, Result};

pub const MANIFEST_FILE: &str = "manifest.json";

fn is_empty_dir(dir: &Path) -> Result<bool> {
    Ok(fs::read_dir(dir).map_err(|e| CliError::io(dir, e))?.next().is_none())
}

/// Makes `dir` ready for a fresh run.
///
/// A missing or empty directory is fine. A non-empty one is refused unless
/// `force` is set, and even then it is only cleared if it carries a manifest,
/// i.e. an earlier run wrote it.
pub fn prepare_out(dir: &Path, force: bool) -> Result<()> {
    if dir.exists() && !is_empty_dir(dir)? {
        if !force {
            return Err(CliError::Config(format!(
                "output directory {} is not empty; pass --force to overwrite it",
                dir.display()
            )));
        }
        if !dir.join(MANIFEST_FILE).exists() {
            return Err(CliError::Config(format!(
                "refusing to clear {}: it has no {MANIFEST_FILE}, so it is not a run directory",
                dir.display()
            )));
        }
        fs::remove_dir_all(dir).map_err(|e| CliError::io(dir, e))?;
    }
    fs::create_dir_all(dir).map_err(|e| CliError::io(dir, e))
}

/// SHA-256 of each named file under `dir`, skipping ones that do not exist.
pub fn file_hashes(dir: &Path, names: &[String]) -> Result<BTreeMap<String, String>> {
    let mut out = BTreeMap::new();
    for n in names {
        let p = dir.join(n);
        if p.exists() {
            let bytes = fs::read(&p).map_err(|e| CliError::io(&p, e))?;
            out.insert(n.clone(), sha256_hex(&bytes));
        }
    }
    Ok(out)
}

pub fn write_manifest(dir: &Path, manifest: &Value) -> Result<()> {
    write_json(&dir.join(MANIFEST_FILE), manifest)
}
