//! Run directories: staged in a sibling temp directory and renamed into place
//! once complete, so a run directory either exists whole or not at all.

use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use serde::{Deserialize, Serialize};

use crate::Failure;

pub const CONFIG_FILE: &str = "config.toml";
pub const META_FILE: &str = "meta.json";
pub const LOG_FILE: &str = "log.csv";
pub const MODEL_FILE: &str = "model.json";
pub const BACKBONE_FILE: &str = "backbone.json";

/// Run metadata. Carries no timestamps so reruns stay byte-identical.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Meta {
    pub command: String,
    pub seed: u64,
    pub deterministic: bool,
    pub dataset_name: String,
    pub dataset_hash: String,
    pub tuning_mode: Option<String>,
    pub loss_mask: Option<String>,
    pub attack_mode: String,
    pub version: String,
}

impl Meta {
    pub fn read(dir: &Path) -> Result<Self> {
        let path = dir.join(META_FILE);
        let text = fs::read_to_string(&path).map_err(|e| Failure::data(format!("{}: {e}", path.display())))?;
        serde_json::from_str(&text).map_err(|e| Failure::data(format!("{}: {e}", path.display())).into())
    }
}

/// A run directory under construction.
pub struct Staging {
    tmp: PathBuf,
    dest: PathBuf,
    committed: bool,
}

impl Staging {
    pub fn new(dest: &Path) -> Result<Self> {
        if dest.exists() {
            return Err(Failure::config(format!("output directory {} already exists", dest.display())).into());
        }
        let name = dest
            .file_name()
            .ok_or_else(|| Failure::config(format!("invalid output directory {}", dest.display())))?
            .to_string_lossy()
            .into_owned();
        let parent = match dest.parent() {
            Some(p) if !p.as_os_str().is_empty() => p.to_path_buf(),
            _ => PathBuf::from("."),
        };
        fs::create_dir_all(&parent).with_context(|| format!("creating {}", parent.display()))?;
        let tmp = parent.join(format!(".{name}.partial-{}", std::process::id()));
        if tmp.exists() {
            fs::remove_dir_all(&tmp)?;
        }
        fs::create_dir(&tmp).with_context(|| format!("creating {}", tmp.display()))?;
        Ok(Self { tmp, dest: dest.to_path_buf(), committed: false })
    }

    pub fn path(&self, file: &str) -> PathBuf {
        self.tmp.join(file)
    }

    pub fn write(&self, file: &str, bytes: impl AsRef<[u8]>) -> Result<()> {
        fs::write(self.path(file), bytes).with_context(|| format!("writing {file}"))
    }

    pub fn write_json<T: Serialize>(&self, file: &str, value: &T) -> Result<()> {
        self.write(file, serde_json::to_string_pretty(value)? + "\n")
    }

    pub fn commit(mut self) -> Result<PathBuf> {
        fs::rename(&self.tmp, &self.dest).with_context(|| format!("moving run into {}", self.dest.display()))?;
        self.committed = true;
        Ok(self.dest.clone())
    }
}

impl Drop for Staging {
    fn drop(&mut self) {
        if !self.committed {
            let _ = fs::remove_dir_all(&self.tmp);
        }
    }
}

/// Writes a file by renaming a sibling temp file over it.
pub fn write_atomic(path: &Path, bytes: impl AsRef<[u8]>) -> Result<()> {
    let tmp = path.with_extension(format!("partial-{}", std::process::id()));
    fs::write(&tmp, bytes).with_context(|| format!("writing {}", tmp.display()))?;
    fs::rename(&tmp, path).with_context(|| format!("moving into {}", path.display()))
}
