use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use svo_lc_core::{Error, Result};

use crate::args::{Command, OutputArgs};

pub const MANIFEST_SCHEMA: &str = "svo-lc/manifest@1";
pub const MANIFEST_FILE: &str = "manifest.json";

/// Record of one run, sufficient to reproduce its outputs with `replay`.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RunManifest {
    pub schema: String,
    pub subcommand: String,
    pub tool_version: String,
    pub config: Option<PathBuf>,
    pub seed: Option<u64>,
    pub inputs: Vec<PathBuf>,
    pub outputs: Vec<String>,
    pub duration_s: f64,
    /// Fully resolved arguments.
    pub command: Command,
}

impl RunManifest {
    pub fn load(path: &Path) -> Result<Self> {
        let m: RunManifest = serde_json::from_str(&read_text(path)?)?;
        if m.schema != MANIFEST_SCHEMA {
            return Err(Error::Schema(format!(
                "expected schema {MANIFEST_SCHEMA:?}, found {:?}",
                m.schema
            )));
        }
        Ok(m)
    }
}

pub fn read_text(path: &Path) -> Result<String> {
    fs::read_to_string(path).map_err(|source| Error::Io {
        path: path.to_path_buf(),
        source,
    })
}

/// Output directory guarded against accidental overwrites.
pub struct OutputDir {
    dir: PathBuf,
}

impl OutputDir {
    /// Fails if any of `names` (or the manifest) already exists, unless forced.
    pub fn prepare(args: &OutputArgs, names: &[&str]) -> Result<Self> {
        let dir = args.out.clone();
        if !args.force {
            for name in names.iter().copied().chain([MANIFEST_FILE]) {
                let p = dir.join(name);
                if p.exists() {
                    return Err(Error::Config(format!(
                        "{} already exists (pass --force to overwrite)",
                        p.display()
                    )));
                }
            }
        }
        fs::create_dir_all(&dir).map_err(|source| Error::Io {
            path: dir.clone(),
            source,
        })?;
        Ok(Self { dir })
    }

    pub fn path(&self, name: &str) -> PathBuf {
        self.dir.join(name)
    }

    pub fn write(&self, name: &str, contents: &[u8]) -> Result<()> {
        let p = self.path(name);
        fs::write(&p, contents).map_err(|source| Error::Io { path: p, source })
    }
}
