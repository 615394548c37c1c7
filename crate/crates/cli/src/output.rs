//! Per-command output directory with a content-hash manifest.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use sha2::{Digest, Sha256};

pub const MANIFEST: &str = "manifest.json";

pub struct OutDir {
    pub dir: PathBuf,
    hashes: BTreeMap<String, String>,
    quiet: bool,
}

impl OutDir {
    /// Creates `<root>/<command>/`, clearing files from a previous run.
    pub fn create(root: &Path, command: &str, quiet: bool) -> Result<OutDir> {
        let dir = root.join(command);
        if dir.exists() {
            std::fs::remove_dir_all(&dir).with_context(|| format!("clearing {}", dir.display()))?;
        }
        std::fs::create_dir_all(&dir).with_context(|| format!("creating {}", dir.display()))?;
        Ok(OutDir {
            dir,
            hashes: BTreeMap::new(),
            quiet,
        })
    }

    pub fn write(&mut self, name: &str, contents: impl AsRef<[u8]>) -> Result<()> {
        let bytes = contents.as_ref();
        let path = self.dir.join(name);
        std::fs::write(&path, bytes).with_context(|| format!("writing {}", path.display()))?;
        self.hashes.insert(name.to_string(), hex::encode(Sha256::digest(bytes)));
        Ok(())
    }

    pub fn json<T: serde::Serialize>(&mut self, name: &str, value: &T) -> Result<()> {
        let mut s = serde_json::to_string_pretty(value)?;
        s.push('\n');
        self.write(name, s)
    }

    pub fn say(&self, line: impl AsRef<str>) {
        if !self.quiet {
            println!("{}", line.as_ref());
        }
    }

    /// Writes the manifest and returns its path.
    pub fn finish(self) -> Result<PathBuf> {
        let path = self.dir.join(MANIFEST);
        let mut s = serde_json::to_string_pretty(&self.hashes)?;
        s.push('\n');
        std::fs::write(&path, s).with_context(|| format!("writing {}", path.display()))?;
        if !self.quiet {
            println!("wrote {} files to {}", self.hashes.len(), self.dir.display());
        }
        Ok(path)
    }
}
