use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use hrmark::Error;
use serde::Serialize;

/// Output directory filled under a temporary name and renamed into place on
/// success, so a failed run leaves nothing behind.
pub struct OutDir {
    target: PathBuf,
    staging: PathBuf,
    done: bool,
}

impl OutDir {
    pub fn create(target: &Path) -> Result<Self> {
        if target.exists() {
            let empty = target.is_dir() && fs::read_dir(target).map(|mut d| d.next().is_none()).unwrap_or(false);
            if !empty {
                return Err(Error::Usage(format!(
                    "output directory {} already exists and is not empty",
                    target.display()
                ))
                .into());
            }
        }
        let name = target
            .file_name()
            .ok_or_else(|| Error::Usage(format!("invalid output directory {}", target.display())))?
            .to_string_lossy()
            .into_owned();
        let parent = match target.parent() {
            Some(p) if !p.as_os_str().is_empty() => p.to_path_buf(),
            _ => PathBuf::from("."),
        };
        fs::create_dir_all(&parent).with_context(|| format!("creating {}", parent.display()))?;
        let staging = parent.join(format!(".{name}.partial-{}", std::process::id()));
        if staging.exists() {
            fs::remove_dir_all(&staging).ok();
        }
        fs::create_dir(&staging).with_context(|| format!("creating {}", staging.display()))?;
        Ok(OutDir {
            target: target.to_path_buf(),
            staging,
            done: false,
        })
    }

    pub fn path(&self, file: &str) -> PathBuf {
        self.staging.join(file)
    }

    pub fn write(&self, file: &str, contents: impl AsRef<[u8]>) -> Result<()> {
        let p = self.path(file);
        fs::write(&p, contents).with_context(|| format!("writing {}", p.display()))
    }

    pub fn write_json<S: Serialize>(&self, file: &str, value: &S) -> Result<()> {
        self.write(file, serde_json::to_string_pretty(value)? + "\n")
    }

    pub fn finish(mut self) -> Result<PathBuf> {
        if self.target.exists() {
            fs::remove_dir(&self.target)
                .with_context(|| format!("replacing empty {}", self.target.display()))?;
        }
        fs::rename(&self.staging, &self.target)
            .with_context(|| format!("moving results to {}", self.target.display()))?;
        self.done = true;
        Ok(self.target.clone())
    }
}

impl Drop for OutDir {
    fn drop(&mut self) {
        if !self.done {
            fs::remove_dir_all(&self.staging).ok();
        }
    }
}
