//! Outputs that appear all together or not at all. Each is written under a
//! hidden sibling name and renamed into place on [`Outputs::commit`];
//! dropping an uncommitted set removes whatever was written.

use anyhow::{bail, Context, Result};
use std::path::{Path, PathBuf};

#[derive(Debug, Default)]
pub struct Outputs {
    staged: Vec<(PathBuf, PathBuf)>,
    committed: bool,
}

fn partial_name(target: &Path) -> Result<PathBuf> {
    let name = target
        .file_name()
        .with_context(|| format!("{}: not a file path", target.display()))?;
    Ok(target.with_file_name(format!(".{}.partial", name.to_string_lossy())))
}

impl Outputs {
    pub fn new() -> Self {
        Self::default()
    }

    /// Where to write the file that will end up at `target`.
    pub fn file(&mut self, target: &Path) -> Result<PathBuf> {
        if let Some(dir) = target.parent().filter(|d| !d.as_os_str().is_empty()) {
            std::fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
        }
        let tmp = partial_name(target)?;
        self.staged.push((tmp.clone(), target.to_path_buf()));
        Ok(tmp)
    }

    /// A fresh directory that will end up at `target`, which must not exist
    /// yet.
    pub fn dir(&mut self, target: &Path) -> Result<PathBuf> {
        if target.exists() {
            bail!("{} already exists", target.display());
        }
        let tmp = partial_name(target)?;
        if tmp.exists() {
            std::fs::remove_dir_all(&tmp).with_context(|| format!("removing stale {}", tmp.display()))?;
        }
        std::fs::create_dir_all(&tmp).with_context(|| format!("creating {}", tmp.display()))?;
        self.staged.push((tmp.clone(), target.to_path_buf()));
        Ok(tmp)
    }

    pub fn commit(mut self) -> Result<()> {
        for (tmp, target) in &self.staged {
            std::fs::rename(tmp, target).with_context(|| format!("moving output into {}", target.display()))?;
        }
        self.committed = true;
        Ok(())
    }
}

impl Drop for Outputs {
    fn drop(&mut self) {
        if self.committed {
            return;
        }
        for (tmp, _) in &self.staged {
            if tmp.is_dir() {
                let _ = std::fs::remove_dir_all(tmp);
            } else {
                let _ = std::fs::remove_file(tmp);
            }
        }
    }
}
