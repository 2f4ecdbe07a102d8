use std::ffi::OsString;
use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{Context, Result};

/// Files held in memory until the command has fully succeeded, then written
/// together. A failed write removes everything written so far.
#[derive(Default)]
pub struct Outputs {
    files: Vec<(PathBuf, Vec<u8>)>,
}

impl Outputs {
    pub fn add(&mut self, path: impl Into<PathBuf>, bytes: impl Into<Vec<u8>>) {
        self.files.push((path.into(), bytes.into()));
    }

    pub fn commit(self) -> Result<()> {
        let mut staged: Vec<(PathBuf, PathBuf)> = Vec::new();
        let cleanup = |staged: &[(PathBuf, PathBuf)]| {
            for (tmp, _) in staged {
                let _ = fs::remove_file(tmp);
            }
        };
        for (path, bytes) in &self.files {
            let tmp = with_suffix(path, ".partial");
            if let Err(e) = fs::write(&tmp, bytes) {
                let _ = fs::remove_file(&tmp);
                cleanup(&staged);
                return Err(e).with_context(|| format!("writing {}", path.display()));
            }
            staged.push((tmp, path.clone()));
        }
        for (i, (tmp, path)) in staged.iter().enumerate() {
            if let Err(e) = fs::rename(tmp, path) {
                cleanup(&staged[i..]);
                for (_, done) in &staged[..i] {
                    let _ = fs::remove_file(done);
                }
                return Err(e).with_context(|| format!("writing {}", path.display()));
            }
        }
        Ok(())
    }
}

/// `path` with `suffix` appended to its file name.
pub fn with_suffix(path: &Path, suffix: &str) -> PathBuf {
    let mut name: OsString = path.file_name().map(Into::into).unwrap_or_default();
    name.push(suffix);
    path.with_file_name(name)
}

/// Where the resolved configuration of a run writing `output` goes.
pub fn config_path(output: &Path) -> PathBuf {
    with_suffix(output, ".run.toml")
}
