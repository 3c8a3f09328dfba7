use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use tempfile::NamedTempFile;

#[derive(Debug)]
pub struct UsageError(pub String);

impl std::fmt::Display for UsageError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for UsageError {}

pub fn usage(msg: impl Into<String>) -> anyhow::Error {
    UsageError(msg.into()).into()
}

pub fn require_input(path: &Path) -> Result<()> {
    if !path.is_file() {
        return Err(usage(format!("input file {} does not exist", path.display())));
    }
    Ok(())
}

fn parent_dir(path: &Path) -> PathBuf {
    match path.parent() {
        Some(p) if !p.as_os_str().is_empty() => p.to_path_buf(),
        _ => PathBuf::from("."),
    }
}

pub fn require_output(path: &Path) -> Result<()> {
    let dir = parent_dir(path);
    if !dir.is_dir() {
        return Err(usage(format!("output directory {} does not exist", dir.display())));
    }
    if path.is_dir() {
        return Err(usage(format!("output path {} is a directory", path.display())));
    }
    Ok(())
}

/// A file written next to its target and renamed into place by [`Staged::commit`].
pub struct Staged {
    file: NamedTempFile,
    target: PathBuf,
}

impl Staged {
    pub fn new(target: &Path, contents: &[u8]) -> Result<Self> {
        let mut file = NamedTempFile::new_in(parent_dir(target))
            .with_context(|| format!("creating temporary file for {}", target.display()))?;
        file.write_all(contents)?;
        file.as_file().sync_all()?;
        Ok(Self {
            file,
            target: target.to_path_buf(),
        })
    }

    pub fn commit(self) -> Result<()> {
        let target = self.target;
        self.file
            .persist(&target)
            .with_context(|| format!("replacing {}", target.display()))?;
        Ok(())
    }
}

pub fn write_atomic(target: &Path, contents: &[u8]) -> Result<()> {
    Staged::new(target, contents)?.commit()
}

pub fn read_text(path: &Path) -> Result<String> {
    fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))
}
