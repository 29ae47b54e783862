//! Persistence: datasets, checkpoints and run configuration.

pub mod checkpoint;
pub mod dataset;
pub mod run_config;

use std::fs;
use std::io::Write;
use std::path::Path;

use crate::error::{Result, SitError};

/// Writes `bytes` to a sibling temp file and renames it over `path`.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| SitError::io(dir, e))?;
    }
    let mut tmp = path.as_os_str().to_owned();
    tmp.push(".tmp");
    let tmp = Path::new(&tmp);
    let mut f = fs::File::create(tmp).map_err(|e| SitError::io(tmp, e))?;
    f.write_all(bytes).map_err(|e| SitError::io(tmp, e))?;
    f.sync_all().map_err(|e| SitError::io(tmp, e))?;
    drop(f);
    fs::rename(tmp, path).map_err(|e| SitError::io(path, e))
}

pub fn read_file(path: &Path) -> Result<Vec<u8>> {
    fs::read(path).map_err(|e| SitError::io(path, e))
}
