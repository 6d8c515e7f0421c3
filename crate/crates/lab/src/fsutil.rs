use std::fs;
use std::io::Write;
use std::path::Path;

use sha2::{Digest, Sha256};

use crate::error::{LabError, Result};

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

/// Writes `bytes` to a sibling temporary file, syncs it, then renames it
/// over `path`, so readers see either the old or the new file.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(parent).map_err(LabError::io(parent))?;
    }
    let mut tmp_name = path.as_os_str().to_owned();
    tmp_name.push(format!(".tmp{}", std::process::id()));
    let tmp = Path::new(&tmp_name);
    let mut f = fs::File::create(tmp).map_err(LabError::io(tmp))?;
    f.write_all(bytes).map_err(LabError::io(tmp))?;
    f.sync_all().map_err(LabError::io(tmp))?;
    drop(f);
    fs::rename(tmp, path).map_err(LabError::io(path))
}
