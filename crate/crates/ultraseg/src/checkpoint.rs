//! `.useg` checkpoint files.

use std::fs;
use std::io::Write;
use std::path::Path;

use ultraseg_core::zoo::{from_bytes, to_bytes, Model};

use crate::error::{Error, Result};

/// Writes through a temporary sibling and renames, so a failed save never
/// leaves a truncated checkpoint behind.
pub fn save_checkpoint(path: &Path, model: &Model) -> Result<()> {
    let tmp = path.with_extension("useg.partial");
    let write = || -> std::io::Result<()> {
        let mut f = fs::File::create(&tmp)?;
        f.write_all(&to_bytes(model))?;
        f.sync_all()?;
        fs::rename(&tmp, path)
    };
    write().map_err(|e| {
        let _ = fs::remove_file(&tmp);
        Error::io(path, e)
    })
}

pub fn load_checkpoint(path: &Path) -> Result<Model> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    Ok(from_bytes(&bytes)?)
}
