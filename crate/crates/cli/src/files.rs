//! Reading configs and writing outputs without leaving partial files behind.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use serde::de::DeserializeOwned;

use crate::error::{CliError, CliResult};

pub fn read_json<T: DeserializeOwned>(path: &Path) -> CliResult<T> {
    let text = fs::read_to_string(path).map_err(|e| CliError::io(path, e))?;
    serde_json::from_str(&text).map_err(|e| CliError::Config(format!("{}: {e}", path.display())))
}

/// Writes every file to a temporary sibling first and renames only once all
/// of them are complete. On error the temporaries are removed.
pub fn write_all_atomic(files: &[(PathBuf, String)]) -> CliResult<()> {
    let mut staged: Vec<(PathBuf, PathBuf)> = Vec::with_capacity(files.len());
    let result = (|| {
        for (path, contents) in files {
            if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
                fs::create_dir_all(dir).map_err(|e| CliError::io(dir, e))?;
            }
            let tmp = tmp_path(path);
            let mut f = fs::File::create(&tmp).map_err(|e| CliError::io(&tmp, e))?;
            staged.push((tmp.clone(), path.clone()));
            f.write_all(contents.as_bytes()).map_err(|e| CliError::io(&tmp, e))?;
            f.sync_all().map_err(|e| CliError::io(&tmp, e))?;
        }
        for (tmp, path) in &staged {
            fs::rename(tmp, path).map_err(|e| CliError::io(path, e))?;
        }
        Ok(())
    })();
    if result.is_err() {
        for (tmp, _) in &staged {
            let _ = fs::remove_file(tmp);
        }
    }
    result
}

fn tmp_path(path: &Path) -> PathBuf {
    let mut name = path.file_name().map(|n| n.to_os_string()).unwrap_or_default();
    name.push(".partial");
    path.with_file_name(name)
}
