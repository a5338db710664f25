use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use serde::Serialize;

use crate::error::{Error, Result};

/// Output directory that only appears at its final path once every file
/// has been written. Dropping it without [`Staging::commit`] removes the
/// partial output.
pub struct Staging {
    tmp: PathBuf,
    target: PathBuf,
    force: bool,
    committed: bool,
}

fn is_nonempty_dir(path: &Path) -> bool {
    std::fs::read_dir(path).is_ok_and(|mut d| d.next().is_some())
}

impl Staging {
    pub fn new(target: &Path, force: bool) -> Result<Self> {
        if target.exists() && !target.is_dir() {
            return Err(Error::Input(format!("{} exists and is not a directory", target.display())));
        }
        if is_nonempty_dir(target) && !force {
            return Err(Error::Input(format!(
                "output directory {} is not empty (use --force to replace it)",
                target.display()
            )));
        }
        let name = target
            .file_name()
            .ok_or_else(|| Error::Input(format!("invalid output path {}", target.display())))?
            .to_string_lossy()
            .into_owned();
        let parent = match target.parent() {
            Some(p) if !p.as_os_str().is_empty() => p.to_path_buf(),
            _ => PathBuf::from("."),
        };
        std::fs::create_dir_all(&parent).map_err(|e| Error::io(&parent, e))?;
        let tmp = parent.join(format!(".{name}.tmp-{}", std::process::id()));
        if tmp.exists() {
            std::fs::remove_dir_all(&tmp).map_err(|e| Error::io(&tmp, e))?;
        }
        std::fs::create_dir(&tmp).map_err(|e| Error::io(&tmp, e))?;
        Ok(Staging {
            tmp,
            target: target.to_path_buf(),
            force,
            committed: false,
        })
    }

    pub fn path(&self) -> &Path {
        &self.tmp
    }

    pub fn file(&self, name: &str) -> PathBuf {
        self.tmp.join(name)
    }

    pub fn commit(mut self) -> Result<PathBuf> {
        if self.target.exists() {
            if is_nonempty_dir(&self.target) && !self.force {
                return Err(Error::Input(format!(
                    "output directory {} appeared while running",
                    self.target.display()
                )));
            }
            std::fs::remove_dir_all(&self.target).map_err(|e| Error::io(&self.target, e))?;
        }
        std::fs::rename(&self.tmp, &self.target).map_err(|e| Error::io(&self.target, e))?;
        self.committed = true;
        Ok(self.target.clone())
    }
}

impl Drop for Staging {
    fn drop(&mut self) {
        if !self.committed {
            let _ = std::fs::remove_dir_all(&self.tmp);
        }
    }
}

pub use crate::sampler::store::{finish, table_writer};

/// Writes serializable rows as a CSV table headed by the config hash.
pub fn write_rows<T: Serialize>(path: &Path, hash: &str, rows: &[T]) -> Result<()> {
    let mut w = table_writer(path, hash)?;
    for row in rows {
        w.serialize(row)?;
    }
    finish(w, path)
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let text = serde_json::to_string_pretty(value).expect("value serializes");
    std::fs::write(path, text + "\n").map_err(|e| Error::io(path, e))
}

pub fn write_text(path: &Path, hash: &str, body: &str) -> Result<()> {
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut out = BufWriter::new(file);
    writeln!(out, "# config_hash={hash}")
        .and_then(|_| out.write_all(body.as_bytes()))
        .and_then(|_| out.flush())
        .map_err(|e| Error::io(path, e))
}
