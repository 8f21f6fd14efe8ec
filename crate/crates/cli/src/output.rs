//! Run-directory plumbing: atomic artifact writes, uniform hash stamping,
//! and cleanup when a command fails partway.
//!
//! Every artifact lands via write-temp-then-rename, so a crash never leaves
//! a half-written file, and a failed command removes everything it wrote.
//! Run directories are named `<timestamp>-<config hash>`; the timestamp
//! appears only in the directory name, never inside file contents, so a
//! rerun with the same configuration reproduces every byte.

use std::fs;
use std::path::{Path, PathBuf};

use rtprop_core::{Error, Result};

/// Artifact version stamped next to the config hash in every output.
pub const VERSION: &str = env!("CARGO_PKG_VERSION");

/// The `#` comment line prefixed to every CSV artifact.
pub fn csv_stamp(config_hash: &str) -> String {
    format!("config {config_hash}, rtprop {VERSION}")
}

/// Output directory for one command invocation.
pub struct RunDir {
    dir: PathBuf,
    /// Whether this invocation created the directory itself.
    created: bool,
    written: Vec<PathBuf>,
}

impl RunDir {
    /// Opens the explicit directory when given, otherwise creates
    /// `out_dir/<timestamp>-<hash>`, probing numeric suffixes if two runs
    /// share a second.
    pub fn create(out_dir: &Path, explicit: Option<&Path>, hash: &str) -> Result<RunDir> {
        if let Some(dir) = explicit {
            let created = !dir.exists();
            fs::create_dir_all(dir).map_err(|e| {
                Error::config(format!("cannot create run directory {}: {e}", dir.display()))
            })?;
            return Ok(RunDir { dir: dir.to_path_buf(), created, written: Vec::new() });
        }
        fs::create_dir_all(out_dir).map_err(|e| {
            Error::config(format!("cannot create output directory {}: {e}", out_dir.display()))
        })?;
        let stamp = chrono::Utc::now().format("%Y%m%dT%H%M%SZ");
        let base = format!("{stamp}-{hash}");
        for attempt in 0u32.. {
            let name = if attempt == 0 { base.clone() } else { format!("{base}-{attempt}") };
            let dir = out_dir.join(name);
            match fs::create_dir(&dir) {
                Ok(()) => return Ok(RunDir { dir, created: true, written: Vec::new() }),
                Err(e) if e.kind() == std::io::ErrorKind::AlreadyExists => continue,
                Err(e) => {
                    return Err(Error::config(format!(
                        "cannot create run directory {}: {e}",
                        dir.display()
                    )))
                }
            }
        }
        unreachable!("suffix probing terminates at the first free name");
    }

    pub fn dir(&self) -> &Path {
        &self.dir
    }

    /// Writes one artifact atomically: temp file in the same directory,
    /// then rename over the final name.
    pub fn write_bytes(&mut self, name: &str, bytes: &[u8]) -> Result<()> {
        let tmp = self.dir.join(format!(".{name}.tmp"));
        let dst = self.dir.join(name);
        fs::write(&tmp, bytes)?;
        fs::rename(&tmp, &dst).inspect_err(|_| {
            let _ = fs::remove_file(&tmp);
        })?;
        self.written.push(dst);
        Ok(())
    }

    /// Pretty JSON with a trailing newline.
    pub fn write_json<T: serde::Serialize>(&mut self, name: &str, value: &T) -> Result<()> {
        let mut bytes = serde_json::to_vec_pretty(value)?;
        bytes.push(b'\n');
        self.write_bytes(name, &bytes)
    }

    /// Removes everything this invocation wrote; used when a command fails
    /// after producing partial output. A pre-existing directory is kept,
    /// minus this run's files.
    pub fn discard(&mut self) {
        for path in self.written.drain(..) {
            let _ = fs::remove_file(path);
        }
        if self.created {
            let _ = fs::remove_dir(&self.dir);
        }
    }
}
