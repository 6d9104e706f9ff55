use std::fs::OpenOptions;
use std::io::Write;
use std::path::{Path, PathBuf};

use adaptgen::{Error, Result};

const LOCK_FILE: &str = ".lock";

/// Exclusive ownership of a run directory for the life of the value.
pub struct RunLock {
    path: PathBuf,
}

impl RunLock {
    pub fn acquire(dir: &Path) -> Result<Self> {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let path = dir.join(LOCK_FILE);
        for _ in 0..2 {
            match OpenOptions::new().write(true).create_new(true).open(&path) {
                Ok(mut f) => {
                    write!(f, "{}", std::process::id()).map_err(|e| Error::io(&path, e))?;
                    return Ok(Self { path });
                }
                Err(e) if e.kind() == std::io::ErrorKind::AlreadyExists => {
                    let owner = std::fs::read_to_string(&path).unwrap_or_default();
                    if is_stale(owner.trim()) {
                        log::warn!("removing stale lock {} (pid {})", path.display(), owner.trim());
                        std::fs::remove_file(&path).map_err(|e| Error::io(&path, e))?;
                        continue;
                    }
                    return Err(Error::Config(format!(
                        "run directory {} is locked by pid {}; remove {} if that process is gone",
                        dir.display(),
                        owner.trim(),
                        path.display()
                    )));
                }
                Err(e) => return Err(Error::io(&path, e)),
            }
        }
        Err(Error::Config(format!("could not acquire {}", path.display())))
    }
}

/// A lock is stale when its pid is unreadable or, where `/proc` exists, names
/// no live process.
fn is_stale(owner: &str) -> bool {
    let Ok(pid) = owner.parse::<u32>() else {
        return true;
    };
    let proc_root = Path::new("/proc");
    proc_root.is_dir() && !proc_root.join(pid.to_string()).exists()
}

impl Drop for RunLock {
    fn drop(&mut self) {
        let _ = std::fs::remove_file(&self.path);
    }
}
