use std::fs::{self, File, OpenOptions, TryLockError};
use std::io::{Read, Seek, SeekFrom, Write};
use std::path::PathBuf;
use std::time::Duration;

use serde::{Deserialize, Serialize};

use super::{Layout, Result, StorageError};
use crate::model::PlugId;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LockInfo {
    pub pid: u32,
    /// `<experiment_id>/<session_id>` of the session being written, if any.
    pub session: Option<String>,
}

/// Exclusive ownership of a plug's streams, held for the lifetime of a
/// logger. Backed by an OS advisory lock, so a killed process releases it.
#[derive(Debug)]
pub struct PlugLock {
    file: File,
    path: PathBuf,
}

impl PlugLock {
    pub fn acquire(layout: &Layout, plug: &PlugId) -> Result<Self> {
        let path = layout.lock_file(plug);
        if let Some(dir) = path.parent() {
            fs::create_dir_all(dir).map_err(|e| StorageError::io(dir, e))?;
        }
        let file = OpenOptions::new()
            .read(true)
            .write(true)
            .create(true)
            .truncate(false)
            .open(&path)
            .map_err(|e| StorageError::io(&path, e))?;
        // Readers probe with a brief shared lock; retry past them.
        for attempt in 0..10 {
            match file.try_lock() {
                Ok(()) => {
                    let mut lock = PlugLock { file, path };
                    lock.set_session(None)?;
                    return Ok(lock);
                }
                Err(TryLockError::WouldBlock) if attempt < 9 => {
                    std::thread::sleep(Duration::from_millis(20));
                }
                Err(TryLockError::WouldBlock) => break,
                Err(TryLockError::Error(e)) => return Err(StorageError::io(&path, e)),
            }
        }
        Err(StorageError::Busy(plug.clone()))
    }

    pub fn set_session(&mut self, session: Option<String>) -> Result<()> {
        let info = LockInfo {
            pid: std::process::id(),
            session,
        };
        let body = serde_json::to_vec(&info).expect("lock info serializes");
        let io = |e| StorageError::io(&self.path, e);
        self.file.set_len(0).map_err(io)?;
        self.file.seek(SeekFrom::Start(0)).map_err(io)?;
        self.file.write_all(&body).map_err(io)
    }

    /// Who holds the lock for `plug`, if anyone. Never creates files.
    pub fn probe(layout: &Layout, plug: &PlugId) -> Option<LockInfo> {
        let path = layout.lock_file(plug);
        let mut file = File::open(&path).ok()?;
        match file.try_lock_shared() {
            Ok(()) => None,
            Err(TryLockError::WouldBlock) => {
                let mut body = String::new();
                file.read_to_string(&mut body).ok()?;
                Some(serde_json::from_str(&body).unwrap_or(LockInfo {
                    pid: 0,
                    session: None,
                }))
            }
            Err(TryLockError::Error(_)) => None,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn second_acquire_is_busy_until_release() {
        let dir = tempfile::tempdir().unwrap();
        let layout = Layout::new(dir.path());
        let plug = PlugId::new("desk").unwrap();
        let mut lock = PlugLock::acquire(&layout, &plug).unwrap();
        assert!(matches!(
            PlugLock::acquire(&layout, &plug),
            Err(StorageError::Busy(_))
        ));
        lock.set_session(Some("e/s".into())).unwrap();
        let info = PlugLock::probe(&layout, &plug).unwrap();
        assert_eq!(info.session.as_deref(), Some("e/s"));
        assert_eq!(info.pid, std::process::id());
        drop(lock);
        assert!(PlugLock::probe(&layout, &plug).is_none());
        PlugLock::acquire(&layout, &plug).unwrap();
    }

    #[test]
    fn probe_without_file_is_none() {
        let dir = tempfile::tempdir().unwrap();
        let layout = Layout::new(dir.path());
        assert!(PlugLock::probe(&layout, &PlugId::new("x").unwrap()).is_none());
        assert!(!dir.path().join("locks").exists());
    }
}
