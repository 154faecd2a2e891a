//! Append-only, human-readable persistence.
//!
//! ```text
//! <root>/
//!   experiments/<experiment_id>/<session_id>.samples.jsonl
//!   experiments/<experiment_id>/<session_id>.meta.json
//!   standalone/<plug_id>/<YYYY-MM-DD>.samples.jsonl
//!   baselines/<plug_id>.json
//!   locks/<plug_id>.lock
//!   events.log
//! ```
//!
//! Sample files are only ever appended to. Meta and baseline files are
//! replaced atomically by writing a temporary file and renaming it.

mod catalog;
mod lock;
mod stream;

use std::fs;
use std::io::{self, Write};
use std::path::{Path, PathBuf};

use chrono::{DateTime, NaiveDate, Utc};
use thiserror::Error;

use crate::model::{BaselineStats, ExperimentId, ExperimentSession, PlugId, SessionId};

pub use catalog::{list_experiments, Catalog, ExperimentEntry, SessionEntry, SessionStatus};
pub use lock::PlugLock;
pub use stream::{parse_stream, read_stream, StandaloneStream, StreamRead, StreamWriter};

#[derive(Debug, Error)]
pub enum StorageError {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: io::Error,
    },
    #[error("{path}:{line}: corrupt record: {message}")]
    Corrupt {
        path: PathBuf,
        line: usize,
        message: String,
    },
    #[error("plug {0} is busy: another logger holds its stream")]
    Busy(PlugId),
    #[error("{0} not found")]
    NotFound(String),
}

impl StorageError {
    pub(crate) fn io(path: &Path, source: io::Error) -> Self {
        StorageError::Io {
            path: path.to_owned(),
            source,
        }
    }
}

pub type Result<T, E = StorageError> = std::result::Result<T, E>;

/// Paths inside a logs root.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Layout {
    root: PathBuf,
}

impl Layout {
    pub fn new(root: impl Into<PathBuf>) -> Self {
        Layout { root: root.into() }
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    pub fn experiments_dir(&self) -> PathBuf {
        self.root.join("experiments")
    }

    pub fn experiment_dir(&self, exp: &ExperimentId) -> PathBuf {
        self.experiments_dir().join(exp.as_str())
    }

    pub fn session_samples(&self, exp: &ExperimentId, session: &SessionId) -> PathBuf {
        self.experiment_dir(exp)
            .join(format!("{session}.samples.jsonl"))
    }

    pub fn session_meta(&self, exp: &ExperimentId, session: &SessionId) -> PathBuf {
        self.experiment_dir(exp).join(format!("{session}.meta.json"))
    }

    pub fn standalone_dir(&self, plug: &PlugId) -> PathBuf {
        self.root.join("standalone").join(plug.as_str())
    }

    pub fn standalone_file(&self, plug: &PlugId, day: NaiveDate) -> PathBuf {
        self.standalone_dir(plug)
            .join(format!("{}.samples.jsonl", day.format("%Y-%m-%d")))
    }

    pub fn baseline(&self, plug: &PlugId) -> PathBuf {
        self.root.join("baselines").join(format!("{plug}.json"))
    }

    pub fn lock_file(&self, plug: &PlugId) -> PathBuf {
        self.root.join("locks").join(format!("{plug}.lock"))
    }

    pub fn events_log(&self) -> PathBuf {
        self.root.join("events.log")
    }

    /// Plugs that have a standalone stream directory.
    pub fn standalone_plugs(&self) -> Vec<PlugId> {
        let mut out: Vec<PlugId> = fs::read_dir(self.root.join("standalone"))
            .into_iter()
            .flatten()
            .flatten()
            .filter_map(|e| e.file_name().to_str().and_then(|s| PlugId::new(s).ok()))
            .collect();
        out.sort();
        out
    }
}

/// UTC calendar day of an epoch-millisecond timestamp.
pub fn utc_day(ts_ms: i64) -> NaiveDate {
    DateTime::<Utc>::from_timestamp_millis(ts_ms)
        .unwrap_or_default()
        .date_naive()
}

/// Replaces `path` with `bytes` so readers see either the old or the new
/// content, never a mix.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let dir = path.parent().unwrap_or(Path::new("."));
    fs::create_dir_all(dir).map_err(|e| StorageError::io(dir, e))?;
    let mut tmp_name = path.file_name().unwrap_or_default().to_owned();
    tmp_name.push(".tmp");
    let tmp = dir.join(tmp_name);
    let write = || -> io::Result<()> {
        let mut f = fs::File::create(&tmp)?;
        f.write_all(bytes)?;
        f.sync_all()?;
        fs::rename(&tmp, path)
    };
    write().map_err(|e| StorageError::io(path, e))
}

pub fn write_meta(layout: &Layout, session: &ExperimentSession) -> Result<()> {
    let mut json = serde_json::to_vec_pretty(session).expect("session serializes");
    json.push(b'\n');
    write_atomic(
        &layout.session_meta(&session.experiment_id, &session.session_id),
        &json,
    )
}

pub fn read_meta(path: &Path) -> Result<ExperimentSession> {
    let bytes = fs::read(path).map_err(|e| StorageError::io(path, e))?;
    serde_json::from_slice(&bytes).map_err(|e| StorageError::Corrupt {
        path: path.to_owned(),
        line: e.line(),
        message: e.to_string(),
    })
}

pub fn save_baseline(layout: &Layout, baseline: &BaselineStats) -> Result<()> {
    let mut json = serde_json::to_vec_pretty(baseline).expect("baseline serializes");
    json.push(b'\n');
    write_atomic(&layout.baseline(&baseline.plug_id), &json)
}

pub fn load_baseline(layout: &Layout, plug: &PlugId) -> Result<Option<BaselineStats>> {
    let path = layout.baseline(plug);
    match fs::read(&path) {
        Ok(bytes) => serde_json::from_slice(&bytes)
            .map(Some)
            .map_err(|e| StorageError::Corrupt {
                path,
                line: e.line(),
                message: e.to_string(),
            }),
        Err(e) if e.kind() == io::ErrorKind::NotFound => Ok(None),
        Err(e) => Err(StorageError::io(&path, e)),
    }
}

/// Picks an unused session id derived from the start time, e.g.
/// `20240501-134502`, with a numeric suffix on collision.
pub fn new_session_id(layout: &Layout, exp: &ExperimentId, start_ts: i64) -> SessionId {
    let stamp = DateTime::<Utc>::from_timestamp_millis(start_ts)
        .unwrap_or_default()
        .format("%Y%m%d-%H%M%S")
        .to_string();
    let taken = |id: &SessionId| {
        layout.session_meta(exp, id).exists() || layout.session_samples(exp, id).exists()
    };
    let base = SessionId::new(stamp.clone()).expect("timestamp is a valid token");
    if !taken(&base) {
        return base;
    }
    (2..)
        .map(|n| SessionId::new(format!("{stamp}-{n}")).expect("valid token"))
        .find(|id| !taken(id))
        .expect("unbounded search")
}
