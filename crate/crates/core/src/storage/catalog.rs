use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::{read_meta, stream::parse_stream, Layout, PlugLock, Result, StorageError};
use crate::model::{ExperimentId, PlugId, SessionId};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SessionStatus {
    Closed,
    /// No end time and a live logger holds the session.
    Running,
    /// No end time and nobody is writing it (crashed logger).
    Unclosed,
    /// Samples without a meta file; bounds inferred from the samples.
    Orphaned,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SessionEntry {
    pub session_id: SessionId,
    pub plug_id: Option<PlugId>,
    pub start_ts: Option<i64>,
    pub end_ts: Option<i64>,
    pub interval_ms: Option<u64>,
    pub sample_count: usize,
    pub status: SessionStatus,
    #[serde(default, skip_serializing_if = "String::is_empty")]
    pub notes: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentEntry {
    pub experiment_id: ExperimentId,
    pub sessions: Vec<SessionEntry>,
}

impl ExperimentEntry {
    fn latest_start(&self) -> Option<i64> {
        self.sessions.iter().filter_map(|s| s.start_ts).max()
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct Catalog {
    pub experiments: Vec<ExperimentEntry>,
}

impl Catalog {
    pub fn experiment(&self, id: &str) -> Option<&ExperimentEntry> {
        self.experiments.iter().find(|e| e.experiment_id.as_str() == id)
    }

    pub fn session(&self, exp: &str, session: &str) -> Option<&SessionEntry> {
        self.experiment(exp)?
            .sessions
            .iter()
            .find(|s| s.session_id.as_str() == session)
    }
}

#[derive(Default)]
struct Found {
    meta: Option<PathBuf>,
    samples: Option<PathBuf>,
}

/// Lists every experiment and session under `root`, most recent first.
pub fn list_experiments(layout: &Layout) -> Result<Catalog> {
    let dir = layout.experiments_dir();
    let entries = match fs::read_dir(&dir) {
        Ok(e) => e,
        Err(e) if e.kind() == std::io::ErrorKind::NotFound => return Ok(Catalog::default()),
        Err(e) => return Err(StorageError::io(&dir, e)),
    };

    let mut experiments = Vec::new();
    for entry in entries.flatten() {
        let Some(exp_id) = entry
            .file_name()
            .to_str()
            .and_then(|s| ExperimentId::new(s).ok())
        else {
            continue;
        };
        if !entry.path().is_dir() {
            continue;
        }
        let sessions = list_sessions(layout, &entry.path())?;
        if !sessions.is_empty() {
            experiments.push(ExperimentEntry {
                experiment_id: exp_id,
                sessions,
            });
        }
    }
    experiments.sort_by(|a, b| {
        b.latest_start()
            .cmp(&a.latest_start())
            .then_with(|| a.experiment_id.cmp(&b.experiment_id))
    });
    Ok(Catalog { experiments })
}

fn list_sessions(layout: &Layout, dir: &Path) -> Result<Vec<SessionEntry>> {
    let mut found: BTreeMap<SessionId, Found> = BTreeMap::new();
    for entry in fs::read_dir(dir).map_err(|e| StorageError::io(dir, e))?.flatten() {
        let name = entry.file_name();
        let Some(name) = name.to_str() else { continue };
        let (stem, is_meta) = if let Some(s) = name.strip_suffix(".meta.json") {
            (s, true)
        } else if let Some(s) = name.strip_suffix(".samples.jsonl") {
            (s, false)
        } else {
            continue;
        };
        let Ok(id) = SessionId::new(stem) else { continue };
        let slot = found.entry(id).or_default();
        if is_meta {
            slot.meta = Some(entry.path());
        } else {
            slot.samples = Some(entry.path());
        }
    }

    let mut sessions = Vec::with_capacity(found.len());
    for (session_id, f) in found {
        let (count, first, last) = match &f.samples {
            Some(p) => scan_samples(p)?,
            None => (0, None, None),
        };
        let entry = match &f.meta {
            Some(meta_path) => {
                let meta = read_meta(meta_path)?;
                let status = match meta.end_ts {
                    Some(_) => SessionStatus::Closed,
                    None => {
                        let key = format!("{}/{}", meta.experiment_id, meta.session_id);
                        let held = PlugLock::probe(layout, &meta.plug_id)
                            .is_some_and(|info| info.session.as_deref() == Some(key.as_str()));
                        if held {
                            SessionStatus::Running
                        } else {
                            SessionStatus::Unclosed
                        }
                    }
                };
                SessionEntry {
                    session_id,
                    plug_id: Some(meta.plug_id),
                    start_ts: Some(meta.start_ts),
                    end_ts: meta.end_ts,
                    interval_ms: Some(meta.interval_ms),
                    sample_count: count,
                    status,
                    notes: meta.notes,
                }
            }
            None => SessionEntry {
                session_id,
                plug_id: first.as_ref().map(|s: &crate::model::PowerSample| s.plug_id.clone()),
                start_ts: first.as_ref().map(|s| s.ts),
                end_ts: last.map(|s| s.ts),
                interval_ms: None,
                sample_count: count,
                status: SessionStatus::Orphaned,
                notes: String::new(),
            },
        };
        sessions.push(entry);
    }
    sessions.sort_by(|a, b| {
        b.start_ts
            .cmp(&a.start_ts)
            .then_with(|| a.session_id.cmp(&b.session_id))
    });
    Ok(sessions)
}

type Scan = (
    usize,
    Option<crate::model::PowerSample>,
    Option<crate::model::PowerSample>,
);

fn scan_samples(path: &Path) -> Result<Scan> {
    let bytes = fs::read(path).map_err(|e| StorageError::io(path, e))?;
    let read = parse_stream(path, &bytes, None)?;
    let first = read.samples.first().cloned();
    let last = read.samples.last().cloned();
    Ok((read.samples.len(), first, last))
}
