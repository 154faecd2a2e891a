//! Error and status notifications.
//!
//! Events go to `events.log` (one JSON object per line) through a background
//! writer task and to any in-process subscribers. [`Notifier::notify`] never
//! waits: if the writer falls behind, events are counted as dropped rather
//! than stalling a polling loop.

use std::fmt;
use std::fs::OpenOptions;
use std::io::{self, Write};
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::Arc;

use serde::{Deserialize, Serialize};
use tokio::sync::{broadcast, mpsc};
use tokio::task::JoinHandle;

use crate::model::PlugId;

const QUEUE: usize = 1024;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Severity {
    Info,
    Warn,
    Error,
    Fatal,
}

impl fmt::Display for Severity {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Severity::Info => "info",
            Severity::Warn => "warn",
            Severity::Error => "error",
            Severity::Fatal => "fatal",
        })
    }
}

pub mod kinds {
    pub const PLUG_OFFLINE: &str = "plug-offline";
    pub const PLUG_ONLINE: &str = "plug-online";
    pub const STORAGE: &str = "storage";
    pub const SESSION: &str = "session";
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Event {
    pub ts: i64,
    pub severity: Severity,
    pub kind: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub plug_id: Option<PlugId>,
    pub detail: String,
}

impl Event {
    pub fn new(
        ts: i64,
        severity: Severity,
        kind: impl Into<String>,
        plug_id: Option<PlugId>,
        detail: impl Into<String>,
    ) -> Self {
        Event {
            ts,
            severity,
            kind: kind.into(),
            plug_id,
            detail: detail.into(),
        }
    }
}

#[derive(Debug, Clone)]
pub struct Notifier {
    tx: Option<mpsc::Sender<Event>>,
    bus: broadcast::Sender<Event>,
    dropped: Arc<AtomicU64>,
}

/// Background writer; await [`NotifierTask::finish`] after every
/// [`Notifier`] clone is dropped to make sure queued events hit the disk.
#[derive(Debug)]
pub struct NotifierTask(Option<JoinHandle<()>>);

impl NotifierTask {
    pub async fn finish(mut self) {
        if let Some(h) = self.0.take() {
            let _ = h.await;
        }
    }
}

impl Notifier {
    /// Starts a notifier appending to `log_path`. Must be called inside a
    /// tokio runtime.
    pub fn spawn(log_path: PathBuf) -> (Notifier, NotifierTask) {
        let (tx, mut rx) = mpsc::channel::<Event>(QUEUE);
        let handle = tokio::spawn(async move {
            while let Some(ev) = rx.recv().await {
                let path = log_path.clone();
                let _ = tokio::task::spawn_blocking(move || write_with_retry(&path, &ev)).await;
            }
        });
        let (bus, _) = broadcast::channel(QUEUE);
        (
            Notifier {
                tx: Some(tx),
                bus,
                dropped: Arc::default(),
            },
            NotifierTask(Some(handle)),
        )
    }

    /// A notifier that only feeds subscribers; nothing is written to disk.
    pub fn memory() -> Notifier {
        let (bus, _) = broadcast::channel(QUEUE);
        Notifier {
            tx: None,
            bus,
            dropped: Arc::default(),
        }
    }

    pub fn subscribe(&self) -> broadcast::Receiver<Event> {
        self.bus.subscribe()
    }

    pub fn dropped(&self) -> u64 {
        self.dropped.load(Ordering::Relaxed)
    }

    pub fn notify(&self, event: Event) {
        match event.severity {
            Severity::Info => tracing::info!(kind = %event.kind, plug = ?event.plug_id, "{}", event.detail),
            Severity::Warn => tracing::warn!(kind = %event.kind, plug = ?event.plug_id, "{}", event.detail),
            Severity::Error | Severity::Fatal => {
                tracing::error!(severity = %event.severity, kind = %event.kind, plug = ?event.plug_id, "{}", event.detail)
            }
        }
        let _ = self.bus.send(event.clone());
        if let Some(tx) = &self.tx {
            if tx.try_send(event).is_err() {
                self.dropped.fetch_add(1, Ordering::Relaxed);
            }
        }
    }
}

fn append_line(path: &Path, line: &[u8]) -> io::Result<()> {
    if let Some(dir) = path.parent() {
        std::fs::create_dir_all(dir)?;
    }
    OpenOptions::new()
        .create(true)
        .append(true)
        .open(path)?
        .write_all(line)
}

fn write_with_retry(path: &Path, event: &Event) {
    let mut line = serde_json::to_vec(event).expect("event serializes");
    line.push(b'\n');
    if append_line(path, &line).is_err() {
        if let Err(e) = append_line(path, &line) {
            tracing::warn!(path = %path.display(), "dropping event after retry: {e}");
        }
    }
}

/// The last `limit` events from `path`, oldest first. Unparseable lines
/// are skipped; a missing file reads as empty.
pub fn read_events(path: &Path, limit: usize) -> io::Result<Vec<Event>> {
    let text = match std::fs::read_to_string(path) {
        Ok(t) => t,
        Err(e) if e.kind() == io::ErrorKind::NotFound => return Ok(Vec::new()),
        Err(e) => return Err(e),
    };
    let mut out: Vec<Event> = text
        .lines()
        .rev()
        .filter_map(|l| serde_json::from_str(l).ok())
        .take(limit)
        .collect();
    out.reverse();
    Ok(out)
}
