//! Measurement engine.
//!
//! Each plug gets one tokio task that polls on a fixed-rate schedule
//! (deadline = previous deadline + interval; missed slots are skipped, not
//! bunched up) and writes samples either to the active experiment session
//! or to the plug's standalone stream. Session start/stop travel through the
//! same task's command queue, so attribution only ever flips between two
//! samples.
//!
//! The newest sample is held back until the next poll succeeds. If instead
//! more than `gap_factor` intervals pass without a reading, the held sample
//! is written with the `gap-after` flag.

use std::collections::BTreeMap;
use std::sync::{Arc, Mutex};

use thiserror::Error;
use tokio::sync::{mpsc, oneshot};
use tokio::task::JoinHandle;

use crate::analytics::GAP_FACTOR;
use crate::clock::Clock;
use crate::drivers::{DriverError, PlugDriver};
use crate::model::{ExperimentId, ExperimentSession, PlugConfig, PlugId, PowerSample};
use crate::notify::{kinds, Event, Notifier, Severity};
use crate::storage::{
    new_session_id, write_meta, Layout, PlugLock, StandaloneStream, StorageError,
    StreamWriter,
};

/// Consecutive failures before a plug is reported offline.
pub const OFFLINE_THRESHOLD: u32 = 10;

#[derive(Debug, Error)]
pub enum CollectorError {
    #[error("unknown plug {0}")]
    UnknownPlug(String),
    #[error("plug {0} is already registered")]
    DuplicatePlug(PlugId),
    #[error("session {}/{} is already active on plug {}", .0.experiment_id, .0.session_id, .0.plug_id)]
    SessionAlreadyActive(Box<ExperimentSession>),
    #[error("no session on plug {0}")]
    NoSession(PlugId),
    #[error("collector for plug {0} halted after a storage failure")]
    Halted(PlugId),
    #[error(transparent)]
    Storage(#[from] StorageError),
}

/// Outcome of a stop request.
#[derive(Debug, Clone, PartialEq)]
pub struct Stopped {
    pub session: ExperimentSession,
    /// The session was already closed; nothing changed.
    pub already_closed: bool,
}

/// Point-in-time view of one plug's collector.
#[derive(Debug, Clone, PartialEq)]
pub struct PlugStatus {
    pub plug_id: PlugId,
    pub active_session: Option<ExperimentSession>,
    pub last_sample: Option<PowerSample>,
    pub consecutive_errors: u32,
    pub polls_ok: u64,
    pub polls_failed: u64,
    pub halted: bool,
}

#[derive(Debug, Clone)]
pub struct CollectorOptions {
    pub gap_factor: u64,
    pub offline_threshold: u32,
}

impl Default for CollectorOptions {
    fn default() -> Self {
        CollectorOptions {
            gap_factor: GAP_FACTOR,
            offline_threshold: OFFLINE_THRESHOLD,
        }
    }
}

enum Command {
    Start {
        experiment: ExperimentId,
        notes: String,
        reply: oneshot::Sender<Result<ExperimentSession, CollectorError>>,
    },
    Stop {
        experiment: Option<ExperimentId>,
        reply: oneshot::Sender<Result<Stopped, CollectorError>>,
    },
    Shutdown {
        reply: oneshot::Sender<()>,
    },
}

struct PlugHandle {
    tx: mpsc::Sender<Command>,
    status: Arc<Mutex<PlugStatus>>,
    task: JoinHandle<()>,
}

/// Polls a set of plugs and records their samples.
pub struct Collector {
    layout: Layout,
    clock: Clock,
    notifier: Notifier,
    options: CollectorOptions,
    plugs: BTreeMap<PlugId, PlugHandle>,
}

impl Collector {
    pub fn new(layout: Layout, clock: Clock, notifier: Notifier) -> Self {
        Self::with_options(layout, clock, notifier, CollectorOptions::default())
    }

    pub fn with_options(
        layout: Layout,
        clock: Clock,
        notifier: Notifier,
        options: CollectorOptions,
    ) -> Self {
        Collector {
            layout,
            clock,
            notifier,
            options,
            plugs: BTreeMap::new(),
        }
    }

    pub fn layout(&self) -> &Layout {
        &self.layout
    }

    pub fn notifier(&self) -> &Notifier {
        &self.notifier
    }

    /// Takes the plug's stream lock and starts polling in standalone mode.
    pub fn add_plug(
        &mut self,
        plug: PlugConfig,
        driver: Arc<dyn PlugDriver>,
    ) -> Result<(), CollectorError> {
        if self.plugs.contains_key(&plug.id) {
            return Err(CollectorError::DuplicatePlug(plug.id));
        }
        let lock = PlugLock::acquire(&self.layout, &plug.id)?;
        let status = Arc::new(Mutex::new(PlugStatus {
            plug_id: plug.id.clone(),
            active_session: None,
            last_sample: None,
            consecutive_errors: 0,
            polls_ok: 0,
            polls_failed: 0,
            halted: false,
        }));
        let (tx, rx) = mpsc::channel(16);
        let task = PlugTask {
            standalone: StandaloneStream::new(self.layout.clone(), plug.id.clone()),
            plug: plug.clone(),
            driver,
            clock: self.clock,
            layout: self.layout.clone(),
            notifier: self.notifier.clone(),
            options: self.options.clone(),
            lock,
            session: None,
            last_closed: None,
            pending: None,
            consecutive_errors: 0,
            status: status.clone(),
        };
        let task = tokio::spawn(task.run(rx));
        self.plugs.insert(plug.id, PlugHandle { tx, status, task });
        Ok(())
    }

    pub fn plug_ids(&self) -> Vec<PlugId> {
        self.plugs.keys().cloned().collect()
    }

    pub fn status(&self, plug: &str) -> Option<PlugStatus> {
        let h = self.plugs.get(plug)?;
        Some(h.status.lock().unwrap().clone())
    }

    fn handle(&self, plug: &str) -> Result<&PlugHandle, CollectorError> {
        self.plugs
            .get(plug)
            .ok_or_else(|| CollectorError::UnknownPlug(plug.to_owned()))
    }

    /// Opens a session on `plug`; subsequent samples are attributed to it.
    pub async fn start_session(
        &self,
        experiment: &ExperimentId,
        plug: &str,
        notes: &str,
    ) -> Result<ExperimentSession, CollectorError> {
        let h = self.handle(plug)?;
        let (reply, rx) = oneshot::channel();
        let cmd = Command::Start {
            experiment: experiment.clone(),
            notes: notes.to_owned(),
            reply,
        };
        self.send(h, plug, cmd, rx).await
    }

    /// Closes the active session on `plug`. Closing again returns the same
    /// closed session with `already_closed` set.
    pub async fn stop_session(
        &self,
        experiment: Option<&ExperimentId>,
        plug: &str,
    ) -> Result<Stopped, CollectorError> {
        let h = self.handle(plug)?;
        let (reply, rx) = oneshot::channel();
        let cmd = Command::Stop {
            experiment: experiment.cloned(),
            reply,
        };
        self.send(h, plug, cmd, rx).await
    }

    async fn send<T>(
        &self,
        h: &PlugHandle,
        plug: &str,
        cmd: Command,
        rx: oneshot::Receiver<Result<T, CollectorError>>,
    ) -> Result<T, CollectorError> {
        let gone = || CollectorError::Halted(PlugId::new(plug).expect("registered id"));
        h.tx.send(cmd).await.map_err(|_| gone())?;
        rx.await.map_err(|_| gone())?
    }

    /// Closes open sessions, writes held-back samples and stops all tasks.
    pub async fn shutdown(self) {
        for (_, h) in self.plugs {
            let (reply, rx) = oneshot::channel();
            if h.tx.send(Command::Shutdown { reply }).await.is_ok() {
                let _ = rx.await;
            }
            let _ = h.task.await;
        }
    }
}

struct ActiveSession {
    record: ExperimentSession,
    writer: StreamWriter,
}

struct PlugTask {
    plug: PlugConfig,
    driver: Arc<dyn PlugDriver>,
    clock: Clock,
    layout: Layout,
    notifier: Notifier,
    options: CollectorOptions,
    lock: PlugLock,
    standalone: StandaloneStream,
    session: Option<ActiveSession>,
    last_closed: Option<ExperimentSession>,
    pending: Option<PowerSample>,
    consecutive_errors: u32,
    status: Arc<Mutex<PlugStatus>>,
}

impl PlugTask {
    async fn run(mut self, mut rx: mpsc::Receiver<Command>) {
        let interval = self.plug.interval_ms as i64;
        let mut deadline = self.clock.now_ms();
        let mut halted = false;
        loop {
            tokio::select! {
                biased;
                cmd = rx.recv() => match cmd {
                    None => {
                        self.finish();
                        return;
                    }
                    Some(Command::Shutdown { reply }) => {
                        self.finish();
                        let _ = reply.send(());
                        return;
                    }
                    Some(Command::Start { experiment, notes, reply }) => {
                        let r = if halted {
                            Err(CollectorError::Halted(self.plug.id.clone()))
                        } else {
                            self.start(experiment, notes)
                        };
                        let _ = reply.send(r);
                    }
                    Some(Command::Stop { experiment, reply }) => {
                        let r = if halted {
                            Err(CollectorError::Halted(self.plug.id.clone()))
                        } else {
                            self.stop(experiment.as_ref())
                        };
                        let _ = reply.send(r);
                    }
                },
                _ = self.clock.sleep_until(deadline), if !halted => {
                    if let Err(e) = self.tick().await {
                        self.fatal(&e);
                        halted = true;
                        self.status.lock().unwrap().halted = true;
                        continue;
                    }
                    deadline += interval;
                    let now = self.clock.now_ms();
                    if deadline <= now {
                        deadline += ((now - deadline) / interval + 1) * interval;
                    }
                }
            }
        }
    }

    fn event(&self, severity: Severity, kind: &str, detail: String) {
        self.notifier.notify(Event::new(
            self.clock.now_ms(),
            severity,
            kind,
            Some(self.plug.id.clone()),
            detail,
        ));
    }

    fn fatal(&self, e: &StorageError) {
        self.event(
            Severity::Fatal,
            kinds::STORAGE,
            format!("{e}; logging for this plug stopped"),
        );
    }

    fn gap_ms(&self) -> i64 {
        (self.options.gap_factor * self.plug.interval_ms) as i64
    }

    async fn tick(&mut self) -> Result<(), StorageError> {
        let result = self.driver.poll().await;
        let ts = self.clock.now_ms();
        match result {
            Ok(reading) => {
                if self.consecutive_errors >= self.options.offline_threshold {
                    self.event(
                        Severity::Info,
                        kinds::PLUG_ONLINE,
                        format!("reading again after {} failures", self.consecutive_errors),
                    );
                }
                self.consecutive_errors = 0;
                let mut sample = PowerSample::new(ts, 0, self.plug.id.clone(), reading.power_w);
                sample.energy_counter_wh = reading.energy_counter_wh;
                if let Some(mut prev) = self.pending.take() {
                    prev.flags.gap_after = sample.ts - prev.ts > self.gap_ms();
                    self.write(prev)?;
                }
                self.pending = Some(sample.clone());
                let mut st = self.status.lock().unwrap();
                st.last_sample = Some(sample);
                st.polls_ok += 1;
                st.consecutive_errors = 0;
            }
            Err(e) => {
                self.on_failure(&e);
                if let Some(prev) = &self.pending {
                    if ts - prev.ts > self.gap_ms() {
                        let mut prev = self.pending.take().expect("checked");
                        prev.flags.gap_after = true;
                        self.write(prev)?;
                    }
                }
            }
        }
        Ok(())
    }

    fn on_failure(&mut self, e: &DriverError) {
        self.consecutive_errors += 1;
        if let Some(s) = &mut self.session {
            s.record.error_count += 1;
        }
        {
            let mut st = self.status.lock().unwrap();
            st.polls_failed += 1;
            st.consecutive_errors = self.consecutive_errors;
        }
        self.event(Severity::Warn, &e.kind.to_string(), e.detail.clone());
        if self.consecutive_errors == self.options.offline_threshold {
            self.event(
                Severity::Error,
                kinds::PLUG_OFFLINE,
                format!("{} consecutive failed polls, last: {e}", self.consecutive_errors),
            );
        }
    }

    fn write(&mut self, sample: PowerSample) -> Result<PowerSample, StorageError> {
        match &mut self.session {
            Some(s) => s.writer.append(sample),
            None => self.standalone.append(sample),
        }
    }

    fn flush_pending(&mut self) -> Result<(), StorageError> {
        if let Some(p) = self.pending.take() {
            self.write(p)?;
        }
        Ok(())
    }

    fn start(
        &mut self,
        experiment: ExperimentId,
        notes: String,
    ) -> Result<ExperimentSession, CollectorError> {
        if let Some(s) = &self.session {
            return Err(CollectorError::SessionAlreadyActive(Box::new(s.record.clone())));
        }
        self.flush_pending()?;
        let start_ts = self.clock.now_ms();
        let session_id = new_session_id(&self.layout, &experiment, start_ts);
        let record = ExperimentSession {
            experiment_id: experiment.clone(),
            session_id: session_id.clone(),
            plug_id: self.plug.id.clone(),
            start_ts,
            end_ts: None,
            interval_ms: self.plug.interval_ms,
            notes,
            error_count: 0,
        };
        let writer = StreamWriter::open(&self.layout.session_samples(&experiment, &session_id))?;
        write_meta(&self.layout, &record)?;
        self.lock
            .set_session(Some(format!("{experiment}/{session_id}")))?;
        self.event(
            Severity::Info,
            kinds::SESSION,
            format!("session {experiment}/{session_id} started"),
        );
        self.status.lock().unwrap().active_session = Some(record.clone());
        self.session = Some(ActiveSession {
            record: record.clone(),
            writer,
        });
        Ok(record)
    }

    fn stop(&mut self, experiment: Option<&ExperimentId>) -> Result<Stopped, CollectorError> {
        let matches = |s: &ExperimentSession| experiment.is_none_or(|e| *e == s.experiment_id);
        match &self.session {
            Some(active) if matches(&active.record) => {}
            _ => {
                return match &self.last_closed {
                    Some(closed) if matches(closed) => {
                        self.event(
                            Severity::Warn,
                            kinds::SESSION,
                            format!(
                                "session {}/{} is already closed",
                                closed.experiment_id, closed.session_id
                            ),
                        );
                        Ok(Stopped {
                            session: closed.clone(),
                            already_closed: true,
                        })
                    }
                    _ => Err(CollectorError::NoSession(self.plug.id.clone())),
                };
            }
        }
        let session = self.close_active()?;
        Ok(Stopped {
            session,
            already_closed: false,
        })
    }

    fn close_active(&mut self) -> Result<ExperimentSession, StorageError> {
        self.flush_pending()?;
        let mut active = self.session.take().expect("caller checked");
        let now = self.clock.now_ms();
        active.record.end_ts = Some(now.max(active.record.start_ts));
        active.writer.sync()?;
        write_meta(&self.layout, &active.record)?;
        self.lock.set_session(None)?;
        self.event(
            Severity::Info,
            kinds::SESSION,
            format!(
                "session {}/{} closed",
                active.record.experiment_id, active.record.session_id
            ),
        );
        self.status.lock().unwrap().active_session = None;
        self.last_closed = Some(active.record.clone());
        Ok(active.record)
    }

    fn finish(&mut self) {
        let result = if self.session.is_some() {
            self.close_active().map(|_| ())
        } else {
            self.flush_pending()
        };
        if let Err(e) = result {
            self.fatal(&e);
        }
    }
}
