//! Resolves experiment selections against a logs root and computes their
//! statistics and chart series.
//!
//! The CLI, the HTTP server and report generation all go through this
//! module, so a number shown in any of them comes from the same
//! computation.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::analytics::{self, AnalyticsError, SeriesWindow};
use crate::model::{
    BaselineStats, EnergySummary, ExperimentId, PlugId, PowerSample, SessionId, TariffSettings,
};
use crate::par::{self, Exec};
use crate::storage::{
    self, list_experiments, load_baseline, parse_stream, Catalog, Layout, SessionEntry,
    StorageError,
};

pub const DEFAULT_MAX_POINTS: usize = 2000;
pub const AGGREGATE_LABEL: &str = "all";

#[derive(Debug, Error)]
pub enum QueryError {
    #[error("unknown experiment {0}")]
    UnknownExperiment(String),
    #[error("unknown session {0}/{1}")]
    UnknownSession(String, String),
    #[error("selection is empty after filtering")]
    EmptySelection,
    #[error("no stored baseline for plug {0}; run `emers baseline --plug {0}` first")]
    MissingBaseline(PlugId),
    #[error("{0}")]
    BadRequest(String),
    #[error(transparent)]
    Storage(#[from] StorageError),
    #[error(transparent)]
    Analytics(#[from] AnalyticsError),
}

/// Which sessions of an experiment to include.
#[derive(Debug, Clone, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SessionFilter {
    #[default]
    All,
    Latest,
    #[serde(untagged)]
    Explicit(Vec<SessionId>),
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Selection {
    pub experiment_id: ExperimentId,
    #[serde(default)]
    pub sessions: SessionFilter,
}

impl Selection {
    pub fn all(experiment_id: ExperimentId) -> Self {
        Selection {
            experiment_id,
            sessions: SessionFilter::All,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum BaselineMode {
    #[default]
    None,
    PerPlug,
}

/// A byte range of a log file that fed a computation.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct InputRange {
    /// Path relative to the logs root, `/`-separated.
    pub path: String,
    pub bytes: u64,
    pub sha256: String,
}

/// One session's samples, loaded and bounded.
#[derive(Debug, Clone)]
pub struct LoadedSession {
    pub experiment_id: ExperimentId,
    pub entry: SessionEntry,
    pub window: SeriesWindow,
    pub input: InputRange,
    pub warnings: Vec<String>,
}

impl LoadedSession {
    pub fn plug_id(&self) -> Option<&PlugId> {
        self.entry.plug_id.as_ref().or(self.window.plug_id())
    }
}

pub fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

fn relative(layout: &Layout, path: &Path) -> String {
    path.strip_prefix(layout.root())
        .unwrap_or(path)
        .components()
        .map(|c| c.as_os_str().to_string_lossy())
        .collect::<Vec<_>>()
        .join("/")
}

/// Reads a session's sample file. Only complete records count: a torn tail
/// of a live or crashed logger is excluded, and so is anything appended
/// after the read.
pub fn load_session(
    layout: &Layout,
    experiment: &ExperimentId,
    entry: &SessionEntry,
) -> Result<LoadedSession, QueryError> {
    let path = layout.session_samples(experiment, &entry.session_id);
    let bytes = match std::fs::read(&path) {
        Ok(b) => b,
        Err(e) if e.kind() == std::io::ErrorKind::NotFound => Vec::new(),
        Err(e) => return Err(StorageError::io(&path, e).into()),
    };
    let range = match (entry.start_ts, entry.end_ts) {
        (Some(t0), Some(t1)) if entry.status == storage::SessionStatus::Closed => Some((t0, t1)),
        _ => None,
    };
    let read = parse_stream(&path, &bytes, range)?;
    let consumed = &bytes[..read.consumed_bytes as usize];
    let mut window = SeriesWindow::from_samples(read.samples)?;
    if let Some(interval) = entry.interval_ms {
        window = window.with_interval(interval);
    }
    Ok(LoadedSession {
        experiment_id: experiment.clone(),
        entry: entry.clone(),
        window,
        input: InputRange {
            path: relative(layout, &path),
            bytes: read.consumed_bytes,
            sha256: hex(&Sha256::digest(consumed)),
        },
        warnings: read.warnings,
    })
}

/// Catalog entries picked by `selections`, in selection order.
pub fn resolve(
    catalog: &Catalog,
    selections: &[Selection],
) -> Result<Vec<(ExperimentId, Vec<SessionEntry>)>, QueryError> {
    let mut out = Vec::with_capacity(selections.len());
    for sel in selections {
        let exp = catalog
            .experiment(sel.experiment_id.as_str())
            .ok_or_else(|| QueryError::UnknownExperiment(sel.experiment_id.to_string()))?;
        // Chronological order for tables and charts.
        let mut all: Vec<SessionEntry> = exp.sessions.clone();
        all.sort_by(|a, b| a.start_ts.cmp(&b.start_ts).then(a.session_id.cmp(&b.session_id)));
        let picked = match &sel.sessions {
            SessionFilter::All => all,
            SessionFilter::Latest => all.pop().into_iter().collect(),
            SessionFilter::Explicit(ids) => {
                let mut v = Vec::with_capacity(ids.len());
                for id in ids {
                    let s = all.iter().find(|s| &s.session_id == id).ok_or_else(|| {
                        QueryError::UnknownSession(sel.experiment_id.to_string(), id.to_string())
                    })?;
                    v.push(s.clone());
                }
                v
            }
        };
        if !picked.is_empty() {
            out.push((sel.experiment_id.clone(), picked));
        }
    }
    if out.is_empty() {
        return Err(QueryError::EmptySelection);
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SessionSummary {
    pub session_id: SessionId,
    pub plug_id: Option<PlugId>,
    pub status: storage::SessionStatus,
    pub summary: EnergySummary,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentStats {
    pub experiment_id: ExperimentId,
    pub summary: EnergySummary,
    pub sessions: Vec<SessionSummary>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StatsReport {
    pub tariff: TariffSettings,
    pub baseline: BaselineMode,
    pub baselines: Vec<BaselineStats>,
    pub experiments: Vec<ExperimentStats>,
    pub aggregate: EnergySummary,
    pub inputs: Vec<InputRange>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub warnings: Vec<String>,
}

/// Loaded sessions grouped per experiment, kept around for charting.
#[derive(Debug, Clone)]
pub struct Loaded {
    pub experiments: Vec<(ExperimentId, Vec<LoadedSession>)>,
}

pub fn load_selection(layout: &Layout, selections: &[Selection]) -> Result<Loaded, QueryError> {
    let catalog = list_experiments(layout)?;
    let resolved = resolve(&catalog, selections)?;
    let mut experiments = Vec::with_capacity(resolved.len());
    for (exp, entries) in resolved {
        let loaded = par::map(Exec::default(), &entries, |e| load_session(layout, &exp, e));
        experiments.push((exp, loaded.into_iter().collect::<Result<Vec<_>, _>>()?));
    }
    Ok(Loaded { experiments })
}

/// Per-session, per-experiment and aggregate statistics for `loaded`.
pub fn summarize_loaded(
    layout: &Layout,
    loaded: &Loaded,
    tariff: &TariffSettings,
    baseline: BaselineMode,
    exec: Exec,
) -> Result<StatsReport, QueryError> {
    let mut baselines: Vec<BaselineStats> = Vec::new();
    if baseline == BaselineMode::PerPlug {
        let mut plugs: Vec<&PlugId> = loaded
            .experiments
            .iter()
            .flat_map(|(_, s)| s.iter().filter_map(|l| l.plug_id()))
            .collect();
        plugs.sort();
        plugs.dedup();
        for plug in plugs {
            let b = load_baseline(layout, plug)?
                .ok_or_else(|| QueryError::MissingBaseline(plug.clone()))?;
            baselines.push(b);
        }
    }
    let baseline_for =
        |s: &LoadedSession| s.plug_id().and_then(|p| baselines.iter().find(|b| &b.plug_id == p));

    let mut experiments = Vec::with_capacity(loaded.experiments.len());
    let mut inputs = Vec::new();
    let mut warnings = Vec::new();
    for (exp, sessions) in &loaded.experiments {
        let rows = par::map(exec, sessions, |s| {
            analytics::summarize_with(&s.window, tariff, baseline_for(s), exp.as_str(), exec)
        });
        let mut session_rows = Vec::with_capacity(rows.len());
        for (s, row) in sessions.iter().zip(rows) {
            session_rows.push(SessionSummary {
                session_id: s.entry.session_id.clone(),
                plug_id: s.plug_id().cloned(),
                status: s.entry.status,
                summary: row?,
            });
            inputs.push(s.input.clone());
            warnings.extend(s.warnings.iter().cloned());
        }
        let parts: Vec<EnergySummary> = session_rows.iter().map(|r| r.summary.clone()).collect();
        experiments.push(ExperimentStats {
            experiment_id: exp.clone(),
            summary: analytics::combine(exp.as_str(), &parts, tariff),
            sessions: session_rows,
        });
    }
    let totals: Vec<EnergySummary> = experiments.iter().map(|e| e.summary.clone()).collect();
    let aggregate = analytics::combine(AGGREGATE_LABEL, &totals, tariff);
    Ok(StatsReport {
        tariff: tariff.clone(),
        baseline,
        baselines,
        experiments,
        aggregate,
        inputs,
        warnings,
    })
}

/// Loads and summarizes in one step.
pub fn compute_stats(
    layout: &Layout,
    selections: &[Selection],
    tariff: &TariffSettings,
    baseline: BaselineMode,
) -> Result<StatsReport, QueryError> {
    let loaded = load_selection(layout, selections)?;
    summarize_loaded(layout, &loaded, tariff, baseline, Exec::default())
}

/// Downsampled power series with the exact cumulative energy at each kept
/// point.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Series {
    pub power: PowerSeries,
    pub cumulative: CumulativeSeries,
    pub total_points: usize,
    pub sha256: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PowerSeries {
    pub ts: Vec<i64>,
    pub w: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CumulativeSeries {
    pub ts: Vec<i64>,
    pub kwh: Vec<f64>,
}

/// Restricts `window` to `[from, to]` (either side optional).
pub fn clip(window: &SeriesWindow, from: Option<i64>, to: Option<i64>) -> Result<SeriesWindow, QueryError> {
    if let (Some(f), Some(t)) = (from, to) {
        if f > t {
            return Err(QueryError::BadRequest(format!("from {f} is after to {t}")));
        }
    }
    if from.is_none() && to.is_none() {
        return Ok(window.clone());
    }
    let kept: Vec<PowerSample> = window
        .samples()
        .iter()
        .filter(|s| from.is_none_or(|f| s.ts >= f) && to.is_none_or(|t| s.ts <= t))
        .cloned()
        .collect();
    let mut w = SeriesWindow::from_samples(kept)?;
    if let Some(i) = window.interval_ms() {
        w = w.with_interval(i);
    }
    Ok(w)
}

pub fn series(window: &SeriesWindow, max_points: usize) -> Result<Series, QueryError> {
    if max_points < 2 {
        return Err(QueryError::BadRequest("max_points must be at least 2".into()));
    }
    let cum = analytics::cumulative_kwh(window);
    let idx = analytics::downsample_indices(window.samples(), max_points);
    let s = window.samples();
    let ts: Vec<i64> = idx.iter().map(|&i| s[i].ts).collect();
    let power = PowerSeries {
        ts: ts.clone(),
        w: idx.iter().map(|&i| s[i].power_w).collect(),
    };
    let cumulative = CumulativeSeries {
        ts,
        kwh: idx.iter().map(|&i| cum[i]).collect(),
    };
    let sha256 = series_hash(&power, &cumulative);
    Ok(Series {
        power,
        cumulative,
        total_points: s.len(),
        sha256,
    })
}

/// Hash of the exact point values; lets a report's charts be checked
/// against what the server serves for the same session.
pub fn series_hash(power: &PowerSeries, cumulative: &CumulativeSeries) -> String {
    let mut h = Sha256::new();
    for ((t, w), k) in power.ts.iter().zip(&power.w).zip(&cumulative.kwh) {
        h.update(t.to_le_bytes());
        h.update(w.to_bits().to_le_bytes());
        h.update(k.to_bits().to_le_bytes());
    }
    hex(&h.finalize())
}

/// Resolves one session by id for the series endpoint.
pub fn find_session(
    layout: &Layout,
    experiment: &str,
    session: &str,
) -> Result<LoadedSession, QueryError> {
    let catalog = list_experiments(layout)?;
    let exp = catalog
        .experiment(experiment)
        .ok_or_else(|| QueryError::UnknownExperiment(experiment.to_owned()))?;
    let entry = exp
        .sessions
        .iter()
        .find(|s| s.session_id.as_str() == session)
        .ok_or_else(|| QueryError::UnknownSession(experiment.to_owned(), session.to_owned()))?;
    load_session(layout, &exp.experiment_id, entry)
}

/// Files a live reader should follow for `plug`: the active session's file
/// when a logger holds one, else today's standalone file.
pub fn live_path(layout: &Layout, plug: &PlugId, now_ms: i64) -> PathBuf {
    if let Some(info) = storage::PlugLock::probe(layout, plug) {
        if let Some((exp, sess)) = info.session.as_deref().and_then(|s| s.split_once('/')) {
            if let (Ok(e), Ok(s)) = (ExperimentId::new(exp), SessionId::new(sess)) {
                return layout.session_samples(&e, &s);
            }
        }
    }
    layout.standalone_file(plug, storage::utc_day(now_ms))
}
