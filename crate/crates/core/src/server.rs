//! Monitoring and control HTTP API.
//!
//! Read endpoints are views over the logs directory; they need no running
//! collector and never write to the logs root. Live streams follow the
//! sample files, so a `serve` process can watch a separate `log` process.

use std::convert::Infallible;
use std::future::Future;
use std::io::{Read, Seek, SeekFrom};
use std::net::{IpAddr, Ipv4Addr, SocketAddr};
use std::path::PathBuf;
use std::sync::Arc;
use std::time::Duration;

use axum::extract::{Path, Query, State};
use axum::http::{header, HeaderMap, HeaderValue, Method, StatusCode};
use axum::response::sse::{Event as SseEvent, KeepAlive, Sse};
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use futures::Stream;
use serde::{Deserialize, Serialize};
use serde_json::json;
use sha2::{Digest, Sha256};
use thiserror::Error;
use tokio::net::TcpListener;
use tokio::sync::watch;
use tokio::task::JoinHandle;
use tower_http::cors::{Any, CorsLayer};
use tower_http::services::ServeDir;

use crate::clock::Clock;
use crate::collector::{Collector, CollectorError};
use crate::config::BindScope;
use crate::model::{ExperimentId, PlugId, PowerSample, TariffSettings};
use crate::notify::read_events;
use crate::query::{self, BaselineMode, QueryError, Selection, SessionFilter, DEFAULT_MAX_POINTS};
use crate::reporting::{self, ReportError, ReportRequest};
use crate::storage::{list_experiments, Layout};

pub const API_VERSION: u32 = 1;
pub const HEARTBEAT: Duration = Duration::from_secs(15);
const TAIL_POLL: Duration = Duration::from_millis(200);

#[derive(Debug, Error)]
pub enum ServerError {
    #[error("logs root {0} does not exist")]
    MissingRoot(PathBuf),
    #[error("cannot bind {addr}: {source}")]
    Bind {
        addr: SocketAddr,
        #[source]
        source: std::io::Error,
    },
}

#[derive(Debug, Clone)]
pub struct ServeOptions {
    pub bind: BindScope,
    pub port: u16,
    pub layout: Layout,
    pub static_dir: Option<PathBuf>,
    /// Where POST /api/reports writes; defaults to `<logs>/reports`.
    pub reports_dir: Option<PathBuf>,
    pub tariff: TariffSettings,
    /// Plugs from the configuration, in addition to those found on disk.
    pub plugs: Vec<PlugId>,
    pub heartbeat: Duration,
    pub clock: Clock,
}

impl ServeOptions {
    pub fn new(layout: Layout) -> Self {
        ServeOptions {
            bind: BindScope::Host,
            port: crate::config::DEFAULT_PORT,
            layout,
            static_dir: None,
            reports_dir: None,
            tariff: TariffSettings::default(),
            plugs: Vec::new(),
            heartbeat: HEARTBEAT,
            clock: Clock::system(),
        }
    }
}

struct AppState {
    opts: ServeOptions,
    collector: Option<Arc<Collector>>,
    shutdown: watch::Receiver<bool>,
}

type AppStateRef = State<Arc<AppState>>;

/// Socket address for a bind scope.
pub fn bind_addr(scope: BindScope, port: u16) -> SocketAddr {
    let ip = match scope {
        BindScope::Host => IpAddr::V4(Ipv4Addr::LOCALHOST),
        BindScope::Lan | BindScope::All => IpAddr::V4(Ipv4Addr::UNSPECIFIED),
    };
    SocketAddr::new(ip, port)
}

/// Globally routable unicast address (not private, loopback, link-local,
/// shared or documentation space).
pub fn is_public(ip: IpAddr) -> bool {
    match ip {
        IpAddr::V4(v4) => {
            let o = v4.octets();
            !(v4.is_private()
                || v4.is_loopback()
                || v4.is_link_local()
                || v4.is_unspecified()
                || v4.is_broadcast()
                || v4.is_documentation()
                || o[0] == 0
                || (o[0] == 100 && (64..128).contains(&o[1]))
                || o[0] >= 224)
        }
        IpAddr::V6(v6) => {
            let s = v6.segments();
            (s[0] & 0xe000) == 0x2000 && !(s[0] == 0x2001 && s[1] == 0x0db8)
        }
    }
}

fn public_addresses() -> Vec<IpAddr> {
    if_addrs::get_if_addrs()
        .map(|ifs| ifs.iter().map(|i| i.ip()).filter(|ip| is_public(*ip)).collect())
        .unwrap_or_default()
}

pub struct ServerHandle {
    pub addr: SocketAddr,
    shutdown: watch::Sender<bool>,
    task: JoinHandle<()>,
}

impl ServerHandle {
    pub async fn shutdown(self) {
        let _ = self.shutdown.send(true);
        let _ = self.task.await;
    }

    /// Runs until `signal` resolves, then shuts down gracefully.
    pub async fn run_until(self, signal: impl Future<Output = ()>) {
        signal.await;
        self.shutdown().await;
    }
}

/// Binds and starts serving in the background.
pub async fn start(
    opts: ServeOptions,
    collector: Option<Arc<Collector>>,
) -> Result<ServerHandle, ServerError> {
    if !opts.layout.root().is_dir() {
        return Err(ServerError::MissingRoot(opts.layout.root().to_owned()));
    }
    let addr = bind_addr(opts.bind, opts.port);
    if opts.bind == BindScope::Lan {
        let public = public_addresses();
        if !public.is_empty() {
            tracing::warn!(
                "bind scope lan listens on all interfaces and this host has public addresses {public:?}; \
                 the API has no authentication"
            );
        }
    }
    let listener = TcpListener::bind(addr)
        .await
        .map_err(|source| ServerError::Bind { addr, source })?;
    let addr = listener
        .local_addr()
        .map_err(|source| ServerError::Bind { addr, source })?;
    let (tx, rx) = watch::channel(false);
    let app = router(opts, collector, rx.clone());
    let mut stop = rx;
    let task = tokio::spawn(async move {
        let serve = axum::serve(listener, app).with_graceful_shutdown(async move {
            let _ = stop.wait_for(|v| *v).await;
        });
        if let Err(e) = serve.await {
            tracing::error!("server error: {e}");
        }
    });
    tracing::info!("listening on http://{addr}");
    Ok(ServerHandle {
        addr,
        shutdown: tx,
        task,
    })
}

fn router(
    opts: ServeOptions,
    collector: Option<Arc<Collector>>,
    shutdown: watch::Receiver<bool>,
) -> Router {
    let static_dir = opts.static_dir.clone();
    let scope = opts.bind;
    let state = Arc::new(AppState {
        opts,
        collector,
        shutdown,
    });
    let mut app = Router::new()
        .route("/api/health", get(health))
        .route("/api/plugs", get(plugs))
        .route("/api/experiments", get(experiments))
        .route(
            "/api/experiments/{experiment}/sessions/{session}/series",
            get(series),
        )
        .route("/api/stats", get(stats))
        .route("/api/live/{plug}", get(live))
        .route("/api/events", get(events))
        .route("/api/sessions", post(sessions))
        .route("/api/reports", post(reports))
        .with_state(state);
    if let Some(dir) = static_dir {
        app = app.fallback_service(ServeDir::new(dir));
    }
    if scope != BindScope::Host {
        app = app.layer(
            CorsLayer::new()
                .allow_origin(Any)
                .allow_methods([Method::GET, Method::POST])
                .allow_headers([header::CONTENT_TYPE, header::HeaderName::from_static("last-event-id")])
                .expose_headers([header::ETAG]),
        );
    }
    app
}

#[derive(Debug)]
struct ApiError(StatusCode, String, Option<String>);

impl ApiError {
    fn new(status: StatusCode, msg: impl Into<String>) -> Self {
        ApiError(status, msg.into(), None)
    }
}

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        let mut body = json!({ "error": self.1 });
        if let Some(hint) = self.2 {
            body["hint"] = hint.into();
        }
        (self.0, Json(body)).into_response()
    }
}

impl From<QueryError> for ApiError {
    fn from(e: QueryError) -> Self {
        let status = match &e {
            QueryError::UnknownExperiment(_) | QueryError::UnknownSession(..) => {
                StatusCode::NOT_FOUND
            }
            QueryError::MissingBaseline(plug) => {
                return ApiError(
                    StatusCode::CONFLICT,
                    e.to_string(),
                    Some(format!(
                        "measure an idle baseline first: emers baseline --plug {plug}"
                    )),
                )
            }
            QueryError::EmptySelection | QueryError::BadRequest(_) => StatusCode::BAD_REQUEST,
            QueryError::Storage(_) | QueryError::Analytics(_) => StatusCode::INTERNAL_SERVER_ERROR,
        };
        ApiError::new(status, e.to_string())
    }
}

impl From<ReportError> for ApiError {
    fn from(e: ReportError) -> Self {
        match e {
            ReportError::Query(q) => q.into(),
            ReportError::Invalid(m) => ApiError::new(StatusCode::BAD_REQUEST, m),
            ReportError::Io { .. } => {
                ApiError::new(StatusCode::INTERNAL_SERVER_ERROR, e.to_string())
            }
        }
    }
}

async fn health(State(s): AppStateRef) -> Json<serde_json::Value> {
    Json(json!({
        "status": "ok",
        "version": env!("CARGO_PKG_VERSION"),
        "api": API_VERSION,
        "collector": s.collector.is_some(),
    }))
}

#[derive(Serialize)]
struct PlugView {
    plug_id: PlugId,
    configured: bool,
    /// Session key `<experiment>/<session>` when a logger is recording one.
    session: Option<String>,
    logging: bool,
}

fn known_plugs(s: &AppState) -> Vec<PlugId> {
    let mut all = s.opts.plugs.clone();
    all.extend(s.opts.layout.standalone_plugs());
    if let Some(c) = &s.collector {
        all.extend(c.plug_ids());
    }
    all.sort();
    all.dedup();
    all
}

async fn plugs(State(s): AppStateRef) -> Json<Vec<PlugView>> {
    let views = known_plugs(&s)
        .into_iter()
        .map(|p| {
            let lock = crate::storage::PlugLock::probe(&s.opts.layout, &p);
            PlugView {
                configured: s.opts.plugs.contains(&p),
                logging: lock.is_some(),
                session: lock.and_then(|l| l.session),
                plug_id: p,
            }
        })
        .collect();
    Json(views)
}

async fn experiments(State(s): AppStateRef, headers: HeaderMap) -> Result<Response, ApiError> {
    let catalog = list_experiments(&s.opts.layout).map_err(QueryError::from)?;
    let body = serde_json::to_vec(&catalog).expect("catalog serializes");
    let etag = format!("\"{}\"", query::hex(&Sha256::digest(&body)));
    let matches = headers
        .get(header::IF_NONE_MATCH)
        .and_then(|v| v.to_str().ok())
        .is_some_and(|v| v.split(',').any(|t| t.trim() == etag || t.trim() == "*"));
    let etag_value = HeaderValue::from_str(&etag).expect("hex etag");
    if matches {
        return Ok((StatusCode::NOT_MODIFIED, [(header::ETAG, etag_value)]).into_response());
    }
    Ok((
        [
            (header::ETAG, etag_value),
            (header::CONTENT_TYPE, HeaderValue::from_static("application/json")),
        ],
        body,
    )
        .into_response())
}

#[derive(Deserialize)]
struct SeriesParams {
    from: Option<i64>,
    to: Option<i64>,
    max_points: Option<usize>,
}

async fn series(
    State(s): AppStateRef,
    Path((experiment, session)): Path<(String, String)>,
    Query(p): Query<SeriesParams>,
) -> Result<Json<serde_json::Value>, ApiError> {
    let loaded = query::find_session(&s.opts.layout, &experiment, &session)?;
    let window = query::clip(&loaded.window, p.from, p.to)?;
    let series = query::series(&window, p.max_points.unwrap_or(DEFAULT_MAX_POINTS))?;
    let mut v = serde_json::to_value(&series).expect("series serializes");
    v["experiment_id"] = experiment.into();
    v["session_id"] = session.into();
    v["status"] = serde_json::to_value(loaded.entry.status).expect("status serializes");
    Ok(Json(v))
}

#[derive(Deserialize)]
pub struct StatsParams {
    /// Comma-separated experiment ids.
    pub experiments: String,
    pub sessions: Option<String>,
    pub price: Option<f64>,
    pub carbon: Option<f64>,
    pub currency: Option<String>,
    pub baseline: Option<String>,
}

fn bad(msg: impl Into<String>) -> ApiError {
    ApiError::new(StatusCode::BAD_REQUEST, msg)
}

async fn stats(
    State(s): AppStateRef,
    Query(p): Query<StatsParams>,
) -> Result<Json<query::StatsReport>, ApiError> {
    let filter = match p.sessions.as_deref() {
        None | Some("all") => SessionFilter::All,
        Some("latest") => SessionFilter::Latest,
        Some(other) => return Err(bad(format!("sessions must be all or latest, got {other}"))),
    };
    let mut selections = Vec::new();
    for id in p.experiments.split(',').map(str::trim).filter(|x| !x.is_empty()) {
        let experiment_id = ExperimentId::new(id).map_err(|e| bad(e.to_string()))?;
        selections.push(Selection {
            experiment_id,
            sessions: filter.clone(),
        });
    }
    if selections.is_empty() {
        return Err(bad("no experiments given"));
    }
    let mut tariff = s.opts.tariff.clone();
    if let Some(price) = p.price {
        tariff.price_per_kwh = price;
    }
    if let Some(carbon) = p.carbon {
        tariff.carbon_g_per_kwh = carbon;
    }
    if let Some(cur) = p.currency {
        tariff.currency_label = cur;
    }
    tariff.validate().map_err(|e| bad(e.to_string()))?;
    let baseline = match p.baseline.as_deref() {
        None | Some("none") => BaselineMode::None,
        Some("per-plug") => BaselineMode::PerPlug,
        Some(other) => return Err(bad(format!("baseline must be none or per-plug, got {other}"))),
    };
    let layout = s.opts.layout.clone();
    let report = tokio::task::spawn_blocking(move || {
        query::compute_stats(&layout, &selections, &tariff, baseline)
    })
    .await
    .map_err(|e| ApiError::new(StatusCode::INTERNAL_SERVER_ERROR, e.to_string()))??;
    Ok(Json(report))
}

#[derive(Deserialize)]
struct EventsParams {
    limit: Option<usize>,
}

async fn events(
    State(s): AppStateRef,
    Query(p): Query<EventsParams>,
) -> Result<Json<Vec<crate::notify::Event>>, ApiError> {
    read_events(&s.opts.layout.events_log(), p.limit.unwrap_or(100))
        .map(Json)
        .map_err(|e| ApiError::new(StatusCode::INTERNAL_SERVER_ERROR, e.to_string()))
}

#[derive(Debug, Deserialize)]
#[serde(rename_all = "lowercase")]
enum SessionAction {
    Start,
    Stop,
}

#[derive(Debug, Deserialize)]
struct SessionRequest {
    action: SessionAction,
    experiment_id: ExperimentId,
    plug_id: String,
    #[serde(default)]
    notes: String,
}

async fn sessions(
    State(s): AppStateRef,
    Json(req): Json<SessionRequest>,
) -> Result<Response, ApiError> {
    let Some(collector) = &s.collector else {
        return Err(ApiError::new(
            StatusCode::SERVICE_UNAVAILABLE,
            "no collector in this process; start the server with `emers serve --collect`",
        ));
    };
    let map = |e: CollectorError| {
        let status = match &e {
            CollectorError::UnknownPlug(_) => StatusCode::NOT_FOUND,
            CollectorError::SessionAlreadyActive(_) | CollectorError::NoSession(_) => {
                StatusCode::CONFLICT
            }
            _ => StatusCode::INTERNAL_SERVER_ERROR,
        };
        ApiError::new(status, e.to_string())
    };
    match req.action {
        SessionAction::Start => {
            let session = collector
                .start_session(&req.experiment_id, &req.plug_id, &req.notes)
                .await
                .map_err(map)?;
            Ok((StatusCode::CREATED, Json(json!({ "session": session }))).into_response())
        }
        SessionAction::Stop => {
            let stopped = collector
                .stop_session(Some(&req.experiment_id), &req.plug_id)
                .await
                .map_err(map)?;
            let mut body = json!({ "session": stopped.session });
            if stopped.already_closed {
                body["warning"] = "session was already closed".into();
            }
            Ok(Json(body).into_response())
        }
    }
}

/// Report request as posted by the dashboard; the tariff falls back to the
/// server's defaults.
#[derive(Deserialize)]
struct ReportBody {
    experiments: Vec<Selection>,
    tariff: Option<TariffSettings>,
    #[serde(default)]
    baseline: BaselineMode,
    #[serde(default)]
    charts: reporting::ChartOptions,
    #[serde(default)]
    format: reporting::ReportFormat,
}

async fn reports(
    State(s): AppStateRef,
    Json(body): Json<ReportBody>,
) -> Result<Json<serde_json::Value>, ApiError> {
    let request = ReportRequest {
        experiments: body.experiments,
        tariff: body.tariff.unwrap_or_else(|| s.opts.tariff.clone()),
        baseline: body.baseline,
        charts: body.charts,
        format: body.format,
    };
    let layout = s.opts.layout.clone();
    let out = s
        .opts
        .reports_dir
        .clone()
        .unwrap_or_else(|| layout.root().join("reports"));
    let now = chrono::DateTime::from_timestamp_millis(s.opts.clock.now_ms()).unwrap_or_default();
    let (report, written) = tokio::task::spawn_blocking(move || {
        let report = reporting::generate_report(&layout, &request, now)?;
        let written = report.write(&out)?;
        Ok::<_, ReportError>((report, written))
    })
    .await
    .map_err(|e| ApiError::new(StatusCode::INTERNAL_SERVER_ERROR, e.to_string()))??;
    Ok(Json(json!({
        "document_path": written.document_path,
        "sidecar_path": written.sidecar_path,
        "sidecar": report.sidecar,
    })))
}

struct Tail {
    layout: Layout,
    plug: PlugId,
    clock: Clock,
    path: Option<PathBuf>,
    offset: u64,
    /// Skip samples up to this seq in the first file (resume).
    resume_after: Option<u64>,
    queue: std::collections::VecDeque<PowerSample>,
    shutdown: watch::Receiver<bool>,
}

impl Tail {
    /// Reads newly completed lines. The first call without a resume point
    /// starts at the current end of file.
    fn refill(&mut self, first: bool) {
        let path = query::live_path(&self.layout, &self.plug, self.clock.now_ms());
        if self.path.as_ref() != Some(&path) {
            let switching = self.path.is_some();
            self.path = Some(path.clone());
            self.offset = 0;
            if switching {
                self.resume_after = None;
            } else if first && self.resume_after.is_none() {
                self.offset = std::fs::metadata(&path).map_or(0, |m| m.len());
                // Back up to the last line boundary so a half-written line
                // is read once it completes.
                self.offset = self.offset.saturating_sub(last_partial_len(&path, self.offset));
            }
        }
        let Ok(mut f) = std::fs::File::open(&path) else { return };
        if f.seek(SeekFrom::Start(self.offset)).is_err() {
            return;
        }
        let mut buf = Vec::new();
        if f.read_to_end(&mut buf).is_err() {
            return;
        }
        let Some(end) = buf.iter().rposition(|&b| b == b'\n') else { return };
        for line in buf[..end].split(|&b| b == b'\n') {
            if let Ok(sample) = serde_json::from_slice::<PowerSample>(line) {
                if self.resume_after.is_none_or(|n| sample.seq > n) {
                    self.queue.push_back(sample);
                }
            }
        }
        self.offset += end as u64 + 1;
    }
}

fn last_partial_len(path: &std::path::Path, len: u64) -> u64 {
    let Ok(mut f) = std::fs::File::open(path) else { return 0 };
    let start = len.saturating_sub(4096);
    if f.seek(SeekFrom::Start(start)).is_err() {
        return 0;
    }
    let mut buf = Vec::new();
    let _ = f.by_ref().take(len - start).read_to_end(&mut buf);
    match buf.iter().rposition(|&b| b == b'\n') {
        Some(i) => (buf.len() - i - 1) as u64,
        None if start == 0 => buf.len() as u64,
        None => 0,
    }
}

fn live_stream(mut tail: Tail) -> impl Stream<Item = Result<SseEvent, Infallible>> {
    tail.refill(true);
    futures::stream::unfold(tail, |mut tail| async move {
        loop {
            if *tail.shutdown.borrow() {
                return None;
            }
            if let Some(sample) = tail.queue.pop_front() {
                let event = SseEvent::default()
                    .event("sample")
                    .id(sample.seq.to_string())
                    .data(sample.to_line());
                return Some((Ok(event), tail));
            }
            tokio::select! {
                _ = tokio::time::sleep(TAIL_POLL) => {}
                _ = tail.shutdown.changed() => return None,
            }
            tail.refill(false);
        }
    })
}

async fn live(
    State(s): AppStateRef,
    Path(plug): Path<String>,
    headers: HeaderMap,
) -> Result<Response, ApiError> {
    let plug = PlugId::new(plug).map_err(|e| ApiError::new(StatusCode::NOT_FOUND, e.to_string()))?;
    if !known_plugs(&s).contains(&plug) {
        return Err(ApiError::new(StatusCode::NOT_FOUND, format!("unknown plug {plug}")));
    }
    let resume_after = headers
        .get("last-event-id")
        .and_then(|v| v.to_str().ok())
        .and_then(|v| v.trim().parse::<u64>().ok());
    let tail = Tail {
        layout: s.opts.layout.clone(),
        plug,
        clock: s.opts.clock,
        path: None,
        offset: 0,
        resume_after,
        queue: Default::default(),
        shutdown: s.shutdown.clone(),
    };
    let stream = live_stream(tail);
    Ok(Sse::new(stream)
        .keep_alive(KeepAlive::new().interval(s.opts.heartbeat).text("heartbeat"))
        .into_response())
}
