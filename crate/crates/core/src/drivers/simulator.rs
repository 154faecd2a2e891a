//! Hardware-free plug simulator.
//!
//! Serves every scenario plug under `/plug/<plug_id>` in two shapes:
//!
//! * Shelly Gen2: `/rpc/Switch.GetStatus?id=0`, `/rpc/Shelly.GetDeviceInfo`
//! * plain: `/sim/status`, `/sim/info`
//!
//! The first plug is additionally served at the root, so a single-plug
//! scenario looks exactly like one physical Shelly device.
//!
//! Waveforms are functions of scenario time (seconds since the simulator
//! started, on the shared [`Clock`]). The emulated energy counter is the
//! closed-form integral of the noiseless waveform.

use std::collections::HashMap;
use std::f64::consts::PI;
use std::net::SocketAddr;
use std::sync::{Arc, Mutex};

use axum::extract::{Path, Query, State};
use axum::http::StatusCode;
use axum::response::{IntoResponse, Response};
use axum::routing::get;
use axum::{Json, Router};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use thiserror::Error;
use tokio::net::TcpListener;
use tokio::sync::oneshot;

use super::simulated::{SimInfo, SimStatus};
use crate::clock::Clock;
use crate::model::PlugId;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum Waveform {
    Constant {
        w: f64,
    },
    /// `high_w` for the first half of each period, then `low_w`.
    Square {
        low_w: f64,
        high_w: f64,
        period_s: f64,
    },
    /// Linear from `w0` to `w1` over `duration_s`, then holds `w1`.
    Ramp {
        w0: f64,
        w1: f64,
        duration_s: f64,
    },
    /// Linear interpolation through `(t_s, w)` points, holding the end
    /// values outside them.
    Trace {
        points: Vec<(f64, f64)>,
    },
    /// `mean_w + amplitude_w * sin(2 pi t / period_s)`.
    Sine {
        mean_w: f64,
        amplitude_w: f64,
        period_s: f64,
    },
}

impl Waveform {
    pub fn power_at(&self, t: f64) -> f64 {
        let t = t.max(0.0);
        match self {
            Waveform::Constant { w } => *w,
            Waveform::Square {
                low_w,
                high_w,
                period_s,
            } => {
                if t.rem_euclid(*period_s) < period_s / 2.0 {
                    *high_w
                } else {
                    *low_w
                }
            }
            Waveform::Ramp { w0, w1, duration_s } => {
                if t >= *duration_s {
                    *w1
                } else {
                    w0 + (w1 - w0) * t / duration_s
                }
            }
            Waveform::Trace { points } => {
                let i = points.partition_point(|p| p.0 <= t);
                if i == 0 {
                    points[0].1
                } else if i == points.len() {
                    points[i - 1].1
                } else {
                    let (t0, w0) = points[i - 1];
                    let (t1, w1) = points[i];
                    w0 + (w1 - w0) * (t - t0) / (t1 - t0)
                }
            }
            Waveform::Sine {
                mean_w,
                amplitude_w,
                period_s,
            } => mean_w + amplitude_w * (2.0 * PI * t / period_s).sin(),
        }
    }

    /// Exact integral of the waveform over `[0, t]`, in watt-hours.
    pub fn energy_wh(&self, t: f64) -> f64 {
        let t = t.max(0.0);
        let joules = match self {
            Waveform::Constant { w } => w * t,
            Waveform::Square {
                low_w,
                high_w,
                period_s,
            } => {
                let half = period_s / 2.0;
                let periods = (t / period_s).floor();
                let rem = t - periods * period_s;
                let partial = if rem <= half {
                    high_w * rem
                } else {
                    high_w * half + low_w * (rem - half)
                };
                periods * (high_w + low_w) * half + partial
            }
            Waveform::Ramp { w0, w1, duration_s } => {
                if *duration_s <= 0.0 {
                    w1 * t
                } else if t <= *duration_s {
                    w0 * t + (w1 - w0) * t * t / (2.0 * duration_s)
                } else {
                    (w0 + w1) / 2.0 * duration_s + w1 * (t - duration_s)
                }
            }
            Waveform::Trace { points } => trace_integral(points, t),
            Waveform::Sine {
                mean_w,
                amplitude_w,
                period_s,
            } => mean_w * t + amplitude_w * period_s / (2.0 * PI) * (1.0 - (2.0 * PI * t / period_s).cos()),
        };
        joules / 3600.0
    }

    fn validate(&self) -> Result<(), String> {
        let nonneg = |x: f64| x.is_finite() && x >= 0.0;
        let positive = |x: f64| x.is_finite() && x > 0.0;
        let ok = match self {
            Waveform::Constant { w } => nonneg(*w),
            Waveform::Square {
                low_w,
                high_w,
                period_s,
            } => nonneg(*low_w) && nonneg(*high_w) && positive(*period_s),
            Waveform::Ramp { w0, w1, duration_s } => {
                nonneg(*w0) && nonneg(*w1) && nonneg(*duration_s)
            }
            Waveform::Trace { points } => {
                !points.is_empty()
                    && points.iter().all(|&(t, w)| t.is_finite() && nonneg(w))
                    && points.windows(2).all(|p| p[0].0 < p[1].0)
            }
            Waveform::Sine {
                mean_w,
                amplitude_w,
                period_s,
            } => {
                nonneg(*mean_w)
                    && nonneg(*amplitude_w)
                    && amplitude_w <= mean_w
                    && positive(*period_s)
            }
        };
        if ok {
            Ok(())
        } else {
            Err(format!("invalid waveform {self:?}"))
        }
    }
}

fn trace_integral(points: &[(f64, f64)], t: f64) -> f64 {
    let (first_t, first_w) = points[0];
    let mut joules = first_w * t.min(first_t).max(0.0);
    for seg in points.windows(2) {
        let (t0, w0) = seg[0];
        let (t1, w1) = seg[1];
        if t <= t0 {
            break;
        }
        let end = t.min(t1);
        let w_end = w0 + (w1 - w0) * (end - t0) / (t1 - t0);
        joules += (w0 + w_end) / 2.0 * (end - t0);
    }
    let (last_t, last_w) = points[points.len() - 1];
    if t > last_t {
        joules += last_w * (t - last_t.max(0.0));
    }
    joules
}

fn default_counter() -> bool {
    true
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimPlug {
    pub plug_id: PlugId,
    pub waveform: Waveform,
    #[serde(default)]
    pub noise_sigma_w: f64,
    #[serde(default)]
    pub dropout_p: f64,
    /// Emulate the cumulative energy counter.
    #[serde(default = "default_counter")]
    pub counter: bool,
    #[serde(default)]
    pub counter_start_wh: f64,
}

impl SimPlug {
    pub fn new(plug_id: &str, waveform: Waveform) -> Self {
        SimPlug {
            plug_id: PlugId::new(plug_id).expect("valid plug id"),
            waveform,
            noise_sigma_w: 0.0,
            dropout_p: 0.0,
            counter: true,
            counter_start_wh: 0.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimScenario {
    pub plugs: Vec<SimPlug>,
    #[serde(default)]
    pub seed: u64,
}

#[derive(Debug, Error)]
pub enum SimError {
    #[error("malformed scenario: {0}")]
    Scenario(String),
    #[error("cannot bind {addr}: {source}")]
    Bind {
        addr: SocketAddr,
        #[source]
        source: std::io::Error,
    },
}

impl SimScenario {
    pub fn from_json(text: &str) -> Result<Self, SimError> {
        let s: SimScenario =
            serde_json::from_str(text).map_err(|e| SimError::Scenario(e.to_string()))?;
        s.validate()?;
        Ok(s)
    }

    pub fn validate(&self) -> Result<(), SimError> {
        if self.plugs.is_empty() {
            return Err(SimError::Scenario("no plugs".into()));
        }
        let mut seen = std::collections::HashSet::new();
        for p in &self.plugs {
            if !seen.insert(&p.plug_id) {
                return Err(SimError::Scenario(format!("duplicate plug_id {}", p.plug_id)));
            }
            p.waveform.validate().map_err(SimError::Scenario)?;
            if !(p.noise_sigma_w.is_finite() && p.noise_sigma_w >= 0.0) {
                return Err(SimError::Scenario(format!("{}: bad noise_sigma_w", p.plug_id)));
            }
            if !(0.0..=1.0).contains(&p.dropout_p) {
                return Err(SimError::Scenario(format!("{}: dropout_p outside [0, 1]", p.plug_id)));
            }
            if !(p.counter_start_wh.is_finite() && p.counter_start_wh >= 0.0) {
                return Err(SimError::Scenario(format!("{}: bad counter_start_wh", p.plug_id)));
            }
        }
        Ok(())
    }
}

struct PlugState {
    def: SimPlug,
    rng: ChaCha8Rng,
}

/// One evaluated reading.
#[derive(Debug, Clone, PartialEq)]
pub struct SimReading {
    pub t_ms: i64,
    pub power_w: f64,
    pub energy_wh: Option<f64>,
}

/// Deterministic waveform evaluator shared by the HTTP service and tests.
pub struct SimEngine {
    clock: Clock,
    start_ms: i64,
    plugs: Vec<Mutex<PlugState>>,
    index: HashMap<String, usize>,
}

impl SimEngine {
    pub fn new(scenario: &SimScenario, clock: Clock) -> Result<Self, SimError> {
        scenario.validate()?;
        let plugs = scenario
            .plugs
            .iter()
            .enumerate()
            .map(|(i, p)| {
                Mutex::new(PlugState {
                    def: p.clone(),
                    rng: ChaCha8Rng::seed_from_u64(
                        scenario.seed ^ (i as u64 + 1).wrapping_mul(0x9E37_79B9_7F4A_7C15),
                    ),
                })
            })
            .collect();
        let index = scenario
            .plugs
            .iter()
            .enumerate()
            .map(|(i, p)| (p.plug_id.to_string(), i))
            .collect();
        Ok(SimEngine {
            clock,
            start_ms: clock.now_ms(),
            plugs,
            index,
        })
    }

    pub fn start_ms(&self) -> i64 {
        self.start_ms
    }

    fn slot(&self, plug: &str) -> Option<&Mutex<PlugState>> {
        self.index.get(plug).map(|&i| &self.plugs[i])
    }

    pub fn plug_ids(&self) -> Vec<String> {
        self.plugs
            .iter()
            .map(|p| p.lock().unwrap().def.plug_id.to_string())
            .collect()
    }

    pub fn set_dropout(&self, plug: &str, p: f64) -> bool {
        match self.slot(plug) {
            Some(s) => {
                s.lock().unwrap().def.dropout_p = p.clamp(0.0, 1.0);
                true
            }
            None => false,
        }
    }

    pub fn has_counter(&self, plug: &str) -> Option<bool> {
        self.slot(plug).map(|s| s.lock().unwrap().def.counter)
    }

    /// Evaluates `plug` at scenario time `t_ms` (relative to start).
    /// Returns `None` on a simulated dropout. Advances the plug's noise
    /// generator, so a fixed request sequence is reproducible for a seed.
    pub fn read_at(&self, plug: &str, t_ms: i64) -> Option<Option<SimReading>> {
        let slot = self.slot(plug)?;
        let mut st = slot.lock().unwrap();
        let PlugState { def, rng } = &mut *st;
        if def.dropout_p > 0.0 && rng.random::<f64>() < def.dropout_p {
            return Some(None);
        }
        let t_s = t_ms as f64 / 1000.0;
        let mut power_w = def.waveform.power_at(t_s);
        if def.noise_sigma_w > 0.0 {
            let normal = Normal::new(0.0, def.noise_sigma_w).expect("sigma validated");
            power_w = (power_w + normal.sample(rng)).max(0.0);
        }
        let energy_wh = def
            .counter
            .then(|| def.counter_start_wh + def.waveform.energy_wh(t_s));
        Some(Some(SimReading {
            t_ms,
            power_w,
            energy_wh,
        }))
    }

    pub fn read(&self, plug: &str) -> Option<Option<SimReading>> {
        self.read_at(plug, self.clock.now_ms() - self.start_ms)
    }
}

/// A running simulator service.
pub struct SimHandle {
    pub addr: SocketAddr,
    pub engine: Arc<SimEngine>,
    shutdown: Option<oneshot::Sender<()>>,
    task: tokio::task::JoinHandle<()>,
}

impl SimHandle {
    /// Address string for a plug, suitable for [`crate::model::Address`].
    pub fn plug_address(&self, plug: &str) -> String {
        format!("{}/plug/{plug}", self.addr)
    }

    pub async fn shutdown(mut self) {
        if let Some(tx) = self.shutdown.take() {
            let _ = tx.send(());
        }
        let _ = (&mut self.task).await;
    }
}

impl Drop for SimHandle {
    fn drop(&mut self) {
        if let Some(tx) = self.shutdown.take() {
            let _ = tx.send(());
        }
    }
}

/// Starts the simulator on `bind` (port 0 picks a free port).
pub async fn simulator_serve(
    scenario: &SimScenario,
    bind: SocketAddr,
    clock: Clock,
) -> Result<SimHandle, SimError> {
    let engine = Arc::new(SimEngine::new(scenario, clock)?);
    let listener = TcpListener::bind(bind)
        .await
        .map_err(|source| SimError::Bind { addr: bind, source })?;
    let addr = listener
        .local_addr()
        .map_err(|source| SimError::Bind { addr: bind, source })?;
    let app = router(engine.clone());
    let (tx, rx) = oneshot::channel::<()>();
    let task = tokio::spawn(async move {
        let _ = axum::serve(listener, app)
            .with_graceful_shutdown(async {
                let _ = rx.await;
            })
            .await;
    });
    Ok(SimHandle {
        addr,
        engine,
        shutdown: Some(tx),
        task,
    })
}

pub fn router(engine: Arc<SimEngine>) -> Router {
    Router::new()
        .route("/plug/{plug}/rpc/Switch.GetStatus", get(shelly_status))
        .route("/plug/{plug}/rpc/Shelly.GetDeviceInfo", get(shelly_info))
        .route("/plug/{plug}/sim/status", get(plain_status))
        .route("/plug/{plug}/sim/info", get(plain_info))
        .route("/rpc/Switch.GetStatus", get(root_shelly_status))
        .route("/rpc/Shelly.GetDeviceInfo", get(root_shelly_info))
        .route("/sim/status", get(root_plain_status))
        .route("/sim/info", get(root_plain_info))
        .with_state(engine)
}

type Engine = State<Arc<SimEngine>>;

#[derive(Deserialize)]
struct SwitchQuery {
    id: Option<i64>,
}

fn not_found(plug: &str) -> Response {
    (
        StatusCode::NOT_FOUND,
        Json(serde_json::json!({"code": 404, "message": format!("no such plug {plug}")})),
    )
        .into_response()
}

fn dropout() -> Response {
    (StatusCode::SERVICE_UNAVAILABLE, "simulated dropout").into_response()
}

fn first_plug(engine: &SimEngine) -> String {
    engine.plug_ids().into_iter().next().unwrap_or_default()
}

fn shelly_status_body(engine: &SimEngine, plug: &str, id: Option<i64>) -> Response {
    if id.unwrap_or(0) != 0 {
        return (
            StatusCode::INTERNAL_SERVER_ERROR,
            Json(serde_json::json!({
                "code": -105,
                "message": format!("Argument 'id', value {} not found!", id.unwrap_or(0)),
            })),
        )
            .into_response();
    }
    match engine.read(plug) {
        None => not_found(plug),
        Some(None) => dropout(),
        Some(Some(r)) => {
            let epoch_s = (engine.start_ms + r.t_ms) / 1000;
            let mut body = serde_json::json!({
                "id": 0,
                "source": "init",
                "output": true,
                "apower": r.power_w,
                "voltage": 230.0,
                "current": r.power_w / 230.0,
                "temperature": {"tC": 40.0, "tF": 104.0},
            });
            if let Some(wh) = r.energy_wh {
                body["aenergy"] = serde_json::json!({
                    "total": wh,
                    "by_minute": [0.0, 0.0, 0.0],
                    "minute_ts": epoch_s - epoch_s % 60,
                });
            }
            Json(body).into_response()
        }
    }
}

fn shelly_info_body(engine: &SimEngine, plug: &str) -> Response {
    if engine.has_counter(plug).is_none() {
        return not_found(plug);
    }
    Json(serde_json::json!({
        "name": null,
        "id": format!("shellyplusplugs-sim-{plug}"),
        "mac": "000000000000",
        "slot": 0,
        "model": "SNPL-00112EU",
        "gen": 2,
        "fw_id": "emers-simulator",
        "ver": env!("CARGO_PKG_VERSION"),
        "app": "PlugS",
        "auth_en": false,
        "auth_domain": null,
    }))
    .into_response()
}

fn plain_status_body(engine: &SimEngine, plug: &str) -> Response {
    match engine.read(plug) {
        None => not_found(plug),
        Some(None) => dropout(),
        Some(Some(r)) => Json(SimStatus {
            plug_id: plug.to_owned(),
            t_ms: engine.start_ms + r.t_ms,
            power_w: r.power_w,
            energy_wh: r.energy_wh,
        })
        .into_response(),
    }
}

fn plain_info_body(engine: &SimEngine, plug: &str) -> Response {
    match engine.has_counter(plug) {
        None => not_found(plug),
        Some(has_energy_counter) => Json(SimInfo {
            model: "emers-simulator".into(),
            firmware: env!("CARGO_PKG_VERSION").into(),
            has_energy_counter,
        })
        .into_response(),
    }
}

async fn shelly_status(
    State(e): Engine,
    Path(plug): Path<String>,
    Query(q): Query<SwitchQuery>,
) -> Response {
    shelly_status_body(&e, &plug, q.id)
}

async fn shelly_info(State(e): Engine, Path(plug): Path<String>) -> Response {
    shelly_info_body(&e, &plug)
}

async fn plain_status(State(e): Engine, Path(plug): Path<String>) -> Response {
    plain_status_body(&e, &plug)
}

async fn plain_info(State(e): Engine, Path(plug): Path<String>) -> Response {
    plain_info_body(&e, &plug)
}

async fn root_shelly_status(State(e): Engine, Query(q): Query<SwitchQuery>) -> Response {
    let plug = first_plug(&e);
    shelly_status_body(&e, &plug, q.id)
}

async fn root_shelly_info(State(e): Engine) -> Response {
    let plug = first_plug(&e);
    shelly_info_body(&e, &plug)
}

async fn root_plain_status(State(e): Engine) -> Response {
    let plug = first_plug(&e);
    plain_status_body(&e, &plug)
}

async fn root_plain_info(State(e): Engine) -> Response {
    let plug = first_plug(&e);
    plain_info_body(&e, &plug)
}
