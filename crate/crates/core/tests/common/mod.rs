#![allow(dead_code)]

use std::net::SocketAddr;
use std::path::Path;

use emers::clock::Clock;
use emers::drivers::simulator::{simulator_serve, SimHandle, SimPlug, SimScenario, Waveform};
use emers::model::{DriverKind, PlugConfig, PlugId, PowerSample};

pub fn loopback() -> SocketAddr {
    "127.0.0.1:0".parse().unwrap()
}

pub fn constant(id: &str, w: f64) -> SimPlug {
    SimPlug::new(id, Waveform::Constant { w })
}

pub async fn start_sim(plugs: Vec<SimPlug>, seed: u64, clock: Clock) -> SimHandle {
    simulator_serve(&SimScenario { plugs, seed }, loopback(), clock)
        .await
        .expect("simulator starts")
}

pub fn plug_config(sim: &SimHandle, id: &str, driver: DriverKind, interval_ms: u64) -> PlugConfig {
    PlugConfig::new(
        PlugId::new(id).unwrap(),
        driver,
        sim.plug_address(id).parse().unwrap(),
    )
    .with_interval(interval_ms)
}

pub fn read_samples(path: &Path) -> Vec<PowerSample> {
    emers::storage::read_stream(path, None).unwrap().samples
}

pub fn jsonl_files(dir: &Path) -> Vec<std::path::PathBuf> {
    let mut out = Vec::new();
    let Ok(entries) = std::fs::read_dir(dir) else {
        return out;
    };
    for e in entries.flatten() {
        let p = e.path();
        if p.is_dir() {
            out.extend(jsonl_files(&p));
        } else if p.to_string_lossy().ends_with(".samples.jsonl") {
            out.push(p);
        }
    }
    out.sort();
    out
}

pub fn fixture_logs() -> std::path::PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("fixtures/logs")
}

/// Recursively copies `src` into `dst`.
pub fn copy_tree(src: &Path, dst: &Path) {
    std::fs::create_dir_all(dst).unwrap();
    for e in std::fs::read_dir(src).unwrap().flatten() {
        let to = dst.join(e.file_name());
        if e.path().is_dir() {
            copy_tree(&e.path(), &to);
        } else {
            std::fs::copy(e.path(), to).unwrap();
        }
    }
}

/// Every file under `dir` with its contents, for checking that nothing changed.
pub fn snapshot(dir: &Path) -> Vec<(std::path::PathBuf, Vec<u8>)> {
    let mut out = Vec::new();
    for e in std::fs::read_dir(dir).unwrap().flatten() {
        if e.path().is_dir() {
            out.extend(snapshot(&e.path()));
        } else {
            out.push((e.path(), std::fs::read(e.path()).unwrap()));
        }
    }
    out.sort();
    out
}

/// `emers` invocation with config and logs inside `dir`.
pub fn emers(dir: &Path) -> std::process::Command {
    let mut c = std::process::Command::new(env!("CARGO_BIN_EXE_emers"));
    c.arg("--config")
        .arg(dir.join("emers.toml"))
        .arg("--logs")
        .arg(dir.join("logs"))
        .current_dir(dir)
        .env("RUST_LOG", "warn");
    c
}

pub fn write_config(dir: &Path, plugs: Vec<PlugConfig>) {
    let config = emers::config::Config {
        plugs,
        ..Default::default()
    };
    std::fs::write(dir.join("emers.toml"), config.to_toml()).unwrap();
}

/// Hashes of the fixture reports generated by [`golden_request`] at
/// [`pinned`]. Changing the report layout or any formatting rule changes
/// these on purpose.
pub const GOLDEN_MARKDOWN: (&str, &str) = (
    "222dd8393789b34970c65bb8562208d77616dcb5502bbc17062a847bcfde5346",
    "0cbfaa23160d669bb03c2b224f926863959fd5b152490dac13e58897d05c913e",
);
pub const GOLDEN_HTML: (&str, &str) = (
    "75a5c439151023a82333ae32fd1859c1d45a7418c8750abb0119461517b5b915",
    "b0a654bb86443512c90f9658a54aa59379f4480c83bde3ef7d9651efa70035dd",
);

pub fn pinned() -> chrono::DateTime<chrono::Utc> {
    "2024-05-02T09:30:00Z".parse().unwrap()
}

pub fn golden_request(format: emers::reporting::ReportFormat) -> emers::reporting::ReportRequest {
    use emers::query::Selection;
    emers::reporting::ReportRequest {
        experiments: vec![
            Selection::all("e1".parse().unwrap()),
            Selection::all("e2".parse().unwrap()),
        ],
        tariff: emers::model::TariffSettings::new(0.30, "EUR", 400.0).unwrap(),
        baseline: emers::query::BaselineMode::PerPlug,
        charts: Default::default(),
        format,
    }
}
