//! Acceptance checks, one pass/fail line per criterion.
//!
//! Runs without the libtest harness so the result lines are always printed.
//! Exits non-zero if any criterion fails.

mod common;

use std::io::{Read, Write};
use std::net::{IpAddr, SocketAddr, TcpStream};
use std::panic::AssertUnwindSafe;
use std::process::Stdio;
use std::time::{Duration, Instant};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use sha2::{Digest, Sha256};
use tokio::runtime::Runtime;

use emers::analytics::{
    compare_measurements, integrate_energy, measure_baseline, summarize, CompareOptions, SeriesWindow,
    Verdict,
};
use emers::clock::Clock;
use emers::collector::Collector;
use emers::config::BindScope;
use emers::drivers::simulator::{SimEngine, SimPlug, SimScenario, Waveform};
use emers::drivers::DriverRegistry;
use emers::model::{DriverKind, PlugConfig, PlugId, PowerSample, TariffSettings};
use emers::notify::Notifier;
use emers::par::Exec;
use emers::query::{self, StatsReport};
use emers::reporting::{generate_report_with, stats_text, ReportFormat};
use emers::server::{start, ServeOptions};
use emers::storage::{list_experiments, load_baseline, read_meta, read_stream, Layout, SessionStatus, StreamWriter};

use common::*;

type Check = fn(&Runtime) -> Result<String, String>;

fn ensure(cond: bool, msg: impl FnOnce() -> String) -> Result<(), String> {
    if cond {
        Ok(())
    } else {
        Err(msg())
    }
}

fn e<T: std::fmt::Display>(x: T) -> String {
    x.to_string()
}

fn main() {
    if std::env::args().any(|a| a == "--list") {
        return;
    }
    let rt = tokio::runtime::Builder::new_multi_thread()
        .enable_all()
        .build()
        .unwrap();
    let checks: [(u8, &str, Check); 9] = [
        (1, "cross-interval agreement", c1_cross_interval),
        (2, "oracle exactness", c2_oracle_exactness),
        (3, "baseline reproduction", c3_baseline),
        (4, "cost/carbon linearity", c4_linearity),
        (5, "crash durability", c5_crash_durability),
        (6, "report determinism", c6_report_determinism),
        (7, "API/library equivalence", c7_api_equivalence),
        (8, "bind scope", c8_bind_scope),
        (9, "collector overhead", c9_overhead),
    ];
    let mut failed = 0;
    println!();
    for (n, name, check) in checks {
        let t = Instant::now();
        let result = std::panic::catch_unwind(AssertUnwindSafe(|| check(&rt)))
            .unwrap_or_else(|p| {
                Err(p
                    .downcast_ref::<String>()
                    .cloned()
                    .or_else(|| p.downcast_ref::<&str>().map(|s| s.to_string()))
                    .unwrap_or_else(|| "panicked".into()))
            });
        let secs = t.elapsed().as_secs_f64();
        match result {
            Ok(detail) => println!("acceptance {n} PASS {name}: {detail} [{secs:.1} s]"),
            Err(detail) => {
                failed += 1;
                println!("acceptance {n} FAIL {name}: {detail} [{secs:.1} s]");
            }
        }
        std::io::stdout().flush().unwrap();
    }
    println!("acceptance: {} passed, {failed} failed", 9 - failed);
    if failed > 0 {
        std::process::exit(1);
    }
}

fn samples_of(layout: &Layout, plug: &str) -> Vec<PowerSample> {
    jsonl_files(&layout.standalone_dir(&PlugId::new(plug).unwrap()))
        .iter()
        .flat_map(|f| read_samples(f))
        .collect()
}

/// 1 s and 10 s polling of the same 80 +/- 20 W, 60 s sine over one hour,
/// compressed 60x.
fn c1_cross_interval(rt: &Runtime) -> Result<String, String> {
    rt.block_on(async {
        let dir = tempfile::tempdir().map_err(e)?;
        // Start of a UTC day plus one hour, so the run stays in one file.
        let clock = Clock::scaled(1_714_525_200_000, 60.0);
        let mut plug = SimPlug::new(
            "sine",
            Waveform::Sine {
                mean_w: 80.0,
                amplitude_w: 20.0,
                period_s: 60.0,
            },
        );
        plug.counter = false;
        let sim = start_sim(vec![plug], 1, clock).await;
        let layout = Layout::new(dir.path());
        let mut c = Collector::new(layout.clone(), clock, Notifier::memory());
        for (id, interval) in [("fine", 1_000), ("coarse", 10_000)] {
            let cfg = PlugConfig::new(
                PlugId::new(id).unwrap(),
                DriverKind::ShellyGen2,
                sim.plug_address("sine").parse().unwrap(),
            )
            .with_interval(interval);
            let driver = DriverRegistry::new().build(&cfg).map_err(e)?;
            c.add_plug(cfg, driver).map_err(e)?;
        }
        tokio::time::sleep(clock.real_duration(3_600_000 + 5_000)).await;
        c.shutdown().await;

        let coarse = SeriesWindow::from_samples(samples_of(&layout, "coarse"))
            .map_err(e)?
            .with_interval(10_000);
        let fine_all = SeriesWindow::from_samples(samples_of(&layout, "fine"))
            .map_err(e)?
            .with_interval(1_000);
        // Both collectors share a clock and start together, so their poll
        // grids line up; compare over the span both cover.
        let fine = query::clip(&fine_all, Some(coarse.t0() - 500), Some(coarse.t1() + 500)).map_err(e)?;
        ensure(coarse.duration_s() >= 3590.0, || format!("coarse span only {} s", coarse.duration_s()))?;
        let tariff = TariffSettings::default();
        let a = summarize(&fine, &tariff, None, "fine").map_err(e)?;
        let b = summarize(&coarse, &tariff, None, "coarse").map_err(e)?;
        ensure(a.gap_count == 0 && b.gap_count == 0, || {
            format!("unexpected gaps: fine {} coarse {}", a.gap_count, b.gap_count)
        })?;
        let cmp = compare_measurements(
            &a,
            &b,
            &CompareOptions {
                threshold: 0.001,
                window_tolerance_ms: Some(1_000),
            },
        )
        .map_err(e)?;
        let detail = format!(
            "relative diff {:.2e} < 1e-3 ({} samples at 1 s: {:.6} kWh, {} samples at 10 s: {:.6} kWh)",
            cmp.relative_diff, a.sample_count, a.energy_kwh, b.sample_count, b.energy_kwh
        );
        ensure(cmp.verdict == Verdict::Agree && cmp.relative_diff < 0.001, || detail.clone())?;
        Ok(detail)
    })
}

/// Piecewise-linear area computed directly from the breakpoints.
fn trace_area_wh(points: &[(f64, f64)], t_end: f64) -> f64 {
    let mut joules = 0.0;
    for w in points.windows(2) {
        let ((t0, w0), (t1, w1)) = (w[0], w[1]);
        joules += (w0 + w1) * (t1 - t0) / 2.0;
    }
    let (t_last, w_last) = points[points.len() - 1];
    joules += w_last * (t_end - t_last);
    joules / 3600.0
}

fn c2_oracle_exactness(_: &Runtime) -> Result<String, String> {
    let mut rng = ChaCha8Rng::seed_from_u64(0x5EED);
    let mut worst = 0.0f64;
    let cases = 250;
    for case in 0..cases {
        let n = rng.random_range(2..12);
        let mut t = 0.0;
        let mut points = Vec::new();
        for i in 0..n {
            if i > 0 {
                t += rng.random_range(1..600) as f64;
            }
            points.push((t, rng.random_range(0.0..400.0)));
        }
        let t_end = t + rng.random_range(0..120) as f64;
        let waveform = Waveform::Trace { points: points.clone() };
        let scenario = SimScenario {
            plugs: vec![SimPlug::new("pwl", waveform.clone())],
            seed: case,
        };
        let engine = SimEngine::new(&scenario, Clock::system()).map_err(e)?;
        let plug = PlugId::new("pwl").unwrap();
        // 1 s polling; every breakpoint falls on a whole second.
        let samples: Vec<PowerSample> = (0..=t_end as i64)
            .map(|s| {
                let r = engine.read_at("pwl", s * 1000).unwrap().unwrap();
                PowerSample::new(s * 1000, s as u64 + 1, plug.clone(), r.power_w)
            })
            .collect();
        let window = SeriesWindow::from_samples(samples).map_err(e)?.with_interval(1000);
        let got = integrate_energy(&window).energy_wh;
        for (label, exact) in [
            ("breakpoint sum", trace_area_wh(&points, t_end)),
            ("closed form", waveform.energy_wh(t_end)),
        ] {
            let rel = if exact == 0.0 { got.abs() } else { ((got - exact) / exact).abs() };
            worst = worst.max(rel);
            ensure(rel < 1e-9, || format!("case {case}: {label} {exact} Wh vs {got} Wh (rel {rel:.2e})"))?;
        }
    }
    Ok(format!("{cases} random piecewise-linear waveforms, worst relative error {worst:.2e} < 1e-9"))
}

/// 69.15 W with sigma 1 W noise through the CLI baseline command.
fn c3_baseline(rt: &Runtime) -> Result<String, String> {
    rt.block_on(async {
        let dir = tempfile::tempdir().map_err(e)?;
        let mut plug = SimPlug::new("idle", Waveform::Constant { w: 69.15 });
        plug.noise_sigma_w = 1.0;
        let sim = start_sim(vec![plug], 2024, Clock::system()).await;
        write_config(dir.path(), vec![plug_config(&sim, "idle", DriverKind::Simulated, 1000)]);
        let mut cmd = emers(dir.path());
        cmd.args(["baseline", "--plug", "idle", "--duration", "599s", "--time-scale", "100"]);
        let out = tokio::task::spawn_blocking(move || cmd.output()).await.map_err(e)?.map_err(e)?;
        let stdout = String::from_utf8_lossy(&out.stdout).trim().to_owned();
        ensure(out.status.success(), || {
            format!("exit {:?}: {}", out.status.code(), String::from_utf8_lossy(&out.stderr))
        })?;
        let layout = Layout::new(dir.path().join("logs"));
        let stored = load_baseline(&layout, &PlugId::new("idle").unwrap())
            .map_err(e)?
            .ok_or("no stored baseline")?;
        // "<plug>: <mean> ± <spread> W (<n> samples)"
        let shown = stdout.strip_prefix("idle: ").ok_or_else(|| stdout.clone())?;
        let shape = shown.split(" (").next().unwrap_or("");
        let parts: Vec<&str> = shape.split(' ').collect();
        let two_dp = |s: &str| s.split_once('.').is_some_and(|(a, b)| !a.is_empty() && b.len() == 2 && s.replace('.', "").chars().all(|c| c.is_ascii_digit()));
        ensure(parts.len() == 4 && two_dp(parts[0]) && parts[1] == "±" && two_dp(parts[2]) && parts[3] == "W", || {
            format!("output {stdout:?} does not have the \"mean ± spread W\" shape")
        })?;
        ensure(stored.sample_count >= 590, || format!("only {} samples", stored.sample_count))?;
        let err = (stored.mean_w - 69.15).abs();
        ensure(err < 0.2, || format!("mean {} W is {err:.3} W from 69.15", stored.mean_w))?;

        // The same analytics on the engine directly, exactly 600 samples.
        let scenario = SimScenario {
            plugs: vec![{
                let mut p = SimPlug::new("idle", Waveform::Constant { w: 69.15 });
                p.noise_sigma_w = 1.0;
                p
            }],
            seed: 2024,
        };
        let engine = SimEngine::new(&scenario, Clock::system()).map_err(e)?;
        let id = PlugId::new("idle").unwrap();
        let samples: Vec<PowerSample> = (0..600)
            .map(|i| {
                let r = engine.read_at("idle", i * 1000).unwrap().unwrap();
                PowerSample::new(i * 1000, i as u64 + 1, id.clone(), r.power_w)
            })
            .collect();
        let direct = measure_baseline(&SeriesWindow::from_samples(samples).map_err(e)?).map_err(e)?;
        ensure((direct.mean_w - 69.15).abs() < 0.2, || format!("direct mean {}", direct.mean_w))?;
        Ok(format!(
            "CLI printed {shape:?} from {} samples; 600-sample engine run {direct}; both within 0.2 W of 69.15",
            stored.sample_count
        ))
    })
}

/// Distance in units in the last place between two finite doubles.
fn ulps(a: f64, b: f64) -> u64 {
    let key = |x: f64| {
        let bits = x.to_bits() as i64;
        if bits < 0 { i64::MIN - bits } else { bits }
    };
    key(a).abs_diff(key(b))
}

fn c4_linearity(_: &Runtime) -> Result<String, String> {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let plug = PlugId::new("lin").unwrap();
    let trials = 2000;
    let mut worst = 0;
    for i in 0..trials {
        let price: f64 = rng.random_range(0.0..2.0);
        let carbon: f64 = rng.random_range(0.0..1200.0);
        let tariff = TariffSettings::new(price, "EUR", carbon).map_err(e)?;
        // Energy from a constant-power window, so it goes through summarize.
        let w: f64 = rng.random_range(1.0..3000.0);
        let secs: i64 = rng.random_range(2..20_000);
        let samples = vec![
            PowerSample::new(0, 1, plug.clone(), w),
            PowerSample::new(secs * 1000, 2, plug.clone(), w),
        ];
        let s = summarize(&SeriesWindow::from_samples(samples).map_err(e)?, &tariff, None, "lin").map_err(e)?;
        let kwh = s.energy_kwh;
        // Correctly rounded product; fma gives the exact residual.
        for (label, got, factor) in [("cost", s.cost, price), ("carbon", s.carbon_g, carbon)] {
            let residual = kwh.mul_add(factor, -got);
            let d = ulps(got, kwh * factor);
            worst = worst.max(d);
            ensure(d <= 1 && residual.abs() <= got.abs() * f64::EPSILON, || {
                format!("trial {i}: {label} {got} vs {kwh} x {factor} ({d} ulp)")
            })?;
        }
        let e_direct: f64 = rng.random_range(0.0..1e4);
        ensure(ulps(tariff.cost(e_direct), e_direct * price) <= 1, || format!("trial {i}: direct cost"))?;
        ensure(ulps(tariff.carbon_g(e_direct), e_direct * carbon) <= 1, || format!("trial {i}: direct carbon"))?;
    }
    let t = TariffSettings::new(0.30, "EUR", 400.0).map_err(e)?;
    let plug_samples = vec![
        PowerSample::new(0, 1, plug.clone(), 1000.0),
        PowerSample::new(3_600_000, 2, plug.clone(), 1000.0),
    ];
    let one = summarize(&SeriesWindow::from_samples(plug_samples).map_err(e)?, &t, None, "one").map_err(e)?;
    ensure(one.energy_kwh == 1.0 && one.cost == 0.30 && one.carbon_g == 400.0, || {
        format!("1 kWh gave cost {} carbon {}", one.cost, one.carbon_g)
    })?;
    ensure(emers::reporting::fmt_cost(one.cost) == "0.30", || "cost display".into())?;
    Ok(format!(
        "{trials} random triples within {worst} ulp; 1 kWh at 0.30/kWh and 400 g/kWh gives 0.3 and 400 g exactly"
    ))
}

fn c5_crash_durability(rt: &Runtime) -> Result<String, String> {
    rt.block_on(async {
        let dir = tempfile::tempdir().map_err(e)?;
        let sim = start_sim(vec![constant("crash", 55.0)], 5, Clock::system()).await;
        write_config(dir.path(), vec![plug_config(&sim, "crash", DriverKind::ShellyGen2, 100)]);
        let mut rng = ChaCha8Rng::seed_from_u64(55);
        let layout = Layout::new(dir.path().join("logs"));
        let exp_dir = dir.path().join("logs/experiments/durability");
        let mut kills = 0;
        let mut torn = 0;
        let mut total = 0usize;
        // 1000 polls at 100 ms of virtual time; 50x compression makes a
        // full run last two seconds.
        for trial in 0..50 {
            let mut child = emers(dir.path())
                .args([
                    "log", "--plug", "crash", "--experiment", "durability",
                    "--duration", "100s", "--time-scale", "50",
                ])
                .stdout(Stdio::null())
                .stderr(Stdio::null())
                .spawn()
                .map_err(e)?;
            let before = sessions_in(&exp_dir);
            let deadline = Instant::now() + Duration::from_secs(10);
            while sessions_in(&exp_dir) == before {
                ensure(Instant::now() < deadline, || format!("trial {trial}: session never started"))?;
                tokio::time::sleep(Duration::from_millis(5)).await;
            }
            tokio::time::sleep(Duration::from_micros(rng.random_range(0..2_000_000))).await;
            child.kill().map_err(e)?;
            let status = tokio::task::spawn_blocking(move || child.wait()).await.map_err(e)?.map_err(e)?;
            if status.code().is_none() {
                kills += 1;
            }
        }

        let catalog = list_experiments(&layout).map_err(e)?;
        let exp = catalog.experiment("durability").ok_or("experiment missing")?;
        ensure(exp.sessions.len() == 50, || format!("{} sessions", exp.sessions.len()))?;
        for s in &exp.sessions {
            let path = layout.session_samples(&exp.experiment_id, &s.session_id);
            let bytes = std::fs::read(&path).unwrap_or_default();
            let read = read_stream(&path, None).map_err(|x| format!("{}: {x}", path.display()))?;
            let tail = &bytes[read.consumed_bytes as usize..];
            ensure(!tail.contains(&b'\n') && read.warnings.len() <= (!tail.is_empty()) as usize, || {
                format!("{}: more than the final line lost", path.display())
            })?;
            torn += (!tail.is_empty()) as usize;
            let seqs: Vec<u64> = read.samples.iter().map(|x| x.seq).collect();
            ensure(seqs.iter().copied().eq(1..=seqs.len() as u64), || format!("{}: seq gap", path.display()))?;
            total += seqs.len();
            let meta = read_meta(&layout.session_meta(&exp.experiment_id, &s.session_id)).map_err(e)?;
            let finished = meta.end_ts.is_some();
            ensure(finished == (s.status == SessionStatus::Closed), || format!("{}: status {:?}", s.session_id, s.status))?;
            ensure(finished || s.status == SessionStatus::Unclosed, || format!("{}: status {:?}", s.session_id, s.status))?;
            // Reopening repairs the tail and continues numbering.
            let w = StreamWriter::open(&path).map_err(e)?;
            ensure(w.next_seq() == seqs.len() as u64 + 1, || format!("{}: resumes at {}", path.display(), w.next_seq()))?;
        }
        let unclosed = exp.sessions.iter().filter(|s| s.status == SessionStatus::Unclosed).count();
        ensure(kills >= 45 && unclosed >= 45, || format!("only {kills} kills, {unclosed} unclosed sessions"))?;
        let stats = query::compute_stats(
            &layout,
            &[query::Selection::all("durability".parse().unwrap())],
            &TariffSettings::default(),
            query::BaselineMode::None,
        )
        .map_err(e)?;
        Ok(format!(
            "{kills} SIGKILLs, {total} samples in 50 files all parse, {torn} torn final lines, {unclosed} sessions recovered as unclosed, stats over {} samples",
            stats.aggregate.sample_count
        ))
    })
}

fn sessions_in(dir: &std::path::Path) -> usize {
    std::fs::read_dir(dir)
        .map(|d| d.flatten().filter(|f| f.file_name().to_string_lossy().ends_with(".meta.json")).count())
        .unwrap_or(0)
}

fn c6_report_determinism(_: &Runtime) -> Result<String, String> {
    let layout = Layout::new(fixture_logs());
    let sha = |b: &[u8]| query::hex(&Sha256::digest(b));
    for (format, golden) in [(ReportFormat::Markdown, GOLDEN_MARKDOWN), (ReportFormat::Html, GOLDEN_HTML)] {
        let req = golden_request(format);
        let a = generate_report_with(&layout, &req, pinned(), Exec::Sequential).map_err(e)?;
        let b = generate_report_with(&layout, &req, pinned(), Exec::Parallel).map_err(e)?;
        ensure(a.document == b.document && a.sidecar_json == b.sidecar_json, || format!("{format:?}: runs differ"))?;
        let got = (sha(a.document.as_bytes()), sha(a.sidecar_json.as_bytes()));
        ensure((got.0.as_str(), got.1.as_str()) == golden, || format!("{format:?}: hashes {got:?} differ from the recorded ones"))?;
    }
    // Two CLI runs into separate directories.
    let dir = tempfile::tempdir().map_err(e)?;
    let mut docs = Vec::new();
    for run in ["a", "b"] {
        let out = dir.path().join(run);
        let o = std::process::Command::new(env!("CARGO_BIN_EXE_emers"))
            .arg("--config")
            .arg(dir.path().join("none.toml"))
            .arg("--logs")
            .arg(fixture_logs())
            .args(["report", "--experiments", "e1,e2", "--price", "0.30", "--carbon", "400", "--currency", "EUR"])
            .args(["--baseline", "per-plug", "--generated-at", "2024-05-02T09:30:00Z", "--out"])
            .arg(&out)
            .output()
            .map_err(e)?;
        ensure(o.status.success(), || String::from_utf8_lossy(&o.stderr).into_owned())?;
        let doc = std::fs::read(out.join("report-20240502T093000Z.md")).map_err(e)?;
        let side = std::fs::read(out.join("report-20240502T093000Z.summary.json")).map_err(e)?;
        docs.push((sha(&doc), sha(&side)));
    }
    ensure(docs[0] == docs[1], || "CLI runs differ".into())?;
    ensure((docs[0].0.as_str(), docs[0].1.as_str()) == GOLDEN_MARKDOWN, || "CLI output differs from library output".into())?;
    Ok(format!(
        "markdown and html identical across sequential/parallel and two CLI runs; document sha256 {}..",
        &GOLDEN_MARKDOWN.0[..16]
    ))
}

fn c7_api_equivalence(rt: &Runtime) -> Result<String, String> {
    rt.block_on(async {
        let mut opts = ServeOptions::new(Layout::new(fixture_logs()));
        opts.port = 0;
        let h = start(opts, None).await.map_err(e)?;
        let query_str = "experiments=e1,e2&price=0.3&carbon=400&currency=EUR&baseline=per-plug";
        let body = reqwest::Client::builder()
            .no_proxy()
            .build()
            .map_err(e)?
            .get(format!("http://{}/api/stats?{query_str}", h.addr))
            .send()
            .await
            .map_err(e)?
            .bytes()
            .await
            .map_err(e)?;
        h.shutdown().await;
        let api: StatsReport = serde_json::from_slice(&body).map_err(e)?;

        // Recompute each session independently from the raw files.
        let layout = Layout::new(fixture_logs());
        let tariff = TariffSettings::new(0.3, "EUR", 400.0).map_err(e)?;
        let mut fields = 0;
        for exp in &api.experiments {
            for s in &exp.sessions {
                let meta = read_meta(&layout.session_meta(&exp.experiment_id, &s.session_id)).map_err(e)?;
                let range = meta.end_ts.map(|end| (meta.start_ts, end));
                let samples = read_stream(&layout.session_samples(&exp.experiment_id, &s.session_id), range)
                    .map_err(e)?
                    .samples;
                let window = SeriesWindow::from_samples(samples).map_err(e)?.with_interval(meta.interval_ms);
                let baseline = load_baseline(&layout, &meta.plug_id).map_err(e)?;
                let lib = summarize(&window, &tariff, baseline.as_ref(), exp.experiment_id.as_str()).map_err(e)?;
                let pairs = [
                    ("energy_kwh", lib.energy_kwh, s.summary.energy_kwh),
                    ("energy_kwh_integrated", lib.energy_kwh_integrated, s.summary.energy_kwh_integrated),
                    ("mean_power_w", lib.mean_power_w, s.summary.mean_power_w),
                    ("std_power_w", lib.std_power_w, s.summary.std_power_w),
                    ("min_power_w", lib.min_power_w, s.summary.min_power_w),
                    ("max_power_w", lib.max_power_w, s.summary.max_power_w),
                    ("duration_s", lib.duration_s, s.summary.duration_s),
                    ("cost", lib.cost, s.summary.cost),
                    ("carbon_g", lib.carbon_g, s.summary.carbon_g),
                    ("gap_seconds", lib.gap_seconds, s.summary.gap_seconds),
                    ("net_energy_kwh", lib.net_energy_kwh.unwrap_or(f64::NAN), s.summary.net_energy_kwh.unwrap_or(f64::NAN)),
                ];
                for (name, a, b) in pairs {
                    ensure(a.to_bits() == b.to_bits(), || format!("{}/{} {name}: library {a:e} api {b:e}", exp.experiment_id, s.session_id))?;
                    fields += 1;
                }
                ensure(lib.energy_kwh_counter.map(f64::to_bits) == s.summary.energy_kwh_counter.map(f64::to_bits), || "counter energy".into())?;
                ensure(lib.sample_count == s.summary.sample_count && lib.gap_count == s.summary.gap_count, || "counts".into())?;
            }
        }

        // The CLI derives from the same computation.
        let dir = tempfile::tempdir().map_err(e)?;
        let cli = |extra: &[&str]| {
            std::process::Command::new(env!("CARGO_BIN_EXE_emers"))
                .arg("--config")
                .arg(dir.path().join("none.toml"))
                .arg("--logs")
                .arg(fixture_logs())
                .args(["stats", "--experiments", "e1,e2", "--price", "0.3", "--carbon", "400", "--currency", "EUR", "--baseline", "per-plug"])
                .args(extra)
                .output()
        };
        let table = cli(&[]).map_err(e)?;
        ensure(String::from_utf8_lossy(&table.stdout) == stats_text(&api), || "CLI table differs from API stats".into())?;
        let json = cli(&["--json"]).map_err(e)?;
        let cli_report: StatsReport = serde_json::from_slice(&json.stdout).map_err(e)?;
        ensure(cli_report == api, || "CLI JSON differs from API stats".into())?;
        Ok(format!(
            "{fields} session figures bit-identical between /api/stats and summarize over the raw logs; CLI table and JSON match"
        ))
    })
}

fn local_non_loopback() -> Option<IpAddr> {
    if_addrs::get_if_addrs()
        .ok()?
        .into_iter()
        .map(|i| i.ip())
        .find(|ip| ip.is_ipv4() && !ip.is_loopback() && !ip.is_unspecified())
}

fn http_health(addr: SocketAddr) -> std::io::Result<String> {
    let mut s = TcpStream::connect_timeout(&addr, Duration::from_secs(2))?;
    s.set_read_timeout(Some(Duration::from_secs(2)))?;
    write!(s, "GET /api/health HTTP/1.1\r\nHost: {addr}\r\nConnection: close\r\n\r\n")?;
    let mut out = String::new();
    s.read_to_string(&mut out)?;
    Ok(out.lines().next().unwrap_or("").to_owned())
}

fn c8_bind_scope(rt: &Runtime) -> Result<String, String> {
    let ip = local_non_loopback().ok_or("host has no non-loopback IPv4 interface to test from")?;
    let serve = |scope: BindScope| {
        rt.block_on(async {
            let mut opts = ServeOptions::new(Layout::new(fixture_logs()));
            opts.port = 0;
            opts.bind = scope;
            start(opts, None).await
        })
        .map_err(e)
    };
    let host = serve(BindScope::Host)?;
    let port = host.addr.port();
    let external = http_health(SocketAddr::new(ip, port));
    let local = http_health(host.addr);
    rt.block_on(host.shutdown());
    ensure(external.is_err(), || format!("host scope answered on {ip}: {external:?}"))?;
    ensure(local.as_deref().is_ok_and(|l| l.contains("200")), || format!("loopback request failed: {local:?}"))?;

    let lan = serve(BindScope::Lan)?;
    let port = lan.addr.port();
    let reached = http_health(SocketAddr::new(ip, port));
    rt.block_on(lan.shutdown());
    ensure(reached.as_deref().is_ok_and(|l| l.contains("200")), || format!("lan scope not reachable on {ip}: {reached:?}"))?;
    Ok(format!(
        "host scope refuses {ip}:{port} ({}), lan scope answers there with 200",
        external.err().map(|x| x.kind().to_string()).unwrap_or_default()
    ))
}

fn cpu_ticks(pid: u32) -> Option<u64> {
    let stat = std::fs::read_to_string(format!("/proc/{pid}/stat")).ok()?;
    let fields: Vec<&str> = stat.rsplit_once(')')?.1.split_whitespace().collect();
    // utime and stime are fields 14 and 15; fields[0] is field 3.
    Some(fields.get(11)?.parse::<u64>().ok()? + fields.get(12)?.parse::<u64>().ok()?)
}

fn clock_ticks_per_sec() -> u64 {
    std::process::Command::new("getconf")
        .arg("CLK_TCK")
        .output()
        .ok()
        .and_then(|o| String::from_utf8(o.stdout).ok())
        .and_then(|s| s.trim().parse().ok())
        .unwrap_or(100)
}

fn c9_overhead(rt: &Runtime) -> Result<String, String> {
    if !std::path::Path::new("/proc/self/stat").exists() {
        return Err("no /proc; CPU accounting unavailable on this platform".into());
    }
    rt.block_on(async {
        let dir = tempfile::tempdir().map_err(e)?;
        let ids = ["p1", "p2", "p3", "p4"];
        let sim = start_sim(ids.iter().map(|i| constant(i, 50.0)).collect(), 9, Clock::system()).await;
        write_config(
            dir.path(),
            ids.iter().map(|i| plug_config(&sim, i, DriverKind::ShellyGen2, 1000)).collect(),
        );
        let mut args = vec!["log"];
        for i in &ids {
            args.extend(["--plug", i]);
        }
        let mut child = emers(dir.path())
            .args(&args)
            .stdout(Stdio::null())
            .stderr(Stdio::null())
            .spawn()
            .map_err(e)?;
        let pid = child.id();
        // Steady state: skip startup.
        tokio::time::sleep(Duration::from_secs(3)).await;
        let t0 = Instant::now();
        let c0 = cpu_ticks(pid).ok_or("cannot read process CPU time")?;
        tokio::time::sleep(Duration::from_secs(60)).await;
        let c1 = cpu_ticks(pid).ok_or("logger exited early")?;
        let wall = t0.elapsed().as_secs_f64();
        let _ = std::process::Command::new("kill").args(["-TERM", &pid.to_string()]).status();
        let _ = tokio::task::spawn_blocking(move || child.wait()).await;
        let cpu_s = (c1 - c0) as f64 / clock_ticks_per_sec() as f64;
        let pct = 100.0 * cpu_s / wall;
        let layout = Layout::new(dir.path().join("logs"));
        let n: usize = ids.iter().map(|i| samples_of(&layout, i).len()).sum();
        let detail = format!("{pct:.3}% of one core ({cpu_s:.2} s CPU over {wall:.1} s) polling 4 plugs at 1 Hz, {n} samples written");
        ensure(pct < 2.0, || detail.clone())?;
        ensure(n >= 4 * 60, || format!("too few samples: {detail}"))?;
        Ok(detail)
    })
}
