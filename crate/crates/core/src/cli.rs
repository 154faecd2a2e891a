//! Command-line entry points.
//!
//! Exit codes: 0 on success, 1 for usage errors, 2 for runtime errors.

use std::net::SocketAddr;
use std::path::{Path, PathBuf};
use std::sync::Arc;
use std::time::Duration;

use chrono::{DateTime, Utc};
use clap::{Args, Parser, Subcommand, ValueEnum};
use thiserror::Error;

use crate::analytics::{measure_baseline, SeriesWindow};
use crate::clock::Clock;
use crate::collector::Collector;
use crate::config::{check_interval, BindScope, Config};
use crate::drivers::simulator::{simulator_serve, SimScenario};
use crate::drivers::DriverRegistry;
use crate::model::{Address, DriverKind, ExperimentId, PlugConfig, PlugId, PowerSample, TariffSettings};
use crate::notify::Notifier;
use crate::query::{compute_stats, BaselineMode, Selection, SessionFilter};
use crate::reporting::{self, ChartOptions, ReportFormat, ReportRequest};
use crate::server::{self, ServeOptions};
use crate::storage::{self, Layout};

pub const DEFAULT_CONFIG: &str = "emers.toml";
pub const DEFAULT_LOGS: &str = "emers-logs";

#[derive(Debug, Parser)]
#[command(name = "emers", version, about = "Smart-plug energy metering for compute experiments")]
pub struct Cli {
    /// Configuration file.
    #[arg(long, global = true, default_value = DEFAULT_CONFIG)]
    pub config: PathBuf,
    /// Logs root; overrides `logs` from the config file.
    #[arg(long, global = true)]
    pub logs: Option<PathBuf>,
    /// More log output (repeat for debug).
    #[arg(short, long, global = true, action = clap::ArgAction::Count)]
    pub verbose: u8,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Register, list and test plugs.
    #[command(subcommand)]
    Plugs(PlugsCommand),
    /// Poll plugs and record samples until interrupted or --duration elapses.
    Log(LogArgs),
    /// Measure and store a plug's idle baseline.
    Baseline(BaselineArgs),
    /// Print energy, cost and carbon statistics for experiments.
    Stats(StatsArgs),
    /// Write a report document and its JSON sidecar.
    Report(ReportArgs),
    /// Run the monitoring API.
    Serve(ServeArgs),
    /// Serve simulated plugs described by a scenario file.
    Simulate(SimulateArgs),
}

#[derive(Debug, Subcommand)]
pub enum PlugsCommand {
    /// Add a plug to the config file.
    Add {
        #[arg(long)]
        id: PlugId,
        /// shelly-gen2, simulated or extension:<name>.
        #[arg(long)]
        driver: DriverKind,
        /// host[:port][/path]
        #[arg(long)]
        address: Address,
        #[arg(long, value_parser = parse_duration_ms)]
        interval: Option<u64>,
        #[arg(long, value_parser = parse_timeout_ms)]
        timeout: Option<u64>,
        #[arg(long)]
        label: Option<String>,
    },
    /// List configured plugs.
    List,
    /// Identify a plug and take one reading.
    Test {
        #[arg(long)]
        id: String,
    },
}

#[derive(Debug, Args)]
pub struct LogArgs {
    /// Plug to poll; repeat for several.
    #[arg(long = "plug", required = true)]
    pub plugs: Vec<String>,
    /// Record into a session of this experiment instead of standalone files.
    #[arg(long)]
    pub experiment: Option<ExperimentId>,
    #[arg(long, default_value = "")]
    pub notes: String,
    /// Poll interval, e.g. 1s or 500ms; overrides the config.
    #[arg(long, value_parser = parse_duration_ms)]
    pub interval: Option<u64>,
    /// Stop after this long, e.g. 10s or 2h.
    #[arg(long, value_parser = humantime::parse_duration)]
    pub duration: Option<Duration>,
    /// Run the clock this many times faster than real time (testing aid).
    #[arg(long, hide = true)]
    pub time_scale: Option<f64>,
}

#[derive(Debug, Args)]
pub struct BaselineArgs {
    #[arg(long)]
    pub plug: String,
    #[arg(long, value_parser = humantime::parse_duration, default_value = "10m")]
    pub duration: Duration,
    #[arg(long, value_parser = parse_duration_ms)]
    pub interval: Option<u64>,
    #[arg(long, hide = true)]
    pub time_scale: Option<f64>,
}

#[derive(Debug, Args)]
pub struct TariffArgs {
    /// Price per kWh; defaults to the config tariff.
    #[arg(long)]
    pub price: Option<f64>,
    /// Carbon intensity in g/kWh.
    #[arg(long)]
    pub carbon: Option<f64>,
    #[arg(long)]
    pub currency: Option<String>,
    /// Subtract each plug's stored idle baseline.
    #[arg(long, value_enum, default_value_t = BaselineArg::None)]
    pub baseline: BaselineArg,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum BaselineArg {
    None,
    PerPlug,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum SessionsArg {
    All,
    Latest,
}

#[derive(Debug, Args)]
pub struct SelectionArgs {
    /// Experiment ids, comma separated or repeated.
    #[arg(long = "experiments", visible_alias = "experiment", value_delimiter = ',', required = true)]
    pub experiments: Vec<ExperimentId>,
    #[arg(long, value_enum, default_value_t = SessionsArg::All)]
    pub sessions: SessionsArg,
}

#[derive(Debug, Args)]
pub struct StatsArgs {
    #[command(flatten)]
    pub selection: SelectionArgs,
    #[command(flatten)]
    pub tariff: TariffArgs,
    /// Print the full statistics as JSON (same document as /api/stats).
    #[arg(long)]
    pub json: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum FormatArg {
    Markdown,
    Html,
}

#[derive(Debug, Args)]
pub struct ReportArgs {
    #[command(flatten)]
    pub selection: SelectionArgs,
    #[command(flatten)]
    pub tariff: TariffArgs,
    /// Output directory; defaults to `<logs>/reports`.
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[arg(long, value_enum, default_value_t = FormatArg::Markdown)]
    pub format: FormatArg,
    /// Pin the generation time (RFC 3339) for reproducible output.
    #[arg(long)]
    pub generated_at: Option<DateTime<Utc>>,
    #[arg(long, default_value_t = reporting::DEFAULT_CHART_POINTS)]
    pub max_points: usize,
    #[arg(long)]
    pub no_power_chart: bool,
    #[arg(long)]
    pub no_cumulative_chart: bool,
}

#[derive(Debug, Args)]
pub struct ServeArgs {
    #[arg(long, value_enum)]
    pub bind: Option<BindScope>,
    #[arg(long)]
    pub port: Option<u16>,
    /// Directory of dashboard assets to serve at `/`.
    #[arg(long)]
    pub static_dir: Option<PathBuf>,
    #[arg(long)]
    pub reports_dir: Option<PathBuf>,
    /// Also poll every configured plug and accept session control requests.
    #[arg(long)]
    pub collect: bool,
}

#[derive(Debug, Args)]
pub struct SimulateArgs {
    /// Scenario JSON file.
    #[arg(long)]
    pub scenario: PathBuf,
    #[arg(long, default_value = "127.0.0.1:8809")]
    pub listen: SocketAddr,
    #[arg(long, hide = true)]
    pub time_scale: Option<f64>,
}

fn parse_duration_ms(s: &str) -> Result<u64, String> {
    let d = humantime::parse_duration(s).map_err(|e| e.to_string())?;
    let ms = d.as_millis() as u64;
    check_interval(ms).map_err(|e| e.to_string())?;
    Ok(ms)
}

fn parse_timeout_ms(s: &str) -> Result<u64, String> {
    let d = humantime::parse_duration(s).map_err(|e| e.to_string())?;
    Ok(d.as_millis() as u64)
}

#[derive(Debug, Error)]
pub enum CliError {
    #[error("{0}")]
    Usage(String),
    #[error("{0}")]
    Runtime(String),
}

impl CliError {
    fn exit_code(&self) -> i32 {
        match self {
            CliError::Usage(_) => 1,
            CliError::Runtime(_) => 2,
        }
    }
}

fn rt(e: impl std::fmt::Display) -> CliError {
    CliError::Runtime(e.to_string())
}

struct Ctx {
    config_path: PathBuf,
    config: Config,
    layout: Layout,
}

impl Ctx {
    fn load(cli: &Cli) -> Result<Ctx, CliError> {
        let validated = Config::load(&cli.config).map_err(|e| rt(format!("{}: {e}", cli.config.display())))?;
        for w in &validated.warnings {
            tracing::warn!("{}: {w}", cli.config.display());
        }
        let config = validated.config;
        let root = match (&cli.logs, &config.logs) {
            (Some(p), _) => p.clone(),
            // Relative paths in the config file are relative to the file.
            (None, Some(p)) => cli.config.parent().unwrap_or(Path::new(".")).join(p),
            (None, None) => PathBuf::from(DEFAULT_LOGS),
        };
        Ok(Ctx {
            config_path: cli.config.clone(),
            config,
            layout: Layout::new(root),
        })
    }

    fn plug(&self, id: &str) -> Result<PlugConfig, CliError> {
        self.config.plug(id).cloned().ok_or_else(|| {
            rt(format!(
                "plug {id} is not registered in {}; add it with `emers plugs add`",
                self.config_path.display()
            ))
        })
    }

    fn ensure_root(&self) -> Result<(), CliError> {
        std::fs::create_dir_all(self.layout.root())
            .map_err(|e| rt(format!("{}: {e}", self.layout.root().display())))
    }

    fn tariff(&self, a: &TariffArgs) -> Result<TariffSettings, CliError> {
        let mut t = self.config.tariff.clone();
        if let Some(p) = a.price {
            t.price_per_kwh = p;
        }
        if let Some(c) = a.carbon {
            t.carbon_g_per_kwh = c;
        }
        if let Some(c) = &a.currency {
            t.currency_label = c.clone();
        }
        t.validate().map_err(|e| CliError::Usage(e.to_string()))?;
        Ok(t)
    }
}

fn selections(a: &SelectionArgs) -> Vec<Selection> {
    let sessions = match a.sessions {
        SessionsArg::All => SessionFilter::All,
        SessionsArg::Latest => SessionFilter::Latest,
    };
    a.experiments
        .iter()
        .map(|e| Selection {
            experiment_id: e.clone(),
            sessions: sessions.clone(),
        })
        .collect()
}

fn baseline_mode(b: BaselineArg) -> BaselineMode {
    match b {
        BaselineArg::None => BaselineMode::None,
        BaselineArg::PerPlug => BaselineMode::PerPlug,
    }
}

fn scaled_clock(scale: Option<f64>) -> Result<Clock, CliError> {
    match scale {
        None => Ok(Clock::system()),
        Some(k) if k > 0.0 && k.is_finite() => Ok(Clock::scaled(Clock::system().now_ms(), k)),
        Some(k) => Err(CliError::Usage(format!("time scale {k} must be positive"))),
    }
}

/// Resolves on SIGINT or SIGTERM.
pub async fn shutdown_signal() {
    let ctrl_c = async {
        let _ = tokio::signal::ctrl_c().await;
    };
    #[cfg(unix)]
    let term = async {
        match tokio::signal::unix::signal(tokio::signal::unix::SignalKind::terminate()) {
            Ok(mut s) => {
                s.recv().await;
            }
            Err(_) => std::future::pending().await,
        }
    };
    #[cfg(not(unix))]
    let term = std::future::pending::<()>();
    tokio::select! {
        _ = ctrl_c => {}
        _ = term => {}
    }
}

fn init_tracing(verbose: u8) {
    let default = match verbose {
        0 => "warn,emers=info",
        1 => "info,emers=debug",
        _ => "debug",
    };
    let filter = tracing_subscriber::EnvFilter::try_from_default_env()
        .unwrap_or_else(|_| tracing_subscriber::EnvFilter::new(default));
    let _ = tracing_subscriber::fmt()
        .with_env_filter(filter)
        .with_writer(std::io::stderr)
        .try_init();
}

/// Parses arguments, runs the command and returns the process exit code.
pub fn main_with_args<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { 1 } else { 0 };
        }
    };
    init_tracing(cli.verbose);
    let runtime = match tokio::runtime::Builder::new_multi_thread().enable_all().build() {
        Ok(r) => r,
        Err(e) => {
            eprintln!("error: cannot start runtime: {e}");
            return 2;
        }
    };
    match runtime.block_on(run(cli)) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}

pub async fn run(cli: Cli) -> Result<(), CliError> {
    let ctx = Ctx::load(&cli)?;
    match cli.command {
        Command::Plugs(cmd) => plugs(ctx, cmd).await,
        Command::Log(a) => log(ctx, a).await,
        Command::Baseline(a) => baseline(ctx, a).await,
        Command::Stats(a) => stats(ctx, a).await,
        Command::Report(a) => report(ctx, a).await,
        Command::Serve(a) => serve(ctx, a).await,
        Command::Simulate(a) => simulate(a).await,
    }
}

async fn plugs(mut ctx: Ctx, cmd: PlugsCommand) -> Result<(), CliError> {
    match cmd {
        PlugsCommand::Add {
            id,
            driver,
            address,
            interval,
            timeout,
            label,
        } => {
            if ctx.config.plug(id.as_str()).is_some() {
                return Err(rt(format!("duplicate plug_id: {id}")));
            }
            let mut plug = PlugConfig::new(id.clone(), driver, address);
            if let Some(i) = interval {
                plug = plug.with_interval(i);
            }
            if let Some(t) = timeout {
                plug = plug.with_timeout(t);
            }
            plug.label = label.unwrap_or_default();
            ctx.config.plugs.push(plug);
            let text = ctx.config.to_toml();
            crate::config::validate_config(text.as_bytes()).map_err(rt)?;
            storage::write_atomic(&ctx.config_path, text.as_bytes()).map_err(rt)?;
            println!("added plug {id} to {}", ctx.config_path.display());
            Ok(())
        }
        PlugsCommand::List => {
            if ctx.config.plugs.is_empty() {
                println!("no plugs registered in {}", ctx.config_path.display());
            }
            for p in &ctx.config.plugs {
                println!(
                    "{}\t{}\t{}\tinterval {} ms{}",
                    p.id,
                    p.driver,
                    p.address,
                    p.interval_ms,
                    if p.label.is_empty() { String::new() } else { format!("\t{}", p.label) }
                );
            }
            Ok(())
        }
        PlugsCommand::Test { id } => {
            let plug = ctx.plug(&id)?;
            let driver = DriverRegistry::new().build(&plug).map_err(rt)?;
            let info = driver
                .identify()
                .await
                .map_err(|e| rt(format!("{id} at {}: {e}", plug.address)))?;
            let reading = driver
                .poll()
                .await
                .map_err(|e| rt(format!("{id} at {}: {e}", plug.address)))?;
            println!(
                "{id}: {} (firmware {}), energy counter: {}",
                info.model,
                info.firmware,
                if info.capabilities.has_energy_counter { "yes" } else { "no" }
            );
            match reading.energy_counter_wh {
                Some(wh) => println!("power {:.2} W, counter {wh:.3} Wh", reading.power_w),
                None => println!("power {:.2} W", reading.power_w),
            }
            Ok(())
        }
    }
}

async fn log(ctx: Ctx, a: LogArgs) -> Result<(), CliError> {
    let clock = scaled_clock(a.time_scale)?;
    ctx.ensure_root()?;
    let (notifier, task) = Notifier::spawn(ctx.layout.events_log());
    let mut collector = Collector::new(ctx.layout.clone(), clock, notifier.clone());
    let registry = DriverRegistry::new();
    for id in &a.plugs {
        let mut plug = ctx.plug(id)?;
        if let Some(i) = a.interval {
            plug = plug.with_interval(i);
        }
        let driver = registry.build(&plug).map_err(rt)?;
        collector.add_plug(plug, driver).map_err(rt)?;
    }
    let result = run_logging(&collector, &a, clock).await;
    let statuses: Vec<_> = a.plugs.iter().filter_map(|p| collector.status(p)).collect();
    collector.shutdown().await;
    drop(notifier);
    task.finish().await;
    for s in statuses {
        println!(
            "{}: {} samples, {} failed polls",
            s.plug_id, s.polls_ok, s.polls_failed
        );
    }
    result
}

async fn run_logging(collector: &Collector, a: &LogArgs, clock: Clock) -> Result<(), CliError> {
    if let Some(exp) = &a.experiment {
        for id in &a.plugs {
            let session = collector
                .start_session(exp, id, &a.notes)
                .await
                .map_err(rt)?;
            println!("{id}: recording {exp}/{}", session.session_id);
        }
    }
    match a.duration {
        Some(d) => {
            let real = clock.real_duration(d.as_millis() as i64);
            tokio::select! {
                _ = tokio::time::sleep(real) => {}
                _ = shutdown_signal() => {}
            }
        }
        None => shutdown_signal().await,
    }
    Ok(())
}

async fn baseline(ctx: Ctx, a: BaselineArgs) -> Result<(), CliError> {
    let clock = scaled_clock(a.time_scale)?;
    let mut plug = ctx.plug(&a.plug)?;
    if let Some(i) = a.interval {
        plug = plug.with_interval(i);
    }
    let driver = DriverRegistry::new().build(&plug).map_err(rt)?;
    let start = clock.now_ms();
    let end = start + a.duration.as_millis() as i64;
    let mut samples: Vec<PowerSample> = Vec::new();
    let mut failures = 0u32;
    eprintln!("measuring idle baseline of {} for {}", plug.id, humantime::format_duration(a.duration));
    let measure = async {
        let mut next = start;
        while next <= end {
            let wait = clock.real_duration(next - clock.now_ms());
            tokio::time::sleep(wait).await;
            let ts = clock.now_ms();
            match driver.poll().await {
                Ok(r) => {
                    let seq = samples.len() as u64 + 1;
                    samples.push(PowerSample::new(ts, seq, plug.id.clone(), r.power_w));
                }
                Err(e) => {
                    failures += 1;
                    tracing::warn!("poll failed: {e}");
                }
            }
            next += plug.interval_ms as i64;
        }
    };
    tokio::select! {
        _ = measure => {}
        _ = shutdown_signal() => eprintln!("interrupted"),
    }
    let window = SeriesWindow::from_samples(samples).map_err(rt)?;
    let stats = measure_baseline(&window).map_err(rt)?;
    ctx.ensure_root()?;
    storage::save_baseline(&ctx.layout, &stats).map_err(rt)?;
    if failures > 0 {
        eprintln!("{failures} polls failed");
    }
    println!("{}: {stats} ({} samples)", plug.id, stats.sample_count);
    Ok(())
}

async fn stats(ctx: Ctx, a: StatsArgs) -> Result<(), CliError> {
    let tariff = ctx.tariff(&a.tariff)?;
    let sel = selections(&a.selection);
    let mode = baseline_mode(a.tariff.baseline);
    let layout = ctx.layout.clone();
    let report = tokio::task::spawn_blocking(move || compute_stats(&layout, &sel, &tariff, mode))
        .await
        .map_err(rt)?
        .map_err(rt)?;
    if a.json {
        println!("{}", serde_json::to_string_pretty(&report).map_err(rt)?);
    } else {
        print!("{}", reporting::stats_text(&report));
        for w in &report.warnings {
            eprintln!("warning: {w}");
        }
    }
    Ok(())
}

async fn report(ctx: Ctx, a: ReportArgs) -> Result<(), CliError> {
    let request = ReportRequest {
        experiments: selections(&a.selection),
        tariff: ctx.tariff(&a.tariff)?,
        baseline: baseline_mode(a.tariff.baseline),
        charts: ChartOptions {
            max_points: a.max_points,
            include_power_chart: !a.no_power_chart,
            include_cumulative_chart: !a.no_cumulative_chart,
        },
        format: match a.format {
            FormatArg::Markdown => ReportFormat::Markdown,
            FormatArg::Html => ReportFormat::Html,
        },
    };
    request.validate().map_err(|e| CliError::Usage(e.to_string()))?;
    let out = a
        .out
        .or_else(|| ctx.config.server.reports_dir.clone())
        .unwrap_or_else(|| ctx.layout.root().join("reports"));
    let generated_at = a.generated_at.unwrap_or_else(Utc::now);
    let layout = ctx.layout.clone();
    let written = tokio::task::spawn_blocking(move || {
        reporting::generate_report(&layout, &request, generated_at)?.write(&out)
    })
    .await
    .map_err(rt)?
    .map_err(rt)?;
    println!("{}", written.document_path.display());
    println!("{}", written.sidecar_path.display());
    Ok(())
}

async fn serve(ctx: Ctx, a: ServeArgs) -> Result<(), CliError> {
    let settings = &ctx.config.server;
    let mut opts = ServeOptions::new(ctx.layout.clone());
    opts.bind = a.bind.unwrap_or(settings.bind);
    opts.port = a.port.unwrap_or(settings.port);
    opts.static_dir = a.static_dir.or_else(|| settings.static_dir.clone());
    opts.reports_dir = a.reports_dir.or_else(|| settings.reports_dir.clone());
    opts.tariff = ctx.config.tariff.clone();
    opts.plugs = ctx.config.plugs.iter().map(|p| p.id.clone()).collect();

    let mut notifier_task = None;
    let collector = if a.collect {
        ctx.ensure_root()?;
        let (notifier, task) = Notifier::spawn(ctx.layout.events_log());
        notifier_task = Some(task);
        let mut c = Collector::new(ctx.layout.clone(), opts.clock, notifier);
        let registry = DriverRegistry::new();
        for plug in &ctx.config.plugs {
            let driver = registry.build(plug).map_err(rt)?;
            c.add_plug(plug.clone(), driver).map_err(rt)?;
        }
        Some(Arc::new(c))
    } else {
        None
    };

    let handle = server::start(opts, collector.clone()).await.map_err(rt)?;
    println!("serving http://{}", handle.addr);
    handle.run_until(shutdown_signal()).await;
    if let Some(c) = collector {
        match Arc::try_unwrap(c) {
            Ok(c) => c.shutdown().await,
            Err(_) => {
                tracing::warn!("collector still referenced at shutdown");
                notifier_task = None;
            }
        }
    }
    if let Some(t) = notifier_task {
        t.finish().await;
    }
    Ok(())
}

async fn simulate(a: SimulateArgs) -> Result<(), CliError> {
    let text = std::fs::read_to_string(&a.scenario)
        .map_err(|e| rt(format!("{}: {e}", a.scenario.display())))?;
    let scenario = SimScenario::from_json(&text).map_err(rt)?;
    let clock = scaled_clock(a.time_scale)?;
    let handle = simulator_serve(&scenario, a.listen, clock).await.map_err(rt)?;
    println!("simulator listening on http://{}", handle.addr);
    for p in &scenario.plugs {
        println!("{}\t{}", p.plug_id, handle.plug_address(p.plug_id.as_str()));
    }
    shutdown_signal().await;
    handle.shutdown().await;
    Ok(())
}
