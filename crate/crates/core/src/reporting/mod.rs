//! Shareable energy reports.
//!
//! A report is built once as a list of [`Block`]s and rendered to Markdown
//! or HTML, next to a JSON sidecar holding the full-precision value of every
//! table cell. With a pinned generation time the output is a pure function
//! of the input log bytes.

mod chart;
mod render;

use std::path::{Path, PathBuf};

use chrono::{DateTime, SecondsFormat, Utc};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::model::{EnergySummary, TariffSettings};
use crate::par::Exec;
use crate::query::{self, BaselineMode, Loaded, QueryError, Selection, StatsReport};
use crate::storage::Layout;

pub use chart::{ChartSeries, LineChart};
pub use render::{render_html, render_markdown, Block};

pub const TOOL: &str = concat!("emers ", env!("CARGO_PKG_VERSION"));
pub const DEFAULT_CHART_POINTS: usize = 500;

#[derive(Debug, Error)]
pub enum ReportError {
    #[error(transparent)]
    Query(#[from] QueryError),
    #[error("invalid report request: {0}")]
    Invalid(String),
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ReportFormat {
    #[default]
    Markdown,
    Html,
}

impl ReportFormat {
    pub fn extension(self) -> &'static str {
        match self {
            ReportFormat::Markdown => "md",
            ReportFormat::Html => "html",
        }
    }
}

fn default_points() -> usize {
    DEFAULT_CHART_POINTS
}

fn yes() -> bool {
    true
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ChartOptions {
    #[serde(default = "default_points")]
    pub max_points: usize,
    #[serde(default = "yes")]
    pub include_power_chart: bool,
    #[serde(default = "yes")]
    pub include_cumulative_chart: bool,
}

impl Default for ChartOptions {
    fn default() -> Self {
        ChartOptions {
            max_points: DEFAULT_CHART_POINTS,
            include_power_chart: true,
            include_cumulative_chart: true,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReportRequest {
    pub experiments: Vec<Selection>,
    pub tariff: TariffSettings,
    #[serde(default)]
    pub baseline: BaselineMode,
    #[serde(default)]
    pub charts: ChartOptions,
    #[serde(default)]
    pub format: ReportFormat,
}

impl ReportRequest {
    pub fn validate(&self) -> Result<(), ReportError> {
        if self.experiments.is_empty() {
            return Err(ReportError::Invalid("select at least one experiment".into()));
        }
        if self.charts.max_points < 2 {
            return Err(ReportError::Invalid("max_points must be at least 2".into()));
        }
        self.tariff
            .validate()
            .map_err(|e| ReportError::Invalid(e.to_string()))
    }
}

/// One row of the statistics table, full precision.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TableRow {
    pub experiment: String,
    pub sessions: usize,
    pub duration_s: f64,
    pub samples: usize,
    pub mean_power_w: f64,
    pub energy_kwh: f64,
    pub cost: f64,
    pub carbon_g: f64,
    pub gap_count: usize,
    pub gap_seconds: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub net_energy_kwh: Option<f64>,
}

impl TableRow {
    pub fn from_summary(s: &EnergySummary) -> Self {
        TableRow {
            experiment: s.experiment_id.clone(),
            sessions: s.session_count,
            duration_s: s.duration_s,
            samples: s.sample_count,
            mean_power_w: s.mean_power_w,
            energy_kwh: s.energy_kwh,
            cost: s.cost,
            carbon_g: s.carbon_g,
            gap_count: s.gap_count,
            gap_seconds: s.gap_seconds,
            net_energy_kwh: s.net_energy_kwh,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChartRecord {
    pub experiment: String,
    pub session: String,
    pub points: usize,
    pub series_sha256: String,
}

/// Machine-readable mirror of a report.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Sidecar {
    pub generator: String,
    pub generated_at: String,
    pub format: ReportFormat,
    pub rows: Vec<TableRow>,
    pub aggregate: TableRow,
    pub stats: StatsReport,
    pub charts: Vec<ChartRecord>,
    /// Hash over all input ranges, in order.
    pub inputs_sha256: String,
}

#[derive(Debug, Clone)]
pub struct Report {
    pub document: String,
    pub sidecar: Sidecar,
    pub sidecar_json: String,
    pub format: ReportFormat,
    pub generated_at: DateTime<Utc>,
}

#[derive(Debug, Clone, Serialize)]
pub struct WrittenReport {
    pub document_path: PathBuf,
    pub sidecar_path: PathBuf,
}

pub fn fmt_kwh(x: f64) -> String {
    format!("{x:.3}")
}

pub fn fmt_cost(x: f64) -> String {
    format!("{x:.2}")
}

pub fn fmt_grams(x: f64) -> String {
    format!("{x:.1}")
}

pub fn fmt_watts(x: f64) -> String {
    format!("{x:.2}")
}

pub fn fmt_duration(seconds: f64) -> String {
    let total = seconds.max(0.0).round() as u64;
    format!("{}:{:02}:{:02}", total / 3600, total / 60 % 60, total % 60)
}

fn fmt_gaps(count: usize, seconds: f64) -> String {
    if count == 0 {
        "0".into()
    } else {
        format!("{count} ({seconds:.1} s)")
    }
}

fn table_header(currency: &str, with_net: bool) -> Vec<String> {
    let mut h: Vec<String> = [
        "experiment",
        "sessions",
        "duration",
        "samples",
        "mean W",
        "energy kWh",
    ]
    .iter()
    .map(|s| s.to_string())
    .collect();
    if with_net {
        h.push("net kWh".into());
    }
    h.push(format!("cost ({currency})"));
    h.push("carbon g".into());
    h.push("gaps".into());
    h
}

pub fn table_cells(r: &TableRow, with_net: bool) -> Vec<String> {
    let mut c = vec![
        r.experiment.clone(),
        r.sessions.to_string(),
        fmt_duration(r.duration_s),
        r.samples.to_string(),
        fmt_watts(r.mean_power_w),
        fmt_kwh(r.energy_kwh),
    ];
    if with_net {
        c.push(r.net_energy_kwh.map_or_else(|| "n/a".into(), fmt_kwh));
    }
    c.push(fmt_cost(r.cost));
    c.push(fmt_grams(r.carbon_g));
    c.push(fmt_gaps(r.gap_count, r.gap_seconds));
    c
}

/// Plain-text statistics table with an aggregate footer, as printed by
/// `emers stats`. Cells use the same formatting as reports.
pub fn stats_text(stats: &StatsReport) -> String {
    let with_net = stats.baseline == BaselineMode::PerPlug;
    let header = table_header(&stats.tariff.currency_label, with_net);
    let mut rows: Vec<Vec<String>> = stats
        .experiments
        .iter()
        .map(|e| table_cells(&TableRow::from_summary(&e.summary), with_net))
        .collect();
    let footer = table_cells(&TableRow::from_summary(&stats.aggregate), with_net);
    let mut widths: Vec<usize> = header.iter().map(|h| h.chars().count()).collect();
    for row in rows.iter().chain([&footer]) {
        for (w, c) in widths.iter_mut().zip(row) {
            *w = (*w).max(c.chars().count());
        }
    }
    let line = |cells: &[String]| {
        let padded: Vec<String> = cells
            .iter()
            .zip(&widths)
            .enumerate()
            .map(|(i, (c, w))| if i == 0 { format!("{c:<w$}") } else { format!("{c:>w$}") })
            .collect();
        padded.join("  ").trim_end().to_owned() + "\n"
    };
    let rule: String = widths.iter().map(|w| "-".repeat(*w)).collect::<Vec<_>>().join("  ") + "\n";
    let mut out = line(&header);
    out.push_str(&rule);
    for r in rows.drain(..) {
        out.push_str(&line(&r));
    }
    out.push_str(&rule);
    out.push_str(&line(&footer));
    out
}

fn inputs_hash(stats: &StatsReport) -> String {
    let mut h = Sha256::new();
    for i in &stats.inputs {
        h.update(i.path.as_bytes());
        h.update([0]);
        h.update(i.bytes.to_le_bytes());
        h.update(i.sha256.as_bytes());
    }
    query::hex(&h.finalize())
}

/// Builds a report from logs under `layout`.
pub fn generate_report(
    layout: &Layout,
    request: &ReportRequest,
    generated_at: DateTime<Utc>,
) -> Result<Report, ReportError> {
    generate_report_with(layout, request, generated_at, Exec::default())
}

pub fn generate_report_with(
    layout: &Layout,
    request: &ReportRequest,
    generated_at: DateTime<Utc>,
    exec: Exec,
) -> Result<Report, ReportError> {
    request.validate()?;
    let loaded = query::load_selection(layout, &request.experiments)?;
    let stats = query::summarize_loaded(layout, &loaded, &request.tariff, request.baseline, exec)?;
    build(&loaded, stats, request, generated_at)
}

fn build(
    loaded: &Loaded,
    stats: StatsReport,
    request: &ReportRequest,
    generated_at: DateTime<Utc>,
) -> Result<Report, ReportError> {
    let with_net = request.baseline == BaselineMode::PerPlug;
    let tariff = &request.tariff;
    let stamp = generated_at.to_rfc3339_opts(SecondsFormat::Secs, true);
    let rows: Vec<TableRow> = stats
        .experiments
        .iter()
        .map(|e| TableRow::from_summary(&e.summary))
        .collect();
    let aggregate = TableRow::from_summary(&stats.aggregate);

    let mut blocks = vec![
        Block::Heading(1, "Energy consumption report".into()),
        Block::KeyValues(vec![
            ("Generated by".into(), TOOL.into()),
            ("Generated at".into(), stamp.clone()),
            (
                "Price".into(),
                format!("{} {}/kWh", tariff.price_per_kwh, tariff.currency_label),
            ),
            (
                "Carbon intensity".into(),
                format!("{} gCO2e/kWh", tariff.carbon_g_per_kwh),
            ),
            ("Baseline".into(), baseline_disclosure(&stats)),
            ("Energy source".into(), source_disclosure(&stats)),
        ]),
        Block::Heading(2, "Statistics".into()),
        Block::Table {
            header: table_header(&tariff.currency_label, with_net),
            rows: rows.iter().map(|r| table_cells(r, with_net)).collect(),
            footer: Some(table_cells(&aggregate, with_net)),
        },
        Block::Para(
            "Durations and the aggregate row add up the recorded session spans. \
             Cost and carbon are computed from the energy column."
                .into(),
        ),
    ];

    let mut charts = Vec::new();
    let mut power = LineChart::new("Power draw", "elapsed time (s)", "W");
    let mut cumulative = LineChart::new("Cumulative energy", "elapsed time (s)", "kWh");
    for (exp, sessions) in &loaded.experiments {
        for s in sessions {
            if s.window.samples().is_empty() {
                continue;
            }
            let series = query::series(&s.window, request.charts.max_points)?;
            let label = format!("{exp}/{}", s.entry.session_id);
            let t0 = series.power.ts[0];
            let xs: Vec<f64> = series
                .power
                .ts
                .iter()
                .map(|t| (t - t0) as f64 / 1000.0)
                .collect();
            power.push(ChartSeries {
                label: label.clone(),
                x: xs.clone(),
                y: series.power.w.clone(),
            });
            cumulative.push(ChartSeries {
                label,
                x: xs,
                y: series.cumulative.kwh.clone(),
            });
            charts.push(ChartRecord {
                experiment: exp.to_string(),
                session: s.entry.session_id.to_string(),
                points: series.power.ts.len(),
                series_sha256: series.sha256,
            });
        }
    }
    if request.charts.include_power_chart || request.charts.include_cumulative_chart {
        blocks.push(Block::Heading(2, "Charts".into()));
        if charts.is_empty() {
            blocks.push(Block::Para("No samples recorded in the selected sessions.".into()));
        } else {
            if request.charts.include_power_chart {
                blocks.push(Block::Svg(power.to_svg()));
            }
            if request.charts.include_cumulative_chart {
                blocks.push(Block::Svg(cumulative.to_svg()));
            }
        }
    }

    let inputs_sha256 = inputs_hash(&stats);
    blocks.push(Block::Heading(2, "Reproducibility".into()));
    blocks.push(Block::Para(format!(
        "Computed from {} log file(s). Each entry gives the bytes read from the start of the file and their SHA-256.",
        stats.inputs.len()
    )));
    blocks.push(Block::List(
        stats
            .inputs
            .iter()
            .map(|i| format!("`{}` bytes 0..{} sha256 {}", i.path, i.bytes, i.sha256))
            .collect(),
    ));
    blocks.push(Block::Para(format!("Combined input hash: `{inputs_sha256}`")));

    let document = match request.format {
        ReportFormat::Markdown => render_markdown(&blocks),
        ReportFormat::Html => render_html("Energy consumption report", &blocks),
    };
    let sidecar = Sidecar {
        generator: TOOL.into(),
        generated_at: stamp,
        format: request.format,
        rows,
        aggregate,
        stats,
        charts,
        inputs_sha256,
    };
    let mut sidecar_json = serde_json::to_string_pretty(&sidecar).expect("sidecar serializes");
    sidecar_json.push('\n');
    Ok(Report {
        document,
        sidecar,
        sidecar_json,
        format: request.format,
        generated_at,
    })
}

fn baseline_disclosure(stats: &StatsReport) -> String {
    if stats.baselines.is_empty() {
        return "none subtracted".into();
    }
    let parts: Vec<String> = stats
        .baselines
        .iter()
        .map(|b| format!("{}: {} ({} samples over {:.0} s)", b.plug_id, b, b.sample_count, b.window_s))
        .collect();
    format!("subtracted per plug; {}", parts.join("; "))
}

fn source_disclosure(stats: &StatsReport) -> String {
    use crate::model::EnergySource::*;
    match stats.aggregate.energy_source {
        Counter => "device energy counter".into(),
        Integrated => "trapezoidal integration of power samples".into(),
        Mixed => "device counter where available, else trapezoidal integration".into(),
    }
}

impl Report {
    fn stem(&self) -> String {
        format!("report-{}", self.generated_at.format("%Y%m%dT%H%M%SZ"))
    }

    /// Writes `report-<UTC>.<ext>` and `report-<UTC>.summary.json` into `out`.
    pub fn write(&self, out: &Path) -> Result<WrittenReport, ReportError> {
        let io = |path: &Path, source| ReportError::Io {
            path: path.to_owned(),
            source,
        };
        std::fs::create_dir_all(out).map_err(|e| io(out, e))?;
        let stem = self.stem();
        let document_path = out.join(format!("{stem}.{}", self.format.extension()));
        let sidecar_path = out.join(format!("{stem}.summary.json"));
        std::fs::write(&document_path, &self.document).map_err(|e| io(&document_path, e))?;
        std::fs::write(&sidecar_path, &self.sidecar_json).map_err(|e| io(&sidecar_path, e))?;
        Ok(WrittenReport {
            document_path,
            sidecar_path,
        })
    }
}
