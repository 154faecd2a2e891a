mod common;

use emers::model::ExperimentId;
use emers::par::Exec;
use emers::query::{self, Selection, SessionFilter};
use emers::reporting::{generate_report_with, ChartOptions, Report, ReportFormat};
use emers::storage::Layout;
use sha2::{Digest, Sha256};

use common::*;

fn sha(bytes: &[u8]) -> String {
    query::hex(&Sha256::digest(bytes))
}

fn hashes(r: &Report) -> (String, String) {
    (sha(r.document.as_bytes()), sha(r.sidecar_json.as_bytes()))
}

#[test]
fn pinned_reports_are_byte_identical_and_match_golden() {
    let layout = Layout::new(fixture_logs());
    for (format, golden) in [(ReportFormat::Markdown, GOLDEN_MARKDOWN), (ReportFormat::Html, GOLDEN_HTML)] {
        let req = golden_request(format);
        let a = generate_report_with(&layout, &req, pinned(), Exec::Sequential).unwrap();
        let b = generate_report_with(&layout, &req, pinned(), Exec::Parallel).unwrap();
        assert_eq!(a.document, b.document);
        assert_eq!(a.sidecar_json, b.sidecar_json);
        let (doc, side) = hashes(&a);
        assert_eq!((doc.as_str(), side.as_str()), golden, "{format:?}");
    }
}

#[test]
fn written_files_match_in_memory_report() {
    let dir = tempfile::tempdir().unwrap();
    let layout = Layout::new(fixture_logs());
    let r = generate_report_with(&layout, &golden_request(ReportFormat::Markdown), pinned(), Exec::default()).unwrap();
    let w = r.write(dir.path()).unwrap();
    assert_eq!(
        w.document_path.file_name().unwrap(),
        "report-20240502T093000Z.md"
    );
    assert_eq!(
        w.sidecar_path.file_name().unwrap(),
        "report-20240502T093000Z.summary.json"
    );
    assert_eq!(std::fs::read_to_string(&w.document_path).unwrap(), r.document);
    assert_eq!(std::fs::read_to_string(&w.sidecar_path).unwrap(), r.sidecar_json);
}

#[test]
fn document_sections_appear_in_order() {
    let layout = Layout::new(fixture_logs());
    let r = generate_report_with(&layout, &golden_request(ReportFormat::Markdown), pinned(), Exec::default()).unwrap();
    let d = &r.document;
    let pos = |needle: &str| d.find(needle).unwrap_or_else(|| panic!("missing {needle:?}"));
    let order = [
        "emers 0.1.0",
        "2024-05-02T09:30:00Z",
        "0.3 EUR/kWh",
        "| experiment |",
        "| **all** |",
        "<svg",
        "sha256",
    ];
    for pair in order.windows(2) {
        assert!(pos(pair[0]) < pos(pair[1]), "{pair:?}\n{d}");
    }
    assert_eq!(r.sidecar.rows.len(), 2);
    assert_eq!(r.sidecar.rows[0].experiment, "e1");
}

#[test]
fn chart_hashes_match_served_series() {
    let layout = Layout::new(fixture_logs());
    let r = generate_report_with(&layout, &golden_request(ReportFormat::Html), pinned(), Exec::default()).unwrap();
    assert_eq!(r.sidecar.charts.len(), 3);
    for c in &r.sidecar.charts {
        let loaded = query::find_session(&layout, &c.experiment, &c.session).unwrap();
        let s = query::series(&loaded.window, ChartOptions::default().max_points).unwrap();
        assert_eq!(s.sha256, c.series_sha256, "{}/{}", c.experiment, c.session);
        assert_eq!(s.power.ts.len(), c.points);
    }
}

#[test]
fn latest_selection_and_input_ranges() {
    let layout = Layout::new(fixture_logs());
    let mut req = golden_request(ReportFormat::Markdown);
    req.experiments = vec![Selection {
        experiment_id: ExperimentId::new("e2").unwrap(),
        sessions: SessionFilter::Latest,
    }];
    let r = generate_report_with(&layout, &req, pinned(), Exec::default()).unwrap();
    assert_eq!(r.sidecar.rows[0].sessions, 1);
    let inputs = &r.sidecar.stats.inputs;
    assert_eq!(inputs.len(), 1);
    assert_eq!(inputs[0].path, "experiments/e2/20240501-150000.samples.jsonl");
    let bytes = std::fs::read(fixture_logs().join(&inputs[0].path)).unwrap();
    assert_eq!(inputs[0].bytes, bytes.len() as u64);
    assert_eq!(inputs[0].sha256, sha(&bytes));
}
