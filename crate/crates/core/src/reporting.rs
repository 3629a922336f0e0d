//! JUnit-style result parsing and run-level test reports.
//!
//! Only `testsuite`/`testcase` elements and nested `failure`/`error`
//! elements are read. Counts are always derived from the `testcase`
//! elements; summary attributes on `testsuite` are ignored.

use std::fmt::Write as _;
use std::str::FromStr;

use chrono::{DateTime, Utc};
use quick_xml::events::{BytesStart, Event};
use quick_xml::Reader;
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum CaseStatus {
    Passed,
    Failed,
    Errored,
}

impl CaseStatus {
    pub fn as_str(self) -> &'static str {
        match self {
            CaseStatus::Passed => "passed",
            CaseStatus::Failed => "failed",
            CaseStatus::Errored => "errored",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TestCaseResult {
    pub name: String,
    pub status: CaseStatus,
    pub duration_s: f64,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub message: Option<String>,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Totals {
    pub run: usize,
    pub passed: usize,
    pub failed: usize,
    pub errored: usize,
}

impl Totals {
    pub fn count(cases: &[TestCaseResult]) -> Self {
        let mut t = Totals { run: cases.len(), ..Default::default() };
        for c in cases {
            match c.status {
                CaseStatus::Passed => t.passed += 1,
                CaseStatus::Failed => t.failed += 1,
                CaseStatus::Errored => t.errored += 1,
            }
        }
        t
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TestReport {
    pub run_id: String,
    pub totals: Totals,
    pub cases: Vec<TestCaseResult>,
    #[serde(skip, default = "Utc::now")]
    pub generated_at: DateTime<Utc>,
}

impl TestReport {
    pub fn empty(run_id: impl Into<String>) -> Self {
        aggregate(&run_id.into(), &[])
    }

    pub fn all_passed(&self) -> bool {
        self.totals.failed == 0 && self.totals.errored == 0
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ReportFormat {
    Json,
    Html,
}

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
#[error("unknown report format `{0}` (expected json or html)")]
pub struct UnknownFormat(pub String);

impl FromStr for ReportFormat {
    type Err = UnknownFormat;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "json" => Ok(ReportFormat::Json),
            "html" => Ok(ReportFormat::Html),
            other => Err(UnknownFormat(other.to_owned())),
        }
    }
}

#[derive(Default)]
struct OpenCase {
    name: String,
    duration_s: f64,
    status: Option<CaseStatus>,
    message: Option<String>,
    in_detail: bool,
    detail_text: String,
}

fn attr(e: &BytesStart<'_>, key: &[u8]) -> Option<String> {
    e.attributes()
        .flatten()
        .find(|a| a.key.as_ref() == key)
        .and_then(|a| a.unescape_value().ok())
        .map(|v| v.into_owned())
}

fn open_case(e: &BytesStart<'_>) -> OpenCase {
    let name = attr(e, b"name").unwrap_or_default();
    let name = match attr(e, b"classname") {
        Some(class) if !class.is_empty() => format!("{class}.{name}"),
        _ => name,
    };
    let duration_s = attr(e, b"time")
        .and_then(|t| t.trim().parse::<f64>().ok())
        .filter(|t| t.is_finite() && *t >= 0.0)
        .unwrap_or(0.0);
    OpenCase { name, duration_s, ..Default::default() }
}

fn mark(case: &mut OpenCase, status: CaseStatus, e: &BytesStart<'_>) {
    // error outranks failure if a case carries both
    if case.status.is_none_or(|s| s < status) {
        case.status = Some(status);
        case.message = attr(e, b"message").filter(|m| !m.is_empty());
    }
}

fn close_case(case: OpenCase) -> TestCaseResult {
    let status = case.status.unwrap_or(CaseStatus::Passed);
    let message = case.message.or_else(|| {
        let text = case.detail_text.trim();
        (status != CaseStatus::Passed && !text.is_empty()).then(|| text.to_owned())
    });
    TestCaseResult { name: case.name, status, duration_s: case.duration_s, message }
}

fn try_parse(xml: &str) -> Result<Vec<TestCaseResult>, String> {
    let mut reader = Reader::from_str(xml);
    reader.config_mut().check_end_names = true;
    let mut cases = Vec::new();
    let mut current: Option<OpenCase> = None;
    let mut depth = 0usize;
    let mut saw_suite = false;

    loop {
        let ev = reader
            .read_event()
            .map_err(|e| format!("at byte {}: {e}", reader.error_position()))?;
        match ev {
            Event::Start(e) => {
                depth += 1;
                match e.local_name().as_ref() {
                    b"testsuite" | b"testsuites" => saw_suite = true,
                    b"testcase" => current = Some(open_case(&e)),
                    b"failure" => {
                        if let Some(c) = current.as_mut() {
                            mark(c, CaseStatus::Failed, &e);
                            c.in_detail = true;
                        }
                    }
                    b"error" => {
                        if let Some(c) = current.as_mut() {
                            mark(c, CaseStatus::Errored, &e);
                            c.in_detail = true;
                        }
                    }
                    _ => {}
                }
            }
            Event::Empty(e) => match e.local_name().as_ref() {
                b"testsuite" | b"testsuites" => saw_suite = true,
                b"testcase" => cases.push(close_case(open_case(&e))),
                b"failure" => {
                    if let Some(c) = current.as_mut() {
                        mark(c, CaseStatus::Failed, &e);
                    }
                }
                b"error" => {
                    if let Some(c) = current.as_mut() {
                        mark(c, CaseStatus::Errored, &e);
                    }
                }
                _ => {}
            },
            Event::Text(t) => {
                if let Some(c) = current.as_mut().filter(|c| c.in_detail) {
                    if let Ok(text) = t.unescape() {
                        c.detail_text.push_str(&text);
                    }
                }
            }
            Event::CData(t) => {
                if let Some(c) = current.as_mut().filter(|c| c.in_detail) {
                    c.detail_text.push_str(&String::from_utf8_lossy(&t));
                }
            }
            Event::End(e) => {
                depth = depth.saturating_sub(1);
                match e.local_name().as_ref() {
                    b"testcase" => {
                        if let Some(c) = current.take() {
                            cases.push(close_case(c));
                        }
                    }
                    b"failure" | b"error" => {
                        if let Some(c) = current.as_mut() {
                            c.in_detail = false;
                        }
                    }
                    _ => {}
                }
            }
            Event::Eof => break,
            _ => {}
        }
    }
    if depth != 0 {
        return Err("unexpected end of document".into());
    }
    if !saw_suite {
        return Err("no testsuite element".into());
    }
    Ok(cases)
}

/// Parses one result file. A malformed file becomes a single errored case
/// named after the file.
pub fn parse_result_file(file_name: &str, xml: &str) -> Vec<TestCaseResult> {
    match try_parse(xml) {
        Ok(cases) => cases,
        Err(reason) => vec![TestCaseResult {
            name: file_name.to_owned(),
            status: CaseStatus::Errored,
            duration_s: 0.0,
            message: Some(format!("malformed result file: {reason}")),
        }],
    }
}

/// Aggregates `(file name, contents)` pairs into a report. Cases are sorted
/// so the result does not depend on file order.
pub fn aggregate(run_id: &str, files: &[(String, String)]) -> TestReport {
    let mut cases: Vec<TestCaseResult> = files
        .iter()
        .flat_map(|(name, xml)| parse_result_file(name, xml))
        .collect();
    cases.sort_by(|a, b| {
        a.name
            .cmp(&b.name)
            .then(a.status.cmp(&b.status))
            .then(a.duration_s.total_cmp(&b.duration_s))
            .then(a.message.cmp(&b.message))
    });
    TestReport { run_id: run_id.to_owned(), totals: Totals::count(&cases), cases, generated_at: Utc::now() }
}

pub fn render_report(report: &TestReport, format: ReportFormat) -> String {
    match format {
        ReportFormat::Json => serde_json::to_string_pretty(report).expect("report serializes"),
        ReportFormat::Html => render_html(report),
    }
}

/// String-format entry point; rejects unknown format names.
pub fn render_report_as(report: &TestReport, format: &str) -> Result<String, UnknownFormat> {
    Ok(render_report(report, format.parse()?))
}

fn escape(s: &str) -> String {
    let mut out = String::with_capacity(s.len());
    for c in s.chars() {
        match c {
            '&' => out.push_str("&amp;"),
            '<' => out.push_str("&lt;"),
            '>' => out.push_str("&gt;"),
            '"' => out.push_str("&quot;"),
            '\'' => out.push_str("&#39;"),
            c => out.push(c),
        }
    }
    out
}

fn render_html(report: &TestReport) -> String {
    let t = &report.totals;
    let mut html = String::new();
    let _ = write!(
        html,
        "<!DOCTYPE html>\n<html lang=\"en\">\n<head>\n<meta charset=\"utf-8\">\n\
         <title>Test report {id}</title>\n<style>\n\
         body{{font-family:sans-serif;margin:2em}}\n\
         table{{border-collapse:collapse}}\n\
         td,th{{border:1px solid #ccc;padding:4px 8px;text-align:left}}\n\
         .passed{{color:#1a7f37}} .failed{{color:#cf222e}} .errored{{color:#9a6700}}\n\
         </style>\n</head>\n<body>\n<h1>Test report {id}</h1>\n\
         <p id=\"totals\">run: {run} &middot; passed: {passed} &middot; failed: {failed} &middot; errored: {errored}</p>\n\
         <table>\n<thead><tr><th>case</th><th>status</th><th>duration (s)</th><th>message</th></tr></thead>\n<tbody>\n",
        id = escape(&report.run_id),
        run = t.run,
        passed = t.passed,
        failed = t.failed,
        errored = t.errored,
    );
    for c in &report.cases {
        let _ = writeln!(
            html,
            "<tr class=\"case\"><td>{}</td><td class=\"{s}\">{s}</td><td>{:.3}</td><td>{}</td></tr>",
            escape(&c.name),
            c.duration_s,
            escape(c.message.as_deref().unwrap_or("")),
            s = c.status.as_str(),
        );
    }
    html.push_str("</tbody>\n</table>\n</body>\n</html>\n");
    html
}

#[cfg(test)]
mod tests {
    use super::*;

    const TWO: &str = r#"<?xml version="1.0"?>
<testsuite name="api" tests="9" failures="0">
  <testcase name="get_data" time="0.12"/>
  <testcase classname="api" name="post_data" time="0.3">
    <failure message="expected 201">assert 500 == 201</failure>
  </testcase>
</testsuite>"#;

    #[test]
    fn pass_and_fail() {
        let cases = parse_result_file("two.xml", TWO);
        assert_eq!(cases.len(), 2);
        assert_eq!(cases[0].status, CaseStatus::Passed);
        assert_eq!(cases[0].duration_s, 0.12);
        assert_eq!(cases[1].status, CaseStatus::Failed);
        assert_eq!(cases[1].name, "api.post_data");
        assert_eq!(cases[1].message.as_deref(), Some("expected 201"));
    }

    #[test]
    fn failure_text_used_when_no_message_attr() {
        let xml = r#"<testsuite><testcase name="a"><error>boom</error></testcase></testsuite>"#;
        let cases = parse_result_file("f", xml);
        assert_eq!(cases[0].status, CaseStatus::Errored);
        assert_eq!(cases[0].message.as_deref(), Some("boom"));
    }

    #[test]
    fn empty_suite() {
        assert!(parse_result_file("e.xml", "<testsuite name=\"x\"></testsuite>").is_empty());
        assert!(parse_result_file("e.xml", "<testsuite/>").is_empty());
    }

    #[test]
    fn malformed_becomes_one_errored_case() {
        for bad in [&TWO[..TWO.len() / 2], "", "not xml at all", "<testsuite><testcase></testsuite>"] {
            let cases = parse_result_file("bad.xml", bad);
            assert_eq!(cases.len(), 1, "{bad:?}");
            assert_eq!(cases[0].status, CaseStatus::Errored);
            assert_eq!(cases[0].name, "bad.xml");
        }
    }

    #[test]
    fn negative_time_clamped() {
        let cases = parse_result_file("f", r#"<testsuite><testcase name="a" time="-3"/></testsuite>"#);
        assert_eq!(cases[0].duration_s, 0.0);
    }

    #[test]
    fn aggregate_totals_and_order() {
        let files = vec![
            ("b.xml".to_owned(), TWO.to_owned()),
            ("bad.xml".to_owned(), "<testsuite>".to_owned()),
        ];
        let r = aggregate("run-1", &files);
        assert_eq!(r.totals, Totals { run: 3, passed: 1, failed: 1, errored: 1 });
        let names: Vec<_> = r.cases.iter().map(|c| c.name.as_str()).collect();
        assert_eq!(names, ["api.post_data", "bad.xml", "get_data"]);
        assert_eq!(aggregate("z", &[]).totals, Totals::default());
    }

    #[test]
    fn order_independent_bytes() {
        let a = ("a.xml".to_owned(), TWO.to_owned());
        let b = ("b.xml".to_owned(), r#"<testsuite><testcase name="z"/></testsuite>"#.to_owned());
        let r1 = aggregate("r", &[a.clone(), b.clone()]);
        let r2 = aggregate("r", &[b, a]);
        assert_eq!(render_report(&r1, ReportFormat::Json), render_report(&r2, ReportFormat::Json));
        assert_eq!(render_report(&r1, ReportFormat::Html), render_report(&r2, ReportFormat::Html));
    }

    #[test]
    fn json_schema_keys() {
        let r = aggregate("run-9", &[("t.xml".to_owned(), TWO.to_owned())]);
        let v: serde_json::Value = serde_json::from_str(&render_report(&r, ReportFormat::Json)).unwrap();
        assert_eq!(v["run_id"], "run-9");
        assert_eq!(v["totals"], serde_json::json!({"run": 2, "passed": 1, "failed": 1, "errored": 0}));
        assert_eq!(v["cases"][0]["name"], "api.post_data");
        assert_eq!(v["cases"][0]["duration_s"], 0.3);
        assert!(v["cases"][1].get("message").is_none());
    }

    #[test]
    fn html_rows_and_escaping() {
        let xml = r#"<testsuite><testcase name="&lt;script&gt;"/></testsuite>"#;
        let r = aggregate("r", &[("x".to_owned(), xml.to_owned())]);
        let html = render_report(&r, ReportFormat::Html);
        assert_eq!(html.matches("<tr class=\"case\">").count(), 1);
        assert!(html.contains("&lt;script&gt;"));
        let empty = render_report(&TestReport::empty("r"), ReportFormat::Html);
        assert_eq!(empty.matches("<tr class=\"case\">").count(), 0);
        assert!(empty.contains("run: 0"));
    }

    #[test]
    fn unknown_format_rejected() {
        assert_eq!(
            render_report_as(&TestReport::empty("r"), "pdf"),
            Err(UnknownFormat("pdf".into()))
        );
    }
}
