//! Explanation reports: JSON (lossless), CSV, and a static HTML summary.
//! Output depends only on the results, never on timing or worker count.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::analysis::ClassWeights;
use crate::concepts::{ConceptStore, TaskKind};
use crate::error::{Error, Result};
use crate::search::{ExplanationResult, SearchConfig};

pub fn round4(x: f64) -> f64 {
    (x * 1e4).round() / 1e4
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClassWeight {
    pub class: String,
    pub weight: f32,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Alternative {
    pub formula: String,
    pub iou: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ReportRow {
    pub neuron: u32,
    pub formula: String,
    pub iou: f64,
    /// Best IoU at max length `1..=N`.
    pub curve: Vec<f64>,
    /// Best formula at max length `1..=N`.
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub per_length: Vec<String>,
    pub active_count: u64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub accuracy: Option<f64>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub top_classes: Vec<ClassWeight>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub alternatives: Vec<Alternative>,
}

impl ReportRow {
    pub fn from_result(
        result: &ExplanationResult,
        store: &ConceptStore,
        accuracy: Option<f64>,
        top_classes: Vec<ClassWeight>,
    ) -> Result<Self> {
        let alternatives = if result.alternatives.len() > 1 {
            result
                .alternatives
                .iter()
                .map(|e| {
                    Ok(Alternative {
                        formula: e.formula.render(store)?,
                        iou: round4(e.iou.value()),
                    })
                })
                .collect::<Result<_>>()?
        } else {
            Vec::new()
        };
        Ok(Self {
            neuron: result.neuron.0,
            formula: result.best.formula.render(store)?,
            iou: round4(result.best.iou.value()),
            curve: result.iou_curve().into_iter().map(round4).collect(),
            per_length: result
                .per_length
                .iter()
                .map(|e| e.formula.render(store))
                .collect::<Result<_>>()?,
            active_count: result.active_count,
            accuracy: accuracy.map(round4),
            top_classes,
            alternatives,
        })
    }
}

/// The `k` classes `neuron_index` weighs most, ties by class order.
pub fn top_classes(weights: &ClassWeights, neuron_index: usize, k: usize) -> Vec<ClassWeight> {
    let mut ranked: Vec<(usize, f32)> = (0..weights.classes())
        .map(|c| (c, weights.weight(neuron_index, c)))
        .collect();
    ranked.sort_by(|a, b| b.1.total_cmp(&a.1).then(a.0.cmp(&b.0)));
    ranked
        .into_iter()
        .take(k)
        .map(|(c, weight)| ClassWeight {
            class: weights.class_names()[c].clone(),
            weight,
        })
        .collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FailureRow {
    pub neuron: u32,
    pub reason: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Report {
    pub task: TaskKind,
    pub config: SearchConfig,
    pub rows: Vec<ReportRow>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub failures: Vec<FailureRow>,
    pub mean_iou_per_length: Vec<f64>,
}

impl Report {
    pub fn new(task: TaskKind, config: SearchConfig, rows: Vec<ReportRow>, failures: Vec<FailureRow>) -> Self {
        let mean_iou_per_length = mean_curve(&rows);
        Self {
            task,
            config,
            rows,
            failures,
            mean_iou_per_length,
        }
    }

    pub fn read_json(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Ok(serde_json::from_str(&text)?)
    }
}

/// Average of the rows' curves at each length.
pub fn mean_curve(rows: &[ReportRow]) -> Vec<f64> {
    let max_len = rows.iter().map(|r| r.curve.len()).max().unwrap_or(0);
    (0..max_len)
        .map(|l| {
            let vals: Vec<f64> = rows.iter().filter_map(|r| r.curve.get(l).copied()).collect();
            vals.iter().sum::<f64>() / vals.len() as f64
        })
        .collect()
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum ReportFormat {
    Csv,
    Json,
    Html,
}

impl ReportFormat {
    pub fn file_name(self) -> &'static str {
        match self {
            ReportFormat::Csv => "report.csv",
            ReportFormat::Json => "report.json",
            ReportFormat::Html => "summary.html",
        }
    }
}

impl FromStr for ReportFormat {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_lowercase().as_str() {
            "csv" => Ok(ReportFormat::Csv),
            "json" => Ok(ReportFormat::Json),
            "html" | "html-summary" => Ok(ReportFormat::Html),
            other => Err(Error::Config(format!("unknown report format {other:?}"))),
        }
    }
}

pub const CSV_HEADER: [&str; 7] = ["neuron", "formula", "iou", "curve", "active_count", "accuracy", "top_classes"];

pub fn to_csv(report: &Report) -> Result<Vec<u8>> {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(CSV_HEADER)?;
    for r in &report.rows {
        let curve: Vec<String> = r.curve.iter().map(|v| format!("{v:.4}")).collect();
        let classes: Vec<String> = r.top_classes.iter().map(|c| format!("{}:{:.4}", c.class, c.weight)).collect();
        w.write_record([
            r.neuron.to_string(),
            r.formula.clone(),
            format!("{:.4}", r.iou),
            curve.join(";"),
            r.active_count.to_string(),
            r.accuracy.map(|a| format!("{a:.4}")).unwrap_or_default(),
            classes.join(";"),
        ])?;
    }
    w.into_inner().map_err(|e| Error::Format(format!("csv buffer: {e}")))
}

pub fn to_json(report: &Report) -> Result<Vec<u8>> {
    let mut out = serde_json::to_vec_pretty(report)?;
    out.push(b'\n');
    Ok(out)
}

fn escape_html(s: &str) -> String {
    let mut out = String::with_capacity(s.len());
    for ch in s.chars() {
        match ch {
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

pub fn to_html(report: &Report) -> Result<Vec<u8>> {
    let curve = &report.mean_iou_per_length;
    let mut h = String::new();
    h.push_str("<!DOCTYPE html>\n<html><head><meta charset=\"utf-8\"><title>Neuron explanations</title>\n");
    h.push_str("<style>body{font-family:sans-serif;margin:2em}table{border-collapse:collapse}td,th{border:1px solid #ccc;padding:2px 8px;text-align:left}</style>\n");
    h.push_str("</head><body>\n<h1>Neuron explanations</h1>\n");
    let _ = writeln!(
        h,
        "<p>{} neurons explained, {} failed. Max length {}, beam size {}.</p>",
        report.rows.len(),
        report.failures.len(),
        report.config.max_length,
        report.config.beam_size
    );
    h.push_str("<script type=\"application/json\" id=\"mean-iou-per-length\">");
    h.push_str(&serde_json::to_string(curve)?);
    h.push_str("</script>\n");

    h.push_str("<h2>Mean IoU by max formula length</h2>\n");
    if !curve.is_empty() {
        let (w, ht, pad) = (480.0, 200.0, 30.0);
        let top = curve.iter().copied().fold(0.0f64, f64::max).max(1e-9);
        let step = if curve.len() > 1 { (w - 2.0 * pad) / (curve.len() - 1) as f64 } else { 0.0 };
        let points: Vec<String> = curve
            .iter()
            .enumerate()
            .map(|(i, v)| format!("{:.1},{:.1}", pad + i as f64 * step, ht - pad - v / top * (ht - 2.0 * pad)))
            .collect();
        let _ = writeln!(
            h,
            "<svg width=\"{w}\" height=\"{ht}\" xmlns=\"http://www.w3.org/2000/svg\"><rect width=\"100%\" height=\"100%\" fill=\"#fafafa\"/><polyline fill=\"none\" stroke=\"#1f77b4\" stroke-width=\"2\" points=\"{}\"/></svg>",
            points.join(" ")
        );
    }
    h.push_str("<table><tr><th>length</th><th>mean IoU</th></tr>\n");
    for (i, v) in curve.iter().enumerate() {
        let _ = writeln!(h, "<tr><td>{}</td><td>{v:.4}</td></tr>", i + 1);
    }
    h.push_str("</table>\n<h2>Explanations</h2>\n<table><tr><th>neuron</th><th>formula</th><th>IoU</th><th>active</th><th>accuracy</th><th>top classes</th></tr>\n");
    for r in &report.rows {
        let classes: Vec<String> = r
            .top_classes
            .iter()
            .map(|c| format!("{} ({:.4})", escape_html(&c.class), c.weight))
            .collect();
        let _ = writeln!(
            h,
            "<tr><td>{}</td><td>{}</td><td>{:.4}</td><td>{}</td><td>{}</td><td>{}</td></tr>",
            r.neuron,
            escape_html(&r.formula),
            r.iou,
            r.active_count,
            r.accuracy.map(|a| format!("{a:.4}")).unwrap_or_default(),
            classes.join(", ")
        );
    }
    h.push_str("</table>\n");
    if !report.failures.is_empty() {
        h.push_str("<h2>Failures</h2>\n<ul>\n");
        for f in &report.failures {
            let _ = writeln!(h, "<li>neuron {}: {}</li>", f.neuron, escape_html(&f.reason));
        }
        h.push_str("</ul>\n");
    }
    h.push_str("</body></html>\n");
    Ok(h.into_bytes())
}

pub fn render(report: &Report, format: ReportFormat) -> Result<Vec<u8>> {
    match format {
        ReportFormat::Csv => to_csv(report),
        ReportFormat::Json => to_json(report),
        ReportFormat::Html => to_html(report),
    }
}

/// Writes each format into `dir` under its fixed file name.
pub fn emit_report(report: &Report, formats: &[ReportFormat], dir: &Path) -> Result<()> {
    if report.rows.is_empty() && report.failures.is_empty() {
        return Err(Error::Degenerate("nothing to report".into()));
    }
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    for &f in formats {
        let path = dir.join(f.file_name());
        fs::write(&path, render(report, f)?).map_err(|e| Error::io(&path, e))?;
    }
    Ok(())
}
