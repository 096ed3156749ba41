use std::fmt::Write as _;
use std::path::Path;
use std::str::FromStr;

use super::ablation::AblationReport;
use super::metrics::{MeanStd, MetricsReport, Split};
use super::EvalError;
use crate::retrieval::Source;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ReportFormat {
    Csv,
    Json,
    Text,
}

impl FromStr for ReportFormat {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.to_lowercase().as_str() {
            "csv" => Ok(ReportFormat::Csv),
            "json" => Ok(ReportFormat::Json),
            "text" | "table" | "txt" => Ok(ReportFormat::Text),
            other => Err(format!("unknown report format `{other}` (csv, json, text)")),
        }
    }
}

impl ReportFormat {
    /// Format implied by a file extension, defaulting to JSON.
    pub fn from_path(path: &Path) -> Self {
        match path.extension().and_then(|e| e.to_str()) {
            Some("csv") => ReportFormat::Csv,
            Some("txt") => ReportFormat::Text,
            _ => ReportFormat::Json,
        }
    }
}

fn cell(v: Option<f64>) -> String {
    v.map(|x| format!("{x:.4}")).unwrap_or_default()
}

/// CSV header for a report over `levels`. Columns: `method, split, n_items,
/// n_repeats`, then `acc_<level>_mean, acc_<level>_std` per level, then the
/// same with `set_` for set coverage, then `error_count, cost_usd_total,
/// cost_usd_per_code`.
pub fn csv_header(levels: &[String]) -> Vec<String> {
    let mut cols: Vec<String> = ["method", "split", "n_items", "n_repeats"]
        .iter()
        .map(|s| s.to_string())
        .collect();
    for prefix in ["acc", "set"] {
        for level in levels {
            cols.push(format!("{prefix}_{level}_mean"));
            cols.push(format!("{prefix}_{level}_std"));
        }
    }
    cols.extend(["error_count", "cost_usd_total", "cost_usd_per_code"].map(String::from));
    cols
}

fn csv_report(report: &MetricsReport) -> String {
    let mut out = csv_header(&report.levels).join(",");
    out.push('\n');
    let method = report.method.map(|m| m.as_str()).unwrap_or("");
    for split in Split::ALL {
        let Some(m) = report.splits.get(&split) else {
            continue;
        };
        let mut row = vec![
            method.to_string(),
            split.as_str().to_string(),
            m.n_items.to_string(),
            report.n_repeats.to_string(),
        ];
        for table in [&m.accuracy, &m.set_coverage] {
            for level in &report.levels {
                let v: Option<MeanStd> = table.get(level).copied().flatten();
                row.push(cell(v.map(|x| x.mean)));
                row.push(cell(v.map(|x| x.std)));
            }
        }
        row.push(report.error_count.to_string());
        row.push(format!("{:.8}", report.cost_usd_total));
        row.push(format!("{:.8}", report.cost_usd_per_code));
        out.push_str(&row.join(","));
        out.push('\n');
    }
    out
}

fn text_report(report: &MetricsReport) -> String {
    let method = report.method.map(|m| m.as_str()).unwrap_or("mixed");
    let mut header = vec!["split".to_string(), "n".to_string()];
    for prefix in ["acc", "set"] {
        header.extend(report.levels.iter().map(|l| format!("{prefix} {l}")));
    }
    let mut rows = vec![header];
    for split in Split::ALL {
        let Some(m) = report.splits.get(&split) else {
            continue;
        };
        let mut row = vec![split.as_str().to_string(), m.n_items.to_string()];
        for table in [&m.accuracy, &m.set_coverage] {
            for level in &report.levels {
                row.push(match table.get(level).copied().flatten() {
                    Some(v) => format!("{:.4} ± {:.4}", v.mean, v.std),
                    None => "-".to_string(),
                });
            }
        }
        rows.push(row);
    }
    let mut out = format!(
        "method {method}, {} repeat(s), {} error(s), cost ${:.6} total, ${:.8} per code\n",
        report.n_repeats, report.error_count, report.cost_usd_total, report.cost_usd_per_code
    );
    out.push_str(&table(&rows));
    out
}

fn table(rows: &[Vec<String>]) -> String {
    let cols = rows.iter().map(Vec::len).max().unwrap_or(0);
    let widths: Vec<usize> = (0..cols)
        .map(|c| {
            rows.iter()
                .filter_map(|r| r.get(c))
                .map(|s| s.chars().count())
                .max()
                .unwrap_or(0)
        })
        .collect();
    let mut out = String::new();
    for row in rows {
        let line: Vec<String> = row
            .iter()
            .enumerate()
            .map(|(i, s)| format!("{s:<w$}", w = widths[i]))
            .collect();
        let _ = writeln!(out, "{}", line.join("  ").trim_end());
    }
    out
}

pub fn render_report(report: &MetricsReport, format: ReportFormat) -> String {
    match format {
        ReportFormat::Csv => csv_report(report),
        ReportFormat::Json => {
            let mut s = serde_json::to_string_pretty(report).expect("report serializes");
            s.push('\n');
            s
        }
        ReportFormat::Text => text_report(report),
    }
}

pub fn render_ablation(report: &AblationReport, format: ReportFormat) -> String {
    let row = |s: Source| {
        vec![
            s.as_str().to_string(),
            format!("{:.4}", report.correct_source_pct.get(&s).copied().unwrap_or(0.0)),
            report.proposed.get(&s).copied().unwrap_or(0).to_string(),
            report.pruned.get(&s).copied().unwrap_or(0).to_string(),
            format!("{:.4}", report.filtered_pct.get(&s).copied().unwrap_or(0.0)),
            report
                .overlap_pct
                .get(&s)
                .map(|v| format!("{v:.4}"))
                .unwrap_or_default(),
        ]
    };
    let header: Vec<String> = [
        "source",
        "correct_source_pct",
        "proposed",
        "pruned",
        "filtered_pct",
        "overlap_with_llm_pct",
    ]
    .iter()
    .map(|s| s.to_string())
    .collect();
    match format {
        ReportFormat::Json => {
            let mut s = serde_json::to_string_pretty(report).expect("report serializes");
            s.push('\n');
            s
        }
        ReportFormat::Csv => {
            let mut out = header.join(",");
            out.push('\n');
            for s in Source::ALL {
                out.push_str(&row(s).join(","));
                out.push('\n');
            }
            out
        }
        ReportFormat::Text => {
            let mut rows = vec![header];
            rows.extend(Source::ALL.into_iter().map(row));
            format!(
                "{} correct decision(s) attributed\n{}",
                report.n_attributed,
                table(&rows)
            )
        }
    }
}

pub fn write_text(path: impl AsRef<Path>, text: &str) -> Result<(), EvalError> {
    let path = path.as_ref();
    std::fs::write(path, text).map_err(|e| EvalError::Io(format!("{}: {e}", path.display())))
}

/// Renders and writes a metrics report.
pub fn emit_report(
    report: &MetricsReport,
    format: ReportFormat,
    path: impl AsRef<Path>,
) -> Result<(), EvalError> {
    write_text(path, &render_report(report, format))
}
