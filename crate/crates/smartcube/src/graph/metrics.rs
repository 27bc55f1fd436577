//! Prometheus text exposition (format 0.0.4) for executor reports.

use std::path::Path;

use crate::error::Result;
use crate::graph::exec::ExecReport;

/// Render the run counters. Every sample is preceded by `# HELP` and
/// `# TYPE` lines as required by exposition format 0.0.4.
pub fn metrics_text(report: &ExecReport) -> String {
    let mut out = String::new();
    let mut sample = |name: &str, kind: &str, help: &str, value: u64| {
        out.push_str(&format!("# HELP {name} {help}\n"));
        out.push_str(&format!("# TYPE {name} {kind}\n"));
        out.push_str(&format!("{name} {value}\n"));
    };
    sample(
        "smartcube_tasks_completed_total",
        "counter",
        "Tasks that finished successfully.",
        report.tasks_completed,
    );
    sample(
        "smartcube_tasks_failed_total",
        "counter",
        "Tasks that returned an error.",
        report.tasks_failed,
    );
    sample(
        "smartcube_bytes_read_total",
        "counter",
        "Asset and document payload bytes fetched.",
        report.bytes_read,
    );
    sample(
        "smartcube_workers",
        "gauge",
        "Worker lanes used by the run.",
        report.workers as u64,
    );
    out
}

/// Write `metrics.prom` content for a report.
pub fn write_metrics(path: &Path, report: &ExecReport) -> Result<()> {
    std::fs::write(path, metrics_text(report))?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_report_renders_zero_counters() {
        let text = metrics_text(&ExecReport::default());
        assert!(text.contains("smartcube_tasks_completed_total 0\n"));
        assert!(text.contains("smartcube_tasks_failed_total 0\n"));
        assert!(text.contains("smartcube_bytes_read_total 0\n"));
        assert!(text.contains("smartcube_workers 0\n"));
    }

    #[test]
    fn counters_match_report() {
        let report = ExecReport {
            workers: 4,
            tasks_completed: 42,
            tasks_failed: 3,
            bytes_read: 1234,
            ..Default::default()
        };
        let text = metrics_text(&report);
        assert!(text.contains("smartcube_tasks_completed_total 42\n"));
        assert!(text.contains("smartcube_tasks_failed_total 3\n"));
        assert!(text.contains("smartcube_bytes_read_total 1234\n"));
        assert!(text.contains("smartcube_workers 4\n"));
    }

    #[test]
    fn every_sample_preceded_by_type_line() {
        let text = metrics_text(&ExecReport::default());
        let lines: Vec<&str> = text.lines().collect();
        for (i, line) in lines.iter().enumerate() {
            if line.starts_with('#') {
                continue;
            }
            let name = line.split_whitespace().next().unwrap();
            assert!(
                lines[..i]
                    .iter()
                    .any(|l| l.starts_with(&format!("# TYPE {name} "))),
                "sample {name} lacks a TYPE line"
            );
        }
    }
}
