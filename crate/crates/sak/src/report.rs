//! Report-only arithmetic: multi-task gain and bias analysis computed
//! from metric CSV files, no model required.

use std::path::Path;

use serde::Serialize;

use crate::error::{Error, Result};
use crate::pipeline::evaluate::{infer_directions, read_metrics_csv};
use crate::tasks::metrics::{bias_report, delta_m, BiasReport};
use crate::tasks::MetricRow;

#[derive(Debug, Serialize)]
pub struct Report {
    pub delta_m_percent: f64,
    pub bias: BiasReport,
}

/// Compute the report from in-memory rows. Directions come from metric
/// names (mErr/RMSE improve downward) unless `lower_override` names the
/// lower-is-better tasks explicitly.
pub fn from_rows(
    multi: &[MetricRow],
    single: &[MetricRow],
    lower_override: &[String],
) -> Result<Report> {
    let directions = infer_directions(single, lower_override);
    Ok(Report {
        delta_m_percent: delta_m(multi, single, &directions)?,
        bias: bias_report(multi, single, &directions)?,
    })
}

pub fn from_csv_paths(multi: &Path, single: &Path, lower_override: &[String]) -> Result<Report> {
    let multi_rows = read_metrics_csv(std::fs::File::open(multi)?)?;
    let single_rows = read_metrics_csv(std::fs::File::open(single)?)?;
    from_rows(&multi_rows, &single_rows, lower_override)
}

pub fn to_json(report: &Report) -> Result<String> {
    serde_json::to_string_pretty(report).map_err(|e| Error::Format(e.to_string()))
}

/// Published five- and four-task benchmark rows used by the self-checks:
/// multi-task systems against their single-task baseline.
pub mod tables {
    use crate::tasks::MetricRow;

    fn rows(vals: &[(&str, &str, f64)]) -> Vec<MetricRow> {
        vals.iter()
            .map(|(task, metric, value)| MetricRow {
                task: task.to_string(),
                metric: metric.to_string(),
                value: *value,
            })
            .collect()
    }

    /// Five-task single-task baseline (large backbone).
    pub fn pascal_single() -> Vec<MetricRow> {
        rows(&[
            ("semseg", "mIoU", 81.61),
            ("parsing", "mIoU", 72.77),
            ("saliency", "maxF", 83.80),
            ("normal", "mErr", 13.87),
            ("boundary", "odsF", 75.24),
        ])
    }

    pub fn pascal_multi_baseline() -> Vec<MetricRow> {
        rows(&[
            ("semseg", "mIoU", 79.26),
            ("parsing", "mIoU", 68.28),
            ("saliency", "maxF", 84.16),
            ("normal", "mErr", 14.06),
            ("boundary", "odsF", 71.59),
        ])
    }

    pub fn pascal_invpt() -> Vec<MetricRow> {
        rows(&[
            ("semseg", "mIoU", 79.03),
            ("parsing", "mIoU", 67.61),
            ("saliency", "maxF", 84.81),
            ("normal", "mErr", 14.15),
            ("boundary", "odsF", 73.00),
        ])
    }

    pub fn pascal_mlore() -> Vec<MetricRow> {
        rows(&[
            ("semseg", "mIoU", 81.41),
            ("parsing", "mIoU", 70.52),
            ("saliency", "maxF", 84.90),
            ("normal", "mErr", 13.51),
            ("boundary", "odsF", 75.42),
        ])
    }

    pub fn pascal_sak() -> Vec<MetricRow> {
        rows(&[
            ("semseg", "mIoU", 84.01),
            ("parsing", "mIoU", 76.99),
            ("saliency", "maxF", 84.65),
            ("normal", "mErr", 13.82),
            ("boundary", "odsF", 76.27),
        ])
    }

    /// Four-task indoor benchmark rows (lower-better: depth RMSE, normal
    /// mErr).
    pub fn nyud_single() -> Vec<MetricRow> {
        rows(&[
            ("semseg", "mIoU", 54.19),
            ("depth", "RMSE", 0.5560),
            ("normal", "mErr", 19.22),
            ("boundary", "odsF", 78.09),
        ])
    }

    pub fn nyud_multi_baseline() -> Vec<MetricRow> {
        rows(&[
            ("semseg", "mIoU", 52.42),
            ("depth", "RMSE", 0.5413),
            ("normal", "mErr", 19.29),
            ("boundary", "odsF", 76.50),
        ])
    }

    pub fn nyud_sak() -> Vec<MetricRow> {
        rows(&[
            ("semseg", "mIoU", 63.18),
            ("depth", "RMSE", 0.4313),
            ("normal", "mErr", 16.25),
            ("boundary", "odsF", 79.43),
        ])
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn equal_rows_give_zero_gain() {
        let single = tables::pascal_single();
        let r = from_rows(&single, &single, &[]).unwrap();
        assert_eq!(r.delta_m_percent, 0.0);
        assert_eq!(r.bias.mu, 0.0);
    }

    #[test]
    fn published_five_task_gains_reproduce() {
        let single = tables::pascal_single();
        for (rows, expected) in [
            (tables::pascal_multi_baseline(), -2.97),
            (tables::pascal_invpt(), -2.81),
            (tables::pascal_mlore(), 0.16),
            (tables::pascal_sak(), 2.30),
        ] {
            let r = from_rows(&rows, &single, &[]).unwrap();
            assert!(
                (r.delta_m_percent - expected).abs() <= 0.02,
                "expected {expected}, got {}",
                r.delta_m_percent
            );
        }
    }

    #[test]
    fn published_four_task_gains_reproduce() {
        let single = tables::nyud_single();
        for (rows, expected) in [
            (tables::nyud_multi_baseline(), -0.76),
            (tables::nyud_sak(), 14.05),
        ] {
            let r = from_rows(&rows, &single, &[]).unwrap();
            assert!(
                (r.delta_m_percent - expected).abs() <= 0.02,
                "expected {expected}, got {}",
                r.delta_m_percent
            );
        }
    }

    #[test]
    fn csv_round_trip_matches_in_memory() {
        let dir = tempfile::tempdir().unwrap();
        let multi_path = dir.path().join("multi.csv");
        let single_path = dir.path().join("single.csv");
        let mut multi_file = std::fs::File::create(&multi_path).unwrap();
        crate::pipeline::evaluate::write_metrics_csv(&tables::pascal_sak(), &mut multi_file)
            .unwrap();
        let mut single_file = std::fs::File::create(&single_path).unwrap();
        crate::pipeline::evaluate::write_metrics_csv(&tables::pascal_single(), &mut single_file)
            .unwrap();
        let r = from_csv_paths(&multi_path, &single_path, &[]).unwrap();
        assert!((r.delta_m_percent - 2.30).abs() <= 0.02);
    }
}
