use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use super::{PriorSummary, RunRecord};
use crate::error::{Error, Result};
use crate::kl_diag::BoundReport;
use crate::metrics::{mean_std, MetricReport};
use crate::targets::{Provenance, SampleBatch};

pub const CSV_SCHEMA: &str = "metrics-v1";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricSummary {
    pub mean: f64,
    pub std: f64,
    pub n: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub schema: String,
    pub metrics: BTreeMap<String, MetricSummary>,
    pub prior: Option<PriorSummary>,
    pub bound: Option<BoundReport>,
    pub artifacts: BTreeMap<String, String>,
    pub stage_seconds: Vec<(String, f64)>,
}

/// `(metric, value)` rows of one repetition, in a fixed order.
fn metric_rows(report: &MetricReport) -> Vec<(String, f64)> {
    let mut rows = vec![("swd".to_string(), report.swd), ("max_swd".to_string(), report.max_swd)];
    for q in &report.quantiles {
        rows.push((format!("qrel@{}", q.q), q.mean));
    }
    rows
}

fn csv_error(path: &Path, e: csv::Error) -> Error {
    match e.into_kind() {
        csv::ErrorKind::Io(io) => Error::io(path, io),
        other => Error::Metric(format!("{}: {other:?}", path.display())),
    }
}

fn write_metrics_csv(path: &Path, reports: &[MetricReport]) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(|e| csv_error(path, e))?;
    w.write_record(["metric", "repetition", "value"]).map_err(|e| csv_error(path, e))?;
    for (r, report) in reports.iter().enumerate() {
        for (name, value) in metric_rows(report) {
            w.write_record([name, r.to_string(), value.to_string()])
                .map_err(|e| csv_error(path, e))?;
        }
    }
    w.flush().map_err(|e| Error::io(path, e))
}

fn write_bound_csv(path: &Path, bound: &BoundReport) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(|e| csv_error(path, e))?;
    w.write_record(["quantity", "value", "std_err", "n"]).map_err(|e| csv_error(path, e))?;
    let mut rows = vec![
        ("sigma_t", bound.sigma_t, None),
        ("e_init", bound.e_init.value, Some(bound.e_init)),
        ("fisher_delta", bound.fisher_delta.value, Some(bound.fisher_delta)),
        ("fisher_t", bound.fisher_t.value, Some(bound.fisher_t)),
        ("max_gamma", bound.max_gamma, None),
        ("e_disc", bound.e_disc, None),
    ];
    if let Some(t) = bound.e_train {
        rows.push(("e_train", t, None));
    }
    for (name, value, est) in rows {
        let (se, n) = match est {
            Some(e) => (e.std_err.to_string(), e.n.to_string()),
            None => (String::new(), String::new()),
        };
        w.write_record([name.to_string(), value.to_string(), se, n])
            .map_err(|e| csv_error(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

/// Mean and population std per metric across repetitions.
pub fn summarize(reports: &[MetricReport]) -> BTreeMap<String, MetricSummary> {
    let mut columns: BTreeMap<String, Vec<f64>> = BTreeMap::new();
    for report in reports {
        for (name, value) in metric_rows(report) {
            columns.entry(name).or_default().push(value);
        }
    }
    columns
        .into_iter()
        .map(|(name, values)| {
            let (mean, std) = mean_std(&values);
            (name, MetricSummary { mean, std, n: values.len() })
        })
        .collect()
}

/// Writes `metrics.csv`, `bound.csv` (when present) and `summary.json` into
/// `dir`, returning the written paths.
pub fn emit_report(record: &RunRecord, dir: &Path) -> Result<Vec<PathBuf>> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut written = Vec::new();
    let metrics = dir.join("metrics.csv");
    write_metrics_csv(&metrics, &record.reports)?;
    written.push(metrics);
    if let Some(bound) = &record.bound {
        let path = dir.join("bound.csv");
        write_bound_csv(&path, bound)?;
        written.push(path);
    }
    let summary = Summary {
        schema: CSV_SCHEMA.to_string(),
        metrics: summarize(&record.reports),
        prior: record.prior.clone(),
        bound: record.bound.clone(),
        artifacts: record.artifacts.clone(),
        stage_seconds: record.stage_seconds.clone(),
    };
    let path = dir.join("summary.json");
    let json = serde_json::to_string_pretty(&summary).expect("summary serializes");
    fs::write(&path, json).map_err(|e| Error::io(&path, e))?;
    written.push(path);
    Ok(written)
}

pub fn write_samples_csv(path: &Path, batch: &SampleBatch) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(|e| csv_error(path, e))?;
    w.write_record((0..batch.dim()).map(|j| format!("x{j}")))
        .map_err(|e| csv_error(path, e))?;
    for row in batch.data.rows() {
        w.write_record(row.iter().map(|v| v.to_string())).map_err(|e| csv_error(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

pub fn read_samples_csv(path: &Path, provenance: Provenance) -> Result<SampleBatch> {
    let mut r = csv::Reader::from_path(path).map_err(|e| csv_error(path, e))?;
    let d = r.headers().map_err(|e| csv_error(path, e))?.len();
    let mut flat = Vec::new();
    for record in r.records() {
        let record = record.map_err(|e| csv_error(path, e))?;
        for field in record.iter() {
            let v: f64 = field
                .trim()
                .parse()
                .map_err(|_| Error::config(format!("{}: `{field}` is not a number", path.display())))?;
            flat.push(v);
        }
    }
    let n = flat.len() / d.max(1);
    let data = Array2::from_shape_vec((n, d), flat).map_err(|e| Error::config(e.to_string()))?;
    SampleBatch::new(data, provenance, None)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::harness::RunConfig;
    use crate::metrics::QuantileError;

    fn record(reports: Vec<MetricReport>) -> RunRecord {
        RunRecord {
            config: RunConfig::default(),
            artifacts: BTreeMap::new(),
            reports,
            bound: None,
            prior: None,
            stage_seconds: Vec::new(),
        }
    }

    fn report(i: usize) -> MetricReport {
        MetricReport {
            swd: 0.1 * i as f64,
            max_swd: 0.3 + i as f64,
            direction: vec![1.0, 0.0],
            quantiles: vec![QuantileError {
                q: 0.99,
                mean: 0.01 * (i * i) as f64,
                std: 0.0,
                per_dim: vec![],
            }],
        }
    }

    #[test]
    fn empty_record_gives_header_only_csv() {
        let dir = tempfile::tempdir().unwrap();
        emit_report(&record(vec![]), dir.path()).unwrap();
        let text = fs::read_to_string(dir.path().join("metrics.csv")).unwrap();
        assert_eq!(text, "metric,repetition,value\n");
        assert!(!dir.path().join("bound.csv").exists());
    }

    #[test]
    fn summary_matches_rows() {
        let dir = tempfile::tempdir().unwrap();
        let reports: Vec<_> = (0..20).map(report).collect();
        emit_report(&record(reports), dir.path()).unwrap();
        let mut rows: BTreeMap<String, Vec<f64>> = BTreeMap::new();
        let mut r = csv::Reader::from_path(dir.path().join("metrics.csv")).unwrap();
        for rec in r.records() {
            let rec = rec.unwrap();
            rows.entry(rec[0].to_string()).or_default().push(rec[2].parse().unwrap());
        }
        let summary: Summary =
            serde_json::from_str(&fs::read_to_string(dir.path().join("summary.json")).unwrap()).unwrap();
        assert_eq!(rows.len(), 3);
        for (name, values) in rows {
            assert_eq!(values.len(), 20);
            let (m, s) = mean_std(&values);
            let got = &summary.metrics[&name];
            assert!((got.mean - m).abs() < 1e-12 && (got.std - s).abs() < 1e-12);
        }
    }

    #[test]
    fn samples_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("s.csv");
        let data = ndarray::array![[0.1, -2.5], [1e-300, 3.0]];
        let batch = SampleBatch::new(data.clone(), Provenance::Generated, None).unwrap();
        write_samples_csv(&path, &batch).unwrap();
        assert_eq!(read_samples_csv(&path, Provenance::Generated).unwrap().data, data);
    }
}
