//! Nine-column results table: model, five metrics as `mean±std`,
//! parameter count, training seconds and per-image inference milliseconds.

use std::path::Path;

use qgjet_core::train::{mean_std, AggregateReport, MeanStd, MetricError, RunRecord};
use thiserror::Error;

pub const HEADER: [&str; 9] = ["Model", "Accuracy", "Precision", "Recall", "F1", "ROC-AUC", "Params", "TrainTime", "InferenceMs"];

#[derive(Debug, Error)]
pub enum ReportError {
    #[error("csv error: {0}")]
    Csv(#[from] csv::Error),
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
    #[error("row {row}: {reason}")]
    Parse { row: usize, reason: String },
    #[error(transparent)]
    Metric(#[from] MetricError),
}

/// One model configuration aggregated over its seeds.
#[derive(Clone, Debug, PartialEq)]
pub struct MetricsRow {
    pub model: String,
    pub accuracy: MeanStd,
    pub precision: MeanStd,
    pub recall: MeanStd,
    pub f1: MeanStd,
    pub roc_auc: MeanStd,
    pub params: usize,
    pub train_seconds: MeanStd,
    pub inference_ms: MeanStd,
}

impl MetricsRow {
    /// Aggregate plus per-seed wall time from the run records.
    pub fn new(model: &str, agg: &AggregateReport, params: usize, runs: &[RunRecord]) -> Self {
        let secs: Vec<f64> = runs.iter().map(|r| r.seconds).collect();
        MetricsRow {
            model: model.into(),
            accuracy: agg.accuracy,
            precision: agg.precision,
            recall: agg.recall,
            f1: agg.f1,
            roc_auc: agg.roc_auc,
            params,
            train_seconds: mean_std(&secs),
            inference_ms: agg.inference_ms,
        }
    }

    fn cells(&self) -> [MeanStd; 7] {
        [self.accuracy, self.precision, self.recall, self.f1, self.roc_auc, self.train_seconds, self.inference_ms]
    }

    /// The row as printed: every `mean±std` cell rounded to 4 decimals.
    pub fn rounded(&self) -> Self {
        let r = |m: MeanStd| MeanStd { mean: round4(m.mean), std: round4(m.std) };
        MetricsRow {
            model: self.model.clone(),
            accuracy: r(self.accuracy),
            precision: r(self.precision),
            recall: r(self.recall),
            f1: r(self.f1),
            roc_auc: r(self.roc_auc),
            params: self.params,
            train_seconds: r(self.train_seconds),
            inference_ms: r(self.inference_ms),
        }
    }
}

fn round4(v: f64) -> f64 {
    format!("{v:.4}").parse().unwrap()
}

pub fn format_cell(m: MeanStd) -> String {
    format!("{:.4}±{:.4}", m.mean, m.std)
}

pub fn parse_cell(s: &str) -> Option<MeanStd> {
    let (mean, std) = s.split_once('±')?;
    Some(MeanStd { mean: mean.trim().parse().ok()?, std: std.trim().parse().ok()? })
}

pub fn metrics_csv(rows: &[MetricsRow]) -> Result<String, ReportError> {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(HEADER)?;
    for row in rows {
        let c = row.cells().map(format_cell);
        w.write_record([
            row.model.as_str(),
            &c[0],
            &c[1],
            &c[2],
            &c[3],
            &c[4],
            &row.params.to_string(),
            &c[5],
            &c[6],
        ])?;
    }
    Ok(String::from_utf8(w.into_inner().map_err(|e| e.into_error())?).expect("csv output is UTF-8"))
}

pub fn parse_metrics_csv(text: &str) -> Result<Vec<MetricsRow>, ReportError> {
    let mut r = csv::Reader::from_reader(text.as_bytes());
    let header: Vec<String> = r.headers()?.iter().map(String::from).collect();
    if header != HEADER {
        return Err(ReportError::Parse { row: 0, reason: format!("unexpected header {header:?}") });
    }
    r.records()
        .enumerate()
        .map(|(i, rec)| {
            let rec = rec?;
            let err = |reason: &str| ReportError::Parse { row: i + 1, reason: reason.into() };
            let cell = |j: usize| parse_cell(&rec[j]).ok_or_else(|| err(&format!("bad cell `{}`", &rec[j])));
            Ok(MetricsRow {
                model: rec[0].into(),
                accuracy: cell(1)?,
                precision: cell(2)?,
                recall: cell(3)?,
                f1: cell(4)?,
                roc_auc: cell(5)?,
                params: rec[6].parse().map_err(|_| err("bad parameter count"))?,
                train_seconds: cell(7)?,
                inference_ms: cell(8)?,
            })
        })
        .collect()
}

pub fn write_metrics_csv(rows: &[MetricsRow], path: &Path) -> Result<(), ReportError> {
    Ok(std::fs::write(path, metrics_csv(rows)?)?)
}

pub fn read_metrics_csv(path: &Path) -> Result<Vec<MetricsRow>, ReportError> {
    parse_metrics_csv(&std::fs::read_to_string(path)?)
}
