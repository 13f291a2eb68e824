//! CSV report writers.

use std::io::Write;

use serde::Serialize;

use super::{AggregateReport, Histogram, PRCurve};
use crate::corpus::CorpusError;

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct MetricRow {
    pub metric: String,
    pub model: String,
    pub dataset: String,
    pub value: f64,
}

impl MetricRow {
    pub fn new(metric: &str, model: &str, dataset: &str, value: f64) -> Self {
        Self { metric: metric.into(), model: model.into(), dataset: dataset.into(), value }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct KlRow {
    pub model_a: String,
    pub model_b: String,
    pub symmetric_kl: f64,
    pub bins: usize,
    pub lo: f64,
    pub hi: f64,
}

fn csv_err(e: csv::Error) -> CorpusError {
    match e.into_kind() {
        csv::ErrorKind::Io(io) => CorpusError::Io(io),
        other => CorpusError::Io(std::io::Error::other(format!("{other:?}"))),
    }
}

fn write_rows<T: Serialize, W: Write>(rows: &[T], sink: W) -> Result<(), CorpusError> {
    let mut writer = csv::Writer::from_writer(sink);
    for row in rows {
        writer.serialize(row).map_err(csv_err)?;
    }
    writer.flush()?;
    Ok(())
}

/// `metric,model,dataset,value`
pub fn write_metrics<W: Write>(rows: &[MetricRow], sink: W) -> Result<(), CorpusError> {
    write_rows(rows, sink)
}

/// `threshold,precision,recall`; the anchor row has threshold `inf`.
pub fn write_pr_curve<W: Write>(curve: &PRCurve, sink: W) -> Result<(), CorpusError> {
    write_rows(&curve.points, sink)
}

pub fn write_kl<W: Write>(rows: &[KlRow], sink: W) -> Result<(), CorpusError> {
    write_rows(rows, sink)
}

/// `bin_lo,bin_hi,mass` for one histogram.
pub fn write_histogram<W: Write>(histogram: &Histogram, sink: W) -> Result<(), CorpusError> {
    #[derive(Serialize)]
    struct Row {
        bin_lo: f64,
        bin_hi: f64,
        mass: f64,
    }
    let width = (histogram.hi - histogram.lo) / histogram.bins() as f64;
    let rows: Vec<Row> = histogram
        .mass
        .iter()
        .enumerate()
        .map(|(i, &mass)| Row {
            bin_lo: histogram.lo + i as f64 * width,
            bin_hi: histogram.lo + (i + 1) as f64 * width,
            mass,
        })
        .collect();
    write_rows(&rows, sink)
}

/// Long-form summary: `mean`/`std` rows per model and `win_rate` rows
/// keyed `a>b`.
pub fn write_summary<W: Write>(metric: &str, report: &AggregateReport, sink: W) -> Result<(), CorpusError> {
    let mut rows = Vec::new();
    for (model, summary) in &report.models {
        rows.push(MetricRow::new(&format!("{metric}:mean"), model, "*", summary.mean));
        rows.push(MetricRow::new(&format!("{metric}:std"), model, "*", summary.std));
    }
    for ((a, b), rate) in &report.win_rates {
        rows.push(MetricRow::new(&format!("{metric}:win_rate"), &format!("{a}>{b}"), "*", *rate));
    }
    write_rows(&rows, sink)
}
