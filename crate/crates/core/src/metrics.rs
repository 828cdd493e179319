//! Per-batch metric rows and run summaries.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const METRICS_CSV_HEADER: [&str; 10] = [
    "batch", "seen", "tau", "low_frac", "loss_aug", "loss_attr", "loss_disp", "loss_total", "batch_acc", "cum_acc",
];

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BatchRow {
    pub batch: usize,
    pub seen: usize,
    pub tau: f64,
    pub low_frac: f64,
    pub loss_aug: f64,
    pub loss_attr: f64,
    pub loss_disp: f64,
    pub loss_total: f64,
    pub batch_acc: f64,
    pub cum_acc: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub total_acc: f64,
    /// Unweighted mean of the per-class recalls over classes that appeared.
    pub class_avg_acc: f64,
    /// `None` for classes absent from the stream.
    pub per_class_recall: Vec<Option<f64>>,
    /// Number of distinct predicted classes.
    pub predicted_classes: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsRecord {
    pub rows: Vec<BatchRow>,
    pub summary: Summary,
}

/// Accumulates online predictions into a [`MetricsRecord`].
#[derive(Clone, Debug)]
pub struct Recorder {
    rows: Vec<BatchRow>,
    support: Vec<usize>,
    hits: Vec<usize>,
    predicted: Vec<usize>,
    seen: usize,
    correct: usize,
}

/// Loss and threshold fields of one batch, as reported by the adaptation step.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct BatchLosses {
    pub tau: f64,
    pub low_frac: f64,
    pub aug: f64,
    pub attr: f64,
    pub disp: f64,
    pub total: f64,
}

impl Recorder {
    pub fn new(classes: usize) -> Self {
        Self {
            rows: Vec::new(),
            support: vec![0; classes],
            hits: vec![0; classes],
            predicted: vec![0; classes],
            seen: 0,
            correct: 0,
        }
    }

    /// Records one batch; returns its accuracy.
    pub fn push(&mut self, predictions: &[usize], labels: &[usize], losses: BatchLosses) -> f64 {
        assert_eq!(predictions.len(), labels.len());
        let mut batch_correct = 0;
        for (&p, &y) in predictions.iter().zip(labels) {
            self.support[y] += 1;
            self.predicted[p] += 1;
            if p == y {
                self.hits[y] += 1;
                batch_correct += 1;
            }
        }
        self.seen += labels.len();
        self.correct += batch_correct;
        let batch_acc = batch_correct as f64 / labels.len().max(1) as f64;
        self.rows.push(BatchRow {
            batch: self.rows.len(),
            seen: self.seen,
            tau: losses.tau,
            low_frac: losses.low_frac,
            loss_aug: losses.aug,
            loss_attr: losses.attr,
            loss_disp: losses.disp,
            loss_total: losses.total,
            batch_acc,
            cum_acc: self.correct as f64 / self.seen.max(1) as f64,
        });
        batch_acc
    }

    pub fn finish(self) -> MetricsRecord {
        let per_class_recall: Vec<Option<f64>> = self
            .support
            .iter()
            .zip(&self.hits)
            .map(|(&n, &h)| (n > 0).then(|| h as f64 / n as f64))
            .collect();
        let present: Vec<f64> = per_class_recall.iter().flatten().copied().collect();
        let class_avg_acc = if present.is_empty() {
            0.0
        } else {
            present.iter().sum::<f64>() / present.len() as f64
        };
        MetricsRecord {
            rows: self.rows,
            summary: Summary {
                total_acc: self.correct as f64 / self.seen.max(1) as f64,
                class_avg_acc,
                per_class_recall,
                predicted_classes: self.predicted.iter().filter(|&&n| n > 0).count(),
            },
        }
    }
}

/// Writes the per-batch rows as CSV with [`METRICS_CSV_HEADER`].
pub fn write_metrics_csv(record: &MetricsRecord, path: &Path) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
    let wrap = |e: csv::Error| Error::Config(format!("{}: {e}", path.display()));
    w.write_record(METRICS_CSV_HEADER).map_err(wrap)?;
    for r in &record.rows {
        w.write_record([
            r.batch.to_string(),
            r.seen.to_string(),
            r.tau.to_string(),
            r.low_frac.to_string(),
            r.loss_aug.to_string(),
            r.loss_attr.to_string(),
            r.loss_disp.to_string(),
            r.loss_total.to_string(),
            r.batch_acc.to_string(),
            r.cum_acc.to_string(),
        ])
        .map_err(wrap)?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

/// Summary JSON: `{total_acc, class_avg_acc, per_class_recall, config_digest, seed}`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SummaryFile {
    pub total_acc: f64,
    pub class_avg_acc: f64,
    pub per_class_recall: Vec<Option<f64>>,
    pub config_digest: String,
    pub seed: u64,
    pub predicted_classes: usize,
}

pub fn write_summary_json(summary: &Summary, config_digest: &str, seed: u64, path: &Path) -> Result<()> {
    let file = SummaryFile {
        total_acc: summary.total_acc,
        class_avg_acc: summary.class_avg_acc,
        per_class_recall: summary.per_class_recall.clone(),
        config_digest: config_digest.to_string(),
        seed,
        predicted_classes: summary.predicted_classes,
    };
    let text = serde_json::to_string_pretty(&file).map_err(|e| Error::json(path, e))?;
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

/// Metrics CSV plus summary JSON, side by side.
pub fn emit_metrics(record: &MetricsRecord, csv_path: &Path, summary_path: &Path, config_digest: &str, seed: u64) -> Result<()> {
    write_metrics_csv(record, csv_path)?;
    write_summary_json(&record.summary, config_digest, seed, summary_path)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn cumulative_accuracy_is_weighted_by_batch_size() {
        let mut rec = Recorder::new(3);
        rec.push(&[0, 1, 2, 2], &[0, 1, 2, 0], BatchLosses::default());
        rec.push(&[1], &[0], BatchLosses::default());
        let m = rec.finish();
        assert_eq!(m.rows[0].cum_acc, 0.75);
        assert_eq!(m.rows[1].cum_acc, 3.0 / 5.0);
        assert_eq!(m.rows[1].seen, 5);
        assert_eq!(m.summary.total_acc, 0.6);
        // recalls: class 0 → 1/3, class 1 → 1, class 2 → 1
        let r = &m.summary.per_class_recall;
        assert_eq!(r[0], Some(1.0 / 3.0));
        assert!((m.summary.class_avg_acc - (1.0 / 3.0 + 2.0) / 3.0).abs() < 1e-15);
        assert_eq!(m.summary.predicted_classes, 3);
    }

    #[test]
    fn absent_class_is_excluded_from_class_average() {
        let mut rec = Recorder::new(3);
        rec.push(&[0, 0], &[0, 1], BatchLosses::default());
        let m = rec.finish();
        assert_eq!(m.summary.per_class_recall, vec![Some(1.0), Some(0.0), None]);
        assert_eq!(m.summary.class_avg_acc, 0.5);
    }

    #[test]
    fn csv_has_one_row_per_batch() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("m.csv");
        let mut rec = Recorder::new(2);
        for _ in 0..3 {
            rec.push(&[0], &[0], BatchLosses::default());
        }
        write_metrics_csv(&rec.finish(), &p).unwrap();
        let text = fs::read_to_string(&p).unwrap();
        let mut lines = text.lines();
        assert_eq!(lines.next().unwrap(), METRICS_CSV_HEADER.join(","));
        assert_eq!(lines.count(), 3);
    }
}
