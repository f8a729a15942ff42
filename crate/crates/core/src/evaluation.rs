//! Binary confusion-matrix metrics with positive = causal.

use std::fmt;

use serde::{Deserialize, Serialize};

use crate::corpus::Label;
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct ConfusionCounts {
    pub tp: usize,
    pub fp: usize,
    #[serde(rename = "fn")]
    pub fn_: usize,
    pub tn: usize,
}

impl ConfusionCounts {
    pub fn total(&self) -> usize {
        self.tp + self.fp + self.fn_ + self.tn
    }

    /// The same counts read with the negative class as the reference class.
    pub fn swapped_polarity(&self) -> ConfusionCounts {
        ConfusionCounts {
            tp: self.tn,
            fp: self.fn_,
            fn_: self.fp,
            tn: self.tp,
        }
    }

    pub fn record(&mut self, predicted: Label, gold: Label) {
        match (predicted, gold) {
            (Label::Positive, Label::Positive) => self.tp += 1,
            (Label::Positive, Label::Negative) => self.fp += 1,
            (Label::Negative, Label::Positive) => self.fn_ += 1,
            (Label::Negative, Label::Negative) => self.tn += 1,
        }
    }
}

pub fn confusion(predictions: &[Label], gold: &[Label]) -> Result<ConfusionCounts> {
    if predictions.len() != gold.len() {
        return Err(Error::LengthMismatch {
            left: predictions.len(),
            right: gold.len(),
        });
    }
    let mut counts = ConfusionCounts::default();
    for (&p, &g) in predictions.iter().zip(gold) {
        counts.record(p, g);
    }
    Ok(counts)
}

/// Set when a metric's denominator was zero and the metric was reported as 0.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MetricWarning {
    NoPredictedPositives,
    NoGoldPositives,
    ZeroPrecisionAndRecall,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub precision: f64,
    pub recall: f64,
    pub accuracy: f64,
    pub f1: f64,
    pub counts: ConfusionCounts,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub warnings: Vec<MetricWarning>,
}

pub fn metrics(counts: ConfusionCounts) -> Result<MetricsReport> {
    let total = counts.total();
    if total == 0 {
        return Err(Error::InvalidArgument(
            "cannot compute metrics on zero instances".into(),
        ));
    }
    let mut warnings = Vec::new();
    let precision = if counts.tp + counts.fp == 0 {
        warnings.push(MetricWarning::NoPredictedPositives);
        0.0
    } else {
        counts.tp as f64 / (counts.tp + counts.fp) as f64
    };
    let recall = if counts.tp + counts.fn_ == 0 {
        warnings.push(MetricWarning::NoGoldPositives);
        0.0
    } else {
        counts.tp as f64 / (counts.tp + counts.fn_) as f64
    };
    let f1 = if precision + recall == 0.0 {
        warnings.push(MetricWarning::ZeroPrecisionAndRecall);
        0.0
    } else {
        harmonic_mean(precision, recall)
    };
    Ok(MetricsReport {
        precision,
        recall,
        accuracy: (counts.tp + counts.tn) as f64 / total as f64,
        f1,
        counts,
        warnings,
    })
}

/// Convenience: F1 of `predictions` against `gold`.
pub fn f1_score(predictions: &[Label], gold: &[Label]) -> Result<f64> {
    Ok(metrics(confusion(predictions, gold)?)?.f1)
}

/// F1 straight from counts; 0 when undefined. Used in hot loops.
pub(crate) fn f1_from_counts(tp: usize, fp: usize, fn_: usize) -> f64 {
    let denom = 2 * tp + fp + fn_;
    if denom == 0 || tp == 0 {
        0.0
    } else {
        // 2PR/(P+R) reduces to 2tp/(2tp+fp+fn)
        (2 * tp) as f64 / denom as f64
    }
}

pub fn harmonic_mean(a: f64, b: f64) -> f64 {
    if a + b == 0.0 {
        0.0
    } else {
        2.0 * a * b / (a + b)
    }
}

/// One reported (precision, recall, F1) row, in percent.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReportedRow {
    pub name: String,
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
}

impl ReportedRow {
    pub fn new(name: impl Into<String>, precision: f64, recall: f64, f1: f64) -> Self {
        Self {
            name: name.into(),
            precision,
            recall,
            f1,
        }
    }
}

/// Absolute deviation `|F1 - 2PR/(P+R)|` per row, in the rows' own units.
pub fn consistency_check(rows: &[ReportedRow]) -> Vec<f64> {
    rows.iter()
        .map(|r| (r.f1 - harmonic_mean(r.precision, r.recall)).abs())
        .collect()
}

/// Mean and sample standard deviation of each metric across folds.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MeanStd {
    pub mean: f64,
    pub std: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FoldSummary {
    pub folds: usize,
    pub precision: MeanStd,
    pub recall: MeanStd,
    pub accuracy: MeanStd,
    pub f1: MeanStd,
}

fn mean_std(values: impl Iterator<Item = f64> + Clone) -> MeanStd {
    let n = values.clone().count() as f64;
    let mean = values.clone().sum::<f64>() / n;
    let std = if n > 1.0 {
        (values.map(|v| (v - mean) * (v - mean)).sum::<f64>() / (n - 1.0)).sqrt()
    } else {
        0.0
    };
    MeanStd { mean, std }
}

pub fn summarize_folds(reports: &[MetricsReport]) -> Result<FoldSummary> {
    if reports.is_empty() {
        return Err(Error::InvalidArgument("no fold reports".into()));
    }
    Ok(FoldSummary {
        folds: reports.len(),
        precision: mean_std(reports.iter().map(|r| r.precision)),
        recall: mean_std(reports.iter().map(|r| r.recall)),
        accuracy: mean_std(reports.iter().map(|r| r.accuracy)),
        f1: mean_std(reports.iter().map(|r| r.f1)),
    })
}

impl fmt::Display for MetricsReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "{:<10} {:>8}", "metric", "value")?;
        writeln!(f, "{:<10} {:>8.4}", "precision", self.precision)?;
        writeln!(f, "{:<10} {:>8.4}", "recall", self.recall)?;
        writeln!(f, "{:<10} {:>8.4}", "accuracy", self.accuracy)?;
        writeln!(f, "{:<10} {:>8.4}", "f1", self.f1)?;
        write!(
            f,
            "tp={} fp={} fn={} tn={}",
            self.counts.tp, self.counts.fp, self.counts.fn_, self.counts.tn
        )?;
        for w in &self.warnings {
            write!(f, "\nwarning: {w:?}")?;
        }
        Ok(())
    }
}
