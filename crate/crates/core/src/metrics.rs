//! Confusion matrices, macro-averaged classification metrics and reports
//! bucketed by `(T, τ)`.

use std::collections::BTreeMap;
use std::io::Write;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::cohort::{Stage, NUM_CLASSES};
use crate::sampling::SampleLimits;

#[derive(Debug, Error)]
pub enum MetricsError {
    #[error("bucket (T={t}, tau={tau}) is outside the evaluation domain")]
    OutOfDomain { t: usize, tau: usize },
    #[error("no samples were accumulated")]
    Empty,
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Csv(#[from] csv::Error),
}

/// Counts with rows indexed by the true stage and columns by the prediction.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConfusionMatrix {
    pub counts: [[u64; NUM_CLASSES]; NUM_CLASSES],
}

impl ConfusionMatrix {
    pub fn from_counts(counts: [[u64; NUM_CLASSES]; NUM_CLASSES]) -> Self {
        Self { counts }
    }

    pub fn add(&mut self, truth: Stage, predicted: Stage) {
        self.counts[truth.index()][predicted.index()] += 1;
    }

    pub fn merge(&mut self, other: &ConfusionMatrix) {
        for (a, b) in self.counts.iter_mut().flatten().zip(other.counts.iter().flatten()) {
            *a += b;
        }
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().flatten().sum()
    }

    pub fn correct(&self) -> u64 {
        (0..NUM_CLASSES).map(|i| self.counts[i][i]).sum()
    }

    pub fn row_normalize(&self) -> [[f64; NUM_CLASSES]; NUM_CLASSES] {
        row_normalize(self)
    }
}

/// Each row divided by its sum; all-zero rows stay zero.
pub fn row_normalize(cm: &ConfusionMatrix) -> [[f64; NUM_CLASSES]; NUM_CLASSES] {
    cm.counts.map(|row| {
        let sum: u64 = row.iter().sum();
        if sum == 0 {
            [0.0; NUM_CLASSES]
        } else {
            row.map(|c| c as f64 / sum as f64)
        }
    })
}

fn ratio(num: u64, den: u64) -> f64 {
    if den == 0 {
        0.0
    } else {
        num as f64 / den as f64
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ClassScores {
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub support: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Scores {
    pub accuracy: f64,
    pub macro_precision: f64,
    pub macro_recall: f64,
    pub macro_f1: f64,
    /// CN, MCI, AD.
    pub per_class: [ClassScores; NUM_CLASSES],
}

impl Scores {
    /// Macro averages over the three classes; 0/0 counts as 0.
    pub fn from_confusion(cm: &ConfusionMatrix) -> Self {
        let per_class = [0, 1, 2].map(|k| {
            let tp = cm.counts[k][k];
            let predicted: u64 = (0..NUM_CLASSES).map(|i| cm.counts[i][k]).sum();
            let actual: u64 = cm.counts[k].iter().sum();
            let precision = ratio(tp, predicted);
            let recall = ratio(tp, actual);
            let f1 = if precision + recall == 0.0 {
                0.0
            } else {
                2.0 * precision * recall / (precision + recall)
            };
            ClassScores {
                precision,
                recall,
                f1,
                support: actual,
            }
        });
        let mean = |f: fn(&ClassScores) -> f64| per_class.iter().map(f).sum::<f64>() / NUM_CLASSES as f64;
        Self {
            accuracy: ratio(cm.correct(), cm.total()),
            macro_precision: mean(|c| c.precision),
            macro_recall: mean(|c| c.recall),
            macro_f1: mean(|c| c.f1),
            per_class,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BucketReport {
    pub t: usize,
    pub tau: usize,
    pub count: u64,
    pub accuracy: f64,
    pub macro_f1: f64,
    pub confusion: ConfusionMatrix,
}

/// Unweighted means over the non-empty buckets.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BucketAveraged {
    pub accuracy: f64,
    pub macro_precision: f64,
    pub macro_recall: f64,
    pub macro_f1: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub count: u64,
    /// Sample-weighted metrics over the pooled confusion matrix.
    pub overall: Scores,
    pub bucket_averaged: BucketAveraged,
    pub confusion: ConfusionMatrix,
    pub confusion_normalized: [[f64; NUM_CLASSES]; NUM_CLASSES],
    /// Non-empty buckets ordered by `T`, then `τ`.
    pub per_bucket: Vec<BucketReport>,
    /// Windows the evaluated model could not score.
    pub skipped: u64,
}

impl EvalReport {
    pub fn bucket(&self, t: usize, tau: usize) -> Option<&BucketReport> {
        self.per_bucket.iter().find(|b| b.t == t && b.tau == tau)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ReportBuilder {
    limits: SampleLimits,
    overall: ConfusionMatrix,
    buckets: BTreeMap<(usize, usize), ConfusionMatrix>,
    skipped: u64,
}

impl ReportBuilder {
    pub fn new(limits: SampleLimits) -> Self {
        Self {
            limits,
            overall: ConfusionMatrix::default(),
            buckets: BTreeMap::new(),
            skipped: 0,
        }
    }

    pub fn accumulate(
        &mut self,
        truth: Stage,
        predicted: Stage,
        (t, tau): (usize, usize),
    ) -> Result<(), MetricsError> {
        if !self.limits.contains(t, tau) {
            return Err(MetricsError::OutOfDomain { t, tau });
        }
        self.overall.add(truth, predicted);
        self.buckets.entry((t, tau)).or_default().add(truth, predicted);
        Ok(())
    }

    pub fn record_skipped(&mut self) {
        self.skipped += 1;
    }

    pub fn count(&self) -> u64 {
        self.overall.total()
    }

    /// Count-wise sum of two builders.
    pub fn merge(&mut self, other: &ReportBuilder) {
        self.overall.merge(&other.overall);
        for (k, cm) in &other.buckets {
            self.buckets.entry(*k).or_default().merge(cm);
        }
        self.skipped += other.skipped;
    }

    pub fn finalize(&self) -> Result<EvalReport, MetricsError> {
        if self.overall.total() == 0 {
            return Err(MetricsError::Empty);
        }
        let mut per_bucket = Vec::new();
        let mut sums = [0.0; 4];
        for (&(t, tau), cm) in &self.buckets {
            let s = Scores::from_confusion(cm);
            for (acc, v) in sums
                .iter_mut()
                .zip([s.accuracy, s.macro_precision, s.macro_recall, s.macro_f1])
            {
                *acc += v;
            }
            per_bucket.push(BucketReport {
                t,
                tau,
                count: cm.total(),
                accuracy: s.accuracy,
                macro_f1: s.macro_f1,
                confusion: *cm,
            });
        }
        let nb = per_bucket.len() as f64;
        Ok(EvalReport {
            count: self.overall.total(),
            overall: Scores::from_confusion(&self.overall),
            bucket_averaged: BucketAveraged {
                accuracy: sums[0] / nb,
                macro_precision: sums[1] / nb,
                macro_recall: sums[2] / nb,
                macro_f1: sums[3] / nb,
            },
            confusion: self.overall,
            confusion_normalized: row_normalize(&self.overall),
            per_bucket,
            skipped: self.skipped,
        })
    }
}

/// Row-normalized confusion matrix with stage names on both axes.
pub fn write_confusion_csv<W: Write>(cm: &ConfusionMatrix, writer: W) -> Result<(), MetricsError> {
    let mut w = csv::Writer::from_writer(writer);
    let names = [Stage::Cn, Stage::Mci, Stage::Ad].map(Stage::as_str);
    w.write_record(std::iter::once("true\\predicted").chain(names))?;
    for (name, row) in names.iter().zip(row_normalize(cm)) {
        w.write_record(std::iter::once(name.to_string()).chain(row.iter().map(|x| format!("{x}"))))?;
    }
    w.flush()?;
    Ok(())
}

/// Macro F1 per bucket: one row per `T`, one column per horizon in months.
/// Cells outside the domain or without samples are empty.
pub fn write_bucket_f1_csv<W: Write>(
    report: &EvalReport,
    limits: SampleLimits,
    writer: W,
) -> Result<(), MetricsError> {
    let mut w = csv::Writer::from_writer(writer);
    let taus: Vec<usize> = (1..=limits.max_tau()).collect();
    w.write_record(
        std::iter::once("T".to_string()).chain(taus.iter().map(|tau| format!("{} months", 6 * tau))),
    )?;
    for t in 2..=limits.max_t {
        let cells = taus.iter().map(|&tau| match report.bucket(t, tau) {
            Some(b) if limits.contains(t, tau) => format!("{}", b.macro_f1),
            _ => String::new(),
        });
        w.write_record(std::iter::once(t.to_string()).chain(cells))?;
    }
    w.flush()?;
    Ok(())
}
