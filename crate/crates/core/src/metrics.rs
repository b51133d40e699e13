//! Multi-label evaluation: micro-averaged precision and recall, Hamming
//! loss, element-wise and subset accuracy, and per-class precision/recall.
//!
//! Ratios whose denominator is zero evaluate to 0 and carry a `degenerate`
//! flag, so never-predicted classes show up as zeros in reports.

use std::io::Write;

use serde::Serialize;

use crate::dataset::{Label, LabelSet, NUM_LABELS};
use crate::error::{Error, Result};

/// Aligned true/predicted label rows.
#[derive(Clone, Debug, PartialEq)]
pub struct PredictionBatch {
    n_labels: usize,
    y_true: Vec<Vec<bool>>,
    y_pred: Vec<Vec<bool>>,
}

/// A ratio with its zero-denominator flag.
#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct Ratio {
    pub value: f64,
    pub degenerate: bool,
}

impl Ratio {
    fn of(num: u64, den: u64) -> Ratio {
        if den == 0 {
            Ratio {
                value: 0.0,
                degenerate: true,
            }
        } else {
            Ratio {
                value: num as f64 / den as f64,
                degenerate: false,
            }
        }
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct Tally {
    pub tp: u64,
    pub fp: u64,
    pub fn_: u64,
    pub tn: u64,
}

impl PredictionBatch {
    pub fn new(y_true: Vec<Vec<bool>>, y_pred: Vec<Vec<bool>>) -> Result<Self> {
        if y_true.is_empty() {
            return Err(Error::invalid("prediction batch needs at least one row"));
        }
        if y_true.len() != y_pred.len() {
            return Err(Error::invalid(format!(
                "row count mismatch: {} true vs {} predicted",
                y_true.len(),
                y_pred.len()
            )));
        }
        let n_labels = y_true[0].len();
        if y_true.iter().chain(&y_pred).any(|r| r.len() != n_labels) {
            return Err(Error::invalid("all rows must have the same label count"));
        }
        Ok(PredictionBatch {
            n_labels,
            y_true,
            y_pred,
        })
    }

    pub fn from_label_sets(y_true: &[LabelSet], y_pred: &[LabelSet]) -> Result<Self> {
        let rows = |v: &[LabelSet]| v.iter().map(|s| s.to_bools().to_vec()).collect();
        Self::new(rows(y_true), rows(y_pred))
    }

    pub fn n_rows(&self) -> usize {
        self.y_true.len()
    }

    pub fn n_labels(&self) -> usize {
        self.n_labels
    }

    pub fn tally(&self, label: usize) -> Tally {
        let mut t = Tally::default();
        for (a, p) in self.y_true.iter().zip(&self.y_pred) {
            match (a[label], p[label]) {
                (true, true) => t.tp += 1,
                (false, true) => t.fp += 1,
                (true, false) => t.fn_ += 1,
                (false, false) => t.tn += 1,
            }
        }
        t
    }

    fn micro_tally(&self) -> Tally {
        (0..self.n_labels).fold(Tally::default(), |acc, l| {
            let t = self.tally(l);
            Tally {
                tp: acc.tp + t.tp,
                fp: acc.fp + t.fp,
                fn_: acc.fn_ + t.fn_,
                tn: acc.tn + t.tn,
            }
        })
    }
}

pub fn micro_precision(batch: &PredictionBatch) -> Ratio {
    let t = batch.micro_tally();
    Ratio::of(t.tp, t.tp + t.fp)
}

pub fn micro_recall(batch: &PredictionBatch) -> Ratio {
    let t = batch.micro_tally();
    Ratio::of(t.tp, t.tp + t.fn_)
}

pub fn hamming_loss(batch: &PredictionBatch) -> f64 {
    let wrong: usize = batch
        .y_true
        .iter()
        .zip(&batch.y_pred)
        .map(|(a, p)| a.iter().zip(p).filter(|(x, y)| x != y).count())
        .sum();
    wrong as f64 / (batch.n_rows() * batch.n_labels) as f64
}

/// (TP + TN) / (TP + TN + FP + FN) over every label bit.
pub fn elementwise_accuracy(batch: &PredictionBatch) -> f64 {
    let right: usize = batch
        .y_true
        .iter()
        .zip(&batch.y_pred)
        .map(|(a, p)| a.iter().zip(p).filter(|(x, y)| x == y).count())
        .sum();
    right as f64 / (batch.n_rows() * batch.n_labels) as f64
}

/// Fraction of rows whose predicted label set is exactly right.
pub fn subset_accuracy(batch: &PredictionBatch) -> f64 {
    let exact = batch
        .y_true
        .iter()
        .zip(&batch.y_pred)
        .filter(|(a, p)| a == p)
        .count();
    exact as f64 / batch.n_rows() as f64
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct ClassScore {
    pub precision: Ratio,
    pub recall: Ratio,
    pub support: u64,
    pub predicted: u64,
}

pub fn classwise_pr(batch: &PredictionBatch) -> Vec<ClassScore> {
    (0..batch.n_labels)
        .map(|l| {
            let t = batch.tally(l);
            ClassScore {
                precision: Ratio::of(t.tp, t.tp + t.fp),
                recall: Ratio::of(t.tp, t.tp + t.fn_),
                support: t.tp + t.fn_,
                predicted: t.tp + t.fp,
            }
        })
        .collect()
}

/// One row of the summary table (MAP, MAR, HL, AC).
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct SummaryRow {
    pub model: String,
    pub dataset: String,
    pub micro_precision: Ratio,
    pub micro_recall: Ratio,
    pub hamming_loss: f64,
    pub subset_accuracy: f64,
    pub elementwise_accuracy: f64,
    pub n_samples: usize,
}

impl SummaryRow {
    pub fn compute(model: &str, dataset: &str, batch: &PredictionBatch) -> Self {
        SummaryRow {
            model: model.into(),
            dataset: dataset.into(),
            micro_precision: micro_precision(batch),
            micro_recall: micro_recall(batch),
            hamming_loss: hamming_loss(batch),
            subset_accuracy: subset_accuracy(batch),
            elementwise_accuracy: elementwise_accuracy(batch),
            n_samples: batch.n_rows(),
        }
    }
}

pub const SUMMARY_HEADER: &str = "model,dataset,map,mar,hl,ac,elementwise_ac,n_samples,map_degenerate,mar_degenerate";

pub fn write_summary_csv<W: Write>(w: &mut W, rows: &[SummaryRow]) -> std::io::Result<()> {
    writeln!(w, "{SUMMARY_HEADER}")?;
    for r in rows {
        writeln!(
            w,
            "{},{},{:.6},{:.6},{:.6},{:.6},{:.6},{},{},{}",
            r.model,
            r.dataset,
            r.micro_precision.value,
            r.micro_recall.value,
            r.hamming_loss,
            r.subset_accuracy,
            r.elementwise_accuracy,
            r.n_samples,
            r.micro_precision.degenerate,
            r.micro_recall.degenerate
        )?;
    }
    Ok(())
}

pub const CLASSWISE_HEADER: &str =
    "label,precision,recall,support,predicted,precision_degenerate,recall_degenerate";

/// Per-class table; rows follow the canonical label order.
pub fn write_classwise_csv<W: Write>(w: &mut W, scores: &[ClassScore]) -> std::io::Result<()> {
    writeln!(w, "{CLASSWISE_HEADER}")?;
    for (i, s) in scores.iter().enumerate() {
        let name = Label::from_index(i).map_or_else(|| format!("label{i}"), |l| l.to_string());
        writeln!(
            w,
            "{},{:.6},{:.6},{},{},{},{}",
            name,
            s.precision.value,
            s.recall.value,
            s.support,
            s.predicted,
            s.precision.degenerate,
            s.recall.degenerate
        )?;
    }
    Ok(())
}

const _: () = assert!(NUM_LABELS == 10);
