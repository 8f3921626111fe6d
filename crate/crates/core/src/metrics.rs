//! Classification and pseudo-label quality metrics.
//!
//! Rates with an empty denominator are `None` rather than 0 so that absent
//! tail classes do not drag averages down.

use serde::{Deserialize, Serialize};

use crate::data::EvaluationAccess;
use crate::error::{Error, Result};
use crate::nn::DenseMatrix;
use crate::selector::SelectionOutcome;

/// `counts[t·C + p]` = samples of true class `t` predicted as `p`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConfusionMatrix {
    classes: usize,
    counts: Vec<u64>,
}

impl ConfusionMatrix {
    pub fn new(classes: usize) -> Self {
        Self {
            classes,
            counts: vec![0; classes * classes],
        }
    }

    pub fn classes(&self) -> usize {
        self.classes
    }

    pub fn get(&self, truth: usize, pred: usize) -> u64 {
        self.counts[truth * self.classes + pred]
    }

    pub fn row_total(&self, truth: usize) -> u64 {
        self.counts[truth * self.classes..(truth + 1) * self.classes].iter().sum()
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().sum()
    }

    pub fn correct(&self) -> u64 {
        (0..self.classes).map(|k| self.get(k, k)).sum()
    }

    /// Diagonal over row sum; `None` for classes with no samples.
    pub fn recall(&self) -> Vec<Option<f64>> {
        (0..self.classes)
            .map(|k| {
                let n = self.row_total(k);
                (n > 0).then(|| self.get(k, k) as f64 / n as f64)
            })
            .collect()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassificationMetrics {
    pub top1: f64,
    pub top5: f64,
    pub per_class_recall: Vec<Option<f64>>,
    /// Unweighted mean of the defined per-class recalls.
    pub macro_recall: Option<f64>,
}

/// Confusion matrix, top-1/top-5 and per-class recall.
///
/// Top-k ranks the true class by probability; ties rank the lower class
/// index first.
pub fn compute_classification(
    preds: &[usize],
    truths: &[usize],
    probs: &DenseMatrix,
) -> Result<(ConfusionMatrix, ClassificationMetrics)> {
    let classes = probs.cols();
    if preds.len() != truths.len() || probs.rows() != truths.len() {
        return Err(Error::Shape(format!(
            "{} predictions, {} truths, {} probability rows",
            preds.len(),
            truths.len(),
            probs.rows()
        )));
    }
    if truths.is_empty() {
        return Err(Error::Shape("no samples to evaluate".into()));
    }
    let mut confusion = ConfusionMatrix::new(classes);
    for (&p, &t) in preds.iter().zip(truths) {
        if p >= classes || t >= classes {
            return Err(Error::Index(format!("class index out of range ({t}, {p})")));
        }
        confusion.counts[t * classes + p] += 1;
    }
    let per_class_recall = confusion.recall();
    let defined: Vec<f64> = per_class_recall.iter().flatten().copied().collect();
    let macro_recall = (!defined.is_empty()).then(|| defined.iter().sum::<f64>() / defined.len() as f64);
    Ok((
        confusion.clone(),
        ClassificationMetrics {
            top1: confusion.correct() as f64 / truths.len() as f64,
            top5: top_k_accuracy(probs, truths, 5)?,
            per_class_recall,
            macro_recall,
        },
    ))
}

/// Rank of `class` in `row`: entries strictly larger, plus equal entries
/// at a lower index.
pub fn class_rank(row: &[f64], class: usize) -> usize {
    let v = row[class];
    row.iter()
        .enumerate()
        .filter(|&(j, &p)| p > v || (p == v && j < class))
        .count()
}

pub fn top_k_accuracy(probs: &DenseMatrix, truths: &[usize], k: usize) -> Result<f64> {
    if probs.rows() != truths.len() || truths.is_empty() {
        return Err(Error::Shape("top-k needs one probability row per truth".into()));
    }
    let hits = truths
        .iter()
        .enumerate()
        .filter(|&(i, &t)| class_rank(probs.row(i), t) < k)
        .count();
    Ok(hits as f64 / truths.len() as f64)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PseudoLabelQuality {
    /// Correct selected / selected.
    pub precision: Option<f64>,
    /// Correct selected / all unlabeled.
    pub recall: f64,
    /// Precision grouped by pseudo-label class.
    pub per_class_precision: Vec<Option<f64>>,
    /// Correct selected of true class `c` / unlabeled of true class `c`.
    pub per_class_recall: Vec<Option<f64>>,
}

pub fn pseudo_label_quality(outcome: &SelectionOutcome, access: &EvaluationAccess<'_>) -> Result<PseudoLabelQuality> {
    let truths = access.hidden_labels();
    let classes = outcome.class_counts.len();
    let mut selected_by_label = vec![0usize; classes];
    let mut correct_by_label = vec![0usize; classes];
    let mut truth_totals = vec![0usize; classes];
    for &t in truths {
        if t >= classes {
            return Err(Error::Index(format!("hidden label {t} out of range")));
        }
        truth_totals[t] += 1;
    }
    for (&i, &label) in outcome.selected.iter().zip(&outcome.pseudo_labels) {
        let Some(&t) = truths.get(i) else {
            return Err(Error::Index(format!("selected index {i} outside {} unlabeled samples", truths.len())));
        };
        if label >= classes {
            return Err(Error::Index(format!("pseudo-label {label} out of range")));
        }
        selected_by_label[label] += 1;
        if t == label {
            correct_by_label[label] += 1;
        }
    }
    let ratio = |a: usize, b: usize| (b > 0).then(|| a as f64 / b as f64);
    let correct: usize = correct_by_label.iter().sum();
    Ok(PseudoLabelQuality {
        precision: ratio(correct, outcome.selected.len()),
        recall: ratio(correct, truths.len()).unwrap_or(0.0),
        per_class_precision: (0..classes).map(|k| ratio(correct_by_label[k], selected_by_label[k])).collect(),
        per_class_recall: (0..classes).map(|k| ratio(correct_by_label[k], truth_totals[k])).collect(),
    })
}
