//! Classification metrics.
//!
//! Macro averages run over the full declared vocabulary of a label family,
//! including labels that never occur in gold or predictions; every 0/0 ratio
//! is defined as 0.
//!
//! Evasion predictions are scored against each annotator stream separately
//! (A1, A2, A3 keep their identity across instances) and additionally by
//! `ACC_match`, the fraction of predictions equal to at least one of the three
//! annotations.

mod confusion;
mod kappa;
mod report;

pub use confusion::{confusion_matrix, ConfusionMatrix, Normalize};
pub use kappa::{fleiss_kappa, fleiss_kappa_from_ratings};
pub use report::{Aggregate, ClarityLabelRow, EvasionLabelRow, MetricsReport, SeedMetrics, SeedPredictions};

use indexmap::IndexMap;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::dataset::TestInstance;
use crate::predictions::PredictionSet;
use crate::taxonomy::{Label, LabelFamily};

#[derive(Debug, Error, PartialEq)]
pub enum EvalError {
    #[error("prediction ids do not match gold ids ({missing} missing, {extra} unexpected)")]
    IdMismatch { missing: usize, extra: usize },
    #[error("expected {expected} labels, got {got}")]
    FamilyMismatch { expected: LabelFamily, got: LabelFamily },
    #[error("every item needs at least two ratings")]
    InsufficientRaters,
    #[error("items have differing numbers of ratings")]
    RaggedRatings,
    #[error("no seed runs to aggregate")]
    NoRuns,
}

/// Gold labels keyed by instance id.
pub type Golds = IndexMap<String, Label>;

/// Macro-averaged (or per-class) F1, precision and recall.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Prf {
    pub f1: f64,
    pub precision: f64,
    pub recall: f64,
}

/// Per-class outcome counts from (gold, predicted) index pairs.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ClassCounts {
    pub tp: Vec<u64>,
    pub fp: Vec<u64>,
    pub fn_: Vec<u64>,
    pub support: Vec<u64>,
}

impl ClassCounts {
    pub fn from_pairs(pairs: &[(usize, usize)], num_labels: usize) -> Self {
        let mut c = ClassCounts {
            tp: vec![0; num_labels],
            fp: vec![0; num_labels],
            fn_: vec![0; num_labels],
            support: vec![0; num_labels],
        };
        for &(gold, pred) in pairs {
            c.support[gold] += 1;
            if gold == pred {
                c.tp[gold] += 1;
            } else {
                c.fp[pred] += 1;
                c.fn_[gold] += 1;
            }
        }
        c
    }

    pub fn class_prf(&self, class: usize) -> Prf {
        let ratio = |num: u64, den: u64| if den == 0 { 0.0 } else { num as f64 / den as f64 };
        let precision = ratio(self.tp[class], self.tp[class] + self.fp[class]);
        let recall = ratio(self.tp[class], self.tp[class] + self.fn_[class]);
        let f1 = if precision + recall == 0.0 {
            0.0
        } else {
            2.0 * precision * recall / (precision + recall)
        };
        Prf { f1, precision, recall }
    }

    pub fn macro_prf(&self) -> Prf {
        let k = self.tp.len();
        let per: Vec<Prf> = (0..k).map(|c| self.class_prf(c)).collect();
        let mean = |f: fn(&Prf) -> f64| per.iter().map(f).sum::<f64>() / k as f64;
        Prf {
            f1: mean(|p| p.f1),
            precision: mean(|p| p.precision),
            recall: mean(|p| p.recall),
        }
    }
}

/// Aligns predictions with gold labels as (gold index, predicted index) pairs
/// in gold order.
pub fn aligned_pairs(preds: &PredictionSet, golds: &Golds) -> Result<Vec<(usize, usize)>, EvalError> {
    let mut pairs = Vec::with_capacity(golds.len());
    let mut missing = 0;
    for (id, gold) in golds {
        if gold.family() != preds.family {
            return Err(EvalError::FamilyMismatch {
                expected: preds.family,
                got: gold.family(),
            });
        }
        match preds.get(id) {
            Some(p) => pairs.push((gold.index(), p.index())),
            None => missing += 1,
        }
    }
    let extra = preds.ids().filter(|id| !golds.contains_key(*id)).count();
    if missing > 0 || extra > 0 {
        return Err(EvalError::IdMismatch { missing, extra });
    }
    Ok(pairs)
}

pub fn macro_prf(preds: &PredictionSet, golds: &Golds) -> Result<Prf, EvalError> {
    let pairs = aligned_pairs(preds, golds)?;
    Ok(ClassCounts::from_pairs(&pairs, preds.family.num_labels()).macro_prf())
}

pub fn clarity_golds(test: &[TestInstance]) -> Golds {
    test.iter().map(|t| (t.id.clone(), Label::Clarity(t.clarity))).collect()
}

/// Gold stream of annotator `k` (0-based: 0 = A1).
pub fn annotator_golds(test: &[TestInstance], k: usize) -> Golds {
    test.iter()
        .map(|t| (t.id.clone(), Label::Evasion(t.evasion_annotations[k])))
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EvasionScores {
    /// Macro F1 against A1, A2, A3.
    pub f1_annotators: [f64; 3],
    pub f1_avg: f64,
    pub acc_match: f64,
}

pub fn evasion_eval(preds: &PredictionSet, test: &[TestInstance]) -> Result<EvasionScores, EvalError> {
    if preds.family != LabelFamily::Evasion {
        return Err(EvalError::FamilyMismatch {
            expected: LabelFamily::Evasion,
            got: preds.family,
        });
    }
    let mut f1_annotators = [0.0; 3];
    for (k, f1) in f1_annotators.iter_mut().enumerate() {
        *f1 = macro_prf(preds, &annotator_golds(test, k))?.f1;
    }
    let matched = test
        .iter()
        .filter(|t| {
            preds
                .get(&t.id)
                .is_some_and(|p| t.evasion_annotations.iter().any(|&a| Label::Evasion(a) == p))
        })
        .count();
    Ok(EvasionScores {
        f1_annotators,
        f1_avg: f1_annotators.iter().sum::<f64>() / 3.0,
        acc_match: if test.is_empty() { 0.0 } else { matched as f64 / test.len() as f64 },
    })
}

/// One row of a per-label report.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LabelRow {
    pub label: String,
    pub support: u64,
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
}

/// Per-label precision/recall/F1 and gold support, in taxonomy order.
pub fn per_label_report(preds: &PredictionSet, golds: &Golds) -> Result<Vec<LabelRow>, EvalError> {
    let pairs = aligned_pairs(preds, golds)?;
    let counts = ClassCounts::from_pairs(&pairs, preds.family.num_labels());
    Ok(preds
        .family
        .labels()
        .into_iter()
        .map(|label| {
            let prf = counts.class_prf(label.index());
            LabelRow {
                label: label.display_name().to_string(),
                support: counts.support[label.index()],
                precision: prf.precision,
                recall: prf.recall,
                f1: prf.f1,
            }
        })
        .collect())
}

/// Per-label rows against each annotator stream (A1, A2, A3).
pub fn per_label_report_by_annotator(
    preds: &PredictionSet,
    test: &[TestInstance],
) -> Result<[Vec<LabelRow>; 3], EvalError> {
    Ok([
        per_label_report(preds, &annotator_golds(test, 0))?,
        per_label_report(preds, &annotator_golds(test, 1))?,
        per_label_report(preds, &annotator_golds(test, 2))?,
    ])
}
