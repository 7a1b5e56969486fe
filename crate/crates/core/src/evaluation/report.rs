//! Seed-aggregated metrics reports with JSON and text renderings.

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use super::confusion::{confusion_matrix, ConfusionMatrix, Normalize};
use super::{
    aligned_pairs, annotator_golds, clarity_golds, evasion_eval, macro_prf, per_label_report, EvalError,
    EvasionScores, Prf,
};
use crate::dataset::{DatasetSummary, TestInstance};
use crate::predictions::PredictionSet;
use crate::taxonomy::LabelFamily;

/// Mean and sample (n − 1) standard deviation over seeds. `std` is absent
/// for a single seed.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Aggregate {
    pub mean: f64,
    pub std: Option<f64>,
}

impl Aggregate {
    pub fn of(values: &[f64]) -> Aggregate {
        let n = values.len() as f64;
        let mean = values.iter().sum::<f64>() / n;
        let std = (values.len() > 1).then(|| {
            (values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0)).sqrt()
        });
        Aggregate { mean, std }
    }

    fn fmt_mean(&self) -> String {
        format!("{:.3}", self.mean)
    }

    fn fmt_std(&self) -> String {
        match self.std {
            Some(s) => format!("({s:.3})"),
            None => "(-)".into(),
        }
    }
}

/// Predictions of one seed on the test set.
#[derive(Debug, Clone)]
pub struct SeedPredictions {
    pub seed: Option<u64>,
    /// Clarity predictions: direct, or derived from `evasion`.
    pub clarity: PredictionSet,
    pub evasion: Option<PredictionSet>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SeedMetrics {
    pub seed: Option<u64>,
    pub clarity: Prf,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub evasion: Option<EvasionScores>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PrfAggregate {
    pub f1: Aggregate,
    pub precision: Aggregate,
    pub recall: Aggregate,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvasionAggregate {
    pub acc_match: Aggregate,
    pub f1_a1: Aggregate,
    pub f1_a2: Aggregate,
    pub f1_a3: Aggregate,
    pub f1_avg: Aggregate,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClarityLabelRow {
    pub label: String,
    pub support: u64,
    pub precision: Aggregate,
    pub recall: Aggregate,
    pub f1: Aggregate,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvasionLabelRow {
    pub label: String,
    /// Gold count per annotator stream (A1, A2, A3).
    pub support: [u64; 3],
    pub f1: [Aggregate; 3],
    pub f1_avg: Aggregate,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ClaritySource {
    Direct,
    EvasionBased,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub run_id: String,
    pub clarity_source: ClaritySource,
    pub seeds: Vec<Option<u64>>,
    pub per_seed: Vec<SeedMetrics>,
    pub clarity: PrfAggregate,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub evasion: Option<EvasionAggregate>,
    pub clarity_per_label: Vec<ClarityLabelRow>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub evasion_per_label: Option<Vec<EvasionLabelRow>>,
    pub clarity_confusion: ConfusionMatrix,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub evasion_confusion: Option<ConfusionMatrix>,
    /// Training-split label distributions (clarity, evasion), when known.
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub training_distribution: Vec<DatasetSummary>,
}

fn column<T>(items: &[T], f: impl Fn(&T) -> f64) -> Aggregate {
    Aggregate::of(&items.iter().map(f).collect::<Vec<_>>())
}

impl MetricsReport {
    pub fn build(
        run_id: impl Into<String>,
        runs: &[SeedPredictions],
        test: &[TestInstance],
    ) -> Result<MetricsReport, EvalError> {
        if runs.is_empty() {
            return Err(EvalError::NoRuns);
        }
        let has_evasion = runs.iter().all(|r| r.evasion.is_some());
        let clarity_source = if has_evasion {
            ClaritySource::EvasionBased
        } else {
            ClaritySource::Direct
        };
        let cg = clarity_golds(test);

        let mut per_seed = Vec::with_capacity(runs.len());
        let mut clarity_streams = Vec::new();
        let mut evasion_streams = Vec::new();
        let mut clarity_rows = Vec::new();
        let mut evasion_rows = Vec::new();
        for run in runs {
            if run.clarity.family != LabelFamily::Clarity {
                return Err(EvalError::FamilyMismatch {
                    expected: LabelFamily::Clarity,
                    got: run.clarity.family,
                });
            }
            let evasion = match (&run.evasion, has_evasion) {
                (Some(e), true) => {
                    for k in 0..3 {
                        evasion_streams.push(aligned_pairs(e, &annotator_golds(test, k))?);
                    }
                    evasion_rows.push([
                        per_label_report(e, &annotator_golds(test, 0))?,
                        per_label_report(e, &annotator_golds(test, 1))?,
                        per_label_report(e, &annotator_golds(test, 2))?,
                    ]);
                    Some(evasion_eval(e, test)?)
                }
                _ => None,
            };
            clarity_streams.push(aligned_pairs(&run.clarity, &cg)?);
            clarity_rows.push(per_label_report(&run.clarity, &cg)?);
            per_seed.push(SeedMetrics {
                seed: run.seed,
                clarity: macro_prf(&run.clarity, &cg)?,
                evasion,
            });
        }

        let clarity = PrfAggregate {
            f1: column(&per_seed, |m| m.clarity.f1),
            precision: column(&per_seed, |m| m.clarity.precision),
            recall: column(&per_seed, |m| m.clarity.recall),
        };
        let evasion = has_evasion.then(|| {
            let ev = |f: fn(&EvasionScores) -> f64| column(&per_seed, move |m| f(m.evasion.as_ref().expect("evasion scored")));
            EvasionAggregate {
                acc_match: ev(|e| e.acc_match),
                f1_a1: ev(|e| e.f1_annotators[0]),
                f1_a2: ev(|e| e.f1_annotators[1]),
                f1_a3: ev(|e| e.f1_annotators[2]),
                f1_avg: ev(|e| e.f1_avg),
            }
        });

        let clarity_per_label = (0..LabelFamily::Clarity.num_labels())
            .map(|i| ClarityLabelRow {
                label: clarity_rows[0][i].label.clone(),
                support: clarity_rows[0][i].support,
                precision: column(&clarity_rows, |rows| rows[i].precision),
                recall: column(&clarity_rows, |rows| rows[i].recall),
                f1: column(&clarity_rows, |rows| rows[i].f1),
            })
            .collect();
        let evasion_per_label = has_evasion.then(|| {
            (0..LabelFamily::Evasion.num_labels())
                .map(|i| EvasionLabelRow {
                    label: evasion_rows[0][0][i].label.clone(),
                    support: [0, 1, 2].map(|k| evasion_rows[0][k][i].support),
                    f1: [0, 1, 2].map(|k| column(&evasion_rows, |rows| rows[k][i].f1)),
                    f1_avg: column(&evasion_rows, |rows| (0..3).map(|k| rows[k][i].f1).sum::<f64>() / 3.0),
                })
                .collect()
        });

        Ok(MetricsReport {
            run_id: run_id.into(),
            clarity_source,
            seeds: runs.iter().map(|r| r.seed).collect(),
            per_seed,
            clarity,
            evasion,
            clarity_per_label,
            evasion_per_label,
            clarity_confusion: confusion_matrix(&clarity_streams, LabelFamily::Clarity, Normalize::Row),
            evasion_confusion: has_evasion
                .then(|| confusion_matrix(&evasion_streams, LabelFamily::Evasion, Normalize::Row)),
            training_distribution: Vec::new(),
        })
    }

    pub fn with_training_distribution(mut self, summaries: Vec<DatasetSummary>) -> Self {
        self.training_distribution = summaries;
        self
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes") + "\n"
    }

    pub fn from_json(text: &str) -> Result<Self, serde_json::Error> {
        serde_json::from_str(text)
    }

    /// Aligned console tables: headline metrics, then per-label breakdowns.
    pub fn render_text(&self) -> String {
        let mut out = String::new();
        let source = match self.clarity_source {
            ClaritySource::Direct => "Direct clarity",
            ClaritySource::EvasionBased => "Evasion-based clarity",
        };
        let seeds: Vec<String> = self
            .seeds
            .iter()
            .map(|s| s.map_or("-".to_string(), |s| s.to_string()))
            .collect();
        let _ = writeln!(out, "Run {} (seeds: {})", self.run_id, seeds.join(", "));
        let _ = writeln!(out);

        let mut header = vec!["F1", "P", "R"];
        let mut cells = vec![self.clarity.f1, self.clarity.precision, self.clarity.recall];
        if let Some(e) = &self.evasion {
            header.extend(["ACC_match", "F1_A1", "F1_A2", "F1_A3", "F1_avg"]);
            cells.extend([e.acc_match, e.f1_a1, e.f1_a2, e.f1_a3, e.f1_avg]);
        }
        let _ = writeln!(out, "{source}{}", if self.evasion.is_some() { " | Evasion" } else { "" });
        let _ = writeln!(out, "{}", header.iter().map(|h| format!("{h:>10}")).collect::<String>());
        let _ = writeln!(out, "{}", cells.iter().map(|c| format!("{:>10}", c.fmt_mean())).collect::<String>());
        let _ = writeln!(out, "{}", cells.iter().map(|c| format!("{:>10}", c.fmt_std())).collect::<String>());
        let _ = writeln!(out);

        let _ = writeln!(out, "{:<22}{:>8}{:>10}{:>10}{:>10}", "Clarity label", "Support", "P", "R", "F1");
        for row in &self.clarity_per_label {
            let _ = writeln!(
                out,
                "{:<22}{:>8}{:>10}{:>10}{:>10}",
                row.label,
                row.support,
                row.precision.fmt_mean(),
                row.recall.fmt_mean(),
                row.f1.fmt_mean()
            );
            let _ = writeln!(
                out,
                "{:<22}{:>8}{:>10}{:>10}{:>10}",
                "",
                "",
                row.precision.fmt_std(),
                row.recall.fmt_std(),
                row.f1.fmt_std()
            );
        }

        if let Some(rows) = &self.evasion_per_label {
            let _ = writeln!(out);
            let _ = writeln!(
                out,
                "{:<22}{:>5}{:>5}{:>5}{:>10}{:>10}{:>10}{:>10}",
                "Evasion label", "A1", "A2", "A3", "F1_A1", "F1_A2", "F1_A3", "F1_avg"
            );
            for row in rows {
                let _ = writeln!(
                    out,
                    "{:<22}{:>5}{:>5}{:>5}{:>10}{:>10}{:>10}{:>10}",
                    row.label,
                    row.support[0],
                    row.support[1],
                    row.support[2],
                    row.f1[0].fmt_mean(),
                    row.f1[1].fmt_mean(),
                    row.f1[2].fmt_mean(),
                    row.f1_avg.fmt_mean()
                );
                let _ = writeln!(
                    out,
                    "{:<22}{:>5}{:>5}{:>5}{:>10}{:>10}{:>10}{:>10}",
                    "",
                    "",
                    "",
                    "",
                    row.f1[0].fmt_std(),
                    row.f1[1].fmt_std(),
                    row.f1[2].fmt_std(),
                    row.f1_avg.fmt_std()
                );
            }
        }
        out
    }
}
