//! Confusion matrices averaged over runs.
//!
//! Raw counts are averaged elementwise over every (seed, annotator) stream
//! first; row normalisation happens afterwards. Averaging already-normalised
//! matrices gives different numbers whenever row supports differ between
//! streams, so that order is never used.

use serde::{Deserialize, Serialize};

use crate::taxonomy::LabelFamily;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Normalize {
    None,
    Row,
}

/// Rows are gold labels, columns predicted labels, both in taxonomy order.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConfusionMatrix {
    pub family: LabelFamily,
    pub labels: Vec<String>,
    /// Number of streams averaged.
    pub streams: usize,
    pub mean_counts: Vec<Vec<f64>>,
    /// Present when row normalisation was requested.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub row_normalized: Option<Vec<Vec<f64>>>,
    /// Gold labels with zero support; their normalised rows stay all-zero.
    pub zero_support_rows: Vec<String>,
}

impl ConfusionMatrix {
    /// The matrix to display: row-normalised if available, else mean counts.
    pub fn values(&self) -> &[Vec<f64>] {
        self.row_normalized.as_deref().unwrap_or(&self.mean_counts)
    }

    /// CSV with a `gold\pred` header row; values use the shortest
    /// round-tripping decimal representation.
    pub fn to_csv(&self, normalized: bool) -> String {
        let values = if normalized {
            self.row_normalized.as_ref().unwrap_or(&self.mean_counts)
        } else {
            &self.mean_counts
        };
        let mut w = csv::WriterBuilder::new()
            .terminator(csv::Terminator::Any(b'\n'))
            .from_writer(Vec::new());
        let mut header = vec!["gold\\pred".to_string()];
        header.extend(self.labels.iter().cloned());
        w.write_record(&header).expect("in-memory write");
        for (label, row) in self.labels.iter().zip(values) {
            let mut rec = vec![label.clone()];
            rec.extend(row.iter().map(|v| format!("{v:?}")));
            w.write_record(&rec).expect("in-memory write");
        }
        String::from_utf8(w.into_inner().expect("flush")).expect("utf-8")
    }

    /// Parses the body of [`ConfusionMatrix::to_csv`] back into a matrix of values.
    pub fn parse_csv(text: &str) -> Result<(Vec<String>, Vec<Vec<f64>>), String> {
        let mut reader = csv::Reader::from_reader(text.as_bytes());
        let labels: Vec<String> = reader
            .headers()
            .map_err(|e| e.to_string())?
            .iter()
            .skip(1)
            .map(str::to_string)
            .collect();
        let mut rows = Vec::new();
        for rec in reader.records() {
            let rec = rec.map_err(|e| e.to_string())?;
            let row = rec
                .iter()
                .skip(1)
                .map(|v| v.parse::<f64>().map_err(|e| e.to_string()))
                .collect::<Result<Vec<_>, _>>()?;
            rows.push(row);
        }
        Ok((labels, rows))
    }
}

/// Averages raw (gold, predicted) count matrices over `streams`, then
/// optionally row-normalises.
pub fn confusion_matrix(
    streams: &[Vec<(usize, usize)>],
    family: LabelFamily,
    normalize: Normalize,
) -> ConfusionMatrix {
    let k = family.num_labels();
    let mut sums = vec![vec![0.0f64; k]; k];
    for stream in streams {
        for &(gold, pred) in stream {
            sums[gold][pred] += 1.0;
        }
    }
    let n = streams.len().max(1) as f64;
    let mean_counts: Vec<Vec<f64>> = sums
        .into_iter()
        .map(|row| row.into_iter().map(|c| c / n).collect())
        .collect();
    let labels: Vec<String> = family
        .labels()
        .iter()
        .map(|l| l.display_name().to_string())
        .collect();
    let zero_support_rows = labels
        .iter()
        .zip(&mean_counts)
        .filter(|(_, row)| row.iter().sum::<f64>() == 0.0)
        .map(|(l, _)| l.clone())
        .collect();
    let row_normalized = (normalize == Normalize::Row).then(|| {
        mean_counts
            .iter()
            .map(|row| {
                let total: f64 = row.iter().sum();
                if total == 0.0 {
                    vec![0.0; k]
                } else {
                    row.iter().map(|c| c / total).collect()
                }
            })
            .collect()
    });
    ConfusionMatrix {
        family,
        labels,
        streams: streams.len(),
        mean_counts,
        row_normalized,
        zero_support_rows,
    }
}
