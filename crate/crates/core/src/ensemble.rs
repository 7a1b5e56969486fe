//! Per-instance majority voting across seed runs.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::dataset::DatasetSummary;
use crate::predictions::PredictionSet;
use crate::taxonomy::{Label, LabelFamily};

#[derive(Debug, Error, PartialEq)]
pub enum EnsembleError {
    #[error("an ensemble needs at least two members, got {0}")]
    TooFewMembers(usize),
    #[error("member mismatch: {0}")]
    MemberMismatch(String),
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TieBreak {
    /// Prefer the tied label that is more frequent in training, then taxonomy order.
    #[default]
    FrequencyPrior,
    FixedLabelOrder,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EnsembleSpec {
    pub members: Vec<String>,
    #[serde(default)]
    pub tie_break: TieBreak,
    pub family: LabelFamily,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EnsembleManifest {
    pub members: Vec<String>,
    pub tie_break: TieBreak,
    pub family: LabelFamily,
    pub instances: usize,
    pub ties: usize,
    pub tie_ids: Vec<String>,
    /// Whether training frequencies were available to break ties.
    pub used_training_distribution: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EnsembleOutput {
    pub predictions: PredictionSet,
    /// Present when voting on evasion labels.
    pub derived_clarity: Option<PredictionSet>,
    pub manifest: EnsembleManifest,
}

pub fn majority_vote_ensemble(
    members: &[PredictionSet],
    spec: &EnsembleSpec,
    training_distribution: Option<&DatasetSummary>,
) -> Result<EnsembleOutput, EnsembleError> {
    if members.len() < 2 {
        return Err(EnsembleError::TooFewMembers(members.len()));
    }
    if spec.members.len() != members.len() {
        return Err(EnsembleError::MemberMismatch(format!(
            "spec lists {} members but {} prediction sets were given",
            spec.members.len(),
            members.len()
        )));
    }
    let first = &members[0];
    for (name, m) in spec.members.iter().zip(members) {
        if m.family != spec.family {
            return Err(EnsembleError::MemberMismatch(format!("{name} predicts {} labels, expected {}", m.family, spec.family)));
        }
        if m.len() != first.len() || m.ids().any(|id| first.get(id).is_none()) {
            return Err(EnsembleError::MemberMismatch(format!("{name} covers a different id set")));
        }
    }
    let prior = match (spec.tie_break, training_distribution) {
        (TieBreak::FrequencyPrior, Some(d)) => {
            if d.family != spec.family {
                return Err(EnsembleError::MemberMismatch(format!(
                    "training distribution is over {} labels, expected {}",
                    d.family, spec.family
                )));
            }
            Some(d)
        }
        _ => None,
    };

    let k = spec.family.num_labels();
    let mut out = PredictionSet::new("ensemble", None, spec.family);
    let mut tie_ids = Vec::new();
    for id in first.ids() {
        let mut votes = vec![0usize; k];
        for m in members {
            votes[m.get(id).expect("coverage checked").index()] += 1;
        }
        let top = *votes.iter().max().expect("non-empty family");
        let tied: Vec<usize> = (0..k).filter(|&i| votes[i] == top).collect();
        if tied.len() > 1 {
            tie_ids.push(id.to_string());
        }
        // `tied` is in taxonomy order; max_by_key keeps the last maximum, so
        // iterate in reverse to let the earliest label win equal priors.
        let winner = match prior {
            Some(d) => *tied
                .iter()
                .rev()
                .max_by_key(|&&i| d.count(Label::from_index(spec.family, i).expect("in range")))
                .expect("non-empty"),
            None => tied[0],
        };
        out.insert(id, Label::from_index(spec.family, winner).expect("in range"))
            .expect("ids unique and family matches");
    }
    let derived_clarity = (spec.family == LabelFamily::Evasion).then(|| out.derived_clarity());
    Ok(EnsembleOutput {
        manifest: EnsembleManifest {
            members: spec.members.clone(),
            tie_break: spec.tie_break,
            family: spec.family,
            instances: out.len(),
            ties: tie_ids.len(),
            tie_ids,
            used_training_distribution: prior.is_some(),
        },
        predictions: out,
        derived_clarity,
    })
}
