//! Train/validation partitions: evasion-stratified and president-disjoint.
//!
//! Stratifying on evasion also stratifies the mapped clarity labels, since
//! clarity is a function of evasion; the stratified split therefore serves as
//! the dual (evasion + clarity) stratification.

use std::collections::{BTreeMap, BTreeSet};
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::dataset::TrainInstance;
use crate::rng;
use crate::taxonomy::{ClarityLabel, EvasionLabel};

#[derive(Debug, Error)]
pub enum SplitError {
    #[error("label {0} has too few instances to appear in both splits")]
    TooFewInstances(EvasionLabel),
    #[error("instance {0:?} has no president")]
    MissingPresident(String),
    #[error("president-disjoint split needs at least two presidents")]
    SinglePresident,
    #[error("ratio must lie strictly between 0 and 1, got {0}")]
    InvalidRatio(f64),
    #[error("I/O error: {0}")]
    Io(#[from] std::io::Error),
    #[error("malformed split file: {0}")]
    Format(#[from] serde_json::Error),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SplitRegime {
    Stratified,
    PresidentDisjoint,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SparseLabelPolicy {
    #[default]
    Fail,
    /// Singleton labels stay entirely in the training split.
    WarnAndProceed,
}

/// A reusable train/validation partition of instance ids.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SplitAssignment {
    pub regime: SplitRegime,
    /// `None` for the president-disjoint regime, which is not randomised.
    pub seed: Option<u64>,
    /// Fraction of instances intended for training.
    pub ratio: f64,
    pub train_ids: BTreeSet<String>,
    pub val_ids: BTreeSet<String>,
}

impl SplitAssignment {
    pub fn sizes(&self) -> (usize, usize) {
        (self.train_ids.len(), self.val_ids.len())
    }

    pub fn val_fraction(&self) -> f64 {
        let (t, v) = self.sizes();
        v as f64 / (t + v) as f64
    }

    /// Partitions `instances` into (train, validation) following the assignment.
    /// Ids not covered by the assignment are dropped.
    pub fn apply<'a>(
        &self,
        instances: &'a [TrainInstance],
    ) -> (Vec<&'a TrainInstance>, Vec<&'a TrainInstance>) {
        let train = instances.iter().filter(|i| self.train_ids.contains(&i.id)).collect();
        let val = instances.iter().filter(|i| self.val_ids.contains(&i.id)).collect();
        (train, val)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("split serializes")
    }

    pub fn save(&self, path: &Path) -> Result<(), SplitError> {
        std::fs::write(path, self.to_json() + "\n")?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self, SplitError> {
        Ok(serde_json::from_str(&std::fs::read_to_string(path)?)?)
    }
}

fn check_ratio(ratio: f64) -> Result<(), SplitError> {
    if ratio > 0.0 && ratio < 1.0 {
        Ok(())
    } else {
        Err(SplitError::InvalidRatio(ratio))
    }
}

/// Per-stratum validation quotas by largest-remainder apportionment, so the
/// total equals `round(N × (1 − ratio))` and every stratum is within one
/// instance of its proportional share.
fn validation_quotas(sizes: &[usize], val_share: f64) -> Vec<usize> {
    let total: usize = sizes.iter().sum();
    let target = (total as f64 * val_share).round() as usize;
    let exact: Vec<f64> = sizes.iter().map(|&n| n as f64 * val_share).collect();
    let mut quotas: Vec<usize> = exact.iter().map(|x| x.floor() as usize).collect();
    let assigned: usize = quotas.iter().sum();
    let mut order: Vec<usize> = (0..sizes.len()).collect();
    // Stable sort keeps taxonomy order among equal remainders.
    order.sort_by(|&a, &b| {
        let ra = exact[a] - exact[a].floor();
        let rb = exact[b] - exact[b].floor();
        rb.partial_cmp(&ra).unwrap()
    });
    for &i in order.iter().take(target.saturating_sub(assigned)) {
        if quotas[i] < sizes[i] {
            quotas[i] += 1;
        }
    }
    quotas
}

pub fn dual_stratified_split(
    instances: &[TrainInstance],
    ratio: f64,
    seed: u64,
) -> Result<SplitAssignment, SplitError> {
    dual_stratified_split_with(instances, ratio, seed, SparseLabelPolicy::Fail)
}

pub fn dual_stratified_split_with(
    instances: &[TrainInstance],
    ratio: f64,
    seed: u64,
    policy: SparseLabelPolicy,
) -> Result<SplitAssignment, SplitError> {
    check_ratio(ratio)?;
    let mut strata: BTreeMap<EvasionLabel, Vec<&str>> = BTreeMap::new();
    for inst in instances {
        strata.entry(inst.evasion).or_default().push(&inst.id);
    }
    for (&label, ids) in &strata {
        if ids.len() < 2 {
            match policy {
                SparseLabelPolicy::Fail => return Err(SplitError::TooFewInstances(label)),
                SparseLabelPolicy::WarnAndProceed => {
                    log::warn!("label {label} has {} instance(s); kept in training only", ids.len())
                }
            }
        }
    }

    let labels: Vec<EvasionLabel> = strata.keys().copied().collect();
    let sizes: Vec<usize> = strata.values().map(Vec::len).collect();
    let mut quotas = validation_quotas(&sizes, 1.0 - ratio);
    for (q, &n) in quotas.iter_mut().zip(&sizes) {
        if n >= 2 {
            *q = (*q).clamp(1, n - 1);
        } else {
            *q = 0;
        }
    }

    let mut rng = rng::seeded(seed);
    let mut split = SplitAssignment {
        regime: SplitRegime::Stratified,
        seed: Some(seed),
        ratio,
        train_ids: BTreeSet::new(),
        val_ids: BTreeSet::new(),
    };
    for (i, label) in labels.iter().enumerate() {
        // Sorting first makes the result independent of input order.
        let mut ids = strata[label].clone();
        ids.sort_unstable();
        rng::shuffle(&mut ids, &mut rng);
        let (val, train) = ids.split_at(quotas[i]);
        split.val_ids.extend(val.iter().map(|s| s.to_string()));
        split.train_ids.extend(train.iter().map(|s| s.to_string()));
    }
    debug_assert!(clarity_proportions_preserved(instances, &split));
    Ok(split)
}

/// Mapped clarity counts on the validation side are within the number of
/// evasion strata of each clarity level from their proportional share.
pub fn clarity_proportions_preserved(instances: &[TrainInstance], split: &SplitAssignment) -> bool {
    let share = split.val_ids.len() as f64 / instances.len().max(1) as f64;
    ClarityLabel::ALL.iter().all(|&c| {
        let total = instances.iter().filter(|i| i.clarity == c).count() as f64;
        let val = instances
            .iter()
            .filter(|i| i.clarity == c && split.val_ids.contains(&i.id))
            .count() as f64;
        (val - total * share).abs() <= c.evasions().len() as f64 + 1.0
    })
}

pub fn president_disjoint_split(
    instances: &[TrainInstance],
    target_ratio: f64,
) -> Result<SplitAssignment, SplitError> {
    check_ratio(target_ratio)?;
    let mut counts: BTreeMap<&str, usize> = BTreeMap::new();
    for inst in instances {
        let p = inst
            .president
            .as_deref()
            .ok_or_else(|| SplitError::MissingPresident(inst.id.clone()))?;
        *counts.entry(p).or_insert(0) += 1;
    }
    if counts.len() < 2 {
        return Err(SplitError::SinglePresident);
    }
    // TODO: switch to a subset-sum search if a corpus ever has more than ~20 speakers.
    let names: Vec<&str> = counts.keys().copied().collect();
    let total = instances.len() as f64;
    let target = 1.0 - target_ratio;
    let mut best: Option<(f64, Vec<&str>)> = None;
    for mask in 1u64..(1u64 << names.len()) - 1 {
        let chosen: Vec<&str> = names
            .iter()
            .enumerate()
            .filter(|(i, _)| mask & (1 << i) != 0)
            .map(|(_, n)| *n)
            .collect();
        let val: usize = chosen.iter().map(|n| counts[n]).sum();
        let gap = (val as f64 / total - target).abs();
        let better = match &best {
            None => true,
            Some((best_gap, best_set)) => {
                if (gap - best_gap).abs() > 1e-12 {
                    gap < *best_gap
                } else if chosen.len() != best_set.len() {
                    chosen.len() < best_set.len()
                } else {
                    chosen < *best_set
                }
            }
        };
        if better {
            best = Some((gap, chosen));
        }
    }
    let val_presidents: BTreeSet<&str> = best.expect("at least one proper subset").1.into_iter().collect();
    let mut split = SplitAssignment {
        regime: SplitRegime::PresidentDisjoint,
        seed: None,
        ratio: target_ratio,
        train_ids: BTreeSet::new(),
        val_ids: BTreeSet::new(),
    };
    for inst in instances {
        let p = inst.president.as_deref().unwrap_or_default();
        if val_presidents.contains(p) {
            split.val_ids.insert(inst.id.clone());
        } else {
            split.train_ids.insert(inst.id.clone());
        }
    }
    Ok(split)
}

/// Presidents appearing on each side of a split.
pub fn presidents_by_side(
    instances: &[TrainInstance],
    split: &SplitAssignment,
) -> (BTreeSet<String>, BTreeSet<String>) {
    let (train, val) = split.apply(instances);
    let names = |xs: Vec<&TrainInstance>| {
        xs.into_iter()
            .filter_map(|i| i.president.clone())
            .collect::<BTreeSet<_>>()
    };
    (names(train), names(val))
}
