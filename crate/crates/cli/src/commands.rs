//! Stand-alone subcommands that work on files rather than a full run.

use std::path::{Path, PathBuf};

use serde::Serialize;
use serde_json::json;

use clarity_core::dataset::{
    import::{import_test, import_training},
    load_test, load_training_with, majority_evasion, write_jsonl, DatasetSummary, InconsistencyPolicy,
};
use clarity_core::ensemble::{majority_vote_ensemble, EnsembleManifest, EnsembleSpec, TieBreak};
use clarity_core::evaluation::{fleiss_kappa_from_ratings, MetricsReport, SeedPredictions};
use clarity_core::predictions::{PredictionFormat, PredictionSet};
use clarity_core::splitting::{dual_stratified_split_with, president_disjoint_split, SparseLabelPolicy, SplitAssignment, SplitRegime};
use clarity_core::taxonomy::{EvasionLabel, LabelFamily};

use crate::experiment::distributions;
use crate::{format_extension, write_predictions, write_text, CliError};

pub fn format_of(path: &Path) -> Result<PredictionFormat, CliError> {
    PredictionFormat::from_path(path)
        .ok_or_else(|| CliError::Config(format!("{}: expected a .csv or .jsonl prediction file", path.display())))
}

/// Reads a prediction file; the run id is the file stem.
pub fn read_predictions(path: &Path, family: LabelFamily, seed: Option<u64>) -> Result<PredictionSet, CliError> {
    let run_id = path.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
    Ok(PredictionSet::read(path, format_of(path)?, family, run_id, seed)?)
}

pub struct SplitArgs<'a> {
    pub train: &'a Path,
    pub regime: SplitRegime,
    pub ratio: f64,
    pub seed: u64,
    pub sparse: SparseLabelPolicy,
    pub inconsistency: InconsistencyPolicy,
}

pub fn split(args: &SplitArgs<'_>, out: &Path) -> Result<SplitAssignment, CliError> {
    let train = load_training_with(args.train, args.inconsistency)?;
    let split = match args.regime {
        SplitRegime::Stratified => dual_stratified_split_with(&train, args.ratio, args.seed, args.sparse)?,
        SplitRegime::PresidentDisjoint => president_disjoint_split(&train, args.ratio)?,
    };
    if let Some(parent) = out.parent().filter(|p| !p.as_os_str().is_empty()) {
        std::fs::create_dir_all(parent).map_err(CliError::io(parent))?;
    }
    split.save(out)?;
    Ok(split)
}

/// Scores one prediction file per seed against the test set. Evasion
/// predictions also yield evasion-based clarity scores.
pub fn evaluate(test_path: &Path, family: LabelFamily, predictions: &[PathBuf], run_id: &str) -> Result<MetricsReport, CliError> {
    let test = load_test(test_path)?;
    let runs = predictions
        .iter()
        .enumerate()
        .map(|(i, p)| {
            let set = read_predictions(p, family, Some(i as u64))?;
            Ok(match family {
                LabelFamily::Clarity => SeedPredictions { seed: None, clarity: set, evasion: None },
                LabelFamily::Evasion => SeedPredictions { seed: None, clarity: set.derived_clarity(), evasion: Some(set) },
            })
        })
        .collect::<Result<Vec<_>, CliError>>()?;
    Ok(MetricsReport::build(run_id, &runs, &test)?)
}

pub fn write_report_files(report: &MetricsReport, out: &Path) -> Result<Vec<PathBuf>, CliError> {
    let mut written = vec![out.join("metrics.json"), out.join("metrics.txt")];
    write_text(&written[0], &report.to_json())?;
    write_text(&written[1], &report.render_text())?;
    written.extend(crate::emit_report_plots(report, &out.join("plots"))?);
    Ok(written)
}

pub struct EnsembleArgs<'a> {
    pub family: LabelFamily,
    pub members: &'a [PathBuf],
    pub tie_break: TieBreak,
    pub train: Option<&'a Path>,
    pub format: PredictionFormat,
}

pub fn ensemble(args: &EnsembleArgs<'_>, out: &Path) -> Result<EnsembleManifest, CliError> {
    let members = args
        .members
        .iter()
        .map(|p| read_predictions(p, args.family, None))
        .collect::<Result<Vec<_>, _>>()?;
    let prior: Option<DatasetSummary> = match args.train {
        Some(t) => {
            let train = load_training_with(t, InconsistencyPolicy::WarnAndKeep)?;
            let family_index = usize::from(args.family == LabelFamily::Evasion);
            Some(distributions(&train)?.swap_remove(family_index))
        }
        None => None,
    };
    let spec = EnsembleSpec {
        members: args.members.iter().map(|p| p.display().to_string()).collect(),
        tie_break: args.tie_break,
        family: args.family,
    };
    let result = majority_vote_ensemble(&members, &spec, prior.as_ref())?;
    let ext = format_extension(args.format);
    write_predictions(&result.predictions, args.format, &out.join(format!("predictions_{}.{ext}", args.family)))?;
    if let Some(c) = &result.derived_clarity {
        write_predictions(c, args.format, &out.join(format!("predictions_clarity.{ext}")))?;
    }
    write_text(&out.join("ensemble_manifest.json"), &(serde_json::to_string_pretty(&result.manifest)? + "\n"))?;
    Ok(result.manifest)
}

/// Rewrites predictions as a submission file in test-set order, checking
/// that every test id is covered exactly once.
pub fn submit_file(predictions: &Path, family: LabelFamily, test: Option<&Path>, out: &Path) -> Result<usize, CliError> {
    let preds = read_predictions(predictions, family, None)?;
    let ordered = match test {
        Some(t) => {
            let test = load_test(t)?;
            let mut set = PredictionSet::new(preds.run_id.clone(), None, family);
            let missing: Vec<&str> = test.iter().map(|i| i.id.as_str()).filter(|id| preds.get(id).is_none()).collect();
            if !missing.is_empty() {
                return Err(CliError::Config(format!("{} test ids lack predictions, e.g. {:?}", missing.len(), &missing[..missing.len().min(5)])));
            }
            if preds.len() != test.len() {
                return Err(CliError::Config(format!("{} predictions for {} test instances", preds.len(), test.len())));
            }
            for inst in &test {
                set.insert(inst.id.clone(), preds.get(&inst.id).expect("checked"))?;
            }
            set
        }
        None => preds,
    };
    write_predictions(&ordered, format_of(out)?, out)?;
    Ok(ordered.len())
}

/// Converts an upstream export (CSV, JSON or JSONL rows) to canonical JSONL.
pub fn import(input: &Path, test_split: bool, policy: InconsistencyPolicy, out: &Path) -> Result<usize, CliError> {
    if let Some(parent) = out.parent().filter(|p| !p.as_os_str().is_empty()) {
        std::fs::create_dir_all(parent).map_err(CliError::io(parent))?;
    }
    let n = if test_split {
        let rows = import_test(input)?;
        write_jsonl(&rows, out)?;
        rows.len()
    } else {
        let rows = import_training(input, policy)?;
        write_jsonl(&rows, out)?;
        rows.len()
    };
    Ok(n)
}

#[derive(Debug, Serialize)]
pub struct Stats {
    #[serde(skip_serializing_if = "Option::is_none")]
    pub train_instances: Option<usize>,
    #[serde(skip_serializing_if = "Vec::is_empty")]
    pub train: Vec<DatasetSummary>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub test_instances: Option<usize>,
    #[serde(skip_serializing_if = "Vec::is_empty")]
    pub test: Vec<DatasetSummary>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub test_majority_evasion: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub test_fleiss_kappa: Option<f64>,
}

pub fn stats(train: Option<&Path>, test: Option<&Path>, policy: InconsistencyPolicy) -> Result<Stats, CliError> {
    let mut s = Stats {
        train_instances: None,
        train: Vec::new(),
        test_instances: None,
        test: Vec::new(),
        test_majority_evasion: None,
        test_fleiss_kappa: None,
    };
    if let Some(p) = train {
        let rows = load_training_with(p, policy)?;
        s.train_instances = Some(rows.len());
        s.train = distributions(&rows)?;
    }
    if let Some(p) = test {
        let rows = load_test(p)?;
        s.test_instances = Some(rows.len());
        s.test = distributions(&rows)?;
        s.test_majority_evasion = Some(rows.iter().filter(|t| majority_evasion(t).is_some()).count());
        let ratings: Vec<Vec<usize>> = rows
            .iter()
            .map(|t| t.evasion_annotations.iter().map(|e: &EvasionLabel| e.index()).collect())
            .collect();
        s.test_fleiss_kappa = Some(fleiss_kappa_from_ratings(&ratings, EvasionLabel::ALL.len())?);
    }
    Ok(s)
}

pub fn stats_json(s: &Stats) -> String {
    serde_json::to_string_pretty(&json!(s)).expect("stats serialize") + "\n"
}
