//! End-to-end experiment runs: split, preprocess, train every seed (or
//! query a chat model), evaluate, report, and record a manifest.
//!
//! Run directory layout:
//!
//! ```text
//! <output_dir>/<run_id>/
//!   manifest.json
//!   split.json                     fine-tuning only
//!   seed-<s>/                      one per seed, fine-tuning only
//!   predictions_*.csv|jsonl        zero-shot only
//!   transcripts.jsonl              zero-shot only
//!   metrics.json, metrics.txt
//!   plots/
//! ```
//!
//! A directory without `manifest.json` but with `incomplete.json` belongs
//! to an interrupted run. Re-running the same configuration restarts it,
//! resuming zero-shot labelling from `partial/` where possible.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use chrono::Utc;
use serde::{Deserialize, Serialize};
use serde_json::json;

use clarity_core::dataset::{class_distribution, load_test, load_training_with, DatasetSummary, TestInstance, TrainInstance};
use clarity_core::evaluation::{macro_prf, Aggregate, Golds, MetricsReport, SeedPredictions};
use clarity_core::predictions::{PredictionFormat, PredictionSet};
use clarity_core::preprocessing::{LexiconNer, NerBackend, ProcessNer};
use clarity_core::rng::SHUFFLE_ALGORITHM;
use clarity_core::splitting::{dual_stratified_split, president_disjoint_split, SplitAssignment, SplitRegime};
use clarity_core::taxonomy::LabelFamily;
use clarity_core::training::{
    compute_class_weights, prepare_data, train_seed, EncoderBackend, HashedLinearBackend, ProcessEncoderBackend,
    RunResult, SeedOutcome,
};
use clarity_core::zeroshot::{
    classify_dataset, BatchLog, ChatBackend, KeywordBackend, OpenAiCompatibleBackend, PromptTemplate, ZeroShotError,
};

use crate::config::{ChatConfig, EncoderConfig, ExperimentConfig, Mode, NerConfig};
use crate::manifest::{RunManifest, SeedRecord, MANIFEST_FILE};
use crate::{format_extension, sha256_file, write_predictions, write_text, CliError, StageContext};

const INCOMPLETE_FILE: &str = "incomplete.json";
const PARTIAL_DIR: &str = "partial";

/// What a finished run left behind.
#[derive(Debug, Clone)]
pub struct RunOutcome {
    pub run_dir: PathBuf,
    pub manifest: RunManifest,
    pub report: MetricsReport,
}

#[derive(Serialize, Deserialize)]
struct Incomplete {
    config_hash: String,
}

/// Loads `config_path` and runs it; returns the run directory.
pub fn run_experiment(config_path: &Path, force: bool) -> Result<PathBuf, CliError> {
    let config = ExperimentConfig::load(config_path)?;
    Ok(run_config(&config, force)?.run_dir)
}

pub fn run_config(config: &ExperimentConfig, force: bool) -> Result<RunOutcome, CliError> {
    config.validate()?;
    let run_dir = config.run_dir();
    let hash = config.hash();
    claim_run_dir(&run_dir, &hash, force)?;
    let started_at = Utc::now();
    let result = match config.mode {
        Mode::FineTune => fine_tune(config, &run_dir),
        Mode::ZeroShot => zero_shot(config, &run_dir),
    };
    let mut done = result?;

    let mut manifest = RunManifest {
        run_id: config.run_id.clone(),
        tool_version: env!("CARGO_PKG_VERSION").to_string(),
        config_hash: hash,
        config: config.clone(),
        data_hashes: data_hashes(config)?,
        shuffle_algorithm: SHUFFLE_ALGORITHM.to_string(),
        prompt_sha256: done.prompt_sha256.take(),
        backend: done.backend.clone(),
        backend_parameters: done.backend_parameters.take(),
        started_at,
        finished_at: Utc::now(),
        seeds: std::mem::take(&mut done.seeds),
        outputs: Vec::new(),
    };
    let partial = run_dir.join(PARTIAL_DIR);
    if partial.exists() {
        std::fs::remove_dir_all(&partial).map_err(CliError::io(&partial))?;
    }
    let marker = run_dir.join(INCOMPLETE_FILE);
    std::fs::remove_file(&marker).map_err(CliError::io(&marker))?;
    manifest.outputs = list_files(&run_dir)?;
    manifest.save(&run_dir)?;
    log::info!("run {} finished in {}", config.run_id, run_dir.display());
    Ok(RunOutcome {
        run_dir,
        manifest,
        report: done.report,
    })
}

/// Refuses to clobber finished or foreign directories unless forced, then
/// marks the directory as in progress.
fn claim_run_dir(dir: &Path, hash: &str, force: bool) -> Result<(), CliError> {
    if dir.exists() {
        let manifest = dir.join(MANIFEST_FILE);
        let marker = dir.join(INCOMPLETE_FILE);
        let keep_partial = if force {
            false
        } else if manifest.exists() {
            let existing = RunManifest::load(dir)?.config_hash;
            return Err(if existing == hash {
                CliError::AlreadyRun { dir: dir.to_path_buf(), hash: existing }
            } else {
                CliError::ConfigChanged { dir: dir.to_path_buf(), existing }
            });
        } else if marker.exists() {
            let text = std::fs::read_to_string(&marker).map_err(CliError::io(&marker))?;
            let prev: Incomplete = serde_json::from_str(&text)?;
            if prev.config_hash != hash {
                return Err(CliError::ConfigChanged { dir: dir.to_path_buf(), existing: prev.config_hash });
            }
            log::info!("restarting interrupted run in {}", dir.display());
            true
        } else if std::fs::read_dir(dir).map_err(CliError::io(dir))?.next().is_some() {
            return Err(CliError::ForeignDirectory(dir.to_path_buf()));
        } else {
            false
        };
        for entry in std::fs::read_dir(dir).map_err(CliError::io(dir))? {
            let path = entry.map_err(CliError::io(dir))?.path();
            if keep_partial && path.file_name().is_some_and(|n| n == PARTIAL_DIR) {
                continue;
            }
            if path.is_dir() {
                std::fs::remove_dir_all(&path).map_err(CliError::io(&path))?;
            } else {
                std::fs::remove_file(&path).map_err(CliError::io(&path))?;
            }
        }
    }
    let marker = serde_json::to_string(&Incomplete { config_hash: hash.to_string() })?;
    write_text(&dir.join(INCOMPLETE_FILE), &(marker + "\n"))
}

/// Relative paths of every file below `dir`, sorted, manifest excluded.
pub fn list_files(dir: &Path) -> Result<Vec<String>, CliError> {
    fn walk(base: &Path, dir: &Path, out: &mut Vec<String>) -> Result<(), CliError> {
        for entry in std::fs::read_dir(dir).map_err(CliError::io(dir))? {
            let path = entry.map_err(CliError::io(dir))?.path();
            if path.is_dir() {
                walk(base, &path, out)?;
            } else {
                let rel = path.strip_prefix(base).expect("below base");
                out.push(rel.components().map(|c| c.as_os_str().to_string_lossy()).collect::<Vec<_>>().join("/"));
            }
        }
        Ok(())
    }
    let mut out = Vec::new();
    walk(dir, dir, &mut out)?;
    out.retain(|p| p != MANIFEST_FILE);
    out.sort();
    Ok(out)
}

fn data_hashes(config: &ExperimentConfig) -> Result<BTreeMap<String, String>, CliError> {
    let mut out = BTreeMap::new();
    for path in config.data.train.iter().chain([&config.data.test]) {
        out.insert(path.display().to_string(), sha256_file(path)?);
    }
    Ok(out)
}

struct Finished {
    report: MetricsReport,
    seeds: Vec<SeedRecord>,
    backend: String,
    backend_parameters: serde_json::Value,
    prompt_sha256: Option<String>,
}

pub fn build_ner(config: &NerConfig) -> Result<Option<Box<dyn NerBackend>>, CliError> {
    Ok(match config {
        NerConfig::None => None,
        NerConfig::Lexicon { names } => Some(Box::new(LexiconNer::new(names))),
        NerConfig::Process { program, args } => Some(Box::new(ProcessNer::spawn(program, args)?)),
    })
}

fn build_encoder(config: &ExperimentConfig, checkpoint_dir: &Path) -> Result<Box<dyn EncoderBackend>, CliError> {
    Ok(match &config.encoder {
        EncoderConfig::HashedLinear { buckets, learning_rate } => {
            if config.training.backend != HashedLinearBackend::ID {
                return Err(CliError::Config(format!(
                    "training.backend is {:?} but the encoder is {}",
                    config.training.backend,
                    HashedLinearBackend::ID
                )));
            }
            Box::new(HashedLinearBackend::new(*buckets, *learning_rate))
        }
        EncoderConfig::Process { program, args } => {
            Box::new(ProcessEncoderBackend::spawn(config.training.backend.clone(), program, args, checkpoint_dir)?)
        }
    })
}

pub fn build_chat(config: &ChatConfig) -> Result<Box<dyn ChatBackend>, CliError> {
    Ok(match config {
        ChatConfig::MockKeyword => Box::new(KeywordBackend),
        ChatConfig::OpenaiCompatible { base_url, model, api_key_env, temperature, max_tokens, timeout_secs } => {
            let mut b = OpenAiCompatibleBackend::new(
                base_url,
                model,
                std::env::var(api_key_env).ok(),
                std::time::Duration::from_secs(*timeout_secs),
            )?;
            b.temperature = *temperature;
            b.max_tokens = *max_tokens;
            Box::new(b)
        }
    })
}

pub fn make_split(config: &ExperimentConfig, train: &[TrainInstance]) -> Result<SplitAssignment, CliError> {
    let s = &config.training.split;
    Ok(match s.regime {
        SplitRegime::Stratified => dual_stratified_split(train, s.ratio, s.seed)?,
        SplitRegime::PresidentDisjoint => president_disjoint_split(train, s.ratio)?,
    })
}

/// Clarity and evasion distributions over `instances`.
pub fn distributions<T: clarity_core::dataset::Annotated>(instances: &[T]) -> Result<Vec<DatasetSummary>, CliError> {
    Ok(vec![
        class_distribution(instances, LabelFamily::Clarity)?,
        class_distribution(instances, LabelFamily::Evasion)?,
    ])
}

fn rel(dir: &Path, path: &Path) -> String {
    path.strip_prefix(dir).unwrap_or(path).to_string_lossy().replace('\\', "/")
}

fn write_report(run_dir: &Path, report: &MetricsReport) -> Result<(), CliError> {
    write_text(&run_dir.join("metrics.json"), &report.to_json())?;
    write_text(&run_dir.join("metrics.txt"), &report.render_text())?;
    crate::emit_report_plots(report, &run_dir.join("plots"))?;
    Ok(())
}

#[derive(Serialize)]
struct SeedHistory<'a> {
    seed: u64,
    best_epoch: usize,
    epochs_run: usize,
    best_val_f1: f64,
    val_f1_history: &'a [f64],
    train_loss_history: &'a [f64],
    class_weights: Vec<(String, f64)>,
}

fn write_seed(
    run_dir: &Path,
    o: &SeedOutcome,
    format: PredictionFormat,
    class_weights: Vec<(String, f64)>,
    evasion_target: bool,
) -> Result<SeedRecord, CliError> {
    let dir = run_dir.join(format!("seed-{}", o.seed));
    let ext = format_extension(format);
    let mut outputs = Vec::new();
    let mut put = |name: String, preds: &PredictionSet| -> Result<(), CliError> {
        let path = dir.join(name);
        write_predictions(preds, format, &path)?;
        outputs.push(rel(run_dir, &path));
        Ok(())
    };
    put(format!("validation_predictions.{ext}"), &o.validation)?;
    put(format!("test_predictions.{ext}"), &o.test)?;
    if evasion_target {
        put(format!("test_predictions_clarity.{ext}"), &o.test_clarity)?;
    }
    let history = SeedHistory {
        seed: o.seed,
        best_epoch: o.best_epoch,
        epochs_run: o.epochs_run,
        best_val_f1: o.best_val_f1,
        val_f1_history: &o.val_f1_history,
        train_loss_history: &o.train_loss_history,
        class_weights,
    };
    let history_path = dir.join("history.json");
    write_text(&history_path, &(serde_json::to_string_pretty(&history)? + "\n"))?;
    outputs.push(rel(run_dir, &history_path));
    let ckpt_path = dir.join("checkpoint.json");
    write_text(&ckpt_path, &(serde_json::to_string_pretty(&o.checkpoint)? + "\n"))?;
    outputs.push(rel(run_dir, &ckpt_path));
    Ok(SeedRecord {
        seed: Some(o.seed),
        best_epoch: Some(o.best_epoch),
        epochs_run: Some(o.epochs_run),
        best_val_f1: Some(o.best_val_f1),
        checkpoint: Some(o.checkpoint.reference()),
        outputs,
    })
}

fn fine_tune(config: &ExperimentConfig, run_dir: &Path) -> Result<Finished, CliError> {
    let id = config.run_id.as_str();
    let rc = &config.training;
    let train_path = config.data.train.as_ref().expect("validated");
    let train = load_training_with(train_path, config.data.inconsistency).stage(id, "loading training data")?;
    let test: Vec<TestInstance> = load_test(&config.data.test).stage(id, "loading test data")?;

    let split = make_split(config, &train).stage(id, "splitting")?;
    let split_path = run_dir.join("split.json");
    split.save(&split_path).stage(id, "writing split")?;
    let (train_side, _) = split.apply(&train);
    let train_side: Vec<TrainInstance> = train_side.into_iter().cloned().collect();
    let training_distribution = distributions(&train_side).stage(id, "summarising training data")?;
    log::info!("run {id}: split {:?} ({} train / {} validation)", split.regime, split.train_ids.len(), split.val_ids.len());

    let ner = build_ner(&config.ner).stage(id, "starting NER backend")?;
    let data = prepare_data(rc, &train, &split, &test, ner.as_deref()).stage(id, "preprocessing")?;
    let mut backend = build_encoder(config, &run_dir.join("checkpoints")).stage(id, "starting encoder backend")?;
    let family = rc.target.family();
    let mut counts = vec![0u64; family.num_labels()];
    for ex in &data.train {
        counts[ex.label] += 1;
    }
    let weights = compute_class_weights(&counts, family, rc.weights).stage(id, "computing class weights")?;

    let mut metric = |p: &PredictionSet, g: &Golds| macro_prf(p, g).map(|m| m.f1);
    let mut outcomes = Vec::with_capacity(rc.seeds.len());
    let mut seeds = Vec::with_capacity(rc.seeds.len());
    for &seed in &rc.seeds {
        log::info!("run {id}: training seed {seed}");
        let o = train_seed(rc, &data, seed, backend.as_mut(), &mut metric, id).stage(id, "training")?;
        seeds.push(write_seed(run_dir, &o, config.prediction_format, weights.named(), family == LabelFamily::Evasion)?);
        outcomes.push(o);
    }
    let result = RunResult::from_seeds(id, rc.target, outcomes, &test).stage(id, "evaluating")?;
    let report = result
        .report
        .clone()
        .ok_or_else(|| CliError::Config("test set is empty".into()))?
        .with_training_distribution(training_distribution);
    write_report(run_dir, &report)?;
    let summary = json!({
        "best_val_f1": result.best_val_f1,
        "best_epoch": result.best_epoch,
        "class_weights": weights.named(),
    });
    write_text(&run_dir.join("training_summary.json"), &(serde_json::to_string_pretty(&summary)? + "\n"))?;
    Ok(Finished {
        report,
        seeds,
        backend: backend.id(),
        backend_parameters: json!({ "encoder": config.encoder }),
        prompt_sha256: None,
    })
}

fn write_transcripts(path: &Path, previous: &str, logs: &[BatchLog]) -> Result<(), CliError> {
    let mut text = previous.to_string();
    for l in logs {
        text.push_str(&serde_json::to_string(l)?);
        text.push('\n');
    }
    write_text(path, &text)
}

fn zero_shot(config: &ExperimentConfig, run_dir: &Path) -> Result<Finished, CliError> {
    let id = config.run_id.as_str();
    let test = load_test(&config.data.test).stage(id, "loading test data")?;
    let template = PromptTemplate::pinned().stage(id, "loading prompt")?;
    let backend = build_chat(&config.chat).stage(id, "starting chat backend")?;

    let partial_dir = run_dir.join(PARTIAL_DIR);
    let partial_preds = partial_dir.join("evasion.jsonl");
    let partial_logs = partial_dir.join("transcripts.jsonl");
    let resume = if partial_preds.exists() {
        let set = PredictionSet::read(&partial_preds, PredictionFormat::Jsonl, LabelFamily::Evasion, id, None)?;
        log::info!("run {id}: resuming with {} labelled instances", set.len());
        Some(set)
    } else {
        None
    };
    let previous_logs = if partial_logs.exists() {
        std::fs::read_to_string(&partial_logs).map_err(CliError::io(&partial_logs))?
    } else {
        String::new()
    };

    let output = match classify_dataset(&test, backend.as_ref(), &template, &config.zeroshot, resume.as_ref(), id) {
        Ok(o) => o,
        Err(ZeroShotError::ExhaustedRetries { batch, attempts, last_error, partial }) => {
            if !partial.evasion.is_empty() {
                write_predictions(&partial.evasion, PredictionFormat::Jsonl, &partial_preds)?;
            }
            write_transcripts(&partial_logs, &previous_logs, &partial.logs)?;
            let err = ZeroShotError::ExhaustedRetries { batch, attempts, last_error, partial };
            return Err(err).stage(id, "zero-shot labelling");
        }
        Err(e) => return Err(e).stage(id, "zero-shot labelling"),
    };
    write_transcripts(&run_dir.join("transcripts.jsonl"), &previous_logs, &output.logs)?;

    let ext = format_extension(config.prediction_format);
    let evasion_path = run_dir.join(format!("predictions_evasion.{ext}"));
    let clarity_path = run_dir.join(format!("predictions_clarity.{ext}"));
    write_predictions(&output.evasion, config.prediction_format, &evasion_path)?;
    write_predictions(&output.clarity, config.prediction_format, &clarity_path)?;

    let mut report = MetricsReport::build(
        id,
        &[SeedPredictions {
            seed: None,
            clarity: output.clarity.clone(),
            evasion: Some(output.evasion.clone()),
        }],
        &test,
    )
    .stage(id, "evaluating")?;
    if let Some(train_path) = &config.data.train {
        let train = load_training_with(train_path, config.data.inconsistency).stage(id, "loading training data")?;
        report = report.with_training_distribution(distributions(&train)?);
    }
    write_report(run_dir, &report)?;

    let mut parameters = match backend.parameters() {
        serde_json::Value::Object(m) => m,
        serde_json::Value::Null => serde_json::Map::new(),
        other => serde_json::Map::from_iter([("backend".to_string(), other)]),
    };
    parameters.insert("batch_size".into(), json!(config.zeroshot.batch_size));
    parameters.insert("retry".into(), serde_json::to_value(config.zeroshot.retry)?);
    parameters.insert("parallelism".into(), json!(config.zeroshot.parallelism));
    parameters.insert("strict_fences".into(), json!(config.zeroshot.strict_fences));
    Ok(Finished {
        report,
        seeds: vec![SeedRecord {
            seed: None,
            best_epoch: None,
            epochs_run: None,
            best_val_f1: None,
            checkpoint: None,
            outputs: vec![rel(run_dir, &evasion_path), rel(run_dir, &clarity_path)],
        }],
        backend: backend.provider(),
        backend_parameters: serde_json::Value::Object(parameters),
        prompt_sha256: Some(template.sha256()),
    })
}

/// Mean best validation F1 over seeds, read back from a run directory.
pub fn best_val_f1(manifest: &RunManifest) -> Option<Aggregate> {
    let v: Vec<f64> = manifest.seeds.iter().filter_map(|s| s.best_val_f1).collect();
    (!v.is_empty()).then(|| Aggregate::of(&v))
}
