//! Class weighting, weighted cross-entropy and the seed-level fine-tuning loop.
//!
//! The loop is backend-agnostic: anything implementing [`EncoderBackend`]
//! can be trained, from the in-process [`HashedLinearBackend`] to a
//! pretrained transformer driven through [`ProcessEncoderBackend`].

mod process;
mod stub;

use std::path::PathBuf;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::dataset::{Annotated, TestInstance, TrainInstance};
use crate::evaluation::{macro_prf, Aggregate, EvalError, Golds, MetricsReport, SeedPredictions};
use crate::predictions::{PredictionError, PredictionSet};
use crate::preprocessing::{prepare_input, special_tokens, MaskingMode, NerBackend, PreprocessError, RenderedInput, Representation};
use crate::rng;
use crate::splitting::{SplitAssignment, SplitRegime};
use crate::taxonomy::{Label, LabelFamily};

pub use process::ProcessEncoderBackend;
pub use stub::HashedLinearBackend;

#[derive(Debug, Error)]
pub enum TrainingError {
    #[error("class {0} has zero training examples; balanced weights are undefined")]
    ZeroCount(String),
    #[error("all class counts are zero")]
    EmptyCounts,
    #[error("expected {expected} class counts, got {got}")]
    CountLength { expected: usize, got: usize },
    #[error("invalid weight scheme: {0}")]
    InvalidScheme(String),
    #[error("probability {0} is outside (0, 1]")]
    DomainError(f64),
    #[error("invalid weight {0}")]
    InvalidWeight(f64),
    #[error("the validation split is empty")]
    NoValidationSplit,
    #[error("the training split is empty")]
    NoTrainingData,
    #[error("no seeds configured")]
    NoSeeds,
    #[error("backend failure: {0}")]
    BackendFailure(String),
    #[error(transparent)]
    Preprocess(#[from] PreprocessError),
    #[error(transparent)]
    Prediction(#[from] PredictionError),
    #[error(transparent)]
    Eval(#[from] EvalError),
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum WeightKind {
    #[default]
    Unweighted,
    Balanced,
    Sqrt,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct WeightScheme {
    pub kind: WeightKind,
    /// Stability constant added to frequencies (sqrt only).
    pub epsilon: f64,
    /// Upper bound applied before unit-mean rescaling (sqrt only).
    pub cap: f64,
}

impl Default for WeightScheme {
    fn default() -> Self {
        WeightScheme {
            kind: WeightKind::Unweighted,
            epsilon: 1e-8,
            cap: 10.0,
        }
    }
}

impl WeightScheme {
    pub fn of(kind: WeightKind) -> Self {
        WeightScheme {
            kind,
            ..Default::default()
        }
    }

    pub fn validate(&self) -> Result<(), TrainingError> {
        if !(self.epsilon > 0.0 && self.epsilon.is_finite()) {
            return Err(TrainingError::InvalidScheme(format!("epsilon must be > 0, got {}", self.epsilon)));
        }
        if !(self.cap >= 1.0 && self.cap.is_finite()) {
            return Err(TrainingError::InvalidScheme(format!("cap must be >= 1, got {}", self.cap)));
        }
        Ok(())
    }
}

/// Per-class weights, indexed like the family's label list, with the
/// training counts they were derived from.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassWeights {
    pub family: LabelFamily,
    pub scheme: WeightScheme,
    pub weights: Vec<f64>,
    pub counts: Vec<u64>,
    pub total: u64,
    pub num_classes: usize,
    pub frequencies: Vec<f64>,
}

impl ClassWeights {
    pub fn get(&self, label: Label) -> f64 {
        self.weights[label.index()]
    }

    pub fn named(&self) -> Vec<(String, f64)> {
        self.family
            .labels()
            .iter()
            .zip(&self.weights)
            .map(|(l, w)| (l.display_name().to_string(), *w))
            .collect()
    }
}

/// Weights from training-split counts (one count per label, taxonomy order).
pub fn compute_class_weights(
    counts: &[u64],
    family: LabelFamily,
    scheme: WeightScheme,
) -> Result<ClassWeights, TrainingError> {
    scheme.validate()?;
    let c = family.num_labels();
    if counts.len() != c {
        return Err(TrainingError::CountLength {
            expected: c,
            got: counts.len(),
        });
    }
    let total: u64 = counts.iter().sum();
    if total == 0 {
        return Err(TrainingError::EmptyCounts);
    }
    let n = total as f64;
    let frequencies: Vec<f64> = counts.iter().map(|&k| k as f64 / n).collect();
    let weights = match scheme.kind {
        WeightKind::Unweighted => vec![1.0; c],
        WeightKind::Balanced => counts
            .iter()
            .enumerate()
            .map(|(i, &k)| {
                if k == 0 {
                    let label = Label::from_index(family, i).expect("index in range");
                    Err(TrainingError::ZeroCount(label.display_name().to_string()))
                } else {
                    Ok(n / (c as f64 * k as f64))
                }
            })
            .collect::<Result<_, _>>()?,
        WeightKind::Sqrt => {
            let raw: Vec<f64> = frequencies
                .iter()
                .map(|f| (1.0 / (f + scheme.epsilon).sqrt()).min(scheme.cap))
                .collect();
            let mean = raw.iter().sum::<f64>() / c as f64;
            raw.into_iter().map(|w| w / mean).collect()
        }
    };
    Ok(ClassWeights {
        family,
        scheme,
        weights,
        counts: counts.to_vec(),
        total,
        num_classes: c,
        frequencies,
    })
}

/// `-w · ln p` for the probability assigned to the gold class.
pub fn weighted_ce(prob_of_gold: f64, weight: f64) -> Result<f64, TrainingError> {
    if !(prob_of_gold > 0.0 && prob_of_gold <= 1.0) {
        return Err(TrainingError::DomainError(prob_of_gold));
    }
    if !(weight > 0.0 && weight.is_finite()) {
        return Err(TrainingError::InvalidWeight(weight));
    }
    Ok(-weight * prob_of_gold.ln())
}

/// Mean of per-example weighted losses.
pub fn weighted_ce_mean(examples: &[(f64, f64)]) -> Result<f64, TrainingError> {
    if examples.is_empty() {
        return Ok(0.0);
    }
    let mut sum = 0.0;
    for &(p, w) in examples {
        sum += weighted_ce(p, w)?;
    }
    Ok(sum / examples.len() as f64)
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Target {
    #[default]
    DirectClarity,
    Evasion,
}

impl Target {
    pub fn family(self) -> LabelFamily {
        match self {
            Target::DirectClarity => LabelFamily::Clarity,
            Target::Evasion => LabelFamily::Evasion,
        }
    }

    pub fn gold(self, inst: &TrainInstance) -> Label {
        match self {
            Target::DirectClarity => inst.clarity.into(),
            Target::Evasion => inst.evasion.into(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SplitSpec {
    pub regime: SplitRegime,
    pub ratio: f64,
    /// Shuffle seed for the stratified regime.
    pub seed: u64,
}

impl Default for SplitSpec {
    fn default() -> Self {
        SplitSpec {
            regime: SplitRegime::Stratified,
            ratio: 0.8,
            seed: 42,
        }
    }
}

/// Full description of a fine-tuning experiment.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub target: Target,
    pub representation: Representation,
    pub masking: MaskingMode,
    pub weights: WeightScheme,
    pub split: SplitSpec,
    pub seeds: Vec<u64>,
    pub max_input_length: usize,
    pub learning_rate: f64,
    pub warmup_ratio: f64,
    pub weight_decay: f64,
    pub dropout: f64,
    pub max_epochs: usize,
    pub train_batch_size: usize,
    pub eval_batch_size: usize,
    pub early_stop_patience: usize,
    pub early_stop_threshold: f64,
    pub backend: String,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            target: Target::DirectClarity,
            representation: Representation::Marked,
            masking: MaskingMode::None,
            weights: WeightScheme::default(),
            split: SplitSpec::default(),
            seeds: vec![13, 21, 42],
            max_input_length: 512,
            learning_rate: 2e-5,
            warmup_ratio: 0.1,
            weight_decay: 0.01,
            dropout: 0.1,
            max_epochs: 20,
            train_batch_size: 32,
            eval_batch_size: 32,
            early_stop_patience: 5,
            early_stop_threshold: 1e-3,
            backend: "hashed-linear".into(),
        }
    }
}

/// Hyperparameters handed to a backend at initialisation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BackendSettings {
    pub seed: u64,
    pub num_labels: usize,
    pub added_special_tokens: Vec<String>,
    pub max_input_length: usize,
    pub learning_rate: f64,
    pub warmup_ratio: f64,
    pub weight_decay: f64,
    pub dropout: f64,
    /// Optimiser steps planned over the whole run, for the LR schedule.
    pub total_steps: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Example {
    pub id: String,
    pub input: RenderedInput,
    pub label: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind")]
pub enum CheckpointState {
    InMemory { parameters: Vec<f64> },
    OnDisk { path: PathBuf },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub backend: String,
    pub epoch: usize,
    pub state: CheckpointState,
}

impl Checkpoint {
    /// Short human-readable handle recorded in manifests.
    pub fn reference(&self) -> String {
        match &self.state {
            CheckpointState::InMemory { .. } => format!("{}@epoch{}", self.backend, self.epoch),
            CheckpointState::OnDisk { path } => path.display().to_string(),
        }
    }
}

/// Narrow interface to a trainable sequence classifier.
///
/// A backend instance is owned by one training loop at a time.
pub trait EncoderBackend {
    fn id(&self) -> String;
    /// Fresh model for one seed.
    fn initialize(&mut self, settings: &BackendSettings) -> Result<(), TrainingError>;
    /// One pass over `batches`; returns the mean training loss.
    fn train_epoch(&mut self, batches: &[Vec<&Example>], class_weights: &[f64]) -> Result<f64, TrainingError>;
    /// Class probabilities per input.
    fn predict(&mut self, inputs: &[&RenderedInput]) -> Result<Vec<Vec<f64>>, TrainingError>;
    fn snapshot(&mut self, epoch: usize) -> Result<Checkpoint, TrainingError>;
    fn restore(&mut self, checkpoint: &Checkpoint) -> Result<(), TrainingError>;
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum StopDecision {
    Improved,
    NoImprovement,
    Stop,
}

/// Patience-based stopping on a maximised score.
///
/// An epoch counts as an improvement only if it beats the best score so far
/// by strictly more than `threshold`; the best epoch moves only on such
/// improvements.
#[derive(Debug, Clone, PartialEq)]
pub struct EarlyStopping {
    pub patience: usize,
    pub threshold: f64,
    best: Option<(usize, f64)>,
    stale: usize,
}

impl EarlyStopping {
    pub fn new(patience: usize, threshold: f64) -> Self {
        EarlyStopping {
            patience,
            threshold,
            best: None,
            stale: 0,
        }
    }

    pub fn observe(&mut self, epoch: usize, score: f64) -> StopDecision {
        let improved = match self.best {
            None => true,
            Some((_, best)) => score > best + self.threshold,
        };
        if improved {
            self.best = Some((epoch, score));
            self.stale = 0;
            StopDecision::Improved
        } else {
            self.stale += 1;
            if self.stale >= self.patience {
                StopDecision::Stop
            } else {
                StopDecision::NoImprovement
            }
        }
    }

    pub fn best_epoch(&self) -> Option<usize> {
        self.best.map(|(e, _)| e)
    }

    pub fn best_score(&self) -> Option<f64> {
        self.best.map(|(_, s)| s)
    }
}

/// What one seed produced.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SeedOutcome {
    pub seed: u64,
    pub best_epoch: usize,
    pub epochs_run: usize,
    pub best_val_f1: f64,
    pub val_f1_history: Vec<f64>,
    pub train_loss_history: Vec<f64>,
    pub checkpoint: Checkpoint,
    pub validation: PredictionSet,
    /// Test predictions in the trained family.
    pub test: PredictionSet,
    /// Test predictions at clarity level (derived when the target is evasion).
    pub test_clarity: PredictionSet,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RunResult {
    pub run_id: String,
    pub target: Target,
    pub per_seed: Vec<SeedOutcome>,
    pub best_val_f1: Aggregate,
    pub best_epoch: Aggregate,
    /// Test metrics, when the test set was non-empty.
    pub report: Option<MetricsReport>,
}

impl RunResult {
    /// Folds completed seed outcomes into aggregates.
    pub fn from_seeds(
        run_id: impl Into<String>,
        target: Target,
        per_seed: Vec<SeedOutcome>,
        test: &[TestInstance],
    ) -> Result<RunResult, TrainingError> {
        if per_seed.is_empty() {
            return Err(TrainingError::NoSeeds);
        }
        let run_id = run_id.into();
        let report = if test.is_empty() {
            None
        } else {
            let runs: Vec<SeedPredictions> = per_seed
                .iter()
                .map(|o| SeedPredictions {
                    seed: Some(o.seed),
                    clarity: o.test_clarity.clone(),
                    evasion: (target == Target::Evasion).then(|| o.test.clone()),
                })
                .collect();
            Some(MetricsReport::build(run_id.clone(), &runs, test)?)
        };
        Ok(RunResult {
            run_id,
            target,
            best_val_f1: Aggregate::of(&per_seed.iter().map(|o| o.best_val_f1).collect::<Vec<_>>()),
            best_epoch: Aggregate::of(&per_seed.iter().map(|o| o.best_epoch as f64).collect::<Vec<_>>()),
            per_seed,
            report,
        })
    }
}

/// Inputs rendered once and shared by every seed.
pub struct PreparedData {
    pub train: Vec<Example>,
    pub validation: Vec<Example>,
    pub validation_golds: Golds,
    pub test_ids: Vec<String>,
    pub test_inputs: Vec<RenderedInput>,
}

fn render_one<T: Annotated>(inst: &T, config: &RunConfig, ner: Option<&dyn NerBackend>) -> Result<RenderedInput, TrainingError> {
    Ok(prepare_input(config.representation, config.masking, inst.question(), inst.answer(), ner)?)
}

pub fn prepare_data(
    config: &RunConfig,
    instances: &[TrainInstance],
    split: &SplitAssignment,
    test: &[TestInstance],
    ner: Option<&dyn NerBackend>,
) -> Result<PreparedData, TrainingError> {
    let (train, val) = split.apply(instances);
    if val.is_empty() {
        return Err(TrainingError::NoValidationSplit);
    }
    if train.is_empty() {
        return Err(TrainingError::NoTrainingData);
    }
    let example = |inst: &TrainInstance| -> Result<Example, TrainingError> {
        Ok(Example {
            id: inst.id.clone(),
            input: render_one(inst, config, ner)?,
            label: config.target.gold(inst).index(),
        })
    };
    let validation_golds = val.iter().map(|i| (i.id.clone(), config.target.gold(i))).collect();
    Ok(PreparedData {
        train: train.into_iter().map(example).collect::<Result<_, _>>()?,
        validation: val.into_iter().map(example).collect::<Result<_, _>>()?,
        validation_golds,
        test_ids: test.iter().map(|t| t.id.clone()).collect(),
        test_inputs: test.iter().map(|t| render_one(t, config, ner)).collect::<Result<_, _>>()?,
    })
}

fn argmax(probs: &[f64]) -> usize {
    // First maximum wins, so ties resolve to taxonomy order.
    probs
        .iter()
        .enumerate()
        .fold((0, f64::NEG_INFINITY), |(bi, bv), (i, &v)| if v > bv { (i, v) } else { (bi, bv) })
        .0
}

fn predict_set(
    backend: &mut dyn EncoderBackend,
    ids: &[String],
    inputs: &[&RenderedInput],
    family: LabelFamily,
    run_id: &str,
    seed: Option<u64>,
    batch_size: usize,
) -> Result<PredictionSet, TrainingError> {
    let mut set = PredictionSet::new(run_id, seed, family);
    let mut offset = 0;
    for chunk in inputs.chunks(batch_size.max(1)) {
        let probs = backend.predict(chunk)?;
        if probs.len() != chunk.len() {
            return Err(TrainingError::BackendFailure(format!(
                "backend returned {} predictions for {} inputs",
                probs.len(),
                chunk.len()
            )));
        }
        for p in probs {
            let label = Label::from_index(family, argmax(&p))
                .ok_or_else(|| TrainingError::BackendFailure(format!("expected {} class scores", family.num_labels())))?;
            set.insert_with_scores(ids[offset].clone(), label, p)?;
            offset += 1;
        }
    }
    Ok(set)
}

/// Predictions from a restored checkpoint, plus derived clarity labels when
/// `target` is evasion.
pub fn predict_labels<T: Annotated>(
    backend: &mut dyn EncoderBackend,
    checkpoint: &Checkpoint,
    instances: &[T],
    config: &RunConfig,
    ner: Option<&dyn NerBackend>,
    run_id: &str,
    seed: Option<u64>,
) -> Result<(PredictionSet, Option<PredictionSet>), TrainingError> {
    backend.restore(checkpoint)?;
    let ids: Vec<String> = instances.iter().map(|i| i.id().to_string()).collect();
    let inputs: Vec<RenderedInput> = instances.iter().map(|i| render_one(i, config, ner)).collect::<Result<_, _>>()?;
    let refs: Vec<&RenderedInput> = inputs.iter().collect();
    let preds = predict_set(backend, &ids, &refs, config.target.family(), run_id, seed, config.eval_batch_size)?;
    let derived = (config.target == Target::Evasion).then(|| preds.derived_clarity());
    Ok((preds, derived))
}

/// Validation score hook; the default is macro-F1 on the trained target.
pub type ValidationMetric<'a> = dyn FnMut(&PredictionSet, &Golds) -> Result<f64, EvalError> + 'a;

fn epoch_batches(train: &[Example], batch_size: usize, seed: u64, epoch: usize) -> Vec<Vec<&Example>> {
    let mut order: Vec<&Example> = train.iter().collect();
    let mix = seed ^ (epoch as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15);
    rng::shuffle(&mut order, &mut rng::seeded(mix));
    order.chunks(batch_size.max(1)).map(<[_]>::to_vec).collect()
}

/// Trains one seed with early stopping and returns its outcome.
pub fn train_seed(
    config: &RunConfig,
    data: &PreparedData,
    seed: u64,
    backend: &mut dyn EncoderBackend,
    metric: &mut ValidationMetric<'_>,
    run_id: &str,
) -> Result<SeedOutcome, TrainingError> {
    let family = config.target.family();
    let mut counts = vec![0u64; family.num_labels()];
    for ex in &data.train {
        counts[ex.label] += 1;
    }
    let weights = compute_class_weights(&counts, family, config.weights)?;
    let steps_per_epoch = data.train.len().div_ceil(config.train_batch_size.max(1));
    backend.initialize(&BackendSettings {
        seed,
        num_labels: family.num_labels(),
        added_special_tokens: special_tokens(config.representation),
        max_input_length: config.max_input_length,
        learning_rate: config.learning_rate,
        warmup_ratio: config.warmup_ratio,
        weight_decay: config.weight_decay,
        dropout: config.dropout,
        total_steps: steps_per_epoch * config.max_epochs,
    })?;

    let val_ids: Vec<String> = data.validation.iter().map(|e| e.id.clone()).collect();
    let val_inputs: Vec<&RenderedInput> = data.validation.iter().map(|e| &e.input).collect();
    let mut stopper = EarlyStopping::new(config.early_stop_patience, config.early_stop_threshold);
    let mut best: Option<Checkpoint> = None;
    let mut val_history = Vec::new();
    let mut loss_history = Vec::new();

    for epoch in 1..=config.max_epochs {
        let batches = epoch_batches(&data.train, config.train_batch_size, seed, epoch);
        loss_history.push(backend.train_epoch(&batches, &weights.weights)?);
        let val = predict_set(backend, &val_ids, &val_inputs, family, run_id, Some(seed), config.eval_batch_size)?;
        let score = metric(&val, &data.validation_golds)?;
        val_history.push(score);
        log::debug!("seed {seed} epoch {epoch}: validation macro-F1 {score:.4}");
        match stopper.observe(epoch, score) {
            StopDecision::Improved => best = Some(backend.snapshot(epoch)?),
            StopDecision::NoImprovement => {}
            StopDecision::Stop => break,
        }
    }

    let checkpoint = best.ok_or_else(|| TrainingError::BackendFailure("no epoch completed".into()))?;
    backend.restore(&checkpoint)?;
    let validation = predict_set(backend, &val_ids, &val_inputs, family, run_id, Some(seed), config.eval_batch_size)?;
    let test_inputs: Vec<&RenderedInput> = data.test_inputs.iter().collect();
    let test = predict_set(backend, &data.test_ids, &test_inputs, family, run_id, Some(seed), config.eval_batch_size)?;
    let test_clarity = test.derived_clarity();
    Ok(SeedOutcome {
        seed,
        best_epoch: stopper.best_epoch().expect("at least one epoch observed"),
        epochs_run: val_history.len(),
        best_val_f1: stopper.best_score().expect("at least one epoch observed"),
        val_f1_history: val_history,
        train_loss_history: loss_history,
        checkpoint,
        validation,
        test,
        test_clarity,
    })
}

/// Trains every configured seed in sequence on one backend and aggregates.
pub fn train_run(
    config: &RunConfig,
    instances: &[TrainInstance],
    split: &SplitAssignment,
    test: &[TestInstance],
    backend: &mut dyn EncoderBackend,
    ner: Option<&dyn NerBackend>,
    run_id: &str,
) -> Result<RunResult, TrainingError> {
    let mut metric = |p: &PredictionSet, g: &Golds| macro_prf(p, g).map(|m| m.f1);
    train_run_with_metric(config, instances, split, test, backend, ner, run_id, &mut metric)
}

#[allow(clippy::too_many_arguments)]
pub fn train_run_with_metric(
    config: &RunConfig,
    instances: &[TrainInstance],
    split: &SplitAssignment,
    test: &[TestInstance],
    backend: &mut dyn EncoderBackend,
    ner: Option<&dyn NerBackend>,
    run_id: &str,
    metric: &mut ValidationMetric<'_>,
) -> Result<RunResult, TrainingError> {
    if config.seeds.is_empty() {
        return Err(TrainingError::NoSeeds);
    }
    let data = prepare_data(config, instances, split, test, ner)?;
    let mut outcomes = Vec::with_capacity(config.seeds.len());
    for &seed in &config.seeds {
        outcomes.push(train_seed(config, &data, seed, backend, metric, run_id)?);
    }
    RunResult::from_seeds(run_id, config.target, outcomes, test)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::splitting::dual_stratified_split;
    use crate::taxonomy::{clarity_of, ClarityLabel, EvasionLabel};
    use proptest::prelude::*;

    fn close(a: f64, b: f64, tol: f64) -> bool {
        (a - b).abs() <= tol
    }

    #[test]
    fn balanced_example() {
        let w = compute_class_weights(&[60, 30, 10], LabelFamily::Clarity, WeightScheme::of(WeightKind::Balanced)).unwrap();
        // N / (C n_y) with N = 100, C = 3.
        for (got, want) in w.weights.iter().zip([100.0 / 180.0, 100.0 / 90.0, 100.0 / 30.0]) {
            assert!(close(*got, want, 1e-12));
        }
        assert!(close(w.weights[0], 0.5556, 5e-5) && close(w.weights[1], 1.1111, 5e-5) && close(w.weights[2], 3.3333, 5e-5));
    }

    #[test]
    fn sqrt_example() {
        let w = compute_class_weights(&[60, 30, 10], LabelFamily::Clarity, WeightScheme::of(WeightKind::Sqrt)).unwrap();
        let raw: Vec<f64> = [0.6f64, 0.3, 0.1].iter().map(|f| 1.0 / (f + 1e-8).sqrt()).collect();
        assert!(close(raw[0], 1.2910, 5e-5) && close(raw[1], 1.8257, 5e-5) && close(raw[2], 3.1623, 5e-5));
        let mean = raw.iter().sum::<f64>() / 3.0;
        for (got, r) in w.weights.iter().zip(&raw) {
            assert!(close(*got, r / mean, 1e-12));
        }
        // 40-digit decimal oracle.
        for (got, want) in w.weights.iter().zip([0.616_813_954_716_782_7, 0.872_306_652_952_236_2, 1.510_879_392_330_981_2]) {
            assert!(close(*got, want, 1e-12));
        }
        // Four-decimal published figures (the last one is truncated, hence 1e-4).
        assert!(close(w.weights[0], 0.6168, 1e-4) && close(w.weights[1], 0.8723, 1e-4) && close(w.weights[2], 1.5108, 1e-4));
        assert!(close(w.weights.iter().sum::<f64>() / 3.0, 1.0, 1e-9));
    }

    #[test]
    fn unweighted_and_errors() {
        let w = compute_class_weights(&[60, 30, 10], LabelFamily::Clarity, WeightScheme::default()).unwrap();
        assert_eq!(w.weights, vec![1.0; 3]);
        assert!(matches!(
            compute_class_weights(&[5, 0, 1], LabelFamily::Clarity, WeightScheme::of(WeightKind::Balanced)),
            Err(TrainingError::ZeroCount(l)) if l == "Ambivalent"
        ));
        assert!(matches!(compute_class_weights(&[0, 0, 0], LabelFamily::Clarity, WeightScheme::default()), Err(TrainingError::EmptyCounts)));
        assert!(compute_class_weights(&[1, 2], LabelFamily::Clarity, WeightScheme::default()).is_err());
        let bad = WeightScheme { cap: 0.5, ..WeightScheme::of(WeightKind::Sqrt) };
        assert!(matches!(compute_class_weights(&[1, 1, 1], LabelFamily::Clarity, bad), Err(TrainingError::InvalidScheme(_))));
        // A missing class in the sqrt scheme hits the cap instead of failing.
        let w = compute_class_weights(&[50, 50, 0], LabelFamily::Clarity, WeightScheme::of(WeightKind::Sqrt)).unwrap();
        assert!(w.weights[2] > w.weights[0]);
    }

    #[test]
    fn weighted_ce_values() {
        assert_eq!(weighted_ce(1.0, 3.7).unwrap(), 0.0);
        assert!(close(weighted_ce(0.5, 2.0).unwrap(), 1.3863, 5e-5));
        assert!(close(weighted_ce(0.5, 2.0).unwrap(), 2.0 * std::f64::consts::LN_2, 1e-15));
        assert!(matches!(weighted_ce(0.0, 1.0), Err(TrainingError::DomainError(_))));
        assert!(matches!(weighted_ce(-0.1, 1.0), Err(TrainingError::DomainError(_))));
        assert!(close(weighted_ce_mean(&[(0.5, 2.0), (1.0, 1.0)]).unwrap(), std::f64::consts::LN_2, 1e-15));
    }

    #[test]
    fn unit_weight_is_plain_cross_entropy() {
        let mut r = rng::seeded(5);
        for _ in 0..100 {
            let p = rng::unit_f64(&mut r).max(1e-12);
            assert_eq!(weighted_ce(p, 1.0).unwrap(), -p.ln());
        }
    }

    #[test]
    fn scripted_plateau_stops_after_epoch_seven() {
        let scores = [0.50, 0.60, 0.6005, 0.6004, 0.6003, 0.6002, 0.6001, 0.6000, 0.5999];
        let mut es = EarlyStopping::new(5, 1e-3);
        let mut last = 0;
        for (i, s) in scores.iter().enumerate() {
            last = i + 1;
            if es.observe(last, *s) == StopDecision::Stop {
                break;
            }
        }
        assert_eq!(es.best_epoch(), Some(2));
        assert_eq!(last, 7);
    }

    #[test]
    fn equal_to_threshold_is_not_improvement() {
        let mut es = EarlyStopping::new(5, 0.25);
        es.observe(1, 0.5);
        assert_eq!(es.observe(2, 0.75), StopDecision::NoImprovement);
        assert_eq!(es.observe(3, 0.7500001), StopDecision::Improved);
    }

    proptest! {
        #[test]
        fn sqrt_weights_have_unit_mean(counts in proptest::collection::vec(0u64..500, 9)) {
            prop_assume!(counts.iter().sum::<u64>() > 0);
            let w = compute_class_weights(&counts, LabelFamily::Evasion, WeightScheme::of(WeightKind::Sqrt)).unwrap();
            prop_assert!((w.weights.iter().sum::<f64>() / 9.0 - 1.0).abs() < 1e-9);
            prop_assert!(w.weights.iter().all(|&x| x > 0.0));
        }

        #[test]
        fn equifrequent_sqrt_is_unweighted(k in 1u64..1000) {
            let w = compute_class_weights(&[k, k, k], LabelFamily::Clarity, WeightScheme::of(WeightKind::Sqrt)).unwrap();
            for x in w.weights {
                prop_assert!((x - 1.0).abs() < 1e-12);
            }
        }

        #[test]
        fn balanced_mass_per_class(counts in proptest::collection::vec(1u64..500, 3)) {
            let w = compute_class_weights(&counts, LabelFamily::Clarity, WeightScheme::of(WeightKind::Balanced)).unwrap();
            let n: u64 = counts.iter().sum();
            for (c, x) in counts.iter().zip(&w.weights) {
                prop_assert!((*c as f64 * x - n as f64 / 3.0).abs() < 1e-9);
            }
            let total: f64 = counts.iter().zip(&w.weights).map(|(c, x)| *c as f64 * x).sum();
            prop_assert!((total - n as f64).abs() < 1e-9);
        }

        #[test]
        fn ce_monotone_and_linear(p in 0.001f64..1.0, q in 0.001f64..1.0, w in 0.01f64..10.0, k in 0.1f64..5.0) {
            let (lo, hi) = if p < q { (p, q) } else { (q, p) };
            prop_assert!(weighted_ce(lo, w).unwrap() >= weighted_ce(hi, w).unwrap());
            prop_assert!((weighted_ce(p, k * w).unwrap() - k * weighted_ce(p, w).unwrap()).abs() < 1e-9);
        }
    }

    // A backend whose scores are irrelevant; validation scores are scripted.
    struct ConstantBackend {
        num_labels: usize,
        snapshots: usize,
        restored: Option<usize>,
    }

    impl EncoderBackend for ConstantBackend {
        fn id(&self) -> String {
            "constant".into()
        }
        fn initialize(&mut self, s: &BackendSettings) -> Result<(), TrainingError> {
            self.num_labels = s.num_labels;
            Ok(())
        }
        fn train_epoch(&mut self, _: &[Vec<&Example>], _: &[f64]) -> Result<f64, TrainingError> {
            Ok(1.0)
        }
        fn predict(&mut self, inputs: &[&RenderedInput]) -> Result<Vec<Vec<f64>>, TrainingError> {
            Ok(inputs.iter().map(|_| vec![1.0 / self.num_labels as f64; self.num_labels]).collect())
        }
        fn snapshot(&mut self, epoch: usize) -> Result<Checkpoint, TrainingError> {
            self.snapshots += 1;
            Ok(Checkpoint {
                backend: self.id(),
                epoch,
                state: CheckpointState::InMemory { parameters: vec![] },
            })
        }
        fn restore(&mut self, c: &Checkpoint) -> Result<(), TrainingError> {
            self.restored = Some(c.epoch);
            Ok(())
        }
    }

    pub(crate) fn fixture(n: usize) -> Vec<TrainInstance> {
        let words = ["economy", "taxes", "war", "health", "jobs", "border", "climate", "trade", "school"];
        (0..n)
            .map(|i| {
                let e = EvasionLabel::ALL[i % 9];
                TrainInstance {
                    id: format!("id{i:04}"),
                    question: format!("What about {}?", words[(i / 9) % 9]),
                    answer: format!("We {} the {} plan.", e.display_name().to_lowercase(), words[i % 9]),
                    clarity: clarity_of(e),
                    evasion: e,
                    president: None,
                    date: None,
                    multiple_questions: None,
                    affirmative_question: None,
                }
            })
            .collect()
    }

    fn scripted(scores: Vec<f64>) -> impl FnMut(&PredictionSet, &Golds) -> Result<f64, EvalError> {
        let mut i = 0;
        move |_, _| {
            let s = scores[i.min(scores.len() - 1)];
            i += 1;
            Ok(s)
        }
    }

    #[test]
    fn scripted_run_selects_epoch_two() {
        let data = fixture(90);
        let split = dual_stratified_split(&data, 0.8, 42).unwrap();
        let config = RunConfig { seeds: vec![13], ..Default::default() };
        let mut backend = ConstantBackend { num_labels: 0, snapshots: 0, restored: None };
        let mut metric = scripted(vec![0.50, 0.60, 0.6005, 0.6004, 0.6003, 0.6002, 0.6001, 0.6000, 0.5999]);
        let r = train_run_with_metric(&config, &data, &split, &[], &mut backend, None, "r", &mut metric).unwrap();
        let o = &r.per_seed[0];
        assert_eq!(o.best_epoch, 2);
        assert_eq!(o.epochs_run, 7);
        assert_eq!(o.best_val_f1, 0.60);
        assert_eq!(backend.restored, Some(2));
        assert_eq!(backend.snapshots, 2);
        assert!(r.report.is_none());
    }

    #[test]
    fn increasing_scores_use_every_epoch() {
        let data = fixture(90);
        let split = dual_stratified_split(&data, 0.8, 42).unwrap();
        let config = RunConfig { seeds: vec![13], ..Default::default() };
        let mut backend = ConstantBackend { num_labels: 0, snapshots: 0, restored: None };
        let mut metric = scripted((1..=20).map(|i| i as f64 * 0.01).collect());
        let r = train_run_with_metric(&config, &data, &split, &[], &mut backend, None, "r", &mut metric).unwrap();
        assert_eq!(r.per_seed[0].epochs_run, 20);
        assert_eq!(r.per_seed[0].best_epoch, 20);
    }

    #[test]
    fn empty_validation_is_rejected() {
        let data = fixture(20);
        let split = SplitAssignment {
            regime: SplitRegime::Stratified,
            seed: Some(1),
            ratio: 0.8,
            train_ids: data.iter().map(|i| i.id.clone()).collect(),
            val_ids: Default::default(),
        };
        let mut backend = ConstantBackend { num_labels: 0, snapshots: 0, restored: None };
        let err = train_run(&RunConfig::default(), &data, &split, &[], &mut backend, None, "r").unwrap_err();
        assert!(matches!(err, TrainingError::NoValidationSplit));
    }

    #[test]
    fn defaults_match_reference_settings() {
        let c = RunConfig::default();
        assert_eq!(c.seeds, vec![13, 21, 42]);
        assert_eq!((c.max_input_length, c.max_epochs, c.train_batch_size, c.eval_batch_size), (512, 20, 32, 32));
        assert_eq!((c.learning_rate, c.warmup_ratio, c.weight_decay, c.dropout), (2e-5, 0.1, 0.01, 0.1));
        assert_eq!((c.early_stop_patience, c.early_stop_threshold), (5, 1e-3));
        let back: RunConfig = serde_json::from_str(&serde_json::to_string(&c).unwrap()).unwrap();
        assert_eq!(back, c);
        let partial: RunConfig = serde_json::from_str(r#"{"target":"evasion","weights":{"kind":"sqrt"}}"#).unwrap();
        assert_eq!(partial.target, Target::Evasion);
        assert_eq!(partial.weights.cap, 10.0);
    }

    #[test]
    fn derived_clarity_of_dodging() {
        let mut p = PredictionSet::new("r", None, LabelFamily::Evasion);
        p.insert("x", EvasionLabel::Dodging.into()).unwrap();
        assert_eq!(p.derived_clarity().get("x"), Some(ClarityLabel::Ambivalent.into()));
    }

    #[test]
    fn argmax_prefers_first_maximum() {
        assert_eq!(argmax(&[0.2, 0.4, 0.4]), 1);
        assert_eq!(argmax(&[0.5, 0.5]), 0);
    }
}
