//! Acceptance gate. Prints one PASS/FAIL/SKIP line per criterion and exits
//! non-zero if any criterion fails.
//!
//! Dataset-statistic checks need the public data as canonical JSONL:
//! set `CLARITY_DATA_DIR` to a directory holding `train.jsonl` and
//! `test.jsonl` (see `clarity import`). Without it those lines print SKIP.

mod common;

use std::collections::{BTreeMap, BTreeSet};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::PathBuf;
use std::time::{Duration, Instant};

use clarity_cli::config::ExperimentConfig;
use clarity_cli::experiment::run_config;
use clarity_cli::manifest::RunManifest;
use clarity_core::dataset::{class_distribution, load_test, load_training, majority_evasion, TrainInstance};
use clarity_core::ensemble::{majority_vote_ensemble, EnsembleSpec, TieBreak};
use clarity_core::evaluation::{
    confusion_matrix, evasion_eval, fleiss_kappa, macro_prf, Aggregate, ClassCounts, Golds, MetricsReport, Normalize,
    SeedPredictions,
};
use clarity_core::predictions::{PredictionFormat, PredictionSet};
use clarity_core::rng;
use clarity_core::splitting::{dual_stratified_split, president_disjoint_split, SplitAssignment};
use clarity_core::taxonomy::{clarity_of, evasions_of, parse_clarity, parse_evasion, ClarityLabel, EvasionLabel, Label, LabelFamily};
use clarity_core::training::{
    compute_class_weights, prepare_data, train_run, train_seed, EncoderBackend, HashedLinearBackend, RunConfig, Target,
    WeightKind, WeightScheme,
};
use clarity_core::zeroshot::{
    classify_dataset, parse_response, KeywordBackend, PromptTemplate, RetryPolicy, ScriptedBackend, ZeroShotConfig,
    ZeroShotError, SYSTEM_PROMPT,
};

type Outcome = Result<String, String>;

enum Status {
    Pass,
    Fail,
    Skip,
}

struct Gate {
    results: Vec<(String, Status)>,
}

macro_rules! ensure {
    ($cond:expr, $($fmt:tt)+) => {
        let ok: bool = $cond;
        if !ok {
            return Err(format!($($fmt)+));
        }
    };
}

impl Gate {
    fn check(&mut self, name: &str, budget: Option<Duration>, f: impl FnOnce() -> Outcome) {
        let start = Instant::now();
        let result = catch_unwind(AssertUnwindSafe(f)).unwrap_or_else(|p| {
            Err(p.downcast_ref::<String>().cloned().or_else(|| p.downcast_ref::<&str>().map(|s| s.to_string())).unwrap_or_else(|| "panic".into()))
        });
        let elapsed = start.elapsed();
        let result = match (result, budget) {
            (Ok(_), Some(b)) if elapsed > b => Err(format!("took {elapsed:.2?}, budget {b:?}")),
            (r, _) => r,
        };
        match result {
            Ok(detail) => {
                println!("PASS  {name} [{elapsed:.2?}] {detail}");
                self.results.push((name.into(), Status::Pass));
            }
            Err(detail) => {
                println!("FAIL  {name} [{elapsed:.2?}] {detail}");
                self.results.push((name.into(), Status::Fail));
            }
        }
    }

    fn skip(&mut self, name: &str, reason: &str) {
        println!("SKIP  {name}: {reason}");
        self.results.push((name.into(), Status::Skip));
    }
}

fn data_dir() -> Option<PathBuf> {
    std::env::var_os("CLARITY_DATA_DIR").map(PathBuf::from).filter(|d| d.join("train.jsonl").is_file() && d.join("test.jsonl").is_file())
}

// ---------------------------------------------------------------- taxonomy

fn taxonomy() -> Outcome {
    let table = [
        ("Explicit", "Clear Reply"),
        ("Implicit", "Ambivalent"),
        ("Dodging", "Ambivalent"),
        ("General", "Ambivalent"),
        ("Deflection", "Ambivalent"),
        ("Partial/half-answer", "Ambivalent"),
        ("Declining to answer", "Clear Non-Reply"),
        ("Claims ignorance", "Clear Non-Reply"),
        ("Clarification", "Clear Non-Reply"),
    ];
    ensure!(EvasionLabel::ALL.len() == 9, "expected nine evasion labels");
    for (e, (name, parent)) in EvasionLabel::ALL.iter().zip(table) {
        ensure!(e.display_name() == name, "{e:?} displays as {}", e.display_name());
        ensure!(clarity_of(*e).display_name() == parent, "{name} maps to {}", clarity_of(*e));
        ensure!(parse_evasion(name).ok() == Some(*e), "{name} does not parse back");
        ensure!(evasions_of(clarity_of(*e)).contains(e), "{name} missing from inverse image");
        let l = Label::Evasion(*e);
        ensure!(Label::from_index(LabelFamily::Evasion, l.index()) == Some(l), "index round trip failed for {name}");
    }
    let sizes: Vec<usize> = ClarityLabel::ALL.iter().map(|c| evasions_of(*c).len()).collect();
    ensure!(sizes == [1, 5, 3], "inverse image sizes {sizes:?}");
    for c in ClarityLabel::ALL {
        ensure!(parse_clarity(c.display_name()).ok() == Some(c), "{c} does not parse back");
        ensure!(evasions_of(c).iter().all(|e| clarity_of(*e) == c), "inverse image of {c} is inconsistent");
    }
    Ok("9 mappings, inverse sizes (1,5,3)".into())
}

// ---------------------------------------------------------------- dataset

fn dataset_statistics(dir: &std::path::Path) -> Outcome {
    let train = load_training(&dir.join("train.jsonl")).map_err(|e| e.to_string())?;
    let test = load_test(&dir.join("test.jsonl")).map_err(|e| e.to_string())?;
    ensure!(train.len() == 3448 && test.len() == 308, "sizes {} / {}", train.len(), test.len());
    let d = class_distribution(&train, LabelFamily::Clarity).map_err(|e| e.to_string())?;
    for (c, want) in [(ClarityLabel::Ambivalent, 0.592), (ClarityLabel::ClearReply, 0.305), (ClarityLabel::ClearNonReply, 0.103)] {
        let got = d.fraction(c.into());
        ensure!((got - want).abs() <= 0.001 + 1e-12, "{c}: {got:.4} vs {want}");
    }
    let t = class_distribution(&test, LabelFamily::Clarity).map_err(|e| e.to_string())?;
    let counts = [ClarityLabel::Ambivalent, ClarityLabel::ClearReply, ClarityLabel::ClearNonReply].map(|c| t.count(c.into()));
    ensure!(counts == [206, 79, 23], "test clarity counts {counts:?}");
    let majority = test.iter().filter(|t| majority_evasion(t).is_some()).count();
    ensure!(majority == 275, "majority label on {majority} instances");
    Ok("3448/308, 59.2/30.5/10.3%, 206/79/23, 275 majority".into())
}

// ---------------------------------------------------------------- splitting

fn proportional_within_one(instances: &[TrainInstance], split: &SplitAssignment, ratio: f64) -> Result<(), String> {
    let mut total: BTreeMap<EvasionLabel, usize> = BTreeMap::new();
    let mut val: BTreeMap<EvasionLabel, usize> = BTreeMap::new();
    for i in instances {
        *total.entry(i.evasion).or_default() += 1;
        if split.val_ids.contains(&i.id) {
            *val.entry(i.evasion).or_default() += 1;
        }
    }
    for (e, n) in total {
        let expected = n as f64 * (1.0 - ratio);
        let got = val.get(&e).copied().unwrap_or(0) as f64;
        ensure!((got - expected).abs() <= 1.0, "{e}: {got} validation rows, proportional share {expected:.2}");
    }
    Ok(())
}

fn synthetic_official_shape() -> Vec<TrainInstance> {
    // President counts as published; evasion counts chosen to sum to 3448.
    let presidents = [("Trump", 1325), ("Obama", 1010), ("Bush", 714), ("Biden", 399)];
    let evasion = [1052, 488, 708, 386, 379, 79, 145, 119, 92];
    let labels: Vec<EvasionLabel> = EvasionLabel::ALL.iter().zip(evasion).flat_map(|(e, n)| std::iter::repeat_n(*e, n)).collect();
    let names: Vec<&str> = presidents.iter().flat_map(|(p, n)| std::iter::repeat_n(*p, *n)).collect();
    assert_eq!((labels.len(), names.len()), (3448, 3448));
    // Interleave so every president sees every label.
    let mut order: Vec<usize> = (0..3448).collect();
    rng::shuffle(&mut order, &mut rng::seeded(3));
    labels
        .iter()
        .enumerate()
        .map(|(i, e)| TrainInstance {
            id: format!("s{i:05}"),
            question: "q".into(),
            answer: "a".into(),
            clarity: clarity_of(*e),
            evasion: *e,
            president: Some(names[order[i]].to_string()),
            date: None,
            multiple_questions: None,
            affirmative_question: None,
        })
        .collect()
}

fn split_president_disjoint() -> Outcome {
    let rows = synthetic_official_shape();
    let split = president_disjoint_split(&rows, 0.8).map_err(|e| e.to_string())?;
    let by_id: BTreeMap<&str, &str> = rows.iter().map(|r| (r.id.as_str(), r.president.as_deref().unwrap())).collect();
    let side = |ids: &BTreeSet<String>| ids.iter().map(|i| by_id[i.as_str()]).collect::<BTreeSet<_>>();
    let (tr, va) = (side(&split.train_ids), side(&split.val_ids));
    ensure!(tr.is_disjoint(&va), "president sets overlap: {:?}", tr.intersection(&va).collect::<Vec<_>>());
    ensure!(va == BTreeSet::from(["Bush"]), "validation presidents {va:?}");
    // Independent oracle: the validation share is Bush's count over the total.
    let oracle = 714.0 / 3448.0;
    let f = split.val_fraction();
    ensure!((f - oracle).abs() < 1e-12 && (f - 0.2071).abs() < 5e-5, "validation fraction {f}");
    ensure!(split.sizes() == (2734, 714), "sizes {:?}", split.sizes());
    Ok(format!("validation = {{Bush}}, fraction {f:.4}"))
}

fn split_stratified_shape() -> Outcome {
    let rows = synthetic_official_shape();
    let split = dual_stratified_split(&rows, 0.8, 42).map_err(|e| e.to_string())?;
    ensure!(split.sizes() == (2758, 690), "sizes {:?}", split.sizes());
    proportional_within_one(&rows, &split, 0.8)?;
    let again = dual_stratified_split(&rows, 0.8, 42).map_err(|e| e.to_string())?;
    ensure!(again == split, "split is not deterministic");
    Ok("(2758, 690), every evasion label within ±1".into())
}

fn split_official(dir: &std::path::Path) -> Outcome {
    let rows = load_training(&dir.join("train.jsonl")).map_err(|e| e.to_string())?;
    let split = dual_stratified_split(&rows, 0.8, 42).map_err(|e| e.to_string())?;
    ensure!(split.sizes() == (2758, 690), "sizes {:?}", split.sizes());
    proportional_within_one(&rows, &split, 0.8)?;
    let p = president_disjoint_split(&rows, 0.8).map_err(|e| e.to_string())?;
    let val: BTreeSet<&str> = rows.iter().filter(|r| p.val_ids.contains(&r.id)).filter_map(|r| r.president.as_deref()).collect();
    ensure!(val == BTreeSet::from(["Bush"]), "validation presidents {val:?}");
    ensure!((p.val_fraction() - 0.2071).abs() < 5e-5, "fraction {}", p.val_fraction());
    Ok("(2758, 690); president split {Bush} at 0.2071".into())
}

// ---------------------------------------------------------------- weights

fn weights() -> Outcome {
    let mut r = rng::seeded(2024);
    for trial in 0..100 {
        let family = if trial % 2 == 0 { LabelFamily::Clarity } else { LabelFamily::Evasion };
        let k = family.num_labels();
        let counts: Vec<u64> = (0..k).map(|_| 1 + rng::below(&mut r, 2000)).collect();
        let n: u64 = counts.iter().sum();

        let bal = compute_class_weights(&counts, family, WeightScheme::of(WeightKind::Balanced)).map_err(|e| e.to_string())?;
        for (w, c) in bal.weights.iter().zip(&counts) {
            let oracle = n as f64 / (k as f64 * *c as f64);
            ensure!((w - oracle).abs() <= 1e-9, "balanced weight {w} vs {oracle} for counts {counts:?}");
        }

        // Sparse vectors exercise the cap: empty classes would otherwise get 1e4.
        let mut sparse = counts.clone();
        if trial % 3 == 0 {
            sparse[trial % k] = 0;
        }
        let scheme = WeightScheme::of(WeightKind::Sqrt);
        let sq = compute_class_weights(&sparse, family, scheme).map_err(|e| e.to_string())?;
        let total: u64 = sparse.iter().sum();
        let raw: Vec<f64> = sparse
            .iter()
            .map(|&c| (1.0 / (c as f64 / total as f64 + scheme.epsilon).sqrt()).min(scheme.cap))
            .collect();
        let raw_mean = raw.iter().sum::<f64>() / k as f64;
        let mean = sq.weights.iter().sum::<f64>() / k as f64;
        ensure!((mean - 1.0).abs() <= 1e-9, "sqrt weights mean {mean}");
        for (w, r) in sq.weights.iter().zip(&raw) {
            ensure!(*r <= scheme.cap, "raw weight above cap");
            ensure!((w - r / raw_mean).abs() <= 1e-9, "sqrt weight {w} vs oracle {}", r / raw_mean);
        }

        let un = compute_class_weights(&counts, family, WeightScheme::of(WeightKind::Unweighted)).map_err(|e| e.to_string())?;
        ensure!(un.weights.iter().all(|&w| w == 1.0), "unweighted weights {:?}", un.weights);
    }
    Ok("100 random count vectors".into())
}

// ---------------------------------------------------------------- metrics

/// Brute-force per-class counting, independent of the library's tallies.
fn oracle_macro(pairs: &[(usize, usize)], k: usize) -> (f64, f64, f64) {
    let (mut sp, mut sr, mut sf) = (0.0, 0.0, 0.0);
    for c in 0..k {
        let tp = pairs.iter().filter(|(g, p)| *g == c && *p == c).count();
        let fp = pairs.iter().filter(|(g, p)| *g != c && *p == c).count();
        let fn_ = pairs.iter().filter(|(g, p)| *g == c && *p != c).count();
        let p = if tp + fp == 0 { 0.0 } else { tp as f64 / (tp + fp) as f64 };
        let r = if tp + fn_ == 0 { 0.0 } else { tp as f64 / (tp + fn_) as f64 };
        let f = if p + r == 0.0 { 0.0 } else { 2.0 * p * r / (p + r) };
        sp += p;
        sr += r;
        sf += f;
    }
    (sf / k as f64, sp / k as f64, sr / k as f64)
}

fn metrics() -> Outcome {
    let mut r = rng::seeded(99);
    for trial in 0..200 {
        let family = if trial % 2 == 0 { LabelFamily::Clarity } else { LabelFamily::Evasion };
        let k = family.num_labels();
        let n = 1 + rng::below(&mut r, 12) as usize;
        let pairs: Vec<(usize, usize)> = (0..n).map(|_| (rng::below(&mut r, k as u64) as usize, rng::below(&mut r, k as u64) as usize)).collect();
        let mut preds = PredictionSet::new("r", None, family);
        let mut golds = Golds::new();
        for (i, (g, p)) in pairs.iter().enumerate() {
            preds.insert(format!("i{i}"), Label::from_index(family, *p).unwrap()).unwrap();
            golds.insert(format!("i{i}"), Label::from_index(family, *g).unwrap());
        }
        let got = macro_prf(&preds, &golds).map_err(|e| e.to_string())?;
        let (f, p, rc) = oracle_macro(&pairs, k);
        ensure!(got.f1 == f && got.precision == p && got.recall == rc, "trial {trial}: {got:?} vs oracle ({f}, {p}, {rc})");
    }

    // golds [A,A,B], preds [A,B,B] over a two-label vocabulary.
    let hand = ClassCounts::from_pairs(&[(0, 0), (0, 1), (1, 1)], 2).macro_prf();
    ensure!((hand.f1 - 2.0 / 3.0).abs() < 1e-15, "hand case macro F1 {}", hand.f1);

    // anns [(X,X,Y),(X,Y,Z),(Y,Y,Y)], preds [Y,Z,X].
    use EvasionLabel::{Dodging as Z, Explicit as X, Implicit as Y};
    let anns = [[X, X, Y], [X, Y, Z], [Y, Y, Y]];
    let test: Vec<_> = anns
        .iter()
        .enumerate()
        .map(|(i, a)| clarity_core::dataset::TestInstance {
            id: format!("t{i}"),
            question: "q".into(),
            answer: "a".into(),
            clarity: clarity_of(a[0]),
            evasion_annotations: *a,
        })
        .collect();
    let mut preds = PredictionSet::new("r", None, LabelFamily::Evasion);
    for (i, p) in [Y, Z, X].iter().enumerate() {
        preds.insert(format!("t{i}"), (*p).into()).unwrap();
    }
    let s = evasion_eval(&preds, &test).map_err(|e| e.to_string())?;
    ensure!((s.acc_match - 2.0 / 3.0).abs() < 1e-15, "ACC_match {}", s.acc_match);
    // Annotator columns: A1 [X,X,Y], A2 [X,Y,Y], A3 [Y,Z,Y]. Only A3 has hits
    // (Y: P=1, R=1/2; Z: P=R=1), so F1_A3 = (2/3 + 1) / 9 = 5/27.
    let pred_idx = [Y.index(), Z.index(), X.index()];
    let mut want = [0.0; 3];
    for (k, w) in want.iter_mut().enumerate() {
        let pairs: Vec<(usize, usize)> = anns.iter().zip(pred_idx).map(|(a, p)| (a[k].index(), p)).collect();
        *w = oracle_macro(&pairs, 9).0;
    }
    ensure!(want[0] == 0.0 && want[1] == 0.0 && (want[2] - 5.0 / 27.0).abs() < 1e-15, "oracle gives {want:?}");
    for (k, (got, w)) in s.f1_annotators.iter().zip(want).enumerate() {
        ensure!((got - w).abs() < 1e-15, "F1_A{} = {got}, expected {w}", k + 1);
    }
    ensure!((s.f1_avg - want.iter().sum::<f64>() / 3.0).abs() < 1e-15, "F1_avg {}", s.f1_avg);

    // Row sums of normalised confusion matrices.
    for _ in 0..50 {
        let streams: Vec<Vec<(usize, usize)>> = (0..3)
            .map(|_| (0..20).map(|_| (rng::below(&mut r, 9) as usize, rng::below(&mut r, 9) as usize)).collect())
            .collect();
        let m = confusion_matrix(&streams, LabelFamily::Evasion, Normalize::Row);
        for (label, row) in m.labels.iter().zip(m.values()) {
            let sum: f64 = row.iter().sum();
            ensure!(m.zero_support_rows.contains(label) || (sum - 1.0).abs() <= 1e-9, "{label} row sums to {sum}");
        }
    }
    // golds [A,A,B], preds [A,B,B]: row A = (1/2, 1/2), row B = (0, 1).
    let m = confusion_matrix(&[vec![(0, 0), (0, 1), (1, 1)]], LabelFamily::Clarity, Normalize::Row);
    ensure!(m.values()[0][..2] == [0.5, 0.5] && m.values()[1][..2] == [0.0, 1.0], "hand confusion {:?}", m.values());
    // Counterexample: stream 1 has one Clear Reply row predicted correctly,
    // stream 2 three predicted Ambivalent. Counts first gives [1/4, 3/4];
    // normalising first would give [1/2, 1/2].
    let streams = vec![vec![(0, 0)], vec![(0, 1), (0, 1), (0, 1)]];
    let m = confusion_matrix(&streams, LabelFamily::Clarity, Normalize::Row);
    let row = &m.values()[0];
    ensure!(row[..2] == [0.25, 0.75], "averaging order gives {row:?}");
    Ok("200 random sets exact; hand cases; row sums; counts-then-normalise".into())
}

// ---------------------------------------------------------------- kappa

/// Textbook formula, written out independently.
fn kappa_oracle(table: &[Vec<usize>]) -> f64 {
    let n_items = table.len() as f64;
    let raters = table[0].iter().sum::<usize>() as f64;
    let cats = table[0].len();
    let p_j: Vec<f64> = (0..cats).map(|j| table.iter().map(|r| r[j] as f64).sum::<f64>() / (n_items * raters)).collect();
    let p_i: Vec<f64> = table
        .iter()
        .map(|r| (r.iter().map(|&c| (c * c) as f64).sum::<f64>() - raters) / (raters * (raters - 1.0)))
        .collect();
    let p_bar = p_i.iter().sum::<f64>() / n_items;
    let p_e: f64 = p_j.iter().map(|p| p * p).sum();
    (p_bar - p_e) / (1.0 - p_e)
}

fn kappa() -> Outcome {
    let full = vec![vec![3, 0, 0], vec![0, 3, 0], vec![0, 0, 3], vec![3, 0, 0]];
    ensure!(fleiss_kappa(&full).map_err(|e| e.to_string())? == 1.0, "full agreement is not 1");
    let table = vec![
        vec![0, 0, 0, 0, 14],
        vec![0, 2, 6, 4, 2],
        vec![0, 0, 3, 5, 6],
        vec![0, 3, 9, 2, 0],
        vec![2, 2, 8, 1, 1],
        vec![7, 7, 0, 0, 0],
        vec![3, 2, 6, 3, 0],
        vec![2, 5, 3, 2, 2],
        vec![6, 5, 2, 1, 0],
        vec![0, 2, 2, 3, 7],
    ];
    let got = fleiss_kappa(&table).map_err(|e| e.to_string())?;
    let oracle = kappa_oracle(&table);
    ensure!((got - oracle).abs() <= 1e-9, "kappa {got} vs oracle {oracle}");
    ensure!((oracle - 0.209_930_704_421_955_24).abs() <= 1e-12, "oracle drifted: {oracle}");
    // Ten items, three raters, mixed agreement.
    let small = vec![
        vec![3, 0, 0],
        vec![2, 1, 0],
        vec![0, 3, 0],
        vec![1, 1, 1],
        vec![0, 2, 1],
        vec![0, 0, 3],
        vec![2, 0, 1],
        vec![3, 0, 0],
        vec![0, 1, 2],
        vec![1, 2, 0],
    ];
    let got_small = fleiss_kappa(&small).map_err(|e| e.to_string())?;
    let oracle_small = kappa_oracle(&small);
    ensure!((got_small - oracle_small).abs() <= 1e-9, "3-rater kappa {got_small} vs oracle {oracle_small}");
    Ok(format!("14-rater kappa {got:.6}, 3-rater kappa {got_small:.6}"))
}

// ---------------------------------------------------------------- training

fn early_stopping_contract() -> Outcome {
    let rows = common::train_instances();
    let test = common::test_instances();
    let config = RunConfig { seeds: vec![13], ..RunConfig::default() };
    let split = dual_stratified_split(&rows, 0.8, 42).map_err(|e| e.to_string())?;
    let data = prepare_data(&config, &rows, &split, &test, None).map_err(|e| e.to_string())?;
    // Best at epoch 2; epoch 3 improves by less than the threshold; five
    // non-improving epochs (3..=7) stop the run.
    let script = [0.10, 0.30, 0.3005, 0.20, 0.25, 0.2995, 0.10, 0.90, 0.95];
    let mut epoch = 0;
    let mut metric = |_: &PredictionSet, _: &Golds| {
        epoch += 1;
        Ok(script[epoch - 1])
    };
    let mut backend = HashedLinearBackend::default();
    let o = train_seed(&config, &data, 13, &mut backend, &mut metric, "scripted").map_err(|e| e.to_string())?;
    ensure!(o.epochs_run == 7, "ran {} epochs", o.epochs_run);
    ensure!(o.best_epoch == 2 && o.best_val_f1 == 0.30, "best epoch {} score {}", o.best_epoch, o.best_val_f1);
    ensure!(o.checkpoint.epoch == 2, "checkpoint from epoch {}", o.checkpoint.epoch);
    // The reported validation predictions come from the restored checkpoint.
    let ids: Vec<&clarity_core::preprocessing::RenderedInput> = data.validation.iter().map(|e| &e.input).collect();
    backend.restore(&o.checkpoint).map_err(|e| e.to_string())?;
    let probs = backend.predict(&ids).map_err(|e| e.to_string())?;
    for ((id, label), p) in o.validation.iter().zip(&probs) {
        let best = p.iter().enumerate().fold((0, f64::NEG_INFINITY), |b, (i, &v)| if v > b.1 { (i, v) } else { b }).0;
        ensure!(label.index() == best, "validation prediction for {id} does not match the restored checkpoint");
    }
    Ok("stop after epoch 7, epoch 2 restored".into())
}

fn seed_aggregation() -> Outcome {
    let rows = common::train_instances();
    let test = common::test_instances();
    let config = RunConfig { target: Target::Evasion, seeds: vec![13, 21, 42], ..RunConfig::default() };
    let split = dual_stratified_split(&rows, 0.8, 42).map_err(|e| e.to_string())?;
    let mut backend = HashedLinearBackend::default();
    let result = train_run(&config, &rows, &split, &test, &mut backend, None, "seeds").map_err(|e| e.to_string())?;
    let seeds: Vec<u64> = result.per_seed.iter().map(|o| o.seed).collect();
    ensure!(seeds == [13, 21, 42], "per-seed results {seeds:?}");
    let v: Vec<f64> = result.per_seed.iter().map(|o| o.best_val_f1).collect();
    let mean = v.iter().sum::<f64>() / 3.0;
    let std = (v.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / 2.0).sqrt();
    ensure!((result.best_val_f1.mean - mean).abs() < 1e-12, "mean {} vs {mean}", result.best_val_f1.mean);
    ensure!(result.best_val_f1.std.is_some_and(|s| (s - std).abs() < 1e-12), "std {:?} vs {std}", result.best_val_f1.std);
    let report = result.report.ok_or("no test report")?;
    ensure!(report.per_seed.len() == 3, "report has {} seeds", report.per_seed.len());
    let f1s: Vec<f64> = report.per_seed.iter().map(|s| s.clarity.f1).collect();
    let agg = Aggregate::of(&f1s);
    ensure!(report.clarity.f1 == agg, "clarity aggregate {:?} vs {agg:?}", report.clarity.f1);
    Ok(format!("val F1 {mean:.3} ({std:.3})"))
}

fn stub_pipeline() -> Outcome {
    let fx = common::fixture();
    let cfg = common::write_config(fx.dir.path(), "exp.toml", &common::fine_tune_toml("gate", &[13, 21, 42], "evasion"));
    let config = ExperimentConfig::load(&cfg).map_err(|e| e.to_string())?;
    let out = run_config(&config, false).map_err(|e| e.to_string())?;
    for s in [13, 21, 42] {
        ensure!(out.run_dir.join(format!("seed-{s}")).is_dir(), "seed-{s} missing");
    }
    ensure!(out.run_dir.join("metrics.json").is_file() && out.run_dir.join("manifest.json").is_file(), "report or manifest missing");
    Ok(format!("200 instances, 3 seeds, evasion F1_avg {:.3}", out.report.evasion.map(|e| e.f1_avg.mean).unwrap_or(f64::NAN)))
}

// ---------------------------------------------------------------- zero-shot

fn zero_shot() -> Outcome {
    use sha2::{Digest, Sha256};
    let digest: String = Sha256::digest(SYSTEM_PROMPT.as_bytes()).iter().map(|b| format!("{b:02x}")).collect();
    ensure!(digest == "d7b3336b558b3b3b0a2b8b3a4cf6dedd854ee7383e7b5a1ae9e336f0ec40c1b8", "prompt hash {digest}");
    ensure!(PromptTemplate::pinned().is_ok(), "pinned prompt rejected");
    let edited = SYSTEM_PROMPT.replacen("ONLY", "only", 1);
    ensure!(matches!(PromptTemplate::from_text(&edited, 20), Err(ZeroShotError::PromptHashMismatch { .. })), "edited prompt accepted");

    let ok = parse_response(r#"{"labels": ["Explicit", "Partial/half-answer"]}"#, 2).map_err(|e| e.to_string())?;
    ensure!(ok == [EvasionLabel::Explicit, EvasionLabel::Partial], "parsed {ok:?}");
    let fenced = parse_response("```json\n{\"labels\": [\"Dodging\"]}\n```", 1).map_err(|e| e.to_string())?;
    ensure!(fenced == [EvasionLabel::Dodging], "fenced parse {fenced:?}");
    ensure!(matches!(parse_response(r#"{"labels": ["Explicit"]}"#, 2), Err(ZeroShotError::LengthMismatch { expected: 2, got: 1 })), "length mismatch accepted");
    ensure!(matches!(parse_response(r#"{"labels": ["Waffling"]}"#, 1), Err(ZeroShotError::UnknownLabel { .. })), "unknown label accepted");

    let test = common::test_instances();
    let template = PromptTemplate::pinned().map_err(|e| e.to_string())?;
    let config = ZeroShotConfig {
        retry: RetryPolicy { max_attempts: 3, initial_backoff_ms: 0, ..RetryPolicy::default() },
        ..ZeroShotConfig::default()
    };
    let failing = ScriptedBackend::new((0..10).map(|_| Err("HTTP 503".to_string())));
    match classify_dataset(&test[..5], &failing, &template, &config, None, "zs") {
        Err(ZeroShotError::ExhaustedRetries { attempts: 3, .. }) => {}
        other => return Err(format!("expected exhausted retries, got {:?}", other.map(|o| o.evasion.len()))),
    }
    ensure!(failing.calls() == 3, "{} calls before giving up", failing.calls());

    let out = classify_dataset(&test, &KeywordBackend, &template, &config, None, "zs").map_err(|e| e.to_string())?;
    ensure!(out.evasion.len() == test.len(), "{} predictions", out.evasion.len());
    for (id, l) in out.evasion.iter() {
        ensure!(out.clarity.get(id) == Some(clarity_of(l.as_evasion().unwrap()).into()), "derived clarity differs for {id}");
    }
    Ok("prompt hash pinned; parser, retry and derivation checks".into())
}

// ---------------------------------------------------------------- ensemble

fn member(name: &str, labels: &[EvasionLabel]) -> PredictionSet {
    let mut p = PredictionSet::new(name, None, LabelFamily::Evasion);
    for (i, l) in labels.iter().enumerate() {
        p.insert(format!("i{i}"), (*l).into()).unwrap();
    }
    p
}

fn ensemble() -> Outcome {
    let mut r = rng::seeded(5);
    let train = common::train_instances();
    let prior = class_distribution(&train, LabelFamily::Evasion).map_err(|e| e.to_string())?;
    for trial in 0..60 {
        let m = 2 + rng::below(&mut r, 5) as usize;
        let members: Vec<PredictionSet> = (0..m)
            .map(|j| member(&format!("m{j}"), &(0..15).map(|_| EvasionLabel::ALL[rng::below(&mut r, 9) as usize]).collect::<Vec<_>>()))
            .collect();
        let tie_break = if trial % 2 == 0 { TieBreak::FrequencyPrior } else { TieBreak::FixedLabelOrder };
        let spec = EnsembleSpec { members: (0..m).map(|j| format!("m{j}")).collect(), tie_break, family: LabelFamily::Evasion };
        let base = majority_vote_ensemble(&members, &spec, Some(&prior)).map_err(|e| e.to_string())?;
        let mut shuffled = members.clone();
        rng::shuffle(&mut shuffled, &mut r);
        let other = majority_vote_ensemble(&shuffled, &spec, Some(&prior)).map_err(|e| e.to_string())?;
        ensure!(base.predictions == other.predictions, "trial {trial}: member order changed the vote");
        let same: Vec<PredictionSet> = (0..m).map(|_| members[0].clone()).collect();
        let id = majority_vote_ensemble(&same, &spec, Some(&prior)).map_err(|e| e.to_string())?;
        ensure!(id.predictions.iter().eq(members[0].iter()), "identical members did not reproduce themselves");
    }

    use EvasionLabel::*;
    // Dodging (30 training rows) ties Explicit (40): the prior picks Explicit;
    // Deflection (20) ties Clarification (15): the prior picks Deflection,
    // fixed order also picks Deflection (earlier in the taxonomy).
    let a = member("a", &[Dodging, Clarification]);
    let b = member("b", &[Explicit, Deflection]);
    let spec = |t| EnsembleSpec { members: vec!["a".into(), "b".into()], tie_break: t, family: LabelFamily::Evasion };
    for _ in 0..2 {
        let fp = majority_vote_ensemble(&[a.clone(), b.clone()], &spec(TieBreak::FrequencyPrior), Some(&prior)).map_err(|e| e.to_string())?;
        ensure!(fp.predictions.get("i0") == Some(Explicit.into()) && fp.predictions.get("i1") == Some(Deflection.into()), "frequency prior tie-break");
        ensure!(fp.manifest.ties == 2, "tie count {}", fp.manifest.ties);
        let fixed = majority_vote_ensemble(&[b.clone(), a.clone()], &spec(TieBreak::FixedLabelOrder), Some(&prior)).map_err(|e| e.to_string())?;
        ensure!(fixed.predictions.get("i0") == Some(Explicit.into()) && fixed.predictions.get("i1") == Some(Deflection.into()), "fixed-order tie-break");
    }
    let c = member("c", &[Clarification, Implicit]);
    let d = member("d", &[Implicit, Clarification]);
    let fixed = majority_vote_ensemble(&[c, d], &spec(TieBreak::FixedLabelOrder), None).map_err(|e| e.to_string())?;
    ensure!(fixed.predictions.get("i0") == Some(Implicit.into()), "fixed order picked {:?}", fixed.predictions.get("i0"));
    Ok("60 random permutation trials; constructed ties".into())
}

// ---------------------------------------------------------------- I/O

fn io_round_trips() -> Outcome {
    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    let test = common::test_instances();
    let out = classify_dataset(&test, &KeywordBackend, &PromptTemplate::pinned().unwrap(), &ZeroShotConfig::default(), None, "io")
        .map_err(|e| e.to_string())?;
    for (format, ext) in [(PredictionFormat::Csv, "csv"), (PredictionFormat::Jsonl, "jsonl")] {
        let p1 = dir.path().join(format!("a.{ext}"));
        let p2 = dir.path().join(format!("b.{ext}"));
        out.evasion.write(format, &p1).map_err(|e| e.to_string())?;
        let back = PredictionSet::read(&p1, format, LabelFamily::Evasion, "io", None).map_err(|e| e.to_string())?;
        ensure!(back == out.evasion, "{ext} prediction round trip changed the set");
        back.write(format, &p2).map_err(|e| e.to_string())?;
        ensure!(std::fs::read(&p1).unwrap() == std::fs::read(&p2).unwrap(), "{ext} prediction bytes differ");
    }

    let rows = common::train_instances();
    let split = dual_stratified_split(&rows, 0.8, 42).map_err(|e| e.to_string())?;
    let sp = dir.path().join("split.json");
    split.save(&sp).map_err(|e| e.to_string())?;
    let loaded = SplitAssignment::load(&sp).map_err(|e| e.to_string())?;
    ensure!(loaded == split && loaded.to_json() + "\n" == std::fs::read_to_string(&sp).unwrap(), "split round trip");

    let report = MetricsReport::build(
        "io",
        &[SeedPredictions { seed: None, clarity: out.clarity.clone(), evasion: Some(out.evasion.clone()) }],
        &test,
    )
    .map_err(|e| e.to_string())?;
    let text = report.to_json();
    ensure!(MetricsReport::from_json(&text).map_err(|e| e.to_string())?.to_json() == text, "report bytes differ");

    let fx = common::fixture();
    let cfg = common::write_config(fx.dir.path(), "zs.toml", &common::zero_shot_toml("io"));
    let run = run_config(&ExperimentConfig::load(&cfg).unwrap(), false).map_err(|e| e.to_string())?;
    let on_disk = std::fs::read_to_string(run.run_dir.join("manifest.json")).unwrap();
    let parsed = RunManifest::from_json(&on_disk).map_err(|e| e.to_string())?;
    ensure!(parsed.to_json() == on_disk && parsed == run.manifest, "manifest bytes differ");
    Ok("predictions (csv, jsonl), split, report, manifest".into())
}

fn main() {
    let mut gate = Gate { results: Vec::new() };
    let secs = Duration::from_secs;
    gate.check("Taxonomy mappings and round trips", Some(secs(1)), taxonomy);
    match data_dir() {
        Some(d) => {
            gate.check("Dataset statistics (public data)", Some(secs(10)), || dataset_statistics(&d));
            gate.check("Splitting on the official training file", Some(secs(5)), || split_official(&d));
        }
        None => {
            let why = "CLARITY_DATA_DIR not set; the public dataset is not bundled";
            gate.skip("Dataset statistics (public data)", why);
            gate.skip("Splitting on the official training file", why);
        }
    }
    gate.check("Splitting: president-disjoint on published president counts", Some(secs(5)), split_president_disjoint);
    gate.check("Splitting: dual-stratified 80/20 on a 3448-row set", Some(secs(5)), split_stratified_shape);
    gate.check("Class weights against formula oracles", Some(secs(1)), weights);
    gate.check("Metrics against brute-force oracle", Some(secs(5)), metrics);
    gate.check("Fleiss' kappa", Some(secs(1)), kappa);
    gate.check("Training: scripted early stop restores best checkpoint", None, early_stopping_contract);
    gate.check("Training: three seeds with mean and sample std", None, seed_aggregation);
    gate.check("Training: stub pipeline on 200 instances", Some(secs(60)), stub_pipeline);
    gate.check("Zero-shot protocol with mock backends", Some(secs(5)), zero_shot);
    gate.check("Ensemble voting properties", None, ensemble);
    gate.check("Byte-deterministic round trips", None, io_round_trips);

    let count = |pred: fn(&Status) -> bool| gate.results.iter().filter(|(_, s)| pred(s)).count();
    let (pass, fail, skip) = (count(|s| matches!(s, Status::Pass)), count(|s| matches!(s, Status::Fail)), count(|s| matches!(s, Status::Skip)));
    println!("acceptance: {pass} passed, {fail} failed, {skip} skipped");
    if fail > 0 {
        std::process::exit(1);
    }
}
