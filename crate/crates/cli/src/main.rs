use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};

use clarity_cli::commands::{self, EnsembleArgs, SplitArgs};
use clarity_cli::config::{ExperimentConfig, Mode};
use clarity_cli::experiment::run_config;
use clarity_cli::CliError;
use clarity_core::dataset::InconsistencyPolicy;
use clarity_core::ensemble::TieBreak;
use clarity_core::evaluation::MetricsReport;
use clarity_core::predictions::PredictionFormat;
use clarity_core::splitting::{SparseLabelPolicy, SplitRegime};
use clarity_core::taxonomy::LabelFamily;

#[derive(Parser)]
#[command(name = "clarity", version, about = "Response clarity and evasion classification toolkit")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, ValueEnum)]
enum Family {
    Clarity,
    Evasion,
}

impl From<Family> for LabelFamily {
    fn from(f: Family) -> Self {
        match f {
            Family::Clarity => LabelFamily::Clarity,
            Family::Evasion => LabelFamily::Evasion,
        }
    }
}

#[derive(Clone, Copy, ValueEnum)]
enum Regime {
    Stratified,
    PresidentDisjoint,
}

#[derive(Clone, Copy, ValueEnum)]
enum Tie {
    FrequencyPrior,
    FixedLabelOrder,
}

#[derive(Clone, Copy, ValueEnum)]
enum Format {
    Csv,
    Jsonl,
}

#[derive(Clone, Copy, ValueEnum)]
enum Split {
    Train,
    Test,
}

#[derive(Subcommand)]
enum Command {
    /// Run an experiment config (fine-tuning or zero-shot).
    Run {
        #[arg(long)]
        config: PathBuf,
        /// Overwrite an existing run directory.
        #[arg(long)]
        force: bool,
    },
    /// Run a fine-tuning config.
    Train {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        force: bool,
    },
    /// Run a zero-shot config.
    Zeroshot {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        force: bool,
    },
    /// Write a train/validation split file.
    Split {
        #[arg(long)]
        train: PathBuf,
        #[arg(long, value_enum, default_value = "stratified")]
        regime: Regime,
        /// Fraction of instances kept for training.
        #[arg(long, default_value_t = 0.8)]
        ratio: f64,
        #[arg(long, default_value_t = 42)]
        seed: u64,
        /// Keep labels too rare to stratify in the training side instead of failing.
        #[arg(long)]
        allow_sparse: bool,
        #[arg(long)]
        warn_inconsistent: bool,
        #[arg(long)]
        out: PathBuf,
    },
    /// Score prediction files (one per seed) against the test set.
    Evaluate {
        #[arg(long)]
        test: PathBuf,
        #[arg(long, value_enum)]
        family: Family,
        #[arg(long = "predictions", required = true, num_args = 1..)]
        predictions: Vec<PathBuf>,
        #[arg(long, default_value = "evaluation")]
        run_id: String,
        /// Directory for metrics.json, metrics.txt and plots.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Majority-vote several prediction files.
    Ensemble {
        #[arg(long, value_enum, default_value = "evasion")]
        family: Family,
        #[arg(long = "predictions", required = true, num_args = 2..)]
        predictions: Vec<PathBuf>,
        #[arg(long, value_enum, default_value = "frequency-prior")]
        tie_break: Tie,
        /// Training file supplying label frequencies for tie-breaking.
        #[arg(long)]
        train: Option<PathBuf>,
        #[arg(long, value_enum, default_value = "csv")]
        format: Format,
        #[arg(long)]
        out: PathBuf,
    },
    /// Render plots and text from a metrics.json file.
    Report {
        #[arg(long)]
        metrics: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Write a submission file in test-set order.
    SubmitFile {
        #[arg(long)]
        predictions: PathBuf,
        #[arg(long, value_enum, default_value = "clarity")]
        family: Family,
        /// Test file used to check coverage and order.
        #[arg(long)]
        test: Option<PathBuf>,
        /// Output path; `.csv` or `.jsonl` selects the format.
        #[arg(long)]
        out: PathBuf,
    },
    /// Convert an upstream CSV/JSON export to canonical JSONL.
    Import {
        #[arg(long)]
        input: PathBuf,
        #[arg(long, value_enum)]
        split: Split,
        #[arg(long)]
        warn_inconsistent: bool,
        #[arg(long)]
        out: PathBuf,
    },
    /// Label distributions, majority-label coverage and annotator agreement.
    Stats {
        #[arg(long)]
        train: Option<PathBuf>,
        #[arg(long)]
        test: Option<PathBuf>,
        #[arg(long)]
        warn_inconsistent: bool,
    },
}

fn policy(warn: bool) -> InconsistencyPolicy {
    if warn {
        InconsistencyPolicy::WarnAndKeep
    } else {
        InconsistencyPolicy::Fail
    }
}

fn run_mode(config: &Path, force: bool, expect: Option<Mode>) -> Result<(), CliError> {
    let config = ExperimentConfig::load(config)?;
    if let Some(m) = expect.filter(|m| *m != config.mode) {
        return Err(CliError::Config(format!("config mode is {:?}, this subcommand expects {m:?}", config.mode)));
    }
    let outcome = run_config(&config, force)?;
    print!("{}", outcome.report.render_text());
    println!("run directory: {}", outcome.run_dir.display());
    Ok(())
}

fn execute(cmd: Command) -> Result<(), CliError> {
    match cmd {
        Command::Run { config, force } => run_mode(&config, force, None),
        Command::Train { config, force } => run_mode(&config, force, Some(Mode::FineTune)),
        Command::Zeroshot { config, force } => run_mode(&config, force, Some(Mode::ZeroShot)),
        Command::Split { train, regime, ratio, seed, allow_sparse, warn_inconsistent, out } => {
            let args = SplitArgs {
                train: &train,
                regime: match regime {
                    Regime::Stratified => SplitRegime::Stratified,
                    Regime::PresidentDisjoint => SplitRegime::PresidentDisjoint,
                },
                ratio,
                seed,
                sparse: if allow_sparse { SparseLabelPolicy::WarnAndProceed } else { SparseLabelPolicy::Fail },
                inconsistency: policy(warn_inconsistent),
            };
            let s = commands::split(&args, &out)?;
            println!("{} train / {} validation -> {}", s.train_ids.len(), s.val_ids.len(), out.display());
            Ok(())
        }
        Command::Evaluate { test, family, predictions, run_id, out } => {
            let report = commands::evaluate(&test, family.into(), &predictions, &run_id)?;
            print!("{}", report.render_text());
            if let Some(out) = out {
                commands::write_report_files(&report, &out)?;
            }
            Ok(())
        }
        Command::Ensemble { family, predictions, tie_break, train, format, out } => {
            let args = EnsembleArgs {
                family: family.into(),
                members: &predictions,
                tie_break: match tie_break {
                    Tie::FrequencyPrior => TieBreak::FrequencyPrior,
                    Tie::FixedLabelOrder => TieBreak::FixedLabelOrder,
                },
                train: train.as_deref(),
                format: match format {
                    Format::Csv => PredictionFormat::Csv,
                    Format::Jsonl => PredictionFormat::Jsonl,
                },
            };
            let m = commands::ensemble(&args, &out)?;
            println!("{} instances, {} ties -> {}", m.instances, m.ties, out.display());
            Ok(())
        }
        Command::Report { metrics, out } => {
            let text = std::fs::read_to_string(&metrics).map_err(CliError::io(&metrics))?;
            let report = MetricsReport::from_json(&text)?;
            print!("{}", report.render_text());
            for p in commands::write_report_files(&report, &out)? {
                println!("{}", p.display());
            }
            Ok(())
        }
        Command::SubmitFile { predictions, family, test, out } => {
            let n = commands::submit_file(&predictions, family.into(), test.as_deref(), &out)?;
            println!("{n} predictions -> {}", out.display());
            Ok(())
        }
        Command::Import { input, split, warn_inconsistent, out } => {
            let n = commands::import(&input, matches!(split, Split::Test), policy(warn_inconsistent), &out)?;
            println!("{n} instances -> {}", out.display());
            Ok(())
        }
        Command::Stats { train, test, warn_inconsistent } => {
            if train.is_none() && test.is_none() {
                return Err(CliError::Config("pass --train and/or --test".into()));
            }
            let s = commands::stats(train.as_deref(), test.as_deref(), policy(warn_inconsistent))?;
            print!("{}", commands::stats_json(&s));
            Ok(())
        }
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    match execute(Cli::parse().command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}
