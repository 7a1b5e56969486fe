mod common;

use std::io::{BufRead, BufReader, Read, Write};
use std::net::TcpListener;
use std::path::Path;
use std::process::Command;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Arc;

use clarity_cli::config::ExperimentConfig;
use clarity_cli::experiment::run_config;
use clarity_cli::CliError;
use clarity_core::predictions::{PredictionFormat, PredictionSet};
use clarity_core::splitting::SplitAssignment;
use clarity_core::taxonomy::LabelFamily;
use clarity_core::zeroshot::ZeroShotError;

use common::*;

fn clarity(args: &[&str], cwd: &Path) -> (bool, String, String) {
    let out = Command::new(env!("CARGO_BIN_EXE_clarity"))
        .args(args)
        .current_dir(cwd)
        .env("RUST_LOG", "warn")
        .output()
        .unwrap();
    (
        out.status.success(),
        String::from_utf8_lossy(&out.stdout).into_owned(),
        String::from_utf8_lossy(&out.stderr).into_owned(),
    )
}

#[test]
fn split_stats_and_submission_from_the_command_line() {
    let fx = fixture();
    let cwd = fx.dir.path();

    let (ok, stdout, stderr) = clarity(&["split", "--train", "data/train.jsonl", "--out", "split.json"], cwd);
    assert!(ok, "{stderr}");
    assert!(stdout.starts_with("160 train / 40 validation"), "{stdout}");
    let s = SplitAssignment::load(&cwd.join("split.json")).unwrap();
    assert_eq!(s.sizes(), (160, 40));
    let first = std::fs::read(cwd.join("split.json")).unwrap();
    clarity(&["split", "--train", "data/train.jsonl", "--out", "split.json"], cwd);
    assert_eq!(std::fs::read(cwd.join("split.json")).unwrap(), first);

    let (ok, _, _) = clarity(&["split", "--train", "data/train.jsonl", "--regime", "president-disjoint", "--out", "p.json"], cwd);
    assert!(ok);
    let p = SplitAssignment::load(&cwd.join("p.json")).unwrap();
    assert_eq!(p.seed, None);

    let (ok, stdout, _) = clarity(&["stats", "--train", "data/train.jsonl", "--test", "data/test.jsonl"], cwd);
    assert!(ok);
    let v: serde_json::Value = serde_json::from_str(&stdout).unwrap();
    assert_eq!(v["train_instances"], 200);
    assert_eq!(v["test_instances"], 54);
    assert_eq!(v["test_majority_evasion"], 54);
    assert!(v["test_fleiss_kappa"].as_f64().unwrap() < 1.0);

    let cfg = write_config(cwd, "zs.toml", &zero_shot_toml("zs"));
    let (ok, stdout, stderr) = clarity(&["zeroshot", "--config", cfg.to_str().unwrap()], cwd);
    assert!(ok, "{stderr}");
    assert!(stdout.contains("run directory"));
    let (ok, _, stderr) = clarity(&["zeroshot", "--config", cfg.to_str().unwrap()], cwd);
    assert!(!ok);
    assert!(stderr.contains("--force"), "{stderr}");
    let (ok, _, stderr) = clarity(&["train", "--config", cfg.to_str().unwrap()], cwd);
    assert!(!ok);
    assert!(stderr.contains("expects FineTune"), "{stderr}");

    let preds = "runs/zs/predictions_clarity.csv";
    let (ok, _, stderr) = clarity(&["submit-file", "--predictions", preds, "--test", "data/test.jsonl", "--out", "submission.csv"], cwd);
    assert!(ok, "{stderr}");
    let body = std::fs::read_to_string(cwd.join("submission.csv")).unwrap();
    assert_eq!(body.lines().count(), 55);
    assert_eq!(body.lines().next(), Some("id,label"));

    let (ok, stdout, _) = clarity(&["evaluate", "--test", "data/test.jsonl", "--family", "evasion", "--predictions", "runs/zs/predictions_evasion.csv", "--out", "eval"], cwd);
    assert!(ok);
    assert!(stdout.contains("ACC_match"));
    assert!(cwd.join("eval/plots/confusion_evasion.svg").is_file());

    let (ok, stdout, _) = clarity(&["report", "--metrics", "runs/zs/metrics.json", "--out", "rep"], cwd);
    assert!(ok);
    assert!(stdout.contains("distribution.svg"));
}

#[test]
fn ensemble_subcommand_votes_over_files() {
    let fx = fixture();
    let cwd = fx.dir.path();
    let ids = ["a", "b", "c"];
    let write = |name: &str, labels: [&str; 3]| {
        let body: String = std::iter::once("id,label".to_string())
            .chain(ids.iter().zip(labels).map(|(i, l)| format!("{i},{l}")))
            .collect::<Vec<_>>()
            .join("\n");
        std::fs::write(cwd.join(name), body + "\n").unwrap();
    };
    write("m1.csv", ["Explicit", "General", "Dodging"]);
    write("m2.csv", ["Explicit", "Dodging", "Dodging"]);
    write("m3.csv", ["Implicit", "General", "Clarification"]);
    let (ok, stdout, stderr) = clarity(
        &["ensemble", "--predictions", "m1.csv", "m2.csv", "m3.csv", "--train", "data/train.jsonl", "--out", "ens"],
        cwd,
    );
    assert!(ok, "{stderr}");
    assert!(stdout.starts_with("3 instances, 0 ties"));
    let out = PredictionSet::read(&cwd.join("ens/predictions_evasion.csv"), PredictionFormat::Csv, LabelFamily::Evasion, "e", None).unwrap();
    let labels: Vec<String> = out.iter().map(|(_, l)| l.display_name().to_string()).collect();
    assert_eq!(labels, ["Explicit", "General", "Dodging"]);
    let clar = std::fs::read_to_string(cwd.join("ens/predictions_clarity.csv")).unwrap();
    assert_eq!(clar, "id,label\na,Clear Reply\nb,Ambivalent\nc,Ambivalent\n");
    let manifest: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(cwd.join("ens/ensemble_manifest.json")).unwrap()).unwrap();
    assert_eq!(manifest["used_training_distribution"], true);

    let (ok, _, stderr) = clarity(&["ensemble", "--predictions", "m1.csv", "--out", "ens2"], cwd);
    assert!(!ok);
    assert!(stderr.contains("2 values") || stderr.contains("at least"), "{stderr}");
}

#[test]
fn import_converts_upstream_rows() {
    let dir = tempfile::tempdir().unwrap();
    let raw = dir.path().join("raw.csv");
    std::fs::write(
        &raw,
        "index,interview_question,interview_answer,clarity_label,evasion_label,president\n\
         0,Will you?,Yes.,Clear Reply,Explicit,Obama\n\
         1,Why not?,Next question.,Ambivalent,Dodging,Bush\n",
    )
    .unwrap();
    let (ok, stdout, stderr) = clarity(&["import", "--input", "raw.csv", "--split", "train", "--out", "train.jsonl"], dir.path());
    assert!(ok, "{stderr}");
    assert!(stdout.starts_with("2 instances"));
    let rows = clarity_core::dataset::load_training(&dir.path().join("train.jsonl")).unwrap();
    assert_eq!(rows[1].president.as_deref(), Some("Bush"));
}

/// Minimal chat-completions endpoint: answers with `reply(request_number, user_text)`.
fn serve(reply: impl Fn(usize, &str) -> Option<String> + Send + Sync + 'static) -> (String, Arc<AtomicUsize>) {
    let listener = TcpListener::bind("127.0.0.1:0").unwrap();
    let url = format!("http://{}", listener.local_addr().unwrap());
    let hits = Arc::new(AtomicUsize::new(0));
    let counter = hits.clone();
    std::thread::spawn(move || {
        for stream in listener.incoming() {
            let mut stream = stream.unwrap();
            let mut reader = BufReader::new(stream.try_clone().unwrap());
            let mut len = 0usize;
            loop {
                let mut line = String::new();
                reader.read_line(&mut line).unwrap();
                if line == "\r\n" || line.is_empty() {
                    break;
                }
                if let Some(v) = line.to_ascii_lowercase().strip_prefix("content-length:") {
                    len = v.trim().parse().unwrap();
                }
            }
            let mut body = vec![0; len];
            reader.read_exact(&mut body).unwrap();
            let req: serde_json::Value = serde_json::from_slice(&body).unwrap();
            let user = req["messages"][1]["content"].as_str().unwrap_or_default().to_string();
            let n = counter.fetch_add(1, Ordering::SeqCst);
            let (status, payload) = match reply(n, &user) {
                Some(content) => ("200 OK", serde_json::json!({"choices": [{"message": {"content": content}}]}).to_string()),
                None => ("500 Internal Server Error", "{}".to_string()),
            };
            let _ = write!(stream, "HTTP/1.1 {status}\r\nContent-Type: application/json\r\nContent-Length: {}\r\nConnection: close\r\n\r\n{payload}", payload.len());
        }
    });
    (url, hits)
}

#[test]
fn zero_shot_resumes_after_exhausted_retries() {
    let fx = fixture();
    // Two batches of 27. Request 0 labels batch 0; requests 1-3 fail batch 1;
    // the rerun's request 4 labels batch 1.
    let (url, hits) = serve(|n, _| match n {
        1..=3 => None,
        _ => {
            let labels = vec!["General"; 27];
            Some(serde_json::json!({ "labels": labels }).to_string())
        }
    });
    let text = format!(
        r#"run_id = "remote"
mode = "zero_shot"
output_dir = "runs"

[data]
test = "data/test.jsonl"

[zeroshot]
batch_size = 27

[zeroshot.retry]
max_attempts = 3
initial_backoff_ms = 0

[chat]
kind = "openai_compatible"
base_url = "{url}"
model = "stub-model"
api_key_env = "CLARITY_TEST_UNSET_KEY"
"#
    );
    let cfg = write_config(fx.dir.path(), "remote.toml", &text);
    let config = ExperimentConfig::load(&cfg).unwrap();
    match run_config(&config, false) {
        Err(CliError::Stage { source, .. }) => match *source {
            CliError::ZeroShot(ZeroShotError::ExhaustedRetries { batch, attempts, .. }) => {
                assert_eq!((batch, attempts), (1, 3));
            }
            other => panic!("unexpected inner error {other:?}"),
        },
        other => panic!("expected exhausted retries, got {other:?}"),
    }
    let dir = config.run_dir();
    assert!(dir.join("partial/evasion.jsonl").is_file());
    assert!(!dir.join("manifest.json").exists());
    assert_eq!(hits.load(Ordering::SeqCst), 4);

    let outcome = run_config(&config, false).unwrap();
    assert_eq!(hits.load(Ordering::SeqCst), 5, "only the failed batch is re-sent");
    let preds = PredictionSet::read(&dir.join("predictions_evasion.csv"), PredictionFormat::Csv, LabelFamily::Evasion, "r", None).unwrap();
    assert_eq!(preds.len(), 54);
    assert!(!dir.join("partial").exists());
    let transcripts = std::fs::read_to_string(dir.join("transcripts.jsonl")).unwrap();
    assert_eq!(transcripts.lines().count(), 3);
    assert_eq!(outcome.manifest.backend, "openai-compatible:stub-model");
    assert_eq!(outcome.manifest.backend_parameters["temperature"], 0.0);
    assert!(outcome.report.training_distribution.is_empty());
}
