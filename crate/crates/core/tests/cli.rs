//! End-to-end runs of the `cultureclip` binary: every subcommand, the exit
//! code contract, and the machine-readable `--json` mode.

use std::path::{Path, PathBuf};
use std::process::{Command, Output};
use std::sync::OnceLock;

use tempfile::TempDir;

const BIN: &str = env!("CARGO_BIN_EXE_cultureclip");

fn candidates_path() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("fixtures/raw_concepts.jsonl")
}

fn run(args: &[&str]) -> Output {
    Command::new(BIN)
        .args(args)
        .env_remove("BACKEND_URL")
        .env_remove("BACKEND_TOKEN")
        .output()
        .expect("binary should spawn")
}

fn code(output: &Output) -> i32 {
    output.status.code().expect("no exit code (signal?)")
}

fn stdout_json(output: &Output) -> serde_json::Value {
    let text = String::from_utf8_lossy(&output.stdout);
    let line = text.trim();
    assert!(
        !line.contains('\n'),
        "--json should print a single line, got:\n{text}"
    );
    serde_json::from_str(line).unwrap_or_else(|e| panic!("stdout not JSON ({e}):\n{text}"))
}

/// One curated mock dataset shared by the train/eval/inspect tests. The
/// directory lives for the whole test process.
struct CuratedFixture {
    _dir: TempDir,
    cards: PathBuf,
}

fn curated() -> &'static CuratedFixture {
    static FIXTURE: OnceLock<CuratedFixture> = OnceLock::new();
    FIXTURE.get_or_init(|| {
        let dir = TempDir::new().unwrap();
        let cards = dir.path().join("cards.jsonl");
        let candidates = candidates_path();
        let output = run(&[
            "curate",
            "--out",
            cards.to_str().unwrap(),
            "--candidates",
            candidates.to_str().unwrap(),
            "--source",
            "bottom_up",
            "--captions",
            "3",
            "--seed",
            "17",
        ]);
        assert_eq!(
            code(&output),
            0,
            "fixture curation failed:\n{}",
            String::from_utf8_lossy(&output.stderr)
        );
        CuratedFixture { _dir: dir, cards }
    })
}

#[test]
fn curate_with_config_file_emits_cards_and_summary() {
    let dir = TempDir::new().unwrap();
    let cfg_path = dir.path().join("run.json");
    std::fs::write(
        &cfg_path,
        r#"{"curate": {"source": "top_down", "countries": ["China"], "categories": ["Cuisine"], "captions_per_concept": 2, "seed": 5}}"#,
    )
    .unwrap();
    let out = dir.path().join("cards.jsonl");
    let output = run(&[
        "--json",
        "--config",
        cfg_path.to_str().unwrap(),
        "curate",
        "--out",
        out.to_str().unwrap(),
    ]);
    assert_eq!(
        code(&output),
        0,
        "stderr: {}",
        String::from_utf8_lossy(&output.stderr)
    );
    let value = stdout_json(&output);
    assert_eq!(value["cards"], 2);
    assert_eq!(value["summary"]["cards_emitted"], 2);

    let cards_text = std::fs::read_to_string(&out).unwrap();
    assert_eq!(cards_text.lines().count(), 2);
    let summary_path = dir.path().join("cards.summary.json");
    let summary: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(summary_path).unwrap()).unwrap();
    assert_eq!(summary["cards_emitted"], 2);
    // stderr carries the resolved config for the run
    let stderr = String::from_utf8_lossy(&output.stderr);
    assert!(stderr.contains("resolved curate config"), "stderr: {stderr}");
    assert!(stderr.contains("\"captions_per_concept\":2"), "stderr: {stderr}");
}

#[test]
fn curate_rejecting_judge_exits_four() {
    let dir = TempDir::new().unwrap();
    let out = dir.path().join("cards.jsonl");
    let output = run(&[
        "curate",
        "--out",
        out.to_str().unwrap(),
        "--source",
        "top_down",
        "--judge-profile",
        "rejecting",
        "--captions",
        "2",
    ]);
    assert_eq!(
        code(&output),
        4,
        "stderr: {}",
        String::from_utf8_lossy(&output.stderr)
    );
}

#[test]
fn curate_unreachable_backend_exits_three() {
    let dir = TempDir::new().unwrap();
    let cfg_path = dir.path().join("run.json");
    std::fs::write(
        &cfg_path,
        r#"{"curate": {"source": "top_down", "countries": ["China"], "categories": ["Cuisine"], "backend": "http", "retry_attempts": 1}}"#,
    )
    .unwrap();
    let out = dir.path().join("cards.jsonl");
    let output = Command::new(BIN)
        .args([
            "--config",
            cfg_path.to_str().unwrap(),
            "curate",
            "--out",
            out.to_str().unwrap(),
        ])
        .env("BACKEND_URL", "http://127.0.0.1:9")
        .env_remove("BACKEND_TOKEN")
        .output()
        .unwrap();
    assert_eq!(
        code(&output),
        3,
        "stderr: {}",
        String::from_utf8_lossy(&output.stderr)
    );
}

#[test]
fn curate_bottom_up_without_candidates_exits_two() {
    let dir = TempDir::new().unwrap();
    let out = dir.path().join("cards.jsonl");
    let output = run(&[
        "curate",
        "--out",
        out.to_str().unwrap(),
        "--source",
        "bottom_up",
    ]);
    assert_eq!(code(&output), 2);
    assert!(String::from_utf8_lossy(&output.stderr).contains("--candidates"));
}

#[test]
fn curate_runs_are_bitwise_identical() {
    let candidates = candidates_path();
    let mut payloads = Vec::new();
    for _ in 0..2 {
        let dir = TempDir::new().unwrap();
        let out = dir.path().join("cards.jsonl");
        let output = run(&[
            "curate",
            "--out",
            out.to_str().unwrap(),
            "--candidates",
            candidates.to_str().unwrap(),
            "--captions",
            "2",
            "--seed",
            "23",
            "--judge-profile",
            "hashed",
            "--concurrency",
            "4",
        ]);
        assert_eq!(
            code(&output),
            0,
            "stderr: {}",
            String::from_utf8_lossy(&output.stderr)
        );
        payloads.push((
            std::fs::read(&out).unwrap(),
            std::fs::read(dir.path().join("cards.summary.json")).unwrap(),
        ));
    }
    assert_eq!(payloads[0].0, payloads[1].0, "cards differ between runs");
    assert_eq!(payloads[0].1, payloads[1].1, "summaries differ between runs");
}

#[test]
fn unknown_loss_token_is_usage_error() {
    let output = run(&["train", "--data", "x.jsonl", "--out", "o", "--loss", "l2"]);
    assert_eq!(code(&output), 2);
    let stderr = String::from_utf8_lossy(&output.stderr);
    assert!(stderr.contains("invalid value"), "stderr: {stderr}");
}

#[test]
fn train_then_eval_round_trip() {
    let fixture = curated();
    let out_dir = TempDir::new().unwrap();
    let output = run(&[
        "--json",
        "train",
        "--data",
        fixture.cards.to_str().unwrap(),
        "--out",
        out_dir.path().to_str().unwrap(),
        "--loss",
        "cultureclip",
        "--epochs",
        "2",
        "--batch-size",
        "8",
        "--feature-dim",
        "256",
        "--embed-dim",
        "16",
    ]);
    assert_eq!(
        code(&output),
        0,
        "stderr: {}",
        String::from_utf8_lossy(&output.stderr)
    );
    let report = stdout_json(&output);
    assert_eq!(report["loss_kind"], "cultureclip");
    assert_eq!(report["epoch_mean_loss"].as_array().unwrap().len(), 2);

    let last = out_dir.path().join("last.ckpt");
    assert!(last.is_file());
    assert!(out_dir.path().join("best.ckpt").is_file());
    assert!(out_dir.path().join("report.json").is_file());

    let output = run(&[
        "--json",
        "eval",
        "--checkpoint",
        last.to_str().unwrap(),
        "--data",
        fixture.cards.to_str().unwrap(),
        "--recall-k",
        "5",
    ]);
    assert_eq!(
        code(&output),
        0,
        "stderr: {}",
        String::from_utf8_lossy(&output.stderr)
    );
    let report = stdout_json(&output);
    assert!(report["ranking_items"].as_u64().unwrap() > 0);
    let acc = report["ranking_accuracy"].as_f64().unwrap();
    assert!((0.0..=1.0).contains(&acc));
    assert!(report["recall"]["i2t"].as_f64().is_some());
    assert!(report["recall_mean"].as_f64().is_some());
}

#[test]
fn divergent_lr_exits_five() {
    let fixture = curated();
    let out_dir = TempDir::new().unwrap();
    let output = run(&[
        "train",
        "--data",
        fixture.cards.to_str().unwrap(),
        "--out",
        out_dir.path().to_str().unwrap(),
        "--lr",
        "1e6",
        "--epochs",
        "50",
        "--batch-size",
        "8",
        "--feature-dim",
        "256",
        "--embed-dim",
        "16",
        "--holdout-frac",
        "0",
    ]);
    assert_eq!(
        code(&output),
        5,
        "stderr: {}",
        String::from_utf8_lossy(&output.stderr)
    );
}

#[test]
fn gradcheck_all_losses_passes() {
    let output = run(&["--json", "gradcheck", "--trials", "2"]);
    assert_eq!(
        code(&output),
        0,
        "stderr: {}",
        String::from_utf8_lossy(&output.stderr)
    );
    let value = stdout_json(&output);
    assert_eq!(value["pass"], true);
    assert_eq!(value["results"].as_array().unwrap().len(), 4);
}

#[test]
fn eval_missing_checkpoint_exits_two() {
    let fixture = curated();
    let output = run(&[
        "eval",
        "--checkpoint",
        "/nonexistent/model.ckpt",
        "--data",
        fixture.cards.to_str().unwrap(),
    ]);
    assert_eq!(code(&output), 2);
}

#[test]
fn inspect_stats_match_the_loader() {
    let fixture = curated();
    let output = run(&[
        "--json",
        "inspect",
        "--data",
        fixture.cards.to_str().unwrap(),
        "--first",
        "2",
    ]);
    assert_eq!(code(&output), 0);
    let value = stdout_json(&output);

    let loaded = cultureclip::twin_data::load_dataset(
        &fixture.cards,
        cultureclip::twin_data::ParseMode::Strict,
    )
    .unwrap();
    assert_eq!(
        value["stats"]["card_count"].as_u64().unwrap() as usize,
        loaded.stats.card_count
    );
    assert_eq!(value["first_cards"].as_array().unwrap().len(), 2);
    assert_eq!(
        value["first_cards"][0]["id"].as_str().unwrap(),
        loaded.cards[0].id
    );
}

#[test]
fn config_file_with_unknown_key_exits_two() {
    let dir = TempDir::new().unwrap();
    let cfg_path = dir.path().join("run.json");
    std::fs::write(&cfg_path, r#"{"trian": {}}"#).unwrap();
    let output = run(&[
        "--config",
        cfg_path.to_str().unwrap(),
        "gradcheck",
        "--trials",
        "1",
    ]);
    assert_eq!(code(&output), 2);
    assert!(String::from_utf8_lossy(&output.stderr).contains("trian"));
}

#[test]
fn embed_writes_one_line_per_side() {
    let fixture = curated();
    let dir = TempDir::new().unwrap();
    let out = dir.path().join("features.jsonl");
    let output = run(&[
        "--json",
        "embed",
        "--data",
        fixture.cards.to_str().unwrap(),
        "--out",
        out.to_str().unwrap(),
        "--feature-dim",
        "64",
    ]);
    assert_eq!(
        code(&output),
        0,
        "stderr: {}",
        String::from_utf8_lossy(&output.stderr)
    );
    let value = stdout_json(&output);
    let cards = value["cards"].as_u64().unwrap() as usize;
    assert!(cards > 0);
    let text = std::fs::read_to_string(&out).unwrap();
    assert_eq!(text.lines().count(), cards * 2);
    let first: serde_json::Value = serde_json::from_str(text.lines().next().unwrap()).unwrap();
    assert_eq!(first["image_features"].as_array().unwrap().len(), 64);
}
