use std::path::{Path, PathBuf};
use std::process::Command;
use std::sync::OnceLock;

use concept_regions::explain::read_raw_map;
use concept_regions::harness::{self, EvalReport, ExplanationRecord, RunConfig};
use concept_regions::metrics::EvalMode;
use concept_regions::synth::load_dataset;

struct Fixture {
    _dir: tempfile::TempDir,
    cfg: RunConfig,
}

fn small_config(root: &Path) -> RunConfig {
    let mut cfg = RunConfig::default();
    cfg.seed = 3;
    cfg.dataset.dir = root.join("data");
    cfg.dataset.count = 90;
    cfg.model.train.epochs = 1;
    cfg.translator.max_epochs = 2;
    cfg.out = root.join("out");
    cfg.plot_samples = 1;
    cfg
}

/// A tiny dataset with trained checkpoints, shared by the tests below.
fn fixture() -> &'static Fixture {
    static F: OnceLock<Fixture> = OnceLock::new();
    F.get_or_init(|| {
        let dir = tempfile::tempdir().unwrap();
        let cfg = small_config(dir.path());
        harness::cmd_synth(&cfg).unwrap();
        harness::cmd_train(&cfg).unwrap();
        Fixture { _dir: dir, cfg }
    })
}

fn first_image(cfg: &RunConfig) -> PathBuf {
    let data = load_dataset(&cfg.dataset.dir).unwrap();
    cfg.dataset.dir.join(format!("images/{}.png", data.samples[0].id))
}

fn with_out(cfg: &RunConfig, name: &str) -> RunConfig {
    let mut c = cfg.clone();
    c.out = cfg.out.parent().unwrap().join(name);
    std::fs::create_dir_all(&c.out).unwrap();
    for f in ["classifier.json", "translator.json"] {
        std::fs::copy(cfg.out.join(f), c.out.join(f)).unwrap();
    }
    c
}

#[test]
fn synth_into_missing_parent_fails() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = small_config(dir.path());
    cfg.dataset.dir = dir.path().join("no/such/parent/data");
    assert!(harness::cmd_synth(&cfg).is_err());
}

#[test]
fn train_writes_checkpoints_and_report() {
    let cfg = &fixture().cfg;
    for f in ["classifier.json", "translator.json", "train_report.json"] {
        assert!(cfg.out.join(f).is_file(), "{f}");
    }
    let report: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(cfg.out.join("train_report.json")).unwrap()).unwrap();
    assert_eq!(report["seed"], 3);
}

#[test]
fn explanation_json_round_trips_byte_for_byte() {
    let cfg = with_out(&fixture().cfg, "explain_all");
    let image = first_image(&cfg);
    let record = harness::cmd_explain(&cfg, &image, &[]).unwrap();
    let dir = harness::explain_dir(&cfg, &record.image_id);
    let text = std::fs::read_to_string(dir.join("explanation.json")).unwrap();
    let parsed: ExplanationRecord = serde_json::from_str(&text).unwrap();
    assert_eq!(parsed, record);
    assert_eq!(serde_json::to_string_pretty(&parsed).unwrap() + "\n", text);
    assert_eq!(record.concepts.len(), 7);
    assert!(record.warnings.is_empty());
    for w in record.contributions.windows(2) {
        assert!(w[0].value.abs() >= w[1].value.abs());
    }
    for c in &record.concepts {
        assert!(dir.join(&c.region.png).is_file());
        let raw = read_raw_map(&dir.join(&c.region.raw)).unwrap();
        assert_eq!(raw.dim(), (64, 64));
        assert!(raw.iter().all(|&v| v >= 0.0));
    }
    assert!(dir.join(&record.masking_curve_plot).is_file());
    assert!(dir.join(&record.contribution_plot).is_file());
    // Explaining again reproduces the same bytes.
    harness::cmd_explain(&cfg, &image, &[]).unwrap();
    assert_eq!(std::fs::read_to_string(dir.join("explanation.json")).unwrap(), text);
}

#[test]
fn explain_filter_and_unknown_concept() {
    let cfg = with_out(&fixture().cfg, "explain_one");
    let image = first_image(&cfg);
    let record = harness::cmd_explain(&cfg, &image, &["red".into(), "plaid".into(), "red".into()]).unwrap();
    assert_eq!(record.concepts.len(), 1);
    assert_eq!(record.concepts[0].label, "red");
    assert_eq!(record.warnings.len(), 1);
    assert!(record.warnings[0].contains("plaid"));
}

#[test]
fn evaluate_reports_both_modes() {
    let cfg = with_out(&fixture().cfg, "eval");
    let report = harness::cmd_evaluate(&cfg).unwrap();
    assert!(report.mode(EvalMode::BestNraOfTopK).is_some());
    assert!(report.mode(EvalMode::Top1ByAssociation).is_some());
    let text = std::fs::read_to_string(cfg.out.join("eval/results.json")).unwrap();
    let parsed: EvalReport = serde_json::from_str(&text).unwrap();
    assert_eq!(parsed.samples.len(), report.samples.len());
    assert!(!report.samples.is_empty());
    for s in &report.samples {
        for r in &s.results {
            assert!(r.result.nra.is_finite());
        }
    }
}

#[test]
fn evaluate_without_checkpoints_fails() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = fixture().cfg.clone();
    cfg.out = dir.path().to_path_buf();
    assert!(harness::cmd_evaluate(&cfg).is_err());
}

fn cli() -> Command {
    Command::new(env!("CARGO_BIN_EXE_concept-regions"))
}

#[test]
fn cli_synth_and_errors() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("d");
    let out = cli()
        .args(["synth", "--set", "dataset.count=12", "--set"])
        .arg(format!("dataset.dir={}", data.display()))
        .output()
        .unwrap();
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    assert!(String::from_utf8_lossy(&out.stdout).contains("wrote 12 scenes"));
    assert!(data.join("manifest.json").is_file());

    let bad = cli().args(["synth", "--set", "bogus=1"]).output().unwrap();
    assert!(!bad.status.success());
    assert!(String::from_utf8_lossy(&bad.stderr).contains("error"));

    let missing = cli()
        .args(["train", "--set"])
        .arg(format!("dataset.dir={}", dir.path().join("absent").display()))
        .output()
        .unwrap();
    assert!(!missing.status.success());
}

#[test]
fn cli_explain_prints_prediction() {
    let cfg = with_out(&fixture().cfg, "cli_explain");
    let out = cli()
        .args(["explain", "--concept", "blue", "--seed", "3", "--out"])
        .arg(&cfg.out)
        .arg("--set")
        .arg(format!("dataset.dir={}", cfg.dataset.dir.display()))
        .arg("--image")
        .arg(first_image(&cfg))
        .output()
        .unwrap();
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let stdout = String::from_utf8_lossy(&out.stdout);
    assert!(stdout.contains("predicted"));
    assert!(stdout.contains("blue"));
}
