use std::collections::BTreeMap;
use std::path::Path;

use codewise_core::runner::{run, ExperimentConfig, ExperimentMode, RunnerError};
use serde_json::Value;

fn config(mode: ExperimentMode, out: &Path) -> ExperimentConfig {
    let mut cfg = ExperimentConfig::new(mode);
    cfg.out_dir = out.to_path_buf();
    cfg.seed = 42;
    cfg
}

fn read_json(path: &Path) -> Value {
    serde_json::from_slice(&std::fs::read(path).unwrap()).unwrap()
}

fn dir_bytes(dir: &Path) -> BTreeMap<String, Vec<u8>> {
    std::fs::read_dir(dir)
        .unwrap()
        .map(|e| {
            let e = e.unwrap();
            (e.file_name().to_string_lossy().into_owned(), std::fs::read(e.path()).unwrap())
        })
        .collect()
}

#[test]
fn workflow_eval_writes_all_mode_reports() {
    let tmp = tempfile::tempdir().unwrap();
    let out = run(&config(ExperimentMode::WorkflowEval, tmp.path())).unwrap();
    assert_eq!(out.summary["n_cases"], 44);
    assert_eq!(out.summary["n_decided"], 44);
    let modes: Vec<&str> = out.summary["resolution"].as_array().unwrap().iter().map(|r| r["mode"].as_str().unwrap()).collect();
    assert_eq!(modes, ["classifier_only", "llm_only", "human_in_loop", "review_all_low_conf"]);
    for name in ["manifest.json", "events.jsonl", "routing.jsonl", "suggestions.jsonl", "labels_human_in_loop.jsonl",
        "reliability_human_in_loop.json", "improvement_review_all_low_conf.json", "improvement_human_in_loop_improvement.csv"]
    {
        assert!(out.artifacts.iter().any(|a| a == name), "missing {name}: {:?}", out.artifacts);
    }
    let manifest = read_json(&out.run_dir.join("manifest.json"));
    assert_eq!(manifest["seed"], 42);
    assert_eq!(manifest["config"]["mode"], "workflow_eval");
    assert!(manifest["versions"]["codewise"].is_string());
    let latest = tmp.path().join("latest");
    assert_eq!(std::fs::canonicalize(latest).unwrap(), std::fs::canonicalize(&out.run_dir).unwrap());
}

#[test]
fn mock_runs_are_byte_reproducible() {
    let tmp = tempfile::tempdir().unwrap();
    for mode in [ExperimentMode::WorkflowEval, ExperimentMode::Exp4EmbeddingAudit] {
        let a = run(&config(mode, tmp.path())).unwrap();
        let b = run(&config(mode, tmp.path())).unwrap();
        assert_ne!(a.run_dir, b.run_dir);
        assert_eq!(dir_bytes(&a.run_dir), dir_bytes(&b.run_dir), "{mode:?}");
    }
}

#[test]
fn zero_decisions_keep_classifier_labels() {
    let tmp = tempfile::tempdir().unwrap();
    let empty = tmp.path().join("none.jsonl");
    std::fs::write(&empty, "").unwrap();
    let mut cfg = config(ExperimentMode::WorkflowEval, tmp.path());
    cfg.decisions = Some(empty);
    let out = run(&cfg).unwrap();
    assert_eq!(out.summary["n_decided"], 0);
    let a = std::fs::read(out.run_dir.join("labels_classifier_only.jsonl")).unwrap();
    let b = std::fs::read(out.run_dir.join("labels_human_in_loop.jsonl")).unwrap();
    assert_eq!(a, b);
    let r = &out.summary["resolution"];
    assert_eq!(r[0]["kappa"], r[2]["kappa"]);
}

#[test]
fn exp3_with_500_turns_yields_6000_verdicts() {
    let tmp = tempfile::tempdir().unwrap();
    let mut cfg = config(ExperimentMode::Exp3Binary, tmp.path());
    cfg.sample_size = Some(500);
    cfg.llm_provider = "mock-no".into();
    let out = run(&cfg).unwrap();
    assert_eq!(out.summary["n_verdicts"], 6000);
    assert_eq!(out.summary["negativity_bias"], 1.0);
    let matrix = read_json(&out.run_dir.join("verdicts.json"));
    assert_eq!(matrix["verdicts"].as_array().unwrap().len(), 6000);
}

#[test]
fn exp4_audit_has_full_pair_matrix() {
    let tmp = tempfile::tempdir().unwrap();
    let mut cfg = config(ExperimentMode::Exp4EmbeddingAudit, tmp.path());
    cfg.n_per_code = 5;
    let out = run(&cfg).unwrap();
    let audit = read_json(&out.run_dir.join("audit.json"));
    let m = audit["pair_similarity"].as_array().unwrap();
    assert_eq!(m.len(), 12);
    assert!(m.iter().all(|r| r.as_array().unwrap().len() == 12));
    let scatter = std::fs::read_to_string(out.run_dir.join("audit_scatter.csv")).unwrap();
    assert!(scatter.starts_with("code,x,y\n"));
}

#[test]
fn coding_modes_produce_reliability_reports() {
    let tmp = tempfile::tempdir().unwrap();
    let mut cfg = config(ExperimentMode::Exp1FullScope, tmp.path());
    cfg.sample_size = Some(60);
    let out = run(&cfg).unwrap();
    assert_eq!(out.summary["n_turns"], 60);
    assert!(out.artifacts.iter().any(|a| a == "reliability.json"));

    let mut cfg = config(ExperimentMode::Exp2ReducedScope, tmp.path());
    cfg.code_subset = Some(vec!["RQ".into(), "SS".into(), "LO".into()]);
    let out = run(&cfg).unwrap();
    let lines = std::fs::read_to_string(out.run_dir.join("llm_codes.jsonl")).unwrap();
    assert!(lines.lines().count() > 0);

    let mut bad = config(ExperimentMode::Exp2ReducedScope, tmp.path());
    bad.code_subset = Some(vec!["ZZ".into()]);
    assert!(matches!(run(&bad), Err(RunnerError::ConfigInvalid(_))));
}

#[test]
fn missing_input_names_the_stage() {
    let tmp = tempfile::tempdir().unwrap();
    let mut cfg = config(ExperimentMode::Exp1FullScope, tmp.path());
    cfg.corpus = Some(tmp.path().join("absent.jsonl"));
    match run(&cfg) {
        Err(RunnerError::Stage { stage, .. }) => assert_eq!(stage, "load corpus"),
        other => panic!("{other:?}"),
    }
}
