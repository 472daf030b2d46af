use std::path::Path;
use std::process::Command;

use serde_json::Value;

fn codewise(args: &[&str], cwd: &Path) -> (bool, String, String) {
    let out = Command::new(env!("CARGO_BIN_EXE_codewise")).args(args).current_dir(cwd).output().unwrap();
    (out.status.success(), String::from_utf8(out.stdout).unwrap(), String::from_utf8(out.stderr).unwrap())
}

fn ok_json(args: &[&str], cwd: &Path) -> Value {
    let (ok, stdout, stderr) = codewise(args, cwd);
    assert!(ok, "{args:?}: {stderr}");
    serde_json::from_str(&stdout).unwrap_or_else(|e| panic!("{e}: {stdout}"))
}

#[test]
fn staged_pipeline_over_synthetic_files() {
    let tmp = tempfile::tempdir().unwrap();
    let dir = tmp.path();
    ok_json(&["synth", "--seed", "42", "--out-dir", "data"], dir);
    let inputs = ["--corpus", "data/corpus.jsonl", "--predictions", "data/predictions.jsonl", "--prevalence", "data/prevalence.json"];
    let with = |extra: &[&str]| -> Vec<String> { inputs.iter().chain(extra).map(|s| s.to_string()).collect() };

    let run = |cmd: &str, extra: &[&str]| {
        let mut args = vec![cmd.to_string()];
        args.extend(with(extra));
        let refs: Vec<&str> = args.iter().map(String::as_str).collect();
        ok_json(&refs, dir)
    };
    let check = run("ingest-check", &[]);
    assert_eq!(check["n_predictions"], 500);
    assert_eq!(check["synthetic"], false);

    let routed = run("route", &["--out", "routing.jsonl"]);
    assert_eq!(routed["summary"]["n_escalated"], 44);
    assert_eq!(std::fs::read_to_string(dir.join("routing.jsonl")).unwrap().lines().count(), 500);

    // Raising the confidence threshold can only grow the queue.
    let wider = run("route", &["--out", "wider.jsonl", "--conf-threshold", "0.7"]);
    assert!(wider["summary"]["n_escalated"].as_u64().unwrap() >= 44);

    let suggested = run("suggest", &["--out", "cases.jsonl"]);
    assert_eq!(suggested["n_cases"], 44);

    // Decide every case through the log format the server writes.
    let cases: Vec<Value> = std::fs::read_to_string(dir.join("cases.jsonl")).unwrap().lines().map(|l| serde_json::from_str(l).unwrap()).collect();
    let mut log = String::new();
    let mut seq = 0;
    for case in &cases {
        seq += 1;
        log.push_str(&serde_json::json!({"seq": seq, "ts": "2024-01-01T00:00:00Z", "kind": "CaseOpened", "payload": {"case": case}}).to_string());
        log.push('\n');
    }
    for case in &cases {
        seq += 1;
        let payload = serde_json::json!({"case_id": case["turn_id"], "annotator": "x", "code": case["turn"]["gold"]});
        log.push_str(&serde_json::json!({"seq": seq, "ts": "2024-01-01T00:00:01Z", "kind": "DecisionRecorded", "payload": payload}).to_string());
        log.push('\n');
    }
    std::fs::write(dir.join("events.jsonl"), log).unwrap();

    let before = run("resolve", &["--log", "events.jsonl", "--mode", "classifier_only", "--out", "before.jsonl"]);
    assert_eq!(before["n_labels"], 500);
    let after = run("resolve", &["--log", "events.jsonl", "--out", "after.jsonl"]);
    assert_eq!(after["provenance"]["human"], 44);

    let report = run("report", &["--labels", "after.jsonl", "--before", "before.jsonl", "--report-dir", "reports"]);
    assert!(report["overall_kappa"].as_f64().unwrap() > report["overall_before"].as_f64().unwrap());
    for f in ["reliability.json", "improvement.json"] {
        assert!(dir.join("reports").join(f).exists(), "{f}");
    }
}

#[test]
fn experiments_and_config_precedence() {
    let tmp = tempfile::tempdir().unwrap();
    let dir = tmp.path();
    std::fs::write(dir.join("exp.yaml"), "mode: exp3_binary\nseed: 7\nsample_size: 20\nllm_provider: mock-no\nout_dir: runs\n").unwrap();
    let out = ok_json(&["run-experiment", "--config", "exp.yaml", "--sample-size", "10"], dir);
    assert_eq!(out["summary"]["n_verdicts"], 120);
    let manifest: Value = serde_json::from_slice(&std::fs::read(dir.join("runs/latest/manifest.json")).unwrap()).unwrap();
    assert_eq!(manifest["seed"], 7);
    assert_eq!(manifest["config"]["sample_size"], 10);

    let audit = ok_json(&["audit", "--n-per-code", "4", "--out-dir", "runs"], dir);
    assert!(audit["artifacts"].as_array().unwrap().iter().any(|a| a == "audit_scatter.csv"));

    let (ok, _, stderr) = codewise(&["run-experiment", "--mode", "exp2_reduced_scope"], dir);
    assert!(!ok && stderr.contains("code_subset"), "{stderr}");
    let (ok, _, stderr) = codewise(&["run-experiment"], dir);
    assert!(!ok && stderr.contains("--mode"), "{stderr}");
    let (ok, _, _) = codewise(&["route", "--rare-threshold", "1.5"], dir);
    assert!(!ok);
}
