use std::path::Path;
use std::sync::Arc;

use axum::body::Body;
use axum::http::{Request, StatusCode};
use http_body_util::BodyExt;
use serde_json::{json, Value};
use tower::ServiceExt;

use codewise_cli::server::{router, serve, serve_on, AppState, ServeError, SEQ_HEADER};
use codewise_cli::{prepare_server, ConfigArgs, ServeArgs};
use codewise_core::adjudication::{read_events, replay};
use codewise_core::codebooks;

fn serve_args(log: &Path) -> ServeArgs {
    ServeArgs {
        config: ConfigArgs::default(),
        log: log.to_path_buf(),
        cases: None,
        addr: "127.0.0.1:0".parse().unwrap(),
        static_dir: None,
    }
}

struct Api {
    app: axum::Router,
}

impl Api {
    fn new(state: AppState, static_dir: Option<&Path>) -> Self {
        Self { app: router(Arc::new(state), static_dir.map(Path::to_path_buf)) }
    }

    async fn call(&self, method: &str, uri: &str, body: Option<Value>, expected_seq: Option<&str>) -> (StatusCode, Option<u64>, Value) {
        let mut req = Request::builder().method(method).uri(uri);
        if let Some(seq) = expected_seq {
            req = req.header("X-Expected-Seq", seq);
        }
        let req = match body {
            Some(b) => req.header("content-type", "application/json").body(Body::from(b.to_string())),
            None => req.body(Body::empty()),
        }
        .unwrap();
        let res = self.app.clone().oneshot(req).await.unwrap();
        let status = res.status();
        let seq = res.headers().get(SEQ_HEADER).map(|v| v.to_str().unwrap().parse().unwrap());
        let bytes = res.into_body().collect().await.unwrap().to_bytes();
        let value = serde_json::from_slice(&bytes).unwrap_or_else(|_| Value::String(String::from_utf8_lossy(&bytes).into()));
        (status, seq, value)
    }

    async fn get(&self, uri: &str) -> (StatusCode, Value) {
        let (s, _, v) = self.call("GET", uri, None, None).await;
        (s, v)
    }
}

#[tokio::test]
async fn codebook_and_pending_queue() {
    let tmp = tempfile::tempdir().unwrap();
    let api = Api::new(prepare_server(&serve_args(&tmp.path().join("events.jsonl"))).unwrap(), None);

    let (status, cb) = api.get("/codebook").await;
    assert_eq!(status, StatusCode::OK);
    let ids: Vec<&str> = cb["codes"].as_array().unwrap().iter().map(|c| c["id"].as_str().unwrap()).collect();
    let expected: Vec<String> = codebooks::history_taking().ids().map(|c| c.to_string()).collect();
    assert_eq!(ids, expected);

    let (status, seq, body) = api.call("GET", "/cases?status=pending", None, None).await;
    assert_eq!(status, StatusCode::OK);
    assert_eq!(body["cases"].as_array().unwrap().len(), 44);
    assert_eq!(seq, Some(44));
    let first = body["cases"][0]["turn_id"].as_str().unwrap().to_string();
    assert!(body["cases"][0]["suggestion"]["raw_response"].is_string());

    let (status, one) = api.get(&format!("/cases/{first}")).await;
    assert_eq!(status, StatusCode::OK);
    assert_eq!(one["case"]["status"], "pending");
    assert_eq!(api.get("/cases/nope").await.0, StatusCode::NOT_FOUND);
    assert_eq!(api.get("/cases?status=bogus").await.0, StatusCode::BAD_REQUEST);
}

#[tokio::test]
async fn claim_decide_with_optimistic_concurrency() {
    let tmp = tempfile::tempdir().unwrap();
    let log = tmp.path().join("events.jsonl");
    let api = Api::new(prepare_server(&serve_args(&log)).unwrap(), None);
    let (_, body) = api.get("/cases").await;
    let id = body["cases"][0]["turn_id"].as_str().unwrap().to_string();
    let base = format!("/cases/{id}");

    let (status, seq, _) = api.call("POST", &format!("{base}/claim"), Some(json!({"annotator": "ann"})), Some("44")).await;
    assert_eq!((status, seq), (StatusCode::OK, Some(45)));
    let (status, _, err) = api.call("POST", &format!("{base}/claim"), Some(json!({"annotator": "other"})), None).await;
    assert_eq!(status, StatusCode::CONFLICT);
    assert_eq!(err["error"], "claimed_by_other");

    // A stale seq is refused and leaves the log unchanged.
    let (status, _, err) = api.call("POST", &format!("{base}/decision"), Some(json!({"annotator": "ann", "code": "RQ"})), Some("44")).await;
    assert_eq!(status, StatusCode::CONFLICT);
    assert_eq!(err["error"], "seq_conflict");
    let (status, _, _) = api.call("POST", &format!("{base}/decision"), Some(json!({"annotator": "ann", "code": "ZZ"})), None).await;
    assert_eq!(status, StatusCode::UNPROCESSABLE_ENTITY);
    let (status, _, _) = api.call("POST", &format!("{base}/decision"), Some(json!({"annotator": "ann", "code": "RQ"})), Some("x")).await;
    assert_eq!(status, StatusCode::BAD_REQUEST);

    let (status, seq, ev) = api.call("POST", &format!("{base}/decision"), Some(json!({"annotator": "ann", "code": "PQ"})), Some("45")).await;
    assert_eq!((status, seq), (StatusCode::OK, Some(46)));
    assert_eq!(ev["event"]["kind"], "DecisionRecorded");
    assert_eq!(ev["event"]["payload"]["code"], "PQ");
    let (status, _, err) = api.call("POST", &format!("{base}/decision"), Some(json!({"annotator": "ann", "code": "RQ"})), None).await;
    assert_eq!((status, err["error"].as_str()), (StatusCode::CONFLICT, Some("already_decided")));
    assert_eq!(api.get("/cases?status=decided").await.1["cases"].as_array().unwrap().len(), 1);

    // events.jsonl on disk is the wire format the UI and tooling read.
    let text = std::fs::read_to_string(&log).unwrap();
    let last: Value = serde_json::from_str(text.lines().last().unwrap()).unwrap();
    assert_eq!(last["seq"], 46);
    for key in ["seq", "ts", "kind", "payload"] {
        assert!(last.get(key).is_some(), "{key}");
    }
}

#[tokio::test]
async fn claim_release_cycle() {
    let tmp = tempfile::tempdir().unwrap();
    let api = Api::new(prepare_server(&serve_args(&tmp.path().join("e.jsonl"))).unwrap(), None);
    let id = api.get("/cases").await.1["cases"][3]["turn_id"].as_str().unwrap().to_string();
    let claim = format!("/cases/{id}/claim");
    let release = format!("/cases/{id}/release");
    assert_eq!(api.call("POST", &release, Some(json!({"annotator": "a"})), None).await.0, StatusCode::CONFLICT);
    assert_eq!(api.call("POST", &claim, Some(json!({"annotator": "a"})), None).await.0, StatusCode::OK);
    assert_eq!(api.call("POST", &release, Some(json!({"annotator": "b"})), None).await.0, StatusCode::CONFLICT);
    assert_eq!(api.call("POST", &release, Some(json!({"annotator": "a"})), None).await.0, StatusCode::OK);
    assert_eq!(api.call("POST", &claim, Some(json!({"annotator": "b"})), None).await.0, StatusCode::OK);
    assert_eq!(api.call("POST", &claim, Some(json!({"annotator": " "})), None).await.0, StatusCode::BAD_REQUEST);
}

#[tokio::test]
async fn live_report_tracks_decisions() {
    let tmp = tempfile::tempdir().unwrap();
    let api = Api::new(prepare_server(&serve_args(&tmp.path().join("e.jsonl"))).unwrap(), None);
    let (status, before) = api.get("/report/live?mode=human_in_loop").await;
    assert_eq!(status, StatusCode::OK);
    assert_eq!(before["n_decided"], 0);
    let (_, classifier) = api.get("/report/live?mode=classifier_only").await;
    assert_eq!(before["report"], classifier["report"]);
    assert_eq!(api.get("/report/live?mode=nope").await.0, StatusCode::BAD_REQUEST);

    let cases = api.get("/cases").await.1["cases"].as_array().unwrap().clone();
    for case in &cases {
        let id = case["turn_id"].as_str().unwrap();
        let gold = case["turn"]["gold"].as_str().unwrap();
        let (s, _, _) = api.call("POST", &format!("/cases/{id}/decision"), Some(json!({"annotator": "ann", "code": gold})), None).await;
        assert_eq!(s, StatusCode::OK);
    }
    let (_, after) = api.get("/report/live").await;
    assert_eq!(after["n_decided"], 44);
    assert!(after["report"]["overall_kappa"].as_f64().unwrap() > before["report"]["overall_kappa"].as_f64().unwrap());
}

#[tokio::test]
async fn live_report_without_gold_is_404() {
    let (log, corpus, predictions) = {
        let f = codewise_core::fixtures::synthetic_workflow(0);
        let corpus: Vec<_> = f.corpus.into_iter().map(|mut t| {
            t.gold = None;
            t
        }).collect();
        let log = codewise_core::adjudication::AdjudicationLog::in_memory(f.codebook, Arc::new(codewise_core::adjudication::SystemClock));
        (log, corpus, f.predictions)
    };
    let api = Api::new(AppState::new(log, corpus, predictions, None), None);
    assert_eq!(api.get("/report/live").await.0, StatusCode::NOT_FOUND);
}

#[tokio::test]
async fn restart_replays_to_the_same_state() {
    let tmp = tempfile::tempdir().unwrap();
    let log = tmp.path().join("events.jsonl");
    let snapshot = {
        let api = Api::new(prepare_server(&serve_args(&log)).unwrap(), None);
        let id = api.get("/cases").await.1["cases"][1]["turn_id"].as_str().unwrap().to_string();
        api.call("POST", &format!("/cases/{id}/claim"), Some(json!({"annotator": "a"})), None).await;
        api.call("POST", &format!("/cases/{id}/decision"), Some(json!({"annotator": "a", "code": "SR"})), None).await;
        api.get("/cases").await.1
    };
    let api = Api::new(prepare_server(&serve_args(&log)).unwrap(), None);
    assert_eq!(api.get("/cases").await.1, snapshot);

    let events = read_events(std::io::BufReader::new(std::fs::File::open(&log).unwrap())).unwrap();
    let state = replay(&events, &codebooks::history_taking()).unwrap();
    assert_eq!(state.last_seq, 46);
    assert_eq!(state.n_decided(), 1);
}

#[test]
fn unwritable_log_is_reported() {
    let tmp = tempfile::tempdir().unwrap();
    let err = prepare_server(&serve_args(tmp.path())).err().unwrap();
    assert!(matches!(err.downcast_ref::<ServeError>(), Some(ServeError::LogUnwritable(_))), "{err:?}");
}

#[tokio::test]
async fn busy_port_is_reported() {
    let tmp = tempfile::tempdir().unwrap();
    let taken = std::net::TcpListener::bind("127.0.0.1:0").unwrap();
    let addr = taken.local_addr().unwrap();
    let state = Arc::new(prepare_server(&serve_args(&tmp.path().join("e.jsonl"))).unwrap());
    let err = serve(addr, state, None, async {}).await.unwrap_err();
    assert!(matches!(err, ServeError::PortUnavailable { .. }), "{err:?}");
}

#[tokio::test]
async fn serves_static_assets_and_shuts_down() {
    let tmp = tempfile::tempdir().unwrap();
    let ui = tmp.path().join("ui");
    std::fs::create_dir(&ui).unwrap();
    std::fs::write(ui.join("index.html"), "<html>ui</html>").unwrap();
    let state = prepare_server(&serve_args(&tmp.path().join("e.jsonl"))).unwrap();

    let api = Api::new(prepare_server(&serve_args(&tmp.path().join("e.jsonl"))).unwrap(), Some(&ui));
    let (status, body) = api.get("/index.html").await;
    assert_eq!((status, body.as_str()), (StatusCode::OK, Some("<html>ui</html>")));

    let listener = tokio::net::TcpListener::bind("127.0.0.1:0").await.unwrap();
    let addr = listener.local_addr().unwrap();
    let (tx, rx) = tokio::sync::oneshot::channel::<()>();
    let server = tokio::spawn(serve_on(listener, Arc::new(state), Some(ui), async {
        let _ = rx.await;
    }));
    let body = tokio::task::spawn_blocking(move || {
        use std::io::{Read, Write};
        let mut s = std::net::TcpStream::connect(addr).unwrap();
        s.write_all(b"GET /cases?status=pending HTTP/1.1\r\nHost: x\r\nConnection: close\r\n\r\n").unwrap();
        let mut out = String::new();
        s.read_to_string(&mut out).unwrap();
        out
    })
    .await
    .unwrap();
    assert!(body.starts_with("HTTP/1.1 200"), "{body}");
    tx.send(()).unwrap();
    server.await.unwrap().unwrap();
}
