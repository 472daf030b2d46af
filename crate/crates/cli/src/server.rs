//! JSON API over the adjudication log, for the annotation UI.
//!
//! Writes take an optional `X-Expected-Seq` header; when the log has moved
//! past that seq the write is refused with 409 and nothing is recorded.
//! Every response carries the current seq in `X-Seq`.

use std::collections::BTreeMap;
use std::net::SocketAddr;
use std::path::PathBuf;
use std::sync::{Arc, RwLock};

use axum::extract::{Path, Query, State};
use axum::http::{HeaderMap, HeaderValue, StatusCode};
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use serde::Deserialize;
use serde_json::json;
use thiserror::Error;
use tower_http::services::ServeDir;

use codewise_core::adjudication::{gold_from_corpus, resolve_final, AdjudicationError, AdjudicationLog, ResolutionMode};
use codewise_core::metrics::reliability_report;
use codewise_core::router::DEFAULT_HEAD_TAIL_CUTOFF;
use codewise_core::{CaseStatus, CodeId, DialogueTurn, Prediction, PrevalenceTable};

pub const EXPECTED_SEQ_HEADER: &str = "x-expected-seq";
pub const SEQ_HEADER: &str = "x-seq";

#[derive(Debug, Error)]
pub enum ServeError {
    #[error(transparent)]
    LogUnwritable(AdjudicationError),
    #[error("cannot bind {addr}: {source}")]
    PortUnavailable { addr: SocketAddr, source: std::io::Error },
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// Shared server state. The log is the only writer; readers take snapshots
/// under the read lock.
pub struct AppState {
    log: RwLock<AdjudicationLog>,
    corpus: Vec<DialogueTurn>,
    predictions: Vec<Prediction>,
    prevalence: Option<PrevalenceTable>,
    gold: BTreeMap<String, CodeId>,
}

impl AppState {
    pub fn new(
        log: AdjudicationLog,
        corpus: Vec<DialogueTurn>,
        predictions: Vec<Prediction>,
        prevalence: Option<PrevalenceTable>,
    ) -> Self {
        let gold = gold_from_corpus(&corpus);
        Self { log: RwLock::new(log), corpus, predictions, prevalence, gold }
    }

    pub fn last_seq(&self) -> u64 {
        self.log.read().expect("log lock").last_seq()
    }
}

struct ApiError {
    status: StatusCode,
    kind: &'static str,
    message: String,
}

impl ApiError {
    fn new(status: StatusCode, kind: &'static str, message: impl Into<String>) -> Self {
        Self { status, kind, message: message.into() }
    }
}

impl From<AdjudicationError> for ApiError {
    fn from(e: AdjudicationError) -> Self {
        use AdjudicationError as E;
        let (status, kind) = match &e {
            E::UnknownCase(_) | E::UnknownTurn(_) => (StatusCode::NOT_FOUND, "unknown_case"),
            E::SeqConflict { .. } => (StatusCode::CONFLICT, "seq_conflict"),
            E::ClaimedByOther { .. } => (StatusCode::CONFLICT, "claimed_by_other"),
            E::AlreadyDecided(_) => (StatusCode::CONFLICT, "already_decided"),
            E::NotClaimed(_) => (StatusCode::CONFLICT, "not_claimed"),
            E::InvalidTransition { .. } => (StatusCode::CONFLICT, "invalid_transition"),
            E::CodeNotInCodebook(_) => (StatusCode::UNPROCESSABLE_ENTITY, "code_not_in_codebook"),
            _ => (StatusCode::INTERNAL_SERVER_ERROR, "internal"),
        };
        ApiError::new(status, kind, e.to_string())
    }
}

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        (self.status, Json(json!({ "error": self.kind, "message": self.message }))).into_response()
    }
}

type ApiResult = Result<Response, ApiError>;

fn with_seq(seq: u64, body: serde_json::Value) -> Response {
    let mut res = Json(body).into_response();
    res.headers_mut().insert(SEQ_HEADER, HeaderValue::from(seq));
    res
}

fn expected_seq(headers: &HeaderMap) -> Result<Option<u64>, ApiError> {
    let Some(value) = headers.get(EXPECTED_SEQ_HEADER) else {
        return Ok(None);
    };
    value
        .to_str()
        .ok()
        .and_then(|v| v.trim().parse().ok())
        .map(Some)
        .ok_or_else(|| ApiError::new(StatusCode::BAD_REQUEST, "bad_header", "X-Expected-Seq must be an integer"))
}

async fn codebook(State(state): State<Arc<AppState>>) -> ApiResult {
    let log = state.log.read().expect("log lock");
    Ok(with_seq(log.last_seq(), serde_json::to_value(log.codebook()).expect("codebook serializes")))
}

#[derive(Deserialize)]
struct CasesQuery {
    status: Option<String>,
}

async fn list_cases(State(state): State<Arc<AppState>>, Query(q): Query<CasesQuery>) -> ApiResult {
    let status = match q.status.as_deref() {
        None | Some("") | Some("all") => None,
        Some(s) => Some(
            serde_json::from_value::<CaseStatus>(json!(s))
                .map_err(|_| ApiError::new(StatusCode::BAD_REQUEST, "bad_status", format!("unknown status {s:?}")))?,
        ),
    };
    let log = state.log.read().expect("log lock");
    let cases: Vec<_> = log.state().cases().iter().filter(|c| status.is_none_or(|s| c.status == s)).collect();
    Ok(with_seq(log.last_seq(), json!({ "seq": log.last_seq(), "cases": cases })))
}

async fn get_case(State(state): State<Arc<AppState>>, Path(id): Path<String>) -> ApiResult {
    let log = state.log.read().expect("log lock");
    let case = log.state().case(&id).ok_or(AdjudicationError::UnknownCase(id))?;
    Ok(with_seq(log.last_seq(), json!({ "seq": log.last_seq(), "case": case })))
}

#[derive(Deserialize)]
struct AnnotatorBody {
    annotator: String,
}

#[derive(Deserialize)]
struct DecisionBody {
    annotator: String,
    code: String,
}

fn write(state: &AppState, f: impl FnOnce(&mut AdjudicationLog) -> Result<codewise_core::adjudication::Event, AdjudicationError>) -> ApiResult {
    let mut log = state.log.write().expect("log lock");
    let event = f(&mut log)?;
    let seq = log.last_seq();
    Ok(with_seq(seq, json!({ "seq": seq, "event": event })))
}

fn require_annotator(annotator: &str) -> Result<(), ApiError> {
    if annotator.trim().is_empty() {
        return Err(ApiError::new(StatusCode::BAD_REQUEST, "missing_annotator", "annotator must not be empty"));
    }
    Ok(())
}

async fn claim(State(state): State<Arc<AppState>>, Path(id): Path<String>, headers: HeaderMap, Json(body): Json<AnnotatorBody>) -> ApiResult {
    require_annotator(&body.annotator)?;
    let expected = expected_seq(&headers)?;
    write(&state, |log| log.claim(&id, &body.annotator, expected))
}

async fn release(State(state): State<Arc<AppState>>, Path(id): Path<String>, headers: HeaderMap, Json(body): Json<AnnotatorBody>) -> ApiResult {
    require_annotator(&body.annotator)?;
    let expected = expected_seq(&headers)?;
    write(&state, |log| log.release(&id, &body.annotator, expected))
}

async fn decide(State(state): State<Arc<AppState>>, Path(id): Path<String>, headers: HeaderMap, Json(body): Json<DecisionBody>) -> ApiResult {
    require_annotator(&body.annotator)?;
    let expected = expected_seq(&headers)?;
    write(&state, |log| log.decide(&id, &body.annotator, &body.code, expected))
}

#[derive(Deserialize)]
struct ReportQuery {
    mode: Option<String>,
}

/// Reliability of the chosen resolution mode against corpus gold, on a
/// snapshot of the log. 404 when the corpus carries no gold labels.
async fn live_report(State(state): State<Arc<AppState>>, Query(q): Query<ReportQuery>) -> ApiResult {
    let mode: ResolutionMode = q
        .mode
        .as_deref()
        .unwrap_or("human_in_loop")
        .parse()
        .map_err(|e: String| ApiError::new(StatusCode::BAD_REQUEST, "bad_mode", e))?;
    if state.gold.is_empty() {
        return Err(ApiError::new(StatusCode::NOT_FOUND, "no_gold", "the corpus has no gold labels"));
    }
    let (seq, cases, cb) = {
        let log = state.log.read().expect("log lock");
        (log.last_seq(), log.state().cases().to_vec(), log.codebook().clone())
    };
    let labeling = resolve_final(&state.corpus, &state.predictions, &cases, Some(&state.gold), mode)?;
    let (pred, gold): (Vec<CodeId>, Vec<CodeId>) = labeling
        .labels
        .iter()
        .filter_map(|l| state.gold.get(&l.turn_id).map(|g| (l.code.clone(), g.clone())))
        .unzip();
    if pred.is_empty() {
        return Err(ApiError::new(StatusCode::NOT_FOUND, "no_gold", "no predicted turn has a gold label"));
    }
    let report = reliability_report(&pred, &gold, &cb, state.prevalence.as_ref(), DEFAULT_HEAD_TAIL_CUTOFF)
        .map_err(|e| ApiError::new(StatusCode::INTERNAL_SERVER_ERROR, "metrics", e.to_string()))?;
    let decided = cases.iter().filter(|c| c.status == CaseStatus::Decided).count();
    Ok(with_seq(
        seq,
        json!({ "seq": seq, "mode": mode, "n_cases": cases.len(), "n_decided": decided, "report": report }),
    ))
}

/// The API routes, with `static_dir` served for every other path.
pub fn router(state: Arc<AppState>, static_dir: Option<PathBuf>) -> Router {
    let api = Router::new()
        .route("/codebook", get(codebook))
        .route("/cases", get(list_cases))
        .route("/cases/{id}", get(get_case))
        .route("/cases/{id}/claim", post(claim))
        .route("/cases/{id}/decision", post(decide))
        .route("/cases/{id}/release", post(release))
        .route("/report/live", get(live_report))
        .with_state(state);
    match static_dir {
        Some(dir) => api.fallback_service(ServeDir::new(dir)),
        None => api,
    }
}

/// Binds `addr` and serves until `shutdown` resolves. Every acknowledged
/// write is already synced to the log, so nothing is pending at exit.
pub async fn serve(
    addr: SocketAddr,
    state: Arc<AppState>,
    static_dir: Option<PathBuf>,
    shutdown: impl std::future::Future<Output = ()> + Send + 'static,
) -> Result<(), ServeError> {
    let listener = tokio::net::TcpListener::bind(addr).await.map_err(|source| ServeError::PortUnavailable { addr, source })?;
    serve_on(listener, state, static_dir, shutdown).await
}

/// Serves on an already bound listener.
pub async fn serve_on(
    listener: tokio::net::TcpListener,
    state: Arc<AppState>,
    static_dir: Option<PathBuf>,
    shutdown: impl std::future::Future<Output = ()> + Send + 'static,
) -> Result<(), ServeError> {
    tracing::info!(addr = %listener.local_addr()?, seq = state.last_seq(), "adjudication server listening");
    axum::serve(listener, router(state, static_dir)).with_graceful_shutdown(shutdown).await?;
    Ok(())
}
