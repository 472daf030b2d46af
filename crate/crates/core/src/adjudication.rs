//! Case lifecycle for escalated turns: queue construction, an append-only
//! event log of claims and decisions, replay, and final-label resolution.

use std::collections::{BTreeMap, HashMap};
use std::fs::{File, OpenOptions};
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};
use std::str::FromStr;
use std::sync::atomic::{AtomicI64, Ordering};
use std::sync::Arc;

use chrono::{DateTime, TimeZone, Utc};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::corpus::CorpusIndex;
use crate::domain::{
    AdjudicationCase, CaseStatus, CodeId, Codebook, Decision, DialogueTurn, EscalationReason, FinalLabel,
    FinalLabeling, LlmSuggestion, Prediction, Provenance, RoutingDecision,
};

pub const DEFAULT_CONTEXT_WINDOW: usize = 5;

#[derive(Debug, Error)]
pub enum AdjudicationError {
    #[error("no prediction for escalated turn {0}")]
    MissingPrediction(String),
    #[error("turn {0} is not in the corpus")]
    UnknownTurn(String),
    #[error("unknown case {0}")]
    UnknownCase(String),
    #[error("case {0} is already decided")]
    AlreadyDecided(String),
    #[error("code {0:?} is not in the codebook")]
    CodeNotInCodebook(String),
    #[error("case {case_id} is claimed by {holder}")]
    ClaimedByOther { case_id: String, holder: String },
    #[error("case {0} is not claimed")]
    NotClaimed(String),
    #[error("case {0} is already open")]
    DuplicateCase(String),
    #[error("expected seq {expected} but log is at {actual}")]
    SeqConflict { expected: u64, actual: u64 },
    #[error("event seq {found} follows {previous}")]
    GapInSequence { previous: u64, found: u64 },
    #[error("invalid transition at seq {seq}: {reason}")]
    InvalidTransition { seq: u64, reason: String },
    #[error("gold label required for turn {0}")]
    MissingGold(String),
    #[error("event log line {line}: {message}")]
    LogParse { line: usize, message: String },
    #[error("event log {path}: {source}")]
    LogUnwritable { path: PathBuf, source: std::io::Error },
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", content = "payload")]
pub enum EventKind {
    CaseOpened { case: Box<AdjudicationCase> },
    CaseClaimed { case_id: String, annotator: String },
    DecisionRecorded { case_id: String, annotator: String, code: CodeId },
    CaseReleased { case_id: String, annotator: String },
}

impl EventKind {
    pub fn name(&self) -> &'static str {
        match self {
            EventKind::CaseOpened { .. } => "CaseOpened",
            EventKind::CaseClaimed { .. } => "CaseClaimed",
            EventKind::DecisionRecorded { .. } => "DecisionRecorded",
            EventKind::CaseReleased { .. } => "CaseReleased",
        }
    }
}

/// One line of `events.jsonl`: `{seq, ts, kind, payload}`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Event {
    pub seq: u64,
    pub ts: DateTime<Utc>,
    #[serde(flatten)]
    pub kind: EventKind,
}

pub trait Clock: Send + Sync {
    fn now(&self) -> DateTime<Utc>;
}

#[derive(Debug, Default, Clone, Copy)]
pub struct SystemClock;

impl Clock for SystemClock {
    fn now(&self) -> DateTime<Utc> {
        Utc::now()
    }
}

/// Starts at a fixed instant and advances one second per reading.
#[derive(Debug)]
pub struct SteppingClock {
    next: AtomicI64,
}

impl SteppingClock {
    pub fn starting_at(start: DateTime<Utc>) -> Self {
        Self { next: AtomicI64::new(start.timestamp()) }
    }
}

impl Default for SteppingClock {
    fn default() -> Self {
        Self::starting_at(Utc.with_ymd_and_hms(2024, 1, 1, 0, 0, 0).unwrap())
    }
}

impl Clock for SteppingClock {
    fn now(&self) -> DateTime<Utc> {
        let secs = self.next.fetch_add(1, Ordering::SeqCst);
        Utc.timestamp_opt(secs, 0).single().expect("valid timestamp")
    }
}

/// Builds one pending case per escalated decision, in decision order.
pub fn open_queue(
    decisions: &[RoutingDecision],
    predictions: &[Prediction],
    suggestions: &[LlmSuggestion],
    corpus: &CorpusIndex,
    context_window: usize,
) -> Result<Vec<AdjudicationCase>, AdjudicationError> {
    let by_turn: HashMap<&str, &Prediction> = predictions.iter().map(|p| (p.turn_id.as_str(), p)).collect();
    let suggestion_for: HashMap<&str, &LlmSuggestion> = suggestions.iter().map(|s| (s.turn_id.as_str(), s)).collect();
    decisions
        .iter()
        .filter(|d| d.escalated)
        .map(|d| {
            let id = d.turn_id.as_str();
            let prediction = by_turn.get(id).ok_or_else(|| AdjudicationError::MissingPrediction(id.to_string()))?;
            let turn = corpus.get(id).ok_or_else(|| AdjudicationError::UnknownTurn(id.to_string()))?;
            Ok(AdjudicationCase {
                turn_id: id.to_string(),
                turn: turn.clone(),
                context: corpus.context(id, context_window).to_vec(),
                response: corpus.response(id).cloned(),
                prediction: (*prediction).clone(),
                reasons: d.reasons.clone(),
                suggestion: suggestion_for.get(id).map(|s| (*s).clone()),
                status: CaseStatus::Pending,
                claimed_by: None,
                decision: None,
            })
        })
        .collect()
}

/// Cases in the order they were opened, plus the seq of the last applied event.
#[derive(Debug, Clone, PartialEq, Default, Serialize)]
pub struct AdjudicationState {
    pub last_seq: u64,
    cases: Vec<AdjudicationCase>,
    #[serde(skip)]
    position: HashMap<String, usize>,
}

impl AdjudicationState {
    pub fn cases(&self) -> &[AdjudicationCase] {
        &self.cases
    }

    pub fn case(&self, case_id: &str) -> Option<&AdjudicationCase> {
        self.position.get(case_id).map(|&i| &self.cases[i])
    }

    pub fn with_status(&self, status: CaseStatus) -> impl Iterator<Item = &AdjudicationCase> {
        self.cases.iter().filter(move |c| c.status == status)
    }

    pub fn n_decided(&self) -> usize {
        self.with_status(CaseStatus::Decided).count()
    }

    fn existing(&self, case_id: &str) -> Result<&AdjudicationCase, AdjudicationError> {
        self.case(case_id).ok_or_else(|| AdjudicationError::UnknownCase(case_id.to_string()))
    }

    /// Checks that `kind` is a legal next event without changing anything.
    pub fn check(&self, kind: &EventKind, cb: &Codebook) -> Result<(), AdjudicationError> {
        match kind {
            EventKind::CaseOpened { case } => {
                if self.position.contains_key(&case.turn_id) {
                    return Err(AdjudicationError::DuplicateCase(case.turn_id.clone()));
                }
            }
            EventKind::CaseClaimed { case_id, annotator } => {
                let case = self.existing(case_id)?;
                match (&case.status, &case.claimed_by) {
                    (CaseStatus::Decided, _) => return Err(AdjudicationError::AlreadyDecided(case_id.clone())),
                    (CaseStatus::Claimed, Some(holder)) if holder != annotator => {
                        return Err(AdjudicationError::ClaimedByOther { case_id: case_id.clone(), holder: holder.clone() })
                    }
                    _ => {}
                }
            }
            EventKind::DecisionRecorded { case_id, annotator, code } => {
                let case = self.existing(case_id)?;
                if case.status == CaseStatus::Decided {
                    return Err(AdjudicationError::AlreadyDecided(case_id.clone()));
                }
                if let Some(holder) = case.claimed_by.as_ref().filter(|h| *h != annotator) {
                    return Err(AdjudicationError::ClaimedByOther { case_id: case_id.clone(), holder: holder.clone() });
                }
                if !cb.contains(code.as_str()) {
                    return Err(AdjudicationError::CodeNotInCodebook(code.to_string()));
                }
            }
            EventKind::CaseReleased { case_id, annotator } => {
                let case = self.existing(case_id)?;
                match (&case.status, &case.claimed_by) {
                    (CaseStatus::Decided, _) => return Err(AdjudicationError::AlreadyDecided(case_id.clone())),
                    (_, None) => return Err(AdjudicationError::NotClaimed(case_id.clone())),
                    (_, Some(holder)) if holder != annotator => {
                        return Err(AdjudicationError::ClaimedByOther { case_id: case_id.clone(), holder: holder.clone() })
                    }
                    _ => {}
                }
            }
        }
        Ok(())
    }

    /// Applies a checked event. Seq continuity is the caller's concern.
    fn apply_unchecked(&mut self, event: &Event) {
        match &event.kind {
            EventKind::CaseOpened { case } => {
                let mut case = (**case).clone();
                case.status = CaseStatus::Pending;
                case.claimed_by = None;
                case.decision = None;
                self.position.insert(case.turn_id.clone(), self.cases.len());
                self.cases.push(case);
            }
            EventKind::CaseClaimed { case_id, annotator } => {
                let case = &mut self.cases[self.position[case_id]];
                case.status = CaseStatus::Claimed;
                case.claimed_by = Some(annotator.clone());
            }
            EventKind::DecisionRecorded { case_id, annotator, code } => {
                let case = &mut self.cases[self.position[case_id]];
                case.status = CaseStatus::Decided;
                case.decision = Some(Decision { code: code.clone(), annotator_id: annotator.clone(), timestamp: event.ts });
            }
            EventKind::CaseReleased { case_id, .. } => {
                let case = &mut self.cases[self.position[case_id]];
                case.status = CaseStatus::Pending;
                case.claimed_by = None;
            }
        }
        self.last_seq = event.seq;
    }
}

/// Rebuilds state from a seq-ordered event stream.
pub fn replay(events: &[Event], cb: &Codebook) -> Result<AdjudicationState, AdjudicationError> {
    let mut state = AdjudicationState::default();
    for event in events {
        if event.seq != state.last_seq + 1 {
            return Err(AdjudicationError::GapInSequence { previous: state.last_seq, found: event.seq });
        }
        state
            .check(&event.kind, cb)
            .map_err(|e| AdjudicationError::InvalidTransition { seq: event.seq, reason: e.to_string() })?;
        state.apply_unchecked(event);
    }
    Ok(state)
}

pub fn read_events(source: impl BufRead) -> Result<Vec<Event>, AdjudicationError> {
    let mut events = Vec::new();
    for (i, line) in source.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let event = serde_json::from_str(&line)
            .map_err(|e| AdjudicationError::LogParse { line: i + 1, message: e.to_string() })?;
        events.push(event);
    }
    Ok(events)
}

/// Single-writer event log. Every event is validated, written and flushed
/// to disk before it is applied to the in-memory state, so an acknowledged
/// write survives a crash.
pub struct AdjudicationLog {
    codebook: Codebook,
    state: AdjudicationState,
    events: Vec<Event>,
    sink: Option<(PathBuf, File)>,
    clock: Arc<dyn Clock>,
}

impl AdjudicationLog {
    pub fn in_memory(codebook: Codebook, clock: Arc<dyn Clock>) -> Self {
        Self { codebook, state: AdjudicationState::default(), events: Vec::new(), sink: None, clock }
    }

    /// Opens `path` for appending, replaying whatever it already holds.
    pub fn open(path: impl AsRef<Path>, codebook: Codebook, clock: Arc<dyn Clock>) -> Result<Self, AdjudicationError> {
        let path = path.as_ref().to_path_buf();
        let unwritable = |source| AdjudicationError::LogUnwritable { path: path.clone(), source };
        let events = match File::open(&path) {
            Ok(f) if f.metadata().map_err(unwritable)?.is_dir() => {
                return Err(unwritable(std::io::Error::new(std::io::ErrorKind::IsADirectory, "is a directory")))
            }
            Ok(f) => read_events(BufReader::new(f))?,
            Err(e) if e.kind() == std::io::ErrorKind::NotFound => Vec::new(),
            Err(e) => return Err(unwritable(e)),
        };
        let state = replay(&events, &codebook)?;
        let file = OpenOptions::new().create(true).append(true).open(&path).map_err(unwritable)?;
        Ok(Self { codebook, state, events, sink: Some((path, file)), clock })
    }

    /// Opens the log and records a `CaseOpened` event for every case not
    /// already present.
    pub fn open_with_cases(
        path: impl AsRef<Path>,
        codebook: Codebook,
        cases: &[AdjudicationCase],
        clock: Arc<dyn Clock>,
    ) -> Result<Self, AdjudicationError> {
        let mut log = Self::open(path, codebook, clock)?;
        log.open_cases(cases)?;
        Ok(log)
    }

    pub fn open_cases(&mut self, cases: &[AdjudicationCase]) -> Result<(), AdjudicationError> {
        for case in cases {
            if self.state.case(&case.turn_id).is_none() {
                self.append(EventKind::CaseOpened { case: Box::new(case.clone()) }, None)?;
            }
        }
        Ok(())
    }

    pub fn codebook(&self) -> &Codebook {
        &self.codebook
    }

    pub fn state(&self) -> &AdjudicationState {
        &self.state
    }

    pub fn events(&self) -> &[Event] {
        &self.events
    }

    pub fn last_seq(&self) -> u64 {
        self.state.last_seq
    }

    pub fn path(&self) -> Option<&Path> {
        self.sink.as_ref().map(|(p, _)| p.as_path())
    }

    /// Appends an event. With `expected_seq`, the write only goes through if
    /// the log is still at that seq.
    pub fn append(&mut self, kind: EventKind, expected_seq: Option<u64>) -> Result<Event, AdjudicationError> {
        if let Some(expected) = expected_seq.filter(|&e| e != self.state.last_seq) {
            return Err(AdjudicationError::SeqConflict { expected, actual: self.state.last_seq });
        }
        self.state.check(&kind, &self.codebook)?;
        let event = Event { seq: self.state.last_seq + 1, ts: self.clock.now(), kind };
        if let Some((path, file)) = &mut self.sink {
            let mut line = serde_json::to_vec(&event).expect("event serializes");
            line.push(b'\n');
            file.write_all(&line)
                .and_then(|_| file.flush())
                .and_then(|_| file.sync_data())
                .map_err(|source| AdjudicationError::LogUnwritable { path: path.clone(), source })?;
        }
        self.state.apply_unchecked(&event);
        self.events.push(event.clone());
        Ok(event)
    }

    pub fn claim(&mut self, case_id: &str, annotator: &str, expected_seq: Option<u64>) -> Result<Event, AdjudicationError> {
        self.append(EventKind::CaseClaimed { case_id: case_id.into(), annotator: annotator.into() }, expected_seq)
    }

    pub fn release(&mut self, case_id: &str, annotator: &str, expected_seq: Option<u64>) -> Result<Event, AdjudicationError> {
        self.append(EventKind::CaseReleased { case_id: case_id.into(), annotator: annotator.into() }, expected_seq)
    }

    /// Records the expert's code for a case. Codes are matched against ids
    /// exactly; anything else is `CodeNotInCodebook`.
    pub fn decide(
        &mut self,
        case_id: &str,
        annotator: &str,
        code: &str,
        expected_seq: Option<u64>,
    ) -> Result<Event, AdjudicationError> {
        self.state.existing(case_id)?;
        let code = CodeId::new(code).map_err(|_| AdjudicationError::CodeNotInCodebook(code.to_string()))?;
        self.append(EventKind::DecisionRecorded { case_id: case_id.into(), annotator: annotator.into(), code }, expected_seq)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ResolutionMode {
    ClassifierOnly,
    LlmOnly,
    HumanInLoop,
    ReviewAllLowConf,
}

impl ResolutionMode {
    pub const ALL: [ResolutionMode; 4] =
        [ResolutionMode::ClassifierOnly, ResolutionMode::LlmOnly, ResolutionMode::HumanInLoop, ResolutionMode::ReviewAllLowConf];

    pub fn name(self) -> &'static str {
        match self {
            ResolutionMode::ClassifierOnly => "classifier_only",
            ResolutionMode::LlmOnly => "llm_only",
            ResolutionMode::HumanInLoop => "human_in_loop",
            ResolutionMode::ReviewAllLowConf => "review_all_low_conf",
        }
    }
}

impl FromStr for ResolutionMode {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Self::ALL.into_iter().find(|m| m.name() == s).ok_or_else(|| format!("unknown resolution mode {s:?}"))
    }
}

/// Gold labels carried on corpus turns, keyed by turn id.
pub fn gold_from_corpus(corpus: &[DialogueTurn]) -> BTreeMap<String, CodeId> {
    corpus.iter().filter_map(|t| t.gold.clone().map(|g| (t.turn_id.clone(), g))).collect()
}

/// Produces one final label per predicted turn, in corpus order. `gold`
/// overrides the corpus gold fields when given; only the oracle mode uses it.
pub fn resolve_final(
    corpus: &[DialogueTurn],
    predictions: &[Prediction],
    cases: &[AdjudicationCase],
    gold: Option<&BTreeMap<String, CodeId>>,
    mode: ResolutionMode,
) -> Result<FinalLabeling, AdjudicationError> {
    let mut by_turn: HashMap<&str, &Prediction> = predictions.iter().map(|p| (p.turn_id.as_str(), p)).collect();
    let case_for: HashMap<&str, &AdjudicationCase> = cases.iter().map(|c| (c.turn_id.as_str(), c)).collect();
    let corpus_gold;
    let gold = match gold {
        Some(g) => g,
        None => {
            corpus_gold = gold_from_corpus(corpus);
            &corpus_gold
        }
    };

    let mut ordered: Vec<&DialogueTurn> = corpus.iter().collect();
    ordered.sort_by(|a, b| (&a.session_id, a.index).cmp(&(&b.session_id, b.index)));

    let mut labels = Vec::with_capacity(predictions.len());
    for turn in ordered {
        let Some(prediction) = by_turn.remove(turn.turn_id.as_str()) else { continue };
        let case = case_for.get(turn.turn_id.as_str());
        let classifier = (prediction.label.clone(), Provenance::Classifier);
        let (code, provenance) = match (mode, case) {
            (ResolutionMode::LlmOnly, Some(case)) => case
                .suggestion
                .as_ref()
                .and_then(|s| s.candidates.first())
                .map_or(classifier, |c| (c.clone(), Provenance::Llm)),
            (ResolutionMode::HumanInLoop, Some(case)) => case
                .decision
                .as_ref()
                .filter(|_| case.status == CaseStatus::Decided)
                .map_or(classifier, |d| (d.code.clone(), Provenance::Human)),
            (ResolutionMode::ReviewAllLowConf, Some(case)) if case.reasons.contains(&EscalationReason::LowConfidence) => {
                let g = gold.get(&turn.turn_id).ok_or_else(|| AdjudicationError::MissingGold(turn.turn_id.clone()))?;
                (g.clone(), Provenance::Oracle)
            }
            _ => classifier,
        };
        labels.push(FinalLabel { turn_id: turn.turn_id.clone(), code, provenance });
    }
    if let Some(orphan) = by_turn.keys().min() {
        return Err(AdjudicationError::UnknownTurn(orphan.to_string()));
    }
    Ok(FinalLabeling { labels })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::codebooks;
    use crate::domain::{validate_prediction, ParseStatus, PredictionRecord, Speaker};
    use crate::router::{route_batch, RouterConfig};
    use proptest::prelude::*;
    use std::collections::BTreeSet;

    fn pred(turn: &str, label: &str, conf: f64) -> Prediction {
        let other = if label == "RQ" { "SS" } else { "RQ" };
        let probs = [(label.to_string(), conf), (other.to_string(), 1.0 - conf)].into_iter().collect();
        validate_prediction(
            PredictionRecord { turn_id: turn.into(), model_id: "m".into(), probs, extra: Default::default() },
            &codebooks::history_taking(),
        )
        .unwrap()
    }

    fn corpus(n: usize) -> Vec<DialogueTurn> {
        (0..n)
            .map(|i| DialogueTurn::new(format!("t{i}"), "s", i as u32, Speaker::Student, format!("q{i}"), CodeId::new("RQ").ok()))
            .collect()
    }

    fn escalated(id: &str, reasons: &[EscalationReason]) -> RoutingDecision {
        RoutingDecision {
            turn_id: id.into(),
            escalated: !reasons.is_empty(),
            reasons: reasons.iter().copied().collect(),
            conf_threshold: 0.6,
            rare_threshold: 0.05,
        }
    }

    fn log_with(cases: &[AdjudicationCase]) -> AdjudicationLog {
        let mut log = AdjudicationLog::in_memory(codebooks::history_taking(), Arc::new(SteppingClock::default()));
        log.open_cases(cases).unwrap();
        log
    }

    fn sample_cases() -> (Vec<DialogueTurn>, Vec<Prediction>, Vec<AdjudicationCase>) {
        let turns = corpus(4);
        let preds = vec![pred("t0", "RQ", 0.9), pred("t1", "SS", 0.55), pred("t2", "SS", 0.9), pred("t3", "RQ", 0.55)];
        let decisions = vec![
            escalated("t0", &[]),
            escalated("t1", &[EscalationReason::LowConfidence]),
            escalated("t2", &[EscalationReason::RareCode]),
            escalated("t3", &[EscalationReason::LowConfidence]),
        ];
        let index = CorpusIndex::new(turns.clone());
        let cases = open_queue(&decisions, &preds, &[], &index, DEFAULT_CONTEXT_WINDOW).unwrap();
        (turns, preds, cases)
    }

    #[test]
    fn queue_sizes_and_context() {
        let (_, _, cases) = sample_cases();
        assert_eq!(cases.len(), 3);
        assert!(cases.iter().all(|c| c.status == CaseStatus::Pending));
        assert_eq!(cases[0].context.len(), 1);

        let index = CorpusIndex::new(corpus(2));
        let first = open_queue(&[escalated("t0", &[EscalationReason::RareCode])], &[pred("t0", "RQ", 0.9)], &[], &index, 5).unwrap();
        assert!(first[0].context.is_empty());
        assert!(open_queue(&[escalated("t0", &[])], &[], &[], &index, 5).unwrap().is_empty());
        assert!(matches!(
            open_queue(&[escalated("t1", &[EscalationReason::RareCode])], &[], &[], &index, 5),
            Err(AdjudicationError::MissingPrediction(_))
        ));
    }

    #[test]
    fn decision_lifecycle() {
        let (_, _, cases) = sample_cases();
        let mut log = log_with(&cases);
        log.decide("t1", "e1", "RQ", None).unwrap();
        assert_eq!(log.state().case("t1").unwrap().status, CaseStatus::Decided);
        assert!(matches!(log.decide("t1", "e1", "SS", None), Err(AdjudicationError::AlreadyDecided(_))));
        assert!(matches!(log.decide("t2", "e1", "XX", None), Err(AdjudicationError::CodeNotInCodebook(_))));
        assert!(matches!(log.decide("t2", "e1", "not a code", None), Err(AdjudicationError::CodeNotInCodebook(_))));
        assert!(matches!(log.decide("nope", "e1", "RQ", None), Err(AdjudicationError::UnknownCase(_))));
    }

    #[test]
    fn claims_are_first_write_wins() {
        let (_, _, cases) = sample_cases();
        let mut log = log_with(&cases);
        log.claim("t1", "alice", None).unwrap();
        assert!(matches!(log.claim("t1", "bob", None), Err(AdjudicationError::ClaimedByOther { .. })));
        assert!(matches!(log.decide("t1", "bob", "RQ", None), Err(AdjudicationError::ClaimedByOther { .. })));
        assert!(matches!(log.release("t1", "bob", None), Err(AdjudicationError::ClaimedByOther { .. })));
        log.release("t1", "alice", None).unwrap();
        assert!(matches!(log.release("t1", "alice", None), Err(AdjudicationError::NotClaimed(_))));
        log.claim("t1", "bob", None).unwrap();
        log.decide("t1", "bob", "RQ", None).unwrap();
    }

    #[test]
    fn expected_seq_guards_writes() {
        let (_, _, cases) = sample_cases();
        let mut log = log_with(&cases);
        let at = log.last_seq();
        log.claim("t1", "alice", Some(at)).unwrap();
        assert!(matches!(
            log.claim("t2", "bob", Some(at)),
            Err(AdjudicationError::SeqConflict { expected, actual }) if expected == at && actual == at + 1
        ));
    }

    #[test]
    fn event_line_shape() {
        let event = Event {
            seq: 3,
            ts: Utc.with_ymd_and_hms(2024, 1, 1, 0, 0, 0).unwrap(),
            kind: EventKind::DecisionRecorded { case_id: "t1".into(), annotator: "e1".into(), code: CodeId::new("RQ").unwrap() },
        };
        let v = serde_json::to_value(&event).unwrap();
        assert_eq!(
            v,
            serde_json::json!({"seq": 3, "ts": "2024-01-01T00:00:00Z", "kind": "DecisionRecorded",
                "payload": {"case_id": "t1", "annotator": "e1", "code": "RQ"}})
        );
        assert_eq!(serde_json::from_value::<Event>(v).unwrap(), event);
    }

    #[test]
    fn replay_matches_live_state_and_survives_reopen() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("events.jsonl");
        let (_, _, cases) = sample_cases();
        let cb = codebooks::history_taking();
        let clock = Arc::new(SteppingClock::default());
        let live = {
            let mut log = AdjudicationLog::open_with_cases(&path, cb.clone(), &cases, clock.clone()).unwrap();
            log.claim("t1", "e1", None).unwrap();
            log.decide("t1", "e1", "PQ", None).unwrap();
            log.claim("t3", "e1", None).unwrap();
            log.state().clone()
        };
        let events = read_events(BufReader::new(File::open(&path).unwrap())).unwrap();
        assert_eq!(replay(&events, &cb).unwrap(), live);
        let reopened = AdjudicationLog::open_with_cases(&path, cb.clone(), &cases, clock).unwrap();
        assert_eq!(reopened.state(), &live);
        assert_eq!(reopened.events().len(), events.len());

        assert_eq!(replay(&[], &cb).unwrap(), AdjudicationState::default());
        let mut gapped = events.clone();
        gapped.remove(1);
        assert!(matches!(replay(&gapped, &cb), Err(AdjudicationError::GapInSequence { previous: 1, found: 3 })));
        let mut doubled = events.clone();
        let mut second = doubled.iter().find(|e| e.kind.name() == "DecisionRecorded").unwrap().clone();
        second.seq = doubled.len() as u64 + 1;
        doubled.push(second);
        assert!(matches!(replay(&doubled, &cb), Err(AdjudicationError::InvalidTransition { .. })));
    }

    #[test]
    fn directory_log_path_is_unwritable() {
        let dir = tempfile::tempdir().unwrap();
        let r = AdjudicationLog::open(dir.path(), codebooks::history_taking(), Arc::new(SystemClock));
        assert!(matches!(r, Err(AdjudicationError::LogUnwritable { .. })));
    }

    #[test]
    fn resolution_modes() {
        let (turns, preds, cases) = sample_cases();
        let classifier = resolve_final(&turns, &preds, &cases, None, ResolutionMode::ClassifierOnly).unwrap();
        assert_eq!(classifier.codes(), ["RQ", "SS", "SS", "RQ"].map(|c| CodeId::new(c).unwrap()));
        assert_eq!(classifier.count(Provenance::Classifier), 4);

        let untouched = resolve_final(&turns, &preds, &cases, None, ResolutionMode::HumanInLoop).unwrap();
        assert_eq!(untouched, classifier);

        let mut log = log_with(&cases);
        log.decide("t1", "e1", "PQ", None).unwrap();
        let hil = resolve_final(&turns, &preds, log.state().cases(), None, ResolutionMode::HumanInLoop).unwrap();
        assert_eq!(hil.labels[1].code, "PQ");
        assert_eq!(hil.labels[1].provenance, Provenance::Human);
        assert_eq!(hil.count(Provenance::Human), 1);

        let oracle = resolve_final(&turns, &preds, &cases, None, ResolutionMode::ReviewAllLowConf).unwrap();
        let provs: Vec<_> = oracle.labels.iter().map(|l| l.provenance).collect();
        assert_eq!(provs, [Provenance::Classifier, Provenance::Oracle, Provenance::Classifier, Provenance::Oracle]);
        assert_eq!(oracle.labels[1].code, "RQ");

        let mut nogold = turns.clone();
        nogold.iter_mut().for_each(|t| t.gold = None);
        assert!(matches!(
            resolve_final(&nogold, &preds, &cases, None, ResolutionMode::ReviewAllLowConf),
            Err(AdjudicationError::MissingGold(_))
        ));
        assert!(resolve_final(&nogold, &preds, &cases, None, ResolutionMode::HumanInLoop).is_ok());
    }

    #[test]
    fn llm_only_takes_first_candidate() {
        let (turns, preds, mut cases) = sample_cases();
        let suggestion = |candidates: &[&str], status| LlmSuggestion {
            turn_id: String::new(),
            candidates: candidates.iter().map(|c| CodeId::new(*c).unwrap()).collect(),
            unknown_tokens: vec![],
            rationale: None,
            raw_response: String::new(),
            provider_id: "mock".into(),
            parse_status: status,
        };
        cases[0].suggestion = Some(suggestion(&["FQ", "CC"], ParseStatus::Ok));
        cases[1].suggestion = Some(suggestion(&[], ParseStatus::Failed));
        let llm = resolve_final(&turns, &preds, &cases, None, ResolutionMode::LlmOnly).unwrap();
        assert_eq!(llm.labels[1].code, "FQ");
        assert_eq!(llm.labels[1].provenance, Provenance::Llm);
        assert_eq!(llm.labels[2].provenance, Provenance::Classifier);
        assert_eq!(llm.count(Provenance::Llm), 1);
    }

    #[test]
    fn mode_names_round_trip() {
        for m in ResolutionMode::ALL {
            assert_eq!(m.name().parse::<ResolutionMode>().unwrap(), m);
            assert_eq!(serde_json::to_value(m).unwrap(), m.name());
        }
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(200))]

        // Human decisions equal to gold never lower observed agreement, and
        // provenance is human exactly on decided cases.
        #[test]
        fn gold_corrections_raise_agreement(
            rows in prop::collection::vec((0usize..12, 0usize..12, 0.2f64..1.0, any::<bool>()), 1..60)
        ) {
            let cb = codebooks::history_taking();
            let ids: Vec<CodeId> = cb.ids().cloned().collect();
            let mut turns = Vec::new();
            let mut preds = Vec::new();
            for (i, (g, p, conf, _)) in rows.iter().enumerate() {
                turns.push(DialogueTurn::new(format!("t{i}"), "s", i as u32, Speaker::Student, "x", Some(ids[*g].clone())));
                let rest = (1.0 - conf) / 11.0;
                let probs = ids.iter().map(|c| (c.to_string(), if *c == ids[*p] { *conf } else { rest })).collect();
                preds.push(validate_prediction(
                    PredictionRecord { turn_id: format!("t{i}"), model_id: "m".into(), probs, extra: Default::default() }, &cb).unwrap());
            }
            let routed = route_batch(&preds, &crate::domain::PrevalenceTable::new(
                crate::domain::PrevalenceSource::Reference,
                ids.iter().map(|c| (c.to_string(), 1.0 / 12.0)).collect(), &cb).unwrap(), &RouterConfig::default()).unwrap();
            let index = CorpusIndex::new(turns.clone());
            let cases = open_queue(&routed.decisions, &preds, &[], &index, 5).unwrap();
            let mut log = log_with(&cases);
            let mut decided = BTreeSet::new();
            for (i, (g, _, _, take)) in rows.iter().enumerate() {
                let id = format!("t{i}");
                if *take && log.state().case(&id).is_some() {
                    log.decide(&id, "e", ids[*g].as_str(), None).unwrap();
                    decided.insert(id);
                }
            }
            let gold: Vec<CodeId> = rows.iter().map(|r| ids[r.0].clone()).collect();
            let po = |l: &FinalLabeling| l.codes().iter().zip(&gold).filter(|(a, b)| a == b).count();
            let base = resolve_final(&turns, &preds, log.state().cases(), None, ResolutionMode::ClassifierOnly).unwrap();
            let hil = resolve_final(&turns, &preds, log.state().cases(), None, ResolutionMode::HumanInLoop).unwrap();
            prop_assert!(po(&hil) >= po(&base));
            prop_assert_eq!(hil.labels.len(), turns.len());
            for l in &hil.labels {
                prop_assert_eq!(l.provenance == Provenance::Human, decided.contains(&l.turn_id));
            }
        }
    }
}
