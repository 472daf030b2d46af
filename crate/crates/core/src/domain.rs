//! Shared domain types and their validation.
//!
//! Everything here is plain data: values are validated once at construction
//! and never mutated afterwards, so they can be shared freely across threads.

use std::borrow::Borrow;
use std::collections::{BTreeMap, BTreeSet};
use std::fmt;

use chrono::{DateTime, Utc};
use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Tolerance on the sum of a classifier probability vector.
pub const PROB_SUM_TOLERANCE: f64 = 1e-6;

/// Tolerance on the sum of a prevalence table loaded from an external file.
pub const PREVALENCE_SUM_TOLERANCE: f64 = 1e-6;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum DomainError {
    #[error("invalid code id {0:?}: must be non-empty without whitespace, ',' or '/'")]
    InvalidCodeId(String),
    #[error("unknown code {0:?}")]
    UnknownCode(String),
    #[error("duplicate code id {0:?}")]
    DuplicateCodeId(String),
    #[error("codebook needs at least 2 codes, got {0}")]
    TooFewCodes(usize),
    #[error("probabilities sum to {sum}, expected 1 within {PROB_SUM_TOLERANCE}")]
    ProbSumMismatch { sum: f64 },
    #[error("negative probability {value} for code {code:?}")]
    NegativeProb { code: String, value: f64 },
    #[error("non-finite probability for code {0:?}")]
    NonFiniteProb(String),
    #[error("prevalence {value} for code {code:?} outside [0, 1]")]
    PrevalenceOutOfRange { code: String, value: f64 },
    #[error("prevalence sums to {0}, expected 1")]
    PrevalenceSum(f64),
    #[error("empty input")]
    EmptyInput,
    #[error("turn {0:?} has empty text")]
    EmptyText(String),
    #[error("embedding set: {0}")]
    InvalidEmbedding(String),
}

/// Short code identifier such as `RQ` or `Verification`.
///
/// Whitespace, commas and slashes are reserved as delimiters in model
/// responses, so they can never appear inside an id.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(try_from = "String", into = "String")]
pub struct CodeId(String);

impl CodeId {
    pub fn new(id: impl Into<String>) -> Result<Self, DomainError> {
        let id = id.into();
        if id.is_empty() || id.chars().any(|c| c.is_whitespace() || c == ',' || c == '/') {
            return Err(DomainError::InvalidCodeId(id));
        }
        Ok(Self(id))
    }

    pub fn as_str(&self) -> &str {
        &self.0
    }
}

impl TryFrom<String> for CodeId {
    type Error = DomainError;

    fn try_from(value: String) -> Result<Self, Self::Error> {
        Self::new(value)
    }
}

impl TryFrom<&str> for CodeId {
    type Error = DomainError;

    fn try_from(value: &str) -> Result<Self, Self::Error> {
        Self::new(value)
    }
}

impl From<CodeId> for String {
    fn from(value: CodeId) -> Self {
        value.0
    }
}

impl Borrow<str> for CodeId {
    fn borrow(&self) -> &str {
        &self.0
    }
}

impl AsRef<str> for CodeId {
    fn as_ref(&self) -> &str {
        &self.0
    }
}

impl fmt::Display for CodeId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

impl PartialEq<str> for CodeId {
    fn eq(&self, other: &str) -> bool {
        self.0 == other
    }
}

impl PartialEq<&str> for CodeId {
    fn eq(&self, other: &&str) -> bool {
        self.0 == *other
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Code {
    pub id: CodeId,
    pub name: String,
    #[serde(default)]
    pub definition: String,
    #[serde(default)]
    pub examples: Vec<String>,
    #[serde(default)]
    pub keywords: Vec<String>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum LabelPolicy {
    #[default]
    Single,
    MultiAllowed,
}

/// An ordered, validated coding scheme. Code order is significant: it breaks
/// argmax ties and fixes row/column order in every report.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Codebook {
    id: String,
    label_policy: LabelPolicy,
    codes: Vec<Code>,
}

impl Codebook {
    pub fn new(id: impl Into<String>, label_policy: LabelPolicy, codes: Vec<Code>) -> Result<Self, DomainError> {
        if codes.len() < 2 {
            return Err(DomainError::TooFewCodes(codes.len()));
        }
        let mut seen = BTreeSet::new();
        for code in &codes {
            if !seen.insert(code.id.as_str()) {
                return Err(DomainError::DuplicateCodeId(code.id.to_string()));
            }
        }
        Ok(Self { id: id.into(), label_policy, codes })
    }

    pub fn id(&self) -> &str {
        &self.id
    }

    pub fn label_policy(&self) -> LabelPolicy {
        self.label_policy
    }

    pub fn codes(&self) -> &[Code] {
        &self.codes
    }

    pub fn len(&self) -> usize {
        self.codes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.codes.is_empty()
    }

    pub fn ids(&self) -> impl Iterator<Item = &CodeId> + '_ {
        self.codes.iter().map(|c| &c.id)
    }

    pub fn index_of(&self, id: &str) -> Option<usize> {
        self.codes.iter().position(|c| c.id.as_str() == id)
    }

    pub fn contains(&self, id: &str) -> bool {
        self.index_of(id).is_some()
    }

    pub fn get(&self, id: &str) -> Option<&Code> {
        self.codes.iter().find(|c| c.id.as_str() == id)
    }

    /// Resolves a code by id or display name, ignoring case.
    pub fn lookup(&self, token: &str) -> Option<&Code> {
        let token = token.trim().to_lowercase();
        self.codes
            .iter()
            .find(|c| c.id.as_str().to_lowercase() == token)
            .or_else(|| self.codes.iter().find(|c| c.name.trim().to_lowercase() == token))
    }

    /// Validates and converts a raw id into a codebook member.
    pub fn code_id(&self, id: &str) -> Result<CodeId, DomainError> {
        self.get(id).map(|c| c.id.clone()).ok_or_else(|| DomainError::UnknownCode(id.to_string()))
    }
}

impl<'de> Deserialize<'de> for Codebook {
    fn deserialize<D: serde::Deserializer<'de>>(deserializer: D) -> Result<Self, D::Error> {
        #[derive(Deserialize)]
        struct Raw {
            id: String,
            #[serde(default)]
            label_policy: LabelPolicy,
            codes: Vec<Code>,
        }
        let raw = Raw::deserialize(deserializer)?;
        Codebook::new(raw.id, raw.label_policy, raw.codes).map_err(serde::de::Error::custom)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Speaker {
    Student,
    Counterpart,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DialogueTurn {
    pub turn_id: String,
    pub session_id: String,
    pub index: u32,
    pub speaker: Speaker,
    pub text: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub gold: Option<CodeId>,
    /// Fields this crate does not interpret, kept for round-tripping.
    #[serde(flatten)]
    pub extra: serde_json::Map<String, serde_json::Value>,
}

impl DialogueTurn {
    pub fn new(
        turn_id: impl Into<String>,
        session_id: impl Into<String>,
        index: u32,
        speaker: Speaker,
        text: impl Into<String>,
        gold: Option<CodeId>,
    ) -> Self {
        Self {
            turn_id: turn_id.into(),
            session_id: session_id.into(),
            index,
            speaker,
            text: text.into(),
            gold,
            extra: serde_json::Map::new(),
        }
    }
}

/// Classifier output as it arrives on the wire, before validation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PredictionRecord {
    pub turn_id: String,
    pub model_id: String,
    pub probs: BTreeMap<String, f64>,
    #[serde(flatten)]
    pub extra: serde_json::Map<String, serde_json::Value>,
}

/// A validated classifier prediction with its derived label and confidence.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Prediction {
    pub turn_id: String,
    pub model_id: String,
    pub probs: BTreeMap<CodeId, f64>,
    pub label: CodeId,
    pub confidence: f64,
    #[serde(default, skip_serializing_if = "serde_json::Map::is_empty")]
    pub extra: serde_json::Map<String, serde_json::Value>,
}

impl Prediction {
    pub fn prob(&self, code: &str) -> f64 {
        self.probs.get(code).copied().unwrap_or(0.0)
    }

    pub fn to_record(&self) -> PredictionRecord {
        PredictionRecord {
            turn_id: self.turn_id.clone(),
            model_id: self.model_id.clone(),
            probs: self.probs.iter().map(|(k, v)| (k.to_string(), *v)).collect(),
            extra: self.extra.clone(),
        }
    }
}

/// Checks a raw prediction against the codebook and derives its label
/// (argmax, ties to the earlier code in codebook order) and confidence.
pub fn validate_prediction(record: PredictionRecord, cb: &Codebook) -> Result<Prediction, DomainError> {
    let mut probs = BTreeMap::new();
    for (key, &value) in &record.probs {
        let id = cb.code_id(key)?;
        if !value.is_finite() {
            return Err(DomainError::NonFiniteProb(key.clone()));
        }
        if value < 0.0 {
            return Err(DomainError::NegativeProb { code: key.clone(), value });
        }
        probs.insert(id, value);
    }
    let sum: f64 = probs.values().sum();
    if (sum - 1.0).abs() > PROB_SUM_TOLERANCE {
        return Err(DomainError::ProbSumMismatch { sum });
    }

    let mut best: Option<(&CodeId, f64)> = None;
    for id in cb.ids() {
        let p = probs.get(id).copied().unwrap_or(0.0);
        if best.is_none_or(|(_, b)| p > b) {
            best = Some((id, p));
        }
    }
    let (label, confidence) = best.map(|(id, p)| (id.clone(), p)).expect("codebook has at least two codes");

    Ok(Prediction {
        turn_id: record.turn_id,
        model_id: record.model_id,
        probs,
        label,
        confidence,
        extra: record.extra,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PrevalenceSource {
    #[default]
    Reference,
    Batch,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PrevalenceTable {
    pub source: PrevalenceSource,
    pub prevalence: BTreeMap<CodeId, f64>,
}

impl PrevalenceTable {
    /// Validates an externally supplied table: keys in the codebook, values
    /// in `[0, 1]`, total within [`PREVALENCE_SUM_TOLERANCE`] of one.
    pub fn new(source: PrevalenceSource, prevalence: BTreeMap<String, f64>, cb: &Codebook) -> Result<Self, DomainError> {
        let mut table = BTreeMap::new();
        for (key, value) in prevalence {
            let id = cb.code_id(&key)?;
            if !(0.0..=1.0).contains(&value) {
                return Err(DomainError::PrevalenceOutOfRange { code: key, value });
            }
            table.insert(id, value);
        }
        let sum: f64 = table.values().sum();
        if (sum - 1.0).abs() > PREVALENCE_SUM_TOLERANCE {
            return Err(DomainError::PrevalenceSum(sum));
        }
        Ok(Self { source, prevalence: table })
    }

    pub fn get(&self, code: &str) -> Option<f64> {
        self.prevalence.get(code).copied()
    }
}

/// Empirical code fractions over a label sequence. Every codebook code gets
/// an entry; codes that never occur get zero.
pub fn derive_prevalence(labels: &[CodeId], cb: &Codebook, source: PrevalenceSource) -> Result<PrevalenceTable, DomainError> {
    if labels.is_empty() {
        return Err(DomainError::EmptyInput);
    }
    let mut counts = vec![0usize; cb.len()];
    for label in labels {
        let idx = cb.index_of(label.as_str()).ok_or_else(|| DomainError::UnknownCode(label.to_string()))?;
        counts[idx] += 1;
    }
    let n = labels.len() as f64;
    let prevalence = cb.ids().zip(counts).map(|(id, c)| (id.clone(), c as f64 / n)).collect();
    Ok(PrevalenceTable { source, prevalence })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum EscalationReason {
    /// Rare-code flags sort first; the review queue is tail-first.
    RareCode,
    LowConfidence,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RoutingDecision {
    pub turn_id: String,
    pub escalated: bool,
    pub reasons: BTreeSet<EscalationReason>,
    pub conf_threshold: f64,
    pub rare_threshold: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ParseStatus {
    Ok,
    Partial,
    Failed,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LlmSuggestion {
    pub turn_id: String,
    pub candidates: Vec<CodeId>,
    /// Tokens in the response that matched no code.
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub unknown_tokens: Vec<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub rationale: Option<String>,
    pub raw_response: String,
    pub provider_id: String,
    pub parse_status: ParseStatus,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum CaseStatus {
    Pending,
    Claimed,
    Decided,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Decision {
    pub code: CodeId,
    pub annotator_id: String,
    pub timestamp: DateTime<Utc>,
}

/// One escalated turn awaiting (or having received) human review. The case
/// id is the turn id.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AdjudicationCase {
    pub turn_id: String,
    pub turn: DialogueTurn,
    /// Preceding turns of the same session, oldest first.
    pub context: Vec<DialogueTurn>,
    /// The counterpart's reply to this turn, when the corpus has one.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub response: Option<DialogueTurn>,
    pub prediction: Prediction,
    pub reasons: BTreeSet<EscalationReason>,
    pub suggestion: Option<LlmSuggestion>,
    pub status: CaseStatus,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub claimed_by: Option<String>,
    pub decision: Option<Decision>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Provenance {
    Classifier,
    Llm,
    Human,
    /// Gold label substituted by the idealised review-everything scenario.
    Oracle,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FinalLabel {
    pub turn_id: String,
    pub code: CodeId,
    pub provenance: Provenance,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct FinalLabeling {
    pub labels: Vec<FinalLabel>,
}

impl FinalLabeling {
    pub fn codes(&self) -> Vec<CodeId> {
        self.labels.iter().map(|l| l.code.clone()).collect()
    }

    pub fn count(&self, provenance: Provenance) -> usize {
        self.labels.iter().filter(|l| l.provenance == provenance).count()
    }
}

/// Answer to one binary "does this turn belong to code X" question.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Verdict {
    Yes,
    No,
    /// The response was neither yes nor no.
    Unparsed,
}

/// Binary verdicts laid out turn-major: row `t`, column `c` is the answer for
/// `turn_ids[t]` against `codes[c]`.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct VerdictMatrix {
    pub turn_ids: Vec<String>,
    pub codes: Vec<CodeId>,
    pub verdicts: Vec<Verdict>,
}

impl VerdictMatrix {
    pub fn get(&self, turn: usize, code: usize) -> Verdict {
        self.verdicts[turn * self.codes.len() + code]
    }

    pub fn len(&self) -> usize {
        self.verdicts.len()
    }

    pub fn is_empty(&self) -> bool {
        self.verdicts.is_empty()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CodeKappa {
    pub code: CodeId,
    pub kappa: f64,
    pub support: usize,
    pub degenerate: bool,
}

/// Square count matrix: `counts[g][p]` is the number of turns with gold code
/// `codes[g]` predicted as `codes[p]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConfusionMatrix {
    pub codes: Vec<CodeId>,
    pub counts: Vec<Vec<usize>>,
}

impl ConfusionMatrix {
    pub fn total(&self) -> usize {
        self.counts.iter().flatten().sum()
    }

    pub fn row_sum(&self, gold: usize) -> usize {
        self.counts[gold].iter().sum()
    }

    pub fn col_sum(&self, pred: usize) -> usize {
        self.counts.iter().map(|row| row[pred]).sum()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReliabilityReport {
    pub n: usize,
    pub overall_kappa: f64,
    pub per_code: Vec<CodeKappa>,
    pub confusion: ConfusionMatrix,
    pub head_codes: Vec<CodeId>,
    pub tail_codes: Vec<CodeId>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EmbeddingRow {
    pub code: CodeId,
    pub text: String,
    pub vector: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EmbeddingSet {
    dim: usize,
    rows: Vec<EmbeddingRow>,
}

impl EmbeddingSet {
    pub fn new(rows: Vec<EmbeddingRow>) -> Result<Self, DomainError> {
        let dim = rows.first().map(|r| r.vector.len()).ok_or(DomainError::EmptyInput)?;
        if dim == 0 {
            return Err(DomainError::InvalidEmbedding("zero-dimensional vectors".into()));
        }
        for (i, row) in rows.iter().enumerate() {
            if row.vector.len() != dim {
                return Err(DomainError::InvalidEmbedding(format!(
                    "row {i} has dimension {}, expected {dim}",
                    row.vector.len()
                )));
            }
            if row.vector.iter().any(|x| !x.is_finite()) {
                return Err(DomainError::InvalidEmbedding(format!("row {i} has non-finite entries")));
            }
            if row.vector.iter().all(|&x| x == 0.0) {
                return Err(DomainError::InvalidEmbedding(format!("row {i} has zero norm")));
            }
        }
        Ok(Self { dim, rows })
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn rows(&self) -> &[EmbeddingRow] {
        &self.rows
    }

    /// Distinct codes in first-appearance order.
    pub fn codes(&self) -> Vec<CodeId> {
        let mut seen = BTreeSet::new();
        self.rows.iter().filter(|r| seen.insert(r.code.clone())).map(|r| r.code.clone()).collect()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimilaritySummary {
    pub mean: f64,
    /// Sample standard deviation (n - 1 denominator).
    pub sd: f64,
    pub n_pairs: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PcaResult {
    pub variance_ratios: Vec<f64>,
    /// Unit principal directions, one per component.
    pub components: Vec<Vec<f64>>,
    /// Projection of each input row, in input order.
    pub projected: Vec<Vec<f64>>,
    /// Code of each projected row.
    pub row_codes: Vec<CodeId>,
    /// Mean projection per code, in first-appearance order.
    pub centroids: Vec<(CodeId, Vec<f64>)>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimilarityAudit {
    pub codes: Vec<CodeId>,
    /// Mean cross-exemplar cosine for each code pair. The diagonal holds the
    /// mean over distinct exemplar pairs within a code, or `None` when a code
    /// has a single exemplar.
    pub pair_similarity: Vec<Vec<Option<f64>>>,
    pub summary: SimilaritySummary,
    pub pca: PcaResult,
    pub distance_similarity_r: f64,
}
