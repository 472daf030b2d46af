//! Experiment orchestration: loads inputs, runs one experiment mode end to
//! end and writes its artifacts plus a reproducibility manifest.

use std::collections::BTreeMap;
use std::fs::File;
use std::io::{BufReader, Write};
use std::path::{Path, PathBuf};
use std::sync::Arc;
use std::time::Duration;

use chrono::Utc;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::adjudication::{
    gold_from_corpus, open_queue, resolve_final, AdjudicationLog, ResolutionMode, SteppingClock, DEFAULT_CONTEXT_WINDOW,
};
use crate::codebooks;
use crate::corpus::CorpusIndex;
use crate::domain::{CodeId, Codebook, DialogueTurn, ParseStatus, Prediction, PrevalenceTable, Provenance, Speaker};
use crate::embed_audit::{
    audit_embeddings, collect_exemplars, Embedder, EmbeddingBackend, HashEmbedding, HttpEmbeddingBackend,
    DEFAULT_COMPONENTS, DEFAULT_N_PER_CODE, ENV_EMBED_URL,
};
use crate::fixtures::{synthetic_workflow, ScriptedDecision};
use crate::ingest::{self, save_report, DocFormat};
use crate::llm::{
    binary_judge_batch, code_turns, suggest_all, ChatProvider, HttpChatProvider, LlmClient, MockBehavior, MockProvider,
    PromptTemplateKind, RetryPolicy, TurnView,
};
use crate::metrics;
use crate::router::{reason_counts, resolve_prevalence, route_batch, RouterConfig, DEFAULT_HEAD_TAIL_CUTOFF};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ExperimentMode {
    Exp1FullScope,
    Exp2ReducedScope,
    Exp3Binary,
    Exp4EmbeddingAudit,
    WorkflowEval,
}

impl ExperimentMode {
    pub const ALL: [ExperimentMode; 5] = [
        ExperimentMode::Exp1FullScope,
        ExperimentMode::Exp2ReducedScope,
        ExperimentMode::Exp3Binary,
        ExperimentMode::Exp4EmbeddingAudit,
        ExperimentMode::WorkflowEval,
    ];

    pub fn name(self) -> &'static str {
        match self {
            ExperimentMode::Exp1FullScope => "exp1_full_scope",
            ExperimentMode::Exp2ReducedScope => "exp2_reduced_scope",
            ExperimentMode::Exp3Binary => "exp3_binary",
            ExperimentMode::Exp4EmbeddingAudit => "exp4_embedding_audit",
            ExperimentMode::WorkflowEval => "workflow_eval",
        }
    }
}

impl std::str::FromStr for ExperimentMode {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Self::ALL.into_iter().find(|m| m.name() == s).ok_or_else(|| format!("unknown experiment mode {s:?}"))
    }
}

fn default_codebook_name() -> String {
    "history-taking".into()
}
fn default_out_dir() -> PathBuf {
    PathBuf::from("runs")
}
fn default_llm() -> String {
    "mock".into()
}
fn default_model() -> String {
    "mock-model".into()
}
fn default_embedding() -> String {
    "hash".into()
}
fn default_embedding_dim() -> usize {
    64
}
fn default_n_per_code() -> usize {
    DEFAULT_N_PER_CODE
}
fn default_components() -> usize {
    DEFAULT_COMPONENTS
}
fn default_window() -> usize {
    DEFAULT_CONTEXT_WINDOW
}
fn default_parallelism() -> usize {
    4
}

/// Everything a run needs. Missing corpus means the seeded synthetic
/// workflow fixture is used instead.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentConfig {
    pub mode: ExperimentMode,
    #[serde(default)]
    pub codebook: Option<PathBuf>,
    /// Bundled codebook used when `codebook` is not set.
    #[serde(default = "default_codebook_name")]
    pub codebook_name: String,
    #[serde(default)]
    pub corpus: Option<PathBuf>,
    #[serde(default)]
    pub predictions: Option<PathBuf>,
    #[serde(default)]
    pub prevalence: Option<PathBuf>,
    /// JSON lines of `{case_id, annotator, code}` replayed in workflow runs.
    #[serde(default)]
    pub decisions: Option<PathBuf>,
    #[serde(default = "default_out_dir")]
    pub out_dir: PathBuf,
    /// `mock`, `mock-no`, `mock-script` or `http`.
    #[serde(default = "default_llm")]
    pub llm_provider: String,
    #[serde(default = "default_model")]
    pub model_id: String,
    /// Rules file for the `mock-script` provider.
    #[serde(default)]
    pub mock_script: Option<PathBuf>,
    /// `hash` or `http`.
    #[serde(default = "default_embedding")]
    pub embedding_provider: String,
    #[serde(default = "default_embedding_dim")]
    pub embedding_dim: usize,
    #[serde(default)]
    pub router: RouterConfig,
    #[serde(default)]
    pub seed: u64,
    #[serde(default)]
    pub sample_size: Option<usize>,
    #[serde(default)]
    pub code_subset: Option<Vec<String>>,
    #[serde(default = "default_n_per_code")]
    pub n_per_code: usize,
    #[serde(default = "default_components")]
    pub components: usize,
    #[serde(default = "default_window")]
    pub context_window: usize,
    #[serde(default)]
    pub case_background: Option<String>,
    #[serde(default = "default_parallelism")]
    pub parallelism: usize,
}

impl ExperimentConfig {
    pub fn new(mode: ExperimentMode) -> Self {
        serde_json::from_value(serde_json::json!({ "mode": mode })).expect("defaults deserialize")
    }

    pub fn from_file(path: &Path) -> Result<Self, RunnerError> {
        let text = std::fs::read_to_string(path).map_err(|e| RunnerError::ConfigInvalid(format!("{}: {e}", path.display())))?;
        let parsed = match DocFormat::from_path(path) {
            DocFormat::Yaml => serde_yaml::from_str(&text).map_err(|e| e.to_string()),
            DocFormat::Json => serde_json::from_str(&text).map_err(|e| e.to_string()),
        };
        parsed.map_err(|e| RunnerError::ConfigInvalid(format!("{}: {e}", path.display())))
    }

    /// Static checks; checks that need the corpus happen during the run.
    pub fn validate(&self) -> Result<(), RunnerError> {
        if self.mode == ExperimentMode::Exp2ReducedScope && self.code_subset.as_ref().is_none_or(Vec::is_empty) {
            return Err(RunnerError::ConfigInvalid("exp2_reduced_scope requires code_subset".into()));
        }
        if self.sample_size == Some(0) {
            return Err(RunnerError::ConfigInvalid("sample_size must be at least 1".into()));
        }
        if self.predictions.is_some() && self.corpus.is_none() {
            return Err(RunnerError::ConfigInvalid("predictions given without a corpus".into()));
        }
        self.router.validate().map_err(|e| RunnerError::ConfigInvalid(e.to_string()))
    }
}

#[derive(Debug, Error)]
pub enum RunnerError {
    #[error("invalid config: {0}")]
    ConfigInvalid(String),
    #[error("{stage} failed: {message}")]
    Stage { stage: &'static str, message: String },
}

fn stage<E: std::fmt::Display>(name: &'static str) -> impl Fn(E) -> RunnerError {
    move |e| RunnerError::Stage { stage: name, message: e.to_string() }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub config: ExperimentConfig,
    pub seed: u64,
    pub versions: BTreeMap<String, String>,
}

#[derive(Debug, Clone)]
pub struct RunOutcome {
    pub run_dir: PathBuf,
    /// File names written into `run_dir`, sorted.
    pub artifacts: Vec<String>,
    pub summary: serde_json::Value,
}

/// Loaded inputs shared by all modes.
pub struct Inputs {
    pub codebook: Codebook,
    pub corpus: Vec<DialogueTurn>,
    pub predictions: Vec<Prediction>,
    pub prevalence: Option<PrevalenceTable>,
    pub scripted: Vec<ScriptedDecision>,
}

impl Inputs {
    pub fn load(cfg: &ExperimentConfig) -> Result<Self, RunnerError> {
        let open = |p: &Path| File::open(p).map(BufReader::new).map_err(|e| format!("{}: {e}", p.display()));
        let codebook = match &cfg.codebook {
            Some(path) => ingest::load_codebook(open(path).map_err(stage("load codebook"))?, DocFormat::from_path(path))
                .map_err(stage("load codebook"))?,
            None => codebooks::by_name(&cfg.codebook_name)
                .ok_or_else(|| RunnerError::ConfigInvalid(format!("unknown bundled codebook {:?}", cfg.codebook_name)))?,
        };

        let Some(corpus_path) = &cfg.corpus else {
            let f = synthetic_workflow(cfg.seed);
            if codebook.id() != f.codebook.id() {
                return Err(RunnerError::ConfigInvalid("the synthetic corpus uses the history-taking codebook".into()));
            }
            return Ok(Self {
                codebook,
                corpus: f.corpus,
                predictions: f.predictions,
                prevalence: Some(f.prevalence),
                scripted: f.decisions,
            });
        };
        let corpus = ingest::load_corpus(open(corpus_path).map_err(stage("load corpus"))?, Some(&codebook))
            .map_err(stage("load corpus"))?;
        let predictions = match &cfg.predictions {
            Some(p) => ingest::load_predictions(open(p).map_err(stage("load predictions"))?, &codebook, Some(&corpus))
                .map_err(stage("load predictions"))?,
            None => Vec::new(),
        };
        let prevalence = match &cfg.prevalence {
            Some(p) => Some(ingest::load_prevalence(open(p).map_err(stage("load prevalence"))?, &codebook).map_err(stage("load prevalence"))?),
            None => None,
        };
        Ok(Self { codebook, corpus, predictions, prevalence, scripted: Vec::new() })
    }

    /// Student turns with gold labels, in corpus order.
    pub fn coded_turns(&self) -> Vec<&DialogueTurn> {
        self.corpus.iter().filter(|t| t.speaker == Speaker::Student && t.gold.is_some()).collect()
    }
}

pub fn build_llm(cfg: &ExperimentConfig, cb: &Codebook) -> Result<LlmClient, RunnerError> {
    let provider: Arc<dyn ChatProvider> = match cfg.llm_provider.as_str() {
        "mock" => {
            let choices = if cfg.mode == ExperimentMode::Exp3Binary {
                vec!["Yes".to_string(), "No".to_string()]
            } else {
                cb.ids().map(|c| c.to_string()).collect()
            };
            Arc::new(MockProvider::new("mock", MockBehavior::Hashed { choices }))
        }
        "mock-no" => Arc::new(MockProvider::always_no()),
        "mock-script" => {
            let path = cfg.mock_script.as_ref().ok_or_else(|| RunnerError::ConfigInvalid("mock-script needs mock_script".into()))?;
            let text = std::fs::read_to_string(path).map_err(stage("load mock script"))?;
            let default = if cfg.mode == ExperimentMode::Exp3Binary { "No" } else { cb.codes()[0].id.as_str() };
            Arc::new(MockProvider::scripted_from_jsonl(&text, default).map_err(stage("load mock script"))?)
        }
        "http" => Arc::new(
            HttpChatProvider::from_env(cfg.model_id.clone(), Duration::from_secs(60))
                .ok_or_else(|| RunnerError::ConfigInvalid(format!("http provider needs {}", crate::llm::ENV_LLM_URL)))?,
        ),
        other => return Err(RunnerError::ConfigInvalid(format!("unknown llm provider {other:?}"))),
    };
    let retry = if cfg.llm_provider.starts_with("mock") { RetryPolicy::immediate(3) } else { RetryPolicy::default() };
    Ok(LlmClient::new(provider, cfg.model_id.clone()).with_retry(retry).with_parallelism(cfg.parallelism))
}

pub fn build_embedder(cfg: &ExperimentConfig) -> Result<Embedder, RunnerError> {
    let backend: Arc<dyn EmbeddingBackend> = match cfg.embedding_provider.as_str() {
        "hash" => Arc::new(HashEmbedding::new(cfg.embedding_dim, cfg.seed)),
        "http" => {
            let url = std::env::var(ENV_EMBED_URL)
                .map_err(|_| RunnerError::ConfigInvalid(format!("http embeddings need {ENV_EMBED_URL}")))?;
            Arc::new(HttpEmbeddingBackend::new(url, std::env::var(crate::llm::ENV_LLM_KEY).ok(), Duration::from_secs(60)))
        }
        other => return Err(RunnerError::ConfigInvalid(format!("unknown embedding provider {other:?}"))),
    };
    Ok(Embedder::new(backend).with_batching(64, cfg.parallelism))
}

/// Picks `n` turns uniformly without replacement, keeping corpus order.
pub fn sample_turns<'a>(turns: &[&'a DialogueTurn], n: Option<usize>, seed: u64) -> Vec<&'a DialogueTurn> {
    match n {
        Some(n) if n < turns.len() => {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let mut idx = rand::seq::index::sample(&mut rng, turns.len(), n).into_vec();
            idx.sort_unstable();
            idx.into_iter().map(|i| turns[i]).collect()
        }
        _ => turns.to_vec(),
    }
}

struct RunDir {
    path: PathBuf,
    written: Vec<String>,
}

impl RunDir {
    fn create(out_dir: &Path, mode: ExperimentMode) -> Result<Self, RunnerError> {
        let io = stage("create run directory");
        std::fs::create_dir_all(out_dir).map_err(&io)?;
        let stamp = Utc::now().format("%Y%m%dT%H%M%SZ");
        let base = format!("{stamp}-{}", mode.name());
        let mut path = out_dir.join(&base);
        let mut n = 1;
        while path.exists() {
            path = out_dir.join(format!("{base}-{n}"));
            n += 1;
        }
        std::fs::create_dir(&path).map_err(&io)?;
        Ok(Self { path, written: Vec::new() })
    }

    fn write(&mut self, name: &str, bytes: &[u8]) -> Result<(), RunnerError> {
        File::create(self.path.join(name)).and_then(|mut f| f.write_all(bytes)).map_err(stage("write artifact"))?;
        self.written.push(name.to_string());
        Ok(())
    }

    fn write_json<T: Serialize>(&mut self, name: &str, value: &T) -> Result<(), RunnerError> {
        let mut bytes = serde_json::to_vec_pretty(value).map_err(stage("write artifact"))?;
        bytes.push(b'\n');
        self.write(name, &bytes)
    }

    fn report<R: ingest::Report>(&mut self, report: &R, stem: &str) -> Result<(), RunnerError> {
        save_report(report, &self.path, stem).map_err(stage("write report"))
    }

    fn finish(self, out_dir: &Path, summary: serde_json::Value) -> Result<RunOutcome, RunnerError> {
        point_latest(out_dir, &self.path).map_err(stage("update latest alias"))?;
        let mut artifacts: Vec<String> = std::fs::read_dir(&self.path)
            .map_err(stage("list artifacts"))?
            .filter_map(|e| e.ok().map(|e| e.file_name().to_string_lossy().into_owned()))
            .collect();
        artifacts.sort();
        Ok(RunOutcome { run_dir: self.path, artifacts, summary })
    }
}

/// Points `out_dir/latest` at the run directory: a symlink where supported,
/// otherwise a text file holding the directory name.
fn point_latest(out_dir: &Path, run_dir: &Path) -> std::io::Result<()> {
    let latest = out_dir.join("latest");
    if latest.symlink_metadata().is_ok() {
        std::fs::remove_file(&latest)?;
    }
    let name = run_dir.file_name().expect("run dir has a name");
    #[cfg(unix)]
    {
        std::os::unix::fs::symlink(name, &latest)
    }
    #[cfg(not(unix))]
    {
        std::fs::write(&latest, name.to_string_lossy().as_bytes())
    }
}

fn manifest(cfg: &ExperimentConfig, cb: &Codebook, llm: Option<&LlmClient>) -> Manifest {
    let mut versions = BTreeMap::new();
    versions.insert("codewise".to_string(), env!("CARGO_PKG_VERSION").to_string());
    versions.insert("codebook".to_string(), cb.id().to_string());
    if let Some(llm) = llm {
        versions.insert("llm_provider".to_string(), llm.provider_id().to_string());
        versions.insert("llm_model".to_string(), llm.model_id().to_string());
    }
    if cfg.mode == ExperimentMode::Exp4EmbeddingAudit {
        versions.insert("embedding_provider".to_string(), cfg.embedding_provider.clone());
    }
    Manifest { config: cfg.clone(), seed: cfg.seed, versions }
}

/// Runs one experiment and writes its artifacts under a fresh run directory.
pub fn run(cfg: &ExperimentConfig) -> Result<RunOutcome, RunnerError> {
    cfg.validate()?;
    let inputs = Inputs::load(cfg)?;
    let llm = match cfg.mode {
        ExperimentMode::Exp4EmbeddingAudit => None,
        _ => Some(build_llm(cfg, &inputs.codebook)?),
    };
    let mut dir = RunDir::create(&cfg.out_dir, cfg.mode)?;
    dir.write_json("manifest.json", &manifest(cfg, &inputs.codebook, llm.as_ref()))?;
    let summary = match cfg.mode {
        ExperimentMode::Exp1FullScope => run_coding(cfg, &inputs, llm.as_ref().unwrap(), &mut dir, None)?,
        ExperimentMode::Exp2ReducedScope => {
            let subset = cfg
                .code_subset
                .iter()
                .flatten()
                .map(|c| inputs.codebook.code_id(c).map_err(|e| RunnerError::ConfigInvalid(e.to_string())))
                .collect::<Result<Vec<_>, _>>()?;
            run_coding(cfg, &inputs, llm.as_ref().unwrap(), &mut dir, Some(&subset))?
        }
        ExperimentMode::Exp3Binary => run_binary(cfg, &inputs, llm.as_ref().unwrap(), &mut dir)?,
        ExperimentMode::Exp4EmbeddingAudit => run_audit(cfg, &inputs, &mut dir)?,
        ExperimentMode::WorkflowEval => run_workflow(cfg, &inputs, llm.as_ref().unwrap(), &mut dir)?,
    };
    dir.write_json("summary.json", &summary)?;
    dir.finish(&cfg.out_dir, summary)
}

fn views<'a>(index: &'a CorpusIndex, turns: &[&DialogueTurn], window: usize) -> Vec<TurnView<'a>> {
    turns
        .iter()
        .map(|t| TurnView::from_index(index, index.get(&t.turn_id).expect("turn comes from the corpus"), window))
        .collect()
}

/// Full-scope or reduced-scope coding against gold. Turns whose answer could
/// not be parsed are counted and left out of the agreement statistics.
fn run_coding(
    cfg: &ExperimentConfig,
    inputs: &Inputs,
    llm: &LlmClient,
    dir: &mut RunDir,
    subset: Option<&[CodeId]>,
) -> Result<serde_json::Value, RunnerError> {
    let cb = &inputs.codebook;
    let mut pool = inputs.coded_turns();
    if let Some(subset) = subset {
        pool.retain(|t| t.gold.as_ref().is_some_and(|g| subset.contains(g)));
    }
    if pool.is_empty() {
        return Err(RunnerError::ConfigInvalid("no gold-labelled turns to code".into()));
    }
    let turns = sample_turns(&pool, cfg.sample_size, cfg.seed);
    let index = CorpusIndex::new(inputs.corpus.clone());
    let kind = if subset.is_some() { PromptTemplateKind::ReducedScope } else { PromptTemplateKind::FullScope };
    let suggestions = code_turns(&views(&index, &turns, cfg.context_window), kind, subset, llm, cb, cfg.case_background.as_deref())
        .map_err(stage("llm coding"))?;
    dir.write("llm_codes.jsonl", &ingest::write_records(&suggestions))?;

    let (mut pred, mut gold) = (Vec::new(), Vec::new());
    for (s, t) in suggestions.iter().zip(&turns) {
        if let Some(first) = s.candidates.first() {
            pred.push(first.clone());
            gold.push(t.gold.clone().expect("coded turns have gold"));
        }
    }
    let count = |st: ParseStatus| suggestions.iter().filter(|s| s.parse_status == st).count();
    let mut summary = serde_json::json!({
        "mode": cfg.mode,
        "n_turns": turns.len(),
        "n_parsed": count(ParseStatus::Ok),
        "n_partial": count(ParseStatus::Partial),
        "n_failed": count(ParseStatus::Failed),
    });
    if !pred.is_empty() {
        let report = metrics::reliability_report(&pred, &gold, cb, inputs.prevalence.as_ref(), DEFAULT_HEAD_TAIL_CUTOFF)
            .map_err(stage("reliability"))?;
        summary["overall_kappa"] = serde_json::json!(report.overall_kappa);
        dir.report(&report, "reliability")?;
        let fp = metrics::false_positive_distribution(&pred, &gold, cb).map_err(stage("error analysis"))?;
        dir.write_json("false_positives.json", &fp)?;
    }
    Ok(summary)
}

#[derive(Serialize)]
struct BinaryReport {
    n_turns: usize,
    n_verdicts: usize,
    negativity_bias: f64,
    per_code_kappa: Vec<crate::domain::CodeKappa>,
    confusion: metrics::BinaryConfusion,
    false_positives: Vec<metrics::FalsePositiveShare>,
    substitutions: BTreeMap<CodeId, Vec<metrics::Substitution>>,
}

fn run_binary(cfg: &ExperimentConfig, inputs: &Inputs, llm: &LlmClient, dir: &mut RunDir) -> Result<serde_json::Value, RunnerError> {
    let cb = &inputs.codebook;
    let pool = inputs.coded_turns();
    if let Some(n) = cfg.sample_size.filter(|&n| n > pool.len()) {
        return Err(RunnerError::ConfigInvalid(format!("sample_size {n} exceeds the {} coded turns", pool.len())));
    }
    let turns = sample_turns(&pool, cfg.sample_size, cfg.seed);
    let index = CorpusIndex::new(inputs.corpus.clone());
    let codes: Vec<CodeId> = cb.ids().cloned().collect();
    let matrix = binary_judge_batch(&views(&index, &turns, cfg.context_window), &codes, llm, cb, cfg.case_background.as_deref())
        .map_err(stage("binary judgments"))?;
    dir.write_json("verdicts.json", &matrix)?;

    let gold: Vec<CodeId> = turns.iter().map(|t| t.gold.clone().unwrap()).collect();
    let m = stage("binary metrics");
    let substitutions = codes
        .iter()
        .map(|c| Ok((c.clone(), metrics::binary_substitution_analysis(&matrix, &gold, cb, c.as_str())?)))
        .collect::<Result<BTreeMap<_, _>, metrics::MetricsError>>()
        .map_err(&m)?;
    let report = BinaryReport {
        n_turns: turns.len(),
        n_verdicts: matrix.len(),
        negativity_bias: metrics::negativity_bias(&matrix).map_err(&m)?,
        per_code_kappa: metrics::binary_per_code_kappa(&matrix, &gold, cb).map_err(&m)?,
        confusion: metrics::binary_confusion(&matrix, &gold, cb).map_err(&m)?,
        false_positives: metrics::binary_false_positive_distribution(&matrix, &gold, cb).map_err(&m)?,
        substitutions,
    };
    dir.write_json("binary_report.json", &report)?;
    Ok(serde_json::json!({
        "mode": cfg.mode,
        "n_turns": report.n_turns,
        "n_verdicts": report.n_verdicts,
        "negativity_bias": report.negativity_bias,
    }))
}

fn run_audit(cfg: &ExperimentConfig, inputs: &Inputs, dir: &mut RunDir) -> Result<serde_json::Value, RunnerError> {
    let gold = gold_from_corpus(&inputs.corpus);
    let samples = collect_exemplars(&inputs.corpus, &gold, &inputs.codebook, cfg.n_per_code, cfg.seed)
        .map_err(stage("collect exemplars"))?;
    dir.write_json("exemplars.json", &samples)?;
    let embedder = build_embedder(cfg)?;
    let set = embedder.embed_exemplars(&samples).map_err(stage("embed exemplars"))?;
    let audit = audit_embeddings(&set, cfg.components).map_err(stage("similarity audit"))?;
    dir.report(&audit, "audit")?;
    Ok(serde_json::json!({
        "mode": cfg.mode,
        "n_codes": audit.codes.len(),
        "n_exemplars": set.rows().len(),
        "exhausted_codes": samples.iter().filter(|s| s.exhausted).map(|s| s.code.clone()).collect::<Vec<_>>(),
        "mean_similarity": audit.summary.mean,
        "sd_similarity": audit.summary.sd,
        "variance_ratios": audit.pca.variance_ratios,
        "distance_similarity_r": audit.distance_similarity_r,
    }))
}

#[derive(Debug, Clone, Serialize)]
struct ModeResult {
    mode: ResolutionMode,
    kappa: f64,
    observed_agreement: f64,
    provenance: BTreeMap<String, usize>,
}

fn run_workflow(cfg: &ExperimentConfig, inputs: &Inputs, llm: &LlmClient, dir: &mut RunDir) -> Result<serde_json::Value, RunnerError> {
    let cb = &inputs.codebook;
    if inputs.predictions.is_empty() {
        return Err(RunnerError::ConfigInvalid("workflow_eval needs classifier predictions".into()));
    }
    let prevalence = resolve_prevalence(&cfg.router, inputs.prevalence.as_ref(), &inputs.predictions, cb).map_err(stage("route"))?;
    let routed = route_batch(&inputs.predictions, &prevalence, &cfg.router).map_err(stage("route"))?;
    dir.write("routing.jsonl", &ingest::write_records(&routed.decisions))?;

    let index = CorpusIndex::new(inputs.corpus.clone());
    let bare = open_queue(&routed.decisions, &inputs.predictions, &[], &index, cfg.context_window).map_err(stage("open queue"))?;
    let suggestions = suggest_all(&bare, llm, cb, cfg.case_background.as_deref()).map_err(stage("llm suggestions"))?;
    dir.write("suggestions.jsonl", &ingest::write_records(&suggestions))?;
    let cases = open_queue(&routed.decisions, &inputs.predictions, &suggestions, &index, cfg.context_window)
        .map_err(stage("open queue"))?;

    let scripted: Vec<ScriptedDecision> = match &cfg.decisions {
        Some(path) => ingest::load_records(BufReader::new(File::open(path).map_err(stage("load decisions"))?))
            .map_err(stage("load decisions"))?,
        None if !inputs.scripted.is_empty() => inputs.scripted.clone(),
        None => cases
            .iter()
            .filter_map(|c| c.turn.gold.clone().map(|code| ScriptedDecision { case_id: c.turn_id.clone(), annotator: "scripted".into(), code }))
            .collect(),
    };
    let log_path = dir.path.join("events.jsonl");
    let mut log = AdjudicationLog::open_with_cases(&log_path, cb.clone(), &cases, Arc::new(SteppingClock::default()))
        .map_err(stage("adjudication log"))?;
    dir.written.push("events.jsonl".into());
    for d in &scripted {
        log.claim(&d.case_id, &d.annotator, None).map_err(stage("adjudication"))?;
        log.decide(&d.case_id, &d.annotator, d.code.as_str(), None).map_err(stage("adjudication"))?;
    }
    let decided = log.state().cases().to_vec();

    let gold_map = gold_from_corpus(&inputs.corpus);
    let mut results = Vec::new();
    let mut baseline: Option<Vec<CodeId>> = None;
    for mode in ResolutionMode::ALL {
        let labeling = match resolve_final(&inputs.corpus, &inputs.predictions, &decided, None, mode) {
            Ok(l) => l,
            Err(crate::adjudication::AdjudicationError::MissingGold(_)) => continue,
            Err(e) => return Err(stage("resolve")(e)),
        };
        dir.write(&format!("labels_{}.jsonl", mode.name()), &ingest::write_records(&labeling.labels))?;
        let scored: Vec<(CodeId, CodeId, bool)> = labeling
            .labels
            .iter()
            .filter_map(|l| gold_map.get(&l.turn_id).map(|g| (l.code.clone(), g.clone(), l.provenance == Provenance::Human)))
            .collect();
        if scored.is_empty() {
            continue;
        }
        let pred: Vec<CodeId> = scored.iter().map(|s| s.0.clone()).collect();
        let gold: Vec<CodeId> = scored.iter().map(|s| s.1.clone()).collect();
        let human: Vec<bool> = scored.iter().map(|s| s.2).collect();
        let report = metrics::reliability_report(&pred, &gold, cb, Some(&prevalence), DEFAULT_HEAD_TAIL_CUTOFF)
            .map_err(stage("reliability"))?;
        dir.report(&report, &format!("reliability_{}", mode.name()))?;
        let before = baseline.get_or_insert_with(|| pred.clone());
        let improvement = metrics::improvement_report(before, &pred, &gold, cb, Some(&human)).map_err(stage("improvement"))?;
        dir.report(&improvement, &format!("improvement_{}", mode.name()))?;
        let provenance = [Provenance::Classifier, Provenance::Llm, Provenance::Human, Provenance::Oracle]
            .into_iter()
            .map(|p| (serde_json::to_value(p).unwrap().as_str().unwrap().to_string(), labeling.count(p)))
            .collect();
        results.push(ModeResult {
            mode,
            kappa: report.overall_kappa,
            observed_agreement: metrics::observed_agreement(&pred, &gold).map_err(stage("reliability"))?,
            provenance,
        });
    }

    let n_corrections = decided
        .iter()
        .filter(|c| c.decision.as_ref().is_some_and(|d| d.code != c.prediction.label))
        .count();
    Ok(serde_json::json!({
        "mode": cfg.mode,
        "n_predictions": inputs.predictions.len(),
        "routing": routed.summary,
        "reasons": reason_counts(&routed.decisions),
        "n_cases": cases.len(),
        "n_decided": log.state().n_decided(),
        "n_corrections": n_corrections,
        "resolution": results,
    }))
}
