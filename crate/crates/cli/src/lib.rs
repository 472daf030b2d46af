//! The `codewise` command line: pipeline stages as subcommands, experiment
//! runs, and the adjudication server.

pub mod server;

use std::fs::File;
use std::io::{BufReader, Write};
use std::net::SocketAddr;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};
use serde_json::json;

use codewise_core::adjudication::{
    open_queue, read_events, replay, resolve_final, AdjudicationLog, ResolutionMode, SystemClock,
};
use codewise_core::corpus::CorpusIndex;
use codewise_core::fixtures::synthetic_workflow;
use codewise_core::ingest::{self, save_report};
use codewise_core::llm::suggest_all;
use codewise_core::metrics::{improvement_report, reliability_report};
use codewise_core::router::{reason_counts, resolve_prevalence, route_batch, BatchRouting, DEFAULT_HEAD_TAIL_CUTOFF};
use codewise_core::runner::{build_llm, run, ExperimentConfig, ExperimentMode, Inputs};
use codewise_core::{AdjudicationCase, CodeId, FinalLabel, PrevalenceSource, Provenance};

#[derive(Debug, Parser)]
#[command(name = "codewise", version, about = "Human-in-the-loop deductive coding of dialogue turns")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Load and validate the codebook, corpus, predictions and prevalence.
    IngestCheck(ConfigArgs),
    /// Route classifier predictions and write one decision per turn.
    Route(RouteArgs),
    /// Open the review queue and attach LLM suggestions to every case.
    Suggest(SuggestArgs),
    /// Serve the adjudication API (and optionally the UI) over an event log.
    Serve(ServeArgs),
    /// Merge classifier, LLM and human labels under a resolution mode.
    Resolve(ResolveArgs),
    /// Reliability report for a label file against corpus gold.
    Report(ReportArgs),
    /// Embedding similarity audit; writes audit.json and scatter CSV.
    Audit(ConfigArgs),
    /// Run one experiment end to end into a fresh run directory.
    RunExperiment(ExperimentArgs),
    /// Write the seeded synthetic workflow fixture as input files.
    Synth(SynthArgs),
}

#[derive(Debug, Clone, Copy, ValueEnum)]
pub enum PrevalenceArg {
    Reference,
    Batch,
}

/// Flags that mirror the experiment config. A config file is read first and
/// any flag given on the command line overrides it.
#[derive(Debug, Clone, Default, Args)]
pub struct ConfigArgs {
    /// JSON or YAML experiment config.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub codebook: Option<PathBuf>,
    /// Bundled codebook: history-taking, question-types or question-mechanisms.
    #[arg(long)]
    pub codebook_name: Option<String>,
    /// Dialogue turns as JSON lines. Without it the synthetic fixture is used.
    #[arg(long)]
    pub corpus: Option<PathBuf>,
    #[arg(long)]
    pub predictions: Option<PathBuf>,
    #[arg(long)]
    pub prevalence: Option<PathBuf>,
    /// Scripted decisions replayed by workflow runs.
    #[arg(long)]
    pub decisions: Option<PathBuf>,
    #[arg(long)]
    pub out_dir: Option<PathBuf>,
    #[arg(long)]
    pub conf_threshold: Option<f64>,
    #[arg(long)]
    pub rare_threshold: Option<f64>,
    #[arg(long, value_enum)]
    pub prevalence_source: Option<PrevalenceArg>,
    #[arg(long)]
    pub seed: Option<u64>,
    /// mock, mock-no, mock-script or http.
    #[arg(long)]
    pub llm_provider: Option<String>,
    #[arg(long)]
    pub model_id: Option<String>,
    #[arg(long)]
    pub mock_script: Option<PathBuf>,
    /// hash or http.
    #[arg(long)]
    pub embedding_provider: Option<String>,
    #[arg(long)]
    pub embedding_dim: Option<usize>,
    #[arg(long)]
    pub sample_size: Option<usize>,
    /// Comma-separated code ids for reduced-scope prompts.
    #[arg(long, value_delimiter = ',')]
    pub code_subset: Option<Vec<String>>,
    #[arg(long)]
    pub n_per_code: Option<usize>,
    #[arg(long)]
    pub components: Option<usize>,
    #[arg(long)]
    pub context_window: Option<usize>,
    #[arg(long)]
    pub case_background: Option<String>,
    #[arg(long)]
    pub parallelism: Option<usize>,
}

impl ConfigArgs {
    /// Builds the effective config. `mode` wins over the file when given.
    pub fn resolve(&self, mode: Option<ExperimentMode>) -> Result<ExperimentConfig> {
        let mut cfg = match &self.config {
            Some(path) => ExperimentConfig::from_file(path)?,
            None => ExperimentConfig::new(mode.unwrap_or(ExperimentMode::WorkflowEval)),
        };
        if let Some(m) = mode {
            cfg.mode = m;
        }
        macro_rules! set {
            ($($field:ident),*) => {
                $(if let Some(v) = &self.$field {
                    cfg.$field = v.clone().into();
                })*
            };
        }
        set!(codebook, corpus, predictions, prevalence, decisions, sample_size, code_subset, mock_script, case_background);
        set!(codebook_name, out_dir, seed, llm_provider, model_id, embedding_provider, embedding_dim, n_per_code, components);
        set!(context_window, parallelism);
        if let Some(v) = self.conf_threshold {
            cfg.router.conf_threshold = v;
        }
        if let Some(v) = self.rare_threshold {
            cfg.router.rare_threshold = v;
        }
        if let Some(v) = self.prevalence_source {
            cfg.router.prevalence_source = match v {
                PrevalenceArg::Reference => PrevalenceSource::Reference,
                PrevalenceArg::Batch => PrevalenceSource::Batch,
            };
        }
        cfg.validate()?;
        Ok(cfg)
    }
}

#[derive(Debug, Args)]
pub struct RouteArgs {
    #[command(flatten)]
    pub config: ConfigArgs,
    /// Routing decisions as JSON lines; stdout when omitted.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct SuggestArgs {
    #[command(flatten)]
    pub config: ConfigArgs,
    /// Cases with suggestions as JSON lines; stdout when omitted.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct ServeArgs {
    #[command(flatten)]
    pub config: ConfigArgs,
    /// Append-only event log; created if missing, replayed if present.
    #[arg(long, default_value = "events.jsonl")]
    pub log: PathBuf,
    /// Cases from `suggest`. Without it the queue is built on startup.
    #[arg(long)]
    pub cases: Option<PathBuf>,
    #[arg(long, default_value = "127.0.0.1:8080")]
    pub addr: SocketAddr,
    /// Directory of static UI assets served at `/`.
    #[arg(long)]
    pub static_dir: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct ResolveArgs {
    #[command(flatten)]
    pub config: ConfigArgs,
    #[arg(long)]
    pub log: PathBuf,
    /// classifier_only, llm_only, human_in_loop or review_all_low_conf.
    #[arg(long, default_value = "human_in_loop")]
    pub mode: ResolutionMode,
    /// Final labels as JSON lines; stdout when omitted.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct ReportArgs {
    #[command(flatten)]
    pub config: ConfigArgs,
    /// Final labels from `resolve`.
    #[arg(long)]
    pub labels: PathBuf,
    /// Baseline labels; adds a per-code improvement report.
    #[arg(long)]
    pub before: Option<PathBuf>,
    /// Report directory; defaults to the config out_dir.
    #[arg(long)]
    pub report_dir: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct ExperimentArgs {
    #[command(flatten)]
    pub config: ConfigArgs,
    /// Overrides the mode in the config file.
    #[arg(long)]
    pub mode: Option<ExperimentMode>,
}

#[derive(Debug, Args)]
pub struct SynthArgs {
    #[arg(long, default_value_t = 42)]
    pub seed: u64,
    #[arg(long, default_value = "synthetic")]
    pub out_dir: PathBuf,
}

fn emit(out: Option<&Path>, bytes: &[u8]) -> Result<()> {
    match out {
        Some(path) => std::fs::write(path, bytes).with_context(|| format!("writing {}", path.display())),
        None => std::io::stdout().write_all(bytes).context("writing stdout"),
    }
}

fn print_json(value: &serde_json::Value) {
    println!("{}", serde_json::to_string_pretty(value).expect("json value serializes"));
}

fn routed(cfg: &ExperimentConfig, inputs: &Inputs) -> Result<BatchRouting> {
    if inputs.predictions.is_empty() {
        bail!("routing needs classifier predictions");
    }
    let cb = &inputs.codebook;
    let prevalence = resolve_prevalence(&cfg.router, inputs.prevalence.as_ref(), &inputs.predictions, cb)?;
    Ok(route_batch(&inputs.predictions, &prevalence, &cfg.router)?)
}

/// Route, suggest and open the review queue.
pub fn build_cases(cfg: &ExperimentConfig, inputs: &Inputs) -> Result<Vec<AdjudicationCase>> {
    let routing = routed(cfg, inputs)?;
    let index = CorpusIndex::new(inputs.corpus.clone());
    let bare = open_queue(&routing.decisions, &inputs.predictions, &[], &index, cfg.context_window)?;
    let llm = build_llm(cfg, &inputs.codebook)?;
    let suggestions = suggest_all(&bare, &llm, &inputs.codebook, cfg.case_background.as_deref())?;
    Ok(open_queue(&routing.decisions, &inputs.predictions, &suggestions, &index, cfg.context_window)?)
}

fn ingest_check(args: &ConfigArgs) -> Result<()> {
    let cfg = args.resolve(None)?;
    let inputs = Inputs::load(&cfg)?;
    let coded = inputs.coded_turns().len();
    print_json(&json!({
        "codebook": inputs.codebook.id(),
        "n_codes": inputs.codebook.len(),
        "n_turns": inputs.corpus.len(),
        "n_coded_student_turns": coded,
        "n_predictions": inputs.predictions.len(),
        "prevalence": inputs.prevalence.as_ref().map(|p| p.source),
        "synthetic": cfg.corpus.is_none(),
    }));
    Ok(())
}

fn route_cmd(args: &RouteArgs) -> Result<()> {
    let cfg = args.config.resolve(None)?;
    let inputs = Inputs::load(&cfg)?;
    let routing = routed(&cfg, &inputs)?;
    emit(args.out.as_deref(), &ingest::write_records(&routing.decisions))?;
    if args.out.is_some() {
        print_json(&json!({ "summary": routing.summary, "reasons": reason_counts(&routing.decisions) }));
    }
    Ok(())
}

fn suggest_cmd(args: &SuggestArgs) -> Result<()> {
    let cfg = args.config.resolve(None)?;
    let inputs = Inputs::load(&cfg)?;
    let cases = build_cases(&cfg, &inputs)?;
    emit(args.out.as_deref(), &ingest::write_records(&cases))?;
    if args.out.is_some() {
        let parsed = cases.iter().filter(|c| c.suggestion.as_ref().is_some_and(|s| !s.candidates.is_empty())).count();
        print_json(&json!({ "n_cases": cases.len(), "n_with_candidates": parsed }));
    }
    Ok(())
}

/// Opens the log and, when it holds no cases yet, fills the queue from
/// `--cases` or by running the routing and suggestion stages.
pub fn prepare_server(args: &ServeArgs) -> Result<server::AppState> {
    let cfg = args.config.resolve(Some(ExperimentMode::WorkflowEval))?;
    let inputs = Inputs::load(&cfg)?;
    let mut log = AdjudicationLog::open(&args.log, inputs.codebook.clone(), Arc::new(SystemClock))
        .map_err(server::ServeError::LogUnwritable)?;
    if log.state().cases().is_empty() {
        let cases = match &args.cases {
            Some(path) => {
                let file = File::open(path).with_context(|| format!("opening {}", path.display()))?;
                ingest::load_records(BufReader::new(file))?
            }
            None => build_cases(&cfg, &inputs)?,
        };
        log.open_cases(&cases).map_err(server::ServeError::LogUnwritable)?;
    }
    Ok(server::AppState::new(log, inputs.corpus, inputs.predictions, inputs.prevalence))
}

async fn shutdown_signal() {
    let _ = tokio::signal::ctrl_c().await;
    tracing::info!("shutting down");
}

fn serve_cmd(args: &ServeArgs) -> Result<()> {
    let state = Arc::new(prepare_server(args)?);
    let runtime = tokio::runtime::Builder::new_multi_thread().enable_all().build()?;
    runtime.block_on(server::serve(args.addr, state, args.static_dir.clone(), shutdown_signal()))?;
    Ok(())
}

fn resolve_cmd(args: &ResolveArgs) -> Result<()> {
    let cfg = args.config.resolve(None)?;
    let inputs = Inputs::load(&cfg)?;
    let file = File::open(&args.log).with_context(|| format!("opening {}", args.log.display()))?;
    let state = replay(&read_events(BufReader::new(file))?, &inputs.codebook)?;
    let labeling = resolve_final(&inputs.corpus, &inputs.predictions, state.cases(), None, args.mode)?;
    emit(args.out.as_deref(), &ingest::write_records(&labeling.labels))?;
    if args.out.is_some() {
        let counts: serde_json::Map<_, _> = [Provenance::Classifier, Provenance::Llm, Provenance::Human, Provenance::Oracle]
            .into_iter()
            .map(|p| (serde_json::to_value(p).unwrap().as_str().unwrap().to_string(), json!(labeling.count(p))))
            .collect();
        print_json(&json!({ "mode": args.mode, "n_labels": labeling.labels.len(), "provenance": counts, "seq": state.last_seq }));
    }
    Ok(())
}

fn read_labels(path: &Path) -> Result<Vec<FinalLabel>> {
    let file = File::open(path).with_context(|| format!("opening {}", path.display()))?;
    Ok(ingest::load_records(BufReader::new(file))?)
}

fn report_cmd(args: &ReportArgs) -> Result<()> {
    let cfg = args.config.resolve(None)?;
    let inputs = Inputs::load(&cfg)?;
    let cb = &inputs.codebook;
    let gold_map = codewise_core::adjudication::gold_from_corpus(&inputs.corpus);
    let after = read_labels(&args.labels)?;
    let scored: Vec<(&FinalLabel, &CodeId)> = after.iter().filter_map(|l| gold_map.get(&l.turn_id).map(|g| (l, g))).collect();
    if scored.is_empty() {
        bail!("no labelled turn has a gold label");
    }
    let pred: Vec<CodeId> = scored.iter().map(|(l, _)| l.code.clone()).collect();
    let gold: Vec<CodeId> = scored.iter().map(|(_, g)| (*g).clone()).collect();
    let dir = args.report_dir.clone().unwrap_or_else(|| cfg.out_dir.clone());
    std::fs::create_dir_all(&dir)?;
    let reliability = reliability_report(&pred, &gold, cb, inputs.prevalence.as_ref(), DEFAULT_HEAD_TAIL_CUTOFF)?;
    save_report(&reliability, &dir, "reliability")?;
    let mut summary = json!({ "n": reliability.n, "overall_kappa": reliability.overall_kappa, "dir": dir });
    if let Some(before_path) = &args.before {
        let before: std::collections::HashMap<String, CodeId> =
            read_labels(before_path)?.into_iter().map(|l| (l.turn_id, l.code)).collect();
        let base = scored
            .iter()
            .map(|(l, _)| before.get(&l.turn_id).cloned().with_context(|| format!("{} missing from baseline", l.turn_id)))
            .collect::<Result<Vec<_>>>()?;
        let human: Vec<bool> = scored.iter().map(|(l, _)| l.provenance == Provenance::Human).collect();
        let improvement = improvement_report(&base, &pred, &gold, cb, Some(&human))?;
        save_report(&improvement, &dir, "improvement")?;
        summary["overall_before"] = json!(improvement.overall_before);
        summary["total_fixes"] = json!(improvement.total_fixes);
    }
    print_json(&summary);
    Ok(())
}

fn experiment(cfg: &ExperimentConfig) -> Result<()> {
    let outcome = run(cfg)?;
    print_json(&json!({ "run_dir": outcome.run_dir, "artifacts": outcome.artifacts, "summary": outcome.summary }));
    Ok(())
}

fn synth_cmd(args: &SynthArgs) -> Result<()> {
    let f = synthetic_workflow(args.seed);
    std::fs::create_dir_all(&args.out_dir)?;
    let files = [
        ("corpus.jsonl", ingest::write_corpus(&f.corpus)),
        ("predictions.jsonl", ingest::write_predictions(&f.predictions)),
        ("prevalence.json", ingest::write_prevalence(&f.prevalence)),
        ("decisions.jsonl", ingest::write_records(&f.decisions)),
    ];
    for (name, bytes) in &files {
        std::fs::write(args.out_dir.join(name), bytes)?;
    }
    print_json(&json!({ "dir": args.out_dir, "files": files.iter().map(|f| f.0).collect::<Vec<_>>() }));
    Ok(())
}

pub fn execute(cli: Cli) -> Result<()> {
    match &cli.command {
        Command::IngestCheck(a) => ingest_check(a),
        Command::Route(a) => route_cmd(a),
        Command::Suggest(a) => suggest_cmd(a),
        Command::Serve(a) => serve_cmd(a),
        Command::Resolve(a) => resolve_cmd(a),
        Command::Report(a) => report_cmd(a),
        Command::Audit(a) => experiment(&a.resolve(Some(ExperimentMode::Exp4EmbeddingAudit))?),
        Command::RunExperiment(a) => {
            if a.mode.is_none() && a.config.config.is_none() {
                bail!("run-experiment needs --mode or --config");
            }
            experiment(&a.config.resolve(a.mode)?)
        }
        Command::Synth(a) => synth_cmd(a),
    }
}
