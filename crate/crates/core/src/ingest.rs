//! Readers and writers for every external data format.
//!
//! * codebook: one JSON or YAML document
//!   `{id, label_policy, codes: [{id, name, definition, examples, keywords}]}`
//! * corpus / predictions / events: JSON lines, one record per line
//! * prevalence: `{source, prevalence: {code: fraction}}`
//! * reports: pretty JSON plus one CSV per table
//!
//! All text is UTF-8. Unknown fields in line records are preserved.

use std::collections::{BTreeMap, HashSet};
use std::io::{BufRead, Read, Write};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::domain::{
    validate_prediction, Code, Codebook, DialogueTurn, DomainError, LabelPolicy, Prediction, PredictionRecord,
    PrevalenceSource, PrevalenceTable, ReliabilityReport, SimilarityAudit,
};
use crate::metrics::ImprovementReport;

#[derive(Debug, Error)]
pub enum IngestError {
    #[error("parse error at line {line}: {message}")]
    Parse { line: usize, message: String },
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
    #[error("duplicate code id {0:?}")]
    DuplicateCodeId(String),
    #[error("codebook needs at least 2 codes, got {0}")]
    TooFewCodes(usize),
    #[error("duplicate turn id {0:?}")]
    DuplicateTurnId(String),
    #[error("turn {turn_id:?} has gold code {code:?} not in the codebook")]
    UnknownGoldCode { turn_id: String, code: String },
    #[error("prediction references turn {0:?} missing from the corpus")]
    MissingTurn(String),
    #[error("prediction for turn {turn_id:?}: {source}")]
    InvalidPrediction { turn_id: String, source: DomainError },
    #[error(transparent)]
    Domain(#[from] DomainError),
    #[error("csv: {0}")]
    Csv(#[from] csv::Error),
}

impl IngestError {
    fn parse(line: usize, err: impl std::fmt::Display) -> Self {
        IngestError::Parse { line, message: err.to_string() }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DocFormat {
    Json,
    Yaml,
}

impl DocFormat {
    /// Picks YAML for `.yaml`/`.yml` paths, JSON otherwise.
    pub fn from_path(path: &std::path::Path) -> Self {
        match path.extension().and_then(|e| e.to_str()) {
            Some("yaml" | "yml") => DocFormat::Yaml,
            _ => DocFormat::Json,
        }
    }
}

#[derive(Deserialize)]
struct CodebookDoc {
    id: String,
    #[serde(default)]
    label_policy: LabelPolicy,
    codes: Vec<Code>,
}

pub fn load_codebook(mut source: impl Read, format: DocFormat) -> Result<Codebook, IngestError> {
    let mut text = String::new();
    source.read_to_string(&mut text)?;
    let doc: CodebookDoc = match format {
        DocFormat::Json => serde_json::from_str(&text).map_err(|e| IngestError::parse(e.line(), e))?,
        DocFormat::Yaml => serde_yaml::from_str(&text)
            .map_err(|e| IngestError::parse(e.location().map_or(0, |l| l.line()), e))?,
    };
    Codebook::new(doc.id, doc.label_policy, doc.codes).map_err(|e| match e {
        DomainError::DuplicateCodeId(id) => IngestError::DuplicateCodeId(id),
        DomainError::TooFewCodes(n) => IngestError::TooFewCodes(n),
        other => IngestError::Domain(other),
    })
}

pub fn write_codebook(cb: &Codebook, format: DocFormat) -> Vec<u8> {
    match format {
        DocFormat::Json => {
            let mut out = serde_json::to_vec_pretty(cb).expect("codebook serializes");
            out.push(b'\n');
            out
        }
        DocFormat::Yaml => serde_yaml::to_string(cb).expect("codebook serializes").into_bytes(),
    }
}

fn read_jsonl<T: for<'de> Deserialize<'de>>(source: impl BufRead) -> Result<Vec<(usize, T)>, IngestError> {
    let mut out = Vec::new();
    for (i, line) in source.lines().enumerate() {
        let line = line?;
        let trimmed = line.trim();
        if trimmed.is_empty() {
            continue;
        }
        let value = serde_json::from_str(trimmed).map_err(|e| IngestError::parse(i + 1, e))?;
        out.push((i + 1, value));
    }
    Ok(out)
}

fn write_jsonl<T: Serialize>(items: impl IntoIterator<Item = T>) -> Vec<u8> {
    let mut out = Vec::new();
    for item in items {
        serde_json::to_writer(&mut out, &item).expect("record serializes");
        out.push(b'\n');
    }
    out
}

/// Reads corpus records, sorted by `(session_id, index)`. When a codebook is
/// supplied, gold codes are checked against it.
pub fn load_corpus(source: impl BufRead, cb: Option<&Codebook>) -> Result<Vec<DialogueTurn>, IngestError> {
    let records: Vec<(usize, DialogueTurn)> = read_jsonl(source)?;
    let mut seen = HashSet::new();
    let mut turns = Vec::with_capacity(records.len());
    for (line, turn) in records {
        if turn.text.trim().is_empty() {
            return Err(IngestError::parse(line, DomainError::EmptyText(turn.turn_id)));
        }
        if !seen.insert(turn.turn_id.clone()) {
            return Err(IngestError::DuplicateTurnId(turn.turn_id));
        }
        if let (Some(cb), Some(gold)) = (cb, &turn.gold) {
            if !cb.contains(gold.as_str()) {
                return Err(IngestError::UnknownGoldCode { turn_id: turn.turn_id, code: gold.to_string() });
            }
        }
        turns.push(turn);
    }
    sort_corpus(&mut turns);
    Ok(turns)
}

pub fn sort_corpus(turns: &mut [DialogueTurn]) {
    turns.sort_by(|a, b| {
        (a.session_id.as_str(), a.index, a.turn_id.as_str()).cmp(&(b.session_id.as_str(), b.index, b.turn_id.as_str()))
    });
}

pub fn write_corpus(turns: &[DialogueTurn]) -> Vec<u8> {
    write_jsonl(turns)
}

/// Reads and validates classifier predictions. With a corpus, every record
/// must reference one of its turns.
pub fn load_predictions(
    source: impl BufRead,
    cb: &Codebook,
    corpus: Option<&[DialogueTurn]>,
) -> Result<Vec<Prediction>, IngestError> {
    let known: Option<HashSet<&str>> = corpus.map(|c| c.iter().map(|t| t.turn_id.as_str()).collect());
    let records: Vec<(usize, PredictionRecord)> = read_jsonl(source)?;
    records
        .into_iter()
        .map(|(_, record)| {
            if let Some(known) = &known {
                if !known.contains(record.turn_id.as_str()) {
                    return Err(IngestError::MissingTurn(record.turn_id));
                }
            }
            let turn_id = record.turn_id.clone();
            validate_prediction(record, cb).map_err(|source| IngestError::InvalidPrediction { turn_id, source })
        })
        .collect()
}

pub fn write_predictions(predictions: &[Prediction]) -> Vec<u8> {
    write_jsonl(predictions.iter().map(Prediction::to_record))
}

#[derive(Deserialize)]
struct PrevalenceDoc {
    #[serde(default)]
    source: PrevalenceSource,
    prevalence: BTreeMap<String, f64>,
}

pub fn load_prevalence(mut source: impl Read, cb: &Codebook) -> Result<PrevalenceTable, IngestError> {
    let mut text = String::new();
    source.read_to_string(&mut text)?;
    let doc: PrevalenceDoc = serde_json::from_str(&text).map_err(|e| IngestError::parse(e.line(), e))?;
    Ok(PrevalenceTable::new(doc.source, doc.prevalence, cb)?)
}

pub fn write_prevalence(table: &PrevalenceTable) -> Vec<u8> {
    let mut out = serde_json::to_vec_pretty(table).expect("prevalence serializes");
    out.push(b'\n');
    out
}

/// Generic JSON-lines helpers for other record types (suggestions, verdicts).
pub fn load_records<T: for<'de> Deserialize<'de>>(source: impl BufRead) -> Result<Vec<T>, IngestError> {
    Ok(read_jsonl(source)?.into_iter().map(|(_, v)| v).collect())
}

pub fn write_records<T: Serialize>(items: &[T]) -> Vec<u8> {
    write_jsonl(items)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ReportFormat {
    Json,
    CsvTables,
}

/// A report that can be written as pretty JSON or as a set of named CSV tables.
pub trait Report: Serialize {
    /// `(file stem, csv bytes)` per table, in a fixed order.
    fn csv_tables(&self) -> Result<Vec<(String, Vec<u8>)>, IngestError>;
}

fn fmt_real(x: f64) -> String {
    // shortest round-trip representation; deterministic across runs
    format!("{x}")
}

impl Report for ReliabilityReport {
    fn csv_tables(&self) -> Result<Vec<(String, Vec<u8>)>, IngestError> {
        let mut per_code = csv::Writer::from_writer(Vec::new());
        per_code.write_record(["code", "kappa", "support", "degenerate"])?;
        for row in &self.per_code {
            per_code.write_record([
                row.code.to_string(),
                fmt_real(row.kappa),
                row.support.to_string(),
                row.degenerate.to_string(),
            ])?;
        }

        let mut confusion = csv::Writer::from_writer(Vec::new());
        let mut header = vec!["gold\\pred".to_string()];
        header.extend(self.confusion.codes.iter().map(|c| c.to_string()));
        confusion.write_record(&header)?;
        for (code, row) in self.confusion.codes.iter().zip(&self.confusion.counts) {
            let mut record = vec![code.to_string()];
            record.extend(row.iter().map(|c| c.to_string()));
            confusion.write_record(&record)?;
        }

        let mut summary = csv::Writer::from_writer(Vec::new());
        summary.write_record(["n", "overall_kappa", "head_codes", "tail_codes"])?;
        summary.write_record([
            self.n.to_string(),
            fmt_real(self.overall_kappa),
            join_codes(&self.head_codes),
            join_codes(&self.tail_codes),
        ])?;

        Ok(vec![
            ("summary".into(), finish(summary)?),
            ("per_code_kappa".into(), finish(per_code)?),
            ("confusion".into(), finish(confusion)?),
        ])
    }
}

impl Report for SimilarityAudit {
    fn csv_tables(&self) -> Result<Vec<(String, Vec<u8>)>, IngestError> {
        let mut pairs = csv::Writer::from_writer(Vec::new());
        let mut header = vec!["code".to_string()];
        header.extend(self.codes.iter().map(|c| c.to_string()));
        pairs.write_record(&header)?;
        for (code, row) in self.codes.iter().zip(&self.pair_similarity) {
            let mut record = vec![code.to_string()];
            record.extend(row.iter().map(|v| v.map(fmt_real).unwrap_or_default()));
            pairs.write_record(&record)?;
        }

        let mut variance = csv::Writer::from_writer(Vec::new());
        variance.write_record(["component", "variance_ratio"])?;
        for (i, r) in self.pca.variance_ratios.iter().enumerate() {
            variance.write_record([(i + 1).to_string(), fmt_real(*r)])?;
        }

        let mut centroids = csv::Writer::from_writer(Vec::new());
        centroids.write_record(["code", "x", "y"])?;
        for (code, c) in &self.pca.centroids {
            centroids.write_record([
                code.to_string(),
                fmt_real(c.first().copied().unwrap_or(0.0)),
                fmt_real(c.get(1).copied().unwrap_or(0.0)),
            ])?;
        }

        let mut scatter = csv::Writer::from_writer(Vec::new());
        scatter.write_record(["code", "x", "y"])?;
        for (code, p) in self.pca.row_codes.iter().zip(&self.pca.projected) {
            scatter.write_record([
                code.to_string(),
                fmt_real(p.first().copied().unwrap_or(0.0)),
                fmt_real(p.get(1).copied().unwrap_or(0.0)),
            ])?;
        }

        let mut summary = csv::Writer::from_writer(Vec::new());
        summary.write_record(["mean_similarity", "sd_similarity", "n_pairs", "distance_similarity_r"])?;
        summary.write_record([
            fmt_real(self.summary.mean),
            fmt_real(self.summary.sd),
            self.summary.n_pairs.to_string(),
            fmt_real(self.distance_similarity_r),
        ])?;

        Ok(vec![
            ("summary".into(), finish(summary)?),
            ("pair_similarity".into(), finish(pairs)?),
            ("variance".into(), finish(variance)?),
            ("centroids".into(), finish(centroids)?),
            ("scatter".into(), finish(scatter)?),
        ])
    }
}

impl Report for ImprovementReport {
    fn csv_tables(&self) -> Result<Vec<(String, Vec<u8>)>, IngestError> {
        let mut rows = csv::Writer::from_writer(Vec::new());
        rows.write_record(["code", "kappa_before", "kappa_after", "delta", "n_human", "n_fixes"])?;
        for r in &self.rows {
            rows.write_record([
                r.code.to_string(),
                fmt_real(r.kappa_before),
                fmt_real(r.kappa_after),
                fmt_real(r.delta),
                r.n_human.to_string(),
                r.n_fixes.to_string(),
            ])?;
        }
        let mut summary = csv::Writer::from_writer(Vec::new());
        summary.write_record(["overall_kappa_before", "overall_kappa_after", "total_fixes"])?;
        summary.write_record([
            fmt_real(self.overall_before),
            fmt_real(self.overall_after),
            self.total_fixes.to_string(),
        ])?;
        Ok(vec![("summary".into(), finish(summary)?), ("improvement".into(), finish(rows)?)])
    }
}

fn join_codes(codes: &[crate::domain::CodeId]) -> String {
    codes.iter().map(|c| c.as_str()).collect::<Vec<_>>().join(" ")
}

fn finish(w: csv::Writer<Vec<u8>>) -> Result<Vec<u8>, IngestError> {
    w.into_inner().map_err(|e| IngestError::Io(e.into_error()))
}

/// Serializes a report. JSON yields a single `report.json` entry; CSV yields
/// one `<table>.csv` entry per table. Output is byte-deterministic.
pub fn write_report<R: Report>(report: &R, format: ReportFormat) -> Result<Vec<(String, Vec<u8>)>, IngestError> {
    match format {
        ReportFormat::Json => {
            let mut out = serde_json::to_vec_pretty(report).map_err(|e| IngestError::parse(0, e))?;
            out.push(b'\n');
            Ok(vec![("report.json".into(), out)])
        }
        ReportFormat::CsvTables => Ok(report
            .csv_tables()?
            .into_iter()
            .map(|(stem, bytes)| (format!("{stem}.csv"), bytes))
            .collect()),
    }
}

/// Writes a report's files into `dir`.
pub fn save_report<R: Report>(report: &R, dir: &std::path::Path, stem: &str) -> Result<(), IngestError> {
    std::fs::create_dir_all(dir)?;
    for format in [ReportFormat::Json, ReportFormat::CsvTables] {
        for (name, bytes) in write_report(report, format)? {
            let name = if name == "report.json" { format!("{stem}.json") } else { format!("{stem}_{name}") };
            std::fs::File::create(dir.join(name))?.write_all(&bytes)?;
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::domain::{CodeId, CodeKappa, ConfusionMatrix, Speaker};
    use proptest::prelude::*;

    const BOOK: &str = r#"{"id":"ht","label_policy":"single","codes":[
        {"id":"RQ","name":"Routine Question","definition":"d","examples":["e"],"keywords":[]},
        {"id":"SS","name":"Specifying Symptoms","definition":"d2","examples":[]}]}"#;

    fn book() -> Codebook {
        load_codebook(BOOK.as_bytes(), DocFormat::Json).unwrap()
    }

    #[test]
    fn codebook_json_and_yaml() {
        let cb = book();
        assert_eq!(cb.ids().map(|c| c.as_str()).collect::<Vec<_>>(), ["RQ", "SS"]);
        let yaml = write_codebook(&cb, DocFormat::Yaml);
        assert_eq!(load_codebook(yaml.as_slice(), DocFormat::Yaml).unwrap(), cb);
        let json = write_codebook(&cb, DocFormat::Json);
        assert_eq!(load_codebook(json.as_slice(), DocFormat::Json).unwrap(), cb);
    }

    #[test]
    fn codebook_errors() {
        let one = r#"{"id":"x","codes":[{"id":"RQ","name":"r"}]}"#;
        assert!(matches!(load_codebook(one.as_bytes(), DocFormat::Json), Err(IngestError::TooFewCodes(1))));
        let dup = r#"{"id":"x","codes":[{"id":"RQ","name":"r"},{"id":"RQ","name":"q"}]}"#;
        assert!(matches!(load_codebook(dup.as_bytes(), DocFormat::Json), Err(IngestError::DuplicateCodeId(id)) if id == "RQ"));
        assert!(matches!(load_codebook("{".as_bytes(), DocFormat::Json), Err(IngestError::Parse { .. })));
        let bad_id = r#"{"id":"x","codes":[{"id":"R Q","name":"r"},{"id":"SS","name":"q"}]}"#;
        assert!(matches!(load_codebook(bad_id.as_bytes(), DocFormat::Json), Err(IngestError::Parse { .. })));
    }

    #[test]
    fn corpus_sorted_and_validated() {
        let src = "\
{\"turn_id\":\"b\",\"session_id\":\"s1\",\"index\":1,\"speaker\":\"student\",\"text\":\"哪里不舒服？\",\"gold\":\"SS\",\"week\":3}
{\"turn_id\":\"a\",\"session_id\":\"s1\",\"index\":0,\"speaker\":\"counterpart\",\"text\":\"hi\"}

";
        let turns = load_corpus(src.as_bytes(), Some(&book())).unwrap();
        assert_eq!(turns.iter().map(|t| t.turn_id.as_str()).collect::<Vec<_>>(), ["a", "b"]);
        assert_eq!(turns[1].extra["week"], 3);
        assert_eq!(turns[1].speaker, Speaker::Student);

        assert!(load_corpus("".as_bytes(), None).unwrap().is_empty());

        let dup = "{\"turn_id\":\"a\",\"session_id\":\"s\",\"index\":0,\"speaker\":\"student\",\"text\":\"x\"}\n\
                   {\"turn_id\":\"a\",\"session_id\":\"s\",\"index\":1,\"speaker\":\"student\",\"text\":\"y\"}";
        assert!(matches!(load_corpus(dup.as_bytes(), None), Err(IngestError::DuplicateTurnId(_))));

        let unknown = "{\"turn_id\":\"a\",\"session_id\":\"s\",\"index\":0,\"speaker\":\"student\",\"text\":\"x\",\"gold\":\"XX\"}";
        assert!(matches!(load_corpus(unknown.as_bytes(), Some(&book())), Err(IngestError::UnknownGoldCode { .. })));
        assert!(load_corpus(unknown.as_bytes(), None).is_ok());
    }

    #[test]
    fn predictions_validated() {
        let cb = book();
        let p = load_predictions(
            "{\"turn_id\":\"t1\",\"model_id\":\"m\",\"probs\":{\"RQ\":0.58,\"SS\":0.42}}".as_bytes(),
            &cb,
            None,
        )
        .unwrap();
        assert_eq!(p[0].label, "RQ");
        assert_eq!(p[0].confidence, 0.58);

        let empty = "{\"turn_id\":\"t1\",\"model_id\":\"m\",\"probs\":{}}";
        assert!(matches!(
            load_predictions(empty.as_bytes(), &cb, None),
            Err(IngestError::InvalidPrediction { source: DomainError::ProbSumMismatch { .. }, .. })
        ));

        let corpus = vec![DialogueTurn::new("t0", "s", 0, Speaker::Student, "x", None)];
        let one = "{\"turn_id\":\"t1\",\"model_id\":\"m\",\"probs\":{\"RQ\":1.0}}";
        assert!(matches!(load_predictions(one.as_bytes(), &cb, Some(&corpus)), Err(IngestError::MissingTurn(_))));
    }

    #[test]
    fn prevalence_file() {
        let cb = book();
        let t = load_prevalence(r#"{"source":"reference","prevalence":{"RQ":0.7,"SS":0.3}}"#.as_bytes(), &cb).unwrap();
        assert_eq!(t.get("SS"), Some(0.3));
        assert_eq!(load_prevalence(write_prevalence(&t).as_slice(), &cb).unwrap(), t);
    }

    fn report(per_code: Vec<CodeKappa>) -> ReliabilityReport {
        ReliabilityReport {
            n: 2,
            overall_kappa: 0.5,
            per_code,
            confusion: ConfusionMatrix { codes: vec![], counts: vec![] },
            head_codes: vec![],
            tail_codes: vec![],
        }
    }

    #[test]
    fn per_code_csv_header_and_determinism() {
        let r = report(vec![CodeKappa { code: CodeId::new("RQ").unwrap(), kappa: 1.0 / 3.0, support: 3, degenerate: false }]);
        let tables = write_report(&r, ReportFormat::CsvTables).unwrap();
        let per_code = &tables.iter().find(|(n, _)| n == "per_code_kappa.csv").unwrap().1;
        let text = String::from_utf8(per_code.clone()).unwrap();
        assert!(text.starts_with("code,kappa,support,degenerate\n"));
        assert!(text.contains("RQ,0.3333333333333333,3,false"));
        assert_eq!(tables, write_report(&r, ReportFormat::CsvTables).unwrap());
        assert_eq!(write_report(&r, ReportFormat::Json).unwrap(), write_report(&r, ReportFormat::Json).unwrap());

        let empty = write_report(&report(vec![]), ReportFormat::CsvTables).unwrap();
        let per_code = &empty.iter().find(|(n, _)| n == "per_code_kappa.csv").unwrap().1;
        assert_eq!(per_code.as_slice(), b"code,kappa,support,degenerate\n");
    }

    fn arb_turn() -> impl Strategy<Value = DialogueTurn> {
        (
            "[a-z0-9]{1,6}",
            "s[0-3]",
            0u32..20,
            prop::bool::ANY,
            "\\PC{1,20}",
            prop::option::of(prop::sample::select(vec!["RQ", "SS"])),
        )
            .prop_filter("text must be non-blank", |t| !t.4.trim().is_empty())
            .prop_map(|(id, s, idx, stu, text, gold)| {
                DialogueTurn::new(
                    id,
                    s,
                    idx,
                    if stu { Speaker::Student } else { Speaker::Counterpart },
                    text,
                    gold.map(|g| CodeId::new(g).unwrap()),
                )
            })
    }

    proptest! {
        #[test]
        fn corpus_round_trip_and_order_stability(turns in prop::collection::vec(arb_turn(), 0..30), seed in any::<u64>()) {
            let mut seen = HashSet::new();
            let mut turns: Vec<_> = turns.into_iter().filter(|t| seen.insert(t.turn_id.clone())).collect();
            let cb = book();
            let loaded = load_corpus(write_corpus(&turns).as_slice(), Some(&cb)).unwrap();
            // permuting input lines never changes the loaded order
            let n = turns.len().max(1);
            turns.rotate_left((seed as usize) % n);
            turns.reverse();
            let permuted = load_corpus(write_corpus(&turns).as_slice(), Some(&cb)).unwrap();
            prop_assert_eq!(&loaded, &permuted);
            let again = load_corpus(write_corpus(&loaded).as_slice(), Some(&cb)).unwrap();
            prop_assert_eq!(loaded, again);
        }

        #[test]
        fn prediction_round_trip(p in 0.0f64..=1.0) {
            let cb = book();
            let rec = PredictionRecord {
                turn_id: "t".into(),
                model_id: "m".into(),
                probs: [("RQ".to_string(), p), ("SS".to_string(), 1.0 - p)].into_iter().collect(),
                extra: Default::default(),
            };
            let preds = vec![validate_prediction(rec, &cb).unwrap()];
            let again = load_predictions(write_predictions(&preds).as_slice(), &cb, None).unwrap();
            prop_assert_eq!(preds, again);
        }
    }
}
