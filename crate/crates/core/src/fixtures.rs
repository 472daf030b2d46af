//! Deterministic synthetic data for tests, benchmarks and offline runs.

use std::collections::BTreeMap;

use rand::seq::{IndexedRandom, SliceRandom};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::codebooks;
use crate::domain::{
    CodeId, Codebook, DialogueTurn, EmbeddingRow, EmbeddingSet, Prediction, PredictionRecord, PrevalenceSource,
    PrevalenceTable, Speaker, validate_prediction,
};

/// Head-code shares of the history-taking corpus; the other eight codes
/// split the remainder evenly.
pub const HEAD_PREVALENCE: [(&str, f64); 4] = [("RQ", 0.542), ("SS", 0.218), ("LO", 0.085), ("CC", 0.081)];

pub const WORKFLOW_TURNS: usize = 500;
pub const WORKFLOW_ESCALATIONS: usize = 44;
const TURNS_PER_SESSION: usize = 10;

/// Reference prevalence for the history-taking codebook.
pub fn reference_prevalence(cb: &Codebook) -> PrevalenceTable {
    let mut table: BTreeMap<String, f64> = HEAD_PREVALENCE.iter().map(|(k, v)| (k.to_string(), *v)).collect();
    let rest: Vec<String> = cb.ids().map(|c| c.to_string()).filter(|c| !table.contains_key(c)).collect();
    let remaining = 1.0 - table.values().sum::<f64>();
    for code in rest.iter() {
        table.insert(code.clone(), remaining / rest.len() as f64);
    }
    PrevalenceTable::new(PrevalenceSource::Reference, table, cb).expect("reference prevalence is valid")
}

/// A decision the scripted annotator makes for one case.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ScriptedDecision {
    pub case_id: String,
    pub annotator: String,
    pub code: CodeId,
}

#[derive(Debug, Clone)]
pub struct WorkflowFixture {
    pub codebook: Codebook,
    /// Student turns carrying gold labels, each followed by a counterpart reply.
    pub corpus: Vec<DialogueTurn>,
    pub predictions: Vec<Prediction>,
    pub prevalence: PrevalenceTable,
    /// Turn ids the router must escalate under the default thresholds.
    pub escalated: Vec<String>,
    /// Gold-matching decisions for every escalated turn.
    pub decisions: Vec<ScriptedDecision>,
}

impl WorkflowFixture {
    pub fn gold(&self) -> BTreeMap<String, CodeId> {
        crate::adjudication::gold_from_corpus(&self.corpus)
    }
}

fn draw_code<'a>(rng: &mut ChaCha8Rng, prevalence: &'a PrevalenceTable) -> &'a CodeId {
    let mut u: f64 = rng.random();
    for (code, p) in &prevalence.prevalence {
        if u < *p {
            return code;
        }
        u -= p;
    }
    prevalence.prevalence.keys().next_back().expect("non-empty table")
}

/// Probability vector with `conf` on `label`, a runner-up below `conf`, and
/// the rest spread evenly.
fn probs_for(cb: &Codebook, label: &CodeId, runner_up: &CodeId, conf: f64) -> BTreeMap<String, f64> {
    let rest = 1.0 - conf;
    let second = (0.7 * rest).min(0.9 * conf);
    let others = cb.len() - 2;
    let spread = (rest - second) / others as f64;
    cb.ids()
        .map(|id| {
            let p = if id == label {
                conf
            } else if id == runner_up {
                second
            } else {
                spread
            };
            (id.to_string(), p)
        })
        .collect()
}

/// 500 coded student turns in 50 sessions over the history-taking codebook,
/// with classifier predictions built so that exactly 44 turns fall below the
/// confidence threshold or carry a tail-code label. Non-escalated labels are
/// head codes with confidence at least 0.6; about half the escalated labels
/// are wrong.
pub fn synthetic_workflow(seed: u64) -> WorkflowFixture {
    let cb = codebooks::history_taking();
    let prevalence = reference_prevalence(&cb);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let head: Vec<CodeId> = HEAD_PREVALENCE.iter().map(|(c, _)| CodeId::new(*c).unwrap()).collect();
    let tail: Vec<CodeId> = cb.ids().filter(|c| !head.contains(c)).cloned().collect();

    let gold: Vec<CodeId> = (0..WORKFLOW_TURNS).map(|_| draw_code(&mut rng, &prevalence).clone()).collect();
    let mut order: Vec<usize> = (0..WORKFLOW_TURNS).collect();
    order.shuffle(&mut rng);
    let mut escalate = vec![false; WORKFLOW_TURNS];
    for &i in &order[..WORKFLOW_ESCALATIONS] {
        escalate[i] = true;
    }

    let mut corpus = Vec::with_capacity(2 * WORKFLOW_TURNS);
    let mut predictions = Vec::with_capacity(WORKFLOW_TURNS);
    for (i, g) in gold.iter().enumerate() {
        let session = format!("s{:03}", i / TURNS_PER_SESSION);
        let index = 2 * (i % TURNS_PER_SESSION) as u32;
        let turn_id = format!("t{i:04}");
        let example = cb.get(g.as_str()).and_then(|c| c.examples.first()).map_or("Could you tell me more?", String::as_str);
        corpus.push(DialogueTurn::new(&turn_id, &session, index, Speaker::Student, format!("{example} [{i}]"), Some(g.clone())));
        corpus.push(DialogueTurn::new(format!("r{i:04}"), &session, index + 1, Speaker::Counterpart, format!("Patient reply {i}."), None));

        let (label, conf) = if escalate[i] {
            let label = if rng.random_bool(0.5) { g.clone() } else { cb.codes().choose(&mut rng).unwrap().id.clone() };
            let conf = if tail.contains(&label) { rng.random_range(0.35..0.95) } else { rng.random_range(0.35..0.59) };
            (label, conf)
        } else {
            let label = if head.contains(g) && rng.random_bool(0.85) {
                g.clone()
            } else {
                head.choose(&mut rng).unwrap().clone()
            };
            (label, rng.random_range(0.6..0.99))
        };
        let runner_up = if &label == g { head.iter().find(|h| **h != label).unwrap() } else { g };
        let record = PredictionRecord {
            turn_id: turn_id.clone(),
            model_id: "synthetic-classifier".into(),
            probs: probs_for(&cb, &label, runner_up, conf),
            extra: Default::default(),
        };
        predictions.push(validate_prediction(record, &cb).expect("synthetic prediction is valid"));
    }

    let escalated: Vec<String> = (0..WORKFLOW_TURNS).filter(|&i| escalate[i]).map(|i| format!("t{i:04}")).collect();
    let decisions = (0..WORKFLOW_TURNS)
        .filter(|&i| escalate[i])
        .map(|i| ScriptedDecision { case_id: format!("t{i:04}"), annotator: "expert-1".into(), code: gold[i].clone() })
        .collect();
    WorkflowFixture { codebook: cb, corpus, predictions, prevalence, escalated, decisions }
}

/// `per_code` noisy points around each of the first `n_codes` codebook codes.
/// Cluster centres sit on an arc, so codes further apart along the arc are
/// both more distant and less similar.
pub fn clustered_embeddings(seed: u64, cb: &Codebook, n_codes: usize, per_code: usize, dim: usize) -> EmbeddingSet {
    assert!(dim >= 3 && n_codes <= cb.len());
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut rows = Vec::with_capacity(n_codes * per_code);
    for (c, code) in cb.ids().take(n_codes).enumerate() {
        let theta = 0.5 * c as f64;
        for j in 0..per_code {
            let mut v: Vec<f64> = (0..dim).map(|_| rng.random_range(-0.05..0.05)).collect();
            v[0] += theta.cos();
            v[1] += theta.sin();
            v[2] += 0.5;
            rows.push(EmbeddingRow { code: code.clone(), text: format!("{code} exemplar {j}"), vector: v });
        }
    }
    EmbeddingSet::new(rows).expect("synthetic embeddings are valid")
}

/// `n` random predictions over the history-taking codebook, for benchmarks
/// and router property checks.
pub fn random_predictions(seed: u64, n: usize) -> Vec<Prediction> {
    let cb = codebooks::history_taking();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n)
        .map(|i| {
            let mut weights: Vec<f64> = (0..cb.len()).map(|_| rng.random::<f64>().powi(3)).collect();
            let total: f64 = weights.iter().sum();
            weights.iter_mut().for_each(|w| *w /= total);
            let probs = cb.ids().zip(weights).map(|(id, w)| (id.to_string(), w)).collect();
            let record = PredictionRecord { turn_id: format!("p{i}"), model_id: "random".into(), probs, extra: Default::default() };
            validate_prediction(record, &cb).expect("normalised weights are valid")
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::router::{route_batch, RouterConfig};

    #[test]
    fn workflow_fixture_escalates_exactly_44() {
        let f = synthetic_workflow(42);
        assert_eq!(f.predictions.len(), 500);
        assert_eq!(f.corpus.len(), 1000);
        let routed = route_batch(&f.predictions, &f.prevalence, &RouterConfig::default()).unwrap();
        assert_eq!(routed.summary.n_escalated, 44);
        let ids: Vec<String> = routed.escalated().map(|d| d.turn_id.clone()).collect();
        assert_eq!(ids, f.escalated);
        assert_eq!(f.decisions.len(), 44);
    }

    #[test]
    fn fixtures_are_seeded() {
        assert_eq!(synthetic_workflow(1).predictions, synthetic_workflow(1).predictions);
        assert_ne!(synthetic_workflow(1).predictions, synthetic_workflow(2).predictions);
        let cb = codebooks::history_taking();
        assert_eq!(clustered_embeddings(3, &cb, 3, 10, 8), clustered_embeddings(3, &cb, 3, 10, 8));
        assert_eq!(random_predictions(5, 10), random_predictions(5, 10));
    }
}
