//! Inputs for the engine benchmarks, built from the seeded fixtures.

use codewise_core::codebooks;
use codewise_core::fixtures::{clustered_embeddings, random_predictions, reference_prevalence};
use codewise_core::{CodeId, EmbeddingSet, Prediction, PrevalenceTable};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Roughly one semester of coded turns.
pub const LARGE_BATCH: usize = 77_000;

/// Two aligned labelings over the history-taking codes, agreeing about 70%
/// of the time.
pub fn label_pairs(n: usize, seed: u64) -> (Vec<CodeId>, Vec<CodeId>) {
    let ids: Vec<CodeId> = codebooks::history_taking().ids().cloned().collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let a: Vec<CodeId> = (0..n).map(|_| ids[rng.random_range(0..ids.len())].clone()).collect();
    let b = a
        .iter()
        .map(|x| if rng.random_bool(0.7) { x.clone() } else { ids[rng.random_range(0..ids.len())].clone() })
        .collect();
    (a, b)
}

pub fn routing_batch(n: usize) -> (Vec<Prediction>, PrevalenceTable) {
    (random_predictions(1, n), reference_prevalence(&codebooks::history_taking()))
}

/// 12 codes x `per_code` exemplars of dimension `dim`.
pub fn exemplar_set(per_code: usize, dim: usize) -> EmbeddingSet {
    let cb = codebooks::history_taking();
    clustered_embeddings(2, &cb, cb.len(), per_code, dim)
}
