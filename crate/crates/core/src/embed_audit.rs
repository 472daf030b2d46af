//! Codebook confusability audit: exemplar sampling, sentence embeddings,
//! pairwise cosine statistics, PCA to a few components, and the correlation
//! between centroid distance and similarity.

use std::collections::{BTreeMap, HashMap};
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::{Arc, RwLock};
use std::time::Duration;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::domain::{
    CodeId, Codebook, DialogueTurn, DomainError, EmbeddingRow, EmbeddingSet, PcaResult, SimilarityAudit,
    SimilaritySummary,
};

pub const DEFAULT_N_PER_CODE: usize = 50;
pub const DEFAULT_COMPONENTS: usize = 2;
/// Off-diagonal magnitude, relative to the matrix norm, below which the QL
/// sweep treats an eigenvalue as converged.
pub const EIGEN_TOLERANCE: f64 = 1e-10;
pub const EIGEN_MAX_ITERATIONS: usize = 100;

#[derive(Debug, Error)]
pub enum EmbedAuditError {
    #[error("code {0} has no gold exemplars")]
    NoExemplars(String),
    #[error("n_per_code must be at least 1")]
    InvalidSampleSize,
    #[error("embedding backend timed out: {0}")]
    ProviderTimeout(String),
    #[error("embedding backend failed: {0}")]
    Provider(String),
    #[error("expected {expected}-dimensional vectors, got {found}")]
    DimensionMismatch { expected: usize, found: usize },
    #[error("backend returned {found} vectors for {expected} texts")]
    CountMismatch { expected: usize, found: usize },
    #[error("row {0} has zero norm")]
    ZeroNormVector(usize),
    #[error("need at least 2 codes, got {0}")]
    TooFewCodes(usize),
    #[error("need at least {needed} rows, got {rows}")]
    TooFewRows { rows: usize, needed: usize },
    #[error("cannot extract {k} components from {dim}-dimensional data")]
    InvalidComponents { k: usize, dim: usize },
    #[error("all rows are identical")]
    DegenerateCovariance,
    #[error("eigen solver did not converge")]
    NoConvergence,
    #[error("need at least 3 code pairs, got {0}")]
    TooFewPairs(usize),
    #[error("input is constant")]
    ConstantInput,
    #[error(transparent)]
    Domain(#[from] DomainError),
}

/// Exemplars drawn for one code. `exhausted` is set when the code had fewer
/// gold turns than requested and all of them were taken.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExemplarSample {
    pub code: CodeId,
    pub turn_ids: Vec<String>,
    pub texts: Vec<String>,
    pub available: usize,
    pub exhausted: bool,
}

/// Samples up to `n_per_code` gold exemplars per code, uniformly without
/// replacement, in codebook order. Picked turns keep corpus order.
pub fn collect_exemplars(
    corpus: &[DialogueTurn],
    gold: &BTreeMap<String, CodeId>,
    cb: &Codebook,
    n_per_code: usize,
    seed: u64,
) -> Result<Vec<ExemplarSample>, EmbedAuditError> {
    if n_per_code == 0 {
        return Err(EmbedAuditError::InvalidSampleSize);
    }
    let mut ordered: Vec<&DialogueTurn> = corpus.iter().collect();
    ordered.sort_by(|a, b| (&a.session_id, a.index).cmp(&(&b.session_id, b.index)));
    let mut pools: BTreeMap<&CodeId, Vec<&DialogueTurn>> = BTreeMap::new();
    for turn in ordered {
        if let Some(code) = gold.get(&turn.turn_id) {
            pools.entry(code).or_default().push(turn);
        }
    }

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    cb.ids()
        .map(|code| {
            let pool = pools.get(code).filter(|p| !p.is_empty()).ok_or_else(|| EmbedAuditError::NoExemplars(code.to_string()))?;
            let mut picked = if pool.len() <= n_per_code {
                (0..pool.len()).collect::<Vec<_>>()
            } else {
                rand::seq::index::sample(&mut rng, pool.len(), n_per_code).into_vec()
            };
            picked.sort_unstable();
            Ok(ExemplarSample {
                code: code.clone(),
                turn_ids: picked.iter().map(|&i| pool[i].turn_id.clone()).collect(),
                texts: picked.iter().map(|&i| pool[i].text.clone()).collect(),
                available: pool.len(),
                exhausted: pool.len() < n_per_code,
            })
        })
        .collect()
}

pub trait EmbeddingBackend: Send + Sync {
    fn id(&self) -> &str;
    fn embed(&self, texts: &[String]) -> Result<Vec<Vec<f64>>, EmbedAuditError>;
}

/// Offline backend: each text maps to a fixed pseudo-random vector derived
/// from a hash of the seed and the text.
#[derive(Debug, Clone)]
pub struct HashEmbedding {
    pub dim: usize,
    pub seed: u64,
}

impl HashEmbedding {
    pub fn new(dim: usize, seed: u64) -> Self {
        Self { dim, seed }
    }

    pub fn vector(&self, text: &str) -> Vec<f64> {
        let mut hasher = Sha256::new();
        hasher.update(self.seed.to_le_bytes());
        hasher.update(text.as_bytes());
        let mut rng = ChaCha8Rng::from_seed(hasher.finalize().into());
        (0..self.dim).map(|_| rng.random_range(-1.0..1.0)).collect()
    }
}

impl EmbeddingBackend for HashEmbedding {
    fn id(&self) -> &str {
        "hash"
    }

    fn embed(&self, texts: &[String]) -> Result<Vec<Vec<f64>>, EmbedAuditError> {
        Ok(texts.iter().map(|t| self.vector(t)).collect())
    }
}

pub const ENV_EMBED_URL: &str = "CODEWISE_EMBED_URL";

/// POSTs `{texts: [...]}` and expects `{vectors: [[...], ...]}`.
pub struct HttpEmbeddingBackend {
    url: String,
    api_key: Option<String>,
    agent: ureq::Agent,
}

impl HttpEmbeddingBackend {
    pub fn new(url: impl Into<String>, api_key: Option<String>, timeout: Duration) -> Self {
        let config = ureq::Agent::config_builder().timeout_global(Some(timeout)).build();
        Self { url: url.into(), api_key, agent: config.into() }
    }
}

#[derive(Deserialize)]
struct WireVectors {
    vectors: Vec<Vec<f64>>,
}

impl EmbeddingBackend for HttpEmbeddingBackend {
    fn id(&self) -> &str {
        &self.url
    }

    fn embed(&self, texts: &[String]) -> Result<Vec<Vec<f64>>, EmbedAuditError> {
        let mut call = self.agent.post(&self.url);
        if let Some(key) = &self.api_key {
            call = call.header("Authorization", &format!("Bearer {key}"));
        }
        let map = |e: ureq::Error| match e {
            ureq::Error::Timeout(t) => EmbedAuditError::ProviderTimeout(t.to_string()),
            other => EmbedAuditError::Provider(other.to_string()),
        };
        let mut response = call.send_json(serde_json::json!({ "texts": texts })).map_err(map)?;
        let wire: WireVectors = response.body_mut().read_json().map_err(map)?;
        Ok(wire.vectors)
    }
}

/// Caching, batching front-end over an [`EmbeddingBackend`]. Vectors are
/// cached by the SHA-256 of their text.
pub struct Embedder {
    backend: Arc<dyn EmbeddingBackend>,
    cache: RwLock<HashMap<String, Vec<f64>>>,
    batch_size: usize,
    parallelism: usize,
    hits: AtomicUsize,
}

fn text_key(text: &str) -> String {
    hex::encode(Sha256::digest(text.as_bytes()))
}

impl Embedder {
    pub fn new(backend: Arc<dyn EmbeddingBackend>) -> Self {
        Self { backend, cache: RwLock::default(), batch_size: 64, parallelism: 4, hits: AtomicUsize::new(0) }
    }

    pub fn with_batching(mut self, batch_size: usize, parallelism: usize) -> Self {
        self.batch_size = batch_size.max(1);
        self.parallelism = parallelism.max(1);
        self
    }

    pub fn cache_hits(&self) -> usize {
        self.hits.load(Ordering::Relaxed)
    }

    pub fn embed(&self, texts: &[String]) -> Result<Vec<Vec<f64>>, EmbedAuditError> {
        let keys: Vec<String> = texts.iter().map(|t| text_key(t)).collect();
        let mut missing: Vec<usize> = Vec::new();
        {
            let cache = self.cache.read().expect("embedding cache lock");
            let mut queued = std::collections::HashSet::new();
            for (i, key) in keys.iter().enumerate() {
                if cache.contains_key(key) || !queued.insert(key.as_str()) {
                    self.hits.fetch_add(1, Ordering::Relaxed);
                } else {
                    missing.push(i);
                }
            }
        }

        let pool = rayon::ThreadPoolBuilder::new().num_threads(self.parallelism).build().expect("thread pool");
        let batches: Vec<Vec<usize>> = missing.chunks(self.batch_size).map(<[usize]>::to_vec).collect();
        let fetched = pool.install(|| {
            batches
                .par_iter()
                .map(|batch| {
                    let batch_texts: Vec<String> = batch.iter().map(|&i| texts[i].clone()).collect();
                    let vectors = self.backend.embed(&batch_texts)?;
                    if vectors.len() != batch.len() {
                        return Err(EmbedAuditError::CountMismatch { expected: batch.len(), found: vectors.len() });
                    }
                    Ok(batch.iter().copied().zip(vectors).collect::<Vec<_>>())
                })
                .collect::<Result<Vec<_>, _>>()
        })?;

        let mut cache = self.cache.write().expect("embedding cache lock");
        let mut dim = cache.values().next().map(Vec::len);
        for (i, vector) in fetched.into_iter().flatten() {
            let expected = *dim.get_or_insert(vector.len());
            if vector.len() != expected {
                return Err(EmbedAuditError::DimensionMismatch { expected, found: vector.len() });
            }
            cache.insert(keys[i].clone(), vector);
        }
        Ok(keys.iter().map(|k| cache[k].clone()).collect())
    }

    /// Embeds every exemplar and labels each row with its code.
    pub fn embed_exemplars(&self, samples: &[ExemplarSample]) -> Result<EmbeddingSet, EmbedAuditError> {
        let texts: Vec<String> = samples.iter().flat_map(|s| s.texts.iter().cloned()).collect();
        let vectors = self.embed(&texts)?;
        let codes = samples.iter().flat_map(|s| std::iter::repeat_n(s.code.clone(), s.texts.len()));
        let rows = codes
            .zip(texts)
            .zip(vectors)
            .map(|((code, text), vector)| EmbeddingRow { code, text, vector })
            .collect();
        Ok(EmbeddingSet::new(rows)?)
    }
}

pub fn cosine(u: &[f64], v: &[f64]) -> f64 {
    let dot: f64 = u.iter().zip(v).map(|(a, b)| a * b).sum();
    dot / (norm(u) * norm(v))
}

fn norm(u: &[f64]) -> f64 {
    u.iter().map(|x| x * x).sum::<f64>().sqrt()
}

fn unit_rows(es: &EmbeddingSet) -> Result<Vec<Vec<f64>>, EmbedAuditError> {
    es.rows()
        .iter()
        .enumerate()
        .map(|(i, r)| {
            let n = norm(&r.vector);
            if n == 0.0 {
                return Err(EmbedAuditError::ZeroNormVector(i));
            }
            Ok(r.vector.iter().map(|x| x / n).collect())
        })
        .collect()
}

fn dot(u: &[f64], v: &[f64]) -> f64 {
    u.iter().zip(v).map(|(a, b)| a * b).sum()
}

/// Cosine between every pair of exemplar rows.
pub fn cosine_matrix(es: &EmbeddingSet) -> Result<Vec<Vec<f64>>, EmbedAuditError> {
    let units = unit_rows(es)?;
    Ok(units.iter().map(|u| units.iter().map(|v| dot(u, v).clamp(-1.0, 1.0)).collect()).collect())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PairSimilarity {
    pub codes: Vec<CodeId>,
    pub pair_similarity: Vec<Vec<Option<f64>>>,
    pub summary: SimilaritySummary,
}

/// Mean cross-exemplar cosine for every pair of codes. The summary covers
/// the distinct code pairs (upper triangle) and uses the sample SD.
pub fn cosine_pair_matrix(es: &EmbeddingSet) -> Result<PairSimilarity, EmbedAuditError> {
    let codes = es.codes();
    if codes.len() < 2 {
        return Err(EmbedAuditError::TooFewCodes(codes.len()));
    }
    let units = unit_rows(es)?;
    let groups: Vec<Vec<&Vec<f64>>> = codes
        .iter()
        .map(|c| es.rows().iter().zip(&units).filter(|(r, _)| &r.code == c).map(|(_, u)| u).collect())
        .collect();

    let k = codes.len();
    let mut matrix = vec![vec![None; k]; k];
    for a in 0..k {
        let within: Vec<f64> = (0..groups[a].len())
            .flat_map(|i| ((i + 1)..groups[a].len()).map(move |j| (i, j)))
            .map(|(i, j)| dot(groups[a][i], groups[a][j]))
            .collect();
        if !within.is_empty() {
            matrix[a][a] = Some(within.iter().sum::<f64>() / within.len() as f64);
        }
        for b in (a + 1)..k {
            let mut sum = 0.0;
            for u in &groups[a] {
                for v in &groups[b] {
                    sum += dot(u, v);
                }
            }
            let mean = sum / (groups[a].len() * groups[b].len()) as f64;
            matrix[a][b] = Some(mean);
            matrix[b][a] = Some(mean);
        }
    }

    let upper: Vec<f64> = (0..k).flat_map(|a| ((a + 1)..k).map(move |b| (a, b))).map(|(a, b)| matrix[a][b].unwrap()).collect();
    let n = upper.len();
    let mean = upper.iter().sum::<f64>() / n as f64;
    let sd = if n > 1 { (upper.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1) as f64).sqrt() } else { 0.0 };
    Ok(PairSimilarity { codes, pair_similarity: matrix, summary: SimilaritySummary { mean, sd, n_pairs: n } })
}

/// Eigenvalues (ascending) and eigenvectors (columns of the returned row-major
/// matrix) of a symmetric matrix: Householder reduction to tridiagonal form
/// followed by the implicit QL algorithm.
pub fn symmetric_eigen(a: &[Vec<f64>]) -> Result<(Vec<f64>, Vec<Vec<f64>>), EmbedAuditError> {
    let n = a.len();
    if n == 0 {
        return Ok((vec![], vec![]));
    }
    let mut v: Vec<Vec<f64>> = a.to_vec();
    let mut d = vec![0.0; n];
    let mut e = vec![0.0; n];
    tridiagonalize(&mut v, &mut d, &mut e);
    ql_implicit(&mut v, &mut d, &mut e)?;

    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&i, &j| d[i].total_cmp(&d[j]));
    let values = order.iter().map(|&i| d[i]).collect();
    let vectors = (0..n).map(|r| order.iter().map(|&c| v[r][c]).collect()).collect();
    Ok((values, vectors))
}

fn tridiagonalize(v: &mut [Vec<f64>], d: &mut [f64], e: &mut [f64]) {
    let n = d.len();
    d.copy_from_slice(&v[n - 1]);
    for i in (1..n).rev() {
        let scale: f64 = d[..i].iter().map(|x| x.abs()).sum();
        let mut h = 0.0;
        if scale == 0.0 {
            e[i] = d[i - 1];
            for j in 0..i {
                d[j] = v[i - 1][j];
                v[i][j] = 0.0;
                v[j][i] = 0.0;
            }
        } else {
            for x in &mut d[..i] {
                *x /= scale;
                h += *x * *x;
            }
            let mut f = d[i - 1];
            let mut g = if f > 0.0 { -h.sqrt() } else { h.sqrt() };
            e[i] = scale * g;
            h -= f * g;
            d[i - 1] = f - g;
            e[..i].fill(0.0);
            for j in 0..i {
                f = d[j];
                v[j][i] = f;
                g = e[j] + v[j][j] * f;
                for k in (j + 1)..i {
                    g += v[k][j] * d[k];
                    e[k] += v[k][j] * f;
                }
                e[j] = g;
            }
            f = 0.0;
            for j in 0..i {
                e[j] /= h;
                f += e[j] * d[j];
            }
            let hh = f / (h + h);
            for j in 0..i {
                e[j] -= hh * d[j];
            }
            for j in 0..i {
                f = d[j];
                g = e[j];
                for k in j..i {
                    v[k][j] -= f * e[k] + g * d[k];
                }
                d[j] = v[i - 1][j];
                v[i][j] = 0.0;
            }
        }
        d[i] = h;
    }

    for i in 0..n - 1 {
        v[n - 1][i] = v[i][i];
        v[i][i] = 1.0;
        let h = d[i + 1];
        if h != 0.0 {
            for k in 0..=i {
                d[k] = v[k][i + 1] / h;
            }
            for j in 0..=i {
                let g: f64 = (0..=i).map(|k| v[k][i + 1] * v[k][j]).sum();
                for k in 0..=i {
                    v[k][j] -= g * d[k];
                }
            }
        }
        for row in v.iter_mut().take(i + 1) {
            row[i + 1] = 0.0;
        }
    }
    for j in 0..n {
        d[j] = v[n - 1][j];
        v[n - 1][j] = 0.0;
    }
    v[n - 1][n - 1] = 1.0;
    e[0] = 0.0;
}

fn ql_implicit(v: &mut [Vec<f64>], d: &mut [f64], e: &mut [f64]) -> Result<(), EmbedAuditError> {
    let n = d.len();
    for i in 1..n {
        e[i - 1] = e[i];
    }
    e[n - 1] = 0.0;

    let mut f = 0.0;
    let mut tst1: f64 = 0.0;
    for l in 0..n {
        tst1 = tst1.max(d[l].abs() + e[l].abs());
        let tol = EIGEN_TOLERANCE * tst1;
        let mut m = l;
        while m < n - 1 && e[m].abs() > tol {
            m += 1;
        }
        if m > l {
            let mut iter = 0;
            loop {
                iter += 1;
                if iter > EIGEN_MAX_ITERATIONS {
                    return Err(EmbedAuditError::NoConvergence);
                }
                let mut g = d[l];
                let mut p = (d[l + 1] - g) / (2.0 * e[l]);
                let mut r = p.hypot(1.0);
                if p < 0.0 {
                    r = -r;
                }
                d[l] = e[l] / (p + r);
                d[l + 1] = e[l] * (p + r);
                let dl1 = d[l + 1];
                let mut h = g - d[l];
                for x in &mut d[(l + 2)..n] {
                    *x -= h;
                }
                f += h;

                p = d[m];
                let mut c = 1.0;
                let mut c2 = c;
                let mut c3 = c;
                let el1 = e[l + 1];
                let mut s = 0.0;
                let mut s2 = 0.0;
                for i in (l..m).rev() {
                    c3 = c2;
                    c2 = c;
                    s2 = s;
                    g = c * e[i];
                    h = c * p;
                    r = p.hypot(e[i]);
                    e[i + 1] = s * r;
                    s = e[i] / r;
                    c = p / r;
                    p = c * d[i] - s * g;
                    d[i + 1] = h + s * (c * g + s * d[i]);
                    for row in v.iter_mut() {
                        h = row[i + 1];
                        row[i + 1] = s * row[i] + c * h;
                        row[i] = c * row[i] - s * h;
                    }
                }
                p = -s * s2 * c3 * el1 * e[l] / dl1;
                e[l] = s * p;
                d[l] = c * p;
                if e[l].abs() <= tol {
                    break;
                }
            }
        }
        d[l] += f;
        e[l] = 0.0;
    }
    Ok(())
}

fn orthonormalize_against(mut u: Vec<f64>, basis: &[Vec<f64>]) -> Option<Vec<f64>> {
    for _ in 0..2 {
        for b in basis {
            let p = dot(&u, b);
            u.iter_mut().zip(b).for_each(|(x, y)| *x -= p * y);
        }
    }
    let n = norm(&u);
    (n > 1e-8).then(|| u.into_iter().map(|x| x / n).collect())
}

/// Flips `u` so its largest-magnitude coordinate (first on ties) is positive.
fn fix_sign(u: &mut [f64]) {
    let mut best = 0;
    for (i, x) in u.iter().enumerate() {
        if x.abs() > u[best].abs() {
            best = i;
        }
    }
    if u[best] < 0.0 {
        u.iter_mut().for_each(|x| *x = -*x);
    }
}

/// Principal component analysis of the mean-centred rows. Works on the
/// smaller of the Gram and covariance matrices. Variance ratios are each
/// component's eigenvalue over the total variance.
pub fn pca_project(es: &EmbeddingSet, k: usize) -> Result<PcaResult, EmbedAuditError> {
    let rows = es.rows();
    let (n, dim) = (rows.len(), es.dim());
    if k == 0 || k > dim {
        return Err(EmbedAuditError::InvalidComponents { k, dim });
    }
    if n < k + 1 {
        return Err(EmbedAuditError::TooFewRows { rows: n, needed: k + 1 });
    }
    let mut mean = vec![0.0; dim];
    for r in rows {
        mean.iter_mut().zip(&r.vector).for_each(|(m, x)| *m += x);
    }
    mean.iter_mut().for_each(|m| *m /= n as f64);
    let centred: Vec<Vec<f64>> = rows.iter().map(|r| r.vector.iter().zip(&mean).map(|(x, m)| x - m).collect()).collect();

    let raw_scale: f64 = rows.iter().map(|r| dot(&r.vector, &r.vector)).sum();
    let trace: f64 = centred.iter().map(|r| dot(r, r)).sum();
    if trace <= 1e-24 * raw_scale.max(f64::MIN_POSITIVE) {
        return Err(EmbedAuditError::DegenerateCovariance);
    }

    let mut eigenvalues: Vec<f64>;
    let mut candidates: Vec<Vec<f64>> = Vec::with_capacity(k);
    if n <= dim {
        let gram: Vec<Vec<f64>> = centred.iter().map(|a| centred.iter().map(|b| dot(a, b)).collect()).collect();
        let (vals, vecs) = symmetric_eigen(&gram)?;
        eigenvalues = vals.into_iter().rev().collect();
        for c in (0..n).rev().take(k) {
            let lambda = eigenvalues[n - 1 - c];
            if lambda > EIGEN_TOLERANCE * trace {
                let mut u = vec![0.0; dim];
                for (i, row) in centred.iter().enumerate() {
                    u.iter_mut().zip(row).for_each(|(x, y)| *x += vecs[i][c] * y);
                }
                candidates.push(u);
            } else {
                candidates.push(Vec::new());
            }
        }
    } else {
        let mut cov = vec![vec![0.0; dim]; dim];
        for row in &centred {
            for i in 0..dim {
                for j in i..dim {
                    cov[i][j] += row[i] * row[j];
                }
            }
        }
        for i in 1..dim {
            let (upper, lower) = cov.split_at_mut(i);
            for (j, row) in upper.iter().enumerate() {
                lower[0][j] = row[i];
            }
        }
        let (vals, vecs) = symmetric_eigen(&cov)?;
        eigenvalues = vals.into_iter().rev().collect();
        for c in (0..dim).rev().take(k) {
            candidates.push(vecs.iter().map(|row| row[c]).collect());
        }
    }
    eigenvalues.iter_mut().for_each(|l| *l = l.max(0.0));

    let mut components: Vec<Vec<f64>> = Vec::with_capacity(k);
    let mut fill = 0;
    for cand in candidates {
        let u = match orthonormalize_against(cand, &components) {
            Some(u) => u,
            None => loop {
                let mut e = vec![0.0; dim];
                e[fill] = 1.0;
                fill += 1;
                if let Some(u) = orthonormalize_against(e, &components) {
                    break u;
                }
            },
        };
        components.push(u);
    }
    components.iter_mut().for_each(|u| fix_sign(u));

    let variance_ratios = eigenvalues.iter().take(k).map(|l| l / trace).collect();
    let projected: Vec<Vec<f64>> = centred.iter().map(|r| components.iter().map(|u| dot(r, u)).collect()).collect();
    let row_codes: Vec<CodeId> = rows.iter().map(|r| r.code.clone()).collect();
    let centroids = es
        .codes()
        .into_iter()
        .map(|code| {
            let members: Vec<&Vec<f64>> = projected.iter().zip(&row_codes).filter(|(_, c)| **c == code).map(|(p, _)| p).collect();
            let centroid = (0..k).map(|j| members.iter().map(|p| p[j]).sum::<f64>() / members.len() as f64).collect();
            (code, centroid)
        })
        .collect();
    Ok(PcaResult { variance_ratios, components, projected, row_codes, centroids })
}

/// Pearson product-moment correlation.
pub fn pearson(x: &[f64], y: &[f64]) -> Result<f64, EmbedAuditError> {
    let n = x.len().min(y.len());
    let (x, y) = (&x[..n], &y[..n]);
    let mx = x.iter().sum::<f64>() / n as f64;
    let my = y.iter().sum::<f64>() / n as f64;
    let sxy: f64 = x.iter().zip(y).map(|(a, b)| (a - mx) * (b - my)).sum();
    let sxx: f64 = x.iter().map(|a| (a - mx).powi(2)).sum();
    let syy: f64 = y.iter().map(|b| (b - my).powi(2)).sum();
    if sxx == 0.0 || syy == 0.0 {
        return Err(EmbedAuditError::ConstantInput);
    }
    Ok((sxy / (sxx * syy).sqrt()).clamp(-1.0, 1.0))
}

/// Correlation, over distinct code pairs, between the Euclidean distance of
/// projected centroids and the pair's mean cosine similarity.
pub fn distance_similarity_correlation(
    codes: &[CodeId],
    pair_similarity: &[Vec<Option<f64>>],
    centroids: &[(CodeId, Vec<f64>)],
) -> Result<f64, EmbedAuditError> {
    let position: HashMap<&CodeId, &Vec<f64>> = centroids.iter().map(|(c, p)| (c, p)).collect();
    let mut distances = Vec::new();
    let mut similarities = Vec::new();
    for a in 0..codes.len() {
        for b in (a + 1)..codes.len() {
            let (Some(pa), Some(pb), Some(s)) = (position.get(&codes[a]), position.get(&codes[b]), pair_similarity[a][b]) else {
                continue;
            };
            distances.push(pa.iter().zip(pb.iter()).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt());
            similarities.push(s);
        }
    }
    if distances.len() < 3 {
        return Err(EmbedAuditError::TooFewPairs(distances.len()));
    }
    pearson(&distances, &similarities)
}

/// Similarity statistics, PCA and the distance/similarity correlation for
/// an embedded exemplar set.
pub fn audit_embeddings(es: &EmbeddingSet, k: usize) -> Result<SimilarityAudit, EmbedAuditError> {
    let pairs = cosine_pair_matrix(es)?;
    let pca = pca_project(es, k)?;
    let r = distance_similarity_correlation(&pairs.codes, &pairs.pair_similarity, &pca.centroids)?;
    Ok(SimilarityAudit {
        codes: pairs.codes,
        pair_similarity: pairs.pair_similarity,
        summary: pairs.summary,
        pca,
        distance_similarity_r: r,
    })
}
