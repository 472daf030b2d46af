//! Reliability and error-analysis metrics.
//!
//! Cohen's kappa is `(po - pe) / (1 - pe)` where `po` is observed agreement
//! and `pe = sum_c pA(c) * pB(c)` is chance agreement from the two marginals.
//! Everything is computed from integer counts so results do not depend on
//! accumulation order. When `pe = 1` both labelings are the same constant and
//! kappa is defined as 1.
//!
//! One-vs-rest kappa for a code that appears in neither labeling is reported
//! as 0 with `degenerate = true`.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::domain::{
    derive_prevalence, CodeId, CodeKappa, Codebook, ConfusionMatrix, PrevalenceSource, PrevalenceTable,
    ReliabilityReport, Verdict, VerdictMatrix,
};
use crate::router::split_head_tail;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum MetricsError {
    #[error("label sequences differ in length ({0} vs {1})")]
    LengthMismatch(usize, usize),
    #[error("empty input")]
    EmptyInput,
    #[error("label {0:?} is not in the codebook")]
    UnknownLabel(String),
}

/// Kappa from agreement count and the marginal product sum, all as counts
/// over `n` items.
fn kappa_from_counts(n: u64, agree: u64, marginal_product: u128) -> f64 {
    let n2 = (n as u128) * (n as u128);
    if marginal_product == n2 {
        return 1.0;
    }
    let num = (agree as u128 * n as u128) as f64 - marginal_product as f64;
    let den = (n2 - marginal_product) as f64;
    num / den
}

fn check_aligned<A, B>(a: &[A], b: &[B]) -> Result<(), MetricsError> {
    if a.len() != b.len() {
        return Err(MetricsError::LengthMismatch(a.len(), b.len()));
    }
    if a.is_empty() {
        return Err(MetricsError::EmptyInput);
    }
    Ok(())
}

/// Cohen's kappa between two aligned labelings over any label type.
pub fn cohen_kappa<T: Ord>(a: &[T], b: &[T]) -> Result<f64, MetricsError> {
    check_aligned(a, b)?;
    let mut marg: BTreeMap<&T, (u64, u64)> = BTreeMap::new();
    let mut agree = 0u64;
    for (x, y) in a.iter().zip(b) {
        marg.entry(x).or_default().0 += 1;
        marg.entry(y).or_default().1 += 1;
        agree += u64::from(x == y);
    }
    let product: u128 = marg.values().map(|&(ca, cb)| ca as u128 * cb as u128).sum();
    Ok(kappa_from_counts(a.len() as u64, agree, product))
}

/// Observed agreement: fraction of positions with identical labels.
pub fn observed_agreement<T: PartialEq>(a: &[T], b: &[T]) -> Result<f64, MetricsError> {
    check_aligned(a, b)?;
    Ok(a.iter().zip(b).filter(|(x, y)| x == y).count() as f64 / a.len() as f64)
}

fn indices(labels: &[CodeId], cb: &Codebook) -> Result<Vec<usize>, MetricsError> {
    labels
        .iter()
        .map(|l| cb.index_of(l.as_str()).ok_or_else(|| MetricsError::UnknownLabel(l.to_string())))
        .collect()
}

/// Kappa for a binarized (positive vs. rest) pair of labelings.
fn binary_kappa(pred: impl Iterator<Item = bool>, gold: impl Iterator<Item = bool>) -> (f64, bool) {
    let (mut tp, mut fp, mut fn_, mut tn) = (0u64, 0u64, 0u64, 0u64);
    for (p, g) in pred.zip(gold) {
        match (p, g) {
            (true, true) => tp += 1,
            (true, false) => fp += 1,
            (false, true) => fn_ += 1,
            (false, false) => tn += 1,
        }
    }
    kappa_2x2(tp, fp, fn_, tn)
}

/// One-vs-rest kappa from a 2x2 table; returns `(kappa, degenerate)`.
fn kappa_2x2(tp: u64, fp: u64, fn_: u64, tn: u64) -> (f64, bool) {
    if tp + fp + fn_ == 0 {
        return (0.0, true);
    }
    let n = tp + fp + fn_ + tn;
    let pos = (tp + fp) as u128 * (tp + fn_) as u128;
    let neg = (fn_ + tn) as u128 * (fp + tn) as u128;
    (kappa_from_counts(n, tp + tn, pos + neg), false)
}

/// One-vs-rest kappa for every code, in codebook order. `support` is the
/// number of gold occurrences.
pub fn per_code_kappa(pred: &[CodeId], gold: &[CodeId], cb: &Codebook) -> Result<Vec<CodeKappa>, MetricsError> {
    check_aligned(pred, gold)?;
    let p = indices(pred, cb)?;
    let g = indices(gold, cb)?;
    Ok(cb
        .ids()
        .enumerate()
        .map(|(k, id)| {
            let (kappa, degenerate) = binary_kappa(p.iter().map(|&x| x == k), g.iter().map(|&x| x == k));
            CodeKappa { code: id.clone(), kappa, support: g.iter().filter(|&&x| x == k).count(), degenerate }
        })
        .collect())
}

pub fn confusion_matrix(pred: &[CodeId], gold: &[CodeId], cb: &Codebook) -> Result<ConfusionMatrix, MetricsError> {
    check_aligned(pred, gold)?;
    let p = indices(pred, cb)?;
    let g = indices(gold, cb)?;
    let mut counts = vec![vec![0usize; cb.len()]; cb.len()];
    for (&gi, &pi) in g.iter().zip(&p) {
        counts[gi][pi] += 1;
    }
    Ok(ConfusionMatrix { codes: cb.ids().cloned().collect(), counts })
}

/// Overall kappa recomputed from a confusion matrix.
pub fn kappa_from_confusion(m: &ConfusionMatrix) -> Result<f64, MetricsError> {
    let n = m.total() as u64;
    if n == 0 {
        return Err(MetricsError::EmptyInput);
    }
    let agree: u64 = (0..m.codes.len()).map(|i| m.counts[i][i] as u64).sum();
    let product: u128 = (0..m.codes.len()).map(|i| m.row_sum(i) as u128 * m.col_sum(i) as u128).sum();
    Ok(kappa_from_counts(n, agree, product))
}

/// One-vs-rest kappa per code recomputed from a confusion matrix.
pub fn per_code_kappa_from_confusion(m: &ConfusionMatrix) -> Vec<CodeKappa> {
    let n = m.total() as u64;
    (0..m.codes.len())
        .map(|k| {
            let tp = m.counts[k][k] as u64;
            let fp = m.col_sum(k) as u64 - tp;
            let fn_ = m.row_sum(k) as u64 - tp;
            let tn = n - tp - fp - fn_;
            let (kappa, degenerate) = kappa_2x2(tp, fp, fn_, tn);
            CodeKappa { code: m.codes[k].clone(), kappa, support: m.row_sum(k), degenerate }
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FalsePositiveShare {
    pub code: CodeId,
    pub count: usize,
    /// Fraction of all false positives; 0 when there are none.
    pub share: f64,
}

fn shares(cb: &Codebook, counts: Vec<usize>) -> Vec<FalsePositiveShare> {
    let total: usize = counts.iter().sum();
    cb.ids()
        .zip(counts)
        .map(|(id, count)| FalsePositiveShare {
            code: id.clone(),
            count,
            share: if total == 0 { 0.0 } else { count as f64 / total as f64 },
        })
        .collect()
}

/// `FP(c) = #{pred = c and gold != c}` for every code, in codebook order.
pub fn false_positive_distribution(
    pred: &[CodeId],
    gold: &[CodeId],
    cb: &Codebook,
) -> Result<Vec<FalsePositiveShare>, MetricsError> {
    check_aligned(pred, gold)?;
    let p = indices(pred, cb)?;
    let g = indices(gold, cb)?;
    let mut counts = vec![0usize; cb.len()];
    for (&pi, &gi) in p.iter().zip(&g) {
        if pi != gi {
            counts[pi] += 1;
        }
    }
    Ok(shares(cb, counts))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Substitution {
    /// The true code behind a false positive of the target.
    pub gold: CodeId,
    pub count: usize,
    pub fraction: f64,
}

fn distribution(cb: &Codebook, counts: Vec<usize>) -> Vec<Substitution> {
    let total: usize = counts.iter().sum();
    cb.ids()
        .zip(counts)
        .filter(|(_, c)| *c > 0)
        .map(|(id, count)| Substitution { gold: id.clone(), count, fraction: count as f64 / total as f64 })
        .collect()
}

/// Distribution of gold codes over the false positives of `target`. Empty
/// when the target has no false positives.
pub fn substitution_analysis(
    pred: &[CodeId],
    gold: &[CodeId],
    cb: &Codebook,
    target: &str,
) -> Result<Vec<Substitution>, MetricsError> {
    check_aligned(pred, gold)?;
    let t = cb.index_of(target).ok_or_else(|| MetricsError::UnknownLabel(target.to_string()))?;
    let p = indices(pred, cb)?;
    let g = indices(gold, cb)?;
    let mut counts = vec![0usize; cb.len()];
    for (&pi, &gi) in p.iter().zip(&g) {
        if pi == t && gi != t {
            counts[gi] += 1;
        }
    }
    Ok(distribution(cb, counts))
}

/// Fraction of `No` answers among all verdicts.
pub fn negativity_bias(matrix: &VerdictMatrix) -> Result<f64, MetricsError> {
    if matrix.is_empty() {
        return Err(MetricsError::EmptyInput);
    }
    let no = matrix.verdicts.iter().filter(|v| **v == Verdict::No).count();
    Ok(no as f64 / matrix.len() as f64)
}

fn gold_rows(matrix: &VerdictMatrix, gold: &[CodeId], cb: &Codebook) -> Result<Vec<usize>, MetricsError> {
    if matrix.turn_ids.len() != gold.len() {
        return Err(MetricsError::LengthMismatch(matrix.turn_ids.len(), gold.len()));
    }
    if gold.is_empty() {
        return Err(MetricsError::EmptyInput);
    }
    indices(gold, cb)
}

fn column_codes(matrix: &VerdictMatrix, cb: &Codebook) -> Result<Vec<usize>, MetricsError> {
    indices(&matrix.codes, cb)
}

/// Per-code kappa between binary verdicts and the binarized gold labels.
/// Anything other than `Yes` counts as a negative answer.
pub fn binary_per_code_kappa(
    matrix: &VerdictMatrix,
    gold: &[CodeId],
    cb: &Codebook,
) -> Result<Vec<CodeKappa>, MetricsError> {
    let g = gold_rows(matrix, gold, cb)?;
    let cols = column_codes(matrix, cb)?;
    Ok(cols
        .iter()
        .enumerate()
        .map(|(c, &k)| {
            let pred = (0..g.len()).map(|t| matrix.get(t, c) == Verdict::Yes);
            let (kappa, degenerate) = binary_kappa(pred, g.iter().map(|&x| x == k));
            CodeKappa { code: matrix.codes[c].clone(), kappa, support: g.iter().filter(|&&x| x == k).count(), degenerate }
        })
        .collect())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct BinaryConfusion {
    pub true_positive: usize,
    pub false_positive: usize,
    pub false_negative: usize,
    pub true_negative: usize,
}

/// Pooled 2x2 table over every (turn, code) decision.
pub fn binary_confusion(matrix: &VerdictMatrix, gold: &[CodeId], cb: &Codebook) -> Result<BinaryConfusion, MetricsError> {
    let g = gold_rows(matrix, gold, cb)?;
    let cols = column_codes(matrix, cb)?;
    let mut out = BinaryConfusion::default();
    for (t, &gk) in g.iter().enumerate() {
        for (c, &k) in cols.iter().enumerate() {
            match (matrix.get(t, c) == Verdict::Yes, gk == k) {
                (true, true) => out.true_positive += 1,
                (true, false) => out.false_positive += 1,
                (false, true) => out.false_negative += 1,
                (false, false) => out.true_negative += 1,
            }
        }
    }
    Ok(out)
}

/// False positives per code for binary verdicts: `Yes` for a code the turn
/// does not carry.
pub fn binary_false_positive_distribution(
    matrix: &VerdictMatrix,
    gold: &[CodeId],
    cb: &Codebook,
) -> Result<Vec<FalsePositiveShare>, MetricsError> {
    let g = gold_rows(matrix, gold, cb)?;
    let cols = column_codes(matrix, cb)?;
    let mut counts = vec![0usize; cb.len()];
    for (t, &gk) in g.iter().enumerate() {
        for (c, &k) in cols.iter().enumerate() {
            if matrix.get(t, c) == Verdict::Yes && gk != k {
                counts[k] += 1;
            }
        }
    }
    Ok(shares(cb, counts))
}

/// Gold-code distribution behind the binary false positives of `target`.
pub fn binary_substitution_analysis(
    matrix: &VerdictMatrix,
    gold: &[CodeId],
    cb: &Codebook,
    target: &str,
) -> Result<Vec<Substitution>, MetricsError> {
    let g = gold_rows(matrix, gold, cb)?;
    let t = cb.index_of(target).ok_or_else(|| MetricsError::UnknownLabel(target.to_string()))?;
    let Some(col) = matrix.codes.iter().position(|c| c.as_str() == target) else {
        return Ok(Vec::new());
    };
    let mut counts = vec![0usize; cb.len()];
    for (row, &gk) in g.iter().enumerate() {
        if matrix.get(row, col) == Verdict::Yes && gk != t {
            counts[gk] += 1;
        }
    }
    Ok(distribution(cb, counts))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ImprovementRow {
    pub code: CodeId,
    pub kappa_before: f64,
    pub kappa_after: f64,
    pub delta: f64,
    /// Turns labelled with this code by a human reviewer.
    pub n_human: usize,
    /// Changed turns whose label moved into or out of this code.
    pub n_fixes: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ImprovementReport {
    pub overall_before: f64,
    pub overall_after: f64,
    pub total_fixes: usize,
    /// Sorted by `delta`, largest first; ties keep codebook order.
    pub rows: Vec<ImprovementRow>,
}

/// Per-code kappa before and after a labeling change. `human` marks the
/// turns whose final label came from a human decision.
pub fn improvement_report(
    before: &[CodeId],
    after: &[CodeId],
    gold: &[CodeId],
    cb: &Codebook,
    human: Option<&[bool]>,
) -> Result<ImprovementReport, MetricsError> {
    check_aligned(before, gold)?;
    check_aligned(after, gold)?;
    if let Some(h) = human {
        check_aligned(h, gold)?;
    }
    let k_before = per_code_kappa(before, gold, cb)?;
    let k_after = per_code_kappa(after, gold, cb)?;
    let b = indices(before, cb)?;
    let a = indices(after, cb)?;

    let mut rows: Vec<ImprovementRow> = k_before
        .into_iter()
        .zip(k_after)
        .enumerate()
        .map(|(k, (kb, ka))| {
            let n_human = human.map_or(0, |h| (0..a.len()).filter(|&i| h[i] && a[i] == k).count());
            let n_fixes = (0..a.len()).filter(|&i| a[i] != b[i] && (a[i] == k || b[i] == k)).count();
            ImprovementRow { code: kb.code, kappa_before: kb.kappa, kappa_after: ka.kappa, delta: ka.kappa - kb.kappa, n_human, n_fixes }
        })
        .collect();
    rows.sort_by(|x, y| y.delta.total_cmp(&x.delta));

    Ok(ImprovementReport {
        overall_before: cohen_kappa(before, gold)?,
        overall_after: cohen_kappa(after, gold)?,
        total_fixes: a.iter().zip(&b).filter(|(x, y)| x != y).count(),
        rows,
    })
}

/// Full reliability report of `pred` against `gold`. Head/tail membership
/// comes from `prevalence` when given, otherwise from the gold distribution.
pub fn reliability_report(
    pred: &[CodeId],
    gold: &[CodeId],
    cb: &Codebook,
    prevalence: Option<&PrevalenceTable>,
    cutoff: f64,
) -> Result<ReliabilityReport, MetricsError> {
    let per_code = per_code_kappa(pred, gold, cb)?;
    let confusion = confusion_matrix(pred, gold, cb)?;
    let derived;
    let prev = match prevalence {
        Some(p) => p,
        None => {
            derived = derive_prevalence(gold, cb, PrevalenceSource::Batch).map_err(|_| MetricsError::EmptyInput)?;
            &derived
        }
    };
    let split = split_head_tail(prev, cutoff, cb);
    Ok(ReliabilityReport {
        n: pred.len(),
        overall_kappa: cohen_kappa(pred, gold)?,
        per_code,
        confusion,
        head_codes: split.head,
        tail_codes: split.tail,
    })
}
