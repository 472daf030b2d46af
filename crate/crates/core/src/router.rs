//! Confidence-and-sparsity routing.
//!
//! A prediction is escalated to human review when its confidence is strictly
//! below `conf_threshold`, or when its predicted code is rare: prevalence
//! strictly below `rare_threshold`. Values exactly on a threshold stay
//! automated.

use std::collections::BTreeMap;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::domain::{
    derive_prevalence, CodeId, Codebook, DomainError, EscalationReason, Prediction, PrevalenceSource, PrevalenceTable,
    RoutingDecision,
};

pub const DEFAULT_CONF_THRESHOLD: f64 = 0.6;
pub const DEFAULT_RARE_THRESHOLD: f64 = 0.05;
/// Head/tail cut-off on code prevalence.
pub const DEFAULT_HEAD_TAIL_CUTOFF: f64 = 0.05;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum RouterError {
    #[error("no prevalence entry for code {0:?}")]
    MissingPrevalence(String),
    #[error("threshold {name} = {value} must lie in (0, 1)")]
    InvalidThreshold { name: &'static str, value: f64 },
    #[error(transparent)]
    Domain(#[from] DomainError),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RouterConfig {
    pub conf_threshold: f64,
    pub rare_threshold: f64,
    pub prevalence_source: PrevalenceSource,
}

impl Default for RouterConfig {
    fn default() -> Self {
        Self {
            conf_threshold: DEFAULT_CONF_THRESHOLD,
            rare_threshold: DEFAULT_RARE_THRESHOLD,
            prevalence_source: PrevalenceSource::Reference,
        }
    }
}

impl RouterConfig {
    pub fn validate(&self) -> Result<(), RouterError> {
        for (name, value) in [("conf_threshold", self.conf_threshold), ("rare_threshold", self.rare_threshold)] {
            if !(value > 0.0 && value < 1.0) {
                return Err(RouterError::InvalidThreshold { name, value });
            }
        }
        Ok(())
    }
}

pub fn route(p: &Prediction, prev: &PrevalenceTable, cfg: &RouterConfig) -> Result<RoutingDecision, RouterError> {
    let prevalence = prev.get(p.label.as_str()).ok_or_else(|| RouterError::MissingPrevalence(p.label.to_string()))?;
    let mut reasons = std::collections::BTreeSet::new();
    if p.confidence < cfg.conf_threshold {
        reasons.insert(EscalationReason::LowConfidence);
    }
    if prevalence < cfg.rare_threshold {
        reasons.insert(EscalationReason::RareCode);
    }
    Ok(RoutingDecision {
        turn_id: p.turn_id.clone(),
        escalated: !reasons.is_empty(),
        reasons,
        conf_threshold: cfg.conf_threshold,
        rare_threshold: cfg.rare_threshold,
    })
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct RoutingSummary {
    pub n_total: usize,
    pub n_escalated: usize,
    pub n_low_confidence: usize,
    pub n_rare_code: usize,
    /// Escalated for both reasons at once.
    pub n_both: usize,
}

impl RoutingSummary {
    pub fn recount(decisions: &[RoutingDecision]) -> Self {
        let mut s = RoutingSummary { n_total: decisions.len(), ..Default::default() };
        for d in decisions {
            let low = d.reasons.contains(&EscalationReason::LowConfidence);
            let rare = d.reasons.contains(&EscalationReason::RareCode);
            s.n_escalated += usize::from(d.escalated);
            s.n_low_confidence += usize::from(low);
            s.n_rare_code += usize::from(rare);
            s.n_both += usize::from(low && rare);
        }
        s
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BatchRouting {
    pub decisions: Vec<RoutingDecision>,
    pub summary: RoutingSummary,
}

impl BatchRouting {
    pub fn escalated(&self) -> impl Iterator<Item = &RoutingDecision> {
        self.decisions.iter().filter(|d| d.escalated)
    }
}

/// Routes every prediction; decisions come back in input order.
pub fn route_batch(ps: &[Prediction], prev: &PrevalenceTable, cfg: &RouterConfig) -> Result<BatchRouting, RouterError> {
    cfg.validate()?;
    let decisions = ps.par_iter().map(|p| route(p, prev, cfg)).collect::<Result<Vec<_>, _>>()?;
    let summary = RoutingSummary::recount(&decisions);
    Ok(BatchRouting { decisions, summary })
}

/// Chooses the prevalence table the router will use. Batch mode, or a
/// missing reference table, falls back to the empirical distribution of
/// predicted labels.
pub fn resolve_prevalence(
    cfg: &RouterConfig,
    reference: Option<&PrevalenceTable>,
    predictions: &[Prediction],
    cb: &Codebook,
) -> Result<PrevalenceTable, RouterError> {
    match (cfg.prevalence_source, reference) {
        (PrevalenceSource::Reference, Some(table)) => Ok(table.clone()),
        _ => {
            let labels: Vec<CodeId> = predictions.iter().map(|p| p.label.clone()).collect();
            Ok(derive_prevalence(&labels, cb, PrevalenceSource::Batch)?)
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HeadTail {
    pub head: Vec<CodeId>,
    pub tail: Vec<CodeId>,
}

/// Partitions the codebook (in codebook order): head codes have prevalence at
/// or above `cutoff`; everything else, including codes missing from the
/// table, is tail.
pub fn split_head_tail(prev: &PrevalenceTable, cutoff: f64, cb: &Codebook) -> HeadTail {
    let (head, tail) = cb.ids().cloned().partition(|id| prev.get(id.as_str()).is_some_and(|p| p >= cutoff));
    HeadTail { head, tail }
}

/// Per-reason counts keyed by reason name, for manifests and logs.
pub fn reason_counts(decisions: &[RoutingDecision]) -> BTreeMap<String, usize> {
    let mut out = BTreeMap::new();
    for d in decisions {
        for r in &d.reasons {
            *out.entry(format!("{r:?}")).or_insert(0) += 1;
        }
    }
    out
}
