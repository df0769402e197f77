//! Decoding: candidate-restricted softmax, batch aggregation into grounding
//! predictions, the negative log-likelihood objective, and relation scores.

use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::batching::BatchPlan;
use crate::colorspec::ColorSet;
use crate::prompt::{na_relation, CandidateTokenSeq, PromptError, MAX_RELATION_TOKENS};

/// Candidate meaning "the target is not in this batch".
pub const NONE_LABEL: &str = "none";

/// Tolerance on per-slot probability mass for distributions built here.
pub const NORMALIZATION_TOLERANCE: f64 = 1e-9;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ScoringError {
    #[error("logit for {0:?} is not finite")]
    NonFiniteLogit(String),
    #[error("a distribution slot needs at least one candidate")]
    NoCandidates,
    #[error("candidate {0:?} appears twice in one slot")]
    DuplicateCandidate(String),
    #[error("slot {slot} probabilities sum to {sum}")]
    NotNormalized { slot: usize, sum: f64 },
    #[error("batch {batch}: {message}")]
    CandidateMismatch { batch: usize, message: String },
    #[error("gold proposal {gold} missing from result {instance}")]
    GoldMissing { instance: usize, gold: usize },
    #[error("no distribution supplied for {0}-token relations")]
    MissingTemplate(usize),
    #[error("relation {label:?} token {token:?} is not a candidate of slot {slot}")]
    TokenNotCandidate {
        label: String,
        slot: usize,
        token: String,
    },
    #[error("relation {0:?} listed twice")]
    DuplicateRelation(String),
    #[error("{0}")]
    Prompt(#[from] PromptError),
}

/// Per-slot log-probabilities over each slot's candidate labels.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MaskDistribution {
    slots: Vec<BTreeMap<String, f64>>,
}

impl MaskDistribution {
    /// Wraps already-normalized log-probabilities, checking each slot sums to
    /// one within `tolerance`.
    pub fn from_logprobs(
        slots: Vec<BTreeMap<String, f64>>,
        tolerance: f64,
    ) -> Result<Self, ScoringError> {
        for (slot, entries) in slots.iter().enumerate() {
            if entries.is_empty() {
                return Err(ScoringError::NoCandidates);
            }
            let sum: f64 = entries.values().map(|lp| lp.exp()).sum();
            if (sum - 1.0).abs().is_nan() || (sum - 1.0).abs() > tolerance {
                return Err(ScoringError::NotNormalized { slot, sum });
            }
        }
        Ok(Self { slots })
    }

    /// Softmax per slot.
    pub fn from_logits(slots: &[Vec<(String, f64)>]) -> Result<Self, ScoringError> {
        Ok(Self {
            slots: slots
                .iter()
                .map(|s| log_softmax(s))
                .collect::<Result<_, _>>()?,
        })
    }

    pub fn slot_count(&self) -> usize {
        self.slots.len()
    }

    pub fn slots(&self) -> &[BTreeMap<String, f64>] {
        &self.slots
    }

    pub fn logprob(&self, slot: usize, label: &str) -> Option<f64> {
        self.slots.get(slot)?.get(label).copied()
    }

    pub fn prob(&self, slot: usize, label: &str) -> Option<f64> {
        self.logprob(slot, label).map(f64::exp)
    }

    pub fn labels(&self, slot: usize) -> impl Iterator<Item = &str> {
        self.slots
            .get(slot)
            .into_iter()
            .flat_map(|s| s.keys().map(String::as_str))
    }
}

fn log_softmax(logits: &[(String, f64)]) -> Result<BTreeMap<String, f64>, ScoringError> {
    if logits.is_empty() {
        return Err(ScoringError::NoCandidates);
    }
    if let Some((label, _)) = logits.iter().find(|(_, v)| !v.is_finite()) {
        return Err(ScoringError::NonFiniteLogit(label.clone()));
    }
    let max = logits
        .iter()
        .map(|(_, v)| *v)
        .fold(f64::NEG_INFINITY, f64::max);
    let log_z = max
        + logits
            .iter()
            .map(|(_, v)| (v - max).exp())
            .sum::<f64>()
            .ln();
    let mut out = BTreeMap::new();
    for (label, v) in logits {
        if out.insert(label.clone(), v - log_z).is_some() {
            return Err(ScoringError::DuplicateCandidate(label.clone()));
        }
    }
    Ok(out)
}

/// Single-slot softmax with max subtraction.
pub fn normalize(logits: &[(String, f64)]) -> Result<MaskDistribution, ScoringError> {
    Ok(MaskDistribution {
        slots: vec![log_softmax(logits)?],
    })
}

/// Decoded distribution of one batch, kept for auditing.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BatchDecision {
    pub members: Vec<usize>,
    pub none_prob: f64,
    /// Member whose probability beats `none_prob` by the most, if any.
    pub winner: Option<usize>,
    pub distribution: MaskDistribution,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GroundingResult {
    pub per_region_prob: BTreeMap<usize, f64>,
    /// Best region among those that beat their batch's `none`.
    pub predicted: Option<usize>,
    /// Best region overall, ignoring `none`.
    pub fallback: usize,
    pub per_batch: Vec<BatchDecision>,
}

impl GroundingResult {
    /// The region used when scoring accuracy: `predicted`, or the global
    /// best region when every batch decoded `none`.
    pub fn chosen(&self) -> usize {
        self.predicted.unwrap_or(self.fallback)
    }
}

/// Highest-probability key, lowest key on ties.
fn argmax<'a>(items: impl Iterator<Item = (&'a usize, &'a f64)>) -> Option<usize> {
    let mut best: Option<(usize, f64)> = None;
    for (&idx, &p) in items {
        match best {
            Some((_, bp)) if p <= bp => {}
            _ => best = Some((idx, p)),
        }
    }
    best.map(|(i, _)| i)
}

/// Combines per-batch color distributions into a grounding decision.
///
/// Each batch's distribution must range over exactly its assigned color
/// texts plus [`NONE_LABEL`]. A region's probability is its color's
/// probability within its own batch; probabilities are not renormalized
/// across batches.
pub fn decode_grounding(
    plan: &BatchPlan,
    colors: &ColorSet,
    batch_dists: &[MaskDistribution],
) -> Result<GroundingResult, ScoringError> {
    if plan.batches.len() != batch_dists.len() {
        return Err(ScoringError::CandidateMismatch {
            batch: batch_dists.len().min(plan.batches.len()),
            message: format!(
                "{} batches but {} distributions",
                plan.batches.len(),
                batch_dists.len()
            ),
        });
    }
    let mut per_region_prob = BTreeMap::new();
    let mut qualified = BTreeMap::new();
    let mut per_batch = Vec::with_capacity(plan.batches.len());
    for (bi, (batch, dist)) in plan.batches.iter().zip(batch_dists).enumerate() {
        let mismatch = |message: String| ScoringError::CandidateMismatch { batch: bi, message };
        if dist.slot_count() != 1 {
            return Err(mismatch(format!(
                "expected 1 slot, got {}",
                dist.slot_count()
            )));
        }
        if batch.members.len() > colors.len() {
            return Err(mismatch(format!(
                "{} members exceed {} colors",
                batch.members.len(),
                colors.len()
            )));
        }
        let mut expected: BTreeSet<&str> = colors
            .iter()
            .take(batch.members.len())
            .map(|c| c.text.as_str())
            .collect();
        expected.insert(NONE_LABEL);
        let got: BTreeSet<&str> = dist.labels(0).collect();
        if got != expected {
            return Err(mismatch(format!(
                "candidates {got:?}, expected {expected:?}"
            )));
        }
        let none_prob = dist.prob(0, NONE_LABEL).expect("checked above");
        let mut batch_probs = BTreeMap::new();
        for (slot, &member) in batch.members.iter().enumerate() {
            let text = colors.colors()[slot].text.as_str();
            let p = dist.prob(0, text).expect("checked above");
            per_region_prob.insert(member, p);
            batch_probs.insert(member, p);
            if p > none_prob {
                qualified.insert(member, p);
            }
        }
        let winner = argmax(batch_probs.iter().filter(|(_, &p)| p > none_prob));
        per_batch.push(BatchDecision {
            members: batch.members.clone(),
            none_prob,
            winner,
            distribution: dist.clone(),
        });
    }
    let fallback = argmax(per_region_prob.iter()).ok_or(ScoringError::NoCandidates)?;
    Ok(GroundingResult {
        predicted: argmax(qualified.iter()),
        fallback,
        per_region_prob,
        per_batch,
    })
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossReport {
    pub total_nll: f64,
    pub per_instance: Vec<f64>,
}

impl LossReport {
    /// Concatenates two shards.
    pub fn merge(mut self, other: LossReport) -> LossReport {
        self.total_nll += other.total_nll;
        self.per_instance.extend(other.per_instance);
        self
    }
}

/// Summed negative log-probability of each instance's gold region.
pub fn grounding_nll(results: &[(&GroundingResult, usize)]) -> Result<LossReport, ScoringError> {
    let per_instance = results
        .iter()
        .enumerate()
        .map(|(instance, (result, gold))| {
            result
                .per_region_prob
                .get(gold)
                .map(|p| -p.ln())
                .ok_or(ScoringError::GoldMissing {
                    instance,
                    gold: *gold,
                })
        })
        .collect::<Result<Vec<_>, _>>()?;
    Ok(LossReport {
        total_nll: per_instance.iter().sum(),
        per_instance,
    })
}

/// A relation label and the tokens that spell it.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct RelationEntry {
    pub label: String,
    pub tokens: Vec<String>,
}

impl RelationEntry {
    /// Splits the label on whitespace.
    pub fn from_label(label: &str) -> Self {
        let tokens: Vec<String> = label.split_whitespace().map(str::to_string).collect();
        Self {
            label: tokens.join(" "),
            tokens,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RelationScoreTable {
    pub scores: BTreeMap<String, f64>,
    /// Relation labels by descending score, ties by label.
    pub ranked: Vec<String>,
    /// Score of the "no relation" filler per template length.
    pub na_scores: BTreeMap<usize, f64>,
}

fn mean_token_logprob(
    dist: &MaskDistribution,
    label: &str,
    tokens: &[String],
) -> Result<f64, ScoringError> {
    let mut sum = 0.0;
    for (slot, token) in tokens.iter().enumerate() {
        sum += dist
            .logprob(slot, token)
            .ok_or_else(|| ScoringError::TokenNotCandidate {
                label: label.to_string(),
                slot,
                token: token.clone(),
            })?;
    }
    Ok(sum / tokens.len() as f64)
}

/// Scores each relation by the mean log-probability of its tokens under the
/// template with as many masks as the relation has tokens.
///
/// The "no relation" score for a length is reported when all of its tokens
/// are candidates of that length's distribution; it never enters `ranked`.
pub fn score_relations(
    dists_by_l: &BTreeMap<usize, MaskDistribution>,
    vocab: &[RelationEntry],
) -> Result<RelationScoreTable, ScoringError> {
    let mut scores = BTreeMap::new();
    for entry in vocab {
        let l = entry.tokens.len();
        if !(1..=MAX_RELATION_TOKENS).contains(&l) {
            return Err(PromptError::BadMaskCount(l).into());
        }
        let dist = dists_by_l.get(&l).ok_or(ScoringError::MissingTemplate(l))?;
        let s = mean_token_logprob(dist, &entry.label, &entry.tokens)?;
        if scores.insert(entry.label.clone(), s).is_some() {
            return Err(ScoringError::DuplicateRelation(entry.label.clone()));
        }
    }
    let mut na_scores = BTreeMap::new();
    for (&l, dist) in dists_by_l {
        let na = na_relation(l)?;
        if let Ok(s) = mean_token_logprob(dist, &na.label, &na.tokens) {
            na_scores.insert(l, s);
        }
    }
    let mut ranked: Vec<String> = scores.keys().cloned().collect();
    ranked.sort_by(|a, b| scores[b].total_cmp(&scores[a]).then_with(|| a.cmp(b)));
    Ok(RelationScoreTable {
        scores,
        ranked,
        na_scores,
    })
}

/// Per-slot candidates for the `l`-mask relation template: every distinct
/// token at that position among `l`-token relations, then the "no relation"
/// token for the slot.
pub fn relation_slot_candidates(
    vocab: &[RelationEntry],
    l: usize,
) -> Result<Vec<Vec<CandidateTokenSeq>>, PromptError> {
    let na = na_relation(l)?;
    Ok((0..l)
        .map(|slot| {
            let mut seen = BTreeSet::new();
            vocab
                .iter()
                .filter(|e| e.tokens.len() == l)
                .map(|e| e.tokens[slot].as_str())
                .chain(std::iter::once(na.tokens[slot].as_str()))
                .filter(|t| seen.insert(*t))
                .map(CandidateTokenSeq::single)
                .collect()
        })
        .collect())
}

/// Training targets for the `l`-mask template: the relation's own tokens
/// when its length is `l`, the "no relation" tokens otherwise (including
/// pairs with no relation at all).
pub fn relation_targets(relation: Option<&[String]>, l: usize) -> Result<Vec<String>, PromptError> {
    let na = na_relation(l)?;
    Ok(match relation {
        Some(tokens) if tokens.len() == l => tokens.to_vec(),
        _ => na.tokens,
    })
}
