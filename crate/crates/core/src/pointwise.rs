//! Scoring each candidate on its own and reranking by score.
//!
//! Four scorers are supported: a direct 0-100 integer, the expected value of
//! a 1-5 Likert distribution, the normalized probability of "Yes", and the
//! same "Yes" probability read after a free-form reasoning turn.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::datamodel::{AerialCandidate, CandidateList, Diagnostics, RerankResult, StrategyId};
use crate::gateway::{extract_token_probs, CompletionRequest, TokenDistribution, VlmBackend};
use crate::prompts::{
    render_pointwise, Conversation, ImageResolver, MultimodalMessage, Role, REASON_FOLLOWUP,
};

/// Placeholder stored in `value` when a score is invalid.
pub const INVALID_SCORE: f64 = -1.0;

pub const LIKERT_LABELS: [&str; 5] = ["1", "2", "3", "4", "5"];
pub const YES_NO_LABELS: [&str; 2] = ["Yes", "No"];

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum ScoreError {
    #[error("no integer score in [0, 100] found")]
    NoScoreFound,
    #[error("no probability mass on any target token")]
    AllZeroMass,
}

#[derive(Debug, Error)]
pub enum PointwiseError {
    #[error("query '{query_id}': no score for candidate '{candidate_id}'")]
    MissingScore {
        query_id: String,
        candidate_id: String,
    },
    #[error("strategy '{0}' is not pointwise")]
    NotPointwise(StrategyId),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ScoreFailure {
    /// The reply could not be read as a score (no integer, or no target mass).
    Parse,
    /// The backend failed after retries.
    Backend,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PointwiseScore {
    pub candidate_id: String,
    pub strategy: StrategyId,
    pub value: f64,
    pub valid: bool,
    pub failure: Option<ScoreFailure>,
    /// Model reply the score was read from, when there was one.
    pub raw_text: Option<String>,
    pub from_cache: bool,
}

impl PointwiseScore {
    pub fn valid(candidate_id: &str, strategy: StrategyId, value: f64) -> Self {
        PointwiseScore {
            candidate_id: candidate_id.to_string(),
            strategy,
            value,
            valid: true,
            failure: None,
            raw_text: None,
            from_cache: false,
        }
    }

    pub fn invalid(candidate_id: &str, strategy: StrategyId, failure: ScoreFailure) -> Self {
        PointwiseScore {
            candidate_id: candidate_id.to_string(),
            strategy,
            value: INVALID_SCORE,
            valid: false,
            failure: Some(failure),
            raw_text: None,
            from_cache: false,
        }
    }

    fn with_raw(mut self, text: &str, from_cache: bool) -> Self {
        self.raw_text = Some(text.to_string());
        self.from_cache = from_cache;
        self
    }
}

/// First integer literal in `text` that lies in `[0, 100]`.
///
/// A leading `-` makes a literal negative (so out of range); digits after a
/// decimal point belong to the preceding literal and are ignored.
pub fn parse_direct_score(text: &str) -> Result<u8, ScoreError> {
    let bytes = text.as_bytes();
    let mut i = 0;
    while i < bytes.len() {
        if !bytes[i].is_ascii_digit() {
            i += 1;
            continue;
        }
        let start = i;
        while i < bytes.len() && bytes[i].is_ascii_digit() {
            i += 1;
        }
        let negative = start > 0 && bytes[start - 1] == b'-';
        let digits = &text[start..i];
        if i + 1 < bytes.len() && bytes[i] == b'.' && bytes[i + 1].is_ascii_digit() {
            i += 1;
            while i < bytes.len() && bytes[i].is_ascii_digit() {
                i += 1;
            }
        }
        if negative {
            continue;
        }
        let trimmed = digits.trim_start_matches('0');
        if trimmed.len() > 3 {
            continue;
        }
        let value: u32 = if trimmed.is_empty() { 0 } else { trimmed.parse().expect("ascii digits") };
        if value <= 100 {
            return Ok(value as u8);
        }
    }
    Err(ScoreError::NoScoreFound)
}

/// Expected Likert rating, renormalized over the five labels.
pub fn expected_likert(dist: &TokenDistribution) -> Result<f64, ScoreError> {
    let mut mass = 0.0;
    let mut weighted = 0.0;
    for (k, label) in LIKERT_LABELS.iter().enumerate() {
        let p = dist.get(label);
        mass += p;
        weighted += (k + 1) as f64 * p;
    }
    if mass <= 0.0 {
        return Err(ScoreError::AllZeroMass);
    }
    Ok((weighted / mass).clamp(1.0, 5.0))
}

/// `P(Yes) / (P(Yes) + P(No))`.
pub fn yes_probability(dist: &TokenDistribution) -> Result<f64, ScoreError> {
    let yes = dist.get("Yes");
    let no = dist.get("No");
    let total = yes + no;
    if total <= 0.0 {
        return Err(ScoreError::AllZeroMass);
    }
    Ok((yes / total).clamp(0.0, 1.0))
}

/// Produces one score per candidate.
pub trait Scorer: Sync {
    fn strategy(&self) -> StrategyId;
    fn score(&self, list: &CandidateList, candidate: &AerialCandidate) -> PointwiseScore;
}

/// Scores candidates by prompting a [`VlmBackend`].
pub struct VlmScorer<'a, B: VlmBackend + ?Sized> {
    backend: &'a B,
    strategy: StrategyId,
    resolver: ImageResolver,
}

impl<'a, B: VlmBackend + ?Sized> VlmScorer<'a, B> {
    pub fn new(
        backend: &'a B,
        strategy: StrategyId,
        resolver: ImageResolver,
    ) -> Result<Self, PointwiseError> {
        if !strategy.is_pointwise() {
            return Err(PointwiseError::NotPointwise(strategy));
        }
        Ok(VlmScorer {
            backend,
            strategy,
            resolver,
        })
    }
}

impl<B: VlmBackend + ?Sized> Scorer for VlmScorer<'_, B> {
    fn strategy(&self) -> StrategyId {
        self.strategy
    }

    fn score(&self, list: &CandidateList, candidate: &AerialCandidate) -> PointwiseScore {
        let strategy = self.strategy;
        if strategy == StrategyId::ReasonYesno {
            return score_reason_yesno(list, candidate, self.backend, &self.resolver);
        }
        let message = match render_pointwise(strategy, &list.query, candidate, &self.resolver) {
            Ok(m) => m,
            Err(e) => {
                log::warn!("query {}: {e}", list.query.id);
                return PointwiseScore::invalid(&candidate.id, strategy, ScoreFailure::Backend);
            }
        };
        let want_logprobs = strategy != StrategyId::Direct;
        let resp = match self.backend.complete(&CompletionRequest::new(message, want_logprobs)) {
            Ok(r) => r,
            Err(e) => {
                log::warn!("query {} candidate {}: {e}", list.query.id, candidate.id);
                return PointwiseScore::invalid(&candidate.id, strategy, ScoreFailure::Backend);
            }
        };
        let value = match strategy {
            StrategyId::Direct => parse_direct_score(&resp.text).map(f64::from),
            StrategyId::Likert => extract_token_probs(&resp, &LIKERT_LABELS)
                .map_err(|_| ScoreError::AllZeroMass)
                .and_then(|d| expected_likert(&d)),
            _ => extract_token_probs(&resp, &YES_NO_LABELS)
                .map_err(|_| ScoreError::AllZeroMass)
                .and_then(|d| yes_probability(&d)),
        };
        match value {
            Ok(v) => PointwiseScore::valid(&candidate.id, strategy, v),
            Err(_) => PointwiseScore::invalid(&candidate.id, strategy, ScoreFailure::Parse),
        }
        .with_raw(&resp.text, resp.from_cache)
    }
}

/// Two-turn reasoning score: free-form reasoning first, then a one-word
/// verdict whose first token's Yes/No mass gives the score.
pub fn score_reason_yesno<B: VlmBackend + ?Sized>(
    list: &CandidateList,
    candidate: &AerialCandidate,
    backend: &B,
    resolver: &ImageResolver,
) -> PointwiseScore {
    let strategy = StrategyId::ReasonYesno;
    let fail = |failure| PointwiseScore::invalid(&candidate.id, strategy, failure);
    let prompt = match render_pointwise(strategy, &list.query, candidate, resolver) {
        Ok(m) => m,
        Err(e) => {
            log::warn!("query {}: {e}", list.query.id);
            return fail(ScoreFailure::Backend);
        }
    };
    let mut conversation = Conversation::single(prompt);
    let mut first = CompletionRequest::new(conversation.clone(), false);
    first.max_output_tokens = Some(backend.reasoning_budget());
    let reasoning = match backend.complete(&first) {
        Ok(r) => r,
        Err(e) => {
            log::warn!("query {} candidate {} (reasoning): {e}", list.query.id, candidate.id);
            return fail(ScoreFailure::Backend);
        }
    };
    conversation.push(Role::Assistant, MultimodalMessage::text(reasoning.text.clone()));
    conversation.push(Role::User, MultimodalMessage::text(REASON_FOLLOWUP));
    let verdict = match backend.complete(&CompletionRequest::new(conversation, true)) {
        Ok(r) => r,
        Err(e) => {
            log::warn!("query {} candidate {} (verdict): {e}", list.query.id, candidate.id);
            return fail(ScoreFailure::Backend);
        }
    };
    let from_cache = reasoning.from_cache && verdict.from_cache;
    let raw = format!("{}\n---\n{}", reasoning.text, verdict.text);
    match extract_token_probs(&verdict, &YES_NO_LABELS)
        .map_err(|_| ScoreError::AllZeroMass)
        .and_then(|d| yes_probability(&d))
    {
        Ok(v) => PointwiseScore::valid(&candidate.id, strategy, v),
        Err(_) => fail(ScoreFailure::Parse),
    }
    .with_raw(&raw, from_cache)
}

/// Scores every candidate of `list`, in candidate order. Calls run on the
/// current rayon pool; the result does not depend on completion order.
pub fn score_list<S: Scorer + ?Sized>(list: &CandidateList, scorer: &S) -> Vec<PointwiseScore> {
    use rayon::prelude::*;
    list.candidates
        .par_iter()
        .map(|c| scorer.score(list, c))
        .collect()
}

/// Valid scores descending with ties in initial order, then invalid scores in
/// initial order.
pub fn rerank_pointwise(
    list: &CandidateList,
    scores: &[PointwiseScore],
) -> Result<RerankResult, PointwiseError> {
    let mut rows = Vec::with_capacity(list.candidates.len());
    let mut diagnostics = Diagnostics::default();
    let mut strategy = None;
    for c in &list.candidates {
        let s = scores
            .iter()
            .find(|s| s.candidate_id == c.id)
            .ok_or_else(|| PointwiseError::MissingScore {
                query_id: list.query.id.clone(),
                candidate_id: c.id.clone(),
            })?;
        strategy.get_or_insert(s.strategy);
        match s.failure {
            Some(ScoreFailure::Parse) => {
                diagnostics.parse_failures += 1;
                diagnostics.fallbacks += 1;
            }
            Some(ScoreFailure::Backend) => diagnostics.fallbacks += 1,
            None if !s.valid => diagnostics.fallbacks += 1,
            None => {}
        }
        if s.from_cache {
            diagnostics.cache_hits += 1;
        }
        rows.push((c.initial_rank, c.id.clone(), s.valid.then_some(s.value)));
    }
    let strategy = strategy.unwrap_or(StrategyId::Direct);
    if !strategy.is_pointwise() {
        return Err(PointwiseError::NotPointwise(strategy));
    }
    rows.sort_by(|a, b| match (a.2, b.2) {
        (Some(x), Some(y)) => y.total_cmp(&x).then(a.0.cmp(&b.0)),
        (Some(_), None) => std::cmp::Ordering::Less,
        (None, Some(_)) => std::cmp::Ordering::Greater,
        (None, None) => a.0.cmp(&b.0),
    });
    let (order, values): (Vec<String>, Vec<Option<f64>>) =
        rows.into_iter().map(|(_, id, v)| (id, v)).unzip();
    Ok(RerankResult {
        query_id: list.query.id.clone(),
        strategy,
        order,
        scores: Some(values),
        comparator_calls: 0,
        diagnostics,
    })
}

/// One line of the per-candidate score dump.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoreDumpRecord {
    pub query_id: String,
    pub candidate_id: String,
    pub strategy: StrategyId,
    pub value: f64,
    pub valid: bool,
    pub is_ground_truth: bool,
}

pub fn dump_records(list: &CandidateList, scores: &[PointwiseScore]) -> Vec<ScoreDumpRecord> {
    scores
        .iter()
        .map(|s| ScoreDumpRecord {
            query_id: list.query.id.clone(),
            candidate_id: s.candidate_id.clone(),
            strategy: s.strategy,
            value: s.value,
            valid: s.valid,
            is_ground_truth: list.is_ground_truth(&s.candidate_id),
        })
        .collect()
}
