//! Reranking by repeated two-way judgments fed to a merge sort.

use std::time::Instant;

use serde::{Deserialize, Serialize};
use serde_json::Value;
use thiserror::Error;

use crate::datamodel::{AerialCandidate, CandidateList, Diagnostics, RerankResult, StrategyId};
use crate::gateway::{CompletionRequest, VlmBackend};
use crate::prompts::{render_pairwise, ImageResolver};

/// Presentation slot of a compared candidate.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Slot {
    First,
    Second,
}

impl Slot {
    pub fn flipped(self) -> Slot {
        match self {
            Slot::First => Slot::Second,
            Slot::Second => Slot::First,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OutcomeSource {
    Model,
    FallbackParse,
    FallbackError,
    /// Swap-consistency mode only: the two presentations disagreed.
    FallbackInconsistent,
}

impl OutcomeSource {
    pub fn is_fallback(self) -> bool {
        self != OutcomeSource::Model
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PreferenceOutcome {
    pub winner: Slot,
    pub source: OutcomeSource,
    pub raw_text: String,
    pub presented_pair: (String, String),
    pub latency_ms: u64,
    /// Backend calls spent on this comparison.
    pub model_calls: u32,
    pub from_cache: bool,
}

impl PreferenceOutcome {
    pub fn winner_id(&self) -> &str {
        match self.winner {
            Slot::First => &self.presented_pair.0,
            Slot::Second => &self.presented_pair.1,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
#[error("no preference could be extracted from the reply")]
pub struct Unparseable;

fn preference_of(v: &Value) -> Option<Slot> {
    let p = v.as_object()?.get("preference")?;
    let digit = match p {
        Value::String(s) => s.trim().to_string(),
        Value::Number(n) => n.to_string(),
        _ => return None,
    };
    match digit.as_str() {
        "1" => Some(Slot::First),
        "2" => Some(Slot::Second),
        _ => None,
    }
}

/// Reads `{"preference": "1"|"2"}`; a bare digit value is accepted too.
///
/// The whole reply is tried first; failing that, the first embedded object
/// carrying a valid preference is used.
pub fn parse_preference(text: &str) -> Result<Slot, Unparseable> {
    if let Ok(v) = serde_json::from_str::<Value>(text.trim()) {
        if let Some(slot) = preference_of(&v) {
            return Ok(slot);
        }
    }
    for (at, _) in text.match_indices('{') {
        let mut stream = serde_json::Deserializer::from_str(&text[at..]).into_iter::<Value>();
        if let Some(Ok(v)) = stream.next() {
            if let Some(slot) = preference_of(&v) {
                return Ok(slot);
            }
        }
    }
    Err(Unparseable)
}

/// The slot holding the candidate the first-stage retriever ranked higher.
pub fn prior_winner(first: &AerialCandidate, second: &AerialCandidate) -> Slot {
    if first.initial_rank <= second.initial_rank {
        Slot::First
    } else {
        Slot::Second
    }
}

/// A two-way judge. Implementations absorb their own faults.
pub trait Comparator: Sync {
    fn compare(
        &self,
        list: &CandidateList,
        first: &AerialCandidate,
        second: &AerialCandidate,
    ) -> PreferenceOutcome;
}

impl<F> Comparator for F
where
    F: Fn(&CandidateList, &AerialCandidate, &AerialCandidate) -> PreferenceOutcome + Sync,
{
    fn compare(
        &self,
        list: &CandidateList,
        first: &AerialCandidate,
        second: &AerialCandidate,
    ) -> PreferenceOutcome {
        self(list, first, second)
    }
}

/// Builds a model-sourced outcome for closures and simulated judges.
pub fn outcome(first: &AerialCandidate, second: &AerialCandidate, winner: Slot) -> PreferenceOutcome {
    PreferenceOutcome {
        winner,
        source: OutcomeSource::Model,
        raw_text: String::new(),
        presented_pair: (first.id.clone(), second.id.clone()),
        latency_ms: 0,
        model_calls: 1,
        from_cache: false,
    }
}

/// Judges pairs by prompting a [`VlmBackend`].
pub struct VlmComparator<'a, B: VlmBackend + ?Sized> {
    backend: &'a B,
    resolver: ImageResolver,
}

impl<'a, B: VlmBackend + ?Sized> VlmComparator<'a, B> {
    pub fn new(backend: &'a B, resolver: ImageResolver) -> Self {
        VlmComparator { backend, resolver }
    }
}

impl<B: VlmBackend + ?Sized> Comparator for VlmComparator<'_, B> {
    fn compare(
        &self,
        list: &CandidateList,
        first: &AerialCandidate,
        second: &AerialCandidate,
    ) -> PreferenceOutcome {
        let started = Instant::now();
        let mut out = outcome(first, second, prior_winner(first, second));
        let reply = render_pairwise(&list.query, first, second, &self.resolver)
            .map_err(|e| e.to_string())
            .and_then(|m| {
                self.backend
                    .complete(&CompletionRequest::new(m, false))
                    .map_err(|e| e.to_string())
            });
        match reply {
            Ok(resp) => {
                out.from_cache = resp.from_cache;
                match parse_preference(&resp.text) {
                    Ok(slot) => out.winner = slot,
                    Err(_) => out.source = OutcomeSource::FallbackParse,
                }
                out.raw_text = resp.text;
            }
            Err(msg) => {
                log::warn!(
                    "query {}: comparing {} vs {}: {msg}",
                    list.query.id,
                    first.id,
                    second.id
                );
                out.source = OutcomeSource::FallbackError;
                out.raw_text = msg;
            }
        }
        out.latency_ms = started.elapsed().as_millis() as u64;
        out
    }
}

/// Issues every comparison in both presentation orders and keeps the verdict
/// only when both agree on the winning candidate.
pub struct SwapConsistent<C>(pub C);

impl<C: Comparator> Comparator for SwapConsistent<C> {
    fn compare(
        &self,
        list: &CandidateList,
        first: &AerialCandidate,
        second: &AerialCandidate,
    ) -> PreferenceOutcome {
        let forward = self.0.compare(list, first, second);
        let backward = self.0.compare(list, second, first);
        let mut out = forward.clone();
        out.model_calls = forward.model_calls + backward.model_calls;
        out.latency_ms = forward.latency_ms + backward.latency_ms;
        out.from_cache = forward.from_cache && backward.from_cache;
        out.raw_text = format!("{}\n---\n{}", forward.raw_text, backward.raw_text);
        if forward.source.is_fallback() || backward.source.is_fallback() {
            out.winner = prior_winner(first, second);
            out.source = if forward.source.is_fallback() {
                forward.source
            } else {
                backward.source
            };
        } else if forward.winner != backward.winner.flipped() {
            out.winner = prior_winner(first, second);
            out.source = OutcomeSource::FallbackInconsistent;
        }
        out
    }
}

/// Top-down merge sort of the initial order; the left half is the first
/// `ceil(n/2)` items and the left run's head always takes slot 1.
pub fn merge_sort_traced<C: Comparator + ?Sized>(
    list: &CandidateList,
    comparator: &C,
) -> (RerankResult, Vec<PreferenceOutcome>) {
    let mut trace = Vec::new();
    let items: Vec<&AerialCandidate> = list.candidates.iter().collect();
    let sorted = sort_run(list, items, comparator, &mut trace);
    let mut diagnostics = Diagnostics::default();
    let mut calls = 0u64;
    for o in &trace {
        calls += u64::from(o.model_calls);
        if o.source == OutcomeSource::FallbackParse {
            diagnostics.parse_failures += 1;
        }
        if o.source.is_fallback() {
            diagnostics.fallbacks += 1;
        }
        if o.from_cache {
            diagnostics.cache_hits += 1;
        }
    }
    let result = RerankResult {
        query_id: list.query.id.clone(),
        strategy: StrategyId::Pairwise,
        order: sorted.into_iter().map(|c| c.id.clone()).collect(),
        scores: None,
        comparator_calls: calls,
        diagnostics,
    };
    (result, trace)
}

pub fn merge_sort_rerank<C: Comparator + ?Sized>(list: &CandidateList, comparator: &C) -> RerankResult {
    merge_sort_traced(list, comparator).0
}

fn sort_run<'a, C: Comparator + ?Sized>(
    list: &CandidateList,
    mut items: Vec<&'a AerialCandidate>,
    comparator: &C,
    trace: &mut Vec<PreferenceOutcome>,
) -> Vec<&'a AerialCandidate> {
    if items.len() <= 1 {
        return items;
    }
    let right = items.split_off(items.len().div_ceil(2));
    let left = sort_run(list, items, comparator, trace);
    let right = sort_run(list, right, comparator, trace);
    let mut merged = Vec::with_capacity(left.len() + right.len());
    let (mut i, mut j) = (0, 0);
    while i < left.len() && j < right.len() {
        let o = comparator.compare(list, left[i], right[j]);
        match o.winner {
            Slot::First => {
                merged.push(left[i]);
                i += 1;
            }
            Slot::Second => {
                merged.push(right[j]);
                j += 1;
            }
        }
        trace.push(o);
    }
    merged.extend_from_slice(&left[i..]);
    merged.extend_from_slice(&right[j..]);
    merged
}

/// Upper bound `K * ceil(log2 K)` on comparisons for a list of `k` items.
pub fn call_bound(k: usize) -> u64 {
    if k <= 1 {
        return 0;
    }
    let log = usize::BITS - (k - 1).leading_zeros();
    (k as u64) * u64::from(log)
}

/// One line of the optional per-comparison audit log.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AuditRecord {
    pub query_id: String,
    pub first_id: String,
    pub second_id: String,
    pub winner: String,
    pub source: OutcomeSource,
    pub latency_ms: u64,
}

pub fn audit_records(query_id: &str, trace: &[PreferenceOutcome]) -> Vec<AuditRecord> {
    trace
        .iter()
        .map(|o| AuditRecord {
            query_id: query_id.to_string(),
            first_id: o.presented_pair.0.clone(),
            second_id: o.presented_pair.1.clone(),
            winner: o.winner_id().to_string(),
            source: o.source,
            latency_ms: o.latency_ms,
        })
        .collect()
}
