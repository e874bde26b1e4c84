//! Runs a strategy over a whole dataset on a bounded worker pool.

use rayon::prelude::*;
use serde::Serialize;
use thiserror::Error;

use crate::datamodel::{CandidateList, RerankResult, StrategyId};
use crate::gateway::{GatewayError, GatewayStats, HttpGateway, VlmBackend};
use crate::pairwise::{audit_records, merge_sort_traced, AuditRecord, Comparator, SwapConsistent, VlmComparator};
use crate::pointwise::{dump_records, rerank_pointwise, score_list, PointwiseError, ScoreDumpRecord, Scorer, VlmScorer};
use crate::prompts::ImageResolver;
use crate::simbackend::{OracleComparator, OracleConfig, SyntheticScoreConfig, SyntheticScorer};

#[derive(Debug, Error)]
pub enum RerankError {
    #[error("strategy '{strategy}' cannot run on the {backend} backend")]
    Unsupported { strategy: StrategyId, backend: &'static str },
    #[error(transparent)]
    Gateway(#[from] GatewayError),
    #[error(transparent)]
    Pointwise(#[from] PointwiseError),
    #[error("worker pool: {0}")]
    Pool(String),
}

pub enum Backend {
    Http(HttpGateway),
    Oracle(OracleConfig),
    Synthetic(SyntheticScoreConfig),
}

impl Backend {
    pub fn name(&self) -> &'static str {
        match self {
            Backend::Http(_) => "http",
            Backend::Oracle(_) => "oracle",
            Backend::Synthetic(_) => "synthetic",
        }
    }

    pub fn gateway_stats(&self) -> Option<GatewayStats> {
        match self {
            Backend::Http(g) => Some(g.stats()),
            _ => None,
        }
    }
}

#[derive(Debug, Clone)]
pub struct RunOptions {
    pub strategy: StrategyId,
    pub workers: usize,
    pub swap_consistency: bool,
    pub images_root: Option<std::path::PathBuf>,
}

impl RunOptions {
    pub fn new(strategy: StrategyId) -> Self {
        RunOptions {
            strategy,
            workers: 4,
            swap_consistency: false,
            images_root: None,
        }
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize)]
pub struct RunSummary {
    pub queries: u64,
    pub comparator_calls: u64,
    pub cache_hits: u64,
    pub fallbacks: u64,
    pub parse_failures: u64,
    pub http_requests: u64,
    pub retries: u64,
}

#[derive(Debug, Default)]
pub struct RunOutput {
    pub results: Vec<RerankResult>,
    /// Filled for pointwise strategies.
    pub scores: Vec<ScoreDumpRecord>,
    /// Filled for the pairwise strategy.
    pub audit: Vec<AuditRecord>,
    pub summary: RunSummary,
}

fn run_pointwise<S: Scorer>(lists: &[CandidateList], scorer: &S) -> Result<Vec<(RerankResult, Vec<ScoreDumpRecord>)>, PointwiseError> {
    lists
        .par_iter()
        .map(|l| {
            let scores = score_list(l, scorer);
            let result = rerank_pointwise(l, &scores)?;
            Ok((result, dump_records(l, &scores)))
        })
        .collect()
}

fn run_pairwise<C: Comparator>(lists: &[CandidateList], judge: &C) -> Vec<(RerankResult, Vec<AuditRecord>)> {
    lists
        .par_iter()
        .map(|l| {
            let (result, trace) = merge_sort_traced(l, judge);
            (result, audit_records(&l.query.id, &trace))
        })
        .collect()
}

fn pairwise_with<C: Comparator>(lists: &[CandidateList], judge: C, swap: bool) -> Vec<(RerankResult, Vec<AuditRecord>)> {
    if swap {
        run_pairwise(lists, &SwapConsistent(judge))
    } else {
        run_pairwise(lists, &judge)
    }
}

/// Reranks every list; results come back in input order whatever the
/// worker count.
pub fn run_rerank(lists: &[CandidateList], backend: &Backend, opts: &RunOptions) -> Result<RunOutput, RerankError> {
    let strategy = opts.strategy;
    let unsupported = || RerankError::Unsupported {
        strategy,
        backend: backend.name(),
    };
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(opts.workers.max(1))
        .build()
        .map_err(|e| RerankError::Pool(e.to_string()))?;
    let resolver = ImageResolver::new(opts.images_root.clone());
    let mut out = RunOutput::default();
    pool.install(|| -> Result<(), RerankError> {
        if strategy.is_pointwise() {
            let rows = match backend {
                Backend::Http(gw) => run_pointwise(lists, &VlmScorer::new(gw as &dyn VlmBackend, strategy, resolver)?)?,
                Backend::Synthetic(cfg) if cfg.strategy == strategy => {
                    run_pointwise(lists, &SyntheticScorer(cfg.clone()))?
                }
                _ => return Err(unsupported()),
            };
            for (r, dump) in rows {
                out.results.push(r);
                out.scores.extend(dump);
            }
        } else {
            let rows = match backend {
                Backend::Http(gw) => pairwise_with(lists, VlmComparator::new(gw as &dyn VlmBackend, resolver), opts.swap_consistency),
                Backend::Oracle(cfg) => pairwise_with(lists, OracleComparator::new(*cfg), opts.swap_consistency),
                Backend::Synthetic(_) => return Err(unsupported()),
            };
            for (r, audit) in rows {
                out.results.push(r);
                out.audit.extend(audit);
            }
        }
        Ok(())
    })?;
    let s = &mut out.summary;
    s.queries = out.results.len() as u64;
    for r in &out.results {
        s.comparator_calls += r.comparator_calls;
        s.cache_hits += r.diagnostics.cache_hits;
        s.fallbacks += r.diagnostics.fallbacks;
        s.parse_failures += r.diagnostics.parse_failures;
    }
    if let Some(g) = backend.gateway_stats() {
        s.http_requests = g.http_requests;
        s.retries = g.retries;
    }
    Ok(out)
}
