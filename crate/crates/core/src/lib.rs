//! Second-stage reranking of cross-view geolocalization candidates.
//!
//! A first-stage retriever produces, for each ground-level panorama, a short
//! list of aerial candidates. This crate reorders those lists using a
//! vision-language model, either by scoring each candidate on its own
//! ([`pointwise`]) or by sorting the list with a two-way "which one matches
//! better" judge ([`pairwise`]). Simulated judges ([`simbackend`]) stand in for
//! the model when no inference server is available, and [`eval`] computes
//! Recall@k and score-separability statistics over the outputs.

pub mod cli;
pub mod datamodel;
pub mod eval;
pub mod gateway;
pub mod pairwise;
pub mod pointwise;
pub mod prompts;
pub mod rerank;
pub mod simbackend;
pub mod stablehash;

pub use datamodel::{
    AerialCandidate, CandidateList, Diagnostics, GroundQuery, RerankResult, StrategyId,
};
