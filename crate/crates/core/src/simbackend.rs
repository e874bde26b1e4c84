//! Simulated judges and scorers that stand in for a VLM.
//!
//! Every random draw is a pure function of a seed and the ids involved, so
//! results do not depend on thread count or evaluation order.

use std::collections::HashMap;
use std::sync::Mutex;

use rand::Rng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::datamodel::{AerialCandidate, CandidateList, GroundQuery, StrategyId};
use crate::pairwise::{outcome, Comparator, PreferenceOutcome, Slot};
use crate::pointwise::{PointwiseScore, Scorer};
use crate::stablehash::{combine, rng_for, str_hash, unit_interval};

#[derive(Debug, Error)]
pub enum SimError {
    #[error("empty flip-probability grid")]
    EmptyGrid,
    #[error("flip probability {0} outside [0, 1]")]
    BadProbability(f64),
    #[error("query '{0}' has no ground truth among its candidates")]
    GroundTruthAbsent(String),
    #[error("trials must be at least 1")]
    NoTrials,
    #[error("invalid synthetic score configuration: {0}")]
    BadScoreConfig(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct OracleConfig {
    pub flip_probability: f64,
    pub seed: u64,
    /// Draw a fresh flip for every call instead of once per unordered pair.
    #[serde(default)]
    pub per_call_noise: bool,
}

impl OracleConfig {
    pub fn new(flip_probability: f64, seed: u64) -> Result<Self, SimError> {
        if !(0.0..=1.0).contains(&flip_probability) {
            return Err(SimError::BadProbability(flip_probability));
        }
        Ok(OracleConfig {
            flip_probability,
            seed,
            per_call_noise: false,
        })
    }
}

/// Ground truth first, then ascending initial rank.
fn true_key(list: &CandidateList, c: &AerialCandidate) -> (bool, u32) {
    (!list.is_ground_truth(&c.id), c.initial_rank)
}

fn true_winner(list: &CandidateList, first: &AerialCandidate, second: &AerialCandidate) -> Slot {
    if true_key(list, first) <= true_key(list, second) {
        Slot::First
    } else {
        Slot::Second
    }
}

fn pair_key(seed: u64, query_id: &str, a: &str, b: &str, extra: &[u64]) -> u64 {
    let (lo, hi) = if a <= b { (a, b) } else { (b, a) };
    let mut keys = vec![str_hash(query_id), str_hash(lo), str_hash(hi)];
    keys.extend_from_slice(extra);
    combine(seed, &keys)
}

/// Noisy oracle with the flip keyed on the unordered pair, so a pair always
/// gets the same verdict regardless of slot order or repetition.
pub fn oracle_compare(
    list: &CandidateList,
    first: &AerialCandidate,
    second: &AerialCandidate,
    cfg: &OracleConfig,
) -> PreferenceOutcome {
    let flip = unit_interval(pair_key(cfg.seed, &list.query.id, &first.id, &second.id, &[]))
        < cfg.flip_probability;
    let winner = true_winner(list, first, second);
    outcome(first, second, if flip { winner.flipped() } else { winner })
}

/// [`Comparator`] wrapper around [`oracle_compare`]. In per-call mode the
/// flip also depends on how many comparisons this query has already made,
/// which is deterministic because merges within a query run sequentially.
pub struct OracleComparator {
    cfg: OracleConfig,
    calls: Mutex<HashMap<String, u64>>,
}

impl OracleComparator {
    pub fn new(cfg: OracleConfig) -> Self {
        OracleComparator {
            cfg,
            calls: Mutex::new(HashMap::new()),
        }
    }
}

impl Comparator for OracleComparator {
    fn compare(
        &self,
        list: &CandidateList,
        first: &AerialCandidate,
        second: &AerialCandidate,
    ) -> PreferenceOutcome {
        if !self.cfg.per_call_noise {
            return oracle_compare(list, first, second, &self.cfg);
        }
        let n = {
            let mut calls = self.calls.lock().unwrap_or_else(|e| e.into_inner());
            let n = calls.entry(list.query.id.clone()).or_insert(0);
            *n += 1;
            *n
        };
        let flip = unit_interval(pair_key(self.cfg.seed, &list.query.id, &first.id, &second.id, &[n]))
            < self.cfg.flip_probability;
        let winner = true_winner(list, first, second);
        outcome(first, second, if flip { winner.flipped() } else { winner })
    }
}

/// Named class-conditional score regimes, in units of the unit interval;
/// they are mapped linearly onto each strategy's score range.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Regime {
    /// Every candidate gets the same high score.
    Constant,
    /// Correct and incorrect candidates are far apart with tiny spread.
    Separated,
    /// Correct candidates score higher on average, but the spread swamps it.
    Overlapping,
}

impl Regime {
    pub fn parse(s: &str) -> Option<Regime> {
        match s {
            "constant" => Some(Regime::Constant),
            "separated" => Some(Regime::Separated),
            "overlapping" => Some(Regime::Overlapping),
            _ => None,
        }
    }

    /// (mean correct, std correct, mean incorrect, std incorrect) on [0, 1].
    fn unit_params(self) -> (f64, f64, f64, f64) {
        match self {
            Regime::Constant => (0.9, 0.0, 0.9, 0.0),
            Regime::Separated => (0.9, 0.01, 0.1, 0.01),
            Regime::Overlapping => (0.7, 0.3, 0.5, 0.3),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassDistribution {
    pub mean: f64,
    pub std: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SyntheticScoreConfig {
    pub regime: String,
    pub strategy: StrategyId,
    pub correct: ClassDistribution,
    pub incorrect: ClassDistribution,
    pub range: (f64, f64),
    pub seed: u64,
}

impl SyntheticScoreConfig {
    pub fn preset(regime: Regime, strategy: StrategyId, seed: u64) -> Result<Self, SimError> {
        let (lo, hi) = strategy
            .score_range()
            .ok_or_else(|| SimError::BadScoreConfig(format!("{strategy} has no score range")))?;
        let (mc, sc, mi, si) = regime.unit_params();
        let span = hi - lo;
        let cfg = SyntheticScoreConfig {
            regime: format!("{regime:?}").to_lowercase(),
            strategy,
            correct: ClassDistribution {
                mean: lo + mc * span,
                std: sc * span,
            },
            incorrect: ClassDistribution {
                mean: lo + mi * span,
                std: si * span,
            },
            range: (lo, hi),
            seed,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<(), SimError> {
        let bad = |m: String| Err(SimError::BadScoreConfig(m));
        if !(self.correct.std >= 0.0 && self.incorrect.std >= 0.0) {
            return bad("negative standard deviation".into());
        }
        if self.strategy.score_range() != Some(self.range) {
            return bad(format!(
                "range {:?} does not match strategy {}",
                self.range, self.strategy
            ));
        }
        Ok(())
    }
}

/// Draws a class-conditional score, clamped to the configured range.
pub fn synthetic_pointwise(
    list: &CandidateList,
    candidate: &AerialCandidate,
    cfg: &SyntheticScoreConfig,
) -> PointwiseScore {
    let is_gt = list.is_ground_truth(&candidate.id);
    let class = if is_gt { &cfg.correct } else { &cfg.incorrect };
    let mut rng = rng_for(cfg.seed, &[str_hash(&list.query.id), str_hash(&candidate.id)]);
    let raw = if class.std > 0.0 {
        Normal::new(class.mean, class.std)
            .expect("std checked non-negative")
            .sample(&mut rng)
    } else {
        class.mean
    };
    let mut value = raw.clamp(cfg.range.0, cfg.range.1);
    if cfg.strategy == StrategyId::Direct {
        value = value.round();
    }
    PointwiseScore::valid(&candidate.id, cfg.strategy, value)
}

pub struct SyntheticScorer(pub SyntheticScoreConfig);

impl Scorer for SyntheticScorer {
    fn strategy(&self) -> StrategyId {
        self.0.strategy
    }

    fn score(&self, list: &CandidateList, candidate: &AerialCandidate) -> PointwiseScore {
        synthetic_pointwise(list, candidate, &self.0)
    }
}

fn make_list(qid: String, k: usize, gt_rank: Option<usize>) -> CandidateList {
    let candidates: Vec<AerialCandidate> = (1..=k)
        .map(|r| AerialCandidate {
            id: format!("{qid}_s{r:02}"),
            image_ref: format!("aerial/{qid}_s{r:02}.png"),
            initial_rank: r as u32,
            retrieval_score: Some(((1.0 - r as f64 / (k as f64 + 1.0)) * 1e4).round() / 1e4),
        })
        .collect();
    let gt = match gt_rank {
        Some(r) => candidates[r - 1].id.clone(),
        None => format!("{qid}_true"),
    };
    CandidateList::new(
        GroundQuery {
            image_ref: format!("ground/{qid}.jpg"),
            id: qid,
        },
        candidates,
        Some(gt),
    )
}

/// `n_queries` lists of length `k` with the ground truth at a uniformly
/// random initial position.
pub fn synthetic_dataset(n_queries: usize, k: usize, seed: u64) -> Vec<CandidateList> {
    let mut rng = rng_for(seed, &[str_hash("dataset")]);
    (0..n_queries)
        .map(|i| {
            let gt = if k == 0 { None } else { Some(rng.gen_range(1..=k)) };
            make_list(format!("q{i:05}"), k, gt)
        })
        .collect()
}

/// Lists whose ground-truth ranks follow `rank_counts`: each entry is
/// `(Some(rank), count)` or `(None, count)` for ground truth absent from the
/// top-K. Positions are shuffled across queries with `seed`.
pub fn fixture_with_ranks(
    k: usize,
    rank_counts: &[(Option<usize>, usize)],
    seed: u64,
) -> Vec<CandidateList> {
    use rand::seq::SliceRandom;
    let mut ranks: Vec<Option<usize>> = rank_counts
        .iter()
        .flat_map(|&(r, n)| std::iter::repeat_n(r, n))
        .collect();
    ranks.shuffle(&mut rng_for(seed, &[str_hash("fixture")]));
    ranks
        .into_iter()
        .enumerate()
        .map(|(i, r)| make_list(format!("q{i:05}"), k, r))
        .collect()
}

/// 500 queries, K = 20, with ground truth at rank 1 for 306 queries, within
/// the top 3 for 369 and within the top 5 for 412; 50 more sit at ranks 6-20
/// and 38 are absent from the list.
pub fn baseline_fixture(seed: u64) -> Vec<CandidateList> {
    let mut counts: Vec<(Option<usize>, usize)> = vec![
        (Some(1), 306),
        (Some(2), 35),
        (Some(3), 28),
        (Some(4), 24),
        (Some(5), 19),
    ];
    // 50 spread over ranks 6..=20: 4 at ranks 6-10, 3 at ranks 11-20
    counts.extend((6..=10).map(|r| (Some(r), 4)));
    counts.extend((11..=20).map(|r| (Some(r), 3)));
    counts.push((None, 38));
    fixture_with_ranks(20, &counts, seed)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub p: f64,
    pub mean_r1: f64,
    pub mean_r3: f64,
    pub mean_r5: f64,
    pub mean_calls: f64,
}

/// Pairwise reranking under the noisy oracle for each flip probability,
/// averaged over `trials` derived seeds.
pub fn run_noise_sweep(
    dataset: &[CandidateList],
    p_grid: &[f64],
    trials: usize,
    seed: u64,
    per_call_noise: bool,
) -> Result<Vec<SweepRow>, SimError> {
    if p_grid.is_empty() {
        return Err(SimError::EmptyGrid);
    }
    if trials == 0 {
        return Err(SimError::NoTrials);
    }
    if let Some(&p) = p_grid.iter().find(|p| !(0.0..=1.0).contains(*p)) {
        return Err(SimError::BadProbability(p));
    }
    if let Some(l) = dataset.iter().find(|l| l.ground_truth_rank().is_none()) {
        return Err(SimError::GroundTruthAbsent(l.query.id.clone()));
    }
    let prepared: Vec<PreparedList> = dataset.iter().map(PreparedList::new).collect();
    let n = dataset.len().max(1) as f64;
    let rows = p_grid
        .iter()
        .enumerate()
        .map(|(pi, &p)| {
            let per_trial: Vec<[f64; 4]> = (0..trials)
                .into_par_iter()
                .map(|t| {
                    let cfg = OracleConfig {
                        flip_probability: p,
                        seed: combine(seed, &[pi as u64, t as u64]),
                        per_call_noise,
                    };
                    let mut acc = [0.0; 4];
                    for list in &prepared {
                        let (pos, calls) = list.oracle_sort(&cfg);
                        acc[0] += f64::from(u8::from(pos <= 1));
                        acc[1] += f64::from(u8::from(pos <= 3));
                        acc[2] += f64::from(u8::from(pos <= 5));
                        acc[3] += calls as f64;
                    }
                    [100.0 * acc[0] / n, 100.0 * acc[1] / n, 100.0 * acc[2] / n, acc[3] / n]
                })
                .collect();
            let mean = |i: usize| per_trial.iter().map(|r| r[i]).sum::<f64>() / trials as f64;
            SweepRow {
                p,
                mean_r1: mean(0),
                mean_r3: mean(1),
                mean_r5: mean(2),
                mean_calls: mean(3),
            }
        })
        .collect();
    Ok(rows)
}

/// A list reduced to the hashes and keys the oracle needs, so the sweep's
/// inner loop is allocation-free. Produces exactly the decisions of
/// [`merge_sort_rerank`](crate::pairwise::merge_sort_rerank) with an [`OracleComparator`].
struct PreparedList {
    query_hash: u64,
    id_hash: Vec<u64>,
    /// Position of each id in lexicographic order, to form unordered pair keys.
    id_order: Vec<usize>,
    true_key: Vec<(bool, u32)>,
    gt: usize,
}

impl PreparedList {
    fn new(list: &CandidateList) -> Self {
        let mut by_id: Vec<usize> = (0..list.candidates.len()).collect();
        by_id.sort_by(|&a, &b| list.candidates[a].id.cmp(&list.candidates[b].id));
        let mut id_order = vec![0; by_id.len()];
        for (rank, &i) in by_id.iter().enumerate() {
            id_order[i] = rank;
        }
        PreparedList {
            query_hash: str_hash(&list.query.id),
            id_hash: list.candidates.iter().map(|c| str_hash(&c.id)).collect(),
            id_order,
            true_key: list.candidates.iter().map(|c| true_key(list, c)).collect(),
            gt: list
                .candidates
                .iter()
                .position(|c| list.is_ground_truth(&c.id))
                .expect("checked by caller"),
        }
    }

    /// 1-based final position of the ground truth, and the number of calls.
    fn oracle_sort(&self, cfg: &OracleConfig) -> (usize, u64) {
        let mut calls = 0u64;
        let order = self.sort((0..self.id_hash.len()).collect(), cfg, &mut calls);
        let pos = order.iter().position(|&i| i == self.gt).expect("permutation") + 1;
        (pos, calls)
    }

    fn sort(&self, mut items: Vec<usize>, cfg: &OracleConfig, calls: &mut u64) -> Vec<usize> {
        if items.len() <= 1 {
            return items;
        }
        let right = items.split_off(items.len().div_ceil(2));
        let left = self.sort(items, cfg, calls);
        let right = self.sort(right, cfg, calls);
        let mut merged = Vec::with_capacity(left.len() + right.len());
        let (mut i, mut j) = (0, 0);
        while i < left.len() && j < right.len() {
            *calls += 1;
            if self.first_wins(left[i], right[j], cfg, *calls) {
                merged.push(left[i]);
                i += 1;
            } else {
                merged.push(right[j]);
                j += 1;
            }
        }
        merged.extend_from_slice(&left[i..]);
        merged.extend_from_slice(&right[j..]);
        merged
    }

    fn first_wins(&self, a: usize, b: usize, cfg: &OracleConfig, call: u64) -> bool {
        let (lo, hi) = if self.id_order[a] <= self.id_order[b] { (a, b) } else { (b, a) };
        let base = [self.query_hash, self.id_hash[lo], self.id_hash[hi]];
        let key = if cfg.per_call_noise {
            combine(cfg.seed, &[base[0], base[1], base[2], call])
        } else {
            combine(cfg.seed, &base)
        };
        let truth = self.true_key[a] <= self.true_key[b];
        truth != (unit_interval(key) < cfg.flip_probability)
    }
}

pub const DEFAULT_P_GRID: [f64; 6] = [0.0, 0.1, 0.2, 0.3, 0.4, 0.5];

#[cfg(test)]
mod tests {
    use super::*;
    use crate::pairwise::merge_sort_rerank;

    #[test]
    fn noiseless_oracle_follows_true_order() {
        let l = &fixture_with_ranks(10, &[(Some(6), 1)], 0)[0];
        let cfg = OracleConfig::new(0.0, 1).unwrap();
        let (gt, c2, c9) = (&l.candidates[5], &l.candidates[1], &l.candidates[8]);
        assert_eq!(oracle_compare(l, gt, c2, &cfg).winner, Slot::First);
        assert_eq!(oracle_compare(l, c2, gt, &cfg).winner, Slot::Second);
        assert_eq!(oracle_compare(l, c2, c9, &cfg).winner, Slot::First);
    }

    #[test]
    fn full_flip_inverts() {
        let l = &fixture_with_ranks(8, &[(Some(3), 1)], 0)[0];
        let cfg = OracleConfig::new(1.0, 5).unwrap();
        let r = merge_sort_rerank(l, &OracleComparator::new(cfg));
        assert_eq!(r.order.last().unwrap(), l.ground_truth_id.as_ref().unwrap());
    }

    #[test]
    fn flip_is_slot_symmetric() {
        let l = &synthetic_dataset(1, 20, 3)[0];
        let cfg = OracleConfig::new(0.5, 11).unwrap();
        for a in &l.candidates {
            for b in &l.candidates {
                if a.id == b.id {
                    continue;
                }
                let ab = oracle_compare(l, a, b, &cfg);
                let ba = oracle_compare(l, b, a, &cfg);
                assert_eq!(ab.winner_id(), ba.winner_id());
            }
        }
    }

    #[test]
    fn bad_probability_rejected() {
        assert!(OracleConfig::new(1.5, 0).is_err());
        assert!(OracleConfig::new(-0.1, 0).is_err());
    }

    #[test]
    fn baseline_fixture_counts() {
        let lists = baseline_fixture(0);
        assert_eq!(lists.len(), 500);
        let at = |k: usize| {
            lists
                .iter()
                .filter(|l| l.ground_truth_rank().is_some_and(|r| r <= k))
                .count()
        };
        assert_eq!((at(1), at(3), at(5), at(20)), (306, 369, 412, 462));
        assert!(lists.iter().all(|l| l.k == 20));
    }

    #[test]
    fn constant_regime_is_flat() {
        let cfg = SyntheticScoreConfig::preset(Regime::Constant, StrategyId::Direct, 9).unwrap();
        let l = &synthetic_dataset(1, 20, 1)[0];
        for c in &l.candidates {
            assert_eq!(synthetic_pointwise(l, c, &cfg).value, 90.0);
        }
    }

    #[test]
    fn synthetic_scores_are_reproducible_and_in_range() {
        let l = &synthetic_dataset(1, 20, 1)[0];
        for s in [StrategyId::Direct, StrategyId::Likert, StrategyId::Yesno] {
            let cfg = SyntheticScoreConfig::preset(Regime::Overlapping, s, 4).unwrap();
            let (lo, hi) = s.score_range().unwrap();
            for c in &l.candidates {
                let a = synthetic_pointwise(l, c, &cfg);
                assert_eq!(a, synthetic_pointwise(l, c, &cfg));
                assert!(a.value >= lo && a.value <= hi);
            }
        }
    }

    #[test]
    fn sweep_rejects_bad_input() {
        let data = synthetic_dataset(2, 5, 0);
        assert!(matches!(run_noise_sweep(&data, &[], 1, 0, false), Err(SimError::EmptyGrid)));
        assert!(matches!(
            run_noise_sweep(&data, &[2.0], 1, 0, false),
            Err(SimError::BadProbability(_))
        ));
        let absent = fixture_with_ranks(5, &[(None, 1)], 0);
        assert!(matches!(
            run_noise_sweep(&absent, &[0.0], 1, 0, false),
            Err(SimError::GroundTruthAbsent(_))
        ));
    }

    #[test]
    fn prepared_sort_matches_generic_comparator() {
        for (seed, p, per_call) in [(1, 0.0, false), (2, 0.3, false), (3, 0.5, true), (4, 0.9, true)] {
            for list in &synthetic_dataset(20, 13, seed) {
                let mut cfg = OracleConfig::new(p, seed * 31).unwrap();
                cfg.per_call_noise = per_call;
                let generic = merge_sort_rerank(list, &OracleComparator::new(cfg));
                let (pos, calls) = PreparedList::new(list).oracle_sort(&cfg);
                let gt = list.ground_truth_id.as_ref().unwrap();
                assert_eq!(pos, generic.order.iter().position(|id| id == gt).unwrap() + 1);
                assert_eq!(calls, generic.comparator_calls);
            }
        }
    }

    #[test]
    fn noiseless_sweep_is_perfect() {
        let data = synthetic_dataset(30, 20, 2);
        let rows = run_noise_sweep(&data, &[0.0], 3, 7, false).unwrap();
        assert_eq!(rows[0].mean_r1, 100.0);
        assert!(rows[0].mean_calls <= 100.0);
    }
}
