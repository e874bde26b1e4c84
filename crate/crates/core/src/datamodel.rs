//! Candidate lists, rerank outputs, and the line-delimited file formats that
//! carry them.
//!
//! # Candidate-list file
//!
//! UTF-8, one JSON object per line, blank lines ignored:
//!
//! ```text
//! {"query_id":"q1","query_image":"ground/q1.jpg","ground_truth_id":"s7",
//!  "candidates":[{"id":"s3","image":"aerial/s3.png","rank":1,"score":0.83}, ...]}
//! ```
//!
//! `ground_truth_id` may be `null` or name an id that is not among the
//! candidates. `score` may be `null` or omitted. Candidates must be listed in
//! rank order with ranks exactly `1..=K`.
//!
//! # Results file
//!
//! One [`RerankResult`] per line, serialized with the field names of the
//! struct. The in-memory `cache_hits` counter is not persisted so that a rerun
//! over a warm cache writes the same bytes as the cold run.

use std::collections::HashSet;
use std::fmt;
use std::fs::File;
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::{de::DeserializeOwned, Deserialize, Serialize};
use thiserror::Error;

/// Ground-level panorama to be localized.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct GroundQuery {
    pub id: String,
    pub image_ref: String,
}

/// One aerial tile proposed by the first-stage retriever.
#[derive(Debug, Clone, PartialEq)]
pub struct AerialCandidate {
    pub id: String,
    pub image_ref: String,
    /// 1-based position in the retriever's output.
    pub initial_rank: u32,
    pub retrieval_score: Option<f64>,
}

/// A query together with its retriever-ordered top-K candidates.
#[derive(Debug, Clone, PartialEq)]
pub struct CandidateList {
    pub query: GroundQuery,
    pub candidates: Vec<AerialCandidate>,
    pub ground_truth_id: Option<String>,
    pub k: usize,
}

impl CandidateList {
    /// Builds a list with `k` taken from the candidate count.
    pub fn new(
        query: GroundQuery,
        candidates: Vec<AerialCandidate>,
        ground_truth_id: Option<String>,
    ) -> Self {
        let k = candidates.len();
        CandidateList {
            query,
            candidates,
            ground_truth_id,
            k,
        }
    }

    pub fn candidate_ids(&self) -> Vec<String> {
        self.candidates.iter().map(|c| c.id.clone()).collect()
    }

    pub fn candidate(&self, id: &str) -> Option<&AerialCandidate> {
        self.candidates.iter().find(|c| c.id == id)
    }

    pub fn is_ground_truth(&self, candidate_id: &str) -> bool {
        self.ground_truth_id.as_deref() == Some(candidate_id)
    }

    /// 1-based rank of the ground truth in the initial order, if present.
    pub fn ground_truth_rank(&self) -> Option<usize> {
        let gt = self.ground_truth_id.as_deref()?;
        self.candidates.iter().position(|c| c.id == gt).map(|p| p + 1)
    }
}

/// The closed set of reranking strategies.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StrategyId {
    Direct,
    Likert,
    Yesno,
    ReasonYesno,
    Pairwise,
}

impl StrategyId {
    pub const ALL: [StrategyId; 5] = [
        StrategyId::Direct,
        StrategyId::Likert,
        StrategyId::Yesno,
        StrategyId::ReasonYesno,
        StrategyId::Pairwise,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            StrategyId::Direct => "direct",
            StrategyId::Likert => "likert",
            StrategyId::Yesno => "yesno",
            StrategyId::ReasonYesno => "reason_yesno",
            StrategyId::Pairwise => "pairwise",
        }
    }

    pub fn is_pointwise(self) -> bool {
        !matches!(self, StrategyId::Pairwise)
    }

    /// Closed interval a valid pointwise score of this strategy lies in.
    pub fn score_range(self) -> Option<(f64, f64)> {
        match self {
            StrategyId::Direct => Some((0.0, 100.0)),
            StrategyId::Likert => Some((1.0, 5.0)),
            StrategyId::Yesno | StrategyId::ReasonYesno => Some((0.0, 1.0)),
            StrategyId::Pairwise => None,
        }
    }
}

impl fmt::Display for StrategyId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
#[error("unknown strategy '{0}' (expected direct, likert, yesno, reason_yesno or pairwise)")]
pub struct UnknownStrategy(pub String);

impl FromStr for StrategyId {
    type Err = UnknownStrategy;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        StrategyId::ALL
            .into_iter()
            .find(|id| id.as_str() == s)
            .ok_or_else(|| UnknownStrategy(s.to_string()))
    }
}

/// Per-query fault counters.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Diagnostics {
    pub parse_failures: u64,
    pub fallbacks: u64,
    #[serde(skip)]
    pub cache_hits: u64,
}

impl Diagnostics {
    pub fn merge(&mut self, other: &Diagnostics) {
        self.parse_failures += other.parse_failures;
        self.fallbacks += other.fallbacks;
        self.cache_hits += other.cache_hits;
    }
}

/// The reordered candidate list for one query.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RerankResult {
    pub query_id: String,
    pub strategy: StrategyId,
    pub order: Vec<String>,
    /// Scores aligned with `order`; `None` entries mark invalid scores.
    pub scores: Option<Vec<Option<f64>>>,
    pub comparator_calls: u64,
    pub diagnostics: Diagnostics,
}

impl RerankResult {
    /// Checks what can be checked without the originating list: ids are
    /// non-empty and distinct, and scores (if any) align with `order`.
    pub fn check_shape(&self) -> Result<(), ResultError> {
        let mut seen = HashSet::with_capacity(self.order.len());
        for id in &self.order {
            if id.is_empty() || !seen.insert(id.as_str()) {
                return Err(ResultError::NotPermutation {
                    query_id: self.query_id.clone(),
                    detail: format!("duplicate or empty id '{id}' in order"),
                });
            }
        }
        if let Some(scores) = &self.scores {
            if scores.len() != self.order.len() {
                return Err(ResultError::NotPermutation {
                    query_id: self.query_id.clone(),
                    detail: format!("{} scores for {} ids", scores.len(), self.order.len()),
                });
            }
        }
        if self.strategy.is_pointwise() && self.comparator_calls != 0 {
            return Err(ResultError::NotPermutation {
                query_id: self.query_id.clone(),
                detail: "pointwise result reports comparator calls".to_string(),
            });
        }
        Ok(())
    }

    /// Checks that `order` is a permutation of the list's candidate ids.
    pub fn check_against(&self, list: &CandidateList) -> Result<(), ResultError> {
        self.check_shape()?;
        let mut expected: Vec<&str> = list.candidates.iter().map(|c| c.id.as_str()).collect();
        let mut got: Vec<&str> = self.order.iter().map(String::as_str).collect();
        expected.sort_unstable();
        got.sort_unstable();
        if self.query_id != list.query.id || expected != got {
            return Err(ResultError::NotPermutation {
                query_id: self.query_id.clone(),
                detail: format!("order is not a permutation of the candidates of '{}'", list.query.id),
            });
        }
        Ok(())
    }
}

#[derive(Debug, Error)]
pub enum DataError {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("line {line}: schema violation: {message}")]
    Schema { line: usize, message: String },
    #[error("line {line}: query '{query_id}': duplicate candidate id '{candidate_id}'")]
    DuplicateCandidate {
        line: usize,
        query_id: String,
        candidate_id: String,
    },
    #[error("line {line}: query '{query_id}': non-contiguous rank {found} at position {position} (expected {expected})")]
    NonContiguousRank {
        line: usize,
        query_id: String,
        position: usize,
        expected: u32,
        found: u32,
    },
    #[error("line {line}: duplicate query id '{query_id}'")]
    DuplicateQuery { line: usize, query_id: String },
}

#[derive(Debug, Error)]
pub enum ResultError {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("line {line}: schema violation: {message}")]
    Schema { line: usize, message: String },
    #[error("query '{query_id}': {detail}")]
    NotPermutation { query_id: String, detail: String },
}

/// A broken [`CandidateList`] invariant.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Violation {
    EmptyQueryId,
    EmptyQueryImage,
    EmptyCandidateId { position: usize },
    EmptyCandidateImage { position: usize },
    DuplicateCandidateId { id: String },
    RankMismatch { position: usize, expected: u32, found: u32 },
    LengthMismatch { k: usize, len: usize },
}

impl fmt::Display for Violation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Violation::EmptyQueryId => write!(f, "empty query id"),
            Violation::EmptyQueryImage => write!(f, "empty query image reference"),
            Violation::EmptyCandidateId { position } => {
                write!(f, "empty candidate id at position {position}")
            }
            Violation::EmptyCandidateImage { position } => {
                write!(f, "empty candidate image reference at position {position}")
            }
            Violation::DuplicateCandidateId { id } => write!(f, "duplicate candidate id '{id}'"),
            Violation::RankMismatch {
                position,
                expected,
                found,
            } => write!(
                f,
                "non-contiguous rank {found} at position {position} (expected {expected})"
            ),
            Violation::LengthMismatch { k, len } => {
                write!(f, "length mismatch: k={k} but {len} candidates")
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct ValidationReport {
    pub violations: Vec<Violation>,
    /// Ground truth is named but not among the candidates. Legal.
    pub gt_absent: bool,
}

impl ValidationReport {
    pub fn is_ok(&self) -> bool {
        self.violations.is_empty()
    }
}

pub fn validate_candidate_list(list: &CandidateList) -> ValidationReport {
    let mut violations = Vec::new();
    if list.query.id.is_empty() {
        violations.push(Violation::EmptyQueryId);
    }
    if list.query.image_ref.is_empty() {
        violations.push(Violation::EmptyQueryImage);
    }
    if list.k != list.candidates.len() {
        violations.push(Violation::LengthMismatch {
            k: list.k,
            len: list.candidates.len(),
        });
    }
    let mut seen = HashSet::new();
    for (idx, c) in list.candidates.iter().enumerate() {
        let position = idx + 1;
        if c.id.is_empty() {
            violations.push(Violation::EmptyCandidateId { position });
        } else if !seen.insert(c.id.as_str()) {
            violations.push(Violation::DuplicateCandidateId { id: c.id.clone() });
        }
        if c.image_ref.is_empty() {
            violations.push(Violation::EmptyCandidateImage { position });
        }
        let expected = position as u32;
        if c.initial_rank != expected {
            violations.push(Violation::RankMismatch {
                position,
                expected,
                found: c.initial_rank,
            });
        }
    }
    let gt_absent = match &list.ground_truth_id {
        Some(gt) => !list.candidates.iter().any(|c| &c.id == gt),
        None => false,
    };
    ValidationReport {
        violations,
        gt_absent,
    }
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct CandidateRecord {
    id: String,
    image: String,
    rank: u32,
    #[serde(default)]
    score: Option<f64>,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct ListRecord {
    query_id: String,
    query_image: String,
    ground_truth_id: Option<String>,
    candidates: Vec<CandidateRecord>,
}

impl From<ListRecord> for CandidateList {
    fn from(r: ListRecord) -> Self {
        let candidates = r
            .candidates
            .into_iter()
            .map(|c| AerialCandidate {
                id: c.id,
                image_ref: c.image,
                initial_rank: c.rank,
                retrieval_score: c.score,
            })
            .collect();
        CandidateList::new(
            GroundQuery {
                id: r.query_id,
                image_ref: r.query_image,
            },
            candidates,
            r.ground_truth_id,
        )
    }
}

impl From<&CandidateList> for ListRecord {
    fn from(l: &CandidateList) -> Self {
        ListRecord {
            query_id: l.query.id.clone(),
            query_image: l.query.image_ref.clone(),
            ground_truth_id: l.ground_truth_id.clone(),
            candidates: l
                .candidates
                .iter()
                .map(|c| CandidateRecord {
                    id: c.id.clone(),
                    image: c.image_ref.clone(),
                    rank: c.initial_rank,
                    score: c.retrieval_score,
                })
                .collect(),
        }
    }
}

/// Reads one list per non-blank line. Every returned list is valid.
pub fn load_candidates(path: impl AsRef<Path>) -> Result<Vec<CandidateList>, DataError> {
    let path = path.as_ref();
    let io_err = |source| DataError::Io {
        path: path.to_path_buf(),
        source,
    };
    let reader = BufReader::new(File::open(path).map_err(io_err)?);
    let mut lists = Vec::new();
    let mut query_ids = HashSet::new();
    for (idx, line) in reader.lines().enumerate() {
        let line_no = idx + 1;
        let line = line.map_err(io_err)?;
        if line.trim().is_empty() {
            continue;
        }
        let record: ListRecord = serde_json::from_str(&line).map_err(|e| DataError::Schema {
            line: line_no,
            message: e.to_string(),
        })?;
        let list = CandidateList::from(record);
        let report = validate_candidate_list(&list);
        if let Some(v) = report.violations.into_iter().next() {
            return Err(violation_error(line_no, &list.query.id, v));
        }
        if !query_ids.insert(list.query.id.clone()) {
            return Err(DataError::DuplicateQuery {
                line: line_no,
                query_id: list.query.id,
            });
        }
        lists.push(list);
    }
    Ok(lists)
}

/// Every problem in a candidate file, one message per problem, without
/// stopping at the first. Only IO failures are errors.
pub fn validate_file(path: impl AsRef<Path>) -> Result<Vec<String>, DataError> {
    let path = path.as_ref();
    let io_err = |source| DataError::Io {
        path: path.to_path_buf(),
        source,
    };
    let reader = BufReader::new(File::open(path).map_err(io_err)?);
    let mut issues = Vec::new();
    let mut query_ids = HashSet::new();
    for (idx, line) in reader.lines().enumerate() {
        let line_no = idx + 1;
        let line = line.map_err(io_err)?;
        if line.trim().is_empty() {
            continue;
        }
        let record: ListRecord = match serde_json::from_str(&line) {
            Ok(r) => r,
            Err(e) => {
                issues.push(format!("line {line_no}: schema violation: {e}"));
                continue;
            }
        };
        let list = CandidateList::from(record);
        for v in validate_candidate_list(&list).violations {
            issues.push(format!("line {line_no}: query '{}': {v}", list.query.id));
        }
        if !query_ids.insert(list.query.id.clone()) {
            issues.push(format!("line {line_no}: duplicate query id '{}'", list.query.id));
        }
    }
    Ok(issues)
}

fn violation_error(line: usize, query_id: &str, v: Violation) -> DataError {
    match v {
        Violation::DuplicateCandidateId { id } => DataError::DuplicateCandidate {
            line,
            query_id: query_id.to_string(),
            candidate_id: id,
        },
        Violation::RankMismatch {
            position,
            expected,
            found,
        } => DataError::NonContiguousRank {
            line,
            query_id: query_id.to_string(),
            position,
            expected,
            found,
        },
        other => DataError::Schema {
            line,
            message: format!("query '{query_id}': {other}"),
        },
    }
}

pub fn save_candidates(lists: &[CandidateList], path: impl AsRef<Path>) -> std::io::Result<()> {
    let records: Vec<ListRecord> = lists.iter().map(ListRecord::from).collect();
    write_jsonl(path, &records)
}

/// Persists results in input order. Refuses results whose order is not a
/// plausible permutation.
pub fn save_results(results: &[RerankResult], path: impl AsRef<Path>) -> Result<(), ResultError> {
    for r in results {
        r.check_shape()?;
    }
    let path = path.as_ref();
    write_jsonl(path, results).map_err(|source| ResultError::Io {
        path: path.to_path_buf(),
        source,
    })
}

pub fn load_results(path: impl AsRef<Path>) -> Result<Vec<RerankResult>, ResultError> {
    let path = path.as_ref();
    read_jsonl(path).map_err(|e| match e {
        JsonlError::Io(source) => ResultError::Io {
            path: path.to_path_buf(),
            source,
        },
        JsonlError::Parse { line, message } => ResultError::Schema { line, message },
    })
}

#[derive(Debug, Error)]
pub enum JsonlError {
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error("line {line}: {message}")]
    Parse { line: usize, message: String },
}

/// Reads a line-delimited JSON file, skipping blank lines.
pub fn read_jsonl<T: DeserializeOwned>(path: impl AsRef<Path>) -> Result<Vec<T>, JsonlError> {
    let reader = BufReader::new(File::open(path)?);
    let mut out = Vec::new();
    for (idx, line) in reader.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let item = serde_json::from_str(&line).map_err(|e| JsonlError::Parse {
            line: idx + 1,
            message: e.to_string(),
        })?;
        out.push(item);
    }
    Ok(out)
}

pub fn write_jsonl<T: Serialize>(path: impl AsRef<Path>, items: &[T]) -> std::io::Result<()> {
    let mut buf = Vec::new();
    for item in items {
        serde_json::to_writer(&mut buf, item)?;
        buf.push(b'\n');
    }
    write_atomic(path, &buf)
}

/// Writes via a sibling temporary file and a rename, so readers never observe
/// a partially written file.
pub fn write_atomic(path: impl AsRef<Path>, bytes: &[u8]) -> std::io::Result<()> {
    let path = path.as_ref();
    let dir = match path.parent() {
        Some(p) if !p.as_os_str().is_empty() => p,
        _ => Path::new("."),
    };
    let mut tmp = tempfile::NamedTempFile::new_in(dir)?;
    // Temp files are created owner-only; give the result ordinary permissions.
    match std::fs::metadata(path) {
        Ok(meta) => tmp.as_file().set_permissions(meta.permissions())?,
        #[cfg(unix)]
        Err(_) => {
            use std::os::unix::fs::PermissionsExt;
            tmp.as_file().set_permissions(std::fs::Permissions::from_mode(0o644))?
        }
        #[cfg(not(unix))]
        Err(_) => {}
    }
    tmp.write_all(bytes)?;
    tmp.as_file().sync_all()?;
    tmp.persist(path).map_err(|e| e.error)?;
    Ok(())
}
