//! C ABI for the `georerank` library.
//!
//! Handles are opaque and owned by the caller once returned; release them
//! with the matching `*_free` function. Every fallible function returns a
//! [`GrStatus`]; on failure, `gr_last_error_message` describes the error
//! until the next call on the same thread.

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::PathBuf;

use georerank::datamodel::{load_candidates, save_results, DataError, ResultError};
use georerank::eval::{recall_at_k, truths_from_lists};
use georerank::gateway::TokenDistribution;
use georerank::pointwise::{expected_likert, yes_probability, LIKERT_LABELS};
use georerank::rerank::{run_rerank, Backend, RunOptions};
use georerank::simbackend::{synthetic_dataset, OracleConfig, Regime, SyntheticScoreConfig};
use georerank::{CandidateList, RerankResult, StrategyId};

#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum GrStatus {
    Ok = 0,
    NullArgument = 1,
    InvalidUtf8 = 2,
    Io = 3,
    Data = 4,
    Config = 5,
    Empty = 6,
    Panic = 7,
}

/// A loaded set of candidate lists.
pub struct GrDataset {
    lists: Vec<CandidateList>,
}

/// Rerank output for a dataset.
pub struct GrResults {
    results: Vec<RerankResult>,
}

thread_local! {
    static LAST_ERROR: RefCell<Option<CString>> = const { RefCell::new(None) };
}

fn set_error(msg: impl Into<String>) {
    let text = msg.into().replace('\0', " ");
    LAST_ERROR.with(|e| *e.borrow_mut() = CString::new(text).ok());
}

fn clear_error() {
    LAST_ERROR.with(|e| *e.borrow_mut() = None);
}

type FfiResult<T> = Result<T, (GrStatus, String)>;

fn guard<F: FnOnce() -> FfiResult<()>>(f: F) -> GrStatus {
    clear_error();
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => GrStatus::Ok,
        Ok(Err((status, msg))) => {
            set_error(msg);
            status
        }
        Err(payload) => {
            let msg = payload
                .downcast_ref::<&str>()
                .map(|s| s.to_string())
                .or_else(|| payload.downcast_ref::<String>().cloned())
                .unwrap_or_else(|| "unknown panic".into());
            set_error(format!("panic: {msg}"));
            GrStatus::Panic
        }
    }
}

unsafe fn str_arg<'a>(p: *const c_char, name: &str) -> FfiResult<&'a str> {
    if p.is_null() {
        return Err((GrStatus::NullArgument, format!("{name} is null")));
    }
    CStr::from_ptr(p)
        .to_str()
        .map_err(|_| (GrStatus::InvalidUtf8, format!("{name} is not valid UTF-8")))
}

unsafe fn ref_arg<'a, T>(p: *const T, name: &str) -> FfiResult<&'a T> {
    p.as_ref().ok_or_else(|| (GrStatus::NullArgument, format!("{name} is null")))
}

fn out_arg<T>(p: *mut T, name: &str) -> FfiResult<()> {
    if p.is_null() {
        Err((GrStatus::NullArgument, format!("{name} is null")))
    } else {
        Ok(())
    }
}

fn data_status(e: DataError) -> (GrStatus, String) {
    let status = match e {
        DataError::Io { .. } => GrStatus::Io,
        _ => GrStatus::Data,
    };
    (status, e.to_string())
}

/// Message for the last failed call on this thread, or NULL. The pointer is
/// valid until the next library call on the same thread.
#[no_mangle]
pub extern "C" fn gr_last_error_message() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ref().map_or(std::ptr::null(), |s| s.as_ptr()))
}

/// Loads and validates a candidate-list file.
///
/// # Safety
/// `path` must be a NUL-terminated string; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn gr_dataset_load(path: *const c_char, out: *mut *mut GrDataset) -> GrStatus {
    guard(|| {
        let path = str_arg(path, "path")?;
        out_arg(out, "out")?;
        let lists = load_candidates(PathBuf::from(path)).map_err(data_status)?;
        *out = Box::into_raw(Box::new(GrDataset { lists }));
        Ok(())
    })
}

/// Builds a synthetic dataset with the ground truth at a random position.
///
/// # Safety
/// `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn gr_dataset_synthetic(
    n_queries: usize,
    k: usize,
    seed: u64,
    out: *mut *mut GrDataset,
) -> GrStatus {
    guard(|| {
        out_arg(out, "out")?;
        if n_queries == 0 || k == 0 {
            return Err((GrStatus::Config, "n_queries and k must be positive".into()));
        }
        *out = Box::into_raw(Box::new(GrDataset {
            lists: synthetic_dataset(n_queries, k, seed),
        }));
        Ok(())
    })
}

/// Number of queries; 0 for NULL.
///
/// # Safety
/// `dataset` must be NULL or a live handle.
#[no_mangle]
pub unsafe extern "C" fn gr_dataset_len(dataset: *const GrDataset) -> usize {
    dataset.as_ref().map_or(0, |d| d.lists.len())
}

/// # Safety
/// `dataset` must be NULL or a handle not yet freed.
#[no_mangle]
pub unsafe extern "C" fn gr_dataset_free(dataset: *mut GrDataset) {
    if !dataset.is_null() {
        drop(Box::from_raw(dataset));
    }
}

fn run(dataset: &GrDataset, backend: Backend, strategy: StrategyId, workers: usize) -> FfiResult<GrResults> {
    let mut opts = RunOptions::new(strategy);
    opts.workers = workers.max(1);
    let out = run_rerank(&dataset.lists, &backend, &opts).map_err(|e| (GrStatus::Config, e.to_string()))?;
    Ok(GrResults { results: out.results })
}

/// Pairwise merge-sort rerank against the simulated oracle judge.
///
/// # Safety
/// `dataset` must be a live handle; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn gr_rerank_oracle(
    dataset: *const GrDataset,
    flip_probability: f64,
    seed: u64,
    per_call_noise: bool,
    workers: usize,
    out: *mut *mut GrResults,
) -> GrStatus {
    guard(|| {
        let dataset = ref_arg(dataset, "dataset")?;
        out_arg(out, "out")?;
        let mut cfg = OracleConfig::new(flip_probability, seed).map_err(|e| (GrStatus::Config, e.to_string()))?;
        cfg.per_call_noise = per_call_noise;
        let results = run(dataset, Backend::Oracle(cfg), StrategyId::Pairwise, workers)?;
        *out = Box::into_raw(Box::new(results));
        Ok(())
    })
}

/// Pointwise rerank with synthetic scores. `strategy` is one of `direct`,
/// `likert`, `yesno`, `reason_yesno`; `regime` is `constant`, `separated` or
/// `overlapping`.
///
/// # Safety
/// String arguments must be NUL-terminated; `dataset` must be a live handle;
/// `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn gr_rerank_synthetic(
    dataset: *const GrDataset,
    strategy: *const c_char,
    regime: *const c_char,
    seed: u64,
    workers: usize,
    out: *mut *mut GrResults,
) -> GrStatus {
    guard(|| {
        let dataset = ref_arg(dataset, "dataset")?;
        let strategy_name = str_arg(strategy, "strategy")?;
        let regime_name = str_arg(regime, "regime")?;
        out_arg(out, "out")?;
        let strategy: StrategyId = strategy_name.parse().map_err(|e| (GrStatus::Config, format!("{e}")))?;
        let regime =
            Regime::parse(regime_name).ok_or_else(|| (GrStatus::Config, format!("unknown regime '{regime_name}'")))?;
        let cfg = SyntheticScoreConfig::preset(regime, strategy, seed).map_err(|e| (GrStatus::Config, e.to_string()))?;
        let results = run(dataset, Backend::Synthetic(cfg), strategy, workers)?;
        *out = Box::into_raw(Box::new(results));
        Ok(())
    })
}

/// Number of per-query results; 0 for NULL.
///
/// # Safety
/// `results` must be NULL or a live handle.
#[no_mangle]
pub unsafe extern "C" fn gr_results_len(results: *const GrResults) -> usize {
    results.as_ref().map_or(0, |r| r.results.len())
}

/// Total comparator calls across all queries; 0 for NULL.
///
/// # Safety
/// `results` must be NULL or a live handle.
#[no_mangle]
pub unsafe extern "C" fn gr_results_comparator_calls(results: *const GrResults) -> u64 {
    results
        .as_ref()
        .map_or(0, |r| r.results.iter().map(|x| x.comparator_calls).sum())
}

/// Writes results as JSON lines.
///
/// # Safety
/// `results` must be a live handle; `path` must be NUL-terminated.
#[no_mangle]
pub unsafe extern "C" fn gr_results_save(results: *const GrResults, path: *const c_char) -> GrStatus {
    guard(|| {
        let results = ref_arg(results, "results")?;
        let path = str_arg(path, "path")?;
        save_results(&results.results, path).map_err(|e| {
            let status = match e {
                ResultError::Io { .. } => GrStatus::Io,
                _ => GrStatus::Data,
            };
            (status, e.to_string())
        })
    })
}

/// # Safety
/// `results` must be NULL or a handle not yet freed.
#[no_mangle]
pub unsafe extern "C" fn gr_results_free(results: *mut GrResults) {
    if !results.is_null() {
        drop(Box::from_raw(results));
    }
}

/// Recall@k in percent of `results` against the ground truth in `dataset`.
///
/// # Safety
/// Handles must be live; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn gr_recall_at_k(
    results: *const GrResults,
    dataset: *const GrDataset,
    k: usize,
    out: *mut f64,
) -> GrStatus {
    guard(|| {
        let results = ref_arg(results, "results")?;
        let dataset = ref_arg(dataset, "dataset")?;
        out_arg(out, "out")?;
        if results.results.is_empty() {
            return Err((GrStatus::Empty, "no results".into()));
        }
        let truths = truths_from_lists(&dataset.lists);
        let report = recall_at_k(&results.results, &truths, &[k]).map_err(|e| (GrStatus::Data, e.to_string()))?;
        *out = report.recall(k).expect("requested k is reported");
        Ok(())
    })
}

/// Expected rating from the probabilities of labels "1".."5".
///
/// # Safety
/// `probs` must point to 5 readable doubles; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn gr_expected_likert(probs: *const f64, out: *mut f64) -> GrStatus {
    guard(|| {
        let probs = ref_arg(probs, "probs")?;
        out_arg(out, "out")?;
        let probs = std::slice::from_raw_parts(probs as *const f64, LIKERT_LABELS.len());
        let dist = TokenDistribution {
            probs: LIKERT_LABELS.iter().map(|l| l.to_string()).zip(probs.iter().copied()).collect(),
            position: 0,
        };
        *out = expected_likert(&dist).map_err(|e| (GrStatus::Empty, e.to_string()))?;
        Ok(())
    })
}

/// `yes / (yes + no)`.
///
/// # Safety
/// `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn gr_yes_probability(yes: f64, no: f64, out: *mut f64) -> GrStatus {
    guard(|| {
        out_arg(out, "out")?;
        let dist = TokenDistribution {
            probs: [("Yes".to_string(), yes), ("No".to_string(), no)].into_iter().collect(),
            position: 0,
        };
        *out = yes_probability(&dist).map_err(|e| (GrStatus::Empty, e.to_string()))?;
        Ok(())
    })
}
