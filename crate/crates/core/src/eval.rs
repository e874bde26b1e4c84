//! Recall@k, score-separability statistics, and report emission.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::datamodel::{write_atomic, CandidateList, RerankResult};
use crate::simbackend::SweepRow;

pub const DEFAULT_KS: [usize; 3] = [1, 3, 5];
pub const HISTOGRAM_BINS: usize = 20;

#[derive(Debug, Error)]
pub enum EvalError {
    #[error("no ground-truth entry for query '{0}'")]
    MissingTruth(String),
    #[error("k must be at least 1")]
    BadK,
    #[error("no results to evaluate")]
    Empty,
    #[error("degenerate score range [{0}, {1}]")]
    DegenerateRange(f64, f64),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

/// Query id to ground-truth id; `None` when the query has no known match.
pub type Truths = BTreeMap<String, Option<String>>;

pub fn truths_from_lists(lists: &[CandidateList]) -> Truths {
    lists
        .iter()
        .map(|l| (l.query.id.clone(), l.ground_truth_id.clone()))
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RecallAtK {
    pub k: usize,
    pub hits: usize,
    /// Percent of queries with a hit.
    pub recall: f64,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct DiagnosticTotals {
    pub parse_failures: u64,
    pub fallbacks: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    /// Strategy name, or `baseline` for the first-stage order.
    pub strategy: String,
    pub n_queries: usize,
    pub per_k: Vec<RecallAtK>,
    pub mean_calls: f64,
    pub max_calls: u64,
    pub diagnostics: DiagnosticTotals,
}

impl EvalReport {
    pub fn recall(&self, k: usize) -> Option<f64> {
        self.per_k.iter().find(|r| r.k == k).map(|r| r.recall)
    }

    pub fn hits(&self, k: usize) -> Option<usize> {
        self.per_k.iter().find(|r| r.k == k).map(|r| r.hits)
    }
}

/// One ranked list to be scored, borrowed from a result or a candidate list.
pub struct RankedView<'a> {
    pub query_id: &'a str,
    pub order: Vec<&'a str>,
    pub comparator_calls: u64,
    pub parse_failures: u64,
    pub fallbacks: u64,
}

impl<'a> From<&'a RerankResult> for RankedView<'a> {
    fn from(r: &'a RerankResult) -> Self {
        RankedView {
            query_id: &r.query_id,
            order: r.order.iter().map(String::as_str).collect(),
            comparator_calls: r.comparator_calls,
            parse_failures: r.diagnostics.parse_failures,
            fallbacks: r.diagnostics.fallbacks,
        }
    }
}

impl<'a> From<&'a CandidateList> for RankedView<'a> {
    fn from(l: &'a CandidateList) -> Self {
        RankedView {
            query_id: &l.query.id,
            order: l.candidates.iter().map(|c| c.id.as_str()).collect(),
            comparator_calls: 0,
            parse_failures: 0,
            fallbacks: 0,
        }
    }
}

/// A query is a hit at `k` iff its ground truth is within the first `k`
/// positions; an unknown or absent ground truth is a miss at every `k`.
pub fn recall_over<'a>(
    label: &str,
    views: impl IntoIterator<Item = RankedView<'a>>,
    truths: &Truths,
    ks: &[usize],
) -> Result<EvalReport, EvalError> {
    if ks.contains(&0) {
        return Err(EvalError::BadK);
    }
    let mut ks: Vec<usize> = ks.to_vec();
    ks.sort_unstable();
    ks.dedup();
    let mut hits = vec![0usize; ks.len()];
    let mut n = 0usize;
    let mut total_calls = 0u64;
    let mut max_calls = 0u64;
    let mut diagnostics = DiagnosticTotals::default();
    for view in views {
        let truth = truths
            .get(view.query_id)
            .ok_or_else(|| EvalError::MissingTruth(view.query_id.to_string()))?;
        n += 1;
        total_calls += view.comparator_calls;
        max_calls = max_calls.max(view.comparator_calls);
        diagnostics.parse_failures += view.parse_failures;
        diagnostics.fallbacks += view.fallbacks;
        let position = truth
            .as_deref()
            .and_then(|gt| view.order.iter().position(|id| *id == gt))
            .map(|p| p + 1);
        if let Some(pos) = position {
            for (h, &k) in hits.iter_mut().zip(&ks) {
                if pos <= k {
                    *h += 1;
                }
            }
        }
    }
    if n == 0 {
        return Err(EvalError::Empty);
    }
    let per_k = ks
        .iter()
        .zip(hits)
        .map(|(&k, h)| RecallAtK {
            k,
            hits: h,
            recall: 100.0 * h as f64 / n as f64,
        })
        .collect();
    Ok(EvalReport {
        strategy: label.to_string(),
        n_queries: n,
        per_k,
        mean_calls: total_calls as f64 / n as f64,
        max_calls,
        diagnostics,
    })
}

/// Recall@k over rerank results, labelled with the first result's strategy.
pub fn recall_at_k(
    results: &[RerankResult],
    truths: &Truths,
    ks: &[usize],
) -> Result<EvalReport, EvalError> {
    let label = results.first().ok_or(EvalError::Empty)?.strategy.to_string();
    recall_over(&label, results.iter().map(RankedView::from), truths, ks)
}

/// Recall@k of the first-stage order.
pub fn baseline_report(lists: &[CandidateList], ks: &[usize]) -> Result<EvalReport, EvalError> {
    recall_over(
        "baseline",
        lists.iter().map(RankedView::from),
        &truths_from_lists(lists),
        ks,
    )
}

pub fn report_json(report: &EvalReport) -> Result<String, EvalError> {
    Ok(serde_json::to_string_pretty(report)? + "\n")
}

/// Table with one row per report. Columns beyond the fixed set appear only
/// for `k` values other than 1, 3 and 5.
pub fn reports_csv(reports: &[EvalReport]) -> String {
    let mut extra: Vec<usize> = reports
        .iter()
        .flat_map(|r| r.per_k.iter().map(|x| x.k))
        .filter(|k| !DEFAULT_KS.contains(k))
        .collect();
    extra.sort_unstable();
    extra.dedup();
    let mut out = String::from("strategy,R@1,R@3,R@5,n,mean_calls,max_calls,parse_failures");
    for k in &extra {
        let _ = write!(out, ",R@{k}");
    }
    out.push('\n');
    let cell = |r: &EvalReport, k: usize| r.recall(k).map(|v| format!("{v:.2}")).unwrap_or_default();
    for r in reports {
        let _ = write!(
            out,
            "{},{},{},{},{},{:.2},{},{}",
            r.strategy,
            cell(r, 1),
            cell(r, 3),
            cell(r, 5),
            r.n_queries,
            r.mean_calls,
            r.max_calls,
            r.diagnostics.parse_failures
        );
        for &k in &extra {
            let _ = write!(out, ",{}", cell(r, k));
        }
        out.push('\n');
    }
    out
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ReportFormat {
    Json,
    Csv,
}

pub fn emit_report(report: &EvalReport, format: ReportFormat, path: impl AsRef<Path>) -> Result<(), EvalError> {
    let text = match format {
        ReportFormat::Json => report_json(report)?,
        ReportFormat::Csv => reports_csv(std::slice::from_ref(report)),
    };
    write_atomic(path, text.as_bytes())?;
    Ok(())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassSummary {
    pub count: usize,
    pub mean: Option<f64>,
    pub std: Option<f64>,
    /// Fraction of the class per bin; absent for an empty class.
    pub histogram: Option<Vec<f64>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoreDistributionSummary {
    pub label: String,
    pub range: (f64, f64),
    pub correct: ClassSummary,
    pub incorrect: ClassSummary,
    /// Sum over bins of the smaller class fraction; absent if a class is empty.
    pub overlap_coefficient: Option<f64>,
}

fn bin_of(value: f64, lo: f64, hi: f64) -> usize {
    let t = (value - lo) / (hi - lo);
    let idx = (t * HISTOGRAM_BINS as f64).floor();
    if idx.is_nan() || idx < 0.0 {
        0
    } else {
        (idx as usize).min(HISTOGRAM_BINS - 1)
    }
}

fn summarize(values: &[f64], lo: f64, hi: f64) -> ClassSummary {
    if values.is_empty() {
        return ClassSummary {
            count: 0,
            mean: None,
            std: None,
            histogram: None,
        };
    }
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let var = values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
    let mut counts = vec![0usize; HISTOGRAM_BINS];
    for &v in values {
        counts[bin_of(v, lo, hi)] += 1;
    }
    ClassSummary {
        count: values.len(),
        mean: Some(mean),
        std: Some(var.sqrt()),
        histogram: Some(counts.into_iter().map(|c| c as f64 / n).collect()),
    }
}

pub fn overlap_coefficient(a: &[f64], b: &[f64]) -> f64 {
    a.iter()
        .zip(b)
        .map(|(x, y)| x.min(*y))
        .sum::<f64>()
        .clamp(0.0, 1.0)
}

/// Per-class mean, population standard deviation and a 20-bin histogram
/// over `range` (bins right-open except the last).
pub fn class_stats(
    label: &str,
    scores: &[(f64, bool)],
    range: (f64, f64),
) -> Result<ScoreDistributionSummary, EvalError> {
    let (lo, hi) = range;
    if !lo.is_finite() || !hi.is_finite() || hi <= lo {
        return Err(EvalError::DegenerateRange(lo, hi));
    }
    let correct: Vec<f64> = scores.iter().filter(|s| s.1).map(|s| s.0).collect();
    let incorrect: Vec<f64> = scores.iter().filter(|s| !s.1).map(|s| s.0).collect();
    let correct = summarize(&correct, lo, hi);
    let incorrect = summarize(&incorrect, lo, hi);
    let overlap = match (&correct.histogram, &incorrect.histogram) {
        (Some(a), Some(b)) => Some(overlap_coefficient(a, b)),
        _ => None,
    };
    Ok(ScoreDistributionSummary {
        label: label.to_string(),
        range,
        correct,
        incorrect,
        overlap_coefficient: overlap,
    })
}

fn svg_escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;")
}

/// Overlaid class histograms as a static SVG document.
pub fn histogram_svg(summary: &ScoreDistributionSummary) -> String {
    const W: f64 = 640.0;
    const H: f64 = 360.0;
    const LEFT: f64 = 50.0;
    const BOTTOM: f64 = 40.0;
    const TOP: f64 = 40.0;
    let plot_w = W - LEFT - 20.0;
    let plot_h = H - TOP - BOTTOM;
    let peak = [&summary.correct, &summary.incorrect]
        .iter()
        .filter_map(|c| c.histogram.as_ref())
        .flat_map(|h| h.iter().copied())
        .fold(0.0f64, f64::max)
        .max(1e-12);
    let bin_w = plot_w / HISTOGRAM_BINS as f64;
    let mut s = String::new();
    let _ = writeln!(
        s,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{W}" height="{H}" viewBox="0 0 {W} {H}">"#
    );
    let _ = writeln!(s, r#"<rect x="0" y="0" width="{W}" height="{H}" fill="white"/>"#);
    let overlap = summary
        .overlap_coefficient
        .map(|o| format!("{o:.3}"))
        .unwrap_or_else(|| "n/a".into());
    let _ = writeln!(
        s,
        r#"<text x="{LEFT}" y="22" font-family="sans-serif" font-size="14">{} (overlap {overlap})</text>"#,
        svg_escape(&summary.label)
    );
    for (class, color) in [(&summary.incorrect, "#d62728"), (&summary.correct, "#1f77b4")] {
        let Some(h) = &class.histogram else { continue };
        for (i, v) in h.iter().enumerate() {
            if *v <= 0.0 {
                continue;
            }
            let bh = plot_h * v / peak;
            let _ = writeln!(
                s,
                r#"<rect x="{:.2}" y="{:.2}" width="{:.2}" height="{:.2}" fill="{color}" fill-opacity="0.5"/>"#,
                LEFT + i as f64 * bin_w,
                TOP + plot_h - bh,
                bin_w,
                bh
            );
        }
    }
    let base = TOP + plot_h;
    let _ = writeln!(
        s,
        r##"<line x1="{LEFT}" y1="{base}" x2="{:.2}" y2="{base}" stroke="#000"/>"##,
        LEFT + plot_w
    );
    let _ = writeln!(
        s,
        r##"<line x1="{LEFT}" y1="{TOP}" x2="{LEFT}" y2="{base}" stroke="#000"/>"##
    );
    let (lo, hi) = summary.range;
    let _ = writeln!(
        s,
        r#"<text x="{LEFT}" y="{:.2}" font-family="sans-serif" font-size="11">{lo}</text>"#,
        base + 16.0
    );
    let _ = writeln!(
        s,
        r#"<text x="{:.2}" y="{:.2}" font-family="sans-serif" font-size="11" text-anchor="end">{hi}</text>"#,
        LEFT + plot_w,
        base + 16.0
    );
    let _ = writeln!(
        s,
        r#"<text x="{:.2}" y="{:.2}" font-family="sans-serif" font-size="11" text-anchor="end">{peak:.3}</text>"#,
        LEFT - 4.0,
        TOP + 10.0
    );
    let legend_x = W - 190.0;
    for (i, (name, class, color)) in [
        ("correct", &summary.correct, "#1f77b4"),
        ("incorrect", &summary.incorrect, "#d62728"),
    ]
    .into_iter()
    .enumerate()
    {
        let y = TOP + 6.0 + i as f64 * 18.0;
        let _ = writeln!(
            s,
            r#"<rect x="{legend_x}" y="{y}" width="12" height="12" fill="{color}" fill-opacity="0.5"/>"#
        );
        let _ = writeln!(
            s,
            r#"<text x="{}" y="{}" font-family="sans-serif" font-size="12">{name} (n={})</text>"#,
            legend_x + 18.0,
            y + 10.0,
            class.count
        );
    }
    s.push_str("</svg>\n");
    s
}

pub fn emit_histogram_svg(summary: &ScoreDistributionSummary, path: impl AsRef<Path>) -> Result<(), EvalError> {
    write_atomic(path, histogram_svg(summary).as_bytes())?;
    Ok(())
}

pub fn sweep_csv(rows: &[SweepRow]) -> String {
    let mut out = String::from("p,mean_R@1,mean_R@3,mean_R@5,mean_calls\n");
    for r in rows {
        let _ = writeln!(
            out,
            "{},{:.2},{:.2},{:.2},{:.2}",
            r.p, r.mean_r1, r.mean_r3, r.mean_r5, r.mean_calls
        );
    }
    out
}

/// Recall-versus-flip-probability line chart.
pub fn sweep_svg(rows: &[SweepRow]) -> String {
    const W: f64 = 640.0;
    const H: f64 = 360.0;
    const LEFT: f64 = 50.0;
    const TOP: f64 = 30.0;
    let plot_w = W - LEFT - 30.0;
    let plot_h = H - TOP - 40.0;
    let p_max = rows.iter().map(|r| r.p).fold(0.0f64, f64::max).max(1e-12);
    let x = |p: f64| LEFT + plot_w * p / p_max;
    let y = |v: f64| TOP + plot_h * (1.0 - v / 100.0);
    let mut s = String::new();
    let _ = writeln!(
        s,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{W}" height="{H}" viewBox="0 0 {W} {H}">"#
    );
    let _ = writeln!(s, r#"<rect x="0" y="0" width="{W}" height="{H}" fill="white"/>"#);
    let base = TOP + plot_h;
    let _ = writeln!(
        s,
        r##"<line x1="{LEFT}" y1="{base}" x2="{:.2}" y2="{base}" stroke="#000"/>"##,
        LEFT + plot_w
    );
    let _ = writeln!(s, r##"<line x1="{LEFT}" y1="{TOP}" x2="{LEFT}" y2="{base}" stroke="#000"/>"##);
    type Series = (&'static str, &'static str, fn(&SweepRow) -> f64);
    let series: [Series; 3] = [
        ("R@1", "#1f77b4", |r| r.mean_r1),
        ("R@3", "#ff7f0e", |r| r.mean_r3),
        ("R@5", "#2ca02c", |r| r.mean_r5),
    ];
    for (i, (name, color, get)) in series.iter().enumerate() {
        let pts: Vec<String> = rows
            .iter()
            .map(|r| format!("{:.2},{:.2}", x(r.p), y(get(r))))
            .collect();
        let _ = writeln!(
            s,
            r#"<polyline points="{}" fill="none" stroke="{color}" stroke-width="2"/>"#,
            pts.join(" ")
        );
        let ly = TOP + 10.0 + i as f64 * 16.0;
        let _ = writeln!(
            s,
            r#"<text x="{:.2}" y="{ly}" font-family="sans-serif" font-size="12" fill="{color}">{name}</text>"#,
            W - 70.0
        );
    }
    let _ = writeln!(
        s,
        r#"<text x="{:.2}" y="{:.2}" font-family="sans-serif" font-size="11" text-anchor="middle">flip probability</text>"#,
        LEFT + plot_w / 2.0,
        H - 8.0
    );
    s.push_str("</svg>\n");
    s
}
