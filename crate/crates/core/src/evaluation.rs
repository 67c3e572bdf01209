//! Top-N hit rates, precision/recall/F1 and LoC-bucket breakdowns.
//!
//! All rates are percentages. A sample is a Top-N hit when at least one of
//! its true lines is among the first `N` ranked lines; multi-line samples
//! never count as fractional hits.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::scoring::SuspicionReport;

pub const DEFAULT_TOP_N: [usize; 3] = [1, 3, 5];
pub const DEFAULT_BUCKET_EDGES: [usize; 6] = [0, 40, 80, 120, 200, 300];

pub type Truth = BTreeMap<String, BTreeSet<usize>>;

#[derive(Debug, Error, PartialEq, Eq)]
pub enum EvaluationError {
    #[error("no ground truth for sample {0:?}")]
    MissingTruth(String),
    #[error("no line count for sample {0:?}")]
    MissingLoc(String),
    #[error("bucket edges must be non-empty")]
    EmptyBucketEdges,
    #[error("bucket edges must be strictly increasing")]
    UnorderedBucketEdges,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Averaging {
    /// Pool true/false positives over every line of every sample.
    #[default]
    Micro,
    /// Mean of per-sample precision and recall.
    Macro,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub top_n: BTreeMap<usize, f64>,
    pub sample_count: usize,
    pub averaging: Averaging,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LocBucket {
    /// Inclusive lower bound.
    pub lo: usize,
    /// Exclusive upper bound; `None` is unbounded.
    pub hi: Option<usize>,
    pub samples: usize,
    pub top1_hits: usize,
    pub top1: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LocBucketReport {
    pub buckets: Vec<LocBucket>,
    pub sample_count: usize,
}

/// Harmonic mean, zero when both inputs are zero.
pub fn f1_score(precision: f64, recall: f64) -> f64 {
    if precision + recall > 0.0 {
        2.0 * precision * recall / (precision + recall)
    } else {
        0.0
    }
}

fn truth_of<'a>(truth: &'a Truth, id: &str) -> Result<&'a BTreeSet<usize>, EvaluationError> {
    truth.get(id).ok_or_else(|| EvaluationError::MissingTruth(id.to_string()))
}

fn ratio(num: usize, den: usize) -> f64 {
    if den == 0 {
        0.0
    } else {
        100.0 * num as f64 / den as f64
    }
}

/// Precision, recall and F1 of the thresholded predictions, as percentages.
pub fn precision_recall_f1(
    reports: &[SuspicionReport],
    truth: &Truth,
    averaging: Averaging,
) -> Result<(f64, f64, f64), EvaluationError> {
    let mut counts = Vec::with_capacity(reports.len());
    for r in reports {
        let t = truth_of(truth, &r.sample_id)?;
        let tp = r.predicted.intersection(t).count();
        counts.push((tp, r.predicted.len() - tp, t.len() - tp));
    }
    let (p, r) = match averaging {
        Averaging::Micro => {
            let (tp, fp, fn_) = counts
                .iter()
                .fold((0, 0, 0), |a, c| (a.0 + c.0, a.1 + c.1, a.2 + c.2));
            (ratio(tp, tp + fp), ratio(tp, tp + fn_))
        }
        Averaging::Macro => {
            if counts.is_empty() {
                (0.0, 0.0)
            } else {
                let n = counts.len() as f64;
                let p = counts.iter().map(|c| ratio(c.0, c.0 + c.1)).sum::<f64>() / n;
                let r = counts.iter().map(|c| ratio(c.0, c.0 + c.2)).sum::<f64>() / n;
                (p, r)
            }
        }
    };
    Ok((p, r, f1_score(p, r)))
}

/// Whether any true line is among the first `n` ranked lines.
pub fn is_hit(report: &SuspicionReport, truth: &BTreeSet<usize>, n: usize) -> bool {
    report.ranking.iter().take(n).any(|l| truth.contains(l))
}

pub fn top_n(
    reports: &[SuspicionReport],
    truth: &Truth,
    n_values: &[usize],
) -> Result<BTreeMap<usize, f64>, EvaluationError> {
    let mut hits: BTreeMap<usize, usize> = n_values.iter().map(|&n| (n, 0)).collect();
    for r in reports {
        let t = truth_of(truth, &r.sample_id)?;
        for (&n, h) in hits.iter_mut() {
            if is_hit(r, t, n) {
                *h += 1;
            }
        }
    }
    Ok(hits.into_iter().map(|(n, h)| (n, ratio(h, reports.len()))).collect())
}

pub fn evaluate(
    reports: &[SuspicionReport],
    truth: &Truth,
    n_values: &[usize],
    averaging: Averaging,
) -> Result<MetricReport, EvaluationError> {
    let (precision, recall, f1) = precision_recall_f1(reports, truth, averaging)?;
    Ok(MetricReport {
        precision,
        recall,
        f1,
        top_n: top_n(reports, truth, n_values)?,
        sample_count: reports.len(),
        averaging,
    })
}

/// Top-1 accuracy grouped by line count. Bucket `i` covers
/// `[edges[i], edges[i+1])`, the last bucket is unbounded above, and
/// programs shorter than `edges[0]` fall into the first bucket.
pub fn loc_bucket_accuracy(
    locs: &BTreeMap<String, usize>,
    reports: &[SuspicionReport],
    truth: &Truth,
    edges: &[usize],
) -> Result<LocBucketReport, EvaluationError> {
    if edges.is_empty() {
        return Err(EvaluationError::EmptyBucketEdges);
    }
    if edges.windows(2).any(|w| w[0] >= w[1]) {
        return Err(EvaluationError::UnorderedBucketEdges);
    }
    let mut buckets: Vec<LocBucket> = edges
        .iter()
        .enumerate()
        .map(|(i, &lo)| LocBucket {
            lo,
            hi: edges.get(i + 1).copied(),
            samples: 0,
            top1_hits: 0,
            top1: 0.0,
        })
        .collect();
    for r in reports {
        let t = truth_of(truth, &r.sample_id)?;
        let loc = *locs
            .get(&r.sample_id)
            .ok_or_else(|| EvaluationError::MissingLoc(r.sample_id.clone()))?;
        let idx = edges.partition_point(|&e| e <= loc).saturating_sub(1);
        buckets[idx].samples += 1;
        if is_hit(r, t, 1) {
            buckets[idx].top1_hits += 1;
        }
    }
    for b in &mut buckets {
        b.top1 = ratio(b.top1_hits, b.samples);
    }
    Ok(LocBucketReport {
        buckets,
        sample_count: reports.len(),
    })
}

impl MetricReport {
    /// Aligned two-column text table.
    pub fn to_table(&self) -> String {
        let mut rows = vec![
            ("samples".to_string(), self.sample_count.to_string()),
            ("precision".to_string(), format!("{:.2}", self.precision)),
            ("recall".to_string(), format!("{:.2}", self.recall)),
            ("f1".to_string(), format!("{:.2}", self.f1)),
        ];
        for (n, v) in &self.top_n {
            rows.push((format!("top-{n}"), format!("{v:.2}")));
        }
        let w = rows.iter().map(|(k, _)| k.len()).max().unwrap_or(0);
        let vw = rows.iter().map(|(_, v)| v.len()).max().unwrap_or(0);
        let mut out = String::new();
        for (k, v) in rows {
            writeln!(out, "{k:<w$}  {v:>vw$}").unwrap();
        }
        out
    }
}

impl LocBucketReport {
    pub fn to_csv(&self) -> String {
        let mut out = String::from("lo,hi,samples,top1_hits,top1\n");
        for b in &self.buckets {
            let hi = b.hi.map(|h| h.to_string()).unwrap_or_else(|| "inf".into());
            writeln!(out, "{},{},{},{},{:.4}", b.lo, hi, b.samples, b.top1_hits, b.top1).unwrap();
        }
        out
    }

    pub fn to_table(&self) -> String {
        let mut out = format!("{:<12}{:>9}{:>9}\n", "loc", "samples", "top-1");
        for b in &self.buckets {
            let range = match b.hi {
                Some(h) => format!("{}-{}", b.lo, h - 1),
                None => format!("{}+", b.lo),
            };
            writeln!(out, "{range:<12}{:>9}{:>9.2}", b.samples, b.top1).unwrap();
        }
        out
    }
}
