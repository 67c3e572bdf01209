//! Suspicion reports: per-line scores, a total ranking and a thresholded
//! prediction set.
//!
//! Two score sources exist. The classifier emits probabilities; the baseline
//! aggregates `k` recorded LLM answers, each a list of claimed lines:
//!
//! ```text
//! score(m) = 1/k * Σ_i [m ∈ r_i] / |r_i|
//! ```

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::fs::File;
use std::io::{BufRead, BufReader, Write};
use std::path::Path;

use num_bigint::BigInt;
use num_rational::BigRational;
use num_traits::{ToPrimitive, Zero};
use serde::{Deserialize, Serialize};
use thiserror::Error;

pub const DEFAULT_THRESHOLD: f64 = 0.5;
pub const DEFAULT_BASELINE_RUNS: usize = 10;

#[derive(Debug, Error)]
pub enum ScoringError {
    #[error("sample {id:?}: line {line} outside [1, {loc}]")]
    LineOutOfRange { id: String, line: usize, loc: usize },
    #[error("output-order tie rule needs the recorded runs")]
    MissingTieContext,
    #[error("sample {0:?} has no runs")]
    NoRuns(String),
    #[error("{path}: {message}")]
    File { path: String, message: String },
}

/// `k` recorded answers for one sample.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RunOutputs {
    #[serde(rename = "id")]
    pub sample_id: String,
    pub runs: Vec<Vec<usize>>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ReportSource {
    Baseline,
    Classifier,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TieRule {
    /// Earlier first appearance across the runs (run 1 first) ranks higher.
    OutputOrder,
    LineAscending,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SuspicionReport {
    pub sample_id: String,
    pub source: ReportSource,
    /// `scores[m - 1]` is the score of line `m`.
    pub scores: Vec<f64>,
    pub ranking: Vec<usize>,
    pub predicted: BTreeSet<usize>,
}

#[derive(Serialize, Deserialize)]
struct ReportRecord {
    id: String,
    source: ReportSource,
    scores: BTreeMap<usize, f64>,
    ranking: Vec<usize>,
    predicted: Vec<usize>,
}

fn check_runs(runs: &RunOutputs, loc: usize) -> Result<(), ScoringError> {
    if runs.runs.is_empty() {
        return Err(ScoringError::NoRuns(runs.sample_id.clone()));
    }
    for r in &runs.runs {
        if let Some(&line) = r.iter().find(|&&l| l == 0 || l > loc) {
            return Err(ScoringError::LineOutOfRange {
                id: runs.sample_id.clone(),
                line,
                loc,
            });
        }
    }
    Ok(())
}

/// Exact rational baseline scores, one per line.
///
/// Duplicates within a run count once; an empty run adds nothing but still
/// counts towards `k`.
pub fn baseline_score_exact(runs: &RunOutputs, loc: usize) -> Result<Vec<BigRational>, ScoringError> {
    check_runs(runs, loc)?;
    let mut scores = vec![BigRational::zero(); loc];
    for r in &runs.runs {
        let distinct: BTreeSet<usize> = r.iter().copied().collect();
        if distinct.is_empty() {
            continue;
        }
        let share = BigRational::new(BigInt::from(1), BigInt::from(distinct.len()));
        for line in distinct {
            scores[line - 1] += &share;
        }
    }
    let k = BigInt::from(runs.runs.len());
    Ok(scores.into_iter().map(|s| s / &k).collect())
}

/// Baseline scores as `f64`. Mathematically equal scores convert to
/// identical floats, so ties are exact.
pub fn baseline_score(runs: &RunOutputs, loc: usize) -> Result<Vec<f64>, ScoringError> {
    Ok(baseline_score_exact(runs, loc)?
        .iter()
        .map(|s| s.to_f64().unwrap_or(0.0))
        .collect())
}

/// First `(run, position)` at which each line was output.
fn first_appearance(runs: &RunOutputs) -> HashMap<usize, (usize, usize)> {
    let mut first = HashMap::new();
    for (ri, r) in runs.runs.iter().enumerate() {
        for (pos, &line) in r.iter().enumerate() {
            first.entry(line).or_insert((ri, pos));
        }
    }
    first
}

/// Lines ordered by descending score, ties broken by `tie_rule`, then by
/// line number.
pub fn rank(scores: &[f64], tie_rule: TieRule, runs: Option<&RunOutputs>) -> Result<Vec<usize>, ScoringError> {
    let mut lines: Vec<usize> = (1..=scores.len()).collect();
    match tie_rule {
        TieRule::LineAscending => {
            lines.sort_by(|&a, &b| scores[b - 1].total_cmp(&scores[a - 1]).then(a.cmp(&b)));
        }
        TieRule::OutputOrder => {
            let first = first_appearance(runs.ok_or(ScoringError::MissingTieContext)?);
            let key = |l: usize| first.get(&l).copied().unwrap_or((usize::MAX, usize::MAX));
            lines.sort_by(|&a, &b| {
                scores[b - 1]
                    .total_cmp(&scores[a - 1])
                    .then(key(a).cmp(&key(b)))
                    .then(a.cmp(&b))
            });
        }
    }
    Ok(lines)
}

/// `{m : score(m) > threshold}`.
pub fn classify_threshold(scores: &[f64], threshold: f64) -> BTreeSet<usize> {
    scores
        .iter()
        .enumerate()
        .filter(|(_, &s)| s > threshold)
        .map(|(i, _)| i + 1)
        .collect()
}

pub fn classifier_report(sample_id: &str, scores: Vec<f64>, threshold: f64) -> SuspicionReport {
    let ranking = rank(&scores, TieRule::LineAscending, None).expect("line-ascending needs no context");
    let predicted = classify_threshold(&scores, threshold);
    SuspicionReport {
        sample_id: sample_id.to_string(),
        source: ReportSource::Classifier,
        scores,
        ranking,
        predicted,
    }
}

pub fn baseline_report(runs: &RunOutputs, loc: usize, threshold: f64) -> Result<SuspicionReport, ScoringError> {
    let scores = baseline_score(runs, loc)?;
    let ranking = rank(&scores, TieRule::OutputOrder, Some(runs))?;
    let predicted = classify_threshold(&scores, threshold);
    Ok(SuspicionReport {
        sample_id: runs.sample_id.clone(),
        source: ReportSource::Baseline,
        scores,
        ranking,
        predicted,
    })
}

impl SuspicionReport {
    pub fn to_json_line(&self) -> String {
        let rec = ReportRecord {
            id: self.sample_id.clone(),
            source: self.source,
            scores: self.scores.iter().enumerate().map(|(i, &s)| (i + 1, s)).collect(),
            ranking: self.ranking.clone(),
            predicted: self.predicted.iter().copied().collect(),
        };
        serde_json::to_string(&rec).expect("report serializes")
    }

    pub fn from_json_line(line: &str) -> Result<Self, String> {
        let rec: ReportRecord = serde_json::from_str(line).map_err(|e| e.to_string())?;
        let loc = rec.scores.len();
        if rec.scores.keys().copied().ne(1..=loc) {
            return Err(format!("{}: score keys must be 1..={loc}", rec.id));
        }
        let mut sorted = rec.ranking.clone();
        sorted.sort_unstable();
        if sorted.into_iter().ne(1..=loc) {
            return Err(format!("{}: ranking is not a permutation of 1..={loc}", rec.id));
        }
        if rec.predicted.iter().any(|&l| l == 0 || l > loc) {
            return Err(format!("{}: predicted line outside 1..={loc}", rec.id));
        }
        Ok(Self {
            sample_id: rec.id,
            source: rec.source,
            scores: rec.scores.into_values().collect(),
            ranking: rec.ranking,
            predicted: rec.predicted.into_iter().collect(),
        })
    }
}

fn file_err(path: &Path) -> impl Fn(String) -> ScoringError + '_ {
    move |message| ScoringError::File {
        path: path.display().to_string(),
        message,
    }
}

fn read_jsonl<T>(path: &Path, parse: impl Fn(&str) -> Result<T, String>) -> Result<Vec<T>, ScoringError> {
    let err = file_err(path);
    let file = File::open(path).map_err(|e| err(e.to_string()))?;
    let mut out = Vec::new();
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| err(e.to_string()))?;
        if line.trim().is_empty() {
            continue;
        }
        out.push(parse(&line).map_err(|m| err(format!("line {}: {m}", i + 1)))?);
    }
    Ok(out)
}

pub fn read_reports(path: &Path) -> Result<Vec<SuspicionReport>, ScoringError> {
    read_jsonl(path, SuspicionReport::from_json_line)
}

pub fn write_reports(path: &Path, reports: &[SuspicionReport]) -> Result<(), ScoringError> {
    let err = file_err(path);
    let mut out = std::io::BufWriter::new(File::create(path).map_err(|e| err(e.to_string()))?);
    for r in reports {
        writeln!(out, "{}", r.to_json_line()).map_err(|e| err(e.to_string()))?;
    }
    out.flush().map_err(|e| err(e.to_string()))
}

pub fn read_run_outputs(path: &Path) -> Result<Vec<RunOutputs>, ScoringError> {
    read_jsonl(path, |l| serde_json::from_str(l).map_err(|e| e.to_string()))
}
