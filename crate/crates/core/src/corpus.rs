//! Vulnerability datasets: loading, validation, token-budget filtering and
//! fold assignment.
//!
//! Datasets are JSONL, one record per line:
//!
//! ```json
//! {"id": "s1", "language": "c", "code": "a();\nb();", "vuln_lines": [2]}
//! ```

use std::collections::{BTreeMap, BTreeSet, HashSet};
use std::fs::File;
use std::io::{BufRead, BufReader, Write};
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::backend::{BackendError, Tokenize};
use crate::prompting;

/// Default context budget, measured on the rendered base prompt.
pub const DEFAULT_MAX_TOKENS: usize = 4000;

#[derive(Debug, Error)]
pub enum CorpusError {
    #[error("io error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("malformed record at line {line}: {message}")]
    MalformedRecord { line: usize, message: String },
    #[error("duplicate sample id {0:?}")]
    DuplicateId(String),
    #[error("sample {id:?}: vulnerable line {line} outside [1, {loc}]")]
    VulnLineOutOfRange { id: String, line: usize, loc: usize },
    #[error("sample {0:?} has no vulnerable lines")]
    EmptyVulnSet(String),
    #[error("sample {0:?} has no code")]
    EmptySample(String),
    #[error("need at least {k} samples for {k} folds, got {got}")]
    InsufficientSamples { k: usize, got: usize },
    #[error("tokenizer failed: {0}")]
    Backend(#[from] BackendError),
}

/// On-disk record shape.
#[derive(Debug, Clone, Serialize, Deserialize)]
struct SampleRecord {
    id: String,
    language: String,
    code: String,
    vuln_lines: Vec<usize>,
}

/// A vulnerable program with its 1-based vulnerable-line labels.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CodeSample {
    pub id: String,
    pub language: String,
    pub source: String,
    pub lines: Vec<String>,
    pub vuln_lines: BTreeSet<usize>,
}

impl CodeSample {
    /// Builds a validated sample. Duplicate labels collapse into the set.
    pub fn new(
        id: impl Into<String>,
        language: impl Into<String>,
        source: impl Into<String>,
        vuln_lines: impl IntoIterator<Item = usize>,
    ) -> Result<Self, CorpusError> {
        let id = id.into();
        let source = source.into();
        let lines = split_lines(&source);
        let vuln_lines: BTreeSet<usize> = vuln_lines.into_iter().collect();
        if vuln_lines.is_empty() {
            return Err(CorpusError::EmptyVulnSet(id));
        }
        let loc = lines.len();
        if let Some(&line) = vuln_lines.iter().find(|&&l| l == 0 || l > loc) {
            return Err(CorpusError::VulnLineOutOfRange { id, line, loc });
        }
        Ok(Self {
            id,
            language: language.into(),
            source,
            lines,
            vuln_lines,
        })
    }

    pub fn loc(&self) -> usize {
        self.lines.len()
    }

    /// Per-line 0/1 labels in line order.
    pub fn labels(&self) -> Vec<u8> {
        (1..=self.loc())
            .map(|l| u8::from(self.vuln_lines.contains(&l)))
            .collect()
    }
}

/// Splits on `\n`, dropping a `\r` before each break. A trailing newline does
/// not produce a final empty line.
pub fn split_lines(source: &str) -> Vec<String> {
    if source.is_empty() {
        return Vec::new();
    }
    let body = source.strip_suffix('\n').unwrap_or(source);
    body.split('\n')
        .map(|l| l.strip_suffix('\r').unwrap_or(l).to_string())
        .collect()
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> CorpusError + '_ {
    move |source| CorpusError::Io {
        path: path.display().to_string(),
        source,
    }
}

/// Parses a JSONL dataset from any reader. Blank lines are skipped.
pub fn parse_dataset(reader: impl BufRead) -> Result<Vec<CodeSample>, CorpusError> {
    let mut seen = HashSet::new();
    let mut samples = Vec::new();
    for (idx, line) in reader.lines().enumerate() {
        let line_no = idx + 1;
        let line = line.map_err(|e| CorpusError::MalformedRecord {
            line: line_no,
            message: e.to_string(),
        })?;
        if line.trim().is_empty() {
            continue;
        }
        let rec: SampleRecord =
            serde_json::from_str(&line).map_err(|e| CorpusError::MalformedRecord {
                line: line_no,
                message: e.to_string(),
            })?;
        if !seen.insert(rec.id.clone()) {
            return Err(CorpusError::DuplicateId(rec.id));
        }
        samples.push(CodeSample::new(rec.id, rec.language, rec.code, rec.vuln_lines)?);
    }
    Ok(samples)
}

pub fn load_dataset(path: &Path) -> Result<Vec<CodeSample>, CorpusError> {
    let file = File::open(path).map_err(io_err(path))?;
    parse_dataset(BufReader::new(file))
}

pub fn write_dataset(path: &Path, samples: &[CodeSample]) -> Result<(), CorpusError> {
    let mut out = std::io::BufWriter::new(File::create(path).map_err(io_err(path))?);
    for s in samples {
        let rec = SampleRecord {
            id: s.id.clone(),
            language: s.language.clone(),
            code: s.source.clone(),
            vuln_lines: s.vuln_lines.iter().copied().collect(),
        };
        let line = serde_json::to_string(&rec).expect("record serializes");
        writeln!(out, "{line}").map_err(io_err(path))?;
    }
    out.flush().map_err(io_err(path))
}

/// Keeps the samples whose base prompt tokenizes to at most `max_tokens`.
pub fn filter_by_token_budget(
    samples: &[CodeSample],
    tokenizer: &dyn Tokenize,
    max_tokens: usize,
) -> Result<Vec<CodeSample>, CorpusError> {
    let mut kept = Vec::with_capacity(samples.len());
    for s in samples {
        if s.source.is_empty() || s.lines.is_empty() {
            return Err(CorpusError::EmptySample(s.id.clone()));
        }
        let layout = prompting::build_base_prompt(s);
        let tokens = tokenizer.tokenize(&layout.text)?;
        if tokens.num_tokens() <= max_tokens {
            kept.push(s.clone());
        }
    }
    Ok(kept)
}

/// Assignment of sample ids to `k` cross-validation folds.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FoldAssignment {
    pub k: usize,
    pub seed: u64,
    pub assignment: BTreeMap<String, usize>,
}

impl FoldAssignment {
    pub fn fold_of(&self, id: &str) -> Option<usize> {
        self.assignment.get(id).copied()
    }

    pub fn fold_sizes(&self) -> Vec<usize> {
        let mut sizes = vec![0; self.k];
        for &f in self.assignment.values() {
            sizes[f] += 1;
        }
        sizes
    }

    /// Splits `samples` into (train, held-out) for fold `fold`, keeping input order.
    pub fn split<'a>(
        &self,
        samples: &'a [CodeSample],
        fold: usize,
    ) -> (Vec<&'a CodeSample>, Vec<&'a CodeSample>) {
        samples
            .iter()
            .partition(|s| self.fold_of(&s.id) != Some(fold))
    }
}

/// Seeded permutation dealt round-robin into `k` folds, so fold sizes differ
/// by at most one.
pub fn make_folds(samples: &[CodeSample], k: usize, seed: u64) -> Result<FoldAssignment, CorpusError> {
    if k == 0 || samples.len() < k {
        return Err(CorpusError::InsufficientSamples {
            k,
            got: samples.len(),
        });
    }
    let mut order: Vec<usize> = (0..samples.len()).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    order.shuffle(&mut rng);
    let assignment = order
        .iter()
        .enumerate()
        .map(|(pos, &idx)| (samples[idx].id.clone(), pos % k))
        .collect();
    Ok(FoldAssignment { k, seed, assignment })
}

pub fn write_folds(path: &Path, folds: &FoldAssignment) -> Result<(), CorpusError> {
    let json = serde_json::to_string_pretty(folds).expect("folds serialize");
    std::fs::write(path, json).map_err(io_err(path))
}

pub fn read_folds(path: &Path) -> Result<FoldAssignment, CorpusError> {
    let text = std::fs::read_to_string(path).map_err(io_err(path))?;
    serde_json::from_str(&text).map_err(|e| CorpusError::MalformedRecord {
        line: e.line(),
        message: e.to_string(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn parse(text: &str) -> Result<Vec<CodeSample>, CorpusError> {
        parse_dataset(text.as_bytes())
    }

    #[test]
    fn parses_minimal_record() {
        let s = parse(r#"{"id":"s1","language":"c","code":"a();\nb();","vuln_lines":[2]}"#).unwrap();
        assert_eq!(s.len(), 1);
        assert_eq!(s[0].loc(), 2);
        assert_eq!(s[0].lines, vec!["a();", "b();"]);
        assert_eq!(s[0].labels(), vec![0, 1]);
    }

    #[test]
    fn rejects_out_of_range_line() {
        let err = parse(r#"{"id":"s1","language":"c","code":"a();\nb();","vuln_lines":[5]}"#).unwrap_err();
        assert!(matches!(err, CorpusError::VulnLineOutOfRange { line: 5, loc: 2, .. }));
        let err = parse(r#"{"id":"s1","language":"c","code":"a();","vuln_lines":[0]}"#).unwrap_err();
        assert!(matches!(err, CorpusError::VulnLineOutOfRange { line: 0, .. }));
    }

    #[test]
    fn rejects_empty_vuln_set_duplicates_and_garbage() {
        let err = parse(r#"{"id":"s1","language":"c","code":"a();","vuln_lines":[]}"#).unwrap_err();
        assert!(matches!(err, CorpusError::EmptyVulnSet(_)));

        let rec = r#"{"id":"s1","language":"c","code":"a();","vuln_lines":[1]}"#;
        let err = parse(&format!("{rec}\n{rec}\n")).unwrap_err();
        assert!(matches!(err, CorpusError::DuplicateId(id) if id == "s1"));

        let err = parse("{not json").unwrap_err();
        assert!(matches!(err, CorpusError::MalformedRecord { line: 1, .. }));
        let err = parse(r#"{"id":"s1","language":"c","vuln_lines":[1]}"#).unwrap_err();
        assert!(matches!(err, CorpusError::MalformedRecord { .. }));
    }

    #[test]
    fn line_splitting_rules() {
        assert_eq!(split_lines("a\r\nb\r\n"), vec!["a", "b"]);
        assert_eq!(split_lines("a\n\nb"), vec!["a", "", "b"]);
        assert_eq!(split_lines("a\n\n"), vec!["a", ""]);
        assert!(split_lines("").is_empty());
    }

    fn samples(n: usize) -> Vec<CodeSample> {
        (0..n)
            .map(|i| CodeSample::new(format!("s{i}"), "c", "x;\ny;", [1]).unwrap())
            .collect()
    }

    #[test]
    fn even_folds() {
        let folds = make_folds(&samples(10), 5, 7).unwrap();
        assert_eq!(folds.fold_sizes(), vec![2; 5]);
        assert_eq!(folds, make_folds(&samples(10), 5, 7).unwrap());
        assert!(matches!(
            make_folds(&samples(3), 5, 7),
            Err(CorpusError::InsufficientSamples { k: 5, got: 3 })
        ));
    }

    #[test]
    fn fold_split_partitions() {
        let s = samples(11);
        let folds = make_folds(&s, 5, 1).unwrap();
        let mut held_total = 0;
        for f in 0..5 {
            let (train, held) = folds.split(&s, f);
            assert_eq!(train.len() + held.len(), 11);
            held_total += held.len();
        }
        assert_eq!(held_total, 11);
        let sizes = folds.fold_sizes();
        assert!(sizes.iter().max().unwrap() - sizes.iter().min().unwrap() <= 1);
    }
}
