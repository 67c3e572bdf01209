//! Attention streams to per-line matrices.
//!
//! For a prompt, the last query token's attention is summed over heads and
//! then over the tokens of each prompt line, giving a `(lines × layers)`
//! [`LayerwiseAttnMat`]. The highlighted prompt's matrix minus the base
//! prompt's is the [`DiffAttnMat`]; its instruction rows plus the highlighted
//! line's row form the [`VulnAttnMat`], which is flattened into the
//! classifier's per-line feature vector.

use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::backend::{BackendError, LastTokenRows};
use crate::matrix::Matrix;
use crate::prompting::LineTokenSpans;

#[derive(Debug, Error)]
pub enum ReductionError {
    #[error("line spans cover {spans} tokens but the attention stream has {stream}")]
    TokenCountMismatch { spans: usize, stream: usize },
    #[error("shape mismatch: {left:?} vs {right:?}")]
    ShapeMismatch {
        left: (usize, usize),
        right: (usize, usize),
    },
    #[error("prompt line {line} outside [1, {lines}]")]
    IndexOutOfRange { line: usize, lines: usize },
    #[error("highlighted prompt line {0} is also an instruction line")]
    HighlightedIsInstruction(usize),
    #[error(transparent)]
    Backend(#[from] BackendError),
    #[error("io error on {path}: {message}")]
    Io { path: String, message: String },
}

/// `(num_prompt_lines × num_layers)`; column sums equal `num_heads`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct LayerwiseAttnMat(pub Matrix);

/// Highlighted minus base, same shape as both.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct DiffAttnMat(pub Matrix);

/// `(num_instruction_lines + 1) × num_layers`: instruction rows in prompt
/// order, then the highlighted line's row.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct VulnAttnMat(pub Matrix);

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FlattenStrategy {
    /// Row-major flattening, length `rows × layers`.
    Layerwise,
    /// Mean over layers per row, length `rows`.
    AvgPool,
}

/// Sums last-token attention per prompt line and layer, reading one row at a
/// time from `source`. Accumulates in `f64`.
pub fn layerwise_attn_mat(
    source: &mut dyn LastTokenRows,
    spans: &LineTokenSpans,
) -> Result<LayerwiseAttnMat, ReductionError> {
    let t = source.num_tokens();
    if spans.num_tokens != t {
        return Err(ReductionError::TokenCountMismatch {
            spans: spans.num_tokens,
            stream: t,
        });
    }
    let covered = spans.spans.last().map_or(0, |r| r.end);
    if covered != t {
        return Err(ReductionError::TokenCountMismatch {
            spans: covered,
            stream: t,
        });
    }
    let layers = source.descriptor().num_layers;
    let lines = spans.num_lines();
    let mut out = Matrix::zeros(lines, layers);
    source.visit_last_rows(&mut |layer, row| {
        for (line, range) in spans.spans.iter().enumerate() {
            let mass: f64 = row[range.clone()].iter().map(|&v| f64::from(v)).sum();
            let cell = out.get(line, layer) + mass;
            out.set(line, layer, cell);
        }
    })?;
    let empty = spans.spans.iter().filter(|r| r.is_empty()).count();
    if empty > 0 {
        log::debug!("{empty} prompt line(s) own no tokens; their attention rows are zero");
    }
    Ok(LayerwiseAttnMat(out))
}

pub fn diff_attn_mat(
    highlighted: &LayerwiseAttnMat,
    base: &LayerwiseAttnMat,
) -> Result<DiffAttnMat, ReductionError> {
    let (h, b) = (&highlighted.0, &base.0);
    if h.shape() != b.shape() {
        return Err(ReductionError::ShapeMismatch {
            left: h.shape(),
            right: b.shape(),
        });
    }
    let data = h
        .as_slice()
        .iter()
        .zip(b.as_slice())
        .map(|(x, y)| x - y)
        .collect();
    Ok(DiffAttnMat(Matrix::from_vec(h.rows(), h.cols(), data).unwrap()))
}

/// Selects the instruction rows and the highlighted row (1-based prompt lines).
pub fn vuln_attn_mat(
    diff: &DiffAttnMat,
    instruction_lines: &[usize],
    highlighted_prompt_line: usize,
) -> Result<VulnAttnMat, ReductionError> {
    let m = &diff.0;
    let lines = m.rows();
    if instruction_lines.contains(&highlighted_prompt_line) {
        return Err(ReductionError::HighlightedIsInstruction(highlighted_prompt_line));
    }
    let rows: Vec<Vec<f64>> = instruction_lines
        .iter()
        .chain(std::iter::once(&highlighted_prompt_line))
        .map(|&line| {
            if line == 0 || line > lines {
                Err(ReductionError::IndexOutOfRange { line, lines })
            } else {
                Ok(m.row(line - 1).to_vec())
            }
        })
        .collect::<Result<_, _>>()?;
    Ok(VulnAttnMat(
        Matrix::from_rows(&rows).unwrap_or_else(|| Matrix::zeros(rows.len(), m.cols())),
    ))
}

pub fn flatten(v: &VulnAttnMat, strategy: FlattenStrategy) -> Vec<f64> {
    let m = &v.0;
    match strategy {
        FlattenStrategy::Layerwise => m.as_slice().to_vec(),
        FlattenStrategy::AvgPool => (0..m.rows())
            .map(|r| {
                let row = m.row(r);
                if row.is_empty() {
                    0.0
                } else {
                    row.iter().sum::<f64>() / row.len() as f64
                }
            })
            .collect(),
    }
}

pub fn feature_len(num_instruction_lines: usize, num_layers: usize, strategy: FlattenStrategy) -> usize {
    match strategy {
        FlattenStrategy::Layerwise => (num_instruction_lines + 1) * num_layers,
        FlattenStrategy::AvgPool => num_instruction_lines + 1,
    }
}

pub fn write_matrix_json(path: &Path, m: &Matrix) -> Result<(), ReductionError> {
    let json = serde_json::to_string(m).expect("matrix serializes");
    std::fs::write(path, json).map_err(|e| ReductionError::Io {
        path: path.display().to_string(),
        message: e.to_string(),
    })
}

pub fn read_matrix_json(path: &Path) -> Result<Matrix, ReductionError> {
    let io = |message: String| ReductionError::Io {
        path: path.display().to_string(),
        message,
    };
    let text = std::fs::read_to_string(path).map_err(|e| io(e.to_string()))?;
    serde_json::from_str(&text).map_err(|e| io(e.to_string()))
}
