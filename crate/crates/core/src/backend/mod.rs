//! Attention providers.
//!
//! A backend tokenizes a prompt and runs the prefill pass only, returning the
//! attention of every layer either in full (`[layer][head][query][key]`) or
//! already reduced to the last query token with heads summed
//! (`[layer][key]`). Three providers exist:
//!
//! - [`toy::ToyTransformer`]: a small deterministic decoder-only transformer
//! - [`dump::DumpBackend`]: attention dumps on disk, keyed by prompt digest
//! - [`http::HttpBackend`]: client for an external attention service

pub mod dump;
pub mod http;
pub mod toy;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

/// Row-sum tolerance for full-granularity attention.
pub const FULL_ROW_TOLERANCE: f64 = 1e-5;
/// Row-sum tolerance (against `num_heads`) for reduced attention.
pub const REDUCED_ROW_TOLERANCE: f64 = 1e-4;

#[derive(Debug, Error)]
pub enum BackendError {
    #[error("cannot tokenize empty text")]
    EmptyText,
    #[error("sequence of {len} tokens exceeds the maximum of {max}")]
    SequenceTooLong { len: usize, max: usize },
    #[error("full attention refused for {num_tokens} tokens (limit {limit})")]
    GranularityUnsupported { num_tokens: usize, limit: usize },
    #[error("backend unavailable: {0}")]
    BackendUnavailable(String),
    #[error("attention dump missing: {0}")]
    DumpMissing(String),
    #[error("bad dump magic {0:?}")]
    BadMagic([u8; 8]),
    #[error("unsupported dump version {0}")]
    VersionUnsupported(u32),
    #[error("truncated dump payload: expected {expected} bytes, found {found}")]
    TruncatedPayload { expected: u64, found: u64 },
    #[error("protocol error: {0}")]
    ProtocolError(String),
    #[error("remote error (HTTP {status}): {message}")]
    RemoteError { status: u16, message: String },
    #[error("attention invariant violated: {0}")]
    InvariantViolation(String),
    #[error("backend descriptor changed mid-run: expected {expected:?}, found {found:?}")]
    DescriptorMismatch {
        expected: BackendDescriptor,
        found: BackendDescriptor,
    },
    #[error("calibration corpus is empty")]
    EmptyCorpus,
    #[error("invalid toy model configuration: {0}")]
    InvalidConfig(String),
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BackendKind {
    Toy,
    Dump,
    Http,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct BackendDescriptor {
    pub num_layers: usize,
    pub num_heads: usize,
    pub backend_kind: BackendKind,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TokenizationResult {
    /// `[start, end)` byte spans into the prompt, in token order.
    pub token_offsets: Vec<(usize, usize)>,
}

impl TokenizationResult {
    pub fn num_tokens(&self) -> usize {
        self.token_offsets.len()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Granularity {
    Full,
    LastTokenHeadSummed,
}

#[derive(Debug, Clone, PartialEq)]
pub enum AttentionPayload {
    /// `[layer][head][query][key]`, causal zeros stored.
    Full(Vec<f32>),
    /// `[layer][key]`, last query row with heads summed.
    LastTokenHeadSummed(Vec<f32>),
}

#[derive(Debug, Clone, PartialEq)]
pub struct AttentionStream {
    pub descriptor: BackendDescriptor,
    pub num_tokens: usize,
    pub payload: AttentionPayload,
}

/// Anything that can hand out last-query attention rows one at a time.
///
/// Full-granularity sources emit one row per `(layer, head)`; reduced
/// sources emit one already head-summed row per layer. Either way the
/// consumer accumulates rows per layer and never needs the whole tensor.
pub trait LastTokenRows {
    fn descriptor(&self) -> BackendDescriptor;
    fn num_tokens(&self) -> usize;
    fn granularity(&self) -> Granularity;
    fn visit_last_rows(
        &mut self,
        visit: &mut dyn FnMut(usize, &[f32]),
    ) -> Result<(), BackendError>;
}

impl AttentionStream {
    pub fn granularity(&self) -> Granularity {
        match self.payload {
            AttentionPayload::Full(_) => Granularity::Full,
            AttentionPayload::LastTokenHeadSummed(_) => Granularity::LastTokenHeadSummed,
        }
    }

    pub fn expected_len(descriptor: &BackendDescriptor, num_tokens: usize, g: Granularity) -> usize {
        match g {
            Granularity::Full => descriptor.num_layers * descriptor.num_heads * num_tokens * num_tokens,
            Granularity::LastTokenHeadSummed => descriptor.num_layers * num_tokens,
        }
    }

    /// Full-granularity row `(layer, head, query)`.
    pub fn full_row(&self, layer: usize, head: usize, query: usize) -> Option<&[f32]> {
        let AttentionPayload::Full(data) = &self.payload else {
            return None;
        };
        let t = self.num_tokens;
        let start = ((layer * self.descriptor.num_heads + head) * t + query) * t;
        data.get(start..start + t)
    }

    /// Reduced row for `layer`.
    pub fn reduced_row(&self, layer: usize) -> Option<&[f32]> {
        let AttentionPayload::LastTokenHeadSummed(data) = &self.payload else {
            return None;
        };
        let t = self.num_tokens;
        data.get(layer * t..(layer + 1) * t)
    }

    /// Collapses a full stream to the last query row with heads summed.
    pub fn to_reduced(&self) -> AttentionStream {
        let t = self.num_tokens;
        let payload = match &self.payload {
            AttentionPayload::LastTokenHeadSummed(d) => d.clone(),
            AttentionPayload::Full(_) => {
                let mut out = vec![0f64; self.descriptor.num_layers * t];
                for layer in 0..self.descriptor.num_layers {
                    for head in 0..self.descriptor.num_heads {
                        let row = self.full_row(layer, head, t - 1).unwrap();
                        for (acc, &v) in out[layer * t..(layer + 1) * t].iter_mut().zip(row) {
                            *acc += f64::from(v);
                        }
                    }
                }
                out.into_iter().map(|v| v as f32).collect()
            }
        };
        AttentionStream {
            descriptor: self.descriptor,
            num_tokens: t,
            payload: AttentionPayload::LastTokenHeadSummed(payload),
        }
    }

    /// Checks non-negativity, row sums and causal zeros. Row sums must be
    /// within `tolerance` of 1 (full) or of `num_heads` (reduced).
    pub fn validate(&self, tolerance: f64) -> Result<(), BackendError> {
        let d = &self.descriptor;
        let t = self.num_tokens;
        let g = self.granularity();
        let data = match &self.payload {
            AttentionPayload::Full(v) | AttentionPayload::LastTokenHeadSummed(v) => v,
        };
        if t == 0 || data.len() != Self::expected_len(d, t, g) {
            return Err(BackendError::InvariantViolation(format!(
                "payload holds {} values, expected {} for {} layers, {} heads, {} tokens",
                data.len(),
                Self::expected_len(d, t, g),
                d.num_layers,
                d.num_heads,
                t
            )));
        }
        let check_row = |row: &[f32], target: f64, what: &str| -> Result<(), BackendError> {
            if let Some(k) = row.iter().position(|v| !(v.is_finite() && *v >= 0.0)) {
                return Err(BackendError::InvariantViolation(format!(
                    "{what}: entry {k} = {} is negative or not finite",
                    row[k]
                )));
            }
            let sum: f64 = row.iter().map(|&v| f64::from(v)).sum();
            if (sum - target).abs() > tolerance {
                return Err(BackendError::InvariantViolation(format!(
                    "{what}: row sums to {sum}, expected {target} ± {tolerance}"
                )));
            }
            Ok(())
        };
        match g {
            Granularity::Full => {
                for layer in 0..d.num_layers {
                    for head in 0..d.num_heads {
                        for q in 0..t {
                            let row = self.full_row(layer, head, q).unwrap();
                            let what = format!("layer {layer} head {head} query {q}");
                            if let Some(k) = row[q + 1..].iter().position(|&v| v != 0.0) {
                                return Err(BackendError::InvariantViolation(format!(
                                    "{what}: non-zero attention to future key {}",
                                    q + 1 + k
                                )));
                            }
                            check_row(row, 1.0, &what)?;
                        }
                    }
                }
            }
            Granularity::LastTokenHeadSummed => {
                for layer in 0..d.num_layers {
                    check_row(
                        self.reduced_row(layer).unwrap(),
                        d.num_heads as f64,
                        &format!("layer {layer}"),
                    )?;
                }
            }
        }
        Ok(())
    }
}

impl LastTokenRows for AttentionStream {
    fn descriptor(&self) -> BackendDescriptor {
        self.descriptor
    }

    fn num_tokens(&self) -> usize {
        self.num_tokens
    }

    fn granularity(&self) -> Granularity {
        AttentionStream::granularity(self)
    }

    fn visit_last_rows(&mut self, visit: &mut dyn FnMut(usize, &[f32])) -> Result<(), BackendError> {
        let t = self.num_tokens;
        for layer in 0..self.descriptor.num_layers {
            match self.payload {
                AttentionPayload::Full(_) => {
                    for head in 0..self.descriptor.num_heads {
                        visit(layer, self.full_row(layer, head, t - 1).unwrap());
                    }
                }
                AttentionPayload::LastTokenHeadSummed(_) => {
                    visit(layer, self.reduced_row(layer).unwrap());
                }
            }
        }
        Ok(())
    }
}

pub trait Tokenize {
    fn tokenize(&self, text: &str) -> Result<TokenizationResult, BackendError>;
}

/// Uniform provider contract. Implementations are immutable once built and
/// may serve concurrent prefill requests.
pub trait AttentionBackend: Tokenize + Send + Sync {
    fn descriptor(&self) -> BackendDescriptor;

    fn prefill_attention(
        &self,
        prompt: &str,
        granularity: Granularity,
    ) -> Result<(TokenizationResult, AttentionStream), BackendError>;
}

/// Content key used to name dump files: lowercase hex SHA-256 of the prompt.
pub fn prompt_key(prompt: &str) -> String {
    hex::encode(Sha256::digest(prompt.as_bytes()))
}
