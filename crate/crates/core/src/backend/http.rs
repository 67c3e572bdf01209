//! Client for an external attention service.
//!
//! `POST {endpoint}/v1/attention` with `{"prompt": str, "reduce": "last_token_head_sum"}`
//! returns
//!
//! ```json
//! {"num_layers": 2, "num_heads": 4,
//!  "tokens": [{"start": 0, "end": 0}, ...],
//!  "attention": [[...num_tokens floats...], ...num_layers rows]}
//! ```

use std::sync::{Condvar, Mutex};
use std::time::Duration;

use serde::{Deserialize, Serialize};
use ureq::Agent;

use super::dump::TokenSpan;
use super::{
    AttentionBackend, AttentionPayload, AttentionStream, BackendDescriptor, BackendError,
    BackendKind, Granularity, TokenizationResult, Tokenize,
};

/// Environment variable overriding the configured endpoint.
pub const ENDPOINT_ENV: &str = "ATTNLOC_ENDPOINT";
/// Row-sum tolerance for wire responses (f32 or lower precision upstream).
pub const WIRE_TOLERANCE: f64 = 1e-2;

#[derive(Debug, Serialize)]
struct AttentionRequest<'a> {
    prompt: &'a str,
    reduce: &'static str,
}

#[derive(Debug, Deserialize)]
struct AttentionResponse {
    num_layers: Option<usize>,
    num_heads: Option<usize>,
    tokens: Option<Vec<TokenSpan>>,
    attention: Option<Vec<Vec<f64>>>,
}

#[derive(Debug, Deserialize)]
struct ErrorBody {
    error: Option<String>,
    detail: Option<serde_json::Value>,
    message: Option<String>,
}

/// Counting semaphore bounding requests in flight.
struct InFlight {
    used: Mutex<usize>,
    freed: Condvar,
    limit: usize,
}

struct Permit<'a>(&'a InFlight);

impl InFlight {
    fn acquire(&self) -> Permit<'_> {
        let mut used = self.used.lock().unwrap();
        while *used >= self.limit {
            used = self.freed.wait(used).unwrap();
        }
        *used += 1;
        Permit(self)
    }
}

impl Drop for Permit<'_> {
    fn drop(&mut self) {
        *self.0.used.lock().unwrap() -= 1;
        self.0.freed.notify_one();
    }
}

pub struct HttpBackend {
    endpoint: String,
    agent: Agent,
    in_flight: InFlight,
    tolerance: f64,
    descriptor: Mutex<Option<BackendDescriptor>>,
}

impl HttpBackend {
    pub fn new(endpoint: impl Into<String>, max_in_flight: usize, timeout: Duration) -> Self {
        let agent: Agent = Agent::config_builder()
            .http_status_as_error(false)
            .timeout_global(Some(timeout))
            .build()
            .into();
        Self {
            endpoint: endpoint.into().trim_end_matches('/').to_string(),
            agent,
            in_flight: InFlight {
                used: Mutex::new(0),
                freed: Condvar::new(),
                limit: max_in_flight.max(1),
            },
            tolerance: WIRE_TOLERANCE,
            descriptor: Mutex::new(None),
        }
    }

    pub fn with_tolerance(mut self, tolerance: f64) -> Self {
        self.tolerance = tolerance;
        self
    }

    pub fn endpoint(&self) -> &str {
        &self.endpoint
    }

    /// Fetches the reduced attention for `prompt`.
    pub fn fetch(&self, prompt: &str) -> Result<(TokenizationResult, AttentionStream), BackendError> {
        if prompt.is_empty() {
            return Err(BackendError::EmptyText);
        }
        let url = format!("{}/v1/attention", self.endpoint);
        let mut response = {
            let _permit = self.in_flight.acquire();
            self.agent
                .post(&url)
                .send_json(AttentionRequest {
                    prompt,
                    reduce: "last_token_head_sum",
                })
                .map_err(|e| BackendError::BackendUnavailable(format!("{url}: {e}")))?
        };
        let status = response.status().as_u16();
        let body = response
            .body_mut()
            .read_to_string()
            .map_err(|e| BackendError::BackendUnavailable(format!("{url}: {e}")))?;
        if status != 200 {
            return Err(BackendError::RemoteError {
                status,
                message: error_message(&body),
            });
        }
        let parsed: AttentionResponse = serde_json::from_str(&body)
            .map_err(|e| BackendError::ProtocolError(format!("invalid response JSON: {e}")))?;
        let (tokenization, stream) = decode_response(parsed, prompt.len(), self.tolerance)?;
        let mut known = self.descriptor.lock().unwrap();
        match *known {
            Some(expected) if expected != stream.descriptor => {
                return Err(BackendError::DescriptorMismatch {
                    expected,
                    found: stream.descriptor,
                })
            }
            _ => *known = Some(stream.descriptor),
        }
        Ok((tokenization, stream))
    }
}

fn error_message(body: &str) -> String {
    match serde_json::from_str::<ErrorBody>(body) {
        Ok(ErrorBody { error: Some(m), .. }) | Ok(ErrorBody { message: Some(m), .. }) => m,
        Ok(ErrorBody { detail: Some(d), .. }) => match d {
            serde_json::Value::String(s) => s,
            other => other.to_string(),
        },
        _ => body.trim().to_string(),
    }
}

fn decode_response(
    r: AttentionResponse,
    prompt_len: usize,
    tolerance: f64,
) -> Result<(TokenizationResult, AttentionStream), BackendError> {
    let missing = |f: &str| BackendError::ProtocolError(format!("response missing \"{f}\" field"));
    let num_layers = r.num_layers.ok_or_else(|| missing("num_layers"))?;
    let num_heads = r.num_heads.ok_or_else(|| missing("num_heads"))?;
    let tokens = r.tokens.ok_or_else(|| missing("tokens"))?;
    let attention = r.attention.ok_or_else(|| missing("attention"))?;
    if num_layers == 0 || num_heads == 0 || tokens.is_empty() {
        return Err(BackendError::ProtocolError(
            "num_layers, num_heads and tokens must be non-empty".into(),
        ));
    }
    if attention.len() != num_layers {
        return Err(BackendError::ProtocolError(format!(
            "attention has {} rows, num_layers is {num_layers}",
            attention.len()
        )));
    }
    let t = tokens.len();
    let mut prev = 0;
    for (i, tok) in tokens.iter().enumerate() {
        if tok.start > tok.end || tok.end > prompt_len || tok.start < prev {
            return Err(BackendError::ProtocolError(format!(
                "token {i} span [{}, {}) is out of order or outside the {prompt_len}-byte prompt",
                tok.start, tok.end
            )));
        }
        prev = tok.start;
    }
    let mut payload = Vec::with_capacity(num_layers * t);
    for (layer, row) in attention.iter().enumerate() {
        if row.len() != t {
            return Err(BackendError::ProtocolError(format!(
                "attention row {layer} has {} entries, expected {t}",
                row.len()
            )));
        }
        payload.extend(row.iter().map(|&v| v as f32));
    }
    let stream = AttentionStream {
        descriptor: BackendDescriptor {
            num_layers,
            num_heads,
            backend_kind: BackendKind::Http,
        },
        num_tokens: t,
        payload: AttentionPayload::LastTokenHeadSummed(payload),
    };
    stream
        .validate(tolerance)
        .map_err(|e| BackendError::ProtocolError(e.to_string()))?;
    let tokenization = TokenizationResult {
        token_offsets: tokens.into_iter().map(|s| (s.start, s.end)).collect(),
    };
    Ok((tokenization, stream))
}

/// Convenience wrapper: fetch with a one-off client.
pub fn http_fetch_attention(
    endpoint: &str,
    prompt: &str,
) -> Result<(TokenizationResult, AttentionStream), BackendError> {
    HttpBackend::new(endpoint, 1, Duration::from_secs(120)).fetch(prompt)
}

impl Tokenize for HttpBackend {
    fn tokenize(&self, text: &str) -> Result<TokenizationResult, BackendError> {
        self.fetch(text).map(|(t, _)| t)
    }
}

impl AttentionBackend for HttpBackend {
    fn descriptor(&self) -> BackendDescriptor {
        self.descriptor.lock().unwrap().unwrap_or(BackendDescriptor {
            num_layers: 0,
            num_heads: 0,
            backend_kind: BackendKind::Http,
        })
    }

    fn prefill_attention(
        &self,
        prompt: &str,
        granularity: Granularity,
    ) -> Result<(TokenizationResult, AttentionStream), BackendError> {
        if granularity == Granularity::Full {
            return Err(BackendError::GranularityUnsupported {
                num_tokens: 0,
                limit: 0,
            });
        }
        self.fetch(prompt)
    }
}
