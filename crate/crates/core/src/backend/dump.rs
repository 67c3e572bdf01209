//! `ATTNDMP1` attention dumps.
//!
//! Little-endian layout:
//!
//! | bytes | field                                             |
//! |-------|---------------------------------------------------|
//! | 8     | magic `ATTNDMP1`                                  |
//! | 4     | version (1)                                       |
//! | 4     | kind: 0 = full, 1 = last-token head-summed        |
//! | 4     | num_layers                                        |
//! | 4     | num_heads                                         |
//! | 4     | num_tokens                                        |
//! | ...   | f32 payload, `[layer][head][query][key]` or `[layer][key]` |
//!
//! Token offsets live in a companion JSON file next to the dump:
//! `{"tokens": [{"start": 0, "end": 0}, ...]}`.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Seek, SeekFrom, Write};
use std::path::{Path, PathBuf};
use std::sync::OnceLock;

use serde::{Deserialize, Serialize};

use super::{
    prompt_key, AttentionBackend, AttentionPayload, AttentionStream, BackendDescriptor,
    BackendError, BackendKind, Granularity, LastTokenRows, TokenizationResult, Tokenize,
};

pub const MAGIC: &[u8; 8] = b"ATTNDMP1";
pub const VERSION: u32 = 1;
pub const HEADER_LEN: u64 = 28;
pub const DUMP_EXTENSION: &str = "attn";
pub const TOKENS_SUFFIX: &str = ".tokens.json";

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TokenSpan {
    pub start: usize,
    pub end: usize,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TokenMap {
    pub tokens: Vec<TokenSpan>,
}

impl From<&TokenizationResult> for TokenMap {
    fn from(t: &TokenizationResult) -> Self {
        Self {
            tokens: t
                .token_offsets
                .iter()
                .map(|&(start, end)| TokenSpan { start, end })
                .collect(),
        }
    }
}

impl From<TokenMap> for TokenizationResult {
    fn from(m: TokenMap) -> Self {
        Self {
            token_offsets: m.tokens.into_iter().map(|t| (t.start, t.end)).collect(),
        }
    }
}

/// Companion token-map path: `x.attn` → `x.tokens.json`.
pub fn token_map_path(dump_path: &Path) -> PathBuf {
    let stem = dump_path
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_default();
    dump_path.with_file_name(format!("{stem}{TOKENS_SUFFIX}"))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct DumpHeader {
    pub granularity: Granularity,
    pub num_layers: usize,
    pub num_heads: usize,
    pub num_tokens: usize,
}

impl DumpHeader {
    pub fn payload_len(&self) -> u64 {
        let (l, h, t) = (self.num_layers as u64, self.num_heads as u64, self.num_tokens as u64);
        let values = match self.granularity {
            Granularity::Full => l * h * t * t,
            Granularity::LastTokenHeadSummed => l * t,
        };
        values * 4
    }

    fn descriptor(&self) -> BackendDescriptor {
        BackendDescriptor {
            num_layers: self.num_layers,
            num_heads: self.num_heads,
            backend_kind: BackendKind::Dump,
        }
    }
}

fn u32_at(buf: &[u8], at: usize) -> u32 {
    u32::from_le_bytes(buf[at..at + 4].try_into().unwrap())
}

fn read_header(r: &mut impl Read) -> Result<DumpHeader, BackendError> {
    let mut buf = [0u8; HEADER_LEN as usize];
    r.read_exact(&mut buf).map_err(|_| BackendError::TruncatedPayload {
        expected: HEADER_LEN,
        found: 0,
    })?;
    let magic: [u8; 8] = buf[..8].try_into().unwrap();
    if &magic != MAGIC {
        return Err(BackendError::BadMagic(magic));
    }
    let version = u32_at(&buf, 8);
    if version != VERSION {
        return Err(BackendError::VersionUnsupported(version));
    }
    let granularity = match u32_at(&buf, 12) {
        0 => Granularity::Full,
        1 => Granularity::LastTokenHeadSummed,
        other => {
            return Err(BackendError::ProtocolError(format!("unknown dump kind {other}")));
        }
    };
    let header = DumpHeader {
        granularity,
        num_layers: u32_at(&buf, 16) as usize,
        num_heads: u32_at(&buf, 20) as usize,
        num_tokens: u32_at(&buf, 24) as usize,
    };
    if header.num_layers == 0 || header.num_heads == 0 || header.num_tokens == 0 {
        return Err(BackendError::ProtocolError(
            "dump header has a zero dimension".into(),
        ));
    }
    Ok(header)
}

fn encode_header(h: &DumpHeader) -> Vec<u8> {
    let kind: u32 = match h.granularity {
        Granularity::Full => 0,
        Granularity::LastTokenHeadSummed => 1,
    };
    let mut out = Vec::with_capacity(HEADER_LEN as usize);
    out.extend_from_slice(MAGIC);
    for v in [
        VERSION,
        kind,
        h.num_layers as u32,
        h.num_heads as u32,
        h.num_tokens as u32,
    ] {
        out.extend_from_slice(&v.to_le_bytes());
    }
    out
}

/// Writes the dump and its token map.
pub fn write_attention_dump(
    stream: &AttentionStream,
    tokenization: &TokenizationResult,
    path: &Path,
) -> Result<(), BackendError> {
    if tokenization.num_tokens() != stream.num_tokens {
        return Err(BackendError::InvariantViolation(format!(
            "token map has {} tokens, stream has {}",
            tokenization.num_tokens(),
            stream.num_tokens
        )));
    }
    let header = DumpHeader {
        granularity: stream.granularity(),
        num_layers: stream.descriptor.num_layers,
        num_heads: stream.descriptor.num_heads,
        num_tokens: stream.num_tokens,
    };
    let data = match &stream.payload {
        AttentionPayload::Full(d) | AttentionPayload::LastTokenHeadSummed(d) => d,
    };
    if data.len() as u64 * 4 != header.payload_len() {
        return Err(BackendError::InvariantViolation(format!(
            "payload holds {} values, header implies {}",
            data.len(),
            header.payload_len() / 4
        )));
    }
    let mut w = BufWriter::new(File::create(path)?);
    w.write_all(&encode_header(&header))?;
    for v in data {
        w.write_all(&v.to_le_bytes())?;
    }
    w.flush()?;
    let map = serde_json::to_string(&TokenMap::from(tokenization)).expect("token map serializes");
    std::fs::write(token_map_path(path), map)?;
    Ok(())
}

pub fn read_token_map(dump_path: &Path) -> Result<TokenizationResult, BackendError> {
    let path = token_map_path(dump_path);
    let text = std::fs::read_to_string(&path)
        .map_err(|_| BackendError::DumpMissing(path.display().to_string()))?;
    let map: TokenMap = serde_json::from_str(&text)
        .map_err(|e| BackendError::ProtocolError(format!("{}: {e}", path.display())))?;
    Ok(map.into())
}

/// Reads a dump and its token map fully into memory.
pub fn read_attention_dump(path: &Path) -> Result<(TokenizationResult, AttentionStream), BackendError> {
    let mut reader = DumpReader::open(path)?;
    let tokenization = read_token_map(path)?;
    if tokenization.num_tokens() != reader.header.num_tokens {
        return Err(BackendError::ProtocolError(format!(
            "token map lists {} tokens, dump header {}",
            tokenization.num_tokens(),
            reader.header.num_tokens
        )));
    }
    let stream = reader.read_all()?;
    Ok((tokenization, stream))
}

/// Seekable reader over a dump file. Visiting last-token rows reads only
/// `num_tokens` values per `(layer, head)`, never the whole tensor.
pub struct DumpReader {
    file: BufReader<File>,
    pub header: DumpHeader,
}

impl DumpReader {
    pub fn open(path: &Path) -> Result<Self, BackendError> {
        let file = File::open(path).map_err(|_| BackendError::DumpMissing(path.display().to_string()))?;
        let actual = file.metadata()?.len();
        let mut file = BufReader::new(file);
        let header = read_header(&mut file)?;
        let expected = header.payload_len();
        let found = actual.saturating_sub(HEADER_LEN);
        if found != expected {
            return Err(BackendError::TruncatedPayload { expected, found });
        }
        Ok(Self { file, header })
    }

    fn read_f32s(&mut self, offset_values: u64, n: usize, out: &mut Vec<f32>) -> Result<(), BackendError> {
        self.file.seek(SeekFrom::Start(HEADER_LEN + offset_values * 4))?;
        let mut bytes = vec![0u8; n * 4];
        self.file.read_exact(&mut bytes)?;
        out.clear();
        out.extend(
            bytes
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes(c.try_into().unwrap())),
        );
        Ok(())
    }

    pub fn read_all(&mut self) -> Result<AttentionStream, BackendError> {
        let n = (self.header.payload_len() / 4) as usize;
        let mut data = Vec::with_capacity(n);
        self.read_f32s(0, n, &mut data)?;
        let payload = match self.header.granularity {
            Granularity::Full => AttentionPayload::Full(data),
            Granularity::LastTokenHeadSummed => AttentionPayload::LastTokenHeadSummed(data),
        };
        Ok(AttentionStream {
            descriptor: self.header.descriptor(),
            num_tokens: self.header.num_tokens,
            payload,
        })
    }
}

impl LastTokenRows for DumpReader {
    fn descriptor(&self) -> BackendDescriptor {
        self.header.descriptor()
    }

    fn num_tokens(&self) -> usize {
        self.header.num_tokens
    }

    fn granularity(&self) -> Granularity {
        self.header.granularity
    }

    fn visit_last_rows(&mut self, visit: &mut dyn FnMut(usize, &[f32])) -> Result<(), BackendError> {
        let h = self.header;
        let t = h.num_tokens as u64;
        let mut row = Vec::with_capacity(h.num_tokens);
        for layer in 0..h.num_layers {
            match h.granularity {
                Granularity::Full => {
                    for head in 0..h.num_heads {
                        let base = ((layer * h.num_heads + head) as u64 * t + (t - 1)) * t;
                        self.read_f32s(base, h.num_tokens, &mut row)?;
                        visit(layer, &row);
                    }
                }
                Granularity::LastTokenHeadSummed => {
                    self.read_f32s(layer as u64 * t, h.num_tokens, &mut row)?;
                    visit(layer, &row);
                }
            }
        }
        Ok(())
    }
}

/// Serves prefill requests from a directory of dumps named
/// `<sha256-hex of prompt>.attn`.
pub struct DumpBackend {
    dir: PathBuf,
    descriptor: OnceLock<BackendDescriptor>,
}

impl DumpBackend {
    pub fn new(dir: impl Into<PathBuf>) -> Self {
        Self {
            dir: dir.into(),
            descriptor: OnceLock::new(),
        }
    }

    pub fn dir(&self) -> &Path {
        &self.dir
    }

    pub fn dump_path(&self, prompt: &str) -> PathBuf {
        self.dir.join(format!("{}.{DUMP_EXTENSION}", prompt_key(prompt)))
    }

    /// Descriptor from the first dump found in the directory.
    pub fn probe(&self) -> Result<BackendDescriptor, BackendError> {
        if let Some(d) = self.descriptor.get() {
            return Ok(*d);
        }
        let entries = std::fs::read_dir(&self.dir)
            .map_err(|_| BackendError::DumpMissing(self.dir.display().to_string()))?;
        let mut paths: Vec<PathBuf> = entries
            .filter_map(|e| e.ok().map(|e| e.path()))
            .filter(|p| p.extension().is_some_and(|x| x == DUMP_EXTENSION))
            .collect();
        paths.sort();
        let first = paths
            .first()
            .ok_or_else(|| BackendError::DumpMissing(format!("no .{DUMP_EXTENSION} files in {}", self.dir.display())))?;
        let header = DumpReader::open(first)?.header;
        Ok(*self.descriptor.get_or_init(|| header.descriptor()))
    }

    fn check_descriptor(&self, found: BackendDescriptor) -> Result<(), BackendError> {
        let expected = *self.descriptor.get_or_init(|| found);
        if expected != found {
            return Err(BackendError::DescriptorMismatch { expected, found });
        }
        Ok(())
    }

    /// Streaming access to the dump for `prompt`.
    pub fn open_prompt(&self, prompt: &str) -> Result<(TokenizationResult, DumpReader), BackendError> {
        let path = self.dump_path(prompt);
        let reader = DumpReader::open(&path)?;
        self.check_descriptor(reader.header.descriptor())?;
        let tokenization = read_token_map(&path)?;
        if tokenization.num_tokens() != reader.header.num_tokens {
            return Err(BackendError::ProtocolError(format!(
                "{}: token map lists {} tokens, dump header {}",
                path.display(),
                tokenization.num_tokens(),
                reader.header.num_tokens
            )));
        }
        Ok((tokenization, reader))
    }
}

impl Tokenize for DumpBackend {
    fn tokenize(&self, text: &str) -> Result<TokenizationResult, BackendError> {
        if text.is_empty() {
            return Err(BackendError::EmptyText);
        }
        read_token_map(&self.dump_path(text))
    }
}

impl AttentionBackend for DumpBackend {
    fn descriptor(&self) -> BackendDescriptor {
        self.probe().unwrap_or(BackendDescriptor {
            num_layers: 0,
            num_heads: 0,
            backend_kind: BackendKind::Dump,
        })
    }

    fn prefill_attention(
        &self,
        prompt: &str,
        granularity: Granularity,
    ) -> Result<(TokenizationResult, AttentionStream), BackendError> {
        let (tokenization, mut reader) = self.open_prompt(prompt)?;
        let stream = reader.read_all()?;
        let stream = match (granularity, stream.granularity()) {
            (Granularity::LastTokenHeadSummed, Granularity::Full) => stream.to_reduced(),
            (Granularity::Full, Granularity::LastTokenHeadSummed) => {
                return Err(BackendError::GranularityUnsupported {
                    num_tokens: stream.num_tokens,
                    limit: 0,
                })
            }
            _ => stream,
        };
        Ok((tokenization, stream))
    }
}
