//! Prompt rendering with absolute line indices, and the token-to-line map.
//!
//! Every prompt for a sample has the same line skeleton:
//!
//! ```text
//! Code:
//! 1: <line 1>
//! ...
//! n: <line n>
//!
//! <instruction>
//! vulnerable line: ```
//! ```
//!
//! Only the instruction line (or, for the marker strategy, the highlighted
//! code line) differs between the base prompt and a highlighted prompt, so
//! the per-line attention matrices of both can be subtracted row by row.

use std::ops::Range;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::corpus::CodeSample;

pub const HEADER_LINE: &str = "Code:";
pub const BASE_INSTRUCTION: &str = "Check whether there are vulnerabilities in the code.";
pub const ANSWER_CUE: &str = "vulnerable line: ```";
pub const MARKER_TEXT: &str = "Pay attention to this";

pub fn highlight_instruction(line: usize) -> String {
    format!("Pay attention to line {line}. Check whether there are vulnerabilities in it.")
}

#[derive(Debug, Error, PartialEq, Eq)]
pub enum PromptError {
    #[error("highlighted line {line} outside [1, {loc}]")]
    HighlightOutOfRange { line: usize, loc: usize },
    #[error("token {index} span [{start}, {end}) outside prompt of {len} bytes")]
    OffsetOutOfBounds {
        index: usize,
        start: usize,
        end: usize,
        len: usize,
    },
    #[error("token {index} starts at {start}, before the previous token at {previous}")]
    UnorderedOffsets {
        index: usize,
        start: usize,
        previous: usize,
    },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum HighlightStrategy {
    /// "Pay attention to line i." in the instruction slot.
    LineIndex,
    /// A comment appended to the highlighted code line; instruction stays neutral.
    MarkerComment,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LineKind {
    Header,
    Code,
    Blank,
    Instruction,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LineRecord {
    /// 1-based prompt line index.
    pub display_line: usize,
    /// Byte span `[start, end)`, including the terminating newline if any.
    pub char_span: [usize; 2],
    pub kind: LineKind,
}

/// Template knobs.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct PromptTemplate {
    /// Count the answer-cue line as part of the instruction section.
    pub cue_is_instruction: bool,
}

impl Default for PromptTemplate {
    fn default() -> Self {
        Self {
            cue_is_instruction: true,
        }
    }
}

impl PromptTemplate {
    pub fn num_instruction_lines(&self) -> usize {
        if self.cue_is_instruction {
            2
        } else {
            1
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PromptLayout {
    pub text: String,
    pub line_records: Vec<LineRecord>,
    /// `code_line_map[i - 1]` is the prompt line holding code line `i`.
    pub code_line_map: Vec<usize>,
    pub instruction_lines: Vec<usize>,
    pub highlighted_code_line: Option<usize>,
}

impl PromptLayout {
    pub fn num_lines(&self) -> usize {
        self.line_records.len()
    }

    pub fn prompt_line_of_code(&self, code_line: usize) -> Option<usize> {
        code_line
            .checked_sub(1)
            .and_then(|i| self.code_line_map.get(i).copied())
    }

    pub fn highlighted_prompt_line(&self) -> Option<usize> {
        self.highlighted_code_line
            .and_then(|l| self.prompt_line_of_code(l))
    }

    /// Text of a prompt line, without its newline.
    pub fn line_text(&self, prompt_line: usize) -> &str {
        let [s, e] = self.line_records[prompt_line - 1].char_span;
        self.text[s..e].strip_suffix('\n').unwrap_or(&self.text[s..e])
    }

    /// Index of the prompt line containing byte `offset`. `offset == text.len()`
    /// maps to the last line.
    pub fn line_at_byte(&self, offset: usize) -> usize {
        let idx = self
            .line_records
            .partition_point(|r| r.char_span[1] <= offset);
        idx.min(self.line_records.len() - 1) + 1
    }
}

fn comment_prefix(language: &str) -> &'static str {
    match language.to_ascii_lowercase().as_str() {
        "python" | "py" | "ruby" | "rb" | "shell" | "sh" | "bash" | "perl" | "r" => "#",
        _ => "//",
    }
}

struct Renderer {
    text: String,
    records: Vec<LineRecord>,
}

impl Renderer {
    fn push(&mut self, line: &str, kind: LineKind) -> usize {
        if !self.records.is_empty() {
            // close the previous line's span over its newline
            self.text.push('\n');
            self.records.last_mut().unwrap().char_span[1] = self.text.len();
        }
        let start = self.text.len();
        self.text.push_str(line);
        let display_line = self.records.len() + 1;
        self.records.push(LineRecord {
            display_line,
            char_span: [start, self.text.len()],
            kind,
        });
        display_line
    }
}

fn render(
    sample: &CodeSample,
    instruction: &str,
    marker_on: Option<usize>,
    highlighted: Option<usize>,
    template: &PromptTemplate,
) -> PromptLayout {
    let mut r = Renderer {
        text: String::new(),
        records: Vec::with_capacity(sample.loc() + 4),
    };
    r.push(HEADER_LINE, LineKind::Header);
    let mut code_line_map = Vec::with_capacity(sample.loc());
    let marker = format!(" {} {MARKER_TEXT}", comment_prefix(&sample.language));
    for (i, line) in sample.lines.iter().enumerate() {
        let n = i + 1;
        let rendered = if marker_on == Some(n) {
            format!("{n}: {line}{marker}")
        } else {
            format!("{n}: {line}")
        };
        code_line_map.push(r.push(&rendered, LineKind::Code));
    }
    r.push("", LineKind::Blank);
    let instr = r.push(instruction, LineKind::Instruction);
    let cue = r.push(ANSWER_CUE, LineKind::Instruction);
    let instruction_lines = if template.cue_is_instruction {
        vec![instr, cue]
    } else {
        vec![instr]
    };
    PromptLayout {
        text: r.text,
        line_records: r.records,
        code_line_map,
        instruction_lines,
        highlighted_code_line: highlighted,
    }
}

pub fn build_base_prompt(sample: &CodeSample) -> PromptLayout {
    build_base_prompt_with(sample, &PromptTemplate::default())
}

pub fn build_base_prompt_with(sample: &CodeSample, template: &PromptTemplate) -> PromptLayout {
    render(sample, BASE_INSTRUCTION, None, None, template)
}

pub fn build_highlighted_prompt(
    sample: &CodeSample,
    line: usize,
    strategy: HighlightStrategy,
) -> Result<PromptLayout, PromptError> {
    build_highlighted_prompt_with(sample, line, strategy, &PromptTemplate::default())
}

pub fn build_highlighted_prompt_with(
    sample: &CodeSample,
    line: usize,
    strategy: HighlightStrategy,
    template: &PromptTemplate,
) -> Result<PromptLayout, PromptError> {
    if line == 0 || line > sample.loc() {
        return Err(PromptError::HighlightOutOfRange {
            line,
            loc: sample.loc(),
        });
    }
    Ok(match strategy {
        HighlightStrategy::LineIndex => render(
            sample,
            &highlight_instruction(line),
            None,
            Some(line),
            template,
        ),
        HighlightStrategy::MarkerComment => {
            render(sample, BASE_INSTRUCTION, Some(line), Some(line), template)
        }
    })
}

/// Contiguous token ranges per prompt line.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LineTokenSpans {
    /// `spans[l - 1]` is the token range of prompt line `l`; may be empty.
    pub spans: Vec<Range<usize>>,
    pub num_tokens: usize,
}

impl LineTokenSpans {
    pub fn num_lines(&self) -> usize {
        self.spans.len()
    }

    pub fn span(&self, prompt_line: usize) -> Range<usize> {
        self.spans[prompt_line - 1].clone()
    }
}

/// Assigns every token to the prompt line holding its first byte. Empty-span
/// tokens go to the line containing their offset, so a begin token at offset 0
/// lands on line 1.
pub fn map_tokens_to_lines(
    layout: &PromptLayout,
    token_offsets: &[(usize, usize)],
) -> Result<LineTokenSpans, PromptError> {
    let len = layout.text.len();
    let n_lines = layout.num_lines();
    let mut counts = vec![0usize; n_lines];
    let mut previous = 0usize;
    for (index, &(start, end)) in token_offsets.iter().enumerate() {
        if start > end || end > len {
            return Err(PromptError::OffsetOutOfBounds {
                index,
                start,
                end,
                len,
            });
        }
        if start < previous {
            return Err(PromptError::UnorderedOffsets {
                index,
                start,
                previous,
            });
        }
        previous = start;
        counts[layout.line_at_byte(start) - 1] += 1;
    }
    let mut spans = Vec::with_capacity(n_lines);
    let mut cursor = 0;
    for c in counts {
        spans.push(cursor..cursor + c);
        cursor += c;
    }
    Ok(LineTokenSpans {
        spans,
        num_tokens: token_offsets.len(),
    })
}
