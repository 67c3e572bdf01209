//! Synthetic corpora with a planted attention shift, served through dumps.
//!
//! Every prompt gets per-line attention mass drawn around a per-sample
//! profile. When a vulnerable line is highlighted, `δ` mass per layer moves
//! onto that line from all other lines in proportion to their mass, so its
//! feature row rises by `δ` and total mass is conserved. `δ` is a multiple of the
//! pooled standard deviation of the unplanted features; a multiple of zero
//! yields a corpus with no signal.

use std::path::{Path, PathBuf};

use rand::seq::IndexedRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::backend::dump::{write_attention_dump, DumpBackend};
use crate::backend::{
    AttentionPayload, AttentionStream, BackendDescriptor, BackendError, BackendKind, TokenizationResult,
};
use crate::corpus::{write_dataset, CodeSample, CorpusError};
use crate::prompting::{
    build_base_prompt_with, build_highlighted_prompt_with, HighlightStrategy, PromptLayout, PromptTemplate,
};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SyntheticConfig {
    pub num_samples: usize,
    pub min_loc: usize,
    pub max_loc: usize,
    pub max_vuln_lines: usize,
    pub num_layers: usize,
    pub num_heads: usize,
    /// Planted shift in units of the unplanted feature standard deviation.
    pub delta_multiplier: f64,
    /// Log-scale noise between prompts of the same sample.
    pub noise: f64,
    pub seed: u64,
    pub strategy: HighlightStrategy,
}

impl Default for SyntheticConfig {
    fn default() -> Self {
        Self {
            num_samples: 200,
            min_loc: 8,
            max_loc: 20,
            max_vuln_lines: 2,
            num_layers: 4,
            num_heads: 4,
            delta_multiplier: 3.0,
            noise: 0.3,
            seed: 0,
            strategy: HighlightStrategy::LineIndex,
        }
    }
}

#[derive(Debug, Clone)]
pub struct SyntheticSet {
    pub samples: Vec<CodeSample>,
    pub dataset_path: PathBuf,
    pub dump_dir: PathBuf,
    /// Pooled standard deviation of the unplanted features.
    pub feature_std: f64,
    pub delta: f64,
}

const TYPES: &[&str] = &["int", "char", "size_t", "long", "unsigned"];
const NAMES: &[&str] = &["buf", "len", "idx", "ptr", "count", "offset", "tmp", "n", "src", "dst"];
const OPS: &[&str] = &["+", "-", "*", "&", "|"];

fn code_line(rng: &mut ChaCha8Rng) -> String {
    let pick = |rng: &mut ChaCha8Rng, xs: &[&'static str]| *xs.choose(rng).unwrap();
    match rng.random_range(0..4) {
        0 => format!(
            "{} {}{} = {} {} {};",
            pick(rng, TYPES),
            pick(rng, NAMES),
            rng.random_range(0..10),
            pick(rng, NAMES),
            pick(rng, OPS),
            rng.random_range(1..64)
        ),
        1 => format!("if ({} > {}) {{ return -1; }}", pick(rng, NAMES), pick(rng, NAMES)),
        2 => format!("memcpy({}, {}, {});", pick(rng, NAMES), pick(rng, NAMES), pick(rng, NAMES)),
        _ => format!("{}[{}] = {};", pick(rng, NAMES), rng.random_range(0..32), pick(rng, NAMES)),
    }
}

/// Whitespace-separated words, preceded by a zero-width begin token.
pub fn word_tokens(text: &str) -> TokenizationResult {
    let mut offsets = vec![(0, 0)];
    let mut start = None;
    for (i, c) in text.char_indices() {
        match (c.is_whitespace(), start) {
            (false, None) => start = Some(i),
            (true, Some(s)) => {
                offsets.push((s, i));
                start = None;
            }
            _ => {}
        }
    }
    if let Some(s) = start {
        offsets.push((s, text.len()));
    }
    TokenizationResult { token_offsets: offsets }
}

/// Per-prompt `(lines × layers)` line mass before planting.
struct PromptMass {
    layout: PromptLayout,
    tokens: TokenizationResult,
    /// Token count per prompt line.
    line_tokens: Vec<usize>,
    mass: Vec<Vec<f64>>,
}

fn line_token_counts(layout: &PromptLayout, tokens: &TokenizationResult) -> Vec<usize> {
    let mut counts = vec![0; layout.num_lines()];
    for &(start, _) in &tokens.token_offsets {
        counts[layout.line_at_byte(start) - 1] += 1;
    }
    counts
}

fn draw_mass(
    layout: PromptLayout,
    profile: &[f64],
    config: &SyntheticConfig,
    rng: &mut ChaCha8Rng,
) -> PromptMass {
    let tokens = word_tokens(&layout.text);
    let line_tokens = line_token_counts(&layout, &tokens);
    let normal = Normal::new(0.0, 1.0).unwrap();
    let heads = config.num_heads as f64;
    let mass = (0..config.num_layers)
        .map(|_| {
            let w: Vec<f64> = profile
                .iter()
                .zip(&line_tokens)
                .map(|(&g, &n)| {
                    let eps: f64 = normal.sample(rng);
                    if n == 0 {
                        0.0
                    } else {
                        (g + config.noise * eps).exp()
                    }
                })
                .collect();
            let total: f64 = w.iter().sum();
            w.iter().map(|v| heads * v / total).collect()
        })
        .collect();
    PromptMass {
        layout,
        tokens,
        line_tokens,
        mass,
    }
}

/// Spreads each line's mass evenly over its tokens.
fn to_stream(p: &PromptMass, descriptor: BackendDescriptor) -> AttentionStream {
    let t = p.tokens.num_tokens();
    let mut payload = Vec::with_capacity(descriptor.num_layers * t);
    for layer_mass in &p.mass {
        for (line, &n) in p.line_tokens.iter().enumerate() {
            for _ in 0..n {
                payload.push((layer_mass[line] / n as f64) as f32);
            }
        }
    }
    AttentionStream {
        descriptor,
        num_tokens: t,
        payload: AttentionPayload::LastTokenHeadSummed(payload),
    }
}

fn feature_rows<'a>(hl: &'a PromptMass, base: &'a PromptMass) -> impl Iterator<Item = f64> + 'a {
    let rows = hl
        .layout
        .instruction_lines
        .iter()
        .copied()
        .chain(hl.layout.highlighted_prompt_line());
    rows.flat_map(move |line| {
        hl.mass
            .iter()
            .zip(&base.mass)
            .map(move |(h, b)| h[line - 1] - b[line - 1])
    })
}

fn population_std(values: &[f64]) -> f64 {
    if values.is_empty() {
        return 0.0;
    }
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    (values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n).sqrt()
}

/// Writes `dataset.jsonl` and `dumps/` under `out_dir`.
pub fn generate(config: &SyntheticConfig, out_dir: &Path) -> Result<SyntheticSet, CorpusError> {
    if config.min_loc == 0 || config.min_loc > config.max_loc || config.max_vuln_lines == 0 {
        return Err(CorpusError::Backend(BackendError::InvalidConfig(
            "need 0 < min_loc <= max_loc and max_vuln_lines >= 1".into(),
        )));
    }
    let descriptor = BackendDescriptor {
        num_layers: config.num_layers,
        num_heads: config.num_heads,
        backend_kind: BackendKind::Dump,
    };
    let template = PromptTemplate::default();
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let profile_noise = Normal::new(0.0, 0.5).unwrap();

    let mut samples = Vec::with_capacity(config.num_samples);
    let mut prompts: Vec<(PromptMass, Vec<PromptMass>)> = Vec::with_capacity(config.num_samples);
    for i in 0..config.num_samples {
        let loc = rng.random_range(config.min_loc..=config.max_loc);
        let source: Vec<String> = (0..loc).map(|_| code_line(&mut rng)).collect();
        let n_vuln = rng.random_range(1..=config.max_vuln_lines.min(loc));
        let vuln = rand::seq::index::sample(&mut rng, loc, n_vuln).into_iter().map(|l| l + 1);
        let sample = CodeSample::new(format!("syn-{i:04}"), "c", source.join("\n") + "\n", vuln)?;

        let base_layout = build_base_prompt_with(&sample, &template);
        let profile: Vec<f64> = (1..=base_layout.num_lines())
            .map(|line| {
                let g = profile_noise.sample(&mut rng);
                // instruction lines hold most of the last token's attention
                if base_layout.instruction_lines.contains(&line) {
                    g + 8f64.ln()
                } else {
                    g
                }
            })
            .collect();
        let base = draw_mass(base_layout, &profile, config, &mut rng);
        let highlighted = (1..=sample.loc())
            .map(|line| {
                let layout = build_highlighted_prompt_with(&sample, line, config.strategy, &template)
                    .expect("line in range");
                draw_mass(layout, &profile, config, &mut rng)
            })
            .collect();
        samples.push(sample);
        prompts.push((base, highlighted));
    }

    let unplanted: Vec<f64> = prompts
        .iter()
        .flat_map(|(base, hls)| hls.iter().flat_map(move |hl| feature_rows(hl, base)))
        .collect();
    let feature_std = population_std(&unplanted);
    let delta = config.delta_multiplier * feature_std;

    for (sample, (_, hls)) in samples.iter().zip(prompts.iter_mut()) {
        for &line in &sample.vuln_lines {
            let p = &mut hls[line - 1];
            let target = p.layout.highlighted_prompt_line().expect("highlighted");
            for layer_mass in &mut p.mass {
                let pool: f64 = layer_mass.iter().sum::<f64>() - layer_mass[target - 1];
                if pool <= delta {
                    return Err(CorpusError::Backend(BackendError::InvalidConfig(format!(
                        "planted shift {delta:.4} exceeds the remaining mass {pool:.4} in {}",
                        sample.id
                    ))));
                }
                for (l, m) in layer_mass.iter_mut().enumerate() {
                    if l + 1 != target {
                        *m -= delta * *m / pool;
                    }
                }
                layer_mass[target - 1] += delta;
            }
        }
    }

    std::fs::create_dir_all(out_dir).map_err(|source| CorpusError::Io {
        path: out_dir.display().to_string(),
        source,
    })?;
    let dump_dir = out_dir.join("dumps");
    std::fs::create_dir_all(&dump_dir).map_err(BackendError::Io)?;
    let backend = DumpBackend::new(&dump_dir);
    for (base, hls) in &prompts {
        for p in std::iter::once(base).chain(hls) {
            let path = backend.dump_path(&p.layout.text);
            write_attention_dump(&to_stream(p, descriptor), &p.tokens, &path)?;
        }
    }
    let dataset_path = out_dir.join("dataset.jsonl");
    write_dataset(&dataset_path, &samples)?;
    Ok(SyntheticSet {
        samples,
        dataset_path,
        dump_dir,
        feature_std,
        delta,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::backend::AttentionBackend;
    use crate::backend::Granularity;

    #[test]
    fn word_tokens_cover_words() {
        let t = word_tokens("ab  c\nd");
        assert_eq!(t.token_offsets, vec![(0, 0), (0, 2), (4, 5), (6, 7)]);
    }

    #[test]
    fn dumps_are_valid_and_resolvable() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = SyntheticConfig {
            num_samples: 3,
            ..Default::default()
        };
        let set = generate(&cfg, dir.path()).unwrap();
        assert!(set.delta > 0.0);
        let backend = DumpBackend::new(&set.dump_dir);
        let s = &set.samples[0];
        let layout = build_highlighted_prompt_with(s, 1, cfg.strategy, &PromptTemplate::default()).unwrap();
        let (_, stream) = backend
            .prefill_attention(&layout.text, Granularity::LastTokenHeadSummed)
            .unwrap();
        stream.validate(crate::backend::REDUCED_ROW_TOLERANCE).unwrap();
    }
}
