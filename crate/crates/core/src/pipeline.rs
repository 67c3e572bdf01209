//! Configuration, stage functions and the cross-validated end-to-end run.
//!
//! Each stage reads and writes plain files so stages can run on their own
//! and their outputs can be diffed:
//!
//! | stage      | reads                          | writes                          |
//! |------------|--------------------------------|---------------------------------|
//! | `prompt`   | dataset                        | `prompts.jsonl`                 |
//! | `reduce`   | dataset + backend              | `features.jsonl`, `vam/*.json`  |
//! | `train`    | `features.jsonl` (+ folds)     | `models/<language>.model.json`  |
//! | `localize` | `features.jsonl` + models      | `reports.jsonl`                 |
//! | `eval`     | `reports.jsonl` + dataset      | `metrics.json`, `.txt`, `.csv`  |
//! | `baseline` | run outputs + dataset          | `reports.jsonl`                 |
//!
//! [`run`] composes the same functions fold by fold.

use std::collections::{BTreeMap, BTreeSet};
use std::fs::File;
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};
use std::time::Duration;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::backend::dump::DumpBackend;
use crate::backend::http::{HttpBackend, ENDPOINT_ENV, WIRE_TOLERANCE};
use crate::backend::toy::{calibrate, ToyConfig, ToyModelParams, ToyTransformer};
use crate::backend::{
    prompt_key, AttentionBackend, BackendDescriptor, BackendError, BackendKind, Granularity, REDUCED_ROW_TOLERANCE,
};
use crate::classifier::{self, ClassifierError, FeatureSequence, ModelKind, SequenceModel, TrainConfig};
use crate::corpus::{self, CodeSample, CorpusError, FoldAssignment};
use crate::evaluation::{self, Averaging, EvaluationError, LocBucketReport, MetricReport, Truth};
use crate::matrix::Matrix;
use crate::prompting::{
    build_base_prompt_with, build_highlighted_prompt_with, map_tokens_to_lines, HighlightStrategy, PromptError,
    PromptLayout, PromptTemplate,
};
use crate::reduction::{self, FlattenStrategy, LayerwiseAttnMat, ReductionError, VulnAttnMat};
use crate::scoring::{self, ScoringError, SuspicionReport};

pub const EXIT_CONFIG: i32 = 2;
pub const EXIT_BACKEND: i32 = 3;
pub const EXIT_DATA: i32 = 4;

#[derive(Debug, Error)]
pub enum PipelineError {
    #[error("config error: {0}")]
    Config(String),
    #[error("backend error: {0}")]
    Backend(String),
    #[error("data error: {0}")]
    Data(String),
}

impl PipelineError {
    pub fn exit_code(&self) -> i32 {
        match self {
            PipelineError::Config(_) => EXIT_CONFIG,
            PipelineError::Backend(_) => EXIT_BACKEND,
            PipelineError::Data(_) => EXIT_DATA,
        }
    }
}

impl From<BackendError> for PipelineError {
    fn from(e: BackendError) -> Self {
        match e {
            BackendError::InvalidConfig(m) => PipelineError::Config(m),
            e => PipelineError::Backend(e.to_string()),
        }
    }
}

impl From<CorpusError> for PipelineError {
    fn from(e: CorpusError) -> Self {
        match e {
            CorpusError::Backend(b) => b.into(),
            e => PipelineError::Data(e.to_string()),
        }
    }
}

impl From<ReductionError> for PipelineError {
    fn from(e: ReductionError) -> Self {
        match e {
            ReductionError::Backend(b) => b.into(),
            e => PipelineError::Data(e.to_string()),
        }
    }
}

impl From<ClassifierError> for PipelineError {
    fn from(e: ClassifierError) -> Self {
        match e {
            ClassifierError::InvalidConfig(m) => PipelineError::Config(m),
            e => PipelineError::Data(e.to_string()),
        }
    }
}

impl From<PromptError> for PipelineError {
    fn from(e: PromptError) -> Self {
        PipelineError::Data(e.to_string())
    }
}

impl From<ScoringError> for PipelineError {
    fn from(e: ScoringError) -> Self {
        PipelineError::Data(e.to_string())
    }
}

impl From<EvaluationError> for PipelineError {
    fn from(e: EvaluationError) -> Self {
        match e {
            EvaluationError::EmptyBucketEdges | EvaluationError::UnorderedBucketEdges => {
                PipelineError::Config(e.to_string())
            }
            e => PipelineError::Data(e.to_string()),
        }
    }
}

fn io_error(path: &Path, e: impl std::fmt::Display) -> PipelineError {
    PipelineError::Data(format!("{}: {e}", path.display()))
}

/// Named method variants.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Strategy {
    /// Line-index highlighting, layerwise flattening, Bi-LSTM.
    #[serde(rename = "lova")]
    Lova,
    /// Marker-comment highlighting.
    #[serde(rename = "lova-c")]
    LovaC,
    /// Average-pooled features.
    #[serde(rename = "lova-a")]
    LovaA,
    /// Per-line MLP instead of the Bi-LSTM.
    #[serde(rename = "lova-v")]
    LovaV,
}

impl Strategy {
    pub const ALL: [Strategy; 4] = [Strategy::Lova, Strategy::LovaC, Strategy::LovaA, Strategy::LovaV];

    pub fn name(self) -> &'static str {
        match self {
            Strategy::Lova => "lova",
            Strategy::LovaC => "lova-c",
            Strategy::LovaA => "lova-a",
            Strategy::LovaV => "lova-v",
        }
    }

    pub fn parse(name: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|s| s.name() == name)
    }

    /// Sets the three knobs the variant controls.
    pub fn apply(self, config: &mut PipelineConfig) {
        config.strategy = Some(self);
        config.highlight = HighlightStrategy::LineIndex;
        config.reduction = FlattenStrategy::Layerwise;
        config.classifier.kind = ModelKind::Bilstm;
        match self {
            Strategy::Lova => {}
            Strategy::LovaC => config.highlight = HighlightStrategy::MarkerComment,
            Strategy::LovaA => config.reduction = FlattenStrategy::AvgPool,
            Strategy::LovaV => config.classifier.kind = ModelKind::Mlp,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ToyBackendConfig {
    pub seed: u64,
    #[serde(flatten)]
    pub model: ToyConfig,
    pub calibration_steps: usize,
    pub calibration_learning_rate: f64,
}

impl Default for ToyBackendConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            model: ToyConfig::default(),
            calibration_steps: 0,
            calibration_learning_rate: 0.05,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct BackendConfig {
    pub kind: BackendKind,
    pub endpoint: Option<String>,
    pub dump_dir: Option<PathBuf>,
    pub toy: ToyBackendConfig,
    pub max_in_flight: usize,
    pub timeout_secs: u64,
}

impl Default for BackendConfig {
    fn default() -> Self {
        Self {
            kind: BackendKind::Toy,
            endpoint: None,
            dump_dir: None,
            toy: ToyBackendConfig::default(),
            max_in_flight: 4,
            timeout_secs: 300,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct FoldConfig {
    pub k: usize,
    pub seed: u64,
}

impl Default for FoldConfig {
    fn default() -> Self {
        Self { k: 5, seed: 0 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct MetricsConfig {
    pub threshold: f64,
    pub top_n: Vec<usize>,
    pub averaging: Averaging,
    pub bucket_edges: Vec<usize>,
}

impl Default for MetricsConfig {
    fn default() -> Self {
        Self {
            threshold: scoring::DEFAULT_THRESHOLD,
            top_n: evaluation::DEFAULT_TOP_N.to_vec(),
            averaging: Averaging::Micro,
            bucket_edges: evaluation::DEFAULT_BUCKET_EDGES.to_vec(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PipelineConfig {
    pub dataset: PathBuf,
    pub backend: BackendConfig,
    pub strategy: Option<Strategy>,
    pub highlight: HighlightStrategy,
    pub reduction: FlattenStrategy,
    pub template: PromptTemplate,
    pub classifier: TrainConfig,
    pub folds: FoldConfig,
    pub metrics: MetricsConfig,
    pub max_tokens: usize,
    pub out_dir: PathBuf,
    /// Worker threads for attention extraction; 0 means one per logical core.
    pub parallelism: usize,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        Self {
            dataset: PathBuf::from("dataset.jsonl"),
            backend: BackendConfig::default(),
            strategy: None,
            highlight: HighlightStrategy::LineIndex,
            reduction: FlattenStrategy::Layerwise,
            template: PromptTemplate::default(),
            classifier: TrainConfig::default(),
            folds: FoldConfig::default(),
            metrics: MetricsConfig::default(),
            max_tokens: corpus::DEFAULT_MAX_TOKENS,
            out_dir: PathBuf::from("out"),
            parallelism: 0,
        }
    }
}

impl PipelineConfig {
    pub fn load(path: &Path) -> Result<Self, PipelineError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| PipelineError::Config(format!("{}: {e}", path.display())))?;
        let mut config: Self = serde_json::from_str(&text)
            .map_err(|e| PipelineError::Config(format!("{}: {e}", path.display())))?;
        // relative paths are resolved against the config file's directory
        if let Some(dir) = path.parent() {
            let fix = |p: &mut PathBuf| {
                if p.is_relative() {
                    *p = dir.join(&*p);
                }
            };
            fix(&mut config.dataset);
            fix(&mut config.out_dir);
            if let Some(d) = config.backend.dump_dir.as_mut() {
                fix(d);
            }
        }
        if let Some(s) = config.strategy {
            s.apply(&mut config);
        }
        Ok(config)
    }

    pub fn validate(&self) -> Result<(), PipelineError> {
        let bad = |m: String| Err(PipelineError::Config(m));
        if self.folds.k < 2 {
            return bad(format!("folds.k must be at least 2, got {}", self.folds.k));
        }
        if self.max_tokens == 0 {
            return bad("max_tokens must be positive".into());
        }
        if !(0.0..=1.0).contains(&self.metrics.threshold) {
            return bad(format!("threshold {} outside [0, 1]", self.metrics.threshold));
        }
        if self.metrics.top_n.iter().any(|&n| n == 0) {
            return bad("top_n values must be positive".into());
        }
        match self.backend.kind {
            BackendKind::Toy => self.backend.toy.model.validate()?,
            BackendKind::Dump if self.backend.dump_dir.is_none() => {
                return bad("dump backend needs backend.dump_dir".into())
            }
            BackendKind::Http if self.endpoint().is_none() => {
                return bad(format!("http backend needs backend.endpoint or {ENDPOINT_ENV}"))
            }
            _ => {}
        }
        Ok(())
    }

    /// HTTP endpoint; the environment variable wins over the config file.
    pub fn endpoint(&self) -> Option<String> {
        std::env::var(ENDPOINT_ENV)
            .ok()
            .filter(|s| !s.is_empty())
            .or_else(|| self.backend.endpoint.clone())
    }

    /// Canonical JSON used for hashing and the manifest.
    pub fn canonical_json(&self) -> String {
        serde_json::to_string(self).expect("config serializes")
    }

    pub fn config_hash(&self) -> String {
        hex::encode(Sha256::digest(self.canonical_json().as_bytes()))
    }
}

/// Backend instance plus the row-sum tolerance its payloads are held to.
pub struct Backend {
    pub inner: Box<dyn AttentionBackend>,
    pub tolerance: f64,
}

fn calibration_corpus(samples: &[CodeSample]) -> Vec<String> {
    samples
        .iter()
        .take(8)
        .map(|s| {
            let mut end = s.source.len().min(128);
            while !s.source.is_char_boundary(end) {
                end -= 1;
            }
            s.source[..end].to_string()
        })
        .filter(|s| !s.is_empty())
        .collect()
}

/// `samples` feed toy calibration when it is enabled.
pub fn build_backend(config: &PipelineConfig, samples: &[CodeSample]) -> Result<Backend, PipelineError> {
    let b = &config.backend;
    Ok(match b.kind {
        BackendKind::Toy => {
            let mut params = ToyModelParams::init(b.toy.seed, b.toy.model)?;
            if b.toy.calibration_steps > 0 {
                let texts = calibration_corpus(samples);
                let refs: Vec<&str> = texts.iter().map(String::as_str).collect();
                let cal = calibrate(&params, &refs, b.toy.calibration_steps, b.toy.calibration_learning_rate)?;
                log::info!(
                    "toy calibration: loss {:.4} -> {:.4}",
                    cal.loss_trace.first().copied().unwrap_or(f64::NAN),
                    cal.loss_trace.last().copied().unwrap_or(f64::NAN)
                );
                params = cal.params;
            }
            Backend {
                inner: Box::new(ToyTransformer::new(params)),
                tolerance: REDUCED_ROW_TOLERANCE,
            }
        }
        BackendKind::Dump => {
            let dir = b
                .dump_dir
                .as_ref()
                .ok_or_else(|| PipelineError::Config("dump backend needs backend.dump_dir".into()))?;
            let backend = DumpBackend::new(dir);
            backend.probe()?;
            Backend {
                inner: Box::new(backend),
                tolerance: WIRE_TOLERANCE,
            }
        }
        BackendKind::Http => {
            let endpoint = config
                .endpoint()
                .ok_or_else(|| PipelineError::Config(format!("http backend needs an endpoint or {ENDPOINT_ENV}")))?;
            Backend {
                inner: Box::new(HttpBackend::new(
                    endpoint,
                    b.max_in_flight,
                    Duration::from_secs(b.timeout_secs),
                )),
                tolerance: WIRE_TOLERANCE,
            }
        }
    })
}

fn thread_pool(parallelism: usize) -> Result<rayon::ThreadPool, PipelineError> {
    rayon::ThreadPoolBuilder::new()
        .num_threads(parallelism)
        .build()
        .map_err(|e| PipelineError::Config(format!("thread pool: {e}")))
}

pub fn load_samples(config: &PipelineConfig) -> Result<Vec<CodeSample>, PipelineError> {
    if !config.dataset.exists() {
        return Err(PipelineError::Data(format!("dataset {} not found", config.dataset.display())));
    }
    Ok(corpus::load_dataset(&config.dataset)?)
}

pub fn truth_of(samples: &[CodeSample]) -> Truth {
    samples.iter().map(|s| (s.id.clone(), s.vuln_lines.clone())).collect()
}

pub fn locs_of(samples: &[CodeSample]) -> BTreeMap<String, usize> {
    samples.iter().map(|s| (s.id.clone(), s.loc())).collect()
}

fn create_dir(path: &Path) -> Result<(), PipelineError> {
    std::fs::create_dir_all(path).map_err(|e| io_error(path, e))
}

fn write_text(path: &Path, text: &str) -> Result<(), PipelineError> {
    std::fs::write(path, text).map_err(|e| io_error(path, e))
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<(), PipelineError> {
    let mut text = serde_json::to_string_pretty(value).expect("value serializes");
    text.push('\n');
    write_text(path, &text)
}

// ---------------------------------------------------------------- prompts

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PromptRecord {
    /// Content key; dump files for this prompt are named `<id>.attn`.
    pub id: String,
    pub sample: String,
    /// Highlighted code line, absent for the base prompt.
    pub line: Option<usize>,
    pub prompt: String,
}

/// Base prompt followed by one highlighted prompt per line.
pub fn sample_layouts(
    sample: &CodeSample,
    highlight: HighlightStrategy,
    template: &PromptTemplate,
) -> Result<(PromptLayout, Vec<PromptLayout>), PipelineError> {
    let base = build_base_prompt_with(sample, template);
    let highlighted = (1..=sample.loc())
        .map(|line| build_highlighted_prompt_with(sample, line, highlight, template))
        .collect::<Result<_, _>>()?;
    Ok((base, highlighted))
}

pub fn prompt_records(
    samples: &[CodeSample],
    highlight: HighlightStrategy,
    template: &PromptTemplate,
) -> Result<Vec<PromptRecord>, PipelineError> {
    let mut out = Vec::new();
    for s in samples {
        let (base, highlighted) = sample_layouts(s, highlight, template)?;
        for layout in std::iter::once(base).chain(highlighted) {
            out.push(PromptRecord {
                id: prompt_key(&layout.text),
                sample: s.id.clone(),
                line: layout.highlighted_code_line,
                prompt: layout.text,
            });
        }
    }
    Ok(out)
}

pub fn cmd_prompt(config: &PipelineConfig) -> Result<PathBuf, PipelineError> {
    let samples = load_samples(config)?;
    create_dir(&config.out_dir)?;
    let path = config.out_dir.join("prompts.jsonl");
    let mut out = String::new();
    for r in prompt_records(&samples, config.highlight, &config.template)? {
        out.push_str(&serde_json::to_string(&r).expect("record serializes"));
        out.push('\n');
    }
    write_text(&path, &out)?;
    Ok(path)
}

// -------------------------------------------------------------- reduction

fn layerwise_for(backend: &Backend, layout: &PromptLayout) -> Result<LayerwiseAttnMat, PipelineError> {
    let (tokens, mut stream) = backend
        .inner
        .prefill_attention(&layout.text, Granularity::LastTokenHeadSummed)?;
    stream.validate(backend.tolerance)?;
    let spans = map_tokens_to_lines(layout, &tokens.token_offsets)?;
    Ok(reduction::layerwise_attn_mat(&mut stream, &spans)?)
}

/// One VulnAttnMat per code line of `sample`, in line order.
pub fn sample_vuln_mats(
    backend: &Backend,
    sample: &CodeSample,
    highlight: HighlightStrategy,
    template: &PromptTemplate,
) -> Result<Vec<VulnAttnMat>, PipelineError> {
    let (base, highlighted) = sample_layouts(sample, highlight, template)?;
    let base_mat = layerwise_for(backend, &base)?;
    highlighted
        .par_iter()
        .map(|layout| {
            let mat = layerwise_for(backend, layout)?;
            let diff = reduction::diff_attn_mat(&mat, &base_mat)?;
            let hl = layout.highlighted_prompt_line().expect("highlighted prompt");
            Ok(reduction::vuln_attn_mat(&diff, &layout.instruction_lines, hl)?)
        })
        .collect()
}

pub fn features_from_mats(sample: &CodeSample, mats: &[VulnAttnMat], flatten: FlattenStrategy) -> FeatureSequence {
    FeatureSequence {
        sample_id: sample.id.clone(),
        language: sample.language.clone(),
        features: mats.iter().map(|m| reduction::flatten(m, flatten)).collect(),
        labels: Some(sample.labels()),
    }
}

/// Samples whose base prompt fits the token budget.
pub fn filter_samples(
    backend: &Backend,
    samples: &[CodeSample],
    max_tokens: usize,
) -> Result<Vec<CodeSample>, PipelineError> {
    let kept = corpus::filter_by_token_budget(samples, backend.inner.as_ref(), max_tokens)?;
    if kept.len() < samples.len() {
        log::info!(
            "token budget {max_tokens}: kept {} of {} samples",
            kept.len(),
            samples.len()
        );
    }
    Ok(kept)
}

/// Per-sample VulnAttnMats for every sample, computed in parallel, in input order.
pub fn compute_vuln_mats(
    backend: &Backend,
    samples: &[CodeSample],
    config: &PipelineConfig,
) -> Result<Vec<Vec<VulnAttnMat>>, PipelineError> {
    thread_pool(config.parallelism)?.install(|| {
        samples
            .par_iter()
            .map(|s| sample_vuln_mats(backend, s, config.highlight, &config.template))
            .collect()
    })
}

pub fn write_features(path: &Path, features: &[FeatureSequence]) -> Result<(), PipelineError> {
    let mut out = String::new();
    for f in features {
        out.push_str(&serde_json::to_string(f).expect("features serialize"));
        out.push('\n');
    }
    write_text(path, &out)
}

pub fn read_features(path: &Path) -> Result<Vec<FeatureSequence>, PipelineError> {
    let file = File::open(path).map_err(|e| io_error(path, e))?;
    let mut out = Vec::new();
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| io_error(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        out.push(serde_json::from_str(&line).map_err(|e| io_error(path, format!("line {}: {e}", i + 1)))?);
    }
    Ok(out)
}

fn write_vam_files(dir: &Path, samples: &[CodeSample], mats: &[Vec<VulnAttnMat>]) -> Result<(), PipelineError> {
    for (s, ms) in samples.iter().zip(mats) {
        let sdir = dir.join(&s.id);
        create_dir(&sdir)?;
        for (i, m) in ms.iter().enumerate() {
            reduction::write_matrix_json(&sdir.join(format!("{}.vam.json", i + 1)), &m.0)?;
        }
    }
    Ok(())
}

/// Writes `features.jsonl` and one `.vam.json` per highlighted line.
pub fn cmd_reduce(config: &PipelineConfig) -> Result<PathBuf, PipelineError> {
    let samples = load_samples(config)?;
    let backend = build_backend(config, &samples)?;
    let samples = filter_samples(&backend, &samples, config.max_tokens)?;
    let mats = compute_vuln_mats(&backend, &samples, config)?;
    create_dir(&config.out_dir)?;
    write_vam_files(&config.out_dir.join("vam"), &samples, &mats)?;
    let features: Vec<FeatureSequence> = samples
        .iter()
        .zip(&mats)
        .map(|(s, m)| features_from_mats(s, m, config.reduction))
        .collect();
    let path = config.out_dir.join("features.jsonl");
    write_features(&path, &features)?;
    Ok(path)
}

/// Reduces one highlighted dump against its base dump.
pub fn reduce_dump_pair(
    layout: &PromptLayout,
    highlighted_dump: &Path,
    base_layout: &PromptLayout,
    base_dump: &Path,
) -> Result<VulnAttnMat, PipelineError> {
    let lam = |layout: &PromptLayout, dump: &Path| -> Result<LayerwiseAttnMat, PipelineError> {
        let tokens = crate::backend::dump::read_token_map(dump)?;
        let mut reader = crate::backend::dump::DumpReader::open(dump)?;
        let spans = map_tokens_to_lines(layout, &tokens.token_offsets)?;
        Ok(reduction::layerwise_attn_mat(&mut reader, &spans)?)
    };
    let diff = reduction::diff_attn_mat(&lam(layout, highlighted_dump)?, &lam(base_layout, base_dump)?)?;
    let hl = layout
        .highlighted_prompt_line()
        .ok_or_else(|| PipelineError::Data("layout has no highlighted line".into()))?;
    Ok(reduction::vuln_attn_mat(&diff, &layout.instruction_lines, hl)?)
}

// --------------------------------------------------------------- training

fn model_path(dir: &Path, language: &str) -> PathBuf {
    dir.join(format!("{language}.model.json"))
}

/// One model per language, trained on the sequences outside `held_out`.
pub fn train_models(
    features: &[FeatureSequence],
    held_out: Option<(&FoldAssignment, usize)>,
    config: &TrainConfig,
) -> Result<BTreeMap<String, SequenceModel>, PipelineError> {
    let mut by_language: BTreeMap<&str, Vec<FeatureSequence>> = BTreeMap::new();
    for f in features {
        if held_out.is_some_and(|(folds, k)| folds.fold_of(&f.sample_id) == Some(k)) {
            continue;
        }
        by_language.entry(f.language.as_str()).or_default().push(f.clone());
    }
    by_language
        .into_iter()
        .map(|(lang, data)| Ok((lang.to_string(), classifier::train(&data, config)?)))
        .collect()
}

pub fn save_models(dir: &Path, models: &BTreeMap<String, SequenceModel>) -> Result<(), PipelineError> {
    create_dir(dir)?;
    for (lang, m) in models {
        m.save(&model_path(dir, lang))?;
    }
    Ok(())
}

pub fn load_models(dir: &Path) -> Result<BTreeMap<String, SequenceModel>, PipelineError> {
    let mut out = BTreeMap::new();
    let entries = std::fs::read_dir(dir).map_err(|e| io_error(dir, e))?;
    for entry in entries {
        let path = entry.map_err(|e| io_error(dir, e))?.path();
        let name = path.file_name().and_then(|n| n.to_str()).unwrap_or_default();
        if let Some(lang) = name.strip_suffix(".model.json") {
            out.insert(lang.to_string(), SequenceModel::load(&path)?);
        }
    }
    if out.is_empty() {
        return Err(PipelineError::Data(format!("no .model.json files in {}", dir.display())));
    }
    Ok(out)
}

pub fn cmd_train(
    features_path: &Path,
    held_out: Option<(&FoldAssignment, usize)>,
    config: &TrainConfig,
    models_dir: &Path,
) -> Result<(), PipelineError> {
    let features = read_features(features_path)?;
    let models = train_models(&features, held_out, config)?;
    save_models(models_dir, &models)
}

// ------------------------------------------------------------ localization

/// Classifier reports for the sequences inside `only` (all when `None`).
pub fn localize(
    features: &[FeatureSequence],
    models: &BTreeMap<String, SequenceModel>,
    only: Option<(&FoldAssignment, usize)>,
    threshold: f64,
) -> Result<Vec<SuspicionReport>, PipelineError> {
    features
        .iter()
        .filter(|f| only.is_none_or(|(folds, k)| folds.fold_of(&f.sample_id) == Some(k)))
        .map(|f| {
            let model = models.get(&f.language).ok_or_else(|| {
                PipelineError::Data(format!("no model for language {:?} (sample {})", f.language, f.sample_id))
            })?;
            let scores = classifier::score(model, f)?;
            Ok(scoring::classifier_report(&f.sample_id, scores, threshold))
        })
        .collect()
}

pub fn cmd_localize(
    features_path: &Path,
    models_dir: &Path,
    only: Option<(&FoldAssignment, usize)>,
    threshold: f64,
    out: &Path,
) -> Result<(), PipelineError> {
    let features = read_features(features_path)?;
    let models = load_models(models_dir)?;
    let reports = localize(&features, &models, only, threshold)?;
    Ok(scoring::write_reports(out, &reports)?)
}

// -------------------------------------------------------------- evaluation

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Evaluation {
    pub metrics: MetricReport,
    pub loc_buckets: LocBucketReport,
}

pub fn evaluate(
    reports: &[SuspicionReport],
    samples: &[CodeSample],
    metrics: &MetricsConfig,
) -> Result<Evaluation, PipelineError> {
    let truth = truth_of(samples);
    Ok(Evaluation {
        metrics: evaluation::evaluate(reports, &truth, &metrics.top_n, metrics.averaging)?,
        loc_buckets: evaluation::loc_bucket_accuracy(&locs_of(samples), reports, &truth, &metrics.bucket_edges)?,
    })
}

/// Writes `metrics.json`, `metrics.txt` and `loc_buckets.csv` into `dir`.
pub fn write_evaluation(dir: &Path, eval: &Evaluation) -> Result<(), PipelineError> {
    create_dir(dir)?;
    write_json(&dir.join("metrics.json"), eval)?;
    let table = format!("{}\n{}", eval.metrics.to_table(), eval.loc_buckets.to_table());
    write_text(&dir.join("metrics.txt"), &table)?;
    write_text(&dir.join("loc_buckets.csv"), &eval.loc_buckets.to_csv())
}

pub fn cmd_eval(reports_path: &Path, config: &PipelineConfig) -> Result<Evaluation, PipelineError> {
    let samples = load_samples(config)?;
    let reports = scoring::read_reports(reports_path)?;
    let eval = evaluate(&reports, &samples, &config.metrics)?;
    write_evaluation(&config.out_dir, &eval)?;
    Ok(eval)
}

pub fn cmd_baseline(runs_path: &Path, config: &PipelineConfig) -> Result<PathBuf, PipelineError> {
    let samples = load_samples(config)?;
    let locs = locs_of(&samples);
    let runs = scoring::read_run_outputs(runs_path)?;
    let reports = runs
        .iter()
        .map(|r| {
            let loc = *locs
                .get(&r.sample_id)
                .ok_or_else(|| PipelineError::Data(format!("run outputs for unknown sample {:?}", r.sample_id)))?;
            if r.runs.len() != scoring::DEFAULT_BASELINE_RUNS {
                log::info!("sample {}: {} runs recorded", r.sample_id, r.runs.len());
            }
            Ok(scoring::baseline_report(r, loc, config.metrics.threshold)?)
        })
        .collect::<Result<Vec<_>, PipelineError>>()?;
    create_dir(&config.out_dir)?;
    let path = config.out_dir.join("reports.jsonl");
    scoring::write_reports(&path, &reports)?;
    Ok(path)
}

// ---------------------------------------------------------------- full run

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub version: String,
    pub config_sha256: String,
    pub config: PipelineConfig,
    pub strategy: Option<Strategy>,
    pub highlight: HighlightStrategy,
    pub reduction: FlattenStrategy,
    pub classifier_kind: ModelKind,
    pub seeds: BTreeMap<String, u64>,
    pub backend: BackendDescriptor,
    pub samples_loaded: usize,
    pub samples_kept: usize,
    pub fold_sizes: Vec<usize>,
}

#[derive(Debug, Clone)]
pub struct RunResult {
    pub reports: Vec<SuspicionReport>,
    pub fold_evaluations: Vec<Evaluation>,
    pub evaluation: Evaluation,
    pub manifest: Manifest,
}

fn manifest(
    config: &PipelineConfig,
    backend: &Backend,
    loaded: usize,
    kept: usize,
    folds: &FoldAssignment,
) -> Manifest {
    let mut seeds = BTreeMap::from([
        ("folds".to_string(), config.folds.seed),
        ("classifier".to_string(), config.classifier.seed),
    ]);
    if config.backend.kind == BackendKind::Toy {
        seeds.insert("toy".to_string(), config.backend.toy.seed);
    }
    Manifest {
        version: env!("CARGO_PKG_VERSION").to_string(),
        config_sha256: config.config_hash(),
        config: config.clone(),
        strategy: config.strategy,
        highlight: config.highlight,
        reduction: config.reduction,
        classifier_kind: config.classifier.kind,
        seeds,
        backend: backend.inner.descriptor(),
        samples_loaded: loaded,
        samples_kept: kept,
        fold_sizes: folds.fold_sizes(),
    }
}

/// Cross-validated run: features once, then per fold train on the other
/// folds and score the held-out one. Writes
/// `folds.json`, `features.jsonl`, `fold_<i>/{models,reports.jsonl,metrics.*}`,
/// aggregate `reports.jsonl`, `metrics.*` and `manifest.json`.
pub fn run(config: &PipelineConfig) -> Result<RunResult, PipelineError> {
    config.validate()?;
    let loaded = load_samples(config)?;
    let backend = build_backend(config, &loaded)?;
    let samples = filter_samples(&backend, &loaded, config.max_tokens)?;
    let folds = corpus::make_folds(&samples, config.folds.k, config.folds.seed)?;
    let out = &config.out_dir;
    create_dir(out)?;
    corpus::write_folds(&out.join("folds.json"), &folds)?;

    let mats = compute_vuln_mats(&backend, &samples, config)?;
    let features: Vec<FeatureSequence> = samples
        .iter()
        .zip(&mats)
        .map(|(s, m)| features_from_mats(s, m, config.reduction))
        .collect();
    write_features(&out.join("features.jsonl"), &features)?;

    let mut by_id: BTreeMap<String, SuspicionReport> = BTreeMap::new();
    let mut fold_evaluations = Vec::with_capacity(folds.k);
    for k in 0..folds.k {
        let dir = out.join(format!("fold_{k}"));
        let models = train_models(&features, Some((&folds, k)), &config.classifier)?;
        save_models(&dir.join("models"), &models)?;
        let reports = localize(&features, &models, Some((&folds, k)), config.metrics.threshold)?;
        scoring::write_reports(&dir.join("reports.jsonl"), &reports)?;
        let held: Vec<CodeSample> = samples
            .iter()
            .filter(|s| folds.fold_of(&s.id) == Some(k))
            .cloned()
            .collect();
        let eval = evaluate(&reports, &held, &config.metrics)?;
        write_evaluation(&dir, &eval)?;
        log::info!(
            "fold {k}: {} samples, top-1 {:.1}%, f1 {:.1}",
            reports.len(),
            eval.metrics.top_n.get(&1).copied().unwrap_or(0.0),
            eval.metrics.f1
        );
        fold_evaluations.push(eval);
        by_id.extend(reports.into_iter().map(|r| (r.sample_id.clone(), r)));
    }

    let reports: Vec<SuspicionReport> = samples
        .iter()
        .filter_map(|s| by_id.remove(&s.id))
        .collect();
    scoring::write_reports(&out.join("reports.jsonl"), &reports)?;
    let evaluation = evaluate(&reports, &samples, &config.metrics)?;
    write_evaluation(out, &evaluation)?;
    let manifest = manifest(config, &backend, loaded.len(), samples.len(), &folds);
    write_json(&out.join("manifest.json"), &manifest)?;
    Ok(RunResult {
        reports,
        fold_evaluations,
        evaluation,
        manifest,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub strategy: Strategy,
    pub metrics: MetricReport,
}

/// Runs each variant into `<out>/<name>/` and writes `ablation.json` and
/// `ablation.txt` summaries.
pub fn ablate(config: &PipelineConfig, strategies: &[Strategy]) -> Result<Vec<AblationRow>, PipelineError> {
    let mut rows = Vec::with_capacity(strategies.len());
    for &s in strategies {
        let mut c = config.clone();
        s.apply(&mut c);
        c.out_dir = config.out_dir.join(s.name());
        let result = run(&c)?;
        rows.push(AblationRow {
            strategy: s,
            metrics: result.evaluation.metrics,
        });
    }
    write_json(&config.out_dir.join("ablation.json"), &rows)?;
    let mut table = format!("{:<8}{:>9}{:>9}{:>9}", "variant", "P", "R", "F1");
    let ns: BTreeSet<usize> = rows.iter().flat_map(|r| r.metrics.top_n.keys().copied()).collect();
    for n in &ns {
        table.push_str(&format!("{:>9}", format!("top-{n}")));
    }
    table.push('\n');
    for r in &rows {
        let m = &r.metrics;
        table.push_str(&format!(
            "{:<8}{:>9.2}{:>9.2}{:>9.2}",
            r.strategy.name(),
            m.precision,
            m.recall,
            m.f1
        ));
        for n in &ns {
            table.push_str(&format!("{:>9.2}", m.top_n.get(n).copied().unwrap_or(0.0)));
        }
        table.push('\n');
    }
    write_text(&config.out_dir.join("ablation.txt"), &table)?;
    Ok(rows)
}

/// Writes a matrix file for debugging, `.lam.json` or `.vam.json`.
pub fn write_matrix(path: &Path, m: &Matrix) -> Result<(), PipelineError> {
    Ok(reduction::write_matrix_json(path, m)?)
}

/// Appends the one-line error and returns the exit code.
pub fn report_error(err: &PipelineError, mut sink: impl Write) -> i32 {
    let _ = writeln!(sink, "attnloc: {err}");
    err.exit_code()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn strategy_presets() {
        let mut c = PipelineConfig::default();
        Strategy::LovaA.apply(&mut c);
        assert_eq!(c.reduction, FlattenStrategy::AvgPool);
        Strategy::LovaC.apply(&mut c);
        assert_eq!(c.reduction, FlattenStrategy::Layerwise);
        assert_eq!(c.highlight, HighlightStrategy::MarkerComment);
        Strategy::LovaV.apply(&mut c);
        assert_eq!(c.classifier.kind, ModelKind::Mlp);
        assert_eq!(Strategy::parse("lova-a"), Some(Strategy::LovaA));
        assert_eq!(serde_json::to_string(&Strategy::LovaC).unwrap(), "\"lova-c\"");
    }

    #[test]
    fn config_roundtrip_and_hash() {
        let c = PipelineConfig::default();
        let back: PipelineConfig = serde_json::from_str(&c.canonical_json()).unwrap();
        assert_eq!(back, c);
        assert_eq!(back.config_hash(), c.config_hash());
        let partial: PipelineConfig = serde_json::from_str(r#"{"folds":{"k":3}}"#).unwrap();
        assert_eq!(partial.folds.k, 3);
        assert_eq!(partial.folds.seed, 0);
    }

    #[test]
    fn validation_and_exit_codes() {
        let mut c = PipelineConfig::default();
        c.folds.k = 1;
        assert_eq!(c.validate().unwrap_err().exit_code(), EXIT_CONFIG);
        let mut c = PipelineConfig::default();
        c.backend.kind = BackendKind::Dump;
        assert_eq!(c.validate().unwrap_err().exit_code(), EXIT_CONFIG);
        let mut c = PipelineConfig::default();
        c.dataset = PathBuf::from("/nonexistent/data.jsonl");
        assert_eq!(run(&c).unwrap_err().exit_code(), EXIT_DATA);
    }
}
