//! Per-line sequence classifier over flattened attention-shift features.
//!
//! The default model is a single-layer bidirectional LSTM followed by an
//! affine head and a sigmoid at every step; the `mlp` kind scores each line
//! on its own. Both are trained with binary cross-entropy by per-program
//! gradient descent with global gradient-norm clipping. Features are
//! z-scored with statistics from the training data.

pub mod lstm;
pub mod mlp;

use std::collections::BTreeMap;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use lstm::BiLstm;
pub use mlp::Mlp;

/// Probability clipping for the loss.
pub const BCE_EPSILON: f64 = 1e-7;

#[derive(Debug, Error)]
pub enum ClassifierError {
    #[error("feature dimension mismatch: expected {expected}, found {found} ({context})")]
    DimensionMismatch {
        expected: usize,
        found: usize,
        context: String,
    },
    #[error("training set is empty")]
    EmptyTrainingSet,
    #[error("sequence {0:?} has no labels")]
    MissingLabels(String),
    #[error("{predictions} predictions but {labels} labels")]
    LengthMismatch { predictions: usize, labels: usize },
    #[error("invalid classifier configuration: {0}")]
    InvalidConfig(String),
    #[error("model file {path}: {message}")]
    ModelFile { path: String, message: String },
}

pub(crate) fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Per-line feature vectors of one program.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FeatureSequence {
    pub sample_id: String,
    #[serde(default)]
    pub language: String,
    pub features: Vec<Vec<f64>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub labels: Option<Vec<u8>>,
}

impl FeatureSequence {
    pub fn dim(&self) -> Option<usize> {
        self.features.first().map(Vec::len)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ModelKind {
    Bilstm,
    Mlp,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub kind: ModelKind,
    pub hidden_dim: usize,
    pub learning_rate: f64,
    pub epochs: usize,
    pub seed: u64,
    pub clip_norm: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            kind: ModelKind::Bilstm,
            hidden_dim: 64,
            learning_rate: 1e-3,
            epochs: 100,
            seed: 0,
            clip_norm: 5.0,
        }
    }
}

/// Per-dimension z-score.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Normalizer {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

impl Normalizer {
    pub fn identity(dim: usize) -> Self {
        Self {
            mean: vec![0.0; dim],
            std: vec![1.0; dim],
        }
    }

    /// Fits over every line of every sequence. Constant dimensions get std 1.
    pub fn fit(data: &[FeatureSequence], dim: usize) -> Self {
        let rows: Vec<&Vec<f64>> = data.iter().flat_map(|s| &s.features).collect();
        if rows.is_empty() {
            return Self::identity(dim);
        }
        let n = rows.len() as f64;
        let mut mean = vec![0.0; dim];
        for r in &rows {
            for (m, v) in mean.iter_mut().zip(r.iter()) {
                *m += v;
            }
        }
        mean.iter_mut().for_each(|m| *m /= n);
        let mut var = vec![0.0; dim];
        for r in &rows {
            for ((acc, v), m) in var.iter_mut().zip(r.iter()).zip(&mean) {
                *acc += (v - m) * (v - m);
            }
        }
        let std = var
            .into_iter()
            .map(|v| {
                let s = (v / n).sqrt();
                if s > 1e-12 {
                    s
                } else {
                    1.0
                }
            })
            .collect();
        Self { mean, std }
    }

    pub fn apply(&self, features: &[Vec<f64>]) -> Vec<Vec<f64>> {
        features
            .iter()
            .map(|x| {
                x.iter()
                    .zip(self.mean.iter().zip(&self.std))
                    .map(|(v, (m, s))| (v - m) / s)
                    .collect()
            })
            .collect()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum Network {
    Bilstm(BiLstm),
    Mlp(Mlp),
}

impl Network {
    fn init(kind: ModelKind, seed: u64, d: usize, h: usize) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        match kind {
            ModelKind::Bilstm => Network::Bilstm(BiLstm::init(&mut rng, d, h)),
            ModelKind::Mlp => Network::Mlp(Mlp::init(&mut rng, d, h)),
        }
    }

    pub fn kind(&self) -> ModelKind {
        match self {
            Network::Bilstm(_) => ModelKind::Bilstm,
            Network::Mlp(_) => ModelKind::Mlp,
        }
    }

    pub fn logits(&self, xs: &[Vec<f64>]) -> Vec<f64> {
        match self {
            Network::Bilstm(m) => m.logits(xs),
            Network::Mlp(m) => m.logits(xs),
        }
    }

    /// Mean BCE over the sequence and its gradient.
    pub fn loss_and_grad(&self, xs: &[Vec<f64>], labels: &[u8]) -> (f64, Network) {
        let lg = |logits: &[f64]| bce_with_grad(logits, labels);
        match self {
            Network::Bilstm(m) => {
                let (l, g) = m.backward(xs, lg);
                (l, Network::Bilstm(g))
            }
            Network::Mlp(m) => {
                let (l, g) = m.backward(xs, lg);
                (l, Network::Mlp(g))
            }
        }
    }

    pub fn tensors(&self) -> Vec<(&'static str, &[f64])> {
        match self {
            Network::Bilstm(m) => m.tensors(),
            Network::Mlp(m) => m.tensors(),
        }
    }

    pub fn tensors_mut(&mut self) -> Vec<(&'static str, &mut Vec<f64>)> {
        match self {
            Network::Bilstm(m) => m.tensors_mut(),
            Network::Mlp(m) => m.tensors_mut(),
        }
    }
}

/// Loss and `dL/dlogit` for mean BCE with clipped probabilities. Clipped
/// entries get zero gradient.
fn bce_with_grad(logits: &[f64], labels: &[u8]) -> (f64, Vec<f64>) {
    let n = logits.len() as f64;
    let mut loss = 0.0;
    let grads = logits
        .iter()
        .zip(labels)
        .map(|(&z, &y)| {
            let p = sigmoid(z);
            let pc = p.clamp(BCE_EPSILON, 1.0 - BCE_EPSILON);
            let y = f64::from(y);
            loss -= y * pc.ln() + (1.0 - y) * (1.0 - pc).ln();
            if pc != p {
                0.0
            } else {
                (p - y) / n
            }
        })
        .collect();
    (loss / n, grads)
}

/// Mean binary cross-entropy with predictions clipped to `[ε, 1 − ε]`.
pub fn bce_loss(predictions: &[f64], labels: &[u8]) -> Result<f64, ClassifierError> {
    if predictions.len() != labels.len() {
        return Err(ClassifierError::LengthMismatch {
            predictions: predictions.len(),
            labels: labels.len(),
        });
    }
    if predictions.is_empty() {
        return Ok(0.0);
    }
    let total: f64 = predictions
        .iter()
        .zip(labels)
        .map(|(&p, &y)| {
            let p = p.clamp(BCE_EPSILON, 1.0 - BCE_EPSILON);
            let y = f64::from(y);
            -(y * p.ln() + (1.0 - y) * (1.0 - p).ln())
        })
        .sum();
    Ok(total / predictions.len() as f64)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainingMeta {
    pub epochs: usize,
    pub learning_rate: f64,
    pub clip_norm: f64,
    /// Mean per-sequence loss for each epoch, computed before each update.
    pub loss_trace: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SequenceModel {
    pub input_dim: usize,
    pub hidden_dim: usize,
    pub seed: u64,
    pub normalizer: Normalizer,
    pub network: Network,
    pub training: TrainingMeta,
}

impl SequenceModel {
    pub fn kind(&self) -> ModelKind {
        self.network.kind()
    }
}

fn check_dims(data: &[FeatureSequence], d: usize) -> Result<(), ClassifierError> {
    for s in data {
        if let Some(bad) = s.features.iter().find(|x| x.len() != d) {
            return Err(ClassifierError::DimensionMismatch {
                expected: d,
                found: bad.len(),
                context: s.sample_id.clone(),
            });
        }
    }
    Ok(())
}

/// Scales every gradient tensor so the global L2 norm is at most `max_norm`.
fn clip_gradients(grad: &mut Network, max_norm: f64) {
    let norm = grad
        .tensors()
        .iter()
        .flat_map(|(_, t)| t.iter())
        .map(|v| v * v)
        .sum::<f64>()
        .sqrt();
    if norm > max_norm && norm > 0.0 {
        let s = max_norm / norm;
        for (_, t) in grad.tensors_mut() {
            t.iter_mut().for_each(|v| *v *= s);
        }
    }
}

pub fn train(data: &[FeatureSequence], config: &TrainConfig) -> Result<SequenceModel, ClassifierError> {
    let data: Vec<&FeatureSequence> = data.iter().filter(|s| !s.features.is_empty()).collect();
    let first = data.first().ok_or(ClassifierError::EmptyTrainingSet)?;
    let d = first.dim().unwrap();
    if config.hidden_dim == 0 || !(config.learning_rate > 0.0) || !(config.clip_norm > 0.0) {
        return Err(ClassifierError::InvalidConfig(
            "hidden_dim, learning_rate and clip_norm must be positive".into(),
        ));
    }
    let owned: Vec<FeatureSequence> = data.iter().map(|s| (*s).clone()).collect();
    check_dims(&owned, d)?;
    let mut prepared = Vec::with_capacity(owned.len());
    let normalizer = Normalizer::fit(&owned, d);
    for s in &owned {
        let labels = s
            .labels
            .clone()
            .ok_or_else(|| ClassifierError::MissingLabels(s.sample_id.clone()))?;
        if labels.len() != s.features.len() {
            return Err(ClassifierError::LengthMismatch {
                predictions: s.features.len(),
                labels: labels.len(),
            });
        }
        prepared.push((normalizer.apply(&s.features), labels));
    }

    let mut network = Network::init(config.kind, config.seed, d, config.hidden_dim);
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed.wrapping_add(1));
    let mut order: Vec<usize> = (0..prepared.len()).collect();
    let mut loss_trace = Vec::with_capacity(config.epochs);
    for _ in 0..config.epochs {
        order.shuffle(&mut rng);
        let mut epoch_loss = 0.0;
        for &i in &order {
            let (xs, ys) = &prepared[i];
            let (loss, mut grad) = network.loss_and_grad(xs, ys);
            epoch_loss += loss;
            clip_gradients(&mut grad, config.clip_norm);
            for ((_, p), (_, g)) in network.tensors_mut().into_iter().zip(grad.tensors()) {
                for (pv, gv) in p.iter_mut().zip(g) {
                    *pv -= config.learning_rate * gv;
                }
            }
        }
        loss_trace.push(epoch_loss / prepared.len() as f64);
    }
    Ok(SequenceModel {
        input_dim: d,
        hidden_dim: config.hidden_dim,
        seed: config.seed,
        normalizer,
        network,
        training: TrainingMeta {
            epochs: config.epochs,
            learning_rate: config.learning_rate,
            clip_norm: config.clip_norm,
            loss_trace,
        },
    })
}

/// Per-line probabilities in `(0, 1)`.
pub fn score(model: &SequenceModel, seq: &FeatureSequence) -> Result<Vec<f64>, ClassifierError> {
    check_dims(std::slice::from_ref(seq), model.input_dim)?;
    if seq.features.is_empty() {
        return Ok(Vec::new());
    }
    let xs = model.normalizer.apply(&seq.features);
    Ok(model.network.logits(&xs).into_iter().map(sigmoid).collect())
}

#[derive(Serialize, Deserialize)]
struct ModelFile {
    kind: ModelKind,
    #[serde(rename = "D")]
    d: usize,
    #[serde(rename = "H")]
    h: usize,
    seed: u64,
    normalizer: Normalizer,
    params: BTreeMap<String, Vec<f64>>,
    training: TrainingMeta,
}

impl SequenceModel {
    pub fn to_json(&self) -> String {
        let params = self
            .network
            .tensors()
            .into_iter()
            .map(|(n, t)| (n.to_string(), t.to_vec()))
            .collect();
        let file = ModelFile {
            kind: self.kind(),
            d: self.input_dim,
            h: self.hidden_dim,
            seed: self.seed,
            normalizer: self.normalizer.clone(),
            params,
            training: self.training.clone(),
        };
        serde_json::to_string_pretty(&file).expect("model serializes")
    }

    pub fn from_json(text: &str) -> Result<Self, String> {
        let mut file: ModelFile = serde_json::from_str(text).map_err(|e| e.to_string())?;
        if file.normalizer.mean.len() != file.d || file.normalizer.std.len() != file.d {
            return Err("normalizer length does not match D".into());
        }
        let mut network = Network::init(file.kind, 0, file.d, file.h);
        for (name, tensor) in network.tensors_mut() {
            let stored = file
                .params
                .remove(name)
                .ok_or_else(|| format!("missing parameter {name}"))?;
            if stored.len() != tensor.len() {
                return Err(format!(
                    "parameter {name} has {} values, expected {}",
                    stored.len(),
                    tensor.len()
                ));
            }
            *tensor = stored;
        }
        if let Some(extra) = file.params.keys().next() {
            return Err(format!("unexpected parameter {extra}"));
        }
        Ok(Self {
            input_dim: file.d,
            hidden_dim: file.h,
            seed: file.seed,
            normalizer: file.normalizer,
            network,
            training: file.training,
        })
    }

    pub fn save(&self, path: &Path) -> Result<(), ClassifierError> {
        std::fs::write(path, self.to_json()).map_err(|e| ClassifierError::ModelFile {
            path: path.display().to_string(),
            message: e.to_string(),
        })
    }

    pub fn load(path: &Path) -> Result<Self, ClassifierError> {
        let err = |message: String| ClassifierError::ModelFile {
            path: path.display().to_string(),
            message,
        };
        let text = std::fs::read_to_string(path).map_err(|e| err(e.to_string()))?;
        Self::from_json(&text).map_err(err)
    }
}
