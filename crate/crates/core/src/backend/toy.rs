//! A small deterministic decoder-only transformer over bytes.
//!
//! Architecture per layer (no normalisation):
//!
//! ```text
//! q, k, v = h Wq, h Wk, h Wv            split into heads
//! A_head  = softmax(q k^T / sqrt(d_head) + causal mask)
//! mid     = h + concat(A_head v_head) Wo
//! out     = mid + tanh(mid W1 + b1) W2 + b2
//! ```
//!
//! followed by a vocabulary projection. Parameters are a pure function of the
//! seed until [`calibrate`] runs gradient descent on the next-token loss.

use ndarray::{s, Array1, Array2, ArrayView2, Axis};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use super::{
    AttentionBackend, AttentionPayload, AttentionStream, BackendDescriptor, BackendError,
    BackendKind, Granularity, TokenizationResult, Tokenize,
};

pub const BEGIN_TOKEN: usize = 256;
pub const VOCAB_SIZE: usize = 257;
/// Full-granularity prefill is refused above this many tokens.
pub const FULL_GRANULARITY_LIMIT: usize = 512;

#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(default)]
pub struct ToyConfig {
    pub d_model: usize,
    pub num_layers: usize,
    pub num_heads: usize,
    pub max_seq: usize,
    pub d_ff: usize,
}

impl Default for ToyConfig {
    fn default() -> Self {
        Self {
            d_model: 32,
            num_layers: 4,
            num_heads: 4,
            max_seq: 2048,
            d_ff: 64,
        }
    }
}

impl ToyConfig {
    pub fn validate(&self) -> Result<(), BackendError> {
        let bad = |m: &str| Err(BackendError::InvalidConfig(m.to_string()));
        if self.num_layers == 0 || self.num_heads == 0 {
            return bad("num_layers and num_heads must be at least 1");
        }
        if self.d_model == 0 || self.d_model % self.num_heads != 0 {
            return bad("d_model must be a positive multiple of num_heads");
        }
        if self.max_seq < 2 || self.d_ff == 0 {
            return bad("max_seq must be at least 2 and d_ff positive");
        }
        Ok(())
    }

    fn d_head(&self) -> usize {
        self.d_model / self.num_heads
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LayerParams {
    pub wq: Array2<f64>,
    pub wk: Array2<f64>,
    pub wv: Array2<f64>,
    pub wo: Array2<f64>,
    pub w1: Array2<f64>,
    pub b1: Array1<f64>,
    pub w2: Array2<f64>,
    pub b2: Array1<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ToyModelParams {
    pub seed: u64,
    pub config: ToyConfig,
    pub tok_emb: Array2<f64>,
    pub pos_emb: Array2<f64>,
    pub layers: Vec<LayerParams>,
    pub w_out: Array2<f64>,
    pub b_out: Array1<f64>,
}

fn normal(rng: &mut ChaCha8Rng, rows: usize, cols: usize, std: f64) -> Array2<f64> {
    let dist = Normal::new(0.0, std).expect("finite std");
    Array2::from_shape_fn((rows, cols), |_| dist.sample(rng))
}

impl ToyModelParams {
    pub fn init(seed: u64, config: ToyConfig) -> Result<Self, BackendError> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let d = config.d_model;
        let f = config.d_ff;
        let inv_d = (1.0 / d as f64).sqrt();
        let tok_emb = normal(&mut rng, VOCAB_SIZE, d, 1.0);
        let pos_emb = normal(&mut rng, config.max_seq, d, 0.2);
        let layers = (0..config.num_layers)
            .map(|_| LayerParams {
                wq: normal(&mut rng, d, d, inv_d),
                wk: normal(&mut rng, d, d, inv_d),
                wv: normal(&mut rng, d, d, inv_d),
                wo: normal(&mut rng, d, d, inv_d),
                w1: normal(&mut rng, d, f, inv_d),
                b1: Array1::zeros(f),
                w2: normal(&mut rng, f, d, 0.5 / (f as f64).sqrt()),
                b2: Array1::zeros(d),
            })
            .collect();
        let w_out = normal(&mut rng, d, VOCAB_SIZE, inv_d);
        Ok(Self {
            seed,
            config,
            tok_emb,
            pos_emb,
            layers,
            w_out,
            b_out: Array1::zeros(VOCAB_SIZE),
        })
    }

    fn zeros_like(&self) -> Self {
        let z2 = |a: &Array2<f64>| Array2::zeros(a.raw_dim());
        let z1 = |a: &Array1<f64>| Array1::zeros(a.raw_dim());
        Self {
            seed: self.seed,
            config: self.config,
            tok_emb: z2(&self.tok_emb),
            pos_emb: z2(&self.pos_emb),
            layers: self
                .layers
                .iter()
                .map(|l| LayerParams {
                    wq: z2(&l.wq),
                    wk: z2(&l.wk),
                    wv: z2(&l.wv),
                    wo: z2(&l.wo),
                    w1: z2(&l.w1),
                    b1: z1(&l.b1),
                    w2: z2(&l.w2),
                    b2: z1(&l.b2),
                })
                .collect(),
            w_out: z2(&self.w_out),
            b_out: z1(&self.b_out),
        }
    }

    /// Named flat views of every parameter tensor, in a fixed order.
    pub fn tensors(&self) -> Vec<(String, &[f64])> {
        let mut out: Vec<(String, &[f64])> = vec![
            ("tok_emb".into(), self.tok_emb.as_slice().unwrap()),
            ("pos_emb".into(), self.pos_emb.as_slice().unwrap()),
        ];
        for (i, l) in self.layers.iter().enumerate() {
            out.extend([
                (format!("layer{i}.wq"), l.wq.as_slice().unwrap()),
                (format!("layer{i}.wk"), l.wk.as_slice().unwrap()),
                (format!("layer{i}.wv"), l.wv.as_slice().unwrap()),
                (format!("layer{i}.wo"), l.wo.as_slice().unwrap()),
                (format!("layer{i}.w1"), l.w1.as_slice().unwrap()),
                (format!("layer{i}.b1"), l.b1.as_slice().unwrap()),
                (format!("layer{i}.w2"), l.w2.as_slice().unwrap()),
                (format!("layer{i}.b2"), l.b2.as_slice().unwrap()),
            ]);
        }
        out.push(("w_out".into(), self.w_out.as_slice().unwrap()));
        out.push(("b_out".into(), self.b_out.as_slice().unwrap()));
        out
    }

    /// Mutable counterpart of [`Self::tensors`], same order.
    pub fn tensors_mut(&mut self) -> Vec<&mut [f64]> {
        let mut out: Vec<&mut [f64]> = vec![
            self.tok_emb.as_slice_mut().unwrap(),
            self.pos_emb.as_slice_mut().unwrap(),
        ];
        for l in &mut self.layers {
            out.extend([
                l.wq.as_slice_mut().unwrap(),
                l.wk.as_slice_mut().unwrap(),
                l.wv.as_slice_mut().unwrap(),
                l.wo.as_slice_mut().unwrap(),
                l.w1.as_slice_mut().unwrap(),
                l.b1.as_slice_mut().unwrap(),
                l.w2.as_slice_mut().unwrap(),
                l.b2.as_slice_mut().unwrap(),
            ]);
        }
        out.push(self.w_out.as_slice_mut().unwrap());
        out.push(self.b_out.as_slice_mut().unwrap());
        out
    }
}

/// Byte-level tokens with a leading begin token.
pub fn byte_tokens(text: &str) -> Vec<usize> {
    std::iter::once(BEGIN_TOKEN)
        .chain(text.bytes().map(usize::from))
        .collect()
}

struct LayerCache {
    input: Array2<f64>,
    q: Array2<f64>,
    k: Array2<f64>,
    v: Array2<f64>,
    attn: Vec<Array2<f64>>,
    ctx: Array2<f64>,
    mid: Array2<f64>,
    act: Array2<f64>,
}

struct ForwardCache {
    layers: Vec<LayerCache>,
    output: Array2<f64>,
}

/// Causal softmax of `scale * q k^T`. Entries above the diagonal are exactly 0.
fn causal_attention(q: ArrayView2<f64>, k: ArrayView2<f64>, scale: f64) -> Array2<f64> {
    let mut scores = q.dot(&k.t());
    let t = scores.nrows();
    for i in 0..t {
        let mut row = scores.row_mut(i);
        let max = row
            .iter()
            .take(i + 1)
            .fold(f64::NEG_INFINITY, |m, &v| m.max(v * scale));
        let mut sum = 0.0;
        for j in 0..=i {
            let e = (row[j] * scale - max).exp();
            row[j] = e;
            sum += e;
        }
        for j in 0..=i {
            row[j] /= sum;
        }
        for j in i + 1..t {
            row[j] = 0.0;
        }
    }
    scores
}

/// Runs the stack. `on_attention(layer, head, matrix)` sees every head's
/// attention; caches are kept only when `keep_cache` is set.
fn forward(
    params: &ToyModelParams,
    tokens: &[usize],
    keep_cache: bool,
    on_attention: &mut dyn FnMut(usize, usize, &Array2<f64>),
) -> (Array2<f64>, Option<ForwardCache>) {
    let cfg = params.config;
    let t = tokens.len();
    let dh = cfg.d_head();
    let scale = 1.0 / (dh as f64).sqrt();
    let mut h = Array2::zeros((t, cfg.d_model));
    for (i, &tok) in tokens.iter().enumerate() {
        let mut row = h.row_mut(i);
        row += &params.tok_emb.row(tok);
        row += &params.pos_emb.row(i);
    }
    let mut caches = Vec::new();
    for (li, lp) in params.layers.iter().enumerate() {
        let q = h.dot(&lp.wq);
        let k = h.dot(&lp.wk);
        let v = h.dot(&lp.wv);
        let mut ctx = Array2::zeros((t, cfg.d_model));
        let mut attn = Vec::new();
        for head in 0..cfg.num_heads {
            let cols = s![.., head * dh..(head + 1) * dh];
            let a = causal_attention(q.slice(cols), k.slice(cols), scale);
            on_attention(li, head, &a);
            ctx.slice_mut(cols).assign(&a.dot(&v.slice(cols)));
            if keep_cache {
                attn.push(a);
            }
        }
        let mid = &h + &ctx.dot(&lp.wo);
        let act = (mid.dot(&lp.w1) + &lp.b1).mapv(f64::tanh);
        let out = &mid + &act.dot(&lp.w2) + &lp.b2;
        if keep_cache {
            caches.push(LayerCache {
                input: h,
                q,
                k,
                v,
                attn,
                ctx,
                mid,
                act,
            });
        }
        h = out;
    }
    let logits = h.dot(&params.w_out) + &params.b_out;
    let cache = keep_cache.then(|| ForwardCache {
        layers: caches,
        output: h,
    });
    (logits, cache)
}

fn log_softmax_row(row: ndarray::ArrayView1<f64>) -> Array1<f64> {
    let max = row.fold(f64::NEG_INFINITY, |m, &v| m.max(v));
    let lse = max + row.mapv(|v| (v - max).exp()).sum().ln();
    row.mapv(|v| v - lse)
}

fn check_corpus(params: &ToyModelParams, corpus: &[&str]) -> Result<Vec<Vec<usize>>, BackendError> {
    let seqs: Vec<Vec<usize>> = corpus
        .iter()
        .filter(|s| !s.is_empty())
        .map(|s| byte_tokens(s))
        .collect();
    if seqs.is_empty() {
        return Err(BackendError::EmptyCorpus);
    }
    for s in &seqs {
        if s.len() > params.config.max_seq {
            return Err(BackendError::SequenceTooLong {
                len: s.len(),
                max: params.config.max_seq,
            });
        }
    }
    Ok(seqs)
}

/// Mean next-token negative log-likelihood over every predicted position of
/// every corpus string.
pub fn ntp_loss(params: &ToyModelParams, corpus: &[&str]) -> Result<f64, BackendError> {
    let seqs = check_corpus(params, corpus)?;
    let count: usize = seqs.iter().map(|s| s.len() - 1).sum();
    let mut total = 0.0;
    for seq in &seqs {
        let (logits, _) = forward(params, seq, false, &mut |_, _, _| {});
        for pos in 0..seq.len() - 1 {
            total -= log_softmax_row(logits.row(pos))[seq[pos + 1]];
        }
    }
    Ok(total / count as f64)
}

/// Loss and analytic gradient of [`ntp_loss`].
pub fn ntp_loss_and_grad(
    params: &ToyModelParams,
    corpus: &[&str],
) -> Result<(f64, ToyModelParams), BackendError> {
    let seqs = check_corpus(params, corpus)?;
    let count: usize = seqs.iter().map(|s| s.len() - 1).sum();
    let norm = 1.0 / count as f64;
    let cfg = params.config;
    let dh = cfg.d_head();
    let scale = 1.0 / (dh as f64).sqrt();
    let mut grad = params.zeros_like();
    let mut total = 0.0;

    for seq in &seqs {
        let t = seq.len();
        let (logits, cache) = forward(params, seq, true, &mut |_, _, _| {});
        let cache = cache.unwrap();
        let mut dlogits = Array2::zeros(logits.raw_dim());
        for pos in 0..t - 1 {
            let logp = log_softmax_row(logits.row(pos));
            let target = seq[pos + 1];
            total -= logp[target];
            let mut drow = dlogits.row_mut(pos);
            drow.assign(&logp.mapv(|v| v.exp() * norm));
            drow[target] -= norm;
        }
        grad.w_out += &cache.output.t().dot(&dlogits);
        grad.b_out += &dlogits.sum_axis(Axis(0));
        let mut dh_stream = dlogits.dot(&params.w_out.t());

        for (li, lc) in cache.layers.iter().enumerate().rev() {
            let lp = &params.layers[li];
            let lg = &mut grad.layers[li];
            // feed-forward block
            lg.w2 += &lc.act.t().dot(&dh_stream);
            lg.b2 += &dh_stream.sum_axis(Axis(0));
            let dz = dh_stream.dot(&lp.w2.t()) * lc.act.mapv(|a| 1.0 - a * a);
            lg.w1 += &lc.mid.t().dot(&dz);
            lg.b1 += &dz.sum_axis(Axis(0));
            let dmid = dh_stream + dz.dot(&lp.w1.t());
            // attention block
            lg.wo += &lc.ctx.t().dot(&dmid);
            let dctx = dmid.dot(&lp.wo.t());
            let mut dq = Array2::zeros((t, cfg.d_model));
            let mut dk = Array2::zeros((t, cfg.d_model));
            let mut dv = Array2::zeros((t, cfg.d_model));
            for head in 0..cfg.num_heads {
                let cols = s![.., head * dh..(head + 1) * dh];
                let a = &lc.attn[head];
                let dctx_h = dctx.slice(cols);
                let da = dctx_h.dot(&lc.v.slice(cols).t());
                dv.slice_mut(cols).assign(&a.t().dot(&dctx_h));
                let mut ds = a * &da;
                for (i, mut row) in ds.rows_mut().into_iter().enumerate() {
                    let dot: f64 = row.sum();
                    for j in 0..=i {
                        row[j] -= a[[i, j]] * dot;
                    }
                }
                ds *= scale;
                dq.slice_mut(cols).assign(&ds.dot(&lc.k.slice(cols)));
                dk.slice_mut(cols).assign(&ds.t().dot(&lc.q.slice(cols)));
            }
            lg.wq += &lc.input.t().dot(&dq);
            lg.wk += &lc.input.t().dot(&dk);
            lg.wv += &lc.input.t().dot(&dv);
            dh_stream = dmid + dq.dot(&lp.wq.t()) + dk.dot(&lp.wk.t()) + dv.dot(&lp.wv.t());
        }
        for (pos, &tok) in seq.iter().enumerate() {
            let row = dh_stream.row(pos);
            let mut te = grad.tok_emb.row_mut(tok);
            te += &row;
            let mut pe = grad.pos_emb.row_mut(pos);
            pe += &row;
        }
    }
    Ok((total * norm, grad))
}

/// Outcome of [`calibrate`]: updated parameters and the loss before each
/// step plus the final loss (`steps + 1` entries; empty when `steps == 0`).
#[derive(Debug, Clone)]
pub struct Calibration {
    pub params: ToyModelParams,
    pub loss_trace: Vec<f64>,
}

/// Full-batch gradient descent on the next-token loss.
pub fn calibrate(
    params: &ToyModelParams,
    corpus: &[&str],
    steps: usize,
    learning_rate: f64,
) -> Result<Calibration, BackendError> {
    let mut current = params.clone();
    let mut loss_trace = Vec::new();
    if steps == 0 {
        return Ok(Calibration {
            params: current,
            loss_trace,
        });
    }
    if !(learning_rate > 0.0 && learning_rate.is_finite()) {
        return Err(BackendError::InvalidConfig(format!(
            "learning rate must be positive, got {learning_rate}"
        )));
    }
    for _ in 0..steps {
        let (loss, grad) = ntp_loss_and_grad(&current, corpus)?;
        loss_trace.push(loss);
        for (p, g) in current.tensors_mut().into_iter().zip(grad.tensors()) {
            for (pv, gv) in p.iter_mut().zip(g.1) {
                *pv -= learning_rate * gv;
            }
        }
    }
    loss_trace.push(ntp_loss(&current, corpus)?);
    Ok(Calibration {
        params: current,
        loss_trace,
    })
}

/// Attention backend over a [`ToyModelParams`].
#[derive(Debug, Clone)]
pub struct ToyTransformer {
    params: ToyModelParams,
}

impl ToyTransformer {
    pub fn new(params: ToyModelParams) -> Self {
        Self { params }
    }

    pub fn from_seed(seed: u64, config: ToyConfig) -> Result<Self, BackendError> {
        Ok(Self::new(ToyModelParams::init(seed, config)?))
    }

    pub fn params(&self) -> &ToyModelParams {
        &self.params
    }
}

impl Tokenize for ToyTransformer {
    fn tokenize(&self, text: &str) -> Result<TokenizationResult, BackendError> {
        if text.is_empty() {
            return Err(BackendError::EmptyText);
        }
        let token_offsets = std::iter::once((0, 0))
            .chain((0..text.len()).map(|i| (i, i + 1)))
            .collect();
        Ok(TokenizationResult { token_offsets })
    }
}

impl AttentionBackend for ToyTransformer {
    fn descriptor(&self) -> BackendDescriptor {
        BackendDescriptor {
            num_layers: self.params.config.num_layers,
            num_heads: self.params.config.num_heads,
            backend_kind: BackendKind::Toy,
        }
    }

    fn prefill_attention(
        &self,
        prompt: &str,
        granularity: Granularity,
    ) -> Result<(TokenizationResult, AttentionStream), BackendError> {
        let tokenization = self.tokenize(prompt)?;
        let t = tokenization.num_tokens();
        let cfg = self.params.config;
        if t > cfg.max_seq {
            return Err(BackendError::SequenceTooLong {
                len: t,
                max: cfg.max_seq,
            });
        }
        if granularity == Granularity::Full && t > FULL_GRANULARITY_LIMIT {
            return Err(BackendError::GranularityUnsupported {
                num_tokens: t,
                limit: FULL_GRANULARITY_LIMIT,
            });
        }
        let tokens = byte_tokens(prompt);
        let descriptor = self.descriptor();
        let payload = match granularity {
            Granularity::Full => {
                let mut data = Vec::with_capacity(AttentionStream::expected_len(&descriptor, t, granularity));
                forward(&self.params, &tokens, false, &mut |_, _, a| {
                    data.extend(a.iter().map(|&v| v as f32));
                });
                AttentionPayload::Full(data)
            }
            Granularity::LastTokenHeadSummed => {
                let mut acc = vec![0f64; cfg.num_layers * t];
                forward(&self.params, &tokens, false, &mut |layer, _, a| {
                    for (dst, &v) in acc[layer * t..(layer + 1) * t].iter_mut().zip(a.row(t - 1)) {
                        *dst += v;
                    }
                });
                AttentionPayload::LastTokenHeadSummed(acc.into_iter().map(|v| v as f32).collect())
            }
        };
        Ok((
            tokenization,
            AttentionStream {
                descriptor,
                num_tokens: t,
                payload,
            },
        ))
    }
}
