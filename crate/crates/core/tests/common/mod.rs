//! Independent oracles shared by the integration tests.
#![allow(dead_code)]

use std::collections::BTreeSet;
use std::ops::Range;

use attnloc::backend::{AttentionPayload, AttentionStream, BackendDescriptor, BackendKind};
use attnloc::classifier::{bce_loss, Network};
use attnloc::prompting::LineTokenSpans;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Dense `[layer][head][query][key]` tensor with causal softmax rows.
#[derive(Debug, Clone)]
pub struct Tensor4 {
    pub layers: usize,
    pub heads: usize,
    pub tokens: usize,
    pub data: Vec<Vec<Vec<Vec<f64>>>>,
}

pub fn random_causal_attention(rng: &mut ChaCha8Rng, layers: usize, heads: usize, tokens: usize) -> Tensor4 {
    let data = (0..layers)
        .map(|_| {
            (0..heads)
                .map(|_| {
                    (0..tokens)
                        .map(|q| {
                            let mut row: Vec<f64> = (0..tokens)
                                .map(|k| if k <= q { rng.random_range(-3.0..3.0f64).exp() } else { 0.0 })
                                .collect();
                            let s: f64 = row.iter().sum();
                            row.iter_mut().for_each(|v| *v /= s);
                            row
                        })
                        .collect()
                })
                .collect()
        })
        .collect();
    Tensor4 {
        layers,
        heads,
        tokens,
        data,
    }
}

impl Tensor4 {
    /// Full-granularity stream holding the same values as `f32`.
    pub fn to_stream(&self) -> AttentionStream {
        let mut payload = Vec::with_capacity(self.layers * self.heads * self.tokens * self.tokens);
        for l in &self.data {
            for h in l {
                for row in h {
                    payload.extend(row.iter().map(|&v| v as f32));
                }
            }
        }
        AttentionStream {
            descriptor: BackendDescriptor {
                num_layers: self.layers,
                num_heads: self.heads,
                backend_kind: BackendKind::Toy,
            },
            num_tokens: self.tokens,
            payload: AttentionPayload::Full(payload),
        }
    }

    /// The tensor as the stream stores it, so the oracle sees identical inputs.
    pub fn rounded(&self) -> Tensor4 {
        let mut t = self.clone();
        for l in &mut t.data {
            for h in l {
                for row in h {
                    row.iter_mut().for_each(|v| *v = f64::from(*v as f32));
                }
            }
        }
        t
    }
}

/// Contiguous random partition of `tokens` into `lines` ranges, some may be empty.
pub fn random_spans(rng: &mut ChaCha8Rng, tokens: usize, lines: usize) -> LineTokenSpans {
    let mut cuts: Vec<usize> = (0..lines - 1).map(|_| rng.random_range(0..=tokens)).collect();
    cuts.sort_unstable();
    let mut bounds = vec![0];
    bounds.extend(cuts);
    bounds.push(tokens);
    LineTokenSpans {
        spans: bounds.windows(2).map(|w| w[0]..w[1]).collect(),
        num_tokens: tokens,
    }
}

/// Naive layerwise matrix: loops over the materialized tensor's last query row.
pub fn naive_layerwise(t: &Tensor4, spans: &[Range<usize>]) -> Vec<Vec<f64>> {
    let last = t.tokens - 1;
    spans
        .iter()
        .map(|r| {
            (0..t.layers)
                .map(|l| {
                    let mut s = 0.0;
                    for h in 0..t.heads {
                        for k in r.clone() {
                            s += t.data[l][h][last][k];
                        }
                    }
                    s
                })
                .collect()
        })
        .collect()
}

/// Naive selection of instruction rows plus the highlighted row of `hl - base`.
pub fn naive_vuln(hl: &[Vec<f64>], base: &[Vec<f64>], instruction: &[usize], highlighted: usize) -> Vec<Vec<f64>> {
    instruction
        .iter()
        .chain(std::iter::once(&highlighted))
        .map(|&line| {
            hl[line - 1]
                .iter()
                .zip(&base[line - 1])
                .map(|(a, b)| a - b)
                .collect()
        })
        .collect()
}

/// Brute-force baseline recount with integer arithmetic: returns
/// `(numerators, denominator)` with `score(m) = num[m-1] / den`.
pub fn brute_force_baseline(runs: &[Vec<usize>], loc: usize) -> (Vec<u128>, u128) {
    let sets: Vec<BTreeSet<usize>> = runs.iter().map(|r| r.iter().copied().collect()).collect();
    let common: u128 = sets
        .iter()
        .filter(|s| !s.is_empty())
        .fold(1u128, |acc, s| lcm(acc, s.len() as u128));
    let mut num = vec![0u128; loc];
    for (m, slot) in num.iter_mut().enumerate() {
        for s in &sets {
            if s.contains(&(m + 1)) {
                *slot += common / s.len() as u128;
            }
        }
    }
    (num, common * runs.len() as u128)
}

fn gcd(a: u128, b: u128) -> u128 {
    if b == 0 {
        a
    } else {
        gcd(b, a % b)
    }
}

fn lcm(a: u128, b: u128) -> u128 {
    a / gcd(a, b) * b
}

pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-6)
}

pub fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

/// Mean BCE of the network on one sequence, through the public loss.
pub fn network_loss(net: &Network, xs: &[Vec<f64>], labels: &[u8]) -> f64 {
    let preds: Vec<f64> = net.logits(xs).into_iter().map(sigmoid).collect();
    bce_loss(&preds, labels).unwrap()
}

/// Finite-difference comparison over every parameter tensor.
#[derive(Debug, Clone, Copy)]
pub struct GradientCheck {
    /// Worst per-tensor `|a - n| / max(|a|, |n|)` in the L2 norm.
    pub tensor: f64,
    /// Worst single entry under [`relative_error`].
    pub elementwise: f64,
}

fn compare(analytic: &[Vec<f64>], numeric: &[Vec<f64>]) -> GradientCheck {
    let norm = |v: &mut dyn Iterator<Item = f64>| v.map(|x| x * x).sum::<f64>().sqrt();
    let mut check = GradientCheck {
        tensor: 0.0,
        elementwise: 0.0,
    };
    for (a, n) in analytic.iter().zip(numeric) {
        let diff = norm(&mut a.iter().zip(n).map(|(x, y)| x - y));
        let scale = norm(&mut a.iter().copied()).max(norm(&mut n.iter().copied()));
        if scale > 0.0 {
            check.tensor = check.tensor.max(diff / scale);
        }
        for (&x, &y) in a.iter().zip(n) {
            check.elementwise = check.elementwise.max(relative_error(x, y));
        }
    }
    check
}

/// Central differences of the network loss against its analytic gradient.
pub fn network_gradient_check(net: &Network, xs: &[Vec<f64>], labels: &[u8], eps: f64) -> GradientCheck {
    let (_, grad) = net.loss_and_grad(xs, labels);
    let analytic: Vec<Vec<f64>> = grad.tensors().iter().map(|(_, t)| t.to_vec()).collect();
    let mut probe = net.clone();
    let mut numeric = Vec::with_capacity(analytic.len());
    for (ti, a) in analytic.iter().enumerate() {
        let mut col = Vec::with_capacity(a.len());
        for i in 0..a.len() {
            let orig = probe.tensors_mut()[ti].1[i];
            probe.tensors_mut()[ti].1[i] = orig + eps;
            let up = network_loss(&probe, xs, labels);
            probe.tensors_mut()[ti].1[i] = orig - eps;
            let down = network_loss(&probe, xs, labels);
            probe.tensors_mut()[ti].1[i] = orig;
            col.push((up - down) / (2.0 * eps));
        }
        numeric.push(col);
    }
    compare(&analytic, &numeric)
}

pub fn random_sequence(rng: &mut ChaCha8Rng, len: usize, dim: usize) -> (Vec<Vec<f64>>, Vec<u8>) {
    let xs = (0..len)
        .map(|_| (0..dim).map(|_| rng.random_range(-1.0..1.0)).collect())
        .collect();
    let ys = (0..len).map(|_| u8::from(rng.random_bool(0.4))).collect();
    (xs, ys)
}

/// Central differences of the toy's next-token loss against its analytic gradient.
pub fn toy_gradient_check(params: &attnloc::backend::toy::ToyModelParams, corpus: &[&str], eps: f64) -> GradientCheck {
    use attnloc::backend::toy::{ntp_loss, ntp_loss_and_grad};
    let (_, grad) = ntp_loss_and_grad(params, corpus).unwrap();
    let analytic: Vec<Vec<f64>> = grad.tensors().iter().map(|(_, t)| t.to_vec()).collect();
    let mut probe = params.clone();
    let mut numeric = Vec::with_capacity(analytic.len());
    for (ti, a) in analytic.iter().enumerate() {
        let mut col = Vec::with_capacity(a.len());
        for i in 0..a.len() {
            let orig = probe.tensors_mut()[ti][i];
            probe.tensors_mut()[ti][i] = orig + eps;
            let up = ntp_loss(&probe, corpus).unwrap();
            probe.tensors_mut()[ti][i] = orig - eps;
            let down = ntp_loss(&probe, corpus).unwrap();
            probe.tensors_mut()[ti][i] = orig;
            col.push((up - down) / (2.0 * eps));
        }
        numeric.push(col);
    }
    compare(&analytic, &numeric)
}

/// Small C-like program with `loc` lines.
pub fn random_program(rng: &mut ChaCha8Rng, loc: usize) -> String {
    const STMTS: &[&str] = &["int a = 0;", "free(p);", "len += 4;", "memcpy(d, s, n);", "if (x) return;", "", "}"];
    (0..loc)
        .map(|_| STMTS[rng.random_range(0..STMTS.len())])
        .collect::<Vec<_>>()
        .join("\n")
        + "\n"
}
