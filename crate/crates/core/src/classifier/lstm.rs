//! Single-layer bidirectional LSTM with a per-step affine head.
//!
//! Gate order inside the stacked weight matrix is input, forget, cell, output.
//! Each direction's weight is `4H × (D + H)` acting on `[x_t; h_{t-1}]`.

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use super::sigmoid;

#[derive(Debug, Clone, PartialEq)]
pub struct LstmCell {
    pub w: Vec<f64>,
    pub b: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct BiLstm {
    pub input_dim: usize,
    pub hidden_dim: usize,
    pub forward: LstmCell,
    pub backward: LstmCell,
    /// `2H` weights: forward half then backward half.
    pub head_w: Vec<f64>,
    pub head_b: Vec<f64>,
}

struct Step {
    concat: Vec<f64>,
    i: Vec<f64>,
    f: Vec<f64>,
    g: Vec<f64>,
    o: Vec<f64>,
    c_prev: Vec<f64>,
    tanh_c: Vec<f64>,
}

fn uniform(rng: &mut ChaCha8Rng, n: usize, k: f64) -> Vec<f64> {
    (0..n).map(|_| rng.random_range(-k..k)).collect()
}

impl LstmCell {
    fn init(rng: &mut ChaCha8Rng, d: usize, h: usize) -> Self {
        let k = 1.0 / (h as f64).sqrt();
        Self {
            w: uniform(rng, 4 * h * (d + h), k),
            b: uniform(rng, 4 * h, k),
        }
    }

    fn zeros(d: usize, h: usize) -> Self {
        Self {
            w: vec![0.0; 4 * h * (d + h)],
            b: vec![0.0; 4 * h],
        }
    }

    /// Runs over `xs` in the given order, returning hidden states and caches.
    fn run<'a>(&self, xs: impl Iterator<Item = &'a [f64]>, d: usize, h: usize) -> (Vec<Vec<f64>>, Vec<Step>) {
        let width = d + h;
        let mut h_prev = vec![0.0; h];
        let mut c_prev = vec![0.0; h];
        let mut hs = Vec::new();
        let mut steps = Vec::new();
        for x in xs {
            let mut concat = Vec::with_capacity(width);
            concat.extend_from_slice(x);
            concat.extend_from_slice(&h_prev);
            let z: Vec<f64> = (0..4 * h)
                .map(|r| {
                    let row = &self.w[r * width..(r + 1) * width];
                    self.b[r] + row.iter().zip(&concat).map(|(a, b)| a * b).sum::<f64>()
                })
                .collect();
            let i: Vec<f64> = z[..h].iter().map(|&v| sigmoid(v)).collect();
            let f: Vec<f64> = z[h..2 * h].iter().map(|&v| sigmoid(v)).collect();
            let g: Vec<f64> = z[2 * h..3 * h].iter().map(|&v| v.tanh()).collect();
            let o: Vec<f64> = z[3 * h..].iter().map(|&v| sigmoid(v)).collect();
            let c: Vec<f64> = (0..h).map(|k| f[k] * c_prev[k] + i[k] * g[k]).collect();
            let tanh_c: Vec<f64> = c.iter().map(|v| v.tanh()).collect();
            let h_t: Vec<f64> = (0..h).map(|k| o[k] * tanh_c[k]).collect();
            steps.push(Step {
                concat,
                i,
                f,
                g,
                o,
                c_prev: std::mem::replace(&mut c_prev, c),
                tanh_c,
            });
            hs.push(h_t.clone());
            h_prev = h_t;
        }
        (hs, steps)
    }

    /// Backpropagation through time. `dh_out[s]` is the loss gradient on the
    /// hidden state of step `s` (in run order).
    fn backprop(&self, steps: &[Step], dh_out: &[Vec<f64>], d: usize, h: usize, grad: &mut LstmCell) {
        let width = d + h;
        let mut dh_next = vec![0.0; h];
        let mut dc_next = vec![0.0; h];
        let mut dz = vec![0.0; 4 * h];
        for (s, st) in steps.iter().enumerate().rev() {
            for k in 0..h {
                let dh = dh_out[s][k] + dh_next[k];
                let d_o = dh * st.tanh_c[k];
                let dc = dh * st.o[k] * (1.0 - st.tanh_c[k] * st.tanh_c[k]) + dc_next[k];
                let di = dc * st.g[k];
                let dg = dc * st.i[k];
                let df = dc * st.c_prev[k];
                dc_next[k] = dc * st.f[k];
                dz[k] = di * st.i[k] * (1.0 - st.i[k]);
                dz[h + k] = df * st.f[k] * (1.0 - st.f[k]);
                dz[2 * h + k] = dg * (1.0 - st.g[k] * st.g[k]);
                dz[3 * h + k] = d_o * st.o[k] * (1.0 - st.o[k]);
            }
            dh_next.iter_mut().for_each(|v| *v = 0.0);
            for (r, &dzr) in dz.iter().enumerate() {
                grad.b[r] += dzr;
                let row = r * width;
                for (c, &x) in st.concat.iter().enumerate() {
                    grad.w[row + c] += dzr * x;
                }
                for k in 0..h {
                    dh_next[k] += self.w[row + d + k] * dzr;
                }
            }
        }
    }
}

impl BiLstm {
    pub fn init(rng: &mut ChaCha8Rng, input_dim: usize, hidden_dim: usize) -> Self {
        let forward = LstmCell::init(rng, input_dim, hidden_dim);
        let backward = LstmCell::init(rng, input_dim, hidden_dim);
        let k = 1.0 / ((2 * hidden_dim) as f64).sqrt();
        Self {
            input_dim,
            hidden_dim,
            forward,
            backward,
            head_w: uniform(rng, 2 * hidden_dim, k),
            head_b: uniform(rng, 1, k),
        }
    }

    pub fn zeros_like(&self) -> Self {
        Self {
            input_dim: self.input_dim,
            hidden_dim: self.hidden_dim,
            forward: LstmCell::zeros(self.input_dim, self.hidden_dim),
            backward: LstmCell::zeros(self.input_dim, self.hidden_dim),
            head_w: vec![0.0; 2 * self.hidden_dim],
            head_b: vec![0.0],
        }
    }

    /// Same network with the two directions exchanged.
    pub fn swapped(&self) -> Self {
        let h = self.hidden_dim;
        let mut head_w = self.head_w[h..].to_vec();
        head_w.extend_from_slice(&self.head_w[..h]);
        Self {
            forward: self.backward.clone(),
            backward: self.forward.clone(),
            head_w,
            ..self.clone()
        }
    }

    pub fn tensors(&self) -> Vec<(&'static str, &[f64])> {
        vec![
            ("forward.w", &self.forward.w),
            ("forward.b", &self.forward.b),
            ("backward.w", &self.backward.w),
            ("backward.b", &self.backward.b),
            ("head.w", &self.head_w),
            ("head.b", &self.head_b),
        ]
    }

    pub fn tensors_mut(&mut self) -> Vec<(&'static str, &mut Vec<f64>)> {
        vec![
            ("forward.w", &mut self.forward.w),
            ("forward.b", &mut self.forward.b),
            ("backward.w", &mut self.backward.w),
            ("backward.b", &mut self.backward.b),
            ("head.w", &mut self.head_w),
            ("head.b", &mut self.head_b),
        ]
    }

    fn logits_with_cache(&self, xs: &[Vec<f64>]) -> (Vec<f64>, [Vec<Vec<f64>>; 2], [Vec<Step>; 2]) {
        let (d, h) = (self.input_dim, self.hidden_dim);
        let (hf, sf) = self.forward.run(xs.iter().map(Vec::as_slice), d, h);
        let (mut hb, sb) = self.backward.run(xs.iter().rev().map(Vec::as_slice), d, h);
        hb.reverse();
        let logits = (0..xs.len())
            .map(|t| {
                self.head_b[0]
                    + self.head_w[..h].iter().zip(&hf[t]).map(|(a, b)| a * b).sum::<f64>()
                    + self.head_w[h..].iter().zip(&hb[t]).map(|(a, b)| a * b).sum::<f64>()
            })
            .collect();
        (logits, [hf, hb], [sf, sb])
    }

    pub fn logits(&self, xs: &[Vec<f64>]) -> Vec<f64> {
        self.logits_with_cache(xs).0
    }

    /// Logits and the gradient of the loss given `dlogits = dL/dlogit_t`,
    /// produced by `loss_grad` from the logits.
    pub fn backward<F>(&self, xs: &[Vec<f64>], loss_grad: F) -> (f64, Self)
    where
        F: FnOnce(&[f64]) -> (f64, Vec<f64>),
    {
        let (d, h) = (self.input_dim, self.hidden_dim);
        let (logits, [hf, hb], [sf, sb]) = self.logits_with_cache(xs);
        let (loss, dlogits) = loss_grad(&logits);
        let mut grad = self.zeros_like();
        let t_len = xs.len();
        let mut dhf = Vec::with_capacity(t_len);
        let mut dhb_run = vec![Vec::new(); t_len];
        for t in 0..t_len {
            let g = dlogits[t];
            grad.head_b[0] += g;
            for k in 0..h {
                grad.head_w[k] += g * hf[t][k];
                grad.head_w[h + k] += g * hb[t][k];
            }
            dhf.push(self.head_w[..h].iter().map(|w| w * g).collect::<Vec<f64>>());
            // backward cell ran in reverse: original t is run step T-1-t
            dhb_run[t_len - 1 - t] = self.head_w[h..].iter().map(|w| w * g).collect();
        }
        self.forward.backprop(&sf, &dhf, d, h, &mut grad.forward);
        self.backward.backprop(&sb, &dhb_run, d, h, &mut grad.backward);
        (loss, grad)
    }
}
