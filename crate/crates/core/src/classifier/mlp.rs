//! Context-free ablation: one tanh hidden layer applied to each line alone.

use rand::Rng;
use rand_chacha::ChaCha8Rng;

#[derive(Debug, Clone, PartialEq)]
pub struct Mlp {
    pub input_dim: usize,
    pub hidden_dim: usize,
    /// `H × D`
    pub w1: Vec<f64>,
    pub b1: Vec<f64>,
    pub w2: Vec<f64>,
    pub b2: Vec<f64>,
}

impl Mlp {
    pub fn init(rng: &mut ChaCha8Rng, input_dim: usize, hidden_dim: usize) -> Self {
        let k1 = 1.0 / (input_dim.max(1) as f64).sqrt();
        let k2 = 1.0 / (hidden_dim as f64).sqrt();
        let mut u = |n: usize, k: f64| -> Vec<f64> { (0..n).map(|_| rng.random_range(-k..k)).collect() };
        Self {
            input_dim,
            hidden_dim,
            w1: u(hidden_dim * input_dim, k1),
            b1: u(hidden_dim, k1),
            w2: u(hidden_dim, k2),
            b2: u(1, k2),
        }
    }

    pub fn zeros_like(&self) -> Self {
        Self {
            w1: vec![0.0; self.w1.len()],
            b1: vec![0.0; self.b1.len()],
            w2: vec![0.0; self.w2.len()],
            b2: vec![0.0; 1],
            ..*self
        }
    }

    pub fn tensors(&self) -> Vec<(&'static str, &[f64])> {
        vec![("w1", &self.w1), ("b1", &self.b1), ("w2", &self.w2), ("b2", &self.b2)]
    }

    pub fn tensors_mut(&mut self) -> Vec<(&'static str, &mut Vec<f64>)> {
        vec![
            ("w1", &mut self.w1),
            ("b1", &mut self.b1),
            ("w2", &mut self.w2),
            ("b2", &mut self.b2),
        ]
    }

    fn hidden(&self, x: &[f64]) -> Vec<f64> {
        let d = self.input_dim;
        (0..self.hidden_dim)
            .map(|j| {
                let row = &self.w1[j * d..(j + 1) * d];
                (self.b1[j] + row.iter().zip(x).map(|(a, b)| a * b).sum::<f64>()).tanh()
            })
            .collect()
    }

    fn logit_from_hidden(&self, hidden: &[f64]) -> f64 {
        self.b2[0] + self.w2.iter().zip(hidden).map(|(a, b)| a * b).sum::<f64>()
    }

    pub fn logits(&self, xs: &[Vec<f64>]) -> Vec<f64> {
        xs.iter().map(|x| self.logit_from_hidden(&self.hidden(x))).collect()
    }

    pub fn backward<F>(&self, xs: &[Vec<f64>], loss_grad: F) -> (f64, Self)
    where
        F: FnOnce(&[f64]) -> (f64, Vec<f64>),
    {
        let d = self.input_dim;
        let hiddens: Vec<Vec<f64>> = xs.iter().map(|x| self.hidden(x)).collect();
        let logits: Vec<f64> = hiddens.iter().map(|h| self.logit_from_hidden(h)).collect();
        let (loss, dlogits) = loss_grad(&logits);
        let mut grad = self.zeros_like();
        for ((x, hid), &g) in xs.iter().zip(&hiddens).zip(&dlogits) {
            grad.b2[0] += g;
            for j in 0..self.hidden_dim {
                grad.w2[j] += g * hid[j];
                let dz = g * self.w2[j] * (1.0 - hid[j] * hid[j]);
                grad.b1[j] += dz;
                for (c, &xv) in x.iter().enumerate() {
                    grad.w1[j * d + c] += dz * xv;
                }
            }
        }
        (loss, grad)
    }
}
