//! Classifier used by the clients: multinomial logistic regression, or the
//! same with one tanh hidden layer in front.
//!
//! Parameters live in one flat vector. With a hidden layer the layout is
//! `W1 (h×d) | b1 (h) | W2 (c×h) | b2 (c)`; without, `W (c×d) | b (c)`.

use std::ops::Range;

use rand::seq::SliceRandom;
use rand::Rng;
use rand_chacha::ChaCha8Rng;

use super::data::Dataset;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Architecture {
    pub input: usize,
    /// 0 means no hidden layer.
    pub hidden: usize,
    pub classes: usize,
}

impl Architecture {
    pub fn num_params(&self) -> usize {
        if self.hidden == 0 {
            self.classes * (self.input + 1)
        } else {
            self.hidden * (self.input + 1) + self.classes * (self.hidden + 1)
        }
    }

    /// Index range of the output layer (weights and biases).
    pub fn last_layer(&self) -> Range<usize> {
        let n = self.num_params();
        let width = if self.hidden == 0 { self.input } else { self.hidden };
        n - self.classes * (width + 1)..n
    }

    /// Small uniform weights, zero biases.
    pub fn init(&self, rng: &mut ChaCha8Rng) -> Vec<f64> {
        let mut p = vec![0.0; self.num_params()];
        if self.hidden == 0 {
            return p;
        }
        let s1 = 1.0 / (self.input as f64).sqrt();
        for w in &mut p[..self.hidden * self.input] {
            *w = rng.random_range(-s1..s1);
        }
        let s2 = 1.0 / (self.hidden as f64).sqrt();
        let w2 = self.hidden * (self.input + 1);
        for w in &mut p[w2..w2 + self.classes * self.hidden] {
            *w = rng.random_range(-s2..s2);
        }
        p
    }

    /// Class scores for one example; `hidden_out` receives the activations.
    fn forward(&self, params: &[f64], x: &[f64], hidden_out: &mut [f64], logits: &mut [f64]) {
        let (d, h, c) = (self.input, self.hidden, self.classes);
        if h == 0 {
            let bias = &params[c * d..];
            for k in 0..c {
                logits[k] = bias[k] + dot(&params[k * d..(k + 1) * d], x);
            }
            return;
        }
        let b1 = &params[h * d..h * d + h];
        for j in 0..h {
            hidden_out[j] = (b1[j] + dot(&params[j * d..(j + 1) * d], x)).tanh();
        }
        let w2 = &params[h * (d + 1)..];
        let b2 = &w2[c * h..];
        for k in 0..c {
            logits[k] = b2[k] + dot(&w2[k * h..(k + 1) * h], hidden_out);
        }
    }

    pub fn predict(&self, params: &[f64], x: &[f64]) -> usize {
        let mut hidden = vec![0.0; self.hidden];
        let mut logits = vec![0.0; self.classes];
        self.forward(params, x, &mut hidden, &mut logits);
        argmax(&logits)
    }

    pub fn accuracy(&self, params: &[f64], data: &Dataset) -> f64 {
        if data.is_empty() {
            return 0.0;
        }
        let mut hidden = vec![0.0; self.hidden];
        let mut logits = vec![0.0; self.classes];
        let correct = (0..data.len())
            .filter(|&i| {
                self.forward(params, data.row(i), &mut hidden, &mut logits);
                argmax(&logits) == data.labels[i] as usize
            })
            .count();
        correct as f64 / data.len() as f64
    }

    /// Mean cross-entropy over `rows` and its gradient (written to `grad`).
    pub fn loss_and_grad(&self, params: &[f64], data: &Dataset, rows: &[usize], grad: &mut [f64]) -> f64 {
        let (d, h, c) = (self.input, self.hidden, self.classes);
        grad.iter_mut().for_each(|g| *g = 0.0);
        let mut hidden = vec![0.0; h];
        let mut logits = vec![0.0; c];
        let mut delta_h = vec![0.0; h];
        let mut loss = 0.0;
        let scale = 1.0 / rows.len().max(1) as f64;
        for &i in rows {
            let x = data.row(i);
            let y = data.labels[i] as usize;
            self.forward(params, x, &mut hidden, &mut logits);
            loss += softmax_in_place(&mut logits, y);
            // logits now holds softmax − onehot
            if h == 0 {
                for k in 0..c {
                    let g = logits[k] * scale;
                    axpy(g, x, &mut grad[k * d..(k + 1) * d]);
                    grad[c * d + k] += g;
                }
                continue;
            }
            let w2_at = h * (d + 1);
            let b2_at = w2_at + c * h;
            delta_h.iter_mut().for_each(|v| *v = 0.0);
            for k in 0..c {
                let g = logits[k] * scale;
                axpy(g, &hidden, &mut grad[w2_at + k * h..w2_at + (k + 1) * h]);
                grad[b2_at + k] += g;
                axpy(g, &params[w2_at + k * h..w2_at + (k + 1) * h], &mut delta_h);
            }
            for j in 0..h {
                let g = delta_h[j] * (1.0 - hidden[j] * hidden[j]);
                axpy(g, x, &mut grad[j * d..(j + 1) * d]);
                grad[h * d + j] += g;
            }
        }
        loss * scale
    }
}

/// Local optimiser settings.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TrainSpec {
    pub epochs: usize,
    pub lr: f64,
    /// Mini-batch size; 0 means full-batch gradient descent.
    pub batch: usize,
}

impl Default for TrainSpec {
    fn default() -> Self {
        Self {
            epochs: 1,
            lr: 0.1,
            batch: 16,
        }
    }
}

/// Mini-batch gradient descent from `params` for `spec.epochs` passes,
/// shuffling with `rng` each epoch.
pub fn local_train(
    arch: &Architecture,
    params: &[f64],
    data: &Dataset,
    spec: &TrainSpec,
    rng: &mut ChaCha8Rng,
) -> Vec<f64> {
    let mut w = params.to_vec();
    if data.is_empty() || spec.lr == 0.0 {
        return w;
    }
    let mut grad = vec![0.0; w.len()];
    let mut order: Vec<usize> = (0..data.len()).collect();
    let batch = if spec.batch == 0 { data.len() } else { spec.batch };
    for _ in 0..spec.epochs {
        order.shuffle(rng);
        for rows in order.chunks(batch) {
            arch.loss_and_grad(&w, data, rows, &mut grad);
            axpy(-spec.lr, &grad, &mut w);
        }
    }
    w
}

/// Replaces `logits` by `softmax − onehot(y)` and returns `−ln softmax_y`.
fn softmax_in_place(logits: &mut [f64], y: usize) -> f64 {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut sum = 0.0;
    for z in logits.iter_mut() {
        *z = (*z - max).exp();
        sum += *z;
    }
    let loss = -((logits[y] / sum).ln());
    for z in logits.iter_mut() {
        *z /= sum;
    }
    logits[y] -= 1.0;
    loss
}

fn argmax(v: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in v.iter().enumerate() {
        if x > v[best] {
            best = i;
        }
    }
    best
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn axpy(alpha: f64, x: &[f64], y: &mut [f64]) {
    for (yi, xi) in y.iter_mut().zip(x) {
        *yi += alpha * xi;
    }
}
