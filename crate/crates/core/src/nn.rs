//! One-hidden-layer perceptrons with hand-written gradients.
//!
//! Shared by the predicate scorers (one sigmoid output, binary
//! cross-entropy) and the action policies (softmax over actions,
//! categorical cross-entropy). Training is plain mini-batch gradient descent
//! with a fixed summation order, so identical seeds give identical weights.

use rand::seq::SliceRandom;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Mlp {
    pub input: usize,
    pub hidden: usize,
    pub output: usize,
    /// `hidden × input`, row-major.
    pub w1: Vec<f64>,
    pub b1: Vec<f64>,
    /// `output × hidden`, row-major.
    pub w2: Vec<f64>,
    pub b2: Vec<f64>,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Target {
    /// Probability label for a single sigmoid output.
    Binary(f64),
    /// Class index for a softmax output.
    Class(usize),
}

pub trait Sample {
    fn features(&self) -> &[f64];
    fn target(&self) -> Target;
}

impl Sample for (Vec<f64>, Target) {
    fn features(&self) -> &[f64] {
        &self.0
    }
    fn target(&self) -> Target {
        self.1
    }
}

/// Per-feature standardization fitted on training inputs. Features that never
/// vary in training get scale 0, so values unseen there cannot move the score.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Standardizer {
    pub mean: Vec<f64>,
    pub scale: Vec<f64>,
}

impl Standardizer {
    pub fn identity(len: usize) -> Self {
        Self { mean: vec![0.0; len], scale: vec![1.0; len] }
    }

    pub fn fit<'a>(len: usize, rows: impl Iterator<Item = &'a [f64]>) -> Self {
        let mut n = 0usize;
        let mut sum = vec![0.0; len];
        let mut sq = vec![0.0; len];
        for r in rows {
            n += 1;
            for i in 0..len {
                sum[i] += r[i];
                sq[i] += r[i] * r[i];
            }
        }
        if n == 0 {
            return Self::identity(len);
        }
        let mean: Vec<f64> = sum.iter().map(|s| s / n as f64).collect();
        let scale = (0..len)
            .map(|i| {
                let var = (sq[i] / n as f64 - mean[i] * mean[i]).max(0.0);
                if var < 1e-12 {
                    0.0
                } else {
                    1.0 / var.sqrt()
                }
            })
            .collect();
        Self { mean, scale }
    }

    pub fn apply(&self, x: &[f64]) -> Vec<f64> {
        x.iter().zip(&self.mean).zip(&self.scale).map(|((v, m), s)| (v - m) * s).collect()
    }
}

pub fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

pub fn softmax(z: &[f64]) -> Vec<f64> {
    let m = z.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = z.iter().map(|v| (v - m).exp()).collect();
    let s: f64 = e.iter().sum();
    e.into_iter().map(|v| v / s).collect()
}

/// Index of the largest value; ties go to the lowest index.
pub fn argmax(z: &[f64]) -> usize {
    let mut best = 0;
    for (i, v) in z.iter().enumerate() {
        if *v > z[best] {
            best = i;
        }
    }
    best
}

impl Mlp {
    pub fn zeros(input: usize, hidden: usize, output: usize) -> Self {
        Self {
            input,
            hidden,
            output,
            w1: vec![0.0; hidden * input],
            b1: vec![0.0; hidden],
            w2: vec![0.0; output * hidden],
            b2: vec![0.0; output],
        }
    }

    /// Glorot-uniform weights, zero biases.
    pub fn init(input: usize, hidden: usize, output: usize, rng: &mut ChaCha8Rng) -> Self {
        let mut m = Self::zeros(input, hidden, output);
        let a1 = (6.0 / (input + hidden) as f64).sqrt();
        let a2 = (6.0 / (hidden + output) as f64).sqrt();
        m.w1.iter_mut().for_each(|w| *w = rng.gen_range(-a1..a1));
        m.w2.iter_mut().for_each(|w| *w = rng.gen_range(-a2..a2));
        m
    }

    pub fn param_count(&self) -> usize {
        self.w1.len() + self.b1.len() + self.w2.len() + self.b2.len()
    }

    fn hidden_act(&self, x: &[f64]) -> Vec<f64> {
        debug_assert_eq!(x.len(), self.input);
        (0..self.hidden)
            .map(|j| {
                let row = &self.w1[j * self.input..(j + 1) * self.input];
                let z = self.b1[j] + row.iter().zip(x).map(|(w, v)| w * v).sum::<f64>();
                z.max(0.0)
            })
            .collect()
    }

    fn logits_from(&self, h: &[f64]) -> Vec<f64> {
        (0..self.output)
            .map(|k| {
                let row = &self.w2[k * self.hidden..(k + 1) * self.hidden];
                self.b2[k] + row.iter().zip(h).map(|(w, v)| w * v).sum::<f64>()
            })
            .collect()
    }

    pub fn logits(&self, x: &[f64]) -> Vec<f64> {
        self.logits_from(&self.hidden_act(x))
    }

    /// Sigmoid of the first output.
    pub fn prob(&self, x: &[f64]) -> f64 {
        sigmoid(self.logits(x)[0])
    }

    pub fn loss(&self, x: &[f64], t: Target) -> f64 {
        let z = self.logits(x);
        loss_from_logits(&z, t)
    }

    /// Loss and its gradient, accumulated into `grad` (same layout as `self`).
    pub fn accumulate_grad(&self, x: &[f64], t: Target, grad: &mut Mlp) -> f64 {
        let h = self.hidden_act(x);
        let z = self.logits_from(&h);
        let loss = loss_from_logits(&z, t);
        let dz: Vec<f64> = match t {
            Target::Binary(y) => vec![sigmoid(z[0]) - y],
            Target::Class(c) => {
                let mut p = softmax(&z);
                p[c] -= 1.0;
                p
            }
        };
        let mut dh = vec![0.0; self.hidden];
        for (k, &g) in dz.iter().enumerate() {
            grad.b2[k] += g;
            let row = k * self.hidden;
            for j in 0..self.hidden {
                grad.w2[row + j] += g * h[j];
                dh[j] += g * self.w2[row + j];
            }
        }
        for j in 0..self.hidden {
            if h[j] <= 0.0 {
                continue;
            }
            let g = dh[j];
            grad.b1[j] += g;
            let row = j * self.input;
            for (i, &v) in x.iter().enumerate() {
                grad.w1[row + i] += g * v;
            }
        }
        loss
    }

    pub fn params(&self) -> Vec<f64> {
        [&self.w1[..], &self.b1, &self.w2, &self.b2].concat()
    }

    pub fn set_params(&mut self, p: &[f64]) {
        assert_eq!(p.len(), self.param_count());
        let (a, rest) = p.split_at(self.w1.len());
        let (b, rest) = rest.split_at(self.b1.len());
        let (c, d) = rest.split_at(self.w2.len());
        self.w1.copy_from_slice(a);
        self.b1.copy_from_slice(b);
        self.w2.copy_from_slice(c);
        self.b2.copy_from_slice(d);
    }

    fn axpy(&mut self, scale: f64, g: &Mlp) {
        for (w, d) in self.w1.iter_mut().zip(&g.w1) {
            *w += scale * d;
        }
        for (w, d) in self.b1.iter_mut().zip(&g.b1) {
            *w += scale * d;
        }
        for (w, d) in self.w2.iter_mut().zip(&g.w2) {
            *w += scale * d;
        }
        for (w, d) in self.b2.iter_mut().zip(&g.b2) {
            *w += scale * d;
        }
    }

    /// One epoch of mini-batch gradient descent over `samples` (shuffled with
    /// `rng`). `batch = 0` means full batch. Returns the mean loss seen
    /// during the epoch.
    pub fn train_epoch<S: Sample>(&mut self, samples: &[S], lr: f64, batch: usize, rng: &mut ChaCha8Rng) -> f64 {
        if samples.is_empty() {
            return 0.0;
        }
        let mut order: Vec<usize> = (0..samples.len()).collect();
        if batch != 0 {
            order.shuffle(rng);
        }
        let size = if batch == 0 { samples.len() } else { batch };
        let mut total = 0.0;
        let mut grad = Mlp::zeros(self.input, self.hidden, self.output);
        for chunk in order.chunks(size) {
            grad.clear();
            for &i in chunk {
                let s = &samples[i];
                total += self.accumulate_grad(s.features(), s.target(), &mut grad);
            }
            self.axpy(-lr / chunk.len() as f64, &grad);
        }
        total / samples.len() as f64
    }

    pub fn mean_loss<S: Sample>(&self, samples: &[S]) -> f64 {
        samples.iter().map(|s| self.loss(s.features(), s.target())).sum::<f64>() / samples.len().max(1) as f64
    }

    fn clear(&mut self) {
        for v in [&mut self.w1, &mut self.b1, &mut self.w2, &mut self.b2] {
            v.iter_mut().for_each(|x| *x = 0.0);
        }
    }
}

fn loss_from_logits(z: &[f64], t: Target) -> f64 {
    match t {
        Target::Binary(y) => {
            // Stable BCE with logits: max(z,0) - z*y + ln(1 + e^{-|z|}).
            let z = z[0];
            z.max(0.0) - z * y + (-z.abs()).exp().ln_1p()
        }
        Target::Class(c) => {
            let m = z.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let lse = m + z.iter().map(|v| (v - m).exp()).sum::<f64>().ln();
            lse - z[c]
        }
    }
}

/// Largest relative error between the analytic gradient and central finite
/// differences with step `eps`, over every parameter.
pub fn gradient_check(m: &Mlp, x: &[f64], t: Target, eps: f64) -> f64 {
    let mut grad = Mlp::zeros(m.input, m.hidden, m.output);
    m.accumulate_grad(x, t, &mut grad);
    let analytic = grad.params();
    let base = m.params();
    let mut probe = m.clone();
    let mut worst: f64 = 0.0;
    for i in 0..base.len() {
        let mut p = base.clone();
        p[i] = base[i] + eps;
        probe.set_params(&p);
        let up = probe.loss(x, t);
        p[i] = base[i] - eps;
        probe.set_params(&p);
        let down = probe.loss(x, t);
        let numeric = (up - down) / (2.0 * eps);
        let denom = analytic[i].abs().max(numeric.abs()).max(1e-6);
        worst = worst.max((analytic[i] - numeric).abs() / denom);
    }
    worst
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;

    fn random_input(rng: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
        (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect()
    }

    #[test]
    fn zero_weights() {
        let m = Mlp::zeros(5, 4, 1);
        assert_eq!(m.prob(&[0.3, -0.2, 1.0, 0.0, 0.5]), 0.5);
        let p = Mlp::zeros(5, 4, 6);
        assert_eq!(argmax(&p.logits(&[1.0; 5])), 0);
    }

    #[test]
    fn gradients_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for (inp, hid, out) in [(7, 32, 1), (12, 32, 1), (9, 64, 6), (3, 5, 6)] {
            for trial in 0..5 {
                let m = Mlp::init(inp, hid, out, &mut rng);
                let x = random_input(&mut rng, inp);
                let t = if out == 1 { Target::Binary(if trial % 2 == 0 { 1.0 } else { 0.0 }) } else { Target::Class(trial % out) };
                let err = gradient_check(&m, &x, t, 1e-4);
                assert!(err < 1e-3, "shape ({inp},{hid},{out}) rel err {err}");
            }
        }
    }

    #[test]
    fn full_batch_loss_decreases() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let data: Vec<(Vec<f64>, Target)> = (0..64)
            .map(|_| {
                let x = random_input(&mut rng, 4);
                let y = if x[0] + 0.5 * x[1] > 0.0 { 1.0 } else { 0.0 };
                (x, Target::Binary(y))
            })
            .collect();
        let mut m = Mlp::init(4, 16, 1, &mut rng);
        let mut prev = m.mean_loss(&data);
        for _ in 0..30 {
            m.train_epoch(&data, 0.1, 0, &mut rng);
            let now = m.mean_loss(&data);
            assert!(now <= prev + 1e-12, "{now} > {prev}");
            prev = now;
        }
    }

    #[test]
    fn training_is_bit_reproducible() {
        let run = || {
            let mut rng = ChaCha8Rng::seed_from_u64(1);
            let data: Vec<(Vec<f64>, Target)> = (0..100).map(|i| (random_input(&mut rng, 3), Target::Class(i % 6))).collect();
            let mut m = Mlp::init(3, 8, 6, &mut rng);
            for _ in 0..3 {
                m.train_epoch(&data, 0.05, 16, &mut rng);
            }
            m
        };
        assert_eq!(run(), run());
    }

    #[test]
    fn softmax_and_sigmoid_are_stable() {
        let p = softmax(&[1000.0, 0.0, -1000.0]);
        assert!((p.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        assert!(sigmoid(-700.0) > 0.0 && sigmoid(800.0) <= 1.0);
        assert!(loss_from_logits(&[-800.0], Target::Binary(1.0)).is_finite());
    }
}
