use rand::seq::SliceRandom;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::data::Dataset;
use crate::error::{Error, Result};
use crate::gradvec::GradientVector;
use crate::rng::{self, Stream};

/// Logistic regression when `hidden` is `None`, otherwise a one-hidden-layer
/// tanh MLP. Both end in a softmax.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Arch {
    pub input_dim: usize,
    #[serde(default)]
    pub hidden: Option<usize>,
    pub num_classes: usize,
}

impl Arch {
    pub fn logistic(input_dim: usize, num_classes: usize) -> Self {
        Self {
            input_dim,
            hidden: None,
            num_classes,
        }
    }

    pub fn mlp(input_dim: usize, hidden: usize, num_classes: usize) -> Self {
        Self {
            input_dim,
            hidden: Some(hidden),
            num_classes,
        }
    }

    pub fn param_count(&self) -> usize {
        let (d, c) = (self.input_dim, self.num_classes);
        match self.hidden {
            None => c * d + c,
            Some(h) => h * d + h + c * h + c,
        }
    }

    fn validate(&self) -> Result<()> {
        if self.input_dim == 0 || self.num_classes < 2 || self.hidden == Some(0) {
            return Err(Error::invalid(format!("invalid architecture {self:?}")));
        }
        Ok(())
    }
}

/// Flattened model parameters.
///
/// Layout, row-major: logistic `[W (c×d), b (c)]`; MLP
/// `[W1 (h×d), b1 (h), W2 (c×h), b2 (c)]`.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelParams {
    pub weights: GradientVector,
    pub arch: Arch,
}

impl ModelParams {
    pub fn new(weights: GradientVector, arch: Arch) -> Result<Self> {
        arch.validate()?;
        if weights.dim() != arch.param_count() {
            return Err(Error::DimensionMismatch {
                expected: arch.param_count(),
                got: weights.dim(),
            });
        }
        Ok(Self { weights, arch })
    }

    /// Small Gaussian initialisation; scaled by fan-in for the MLP.
    pub fn init(arch: Arch, seed: u64) -> Result<Self> {
        arch.validate()?;
        let mut rng = rng::stream(seed, Stream::Init, 0, 0);
        let mut w = vec![0.0; arch.param_count()];
        match arch.hidden {
            None => {
                let normal = Normal::new(0.0, 0.01).expect("valid std");
                for v in &mut w[..arch.num_classes * arch.input_dim] {
                    *v = normal.sample(&mut rng);
                }
            }
            Some(h) => {
                let d = arch.input_dim;
                let c = arch.num_classes;
                let n1 = Normal::new(0.0, 1.0 / (d as f64).sqrt()).expect("valid std");
                for v in &mut w[..h * d] {
                    *v = n1.sample(&mut rng);
                }
                let n2 = Normal::new(0.0, 1.0 / (h as f64).sqrt()).expect("valid std");
                let off = h * d + h;
                for v in &mut w[off..off + c * h] {
                    *v = n2.sample(&mut rng);
                }
            }
        }
        Self::new(GradientVector::from_finite(w), arch)
    }

    /// `params − lr·g`.
    pub fn apply(&self, g: &GradientVector, lr: f64) -> Result<Self> {
        let weights = self.weights.add_scaled(g, -lr)?;
        Ok(Self {
            weights,
            arch: self.arch,
        })
    }

    pub fn logits(&self, x: &[f64]) -> Vec<f64> {
        let mut scratch = Scratch::new(&self.arch);
        forward(&self.arch, self.weights.as_slice(), x, &mut scratch);
        scratch.logits
    }

    /// Argmax prediction with ties going to the lowest class index.
    pub fn predict(&self, x: &[f64]) -> usize {
        argmax(&self.logits(x))
    }
}

pub(crate) fn argmax(v: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in v.iter().enumerate().skip(1) {
        if x > v[best] {
            best = i;
        }
    }
    best
}

/// Local optimisation settings.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainArgs {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    /// Optional cap on the number of SGD steps across all epochs.
    #[serde(default)]
    pub max_steps: Option<usize>,
}

impl Default for TrainArgs {
    fn default() -> Self {
        Self {
            epochs: 1,
            batch_size: 16,
            lr: 0.1,
            max_steps: None,
        }
    }
}

struct Scratch {
    hidden: Vec<f64>,
    logits: Vec<f64>,
}

impl Scratch {
    fn new(arch: &Arch) -> Self {
        Self {
            hidden: vec![0.0; arch.hidden.unwrap_or(0)],
            logits: vec![0.0; arch.num_classes],
        }
    }
}

fn forward(arch: &Arch, w: &[f64], x: &[f64], s: &mut Scratch) {
    let d = arch.input_dim;
    let c = arch.num_classes;
    match arch.hidden {
        None => {
            let (wm, b) = w.split_at(c * d);
            for k in 0..c {
                s.logits[k] = b[k] + dot(&wm[k * d..(k + 1) * d], x);
            }
        }
        Some(h) => {
            let (w1, rest) = w.split_at(h * d);
            let (b1, rest) = rest.split_at(h);
            let (w2, b2) = rest.split_at(c * h);
            for j in 0..h {
                s.hidden[j] = (b1[j] + dot(&w1[j * d..(j + 1) * d], x)).tanh();
            }
            for k in 0..c {
                s.logits[k] = b2[k] + dot(&w2[k * h..(k + 1) * h], &s.hidden);
            }
        }
    }
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// In-place softmax; returns log-sum-exp.
fn softmax(z: &mut [f64]) -> f64 {
    let max = z.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let mut sum = 0.0;
    for v in z.iter_mut() {
        *v = (*v - max).exp();
        sum += *v;
    }
    for v in z.iter_mut() {
        *v /= sum;
    }
    max + sum.ln()
}

/// Mean softmax cross-entropy over `rows`.
pub fn loss(params: &ModelParams, data: &Dataset, rows: &[usize]) -> f64 {
    let mut s = Scratch::new(&params.arch);
    let mut total = 0.0;
    for &i in rows {
        forward(&params.arch, params.weights.as_slice(), data.row(i), &mut s);
        let y = data.label(i);
        let zy = s.logits[y];
        total += softmax(&mut s.logits) - zy;
    }
    total / rows.len() as f64
}

/// Analytic gradient of [`loss`] with respect to the flattened parameters.
pub fn batch_gradient(params: &ModelParams, data: &Dataset, rows: &[usize]) -> Vec<f64> {
    let mut grad = vec![0.0; params.weights.dim()];
    accumulate_gradient(&params.arch, params.weights.as_slice(), data, rows, &mut grad);
    grad
}

fn accumulate_gradient(arch: &Arch, w: &[f64], data: &Dataset, rows: &[usize], grad: &mut [f64]) {
    grad.iter_mut().for_each(|g| *g = 0.0);
    let d = arch.input_dim;
    let c = arch.num_classes;
    let inv = 1.0 / rows.len() as f64;
    let mut s = Scratch::new(arch);
    let mut delta = vec![0.0; c];
    let mut delta_h = vec![0.0; arch.hidden.unwrap_or(0)];
    for &i in rows {
        let x = data.row(i);
        forward(arch, w, x, &mut s);
        softmax(&mut s.logits);
        for (dk, pk) in delta.iter_mut().zip(&s.logits) {
            *dk = pk * inv;
        }
        delta[data.label(i)] -= inv;
        match arch.hidden {
            None => {
                let (gw, gb) = grad.split_at_mut(c * d);
                for k in 0..c {
                    let row = &mut gw[k * d..(k + 1) * d];
                    for (g, xv) in row.iter_mut().zip(x) {
                        *g += delta[k] * xv;
                    }
                    gb[k] += delta[k];
                }
            }
            Some(h) => {
                let w2 = &w[h * d + h..h * d + h + c * h];
                let (gw1, rest) = grad.split_at_mut(h * d);
                let (gb1, rest) = rest.split_at_mut(h);
                let (gw2, gb2) = rest.split_at_mut(c * h);
                delta_h.iter_mut().for_each(|v| *v = 0.0);
                for k in 0..c {
                    let row = &mut gw2[k * h..(k + 1) * h];
                    for j in 0..h {
                        row[j] += delta[k] * s.hidden[j];
                        delta_h[j] += w2[k * h + j] * delta[k];
                    }
                    gb2[k] += delta[k];
                }
                for j in 0..h {
                    let dh = delta_h[j] * (1.0 - s.hidden[j] * s.hidden[j]);
                    let row = &mut gw1[j * d..(j + 1) * d];
                    for (g, xv) in row.iter_mut().zip(x) {
                        *g += dh * xv;
                    }
                    gb1[j] += dh;
                }
            }
        }
    }
}

/// Mini-batch SGD from `params`; returns the effective gradient
/// `(θ_before − θ_after) / lr`.
pub fn local_train(params: &ModelParams, data: &Dataset, args: &TrainArgs, seed: u64) -> Result<GradientVector> {
    if data.is_empty() {
        return Err(Error::Empty("training dataset"));
    }
    if !(args.lr.is_finite() && args.lr > 0.0) {
        return Err(Error::invalid("learning rate must be positive"));
    }
    if args.epochs == 0 || args.batch_size == 0 {
        return Err(Error::invalid("epochs and batch size must be positive"));
    }
    if data.dim() != params.arch.input_dim {
        return Err(Error::DimensionMismatch {
            expected: params.arch.input_dim,
            got: data.dim(),
        });
    }
    let start = params.weights.as_slice();
    let mut w = start.to_vec();
    let mut grad = vec![0.0; w.len()];
    let mut order: Vec<usize> = (0..data.len()).collect();
    let mut rng = rng::stream(seed, Stream::LocalTrain, 0, 0);
    let mut steps = 0usize;
    let cap = args.max_steps.unwrap_or(usize::MAX);
    'outer: for _ in 0..args.epochs {
        order.shuffle(&mut rng);
        for batch in order.chunks(args.batch_size) {
            if steps >= cap {
                break 'outer;
            }
            accumulate_gradient(&params.arch, &w, data, batch, &mut grad);
            for (wi, gi) in w.iter_mut().zip(&grad) {
                *wi -= args.lr * gi;
            }
            steps += 1;
        }
    }
    let out: Vec<f64> = start.iter().zip(&w).map(|(a, b)| (a - b) / args.lr).collect();
    GradientVector::new(out)
}

/// Fraction of rows whose argmax prediction matches the label.
pub fn evaluate(params: &ModelParams, data: &Dataset) -> f64 {
    if data.is_empty() {
        return 0.0;
    }
    let mut s = Scratch::new(&params.arch);
    let correct = (0..data.len())
        .filter(|&i| {
            forward(&params.arch, params.weights.as_slice(), data.row(i), &mut s);
            argmax(&s.logits) == data.label(i)
        })
        .count();
    correct as f64 / data.len() as f64
}
