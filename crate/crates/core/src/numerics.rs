//! Dense parameter vectors, small classifiers and mini-batch SGD.
//!
//! Models are stored as one flat [`ParamVector`]; the same vector is what
//! gets aggregated, compared by cosine similarity and summed into histories.

use rand::seq::SliceRandom;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::data::LabeledDataset;
use crate::error::{Error, Result};
use crate::rng;

/// Flat real-valued parameter vector.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct ParamVector(Vec<f64>);

impl ParamVector {
    pub fn new(values: Vec<f64>) -> Self {
        ParamVector(values)
    }

    pub fn zeros(len: usize) -> Self {
        ParamVector(vec![0.0; len])
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    pub fn as_mut_slice(&mut self) -> &mut [f64] {
        &mut self.0
    }

    pub fn into_inner(self) -> Vec<f64> {
        self.0
    }

    pub fn is_finite(&self) -> bool {
        self.0.iter().all(|v| v.is_finite())
    }

    pub fn dot(&self, other: &ParamVector) -> f64 {
        assert_eq!(self.len(), other.len(), "dot of unequal lengths");
        self.0.iter().zip(&other.0).map(|(a, b)| a * b).sum()
    }

    pub fn norm(&self) -> f64 {
        self.dot(self).sqrt()
    }

    /// `self += alpha * x`
    pub fn axpy(&mut self, alpha: f64, x: &ParamVector) {
        assert_eq!(self.len(), x.len(), "axpy of unequal lengths");
        for (s, v) in self.0.iter_mut().zip(&x.0) {
            *s += alpha * v;
        }
    }

    pub fn add_assign(&mut self, other: &ParamVector) {
        assert_eq!(self.len(), other.len(), "add of unequal lengths");
        for (s, v) in self.0.iter_mut().zip(&other.0) {
            *s += v;
        }
    }

    pub fn scaled(&self, alpha: f64) -> ParamVector {
        ParamVector(self.0.iter().map(|v| v * alpha).collect())
    }

    /// Element-wise `self - other`.
    pub fn sub(&self, other: &ParamVector) -> Result<ParamVector> {
        check_len(self.len(), other.len())?;
        Ok(ParamVector(
            self.0.iter().zip(&other.0).map(|(a, b)| a - b).collect(),
        ))
    }

    pub fn sq_distance(&self, other: &ParamVector) -> f64 {
        assert_eq!(self.len(), other.len(), "distance of unequal lengths");
        self.0
            .iter()
            .zip(&other.0)
            .map(|(a, b)| (a - b) * (a - b))
            .sum()
    }
}

impl From<Vec<f64>> for ParamVector {
    fn from(v: Vec<f64>) -> Self {
        ParamVector(v)
    }
}

pub(crate) fn check_len(expected: usize, actual: usize) -> Result<()> {
    if expected == actual {
        Ok(())
    } else {
        Err(Error::DimensionMismatch { expected, actual })
    }
}

/// Cosine similarity. A zero vector is treated as maximally dissimilar and
/// yields 0.
pub fn cosine_similarity(a: &ParamVector, b: &ParamVector) -> Result<f64> {
    check_len(a.len(), b.len())?;
    let na = a.norm();
    let nb = b.norm();
    if na == 0.0 || nb == 0.0 {
        return Ok(0.0);
    }
    Ok((a.dot(b) / (na * nb)).clamp(-1.0, 1.0))
}

/// Classifier architecture: softmax regression, optionally with one tanh
/// hidden layer.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Arch {
    pub input_dim: usize,
    pub classes: usize,
    #[serde(default)]
    pub hidden: Option<usize>,
}

impl Arch {
    pub fn softmax(input_dim: usize, classes: usize) -> Self {
        Arch {
            input_dim,
            classes,
            hidden: None,
        }
    }

    pub fn mlp(input_dim: usize, hidden: usize, classes: usize) -> Self {
        Arch {
            input_dim,
            classes,
            hidden: Some(hidden),
        }
    }

    pub fn param_count(&self) -> usize {
        match self.hidden {
            None => self.classes * self.input_dim + self.classes,
            Some(h) => h * self.input_dim + h + self.classes * h + self.classes,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.input_dim == 0 || self.classes < 2 || self.hidden == Some(0) {
            return Err(Error::invalid(format!("degenerate architecture {self:?}")));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Model {
    arch: Arch,
    params: ParamVector,
}

impl Model {
    pub fn new(arch: Arch, params: ParamVector) -> Result<Self> {
        arch.validate()?;
        check_len(arch.param_count(), params.len())?;
        Ok(Model { arch, params })
    }

    /// Random Gaussian init scaled by 1/sqrt(fan_in), biases zero.
    pub fn init(arch: Arch, seed: u64) -> Result<Self> {
        arch.validate()?;
        let mut rng = rng::from_seed(seed);
        let mut params = Vec::with_capacity(arch.param_count());
        let mut layer = |rows: usize, cols: usize, params: &mut Vec<f64>| {
            let normal = Normal::new(0.0, 1.0 / (cols as f64).sqrt()).expect("positive std");
            params.extend((0..rows * cols).map(|_| normal.sample(&mut rng)));
            params.extend(std::iter::repeat_n(0.0, rows));
        };
        match arch.hidden {
            None => layer(arch.classes, arch.input_dim, &mut params),
            Some(h) => {
                layer(h, arch.input_dim, &mut params);
                layer(arch.classes, h, &mut params);
            }
        }
        Model::new(arch, ParamVector(params))
    }

    pub fn arch(&self) -> Arch {
        self.arch
    }

    pub fn params(&self) -> &ParamVector {
        &self.params
    }

    pub fn into_params(self) -> ParamVector {
        self.params
    }

    /// Same architecture, different parameters.
    pub fn with_params(&self, params: ParamVector) -> Result<Model> {
        Model::new(self.arch, params)
    }

    fn check_input(&self, x: &[f64]) -> Result<()> {
        check_len(self.arch.input_dim, x.len())
    }

    fn hidden_activations(&self, x: &[f64], h: usize) -> Vec<f64> {
        let d = self.arch.input_dim;
        let p = self.params.as_slice();
        let (w1, rest) = p.split_at(h * d);
        let b1 = &rest[..h];
        (0..h)
            .map(|j| {
                let row = &w1[j * d..(j + 1) * d];
                (row.iter().zip(x).map(|(w, v)| w * v).sum::<f64>() + b1[j]).tanh()
            })
            .collect()
    }

    fn output_logits(&self, input: &[f64], offset: usize) -> Vec<f64> {
        let c = self.arch.classes;
        let d = input.len();
        let p = &self.params.as_slice()[offset..];
        let (w, rest) = p.split_at(c * d);
        let b = &rest[..c];
        (0..c)
            .map(|k| {
                let row = &w[k * d..(k + 1) * d];
                row.iter().zip(input).map(|(w, v)| w * v).sum::<f64>() + b[k]
            })
            .collect()
    }

    pub fn logits(&self, x: &[f64]) -> Result<Vec<f64>> {
        self.check_input(x)?;
        Ok(self.logits_unchecked(x))
    }

    fn logits_unchecked(&self, x: &[f64]) -> Vec<f64> {
        match self.arch.hidden {
            None => self.output_logits(x, 0),
            Some(h) => {
                let a = self.hidden_activations(x, h);
                self.output_logits(&a, h * self.arch.input_dim + h)
            }
        }
    }

    pub fn predict(&self, x: &[f64]) -> Result<usize> {
        Ok(argmax(&self.logits(x)?))
    }

    /// Cross-entropy loss of one sample; accumulates the gradient into `grad`.
    pub fn loss_and_grad(&self, x: &[f64], label: usize, grad: &mut [f64]) -> Result<f64> {
        self.check_input(x)?;
        check_len(self.params.len(), grad.len())?;
        if label >= self.arch.classes {
            return Err(Error::invalid(format!(
                "label {label} out of range for {} classes",
                self.arch.classes
            )));
        }
        Ok(self.loss_and_grad_unchecked(x, label, grad))
    }

    fn loss_and_grad_unchecked(&self, x: &[f64], label: usize, grad: &mut [f64]) -> f64 {
        let c = self.arch.classes;
        match self.arch.hidden {
            None => {
                let logits = self.output_logits(x, 0);
                let (loss, dz) = softmax_xent(&logits, label);
                accumulate_dense(grad, &dz, x);
                loss
            }
            Some(h) => {
                let d = self.arch.input_dim;
                let act = self.hidden_activations(x, h);
                let out_off = h * d + h;
                let logits = self.output_logits(&act, out_off);
                let (loss, dz) = softmax_xent(&logits, label);
                let (g_hidden, g_out) = grad.split_at_mut(out_off);
                accumulate_dense(g_out, &dz, &act);
                let w2 = &self.params.as_slice()[out_off..out_off + c * h];
                let da: Vec<f64> = (0..h)
                    .map(|j| {
                        let back: f64 = (0..c).map(|k| w2[k * h + j] * dz[k]).sum();
                        back * (1.0 - act[j] * act[j])
                    })
                    .collect();
                accumulate_dense(g_hidden, &da, x);
                loss
            }
        }
    }
}

/// Adds the gradient of a dense layer `z = W x + b` given `dz`.
fn accumulate_dense(grad: &mut [f64], dz: &[f64], x: &[f64]) {
    let d = x.len();
    let rows = dz.len();
    let (gw, gb) = grad.split_at_mut(rows * d);
    for (k, &g) in dz.iter().enumerate() {
        if g == 0.0 {
            continue;
        }
        for (w, v) in gw[k * d..(k + 1) * d].iter_mut().zip(x) {
            *w += g * v;
        }
        gb[k] += g;
    }
}

/// Returns `(loss, dloss/dlogits)` using a stable log-sum-exp.
fn softmax_xent(logits: &[f64], label: usize) -> (f64, Vec<f64>) {
    let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = logits.iter().map(|z| (z - max).exp()).collect();
    let sum: f64 = exps.iter().sum();
    let loss = sum.ln() + max - logits[label];
    let mut dz: Vec<f64> = exps.iter().map(|e| e / sum).collect();
    dz[label] -= 1.0;
    (loss, dz)
}

/// Index of the largest value; ties go to the lowest index.
pub fn argmax(values: &[f64]) -> usize {
    let mut best = 0;
    for (i, v) in values.iter().enumerate() {
        if *v > values[best] {
            best = i;
        }
    }
    best
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub local_epochs: usize,
    pub batch_size: usize,
    #[serde(default)]
    pub seed: u64,
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate >= 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::invalid("learning_rate must be finite and non-negative"));
        }
        if self.local_epochs == 0 {
            return Err(Error::invalid("local_epochs must be at least 1"));
        }
        if self.batch_size == 0 {
            return Err(Error::invalid("batch_size must be at least 1"));
        }
        Ok(())
    }
}

/// Mini-batch SGD on cross-entropy. Sample order is reshuffled every epoch
/// from `cfg.seed`; the input model is left untouched.
pub fn train_sgd(model: &Model, data: &LabeledDataset, cfg: &TrainConfig) -> Result<Model> {
    cfg.validate()?;
    if data.is_empty() {
        return Err(Error::invalid("training data is empty"));
    }
    check_len(model.arch.input_dim, data.dim())?;
    if data.classes() > model.arch.classes {
        return Err(Error::DimensionMismatch {
            expected: model.arch.classes,
            actual: data.classes(),
        });
    }
    let mut rng = rng::from_seed(cfg.seed);
    let mut current = model.clone();
    let mut order: Vec<usize> = (0..data.len()).collect();
    let mut grad = vec![0.0; current.params.len()];
    for epoch in 0..cfg.local_epochs {
        order.shuffle(&mut rng);
        for batch in order.chunks(cfg.batch_size) {
            grad.iter_mut().for_each(|g| *g = 0.0);
            let mut loss = 0.0;
            for &i in batch {
                loss += current.loss_and_grad_unchecked(data.row(i), data.label(i), &mut grad);
            }
            if !loss.is_finite() {
                return Err(Error::NumericFailure(format!(
                    "non-finite loss in epoch {epoch}"
                )));
            }
            let step = cfg.learning_rate / batch.len() as f64;
            for (p, g) in current.params.0.iter_mut().zip(&grad) {
                *p -= step * g;
            }
        }
    }
    if !current.params.is_finite() {
        return Err(Error::NumericFailure("non-finite parameters after training".into()));
    }
    Ok(current)
}

/// Fraction of samples whose argmax prediction matches the label.
pub fn evaluate_accuracy(model: &Model, data: &LabeledDataset) -> Result<f64> {
    if data.is_empty() {
        return Err(Error::invalid("evaluation data is empty"));
    }
    check_len(model.arch.input_dim, data.dim())?;
    let correct = (0..data.len())
        .filter(|&i| argmax(&model.logits_unchecked(data.row(i))) == data.label(i))
        .count();
    Ok(correct as f64 / data.len() as f64)
}
