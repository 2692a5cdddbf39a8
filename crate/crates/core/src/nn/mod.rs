//! Parameter storage and the hand-differentiated building blocks of the
//! agent network: token embeddings, the stacked bidirectional GRU, the
//! convolutional image encoder and the action/value heads.
//!
//! Every layer exposes a forward pass returning a cache and a backward pass
//! that accumulates into [`Grads`]. All arithmetic is `f64`.

mod checkpoint;
mod cnn;
mod embed;
mod gru;
mod ops;
mod scorer;

use std::collections::BTreeMap;

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use checkpoint::{load_checkpoint, save_checkpoint, Checkpoint};
pub use cnn::{CnnCache, ImageEncoder};
pub use embed::{tokenize, Embedding, Vocab, OOV_TOKEN};
pub use gru::{GruCache, TextEncoder, TextState};
pub use ops::{dot, log_softmax, sigmoid, softmax};
pub use scorer::{ActionScorer, ScoreCache, Scores};

#[derive(Debug, Error)]
pub enum NnError {
    #[error("checkpoint: {0}")]
    Checkpoint(String),
    #[error("parameter `{0}` is not finite")]
    NonFinite(String),
    #[error("shape mismatch for `{name}`: expected {expected:?}, found {found:?}")]
    Shape { name: String, expected: Vec<usize>, found: Vec<usize> },
    #[error("no admissible actions to score")]
    NoActions,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Tensor {
    pub shape: Vec<usize>,
    pub data: Vec<f64>,
}

impl Tensor {
    pub fn zeros(shape: &[usize]) -> Self {
        Tensor { shape: shape.to_vec(), data: vec![0.0; shape.iter().product()] }
    }
}

/// Named parameter tensors, ordered by name.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Params(BTreeMap<String, Tensor>);

impl Params {
    pub fn get(&self, name: &str) -> &[f64] {
        match self.0.get(name) {
            Some(t) => &t.data,
            None => panic!("unknown parameter `{name}`"),
        }
    }

    pub fn tensor(&self, name: &str) -> Option<&Tensor> {
        self.0.get(name)
    }

    pub fn get_mut(&mut self, name: &str) -> &mut [f64] {
        match self.0.get_mut(name) {
            Some(t) => &mut t.data,
            None => panic!("unknown parameter `{name}`"),
        }
    }

    pub fn contains(&self, name: &str) -> bool {
        self.0.contains_key(name)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Tensor)> {
        self.0.iter()
    }

    pub fn insert(&mut self, name: impl Into<String>, tensor: Tensor) {
        self.0.insert(name.into(), tensor);
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn scalar_count(&self) -> usize {
        self.0.values().map(|t| t.data.len()).sum()
    }
}

/// Gradient buffers paired with [`Params`] by name.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Grads(BTreeMap<String, Vec<f64>>);

impl Grads {
    pub fn zeros_like(params: &Params) -> Self {
        Grads(params.0.iter().map(|(k, t)| (k.clone(), vec![0.0; t.data.len()])).collect())
    }

    pub fn get(&self, name: &str) -> &[f64] {
        match self.0.get(name) {
            Some(g) => g,
            None => panic!("no gradient buffer for `{name}`"),
        }
    }

    pub fn get_mut(&mut self, name: &str) -> &mut [f64] {
        match self.0.get_mut(name) {
            Some(g) => g,
            None => panic!("no gradient buffer for `{name}`"),
        }
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Vec<f64>)> {
        self.0.iter()
    }

    pub fn zero(&mut self) {
        for g in self.0.values_mut() {
            g.iter_mut().for_each(|x| *x = 0.0);
        }
    }

    /// Sum of squares over the tensors whose names start with `prefix`.
    pub fn norm_sq(&self, prefix: &str) -> f64 {
        self.0
            .iter()
            .filter(|(k, _)| k.starts_with(prefix))
            .flat_map(|(_, g)| g.iter())
            .map(|x| x * x)
            .sum()
    }
}

/// Every trainable tensor of a model together with its gradient buffer.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore {
    pub params: Params,
    pub grads: Grads,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    /// Adds a tensor initialized uniformly in `±1/sqrt(fan_in)`.
    pub fn add_uniform(&mut self, name: &str, shape: &[usize], fan_in: usize, rng: &mut ChaCha8Rng) {
        let bound = 1.0 / (fan_in.max(1) as f64).sqrt();
        let n: usize = shape.iter().product();
        let data = (0..n).map(|_| rng.gen_range(-bound..=bound)).collect();
        self.insert(name, Tensor { shape: shape.to_vec(), data });
    }

    pub fn add_zeros(&mut self, name: &str, shape: &[usize]) {
        self.insert(name, Tensor::zeros(shape));
    }

    pub fn insert(&mut self, name: &str, tensor: Tensor) {
        self.grads.0.insert(name.to_string(), vec![0.0; tensor.data.len()]);
        self.params.insert(name, tensor);
    }

    /// Merges another store's tensors in (e.g. generator weights into the
    /// agent's store).
    pub fn extend(&mut self, other: &ParamStore) {
        for (name, tensor) in other.params.iter() {
            self.insert(name, tensor.clone());
        }
    }

    /// Copies out the tensors whose names start with `prefix`.
    pub fn extract(&self, prefix: &str) -> ParamStore {
        let mut out = ParamStore::new();
        for (name, tensor) in self.params.iter().filter(|(k, _)| k.starts_with(prefix)) {
            out.insert(name, tensor.clone());
        }
        out
    }

    pub fn zero_grad(&mut self) {
        self.grads.zero();
    }

    /// Plain gradient descent on the tensors selected by `include`.
    /// Plain SGD; `scale` multiplies the rate per tensor, and 0 freezes it.
    pub fn sgd_step(&mut self, learning_rate: f64, scale: impl Fn(&str) -> f64) {
        for (name, tensor) in self.params.0.iter_mut() {
            let rate = learning_rate * scale(name);
            if rate == 0.0 {
                continue;
            }
            let grad = &self.grads.0[name];
            for (w, g) in tensor.data.iter_mut().zip(grad) {
                *w -= rate * g;
            }
        }
    }

    /// Rescales the selected gradients so their joint L2 norm is at most
    /// `max_norm`. Returns the norm before clipping.
    pub fn clip_grad_norm(&mut self, max_norm: f64, include: impl Fn(&str) -> bool) -> f64 {
        let norm = self.grads.0.iter().filter(|(k, _)| include(k)).flat_map(|(_, g)| g).map(|x| x * x).sum::<f64>().sqrt();
        if norm > max_norm && norm > 0.0 {
            let scale = max_norm / norm;
            for (_, g) in self.grads.0.iter_mut().filter(|(k, _)| include(k)) {
                g.iter_mut().for_each(|x| *x *= scale);
            }
        }
        norm
    }

    pub fn check_finite(&self) -> Result<(), NnError> {
        for (name, tensor) in self.params.iter() {
            if tensor.data.iter().any(|x| !x.is_finite()) {
                return Err(NnError::NonFinite(name.clone()));
            }
        }
        Ok(())
    }

    /// True when every gradient buffer matches its parameter's length.
    pub fn shapes_consistent(&self) -> bool {
        self.params.len() == self.grads.0.len()
            && self
                .params
                .iter()
                .all(|(k, t)| self.grads.0.get(k).is_some_and(|g| g.len() == t.data.len()))
    }
}

/// Adam over every tensor of a [`ParamStore`], used for generator
/// pretraining.
#[derive(Clone, Debug)]
pub struct Adam {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    step: i32,
    m: BTreeMap<String, Vec<f64>>,
    v: BTreeMap<String, Vec<f64>>,
}

impl Adam {
    pub fn new(learning_rate: f64) -> Self {
        Adam { learning_rate, beta1: 0.9, beta2: 0.999, eps: 1e-8, step: 0, m: BTreeMap::new(), v: BTreeMap::new() }
    }

    pub fn step(&mut self, store: &mut ParamStore) {
        self.step_scaled(store, |_| 1.0);
    }

    /// Like [`Adam::step`] with the rate multiplied per tensor by `scale`;
    /// tensors scaled by 0 are left alone.
    pub fn step_scaled(&mut self, store: &mut ParamStore, scale: impl Fn(&str) -> f64) {
        self.step += 1;
        let c1 = 1.0 - self.beta1.powi(self.step);
        let c2 = 1.0 - self.beta2.powi(self.step);
        for (name, tensor) in store.params.0.iter_mut() {
            let rate = self.learning_rate * scale(name);
            if rate == 0.0 {
                continue;
            }
            let grad = &store.grads.0[name];
            let m = self.m.entry(name.clone()).or_insert_with(|| vec![0.0; grad.len()]);
            let v = self.v.entry(name.clone()).or_insert_with(|| vec![0.0; grad.len()]);
            for i in 0..grad.len() {
                m[i] = self.beta1 * m[i] + (1.0 - self.beta1) * grad[i];
                v[i] = self.beta2 * v[i] + (1.0 - self.beta2) * grad[i] * grad[i];
                tensor.data[i] -= rate * (m[i] / c1) / ((v[i] / c2).sqrt() + self.eps);
            }
        }
    }
}
