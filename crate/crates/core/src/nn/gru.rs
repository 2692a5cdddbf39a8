//! Stacked bidirectional GRU text encoder.
//!
//! Gates follow the usual formulation with separate input and hidden biases:
//!
//! ```text
//! r = σ(W_ir x + b_ir + W_hr h + b_hr)
//! z = σ(W_iz x + b_iz + W_hz h + b_hz)
//! n = tanh(W_in x + b_in + r ⊙ (W_hn h + b_hn))
//! h' = (1 - z) ⊙ n + z ⊙ h
//! ```
//!
//! The encoder state (final hidden vector of every layer and direction) is
//! carried from one game step to the next, and gradients flow back through it.

use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::ops::{axpy, dot, matvec_acc, matvec_t_acc, outer_acc, sigmoid};
use super::{Grads, ParamStore, Params};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TextEncoder {
    pub prefix: String,
    pub input_dim: usize,
    pub hidden: usize,
    pub layers: usize,
}

/// Per layer, the `[forward, backward]` hidden vectors.
#[derive(Clone, Debug, PartialEq)]
pub struct TextState {
    pub hidden: Vec<[Vec<f64>; 2]>,
}

impl TextState {
    pub fn zeros(layers: usize, hidden: usize) -> Self {
        TextState { hidden: (0..layers).map(|_| [vec![0.0; hidden], vec![0.0; hidden]]).collect() }
    }

    pub fn flat(&self) -> Vec<f64> {
        self.hidden.iter().flat_map(|[f, b]| f.iter().chain(b.iter()).copied()).collect()
    }
}

struct StepCache {
    h_prev: Vec<f64>,
    r: Vec<f64>,
    z: Vec<f64>,
    n: Vec<f64>,
    /// `W_hn h + b_hn`, needed for the reset-gate gradient.
    hn: Vec<f64>,
}

struct DirCache {
    /// Indexed by processing order, not by token position.
    steps: Vec<StepCache>,
}

pub struct GruCache {
    len: usize,
    /// Input to each layer, `len x in_dim(layer)`.
    inputs: Vec<Vec<f64>>,
    dirs: Vec<[DirCache; 2]>,
}

const DIRS: [&str; 2] = ["f", "b"];

impl TextEncoder {
    pub fn new(prefix: impl Into<String>, input_dim: usize, hidden: usize, layers: usize) -> Self {
        TextEncoder { prefix: prefix.into(), input_dim, hidden, layers }
    }

    pub fn feature_dim(&self) -> usize {
        2 * self.hidden
    }

    fn layer_input(&self, layer: usize) -> usize {
        if layer == 0 {
            self.input_dim
        } else {
            2 * self.hidden
        }
    }

    fn name(&self, layer: usize, dir: usize, what: &str) -> String {
        format!("{}.l{}.{}.{}", self.prefix, layer, DIRS[dir], what)
    }

    pub fn init(&self, store: &mut ParamStore, rng: &mut ChaCha8Rng) {
        let h = self.hidden;
        for layer in 0..self.layers {
            let input = self.layer_input(layer);
            for dir in 0..2 {
                // PyTorch convention: every GRU tensor uses fan-in = hidden size.
                store.add_uniform(&self.name(layer, dir, "w_ih"), &[3 * h, input], h, rng);
                store.add_uniform(&self.name(layer, dir, "w_hh"), &[3 * h, h], h, rng);
                store.add_uniform(&self.name(layer, dir, "b_ih"), &[3 * h], h, rng);
                store.add_uniform(&self.name(layer, dir, "b_hh"), &[3 * h], h, rng);
            }
        }
    }

    pub fn zero_state(&self) -> TextState {
        TextState::zeros(self.layers, self.hidden)
    }

    /// Encodes `len` embedded tokens (`x` is `len x input_dim`). The feature is
    /// the top layer's final forward and final backward hidden vectors.
    pub fn forward(
        &self,
        params: &Params,
        x: &[f64],
        state: &TextState,
    ) -> (Vec<f64>, TextState, GruCache) {
        let h = self.hidden;
        let len = x.len() / self.input_dim;
        let mut inputs = Vec::with_capacity(self.layers);
        let mut dirs = Vec::with_capacity(self.layers);
        let mut new_state = Vec::with_capacity(self.layers);
        let mut input = x.to_vec();
        for layer in 0..self.layers {
            let in_dim = self.layer_input(layer);
            let mut output = vec![0.0; len * 2 * h];
            let mut finals: [Vec<f64>; 2] = [Vec::new(), Vec::new()];
            let mut caches: Vec<DirCache> = Vec::with_capacity(2);
            for dir in 0..2 {
                let (cache, final_h) = self.run_direction(
                    params,
                    layer,
                    dir,
                    &input,
                    in_dim,
                    len,
                    &state.hidden[layer][dir],
                    &mut output,
                );
                caches.push(cache);
                finals[dir] = final_h;
            }
            let backward = caches.pop().expect("two directions");
            let forward = caches.pop().expect("two directions");
            dirs.push([forward, backward]);
            new_state.push(finals);
            inputs.push(std::mem::replace(&mut input, output));
        }
        let top = &new_state[self.layers - 1];
        let mut feature = top[0].clone();
        feature.extend_from_slice(&top[1]);
        (feature, TextState { hidden: new_state }, GruCache { len, inputs, dirs })
    }

    #[allow(clippy::too_many_arguments)]
    fn run_direction(
        &self,
        params: &Params,
        layer: usize,
        dir: usize,
        input: &[f64],
        in_dim: usize,
        len: usize,
        h0: &[f64],
        output: &mut [f64],
    ) -> (DirCache, Vec<f64>) {
        let h = self.hidden;
        let w_ih = params.get(&self.name(layer, dir, "w_ih"));
        let w_hh = params.get(&self.name(layer, dir, "w_hh"));
        let b_ih = params.get(&self.name(layer, dir, "b_ih"));
        let b_hh = params.get(&self.name(layer, dir, "b_hh"));
        let gi_all = project_rows(w_ih, b_ih, input, in_dim, len);
        let mut hidden = h0.to_vec();
        let mut steps = Vec::with_capacity(len);
        let mut gh = vec![0.0; 3 * h];
        for k in 0..len {
            let t = if dir == 0 { k } else { len - 1 - k };
            let gi = &gi_all[t * 3 * h..(t + 1) * 3 * h];
            gh.copy_from_slice(b_hh);
            matvec_acc(w_hh, &hidden, &mut gh);
            let mut r = vec![0.0; h];
            let mut z = vec![0.0; h];
            let mut n = vec![0.0; h];
            let mut next = vec![0.0; h];
            for j in 0..h {
                r[j] = sigmoid(gi[j] + gh[j]);
                z[j] = sigmoid(gi[h + j] + gh[h + j]);
                n[j] = (gi[2 * h + j] + r[j] * gh[2 * h + j]).tanh();
                next[j] = (1.0 - z[j]) * n[j] + z[j] * hidden[j];
            }
            output[t * 2 * h + dir * h..t * 2 * h + (dir + 1) * h].copy_from_slice(&next);
            let h_prev = std::mem::replace(&mut hidden, next);
            steps.push(StepCache { h_prev, r, z, n, hn: gh[2 * h..].to_vec() });
        }
        (DirCache { steps }, hidden)
    }

    /// Backpropagates `d_feature` and the gradient arriving at the carried
    /// state. Returns the gradient with respect to the input tokens and to
    /// the incoming state.
    pub fn backward(
        &self,
        params: &Params,
        grads: &mut Grads,
        cache: &GruCache,
        d_feature: &[f64],
        d_new_state: &TextState,
    ) -> (Vec<f64>, TextState) {
        let h = self.hidden;
        let len = cache.len;
        let mut d_state0 = self.zero_state();
        // Gradient w.r.t. the current layer's per-position output (len x 2h).
        let mut d_output = vec![0.0; len * 2 * h];
        let mut d_input = Vec::new();
        for layer in (0..self.layers).rev() {
            let in_dim = self.layer_input(layer);
            d_input = vec![0.0; len * in_dim];
            for dir in 0..2 {
                let mut d_final = d_new_state.hidden[layer][dir].clone();
                if layer == self.layers - 1 {
                    axpy(1.0, &d_feature[dir * h..(dir + 1) * h], &mut d_final);
                }
                d_state0.hidden[layer][dir] = self.backward_direction(
                    params,
                    grads,
                    layer,
                    dir,
                    &cache.inputs[layer],
                    in_dim,
                    len,
                    &cache.dirs[layer][dir],
                    &d_output,
                    d_final,
                    &mut d_input,
                );
            }
            d_output = d_input.clone();
        }
        (d_input, d_state0)
    }

    #[allow(clippy::too_many_arguments)]
    fn backward_direction(
        &self,
        params: &Params,
        grads: &mut Grads,
        layer: usize,
        dir: usize,
        input: &[f64],
        in_dim: usize,
        len: usize,
        cache: &DirCache,
        d_output: &[f64],
        d_final: Vec<f64>,
        d_input: &mut [f64],
    ) -> Vec<f64> {
        let h = self.hidden;
        let w_ih = params.get(&self.name(layer, dir, "w_ih"));
        let w_hh = params.get(&self.name(layer, dir, "w_hh"));
        let mut d_w_ih = grads.get(&self.name(layer, dir, "w_ih")).to_vec();
        let mut d_w_hh = grads.get(&self.name(layer, dir, "w_hh")).to_vec();
        let mut d_b_ih = grads.get(&self.name(layer, dir, "b_ih")).to_vec();
        let mut d_b_hh = grads.get(&self.name(layer, dir, "b_hh")).to_vec();

        let mut dh = d_final;
        // d_gi for every token position, applied to W_ih after the recurrence.
        let mut d_gi_all = vec![0.0; len * 3 * h];
        let mut d_gh = vec![0.0; 3 * h];
        for k in (0..len).rev() {
            let t = if dir == 0 { k } else { len - 1 - k };
            let step = &cache.steps[k];
            axpy(1.0, &d_output[t * 2 * h + dir * h..t * 2 * h + (dir + 1) * h], &mut dh);
            let d_gi = &mut d_gi_all[t * 3 * h..(t + 1) * 3 * h];
            let mut dh_prev = vec![0.0; h];
            for j in 0..h {
                let (r, z, n) = (step.r[j], step.z[j], step.n[j]);
                let dn = dh[j] * (1.0 - z);
                let dz = dh[j] * (step.h_prev[j] - n);
                dh_prev[j] = dh[j] * z;
                let dan = dn * (1.0 - n * n);
                let dr = dan * step.hn[j];
                let dar = dr * r * (1.0 - r);
                let daz = dz * z * (1.0 - z);
                d_gi[j] = dar;
                d_gi[h + j] = daz;
                d_gi[2 * h + j] = dan;
                d_gh[j] = dar;
                d_gh[h + j] = daz;
                d_gh[2 * h + j] = dan * r;
            }
            outer_acc(&d_gh, &step.h_prev, &mut d_w_hh);
            axpy(1.0, &d_gh, &mut d_b_hh);
            matvec_t_acc(w_hh, &d_gh, &mut dh_prev);
            dh = dh_prev;
        }
        for t in 0..len {
            axpy(1.0, &d_gi_all[t * 3 * h..(t + 1) * 3 * h], &mut d_b_ih);
        }
        for row in 0..3 * h {
            let w_row = &w_ih[row * in_dim..(row + 1) * in_dim];
            let d_row = &mut d_w_ih[row * in_dim..(row + 1) * in_dim];
            for t in 0..len {
                let g = d_gi_all[t * 3 * h + row];
                if g == 0.0 {
                    continue;
                }
                axpy(g, &input[t * in_dim..(t + 1) * in_dim], d_row);
                axpy(g, w_row, &mut d_input[t * in_dim..(t + 1) * in_dim]);
            }
        }
        grads.get_mut(&self.name(layer, dir, "w_ih")).copy_from_slice(&d_w_ih);
        grads.get_mut(&self.name(layer, dir, "w_hh")).copy_from_slice(&d_w_hh);
        grads.get_mut(&self.name(layer, dir, "b_ih")).copy_from_slice(&d_b_ih);
        grads.get_mut(&self.name(layer, dir, "b_hh")).copy_from_slice(&d_b_hh);
        dh
    }
}

/// `out[t] = W x_t + b` for every row `x_t` of `x` (`len x in_dim`), walking
/// `W` once.
fn project_rows(w: &[f64], b: &[f64], x: &[f64], in_dim: usize, len: usize) -> Vec<f64> {
    let rows = b.len();
    let mut out = vec![0.0; len * rows];
    for r in 0..rows {
        let w_row = &w[r * in_dim..(r + 1) * in_dim];
        for t in 0..len {
            out[t * rows + r] = b[r] + dot(w_row, &x[t * in_dim..(t + 1) * in_dim]);
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::Tensor;
    use rand::{Rng, SeedableRng};

    fn encoder(input: usize, hidden: usize) -> (TextEncoder, ParamStore) {
        let enc = TextEncoder::new("gru", input, hidden, 2);
        let mut store = ParamStore::new();
        enc.init(&mut store, &mut ChaCha8Rng::seed_from_u64(9));
        (enc, store)
    }

    #[test]
    fn feature_is_twice_hidden() {
        let (enc, store) = encoder(64, 128);
        let x = vec![0.1; 5 * 64];
        let (feature, state, _) = enc.forward(&store.params, &x, &enc.zero_state());
        assert_eq!(feature.len(), 256);
        assert_eq!(state.hidden.len(), 2);
    }

    #[test]
    fn zero_weights_and_state_give_zero_feature() {
        let (enc, mut store) = encoder(4, 3);
        let names: Vec<String> = store.params.iter().map(|(k, _)| k.clone()).collect();
        for name in names {
            let shape = store.params.tensor(&name).unwrap().shape.clone();
            store.insert(&name, Tensor::zeros(&shape));
        }
        let x: Vec<f64> = (0..12).map(|i| i as f64 - 5.0).collect();
        let (feature, _, _) = enc.forward(&store.params, &x, &enc.zero_state());
        assert!(feature.iter().all(|&v| v == 0.0));
    }

    /// Loss = w·feature + u·new_state; analytic vs central differences on
    /// inputs, initial state and every weight.
    #[test]
    fn gradients_match_finite_differences() {
        let (enc, mut store) = encoder(3, 4);
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let x: Vec<f64> = (0..3 * 3).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let mut s0 = enc.zero_state();
        for layer in &mut s0.hidden {
            for d in layer.iter_mut() {
                d.iter_mut().for_each(|v| *v = rng.gen_range(-0.5..0.5));
            }
        }
        let w: Vec<f64> = (0..8).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let u: Vec<f64> = (0..16).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let loss = |params: &Params, x: &[f64], s0: &TextState| {
            let (f, s, _) = enc.forward(params, x, s0);
            f.iter().zip(&w).map(|(a, b)| a * b).sum::<f64>()
                + s.flat().iter().zip(&u).map(|(a, b)| a * b).sum::<f64>()
        };

        let (_, _, cache) = enc.forward(&store.params, &x, &s0);
        let mut d_state = enc.zero_state();
        let mut k = 0;
        for layer in &mut d_state.hidden {
            for d in layer.iter_mut() {
                for v in d.iter_mut() {
                    *v = u[k];
                    k += 1;
                }
            }
        }
        let (dx, ds0) = enc.backward(&store.params, &mut store.grads, &cache, &w, &d_state);

        let eps = 1e-6;
        for i in 0..x.len() {
            let mut xp = x.clone();
            xp[i] += eps;
            let mut xm = x.clone();
            xm[i] -= eps;
            let fd = (loss(&store.params, &xp, &s0) - loss(&store.params, &xm, &s0)) / (2.0 * eps);
            assert!((fd - dx[i]).abs() < 1e-7, "dx[{i}]: {fd} vs {}", dx[i]);
        }
        let flat_ds0 = ds0.flat();
        let mut k = 0;
        for layer in 0..2 {
            for dir in 0..2 {
                for j in 0..4 {
                    let mut sp = s0.clone();
                    sp.hidden[layer][dir][j] += eps;
                    let mut sm = s0.clone();
                    sm.hidden[layer][dir][j] -= eps;
                    let fd = (loss(&store.params, &x, &sp) - loss(&store.params, &x, &sm)) / (2.0 * eps);
                    assert!((fd - flat_ds0[k]).abs() < 1e-7);
                    k += 1;
                }
            }
        }
        let names: Vec<String> = store.params.iter().map(|(k, _)| k.clone()).collect();
        for name in names {
            let n = store.params.get(&name).len();
            for i in 0..n {
                let mut p = store.params.clone();
                p.get_mut(&name)[i] += eps;
                let mut m = store.params.clone();
                m.get_mut(&name)[i] -= eps;
                let fd = (loss(&p, &x, &s0) - loss(&m, &x, &s0)) / (2.0 * eps);
                let an = store.grads.get(&name)[i];
                assert!((fd - an).abs() < 1e-7, "{name}[{i}]: {fd} vs {an}");
            }
        }
    }

    #[test]
    fn empty_sequence_passes_state_through() {
        let (enc, store) = encoder(3, 4);
        let mut s0 = enc.zero_state();
        s0.hidden[1][0][0] = 0.25;
        let (feature, s1, _) = enc.forward(&store.params, &[], &s0);
        assert_eq!(s1, s0);
        assert_eq!(feature[0], 0.25);
    }
}
