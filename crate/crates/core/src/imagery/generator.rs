//! Toy text-to-image generator with per-stage word attention.
//!
//! ```text
//! s    = mean of query word embeddings
//! c    = tanh(W_c [s; z] + b_c)                     z ~ U(-1, 1), seeded
//! h0   = tanh(W_b c + b_b)                          base_size^2 x channels
//! stage k: u = nearest-upsample(h), per pixel:
//!      a = softmax_j(<W_q u, e_j> / sqrt(d))        attention over words
//!      h = tanh(W_k [u; sum_j a_j e_j] + b_k)
//! rgb  = sigmoid(W_o h + b_o)
//! ```

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{CaptionDataset, ImageError, ImageTensor};
use crate::nn::{dot, sigmoid, softmax, tokenize, Adam, Grads, ParamStore, Params, Vocab};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GeneratorConfig {
    pub embed_dim: usize,
    pub noise_dim: usize,
    pub cond_dim: usize,
    pub channels: usize,
    pub base_size: usize,
    /// Upsampling factor of each attention stage.
    pub upsample: Vec<usize>,
}

impl Default for GeneratorConfig {
    fn default() -> Self {
        GeneratorConfig { embed_dim: 16, noise_dim: 4, cond_dim: 32, channels: 8, base_size: 8, upsample: vec![4, 2] }
    }
}

impl GeneratorConfig {
    /// Small variant producing 8x8 images.
    pub fn reduced() -> Self {
        GeneratorConfig { embed_dim: 4, noise_dim: 2, cond_dim: 5, channels: 3, base_size: 2, upsample: vec![2, 2] }
    }

    pub fn output_size(&self) -> usize {
        self.base_size * self.upsample.iter().product::<usize>()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Generator {
    pub config: GeneratorConfig,
    pub vocab: Vocab,
}

struct StageCache {
    size: usize,
    factor: usize,
    /// `pixels x tokens`
    attention: Vec<f64>,
    query: Vec<f64>,
    context: Vec<f64>,
    /// Post-tanh features, `pixels x channels`.
    hidden: Vec<f64>,
}

pub struct GenCache {
    ids: Vec<usize>,
    words: Vec<f64>,
    cond_input: Vec<f64>,
    cond: Vec<f64>,
    base: Vec<f64>,
    stages: Vec<StageCache>,
    out: Vec<f64>,
}

impl GenCache {
    /// Attention weights of `stage`, one row of token weights per pixel.
    pub fn attention(&self, stage: usize) -> &[f64] {
        &self.stages[stage].attention
    }

    pub fn stage_count(&self) -> usize {
        self.stages.len()
    }

    pub fn token_count(&self) -> usize {
        self.ids.len()
    }
}

fn stage_name(k: usize, what: &str) -> String {
    format!("gen.s{k}.{what}")
}

impl Generator {
    pub fn new(config: GeneratorConfig, vocab: Vocab) -> Self {
        Generator { config, vocab }
    }

    /// Generator whose vocabulary covers every caption word.
    pub fn for_dataset(config: GeneratorConfig, dataset: &CaptionDataset) -> Self {
        let vocab = Vocab::from_words(dataset.captions().flat_map(tokenize));
        Generator::new(config, vocab)
    }

    pub fn init(&self, store: &mut ParamStore, rng: &mut ChaCha8Rng) {
        let c = &self.config;
        let d = c.embed_dim;
        store.add_uniform("gen.embed", &[self.vocab.len(), d], 1, rng);
        store.add_uniform("gen.cond.w", &[c.cond_dim, d + c.noise_dim], d + c.noise_dim, rng);
        store.add_uniform("gen.cond.b", &[c.cond_dim], d + c.noise_dim, rng);
        let base = c.base_size * c.base_size * c.channels;
        store.add_uniform("gen.base.w", &[base, c.cond_dim], c.cond_dim, rng);
        store.add_uniform("gen.base.b", &[base], c.cond_dim, rng);
        for k in 0..c.upsample.len() {
            store.add_uniform(&stage_name(k, "q"), &[d, c.channels], c.channels, rng);
            store.add_uniform(&stage_name(k, "w"), &[c.channels, c.channels + d], c.channels + d, rng);
            store.add_uniform(&stage_name(k, "b"), &[c.channels], c.channels + d, rng);
        }
        store.add_uniform("gen.out.w", &[3, c.channels], c.channels, rng);
        store.add_uniform("gen.out.b", &[3], c.channels, rng);
    }

    /// Token ids of `query`; an empty query becomes a single unknown token.
    pub fn token_ids(&self, query: &str) -> Vec<usize> {
        let ids = self.vocab.ids(&tokenize(query));
        if ids.is_empty() {
            vec![0]
        } else {
            ids
        }
    }

    pub fn noise(&self, seed: u64) -> Vec<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (0..self.config.noise_dim).map(|_| rng.gen_range(-1.0..1.0)).collect()
    }

    pub fn generate(&self, params: &Params, query: &str, noise_seed: u64) -> (ImageTensor, GenCache) {
        self.forward_ids(params, &self.token_ids(query), &self.noise(noise_seed))
    }

    pub fn forward_ids(&self, params: &Params, ids: &[usize], noise: &[f64]) -> (ImageTensor, GenCache) {
        let c = &self.config;
        let d = c.embed_dim;
        let ch = c.channels;
        let table = params.get("gen.embed");
        let mut words = Vec::with_capacity(ids.len() * d);
        for &id in ids {
            words.extend_from_slice(&table[id * d..(id + 1) * d]);
        }
        let t = ids.len();
        let mut cond_input = vec![0.0; d + c.noise_dim];
        for j in 0..t {
            for i in 0..d {
                cond_input[i] += words[j * d + i] / t as f64;
            }
        }
        cond_input[d..].copy_from_slice(noise);
        let cond = dense_tanh(params.get("gen.cond.w"), params.get("gen.cond.b"), &cond_input);
        let base = dense_tanh(params.get("gen.base.w"), params.get("gen.base.b"), &cond);

        let scale = 1.0 / (d as f64).sqrt();
        let mut stages: Vec<StageCache> = Vec::with_capacity(c.upsample.len());
        let mut size = c.base_size;
        for (k, &factor) in c.upsample.iter().enumerate() {
            let prev = stages.last().map_or(&base, |s| &s.hidden);
            let wq = params.get(&stage_name(k, "q"));
            let w = params.get(&stage_name(k, "w"));
            let b = params.get(&stage_name(k, "b"));
            let new_size = size * factor;
            let pixels = new_size * new_size;
            let mut attention = vec![0.0; pixels * t];
            let mut query = vec![0.0; pixels * d];
            let mut context = vec![0.0; pixels * d];
            let mut hidden = vec![0.0; pixels * ch];
            let mut input = vec![0.0; ch + d];
            for y in 0..new_size {
                for x in 0..new_size {
                    let p = y * new_size + x;
                    let parent = (y / factor) * size + x / factor;
                    let u = &prev[parent * ch..(parent + 1) * ch];
                    let q = &mut query[p * d..(p + 1) * d];
                    for i in 0..d {
                        q[i] = dot(&wq[i * ch..(i + 1) * ch], u);
                    }
                    let scores: Vec<f64> = (0..t).map(|j| dot(q, &words[j * d..(j + 1) * d]) * scale).collect();
                    let a = softmax(&scores);
                    let ctx = &mut context[p * d..(p + 1) * d];
                    for j in 0..t {
                        for i in 0..d {
                            ctx[i] += a[j] * words[j * d + i];
                        }
                    }
                    attention[p * t..(p + 1) * t].copy_from_slice(&a);
                    input[..ch].copy_from_slice(u);
                    input[ch..].copy_from_slice(ctx);
                    let h = &mut hidden[p * ch..(p + 1) * ch];
                    for o in 0..ch {
                        h[o] = (b[o] + dot(&w[o * (ch + d)..(o + 1) * (ch + d)], &input)).tanh();
                    }
                }
            }
            stages.push(StageCache { size: new_size, factor, attention, query, context, hidden });
            size = new_size;
        }

        let last = stages.last().map_or(&base, |s| &s.hidden);
        let wo = params.get("gen.out.w");
        let bo = params.get("gen.out.b");
        let pixels = size * size;
        let mut out = vec![0.0; pixels * 3];
        for p in 0..pixels {
            let h = &last[p * ch..(p + 1) * ch];
            for o in 0..3 {
                out[p * 3 + o] = sigmoid(bo[o] + dot(&wo[o * ch..(o + 1) * ch], h));
            }
        }
        let image = ImageTensor { height: size, width: size, data: out.clone() };
        let cache = GenCache { ids: ids.to_vec(), words, cond_input, cond, base, stages, out };
        (image, cache)
    }

    /// Accumulates parameter gradients given the gradient at the output
    /// pixels (same layout as [`ImageTensor::data`]).
    pub fn backward(&self, params: &Params, grads: &mut Grads, cache: &GenCache, d_image: &[f64]) {
        let c = &self.config;
        let d = c.embed_dim;
        let ch = c.channels;
        let t = cache.ids.len();
        let scale = 1.0 / (d as f64).sqrt();
        let mut d_words = vec![0.0; t * d];

        let last = cache.stages.last().map_or(&cache.base, |s| &s.hidden);
        let pixels = cache.out.len() / 3;
        let mut d_hidden = vec![0.0; pixels * ch];
        {
            let wo = params.get("gen.out.w");
            let mut d_wo = vec![0.0; 3 * ch];
            let mut d_bo = [0.0; 3];
            for p in 0..pixels {
                let h = &last[p * ch..(p + 1) * ch];
                for o in 0..3 {
                    let s = cache.out[p * 3 + o];
                    let g = d_image[p * 3 + o] * s * (1.0 - s);
                    if g == 0.0 {
                        continue;
                    }
                    d_bo[o] += g;
                    for i in 0..ch {
                        d_wo[o * ch + i] += g * h[i];
                        d_hidden[p * ch + i] += g * wo[o * ch + i];
                    }
                }
            }
            add(grads.get_mut("gen.out.w"), &d_wo);
            add(grads.get_mut("gen.out.b"), &d_bo);
        }

        for k in (0..cache.stages.len()).rev() {
            let stage = &cache.stages[k];
            let prev = if k == 0 { &cache.base } else { &cache.stages[k - 1].hidden };
            let prev_size = stage.size / stage.factor;
            let wq = params.get(&stage_name(k, "q"));
            let w = params.get(&stage_name(k, "w"));
            let mut d_wq = vec![0.0; d * ch];
            let mut d_w = vec![0.0; ch * (ch + d)];
            let mut d_b = vec![0.0; ch];
            let mut d_prev = vec![0.0; prev.len()];
            let mut input = vec![0.0; ch + d];
            let mut d_input = vec![0.0; ch + d];
            let mut d_attn = vec![0.0; t];
            let mut d_q = vec![0.0; d];
            for y in 0..stage.size {
                for x in 0..stage.size {
                    let p = y * stage.size + x;
                    let parent = (y / stage.factor) * prev_size + x / stage.factor;
                    let u = &prev[parent * ch..(parent + 1) * ch];
                    let h = &stage.hidden[p * ch..(p + 1) * ch];
                    let ctx = &stage.context[p * d..(p + 1) * d];
                    input[..ch].copy_from_slice(u);
                    input[ch..].copy_from_slice(ctx);
                    d_input.iter_mut().for_each(|v| *v = 0.0);
                    for o in 0..ch {
                        let g = d_hidden[p * ch + o] * (1.0 - h[o] * h[o]);
                        if g == 0.0 {
                            continue;
                        }
                        d_b[o] += g;
                        let row = o * (ch + d);
                        for i in 0..ch + d {
                            d_w[row + i] += g * input[i];
                            d_input[i] += g * w[row + i];
                        }
                    }
                    let a = &stage.attention[p * t..(p + 1) * t];
                    let d_ctx = &d_input[ch..];
                    for j in 0..t {
                        let e = &words_row(&cache.words, j, d);
                        d_attn[j] = dot(d_ctx, e);
                        for i in 0..d {
                            d_words[j * d + i] += a[j] * d_ctx[i];
                        }
                    }
                    let mix: f64 = (0..t).map(|j| a[j] * d_attn[j]).sum();
                    let q = &stage.query[p * d..(p + 1) * d];
                    d_q.iter_mut().for_each(|v| *v = 0.0);
                    for j in 0..t {
                        let g = a[j] * (d_attn[j] - mix) * scale;
                        if g == 0.0 {
                            continue;
                        }
                        for i in 0..d {
                            d_q[i] += g * cache.words[j * d + i];
                            d_words[j * d + i] += g * q[i];
                        }
                    }
                    let d_u = &mut d_prev[parent * ch..(parent + 1) * ch];
                    for i in 0..ch {
                        d_u[i] += d_input[i];
                    }
                    for i in 0..d {
                        if d_q[i] == 0.0 {
                            continue;
                        }
                        for o in 0..ch {
                            d_wq[i * ch + o] += d_q[i] * u[o];
                            d_u[o] += d_q[i] * wq[i * ch + o];
                        }
                    }
                }
            }
            add(grads.get_mut(&stage_name(k, "q")), &d_wq);
            add(grads.get_mut(&stage_name(k, "w")), &d_w);
            add(grads.get_mut(&stage_name(k, "b")), &d_b);
            d_hidden = d_prev;
        }

        let d_cond = dense_tanh_backward(
            params.get("gen.base.w"),
            &cache.cond,
            &cache.base,
            &d_hidden,
            grads,
            "gen.base.w",
            "gen.base.b",
        );
        let d_cond_input = dense_tanh_backward(
            params.get("gen.cond.w"),
            &cache.cond_input,
            &cache.cond,
            &d_cond,
            grads,
            "gen.cond.w",
            "gen.cond.b",
        );
        for j in 0..t {
            for i in 0..d {
                d_words[j * d + i] += d_cond_input[i] / t as f64;
            }
        }
        let table = grads.get_mut("gen.embed");
        for (j, &id) in cache.ids.iter().enumerate() {
            for i in 0..d {
                table[id * d + i] += d_words[j * d + i];
            }
        }
    }
}

fn words_row(words: &[f64], j: usize, d: usize) -> &[f64] {
    &words[j * d..(j + 1) * d]
}

fn add(target: &mut [f64], delta: &[f64]) {
    for (t, d) in target.iter_mut().zip(delta) {
        *t += d;
    }
}

fn dense_tanh(w: &[f64], b: &[f64], x: &[f64]) -> Vec<f64> {
    let n = x.len();
    (0..b.len()).map(|o| (b[o] + dot(&w[o * n..(o + 1) * n], x)).tanh()).collect()
}

/// Backward of `y = tanh(W x + b)`; returns `dL/dx`.
fn dense_tanh_backward(
    w: &[f64],
    x: &[f64],
    y: &[f64],
    d_y: &[f64],
    grads: &mut Grads,
    w_name: &str,
    b_name: &str,
) -> Vec<f64> {
    let n = x.len();
    let d_pre: Vec<f64> = y.iter().zip(d_y).map(|(y, g)| g * (1.0 - y * y)).collect();
    let mut d_x = vec![0.0; n];
    let d_w = grads.get_mut(w_name);
    for (o, &g) in d_pre.iter().enumerate() {
        if g == 0.0 {
            continue;
        }
        for i in 0..n {
            d_w[o * n + i] += g * x[i];
            d_x[i] += g * w[o * n + i];
        }
    }
    add(grads.get_mut(b_name), &d_pre);
    d_x
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PretrainConfig {
    pub epochs: usize,
    pub learning_rate: f64,
    /// Probability of replacing each caption token by the unknown token.
    pub word_dropout: f64,
    pub seed: u64,
}

impl Default for PretrainConfig {
    fn default() -> Self {
        PretrainConfig { epochs: 8, learning_rate: 0.01, word_dropout: 0.15, seed: 0 }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct PretrainReport {
    /// Mean per-pixel squared error over the dataset, one entry per epoch.
    pub epoch_losses: Vec<f64>,
}

/// Caption-conditioned reconstruction: minimizes the mean squared pixel
/// error between the generated image and the caption's image, one caption
/// at a time with Adam. Only `gen.*` tensors in `store` are touched.
pub fn pretrain_generator(
    generator: &Generator,
    store: &mut ParamStore,
    dataset: &CaptionDataset,
    config: &PretrainConfig,
) -> Result<PretrainReport, ImageError> {
    if dataset.is_empty() {
        return Err(ImageError::EmptyDataset);
    }
    let mut local = store.extract("gen.");
    let mut adam = Adam::new(config.learning_rate);
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let encoded: Vec<Vec<usize>> = dataset.pairs.iter().map(|(c, _)| generator.token_ids(c)).collect();
    let mut order: Vec<usize> = (0..dataset.len()).collect();
    let mut report = PretrainReport::default();
    for epoch in 0..config.epochs {
        order.shuffle(&mut rng);
        let mut total = 0.0;
        for &i in &order {
            let target = &dataset.pairs[i].1;
            let ids: Vec<usize> = encoded[i]
                .iter()
                .map(|&id| if rng.gen_bool(config.word_dropout) { 0 } else { id })
                .collect();
            let noise: Vec<f64> = (0..generator.config.noise_dim).map(|_| rng.gen_range(-1.0..1.0)).collect();
            let (image, cache) = generator.forward_ids(&local.params, &ids, &noise);
            let n = image.data.len() as f64;
            let mut loss = 0.0;
            let d_image: Vec<f64> = image
                .data
                .iter()
                .zip(&target.data)
                .map(|(o, t)| {
                    loss += (o - t) * (o - t) / n;
                    2.0 * (o - t) / n
                })
                .collect();
            if !loss.is_finite() {
                return Err(ImageError::Diverged { epoch, loss });
            }
            total += loss;
            local.zero_grad();
            generator.backward(&local.params, &mut local.grads, &cache, &d_image);
            adam.step(&mut local);
        }
        let mean = total / dataset.len() as f64;
        if !mean.is_finite() || local.check_finite().is_err() {
            return Err(ImageError::Diverged { epoch, loss: mean });
        }
        report.epoch_losses.push(mean);
    }
    for (name, tensor) in local.params.iter() {
        store.params.get_mut(name).copy_from_slice(&tensor.data);
    }
    Ok(report)
}
