//! Self-supervised warm start for the image encoder: a linear probe on the
//! encoder output regresses a coarse colour thumbnail of the input, so the
//! features carry colour and layout before any game is played.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{ImageError, ImageTensor};
use crate::nn::{Adam, ImageEncoder, ParamStore};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EncoderPretrainConfig {
    pub epochs: usize,
    pub learning_rate: f64,
    /// Side of the regressed thumbnail.
    pub thumbnail: usize,
    pub seed: u64,
}

impl Default for EncoderPretrainConfig {
    fn default() -> Self {
        EncoderPretrainConfig { epochs: 4, learning_rate: 0.003, thumbnail: 4, seed: 0 }
    }
}

/// Area-averaged `t x t x 3` thumbnail rescaled to [-1, 1].
pub fn thumbnail(image: &ImageTensor, t: usize) -> Vec<f64> {
    let mut out = vec![0.0; t * t * 3];
    let mut counts = vec![0usize; t * t];
    for y in 0..image.height {
        for x in 0..image.width {
            let cell = (y * t / image.height) * t + x * t / image.width;
            counts[cell] += 1;
            for (c, v) in image.pixel(y, x).iter().enumerate() {
                out[cell * 3 + c] += v;
            }
        }
    }
    for (cell, &n) in counts.iter().enumerate() {
        for c in 0..3 {
            out[cell * 3 + c] = 2.0 * out[cell * 3 + c] / n.max(1) as f64 - 1.0;
        }
    }
    out
}

/// Trains the `encoder` tensors in `store` against the thumbnail target with
/// Adam, one image at a time. Returns the mean squared error of each epoch.
pub fn pretrain_encoder(
    encoder: &ImageEncoder,
    store: &mut ParamStore,
    images: &[ImageTensor],
    config: &EncoderPretrainConfig,
) -> Result<Vec<f64>, ImageError> {
    if images.is_empty() {
        return Err(ImageError::EmptyDataset);
    }
    let prefix = format!("{}.", encoder.prefix);
    let mut local = store.extract(&prefix);
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let targets: Vec<Vec<f64>> = images.iter().map(|im| thumbnail(im, config.thumbnail)).collect();
    let outputs = targets[0].len();
    local.add_uniform("probe.w", &[outputs, encoder.out_dim], encoder.out_dim, &mut rng);
    local.add_zeros("probe.b", &[outputs]);
    let mut adam = Adam::new(config.learning_rate);
    let mut order: Vec<usize> = (0..images.len()).collect();
    let mut losses = Vec::with_capacity(config.epochs);
    for epoch in 0..config.epochs {
        order.shuffle(&mut rng);
        let mut total = 0.0;
        for &i in &order {
            let image = &images[i];
            let (feature, cache) = encoder.forward(&local.params, &image.data, image.height, image.width);
            let w = local.params.get("probe.w").to_vec();
            let b = local.params.get("probe.b");
            let mut d_out = vec![0.0; outputs];
            let mut loss = 0.0;
            for o in 0..outputs {
                let y = b[o] + crate::nn::dot(&w[o * encoder.out_dim..(o + 1) * encoder.out_dim], &feature);
                let err = y - targets[i][o];
                loss += err * err / outputs as f64;
                d_out[o] = 2.0 * err / outputs as f64;
            }
            if !loss.is_finite() {
                return Err(ImageError::Diverged { epoch, loss });
            }
            total += loss;
            local.zero_grad();
            let mut d_feature = vec![0.0; encoder.out_dim];
            {
                let dw = local.grads.get_mut("probe.w");
                for o in 0..outputs {
                    for k in 0..encoder.out_dim {
                        dw[o * encoder.out_dim + k] += d_out[o] * feature[k];
                        d_feature[k] += d_out[o] * w[o * encoder.out_dim + k];
                    }
                }
            }
            local.grads.get_mut("probe.b").copy_from_slice(&d_out);
            encoder.backward(&local.params, &mut local.grads, &cache, &d_feature);
            adam.step(&mut local);
        }
        losses.push(total / images.len() as f64);
    }
    for (name, tensor) in local.params.iter().filter(|(k, _)| k.starts_with(&prefix)) {
        store.params.get_mut(name).copy_from_slice(&tensor.data);
    }
    Ok(losses)
}
