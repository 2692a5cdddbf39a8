//! Small convolutional image encoder: stride-2 3x3 conv blocks with ReLU,
//! global average pooling and a linear projection.

use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::ops::{affine, axpy, dot, matvec_t_acc, outer_acc};
use super::{Grads, ParamStore, Params};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ImageEncoder {
    pub prefix: String,
    /// Output channels of each conv block.
    pub channels: Vec<usize>,
    pub out_dim: usize,
}

struct ConvCache {
    in_c: usize,
    in_h: usize,
    in_w: usize,
    out_h: usize,
    out_w: usize,
    /// im2col patches, `out_h*out_w x in_c*9`.
    cols: Vec<f64>,
    /// Post-ReLU output, CHW.
    out: Vec<f64>,
}

pub struct CnnCache {
    layers: Vec<ConvCache>,
    pooled: Vec<f64>,
}

impl CnnCache {
    /// Last conv block activations (CHW) with their `(channels, height, width)`.
    pub fn last_activation(&self) -> (&[f64], usize, usize, usize) {
        let last = self.layers.last().expect("at least one conv block");
        let c = last.out.len() / (last.out_h * last.out_w);
        (&last.out, c, last.out_h, last.out_w)
    }
}

fn out_size(n: usize) -> usize {
    // kernel 3, stride 2, padding 1
    (n + 1) / 2
}

impl ImageEncoder {
    pub fn new(prefix: impl Into<String>, channels: Vec<usize>, out_dim: usize) -> Self {
        ImageEncoder { prefix: prefix.into(), channels, out_dim }
    }

    fn conv_name(&self, i: usize, what: &str) -> String {
        format!("{}.conv{}.{}", self.prefix, i, what)
    }

    fn fc_name(&self, what: &str) -> String {
        format!("{}.fc.{}", self.prefix, what)
    }

    pub fn init(&self, store: &mut ParamStore, rng: &mut ChaCha8Rng) {
        let mut in_c = 3;
        for (i, &c) in self.channels.iter().enumerate() {
            store.add_uniform(&self.conv_name(i, "w"), &[c, in_c, 3, 3], in_c * 9, rng);
            store.add_uniform(&self.conv_name(i, "b"), &[c], in_c * 9, rng);
            in_c = c;
        }
        store.add_uniform(&self.fc_name("w"), &[self.out_dim, in_c], in_c, rng);
        store.add_uniform(&self.fc_name("b"), &[self.out_dim], in_c, rng);
    }

    /// Encodes one `height x width x 3` image stored pixel-interleaved, with
    /// pixel values in [0, 1] rescaled to [-1, 1] on the way in.
    pub fn forward(&self, params: &Params, image: &[f64], height: usize, width: usize) -> (Vec<f64>, CnnCache) {
        let mut x = vec![0.0; image.len()];
        let plane = height * width;
        for p in 0..plane {
            for c in 0..3 {
                x[c * plane + p] = 2.0 * image[p * 3 + c] - 1.0;
            }
        }
        let (mut c, mut h, mut w) = (3, height, width);
        let mut layers = Vec::with_capacity(self.channels.len());
        for (i, &out_c) in self.channels.iter().enumerate() {
            let layer = conv_forward(
                params.get(&self.conv_name(i, "w")),
                params.get(&self.conv_name(i, "b")),
                &x,
                c,
                h,
                w,
                out_c,
            );
            x = layer.out.clone();
            c = out_c;
            h = layer.out_h;
            w = layer.out_w;
            layers.push(layer);
        }
        let area = (h * w) as f64;
        let pooled: Vec<f64> = (0..c).map(|ch| x[ch * h * w..(ch + 1) * h * w].iter().sum::<f64>() / area).collect();
        let mut feature = vec![0.0; self.out_dim];
        affine(params.get(&self.fc_name("w")), params.get(&self.fc_name("b")), &pooled, &mut feature);
        (feature, CnnCache { layers, pooled })
    }

    /// Gradient of the loss with respect to the last conv activations, given
    /// the gradient at the feature. Accumulates the projection gradients.
    pub fn backward_head(&self, params: &Params, grads: &mut Grads, cache: &CnnCache, d_feature: &[f64]) -> Vec<f64> {
        outer_acc(d_feature, &cache.pooled, grads.get_mut(&self.fc_name("w")));
        axpy(1.0, d_feature, grads.get_mut(&self.fc_name("b")));
        let mut d_pooled = vec![0.0; cache.pooled.len()];
        matvec_t_acc(params.get(&self.fc_name("w")), d_feature, &mut d_pooled);
        let (_, c, h, w) = cache.last_activation();
        let area = h * w;
        let mut d_act = vec![0.0; c * area];
        for ch in 0..c {
            d_act[ch * area..(ch + 1) * area].iter_mut().for_each(|v| *v = d_pooled[ch] / area as f64);
        }
        d_act
    }

    /// Full backward pass; returns the gradient with respect to the image in
    /// the same interleaved layout as the input.
    pub fn backward(&self, params: &Params, grads: &mut Grads, cache: &CnnCache, d_feature: &[f64]) -> Vec<f64> {
        let mut d_x = self.backward_head(params, grads, cache, d_feature);
        for (i, layer) in cache.layers.iter().enumerate().rev() {
            let mut d_w = grads.get(&self.conv_name(i, "w")).to_vec();
            let mut d_b = grads.get(&self.conv_name(i, "b")).to_vec();
            d_x = conv_backward(params.get(&self.conv_name(i, "w")), layer, &d_x, &mut d_w, &mut d_b);
            grads.get_mut(&self.conv_name(i, "w")).copy_from_slice(&d_w);
            grads.get_mut(&self.conv_name(i, "b")).copy_from_slice(&d_b);
        }
        let first = &cache.layers[0];
        let plane = first.in_h * first.in_w;
        let mut d_image = vec![0.0; plane * 3];
        for p in 0..plane {
            for c in 0..3 {
                d_image[p * 3 + c] = 2.0 * d_x[c * plane + p];
            }
        }
        d_image
    }
}

fn conv_forward(weight: &[f64], bias: &[f64], x: &[f64], in_c: usize, in_h: usize, in_w: usize, out_c: usize) -> ConvCache {
    let (out_h, out_w) = (out_size(in_h), out_size(in_w));
    let k = in_c * 9;
    let mut cols = vec![0.0; out_h * out_w * k];
    for oy in 0..out_h {
        for ox in 0..out_w {
            let row = &mut cols[(oy * out_w + ox) * k..(oy * out_w + ox + 1) * k];
            for ky in 0..3 {
                let iy = (oy * 2 + ky) as isize - 1;
                if iy < 0 || iy >= in_h as isize {
                    continue;
                }
                for kx in 0..3 {
                    let ix = (ox * 2 + kx) as isize - 1;
                    if ix < 0 || ix >= in_w as isize {
                        continue;
                    }
                    let src = iy as usize * in_w + ix as usize;
                    for c in 0..in_c {
                        row[c * 9 + ky * 3 + kx] = x[c * in_h * in_w + src];
                    }
                }
            }
        }
    }
    let positions = out_h * out_w;
    let mut out = vec![0.0; out_c * positions];
    for oc in 0..out_c {
        let w = &weight[oc * k..(oc + 1) * k];
        for p in 0..positions {
            out[oc * positions + p] = (bias[oc] + dot(w, &cols[p * k..(p + 1) * k])).max(0.0);
        }
    }
    ConvCache { in_c, in_h, in_w, out_h, out_w, cols, out }
}

fn conv_backward(weight: &[f64], layer: &ConvCache, d_out: &[f64], d_w: &mut [f64], d_b: &mut [f64]) -> Vec<f64> {
    let k = layer.in_c * 9;
    let positions = layer.out_h * layer.out_w;
    let out_c = d_out.len() / positions;
    let mut d_cols = vec![0.0; positions * k];
    for oc in 0..out_c {
        let w = &weight[oc * k..(oc + 1) * k];
        for p in 0..positions {
            if layer.out[oc * positions + p] <= 0.0 {
                continue;
            }
            let g = d_out[oc * positions + p];
            if g == 0.0 {
                continue;
            }
            d_b[oc] += g;
            axpy(g, &layer.cols[p * k..(p + 1) * k], &mut d_w[oc * k..(oc + 1) * k]);
            axpy(g, w, &mut d_cols[p * k..(p + 1) * k]);
        }
    }
    let (in_h, in_w) = (layer.in_h, layer.in_w);
    let mut d_x = vec![0.0; layer.in_c * in_h * in_w];
    for oy in 0..layer.out_h {
        for ox in 0..layer.out_w {
            let row = &d_cols[(oy * layer.out_w + ox) * k..(oy * layer.out_w + ox + 1) * k];
            for ky in 0..3 {
                let iy = (oy * 2 + ky) as isize - 1;
                if iy < 0 || iy >= in_h as isize {
                    continue;
                }
                for kx in 0..3 {
                    let ix = (ox * 2 + kx) as isize - 1;
                    if ix < 0 || ix >= in_w as isize {
                        continue;
                    }
                    let dst = iy as usize * in_w + ix as usize;
                    for c in 0..layer.in_c {
                        d_x[c * in_h * in_w + dst] += row[c * 9 + ky * 3 + kx];
                    }
                }
            }
        }
    }
    d_x
}
