//! Grad-CAM heatmaps over the image encoder's last conv block, and per-step
//! explanation bundles for the multimodal agent.

use std::path::Path;

use image::{Rgb, RgbImage};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::agent::{image_for, AgentError, AgentKind, AgentModel, ImageRuntime, TrainConfig};
use crate::env::Observation;
use crate::eval::best_index;
use crate::imagery::{ImageError, ImageTensor};
use crate::nn::{tokenize, Grads, ImageEncoder, Params, TextState};
use crate::phrase::{extract_phrases, select_queries, Lexicon};

#[derive(Debug, Error)]
pub enum ExplainError {
    #[error(transparent)]
    Agent(#[from] AgentError),
    #[error(transparent)]
    Image(#[from] ImageError),
    #[error("no admissible actions to explain")]
    NoActions,
    #[error("io: {0}")]
    Io(String),
}

/// A scalar function of the encoder output, given by its gradient.
pub trait CamTarget {
    fn gradient(&self, feature: &[f64]) -> Vec<f64>;
}

/// `w . feature`
pub struct Linear(pub Vec<f64>);

impl CamTarget for Linear {
    fn gradient(&self, _feature: &[f64]) -> Vec<f64> {
        self.0.clone()
    }
}

/// A target that ignores the image.
pub struct Constant(pub f64);

impl CamTarget for Constant {
    fn gradient(&self, feature: &[f64]) -> Vec<f64> {
        vec![0.0; feature.len()]
    }
}

impl<F: Fn(&[f64]) -> Vec<f64>> CamTarget for F {
    fn gradient(&self, feature: &[f64]) -> Vec<f64> {
        self(feature)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Heatmap {
    /// Normalized map at the last conv resolution, row-major.
    pub grid: Vec<f64>,
    pub grid_height: usize,
    pub grid_width: usize,
    /// Bilinear upsample of `grid` to the image size.
    pub overlay: Vec<f64>,
    pub height: usize,
    pub width: usize,
    pub query: String,
    pub action: String,
}

impl Heatmap {
    /// Share of total overlay mass in the top-left, top-right, bottom-left and
    /// bottom-right quadrants. All zeros for an empty map.
    pub fn quadrant_mass(&self) -> [f64; 4] {
        let mut mass = [0.0; 4];
        for y in 0..self.height {
            for x in 0..self.width {
                let q = usize::from(2 * y >= self.height) * 2 + usize::from(2 * x >= self.width);
                mass[q] += self.overlay[y * self.width + x];
            }
        }
        let total: f64 = mass.iter().sum();
        if total > 0.0 {
            mass.iter_mut().for_each(|m| *m /= total);
        }
        mass
    }

    pub fn is_zero(&self) -> bool {
        self.grid.iter().all(|&v| v == 0.0)
    }
}

/// Grad-CAM: channel weights are the spatial mean of the target's gradient at
/// the last conv activations; the map is the rectified weighted sum of those
/// activations, scaled to max 1.
pub fn grad_cam(encoder: &ImageEncoder, params: &Params, image: &ImageTensor, target: &dyn CamTarget) -> Heatmap {
    let (feature, cache) = encoder.forward(params, &image.data, image.height, image.width);
    let d_feature = target.gradient(&feature);
    let mut head = Params::default();
    for what in ["w", "b"] {
        let name = format!("{}.fc.{what}", encoder.prefix);
        head.insert(name.clone(), params.tensor(&name).expect("encoder head present").clone());
    }
    let mut scratch = Grads::zeros_like(&head);
    let d_act = encoder.backward_head(params, &mut scratch, &cache, &d_feature);
    let (act, c, h, w) = cache.last_activation();
    let area = h * w;
    let mut grid = vec![0.0; area];
    for ch in 0..c {
        let alpha = d_act[ch * area..(ch + 1) * area].iter().sum::<f64>() / area as f64;
        if alpha == 0.0 {
            continue;
        }
        for (g, a) in grid.iter_mut().zip(&act[ch * area..(ch + 1) * area]) {
            *g += alpha * a;
        }
    }
    grid.iter_mut().for_each(|g| *g = g.max(0.0));
    let max = grid.iter().cloned().fold(0.0, f64::max);
    if max > 0.0 {
        grid.iter_mut().for_each(|g| *g /= max);
    }
    let overlay = upsample_bilinear(&grid, h, w, image.height, image.width);
    Heatmap {
        grid,
        grid_height: h,
        grid_width: w,
        overlay,
        height: image.height,
        width: image.width,
        query: String::new(),
        action: String::new(),
    }
}

/// Half-pixel-centre bilinear resize with edge clamping.
pub fn upsample_bilinear(src: &[f64], h: usize, w: usize, out_h: usize, out_w: usize) -> Vec<f64> {
    let coord = |i: usize, n_out: usize, n_in: usize| {
        let x = ((i as f64 + 0.5) * n_in as f64 / n_out as f64 - 0.5).clamp(0.0, (n_in - 1) as f64);
        let lo = x.floor() as usize;
        (lo, (lo + 1).min(n_in - 1), x - lo as f64)
    };
    let mut out = vec![0.0; out_h * out_w];
    for y in 0..out_h {
        let (y0, y1, fy) = coord(y, out_h, h);
        for x in 0..out_w {
            let (x0, x1, fx) = coord(x, out_w, w);
            let top = src[y0 * w + x0] * (1.0 - fx) + src[y0 * w + x1] * fx;
            let bottom = src[y1 * w + x0] * (1.0 - fx) + src[y1 * w + x1] * fx;
            out[y * out_w + x] = top * (1.0 - fy) + bottom * fy;
        }
    }
    out
}

#[derive(Clone, Debug)]
pub struct Panel {
    pub query: String,
    pub image: ImageTensor,
    pub heatmap: Heatmap,
}

#[derive(Clone, Debug)]
pub struct ExplainBundle {
    pub action: String,
    pub action_index: usize,
    pub panels: Vec<Panel>,
    pub note: Option<String>,
}

/// Takes one greedy decision on `observation` and explains it: one Grad-CAM
/// panel per fetched image, with the chosen action's logit as the target.
/// Returns the bundle and the recurrent state after the step.
pub fn explain_step(
    model: &AgentModel,
    observation: &Observation,
    state: &TextState,
    config: &TrainConfig,
    runtime: &ImageRuntime,
    lexicon: &Lexicon,
) -> Result<(ExplainBundle, TextState), ExplainError> {
    let actions = &observation.admissible_actions;
    if actions.is_empty() {
        return Err(ExplainError::NoActions);
    }
    if model.kind == AgentKind::Random {
        let bundle = ExplainBundle {
            action: actions[0].clone(),
            action_index: 0,
            panels: Vec::new(),
            note: Some("random agent has no image branch".into()),
        };
        return Ok((bundle, state.clone()));
    }
    let params = &model.store.params;
    let embedding = model.embedding();
    let text = model.text_encoder();
    let encoder = model.image_encoder();
    let scorer = model.scorer();
    let x = embedding.lookup(params, &model.vocab.ids(&tokenize(&observation.text)));
    let (text_feature, next_state, _) = text.forward(params, &x, state);

    let multimodal = model.kind == AgentKind::Multimodal && !matches!(runtime, ImageRuntime::None);
    let queries = if multimodal {
        select_queries(&extract_phrases(&observation.text, lexicon), config.k_images)
    } else {
        Vec::new()
    };
    let keys = if multimodal && queries.is_empty() { vec![String::new()] } else { queries.clone() };
    let mut images = Vec::with_capacity(keys.len());
    let mut image_feature = vec![0.0; model.config.image_dim];
    for key in &keys {
        let (image, _) = image_for(model, runtime, key)?;
        let (feature, _) = encoder.forward(params, &image.data, image.height, image.width);
        for (acc, v) in image_feature.iter_mut().zip(&feature) {
            *acc += v / keys.len() as f64;
        }
        images.push(image);
    }
    let mut fused = text_feature;
    fused.extend_from_slice(&image_feature);
    let action_ids: Vec<Vec<usize>> = actions.iter().map(|a| model.vocab.ids(&tokenize(a))).collect();
    let (scores, score_cache) = scorer.forward(params, &embedding, &fused, &action_ids).map_err(AgentError::from)?;
    let action_index = best_index(&scores.policy, true).expect("nonempty policy");
    let action = actions[action_index].clone();

    if !multimodal {
        let bundle = ExplainBundle {
            action,
            action_index,
            panels: Vec::new(),
            note: Some(format!("{} agent has no image branch", model.kind.name())),
        };
        return Ok((bundle, next_state));
    }

    let mut d_logits = vec![0.0; actions.len()];
    d_logits[action_index] = 1.0;
    let mut scratch = Grads::zeros_like(params);
    let d_fused = scorer.backward(params, &mut scratch, &embedding, &score_cache, &d_logits, 0.0);
    let per_image: Vec<f64> = d_fused[model.config.text_dim()..].iter().map(|g| g / keys.len() as f64).collect();
    let panels = keys
        .iter()
        .zip(images)
        .map(|(key, image)| {
            let mut heatmap = grad_cam(&encoder, params, &image, &Linear(per_image.clone()));
            heatmap.query = key.clone();
            heatmap.action = action.clone();
            Panel { query: key.clone(), image, heatmap }
        })
        .collect();
    Ok((ExplainBundle { action, action_index, panels, note: None }, next_state))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PanelEntry {
    pub query: String,
    pub raw: String,
    pub overlay: String,
    /// top-left, top-right, bottom-left, bottom-right
    pub quadrant_mass: [f64; 4],
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BundleManifest {
    pub title: String,
    pub action_index: usize,
    pub note: Option<String>,
    pub panels: Vec<PanelEntry>,
}

/// Red-yellow heat colour blended over the image at half opacity.
pub fn overlay_image(image: &ImageTensor, heat: &[f64]) -> RgbImage {
    RgbImage::from_fn(image.width as u32, image.height as u32, |x, y| {
        let (x, y) = (x as usize, y as usize);
        let v = heat[y * image.width + x].clamp(0.0, 1.0);
        let hot = [1.0, v, 0.0];
        let px = image.pixel(y, x);
        let mix = |c: usize| ((0.5 * px[c] + 0.5 * hot[c] * v) * 255.0).round().clamp(0.0, 255.0) as u8;
        Rgb([mix(0), mix(1), mix(2)])
    })
}

/// Writes `panel-<i>-raw.png`, `panel-<i>-overlay.png` and `manifest.json`.
pub fn write_bundle(dir: &Path, bundle: &ExplainBundle) -> Result<BundleManifest, ExplainError> {
    let io = |e: String| ExplainError::Io(format!("{}: {e}", dir.display()));
    std::fs::create_dir_all(dir).map_err(|e| io(e.to_string()))?;
    let mut panels = Vec::new();
    for (i, panel) in bundle.panels.iter().enumerate() {
        let raw = format!("panel-{i}-raw.png");
        let overlay = format!("panel-{i}-overlay.png");
        panel.image.save_png(&dir.join(&raw))?;
        overlay_image(&panel.image, &panel.heatmap.overlay).save(dir.join(&overlay)).map_err(|e| io(e.to_string()))?;
        panels.push(PanelEntry { query: panel.query.clone(), raw, overlay, quadrant_mass: panel.heatmap.quadrant_mass() });
    }
    let manifest = BundleManifest {
        title: bundle.action.clone(),
        action_index: bundle.action_index,
        note: bundle.note.clone(),
        panels,
    };
    let json = serde_json::to_string_pretty(&manifest).expect("manifest serializes");
    std::fs::write(dir.join("manifest.json"), json).map_err(|e| io(e.to_string()))?;
    Ok(manifest)
}
