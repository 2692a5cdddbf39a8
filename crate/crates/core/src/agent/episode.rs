use std::collections::{BTreeMap, BTreeSet};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{entropy, select_action, ActionMode, AgentError, AgentKind, AgentModel, Optimizer, TrainConfig};
use crate::env::{TextEnv, TEMPLATE_STOPWORDS};
use crate::seed::mix_seed;
use crate::imagery::{query_noise_seed, GenCache, COLOR_WORDS, ImageCache, ImageTensor, RetrievalBackend};
use crate::nn::{log_softmax, Adam, tokenize, CnnCache, GruCache, ScoreCache};
use crate::phrase::{extract_phrases, select_queries, Lexicon};

/// Where the multimodal agent's images come from during an episode.
pub enum ImageRuntime<'a> {
    None,
    /// The model's own generator; `noise_seed` fixes the per-query noise.
    Generator { noise_seed: u64 },
    Retrieval { backend: &'a dyn RetrievalBackend, cache: &'a ImageCache },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Transition {
    pub observation: String,
    pub queries: Vec<String>,
    pub action: String,
    pub action_index: usize,
    pub admissible: usize,
    pub reward: f64,
    pub log_prob: f64,
    pub value: f64,
    pub entropy: f64,
    pub done: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Trajectory {
    pub transitions: Vec<Transition>,
    pub seed: u64,
    pub final_score: u32,
    pub max_score: u32,
}

impl Trajectory {
    pub fn steps(&self) -> usize {
        self.transitions.len()
    }

    pub fn rewards(&self) -> Vec<f64> {
        self.transitions.iter().map(|t| t.reward).collect()
    }

    pub fn normalized_score(&self) -> f64 {
        self.final_score as f64 / self.max_score.max(1) as f64
    }
}

struct StepTape {
    token_ids: Vec<usize>,
    gru: GruCache,
    score: ScoreCache,
    policy: Vec<f64>,
    image_keys: Vec<String>,
}

struct ImageEntry {
    feature: Vec<f64>,
    cnn: CnnCache,
    generated: Option<GenCache>,
}

/// Forward caches of one episode, kept for the backward pass.
#[derive(Default)]
pub struct Tape {
    steps: Vec<StepTape>,
    images: BTreeMap<String, ImageEntry>,
}

pub struct Rollout {
    pub trajectory: Trajectory,
    pub tape: Option<Tape>,
}

pub(crate) fn image_for(
    model: &AgentModel,
    runtime: &ImageRuntime,
    key: &str,
) -> Result<(ImageTensor, Option<GenCache>), crate::imagery::ImageError> {
    let size = model.config.image_size;
    if key.is_empty() {
        return Ok((ImageTensor::blank(size, size), None));
    }
    match runtime {
        ImageRuntime::Generator { noise_seed } => {
            let generator = model.generator.as_ref().expect("generator runtime needs a generator");
            let (image, cache) = generator.generate(&model.store.params, key, query_noise_seed(*noise_seed, key));
            Ok((image, Some(cache)))
        }
        ImageRuntime::Retrieval { backend, cache } => Ok((cache.fetch(key, *backend)?, None)),
        ImageRuntime::None => Ok((ImageTensor::blank(size, size), None)),
    }
}

/// Vocabulary rows hidden behind the unknown-word row for a whole training
/// episode, so the policy also learns to act on names it has never seen.
/// Color words are shared by every pool and always stay visible.
fn dropped_words(model: &AgentModel, config: &TrainConfig, mode: &ActionMode, seed: u64) -> BTreeSet<usize> {
    if *mode != ActionMode::Sample || config.word_dropout <= 0.0 {
        return BTreeSet::new();
    }
    let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(&[seed, 0xD0]));
    model
        .vocab
        .words()
        .iter()
        .enumerate()
        .filter(|(_, w)| !TEMPLATE_STOPWORDS.contains(&w.as_str()) && !COLOR_WORDS.contains(&w.as_str()))
        .filter(|_| rng.gen_bool(config.word_dropout))
        .map(|(i, _)| i + 1)
        .collect()
}

/// Plays one episode. Recurrent state starts at zero and is carried across
/// steps. Forward caches are recorded for `Sample` and `Forced` modes so the
/// episode can be trained on.
pub fn run_episode(
    model: &AgentModel,
    env: &mut dyn TextEnv,
    config: &TrainConfig,
    runtime: &ImageRuntime,
    lexicon: &Lexicon,
    seed: u64,
    mode: &ActionMode,
) -> Result<Rollout, AgentError> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let record = matches!(mode, ActionMode::Sample | ActionMode::Forced(_)) && model.kind != AgentKind::Random;
    let mut tape = Tape::default();
    let mut transitions = Vec::new();
    let mut observation = env.reset().map_err(|source| AgentError::Env { step: 0, source })?;
    let max_score = env.max_score();
    let params = &model.store.params;
    let embedding = model.embedding();
    let text = model.text_encoder();
    let images = model.image_encoder();
    let scorer = model.scorer();
    let mut state = text.zero_state();
    let multimodal = model.kind == AgentKind::Multimodal && !matches!(runtime, ImageRuntime::None);
    let dropped = dropped_words(model, config, mode, seed);
    let ids = |text: &str| -> Vec<usize> {
        let mut ids = model.vocab.ids(&tokenize(text));
        ids.iter_mut().filter(|id| dropped.contains(id)).for_each(|id| *id = 0);
        ids
    };

    while !observation.done && !observation.admissible_actions.is_empty() {
        let step = transitions.len();
        let actions = &observation.admissible_actions;
        let n = actions.len();
        let forced = |step: usize| match mode {
            ActionMode::Forced(list) => list.get(step).copied().filter(|&i| i < n).ok_or_else(|| {
                AgentError::Config(format!("forced action list has no valid entry for step {step}"))
            }),
            _ => Ok(0),
        };

        let mut queries = Vec::new();
        let (index, log_prob, value, ent) = if model.kind == AgentKind::Random {
            let index = match mode {
                ActionMode::Forced(_) => forced(step)?,
                _ => rng.gen_range(0..n),
            };
            (index, -(n as f64).ln(), 0.0, (n as f64).ln())
        } else {
            let token_ids = ids(&observation.text);
            let x = embedding.lookup(params, &token_ids);
            let (text_feature, next_state, gru) = text.forward(params, &x, &state);
            state = next_state;

            let mut image_feature = vec![0.0; model.config.image_dim];
            let mut image_keys = Vec::new();
            if multimodal {
                queries = select_queries(&extract_phrases(&observation.text, lexicon), config.k_images);
                image_keys = if queries.is_empty() { vec![String::new()] } else { queries.clone() };
                for key in &image_keys {
                    if !tape.images.contains_key(key) {
                        let (image, generated) = image_for(model, runtime, key)
                            .map_err(|source| AgentError::Image { step: step as u32, source })?;
                        let (feature, cnn) = images.forward(params, &image.data, image.height, image.width);
                        tape.images.insert(key.clone(), ImageEntry { feature, cnn, generated });
                    }
                    let scale = 1.0 / image_keys.len() as f64;
                    for (acc, v) in image_feature.iter_mut().zip(&tape.images[key].feature) {
                        *acc += scale * v;
                    }
                }
            }
            let mut fused = text_feature;
            fused.extend_from_slice(&image_feature);

            let action_ids: Vec<Vec<usize>> = actions.iter().map(|a| ids(a)).collect();
            let (scores, score) = scorer.forward(params, &embedding, &fused, &action_ids)?;
            let index = match mode {
                ActionMode::Forced(_) => forced(step)?,
                other => select_action(&scores.policy, other, &mut rng),
            };
            let log_probs = log_softmax(&scores.logits);
            let ent = entropy(&scores.policy);
            if record {
                tape.steps.push(StepTape { token_ids, gru, score, policy: scores.policy, image_keys });
            }
            (index, log_probs[index], scores.value, ent)
        };

        let action = actions[index].clone();
        let next = env.step(&action).map_err(|source| AgentError::Env { step: step as u32 + 1, source })?;
        transitions.push(Transition {
            observation: std::mem::take(&mut observation.text),
            queries,
            action,
            action_index: index,
            admissible: n,
            reward: next.reward,
            log_prob,
            value,
            entropy: ent,
            done: next.done,
        });
        observation = next;
    }
    if !multimodal {
        tape.images.clear();
    }
    let final_score = observation.score;
    let trajectory = Trajectory { transitions, seed, final_score, max_score };
    Ok(Rollout { trajectory, tape: record.then_some(tape) })
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossComponents {
    /// `sum_t -log pi(a_t) * A_t`
    pub policy_loss: f64,
    /// `sum_t (G_t - V_t)^2`, before weighting.
    pub value_loss: f64,
    /// `sum_t H(pi_t)`
    pub entropy: f64,
    pub total: f64,
}

/// A2C surrogate loss of a trajectory under fixed advantages.
pub fn a2c_loss(trajectory: &Trajectory, advantages: &[f64], config: &TrainConfig) -> LossComponents {
    let returns = super::discounted_returns(&trajectory.rewards(), config.gamma);
    let mut out = LossComponents::default();
    for (t, tr) in trajectory.transitions.iter().enumerate() {
        out.policy_loss -= tr.log_prob * advantages[t];
        out.value_loss += (returns[t] - tr.value).powi(2);
        out.entropy += tr.entropy;
    }
    out.total = out.policy_loss + config.value_weight * out.value_loss - config.entropy_weight * out.entropy;
    out
}

/// `A_t = G_t - V(o_t)`.
pub fn advantages(trajectory: &Trajectory, gamma: f64) -> Vec<f64> {
    let returns = super::discounted_returns(&trajectory.rewards(), gamma);
    returns.iter().zip(&trajectory.transitions).map(|(g, t)| g - t.value).collect()
}

/// Fills the model's gradient buffers with the gradient of [`a2c_loss`]
/// (advantages held constant) and returns the loss.
pub fn a2c_gradients(model: &mut AgentModel, rollout: &Rollout, config: &TrainConfig) -> Result<LossComponents, AgentError> {
    let trajectory = &rollout.trajectory;
    if trajectory.transitions.is_empty() {
        return Err(AgentError::EmptyTrajectory);
    }
    model.store.zero_grad();
    let adv = advantages(trajectory, config.gamma);
    let loss = a2c_loss(trajectory, &adv, config);
    if !loss.total.is_finite() {
        let step = trajectory
            .transitions
            .iter()
            .position(|t| !(t.log_prob.is_finite() && t.value.is_finite() && t.reward.is_finite()))
            .unwrap_or(0);
        let detail = serde_json::to_string(&trajectory.transitions[step]).unwrap_or_default();
        return Err(AgentError::NonFinite { step, detail });
    }
    let Some(tape) = rollout.tape.as_ref() else {
        return Ok(loss);
    };
    let returns = super::discounted_returns(&trajectory.rewards(), config.gamma);
    let embedding = model.embedding();
    let text = model.text_encoder();
    let images = model.image_encoder();
    let scorer = model.scorer();
    let text_dim = model.config.text_dim();
    let params = &model.store.params;
    let grads = &mut model.store.grads;

    let mut d_image_features: BTreeMap<&str, Vec<f64>> = BTreeMap::new();
    let mut d_state = text.zero_state();
    for t in (0..tape.steps.len()).rev() {
        let step = &tape.steps[t];
        let tr = &trajectory.transitions[t];
        let h = tr.entropy;
        let d_logits: Vec<f64> = step
            .policy
            .iter()
            .enumerate()
            .map(|(j, &p)| {
                let onehot = if j == tr.action_index { 1.0 } else { 0.0 };
                let log_p = if p > 0.0 { p.ln() } else { 0.0 };
                -adv[t] * (onehot - p) + config.entropy_weight * p * (log_p + h)
            })
            .collect();
        let d_value = -2.0 * config.value_weight * (returns[t] - tr.value);
        let d_fused = scorer.backward(params, grads, &embedding, &step.score, &d_logits, d_value);
        if !step.image_keys.is_empty() {
            let scale = 1.0 / step.image_keys.len() as f64;
            for key in &step.image_keys {
                let acc = d_image_features.entry(key.as_str()).or_insert_with(|| vec![0.0; model.config.image_dim]);
                for (a, g) in acc.iter_mut().zip(&d_fused[text_dim..]) {
                    *a += scale * g;
                }
            }
        }
        let (d_x, d_prev) = text.backward(params, grads, &step.gru, &d_fused[..text_dim], &d_state);
        embedding.backward(grads, &step.token_ids, &d_x);
        d_state = d_prev;
    }

    let finetune = config.finetune_generator;
    for (key, d_feature) in d_image_features {
        let entry = &tape.images[key];
        let d_image = images.backward(params, grads, &entry.cnn, &d_feature);
        if let (true, Some(generated), Some(generator)) = (finetune, entry.generated.as_ref(), model.generator.as_ref()) {
            generator.backward(params, grads, generated, &d_image);
        }
    }
    Ok(loss)
}

/// Optimizer state carried across a training run.
pub enum Updater {
    Sgd,
    Adam(Adam),
}

impl Updater {
    pub fn new(config: &TrainConfig) -> Self {
        match config.optimizer {
            Optimizer::Sgd => Updater::Sgd,
            Optimizer::Adam => Updater::Adam(Adam::new(config.learning_rate)),
        }
    }
}

/// One optimizer step on the episode's A2C loss. Generator weights move only
/// when fine-tuning is enabled.
pub fn a2c_update(
    model: &mut AgentModel,
    rollout: &Rollout,
    config: &TrainConfig,
    updater: &mut Updater,
) -> Result<LossComponents, AgentError> {
    let loss = a2c_gradients(model, rollout, config)?;
    if model.kind == AgentKind::Random {
        return Ok(loss);
    }
    let finetune = config.finetune_generator;
    let trainable = |name: &str| finetune || !name.starts_with("gen.");
    let scale = |name: &str| match () {
        _ if !trainable(name) => 0.0,
        _ if name.starts_with("gen.") || name.starts_with("img.") => config.pretrained_lr_scale,
        _ => 1.0,
    };
    if config.max_grad_norm > 0.0 {
        model.store.clip_grad_norm(config.max_grad_norm, trainable);
    }
    match updater {
        Updater::Sgd => model.store.sgd_step(config.learning_rate, scale),
        Updater::Adam(adam) => adam.step_scaled(&mut model.store, scale),
    }
    model.store.check_finite()?;
    Ok(loss)
}
