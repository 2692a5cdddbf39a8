//! Actor-critic agents: the multimodal model, its text-only ablation and a
//! uniform random baseline, plus the episode runner and training loop.

mod episode;
mod model;
mod train;

use std::str::FromStr;

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::env::EnvError;
use crate::imagery::{ImageError, ImageSourceKind};
use crate::nn::NnError;

pub use episode::{
    a2c_gradients, a2c_loss, a2c_update, advantages, Updater, run_episode, ImageRuntime, LossComponents, Rollout, Tape,
    Trajectory, Transition,
};
pub(crate) use episode::image_for;
pub use model::{build_vocab, AgentModel, ModelConfig};
pub use train::{read_curve_csv, train, write_curve_csv, CurvePoint};

#[derive(Debug, Error)]
pub enum AgentError {
    #[error("step {step}: {source}")]
    Env { step: u32, source: EnvError },
    #[error("step {step}: {source}")]
    Image { step: u32, source: ImageError },
    #[error(transparent)]
    Nn(#[from] NnError),
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("non-finite loss at step {step}: {detail}")]
    NonFinite { step: usize, detail: String },
    #[error("empty trajectory")]
    EmptyTrajectory,
    #[error("no training games")]
    NoGames,
    #[error("io: {0}")]
    Io(String),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AgentKind {
    Random,
    TextOnly,
    Multimodal,
}

impl AgentKind {
    pub const ALL: [AgentKind; 3] = [AgentKind::Random, AgentKind::TextOnly, AgentKind::Multimodal];

    pub fn name(self) -> &'static str {
        match self {
            AgentKind::Random => "random",
            AgentKind::TextOnly => "text_only",
            AgentKind::Multimodal => "multimodal",
        }
    }
}

impl FromStr for AgentKind {
    type Err = AgentError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.replace('-', "_").as_str() {
            "random" => Ok(AgentKind::Random),
            "text_only" | "text" => Ok(AgentKind::TextOnly),
            "multimodal" => Ok(AgentKind::Multimodal),
            other => Err(AgentError::Config(format!("unknown agent `{other}`"))),
        }
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Optimizer {
    #[default]
    Sgd,
    Adam,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub agent: AgentKind,
    pub gamma: f64,
    pub optimizer: Optimizer,
    pub learning_rate: f64,
    /// Rate multiplier for the pretrained image encoder and generator.
    pub pretrained_lr_scale: f64,
    pub entropy_weight: f64,
    pub value_weight: f64,
    /// Joint L2 bound on each update's gradient; 0 disables clipping.
    pub max_grad_norm: f64,
    /// Per training episode, the probability that each non-template word is
    /// read as unknown.
    pub word_dropout: f64,
    pub episodes: usize,
    pub step_cap: u32,
    pub finetune_generator: bool,
    pub image_source: ImageSourceKind,
    pub k_images: usize,
    pub master_seed: u64,
    /// Save a checkpoint every this many episodes; 0 disables.
    pub checkpoint_every: usize,
    pub model: ModelConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            agent: AgentKind::Multimodal,
            gamma: 0.9,
            optimizer: Optimizer::Sgd,
            learning_rate: 0.01,
            pretrained_lr_scale: 1.0,
            entropy_weight: 0.01,
            value_weight: 0.5,
            max_grad_norm: 5.0,
            word_dropout: 0.3,
            episodes: 100,
            step_cap: 50,
            finetune_generator: true,
            image_source: ImageSourceKind::Generator,
            k_images: 4,
            master_seed: 0,
            checkpoint_every: 0,
            model: ModelConfig::default(),
        }
    }
}

impl TrainConfig {
    /// Defaults for `agent`, with the image source forced to match it.
    pub fn for_agent(agent: AgentKind) -> Self {
        let mut config = TrainConfig { agent, ..TrainConfig::default() };
        if agent != AgentKind::Multimodal {
            config.image_source = ImageSourceKind::None;
            config.finetune_generator = false;
        }
        config
    }

    pub fn validate(&self) -> Result<(), AgentError> {
        if !(0.0..=1.0).contains(&self.gamma) {
            return Err(AgentError::Config(format!("gamma {} outside [0, 1]", self.gamma)));
        }
        if self.step_cap < 1 {
            return Err(AgentError::Config("step_cap must be at least 1".into()));
        }
        if !(0.0..=1.0).contains(&self.word_dropout) {
            return Err(AgentError::Config(format!("word_dropout {} outside [0, 1]", self.word_dropout)));
        }
        if !(self.max_grad_norm.is_finite() && self.max_grad_norm >= 0.0) {
            return Err(AgentError::Config("max_grad_norm must be finite and non-negative".into()));
        }
        if !(self.learning_rate.is_finite() && self.learning_rate >= 0.0) {
            return Err(AgentError::Config("learning_rate must be finite and non-negative".into()));
        }
        match (self.agent, self.image_source) {
            (AgentKind::Multimodal, ImageSourceKind::None) => {
                Err(AgentError::Config("multimodal agent needs an image source".into()))
            }
            (AgentKind::TextOnly | AgentKind::Random, s) if s != ImageSourceKind::None => {
                Err(AgentError::Config(format!("{} agent must use image_source none", self.agent.name())))
            }
            _ if self.finetune_generator && self.image_source != ImageSourceKind::Generator => {
                Err(AgentError::Config("finetune_generator requires the generator image source".into()))
            }
            _ => Ok(()),
        }
    }
}

/// `G_t = r_t + gamma * G_{t+1}`, with the last return equal to the last
/// reward (no bootstrapping past the end).
pub fn discounted_returns(rewards: &[f64], gamma: f64) -> Vec<f64> {
    let mut returns = vec![0.0; rewards.len()];
    let mut next = 0.0;
    for t in (0..rewards.len()).rev() {
        next = rewards[t] + gamma * next;
        returns[t] = next;
    }
    returns
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub enum ActionMode {
    Sample,
    Greedy,
    /// Argmax, with exact ties broken uniformly by the episode rng.
    GreedyRandomTies,
    Random,
    /// Replays a fixed list of action indices.
    Forced(Vec<usize>),
}

/// Picks an index from `policy`. Greedy ties go to the lowest index.
pub fn select_action(policy: &[f64], mode: &ActionMode, rng: &mut ChaCha8Rng) -> usize {
    match mode {
        ActionMode::Greedy => {
            let mut best = 0;
            for (i, &p) in policy.iter().enumerate() {
                if p > policy[best] {
                    best = i;
                }
            }
            best
        }
        ActionMode::GreedyRandomTies => {
            let best = policy.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let tied: Vec<usize> = (0..policy.len()).filter(|&i| policy[i] == best).collect();
            match tied.len() {
                0 | 1 => tied.first().copied().unwrap_or(0),
                n => tied[rng.gen_range(0..n)],
            }
        }
        ActionMode::Random => rng.gen_range(0..policy.len()),
        ActionMode::Sample => {
            let u: f64 = rng.gen();
            let mut acc = 0.0;
            for (i, &p) in policy.iter().enumerate() {
                acc += p;
                if u < acc {
                    return i;
                }
            }
            policy.iter().rposition(|&p| p > 0.0).unwrap_or(0)
        }
        ActionMode::Forced(_) => panic!("forced actions are resolved by the episode runner"),
    }
}

pub fn entropy(policy: &[f64]) -> f64 {
    -policy.iter().filter(|&&p| p > 0.0).map(|&p| p * p.ln()).sum::<f64>()
}
