use std::sync::Arc;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use serde_json::json;

use super::{AgentError, AgentKind};
use crate::env::{vocabulary_words, WorldSpec};
use crate::imagery::{Generator, GeneratorConfig};
use crate::nn::{ActionScorer, Checkpoint, Embedding, ImageEncoder, NnError, ParamStore, TextEncoder, Vocab};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub embed_dim: usize,
    pub hidden: usize,
    pub gru_layers: usize,
    pub cnn_channels: Vec<usize>,
    pub image_dim: usize,
    pub scorer_hidden: usize,
    pub image_size: usize,
    pub generator: GeneratorConfig,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            embed_dim: 64,
            hidden: 128,
            gru_layers: 2,
            cnn_channels: vec![8, 16, 32, 32],
            image_dim: 128,
            scorer_hidden: 128,
            image_size: 64,
            generator: GeneratorConfig::default(),
        }
    }
}

impl ModelConfig {
    /// Tiny network over 8x8 images, for gradient checks.
    pub fn reduced() -> Self {
        ModelConfig {
            embed_dim: 8,
            hidden: 8,
            gru_layers: 2,
            cnn_channels: vec![3, 4, 4, 4],
            image_dim: 8,
            scorer_hidden: 8,
            image_size: 8,
            generator: GeneratorConfig::reduced(),
        }
    }

    pub fn text_dim(&self) -> usize {
        2 * self.hidden
    }

    pub fn fused_dim(&self) -> usize {
        self.text_dim() + self.image_dim
    }
}

/// Vocabulary of every word the engine can emit for `worlds`.
pub fn build_vocab(worlds: &[Arc<WorldSpec>]) -> Vocab {
    Vocab::from_words(worlds.iter().flat_map(|w| vocabulary_words(w)))
}

/// Network definition plus its parameters. The random agent carries an
/// empty store.
#[derive(Clone, Debug, PartialEq)]
pub struct AgentModel {
    pub kind: AgentKind,
    pub config: ModelConfig,
    pub vocab: Vocab,
    pub generator: Option<Generator>,
    pub store: ParamStore,
}

impl AgentModel {
    /// Fresh weights seeded by `seed`. A pretrained generator's `gen.*`
    /// tensors are copied in when given.
    pub fn new(
        kind: AgentKind,
        config: ModelConfig,
        vocab: Vocab,
        seed: u64,
        generator: Option<(&Generator, &ParamStore)>,
    ) -> Result<Self, AgentError> {
        let mut store = ParamStore::new();
        let mut model = AgentModel { kind, config, vocab, generator: None, store: ParamStore::new() };
        if kind == AgentKind::Random {
            return Ok(model);
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        model.embedding().init(&mut store, model.vocab.len(), &mut rng);
        model.text_encoder().init(&mut store, &mut rng);
        model.image_encoder().init(&mut store, &mut rng);
        model.scorer().init(&mut store, model.config.embed_dim, &mut rng);
        if let Some((generator, params)) = generator {
            if kind != AgentKind::Multimodal {
                return Err(AgentError::Config("only the multimodal agent uses a generator".into()));
            }
            if generator.config.output_size() != model.config.image_size {
                return Err(AgentError::Config(format!(
                    "generator makes {}px images, encoder expects {}px",
                    generator.config.output_size(),
                    model.config.image_size
                )));
            }
            store.extend(&params.extract("gen."));
            model.generator = Some(generator.clone());
        }
        model.store = store;
        Ok(model)
    }

    /// Copies every tensor of `source` whose name starts with `prefix` into
    /// the model. Each must already exist with the same shape.
    pub fn adopt(&mut self, source: &ParamStore, prefix: &str) -> Result<usize, AgentError> {
        let mut copied = 0;
        for (name, tensor) in source.params.iter().filter(|(k, _)| k.starts_with(prefix)) {
            match self.store.params.tensor(name) {
                Some(t) if t.shape == tensor.shape => {
                    self.store.params.get_mut(name).copy_from_slice(&tensor.data);
                    copied += 1;
                }
                found => {
                    return Err(NnError::Shape {
                        name: name.clone(),
                        expected: found.map(|t| t.shape.clone()).unwrap_or_default(),
                        found: tensor.shape.clone(),
                    }
                    .into())
                }
            }
        }
        Ok(copied)
    }

    pub fn embedding(&self) -> Embedding {
        Embedding::new("embed", self.config.embed_dim)
    }

    pub fn text_encoder(&self) -> TextEncoder {
        TextEncoder::new("gru", self.config.embed_dim, self.config.hidden, self.config.gru_layers)
    }

    pub fn image_encoder(&self) -> ImageEncoder {
        ImageEncoder::new("img", self.config.cnn_channels.clone(), self.config.image_dim)
    }

    pub fn scorer(&self) -> ActionScorer {
        ActionScorer::new(self.config.fused_dim(), self.config.scorer_hidden)
    }

    pub fn checkpoint(&self, seed: u64) -> Checkpoint {
        let manifest = json!({
            "kind": self.kind,
            "dims": self.config,
            "vocab": self.vocab,
            "generator": self.generator,
            "seed": seed,
        });
        Checkpoint { manifest, params: self.store.params.clone() }
    }

    pub fn from_checkpoint(checkpoint: &Checkpoint) -> Result<Self, AgentError> {
        let field = |name: &str| {
            checkpoint
                .manifest
                .get(name)
                .cloned()
                .ok_or_else(|| NnError::Checkpoint(format!("manifest lacks `{name}`")))
        };
        let parse_err = |e: serde_json::Error| NnError::Checkpoint(e.to_string());
        let kind: AgentKind = serde_json::from_value(field("kind")?).map_err(parse_err)?;
        let config: ModelConfig = serde_json::from_value(field("dims")?).map_err(parse_err)?;
        let vocab: Vocab = serde_json::from_value(field("vocab")?).map_err(parse_err)?;
        let generator: Option<Generator> = serde_json::from_value(field("generator")?).map_err(parse_err)?;
        let mut store = ParamStore::new();
        for (name, tensor) in checkpoint.params.iter() {
            store.insert(name, tensor.clone());
        }
        let expected = AgentModel::new(kind, config.clone(), vocab.clone(), 0, None)?;
        for (name, tensor) in expected.store.params.iter() {
            match store.params.tensor(name) {
                Some(t) if t.shape == tensor.shape => {}
                found => {
                    return Err(NnError::Shape {
                        name: name.clone(),
                        expected: tensor.shape.clone(),
                        found: found.map(|t| t.shape.clone()).unwrap_or_default(),
                    }
                    .into())
                }
            }
        }
        Ok(AgentModel { kind, config, vocab, generator, store })
    }
}
