//! Shared setup for full runs: benchmark worlds, pretrained image assets
//! and model construction.

use std::sync::Arc;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use serde_json::json;
use thiserror::Error;

use crate::agent::{AgentError, AgentKind, AgentModel, ImageRuntime, ModelConfig, TrainConfig};
use crate::env::{generate_world, split_pools, Difficulty, EntityPool, EnvError, Level, WorldSpec};
use crate::imagery::{
    caption_dataset, pretrain_encoder, pretrain_generator, CaptionOptions, EncoderPretrainConfig, Generator,
    ImageError, ImageSourceKind, ImageTensor, PretrainConfig,
};
use crate::nn::{Checkpoint, ImageEncoder, NnError, ParamStore, Vocab};
use crate::seed::mix_seed;

#[derive(Debug, Error)]
pub enum ExperimentError {
    #[error(transparent)]
    Env(#[from] EnvError),
    #[error(transparent)]
    Image(#[from] ImageError),
    #[error(transparent)]
    Agent(#[from] AgentError),
    #[error(transparent)]
    Nn(#[from] NnError),
}

/// Train and held-out worlds drawn from disjoint halves of one pool.
#[derive(Clone, Debug)]
pub struct Benchmark {
    pub train_pool: EntityPool,
    pub out_pool: EntityPool,
    pub train: Vec<Arc<WorldSpec>>,
    pub out: Vec<Arc<WorldSpec>>,
}

pub fn worlds(pool: &EntityPool, level: Level, seed: u64, stream: u64, count: usize) -> Result<Vec<Arc<WorldSpec>>, EnvError> {
    (0..count as u64)
        .map(|i| {
            let seed = mix_seed(&[seed, stream, i]);
            generate_world(seed, &Difficulty::sample(level, seed), pool).map(Arc::new)
        })
        .collect()
}

pub fn benchmark(
    master: &EntityPool,
    level: Level,
    seed: u64,
    n_train: usize,
    n_out: usize,
    out_fraction: f64,
) -> Result<Benchmark, EnvError> {
    let (train_pool, out_pool) = split_pools(master, seed, out_fraction)?;
    let train = worlds(&train_pool, level, seed, 1, n_train)?;
    let out = worlds(&out_pool, level, seed, 2, n_out)?;
    Ok(Benchmark { train_pool, out_pool, train, out })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AssetConfig {
    pub captions: CaptionOptions,
    pub generator: PretrainConfig,
    pub encoder: EncoderPretrainConfig,
    pub seed: u64,
}

impl Default for AssetConfig {
    fn default() -> Self {
        AssetConfig {
            captions: CaptionOptions::default(),
            generator: PretrainConfig { epochs: 5, ..PretrainConfig::default() },
            encoder: EncoderPretrainConfig::default(),
            seed: 0,
        }
    }
}

/// Pretrained generator (`gen.*`) and warm-started image encoder (`img.*`).
#[derive(Clone, Debug, PartialEq)]
pub struct Assets {
    pub generator: Generator,
    pub store: ParamStore,
    pub generator_losses: Vec<f64>,
    pub encoder_losses: Vec<f64>,
}

/// Pretrains both image networks on the caption set of `pool`. Encoder
/// warm start is skipped when its epoch count is zero.
pub fn pretrain_assets(pool: &EntityPool, model: &ModelConfig, config: &AssetConfig) -> Result<Assets, ExperimentError> {
    let captions = CaptionOptions { size: model.image_size, ..config.captions.clone() };
    let data = caption_dataset(Some(pool), &captions)?;
    let generator = Generator::for_dataset(model.generator.clone(), &data);
    let mut store = ParamStore::new();
    generator.init(&mut store, &mut ChaCha8Rng::seed_from_u64(config.seed));
    let report = pretrain_generator(&generator, &mut store, &data, &config.generator)?;
    let encoder = ImageEncoder::new("img", model.cnn_channels.clone(), model.image_dim);
    let mut encoder_store = ParamStore::new();
    encoder.init(&mut encoder_store, &mut ChaCha8Rng::seed_from_u64(mix_seed(&[config.seed, 1])));
    let images: Vec<ImageTensor> = data.pairs.into_iter().map(|(_, im)| im).collect();
    let encoder_losses = if config.encoder.epochs > 0 {
        pretrain_encoder(&encoder, &mut encoder_store, &images, &config.encoder)?
    } else {
        Vec::new()
    };
    if config.encoder.epochs > 0 {
        store.extend(&encoder_store);
    }
    Ok(Assets { generator, store, generator_losses: report.epoch_losses, encoder_losses })
}

impl Assets {
    pub fn to_checkpoint(&self) -> Checkpoint {
        let manifest = json!({
            "generator": self.generator,
            "generator_losses": self.generator_losses,
            "encoder_losses": self.encoder_losses,
        });
        Checkpoint { manifest, params: self.store.params.clone() }
    }

    pub fn from_checkpoint(checkpoint: &Checkpoint) -> Result<Self, NnError> {
        let field = |name: &str| -> Result<serde_json::Value, NnError> {
            checkpoint
                .manifest
                .get(name)
                .cloned()
                .ok_or_else(|| NnError::Checkpoint(format!("manifest lacks `{name}`")))
        };
        let parse_err = |e: serde_json::Error| NnError::Checkpoint(e.to_string());
        let generator: Generator = serde_json::from_value(field("generator")?).map_err(parse_err)?;
        let generator_losses: Vec<f64> = serde_json::from_value(field("generator_losses")?).map_err(parse_err)?;
        let encoder_losses: Vec<f64> = serde_json::from_value(field("encoder_losses")?).map_err(parse_err)?;
        let mut store = ParamStore::new();
        for (name, tensor) in checkpoint.params.iter() {
            store.insert(name, tensor.clone());
        }
        Ok(Assets { generator, store, generator_losses, encoder_losses })
    }
}

/// Fresh agent for `config`. The multimodal agent starts from the
/// pretrained generator and encoder in `assets` when given.
pub fn build_model(
    config: &TrainConfig,
    vocab: Vocab,
    seed: u64,
    assets: Option<&Assets>,
) -> Result<AgentModel, AgentError> {
    let generator = match (config.agent, config.image_source, assets) {
        (AgentKind::Multimodal, ImageSourceKind::Generator, Some(a)) => Some((&a.generator, &a.store)),
        (AgentKind::Multimodal, ImageSourceKind::Generator, None) => {
            return Err(AgentError::Config("the generator image source needs pretrained assets".into()))
        }
        _ => None,
    };
    let mut model = AgentModel::new(config.agent, config.model.clone(), vocab, seed, generator)?;
    if let (AgentKind::Multimodal, Some(a)) = (config.agent, assets) {
        if a.store.params.iter().any(|(k, _)| k.starts_with("img.")) {
            model.adopt(&a.store, "img.")?;
        }
    }
    Ok(model)
}

/// Image runtime for generator or text-only configs.
pub fn generator_runtime(config: &TrainConfig, noise_seed: u64) -> ImageRuntime<'static> {
    match config.image_source {
        ImageSourceKind::Generator => ImageRuntime::Generator { noise_seed },
        _ => ImageRuntime::None,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::agent::build_vocab;

    fn tiny() -> (ModelConfig, AssetConfig) {
        let model = ModelConfig::reduced();
        let config = AssetConfig {
            generator: PretrainConfig { epochs: 1, ..PretrainConfig::default() },
            encoder: EncoderPretrainConfig { epochs: 1, ..EncoderPretrainConfig::default() },
            ..AssetConfig::default()
        };
        (model, config)
    }

    #[test]
    fn benchmark_pools_are_disjoint() {
        let b = benchmark(&EntityPool::default_pool(), Level::Easy, 3, 4, 2, 0.3).unwrap();
        assert_eq!((b.train.len(), b.out.len()), (4, 2));
        for w in &b.out {
            for object in w.placements.keys() {
                assert!(b.train_pool.object(object).is_none());
            }
        }
    }

    #[test]
    fn assets_round_trip_and_seed_the_model() {
        let pool = EntityPool::default_pool();
        let (model_config, config) = tiny();
        let assets = pretrain_assets(&pool, &model_config, &config).unwrap();
        assert_eq!(assets.generator_losses.len(), 1);
        let back = Assets::from_checkpoint(&Checkpoint::from_bytes(&assets.to_checkpoint().to_bytes()).unwrap()).unwrap();
        assert_eq!(back, assets);

        let b = benchmark(&pool, Level::Easy, 1, 2, 1, 0.3).unwrap();
        let train = TrainConfig { model: model_config, ..TrainConfig::for_agent(AgentKind::Multimodal) };
        let model = build_model(&train, build_vocab(&b.train), 5, Some(&assets)).unwrap();
        for (name, tensor) in assets.store.params.iter() {
            assert_eq!(model.store.params.get(name), tensor.data.as_slice(), "{name}");
        }
        assert!(build_model(&train, build_vocab(&b.train), 5, None).is_err());
    }
}
