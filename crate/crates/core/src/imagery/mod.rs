//! Turning phrase queries into images: a content-addressed disk cache in
//! front of a retrieval backend, a local corpus backend, and a small
//! text-conditioned generator with word attention.

mod cache;
mod captions;
mod corpus;
mod generator;
mod tensor;
mod warmstart;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::nn::Params;
use crate::seed::{hash_str, mix_seed};

pub use cache::{canonical_query, query_hash, CacheStats, ImageCache, RetrievalBackend};
pub use captions::{
    caption_dataset, swatch, CaptionDataset, CaptionOptions, COLOR_WORDS, GENERIC_NOUNS,
};
pub use corpus::{write_synthetic_corpus, LocalCorpusBackend};
pub use generator::{
    pretrain_generator, GenCache, Generator, GeneratorConfig, PretrainConfig, PretrainReport,
};
pub use tensor::{ImageTensor, DEFAULT_SIZE};
pub use warmstart::{pretrain_encoder, thumbnail, EncoderPretrainConfig};

#[derive(Debug, Error)]
pub enum ImageError {
    #[error("retrieval backend unavailable for `{query}`: {detail}")]
    BackendUnavailable { query: String, detail: String },
    #[error("corrupt cache entry for `{query}`: {detail}")]
    CorruptCacheEntry { query: String, detail: String },
    #[error("image corpus at {0} contains no images")]
    EmptyCorpus(String),
    #[error("image data has {found} values, expected {expected}")]
    Shape { expected: usize, found: usize },
    #[error("image values must lie in [0, 1]")]
    Range,
    #[error("decode: {0}")]
    Decode(String),
    #[error("io: {0}")]
    Io(String),
    #[error("caption dataset is empty")]
    EmptyDataset,
    #[error("generator pretraining diverged at epoch {epoch}: loss {loss}")]
    Diverged { epoch: usize, loss: f64 },
    #[error("query `{query}`: {source}")]
    Query { query: String, source: Box<ImageError> },
}

/// Which image pipeline an agent uses.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ImageSourceKind {
    Retrieval,
    Generator,
    None,
}

pub enum ImageSource<'a> {
    Retrieval { backend: &'a dyn RetrievalBackend, cache: &'a ImageCache },
    Generator { generator: &'a Generator, params: &'a Params, noise_seed: u64 },
}

impl ImageSource<'_> {
    pub fn image_size(&self) -> usize {
        match self {
            ImageSource::Retrieval { cache, .. } => cache.size(),
            ImageSource::Generator { generator, .. } => generator.config.output_size(),
        }
    }
}

/// Noise seed the generator uses for `query` under a run-level seed.
pub fn query_noise_seed(noise_seed: u64, query: &str) -> u64 {
    mix_seed(&[noise_seed, hash_str(query)])
}

/// One image per query, in query order. With no queries, a single blank
/// image stands in so the image branch always has input.
pub fn fetch_images(queries: &[String], source: &ImageSource) -> Result<Vec<ImageTensor>, ImageError> {
    let size = source.image_size();
    if queries.is_empty() {
        return Ok(vec![ImageTensor::blank(size, size)]);
    }
    queries
        .iter()
        .map(|query| {
            let result = match source {
                ImageSource::Retrieval { backend, cache } => cache.fetch(query, *backend),
                ImageSource::Generator { generator, params, noise_seed } => {
                    Ok(generator.generate(params, query, query_noise_seed(*noise_seed, query)).0)
                }
            };
            result.map_err(|e| match e {
                e @ ImageError::BackendUnavailable { .. } => e,
                other => ImageError::Query { query: query.clone(), source: Box::new(other) },
            })
        })
        .collect()
}
