//! Miniature house-cleanup games: entity pools, world generation, the game
//! engine and its command grammar, and the adapter protocol for external
//! engines.

mod adapter;
mod command;
mod engine;
mod pool;
mod world;

use thiserror::Error;

pub use adapter::{serve_adapter, AdapterClient, Request, Response};
pub use command::{parse_command, Command, ParseError, Verb};
pub use engine::{
    admissible_actions, describe, reset, step, vocabulary_words, GameState, LocalEnv, Location,
    Observation, StateKey, TextEnv, DEFAULT_STEP_CAP, INVALID_ACTION_TEXT, TEMPLATE_STOPWORDS,
};
pub use pool::{split_pools, ContainerEntry, EntityPool, ObjectEntry, Preposition, VisualTag};
pub use world::{generate_world, Difficulty, Direction, Exit, Level, Placement, WorldSpec};

#[derive(Debug, Error)]
pub enum EnvError {
    #[error("entity pool too small: need {needed} {category}, have {available}")]
    PoolTooSmall { category: &'static str, needed: usize, available: usize },
    #[error("invalid entity pool: {0}")]
    InvalidPool(String),
    #[error("cannot split pool: {0}")]
    InvalidSplit(String),
    #[error("invalid difficulty: {0}")]
    InvalidDifficulty(String),
    #[error("step cap must be at least 1")]
    InvalidStepCap,
    #[error("episode is already done")]
    EpisodeDone,
    #[error("environment has not been reset")]
    NotReset,
    #[error("world file: {0}")]
    WorldFile(String),
    #[error("adapter: {0}")]
    Adapter(String),
}
