//! Multimodal agents for text-based games.
//!
//! Observations from a small house-cleanup engine are chunked into object and
//! relation phrases, each phrase is turned into an image (cached retrieval or
//! a small attention-driven generator), and image features are fused with a
//! recurrent text encoding to score admissible actions. Training is plain
//! actor-critic with exact analytic gradients, including into the generator.

pub mod agent;
pub mod env;
pub mod eval;
pub mod experiment;
pub mod explain;
pub mod seed;
pub mod imagery;
pub mod nn;
pub mod phrase;

pub const VERSION: &str = env!("CARGO_PKG_VERSION");
