//! Multi-image preference-pair construction and a desk-scale DPO lab.
//!
//! The pipeline turns single-image VQA records into multi-image prompts
//! ([`augment`]), samples answers from a small multimodal transformer while
//! recording its attention ([`toylvlm`]), keeps the answers whose attention
//! missed the referenced image as rejected samples ([`selector`]), and
//! trains the policy with the DPO + NLL objective ([`dpo`]).

pub mod attention_io;
pub mod augment;
pub mod config;
pub mod dpo;
pub mod error;
pub mod fsutil;
pub mod ingest;
pub mod pipeline;
pub mod raster;
pub mod report;
pub mod selector;
pub mod synthetic;
pub mod toylvlm;

pub use error::{Error, Result};

/// Deterministic RNG for a (seed, stream) pair; streams keep derived draws independent.
pub(crate) fn seeded_rng(seed: u64, stream: u64) -> rand_chacha::ChaCha8Rng {
    use rand::SeedableRng;
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}
