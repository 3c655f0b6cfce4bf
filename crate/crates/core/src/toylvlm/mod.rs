//! A small byte-level multimodal causal transformer.
//!
//! Images enter as 8x8 RGB patch tokens through a linear projection, text as
//! UTF-8 bytes. Everything runs in `f64`. The forward pass is computed one
//! row at a time against per-layer key/value buffers, so teacher-forced
//! scoring and incremental generation perform identical arithmetic.

mod model;
mod params;
mod sample;
mod tokens;

pub use model::{forward, AttentionTensor, Tape};
pub use params::{LayerOffsets, ParamLayout, Params};
pub use sample::{
    decode_answer, generate, generate_with_attention, log_softmax, score, CandidateAnswer, Scored,
    MAX_ANSWER_TOKENS,
};
pub use tokens::{answer_tokens, tokenize_prompt, Token, TokenKind, TokenSequence};

use crate::error::{Error, Result};

pub const BYTE_TOKENS: usize = 256;
pub const BOS: u16 = 256;
pub const EOS: u16 = 257;
pub const IMG_START: u16 = 258;
pub const IMG_END: u16 = 259;
pub const PAD: u16 = 260;
pub const VOCAB: usize = 261;

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ModelConfig {
    pub d_model: usize,
    pub n_layers: usize,
    pub n_heads: usize,
    pub ffn_dim: usize,
    pub patch_size: usize,
    pub image_side: usize,
    pub max_seq: usize,
    pub seed: u64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            d_model: 64,
            n_layers: 4,
            n_heads: 4,
            ffn_dim: 256,
            patch_size: 8,
            image_side: 64,
            // A 3x3 grid of 64 px cells is 576 patch tokens on its own.
            max_seq: 1024,
            seed: 0,
        }
    }
}

impl ModelConfig {
    /// The small configuration used for finite-difference gradient checks.
    pub fn tiny() -> Self {
        Self {
            d_model: 8,
            n_layers: 1,
            n_heads: 1,
            ffn_dim: 16,
            patch_size: 4,
            image_side: 8,
            max_seq: 48,
            seed: 0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::Config(msg));
        if self.d_model == 0 || self.n_heads == 0 || self.n_layers == 0 || self.ffn_dim == 0 {
            return bad("model dimensions must be positive".into());
        }
        if !self.d_model.is_multiple_of(self.n_heads) {
            return bad(format!(
                "d_model {} not divisible by n_heads {}",
                self.d_model, self.n_heads
            ));
        }
        if self.patch_size == 0
            || self.image_side == 0
            || !self.image_side.is_multiple_of(self.patch_size)
        {
            return bad(format!(
                "image_side {} not divisible by patch_size {}",
                self.image_side, self.patch_size
            ));
        }
        if self.max_seq == 0 {
            return bad("max_seq must be positive".into());
        }
        Ok(())
    }

    pub fn head_dim(&self) -> usize {
        self.d_model / self.n_heads
    }

    /// Values per flattened patch (RGB).
    pub fn patch_dim(&self) -> usize {
        self.patch_size * self.patch_size * 3
    }

    pub fn patches_per_image(&self) -> usize {
        let per_side = self.image_side / self.patch_size;
        per_side * per_side
    }

    /// Layer whose attention feeds the ratio metric.
    pub fn middle_layer(&self) -> usize {
        self.n_layers / 2
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::augment::{build_grid, build_sequence, Sample};
    use crate::ingest::VqaRecord;
    use crate::raster::ImageRaster;

    fn small_config() -> ModelConfig {
        ModelConfig {
            d_model: 16,
            n_layers: 2,
            n_heads: 2,
            ffn_dim: 32,
            patch_size: 8,
            image_side: 16,
            max_seq: 256,
            seed: 0,
        }
    }

    fn sample(id: &str, shade: u8) -> Sample {
        let pixels = (0..16 * 16)
            .flat_map(|i| [shade, (i * 7 % 256) as u8, 40])
            .collect();
        Sample {
            record: VqaRecord {
                id: id.into(),
                image_ref: format!("{id}.png").into(),
                question: format!("What is {id}?"),
                answer: "A thing.".into(),
            },
            image: ImageRaster::new(16, 16, pixels).unwrap(),
        }
    }

    fn prompt_seq(cfg: &ModelConfig) -> TokenSequence {
        let (a, b, c) = (sample("a", 10), sample("b", 120), sample("c", 240));
        let p = build_sequence("q", &a, &[&b, &c], 2, 0).unwrap();
        tokenize_prompt(&p, cfg).unwrap()
    }

    #[test]
    fn attention_rows_normalized_and_causal() {
        let cfg = small_config();
        let params = Params::init(&cfg, 1).unwrap();
        let seq = prompt_seq(&cfg).with_answer(&answer_tokens("ok"));
        let (logits, att) = forward(&seq, &params).unwrap();
        assert_eq!(logits.len(), seq.len());
        assert_eq!(
            (att.n_layers(), att.n_heads(), att.seq_len()),
            (2, 2, seq.len())
        );
        for l in 0..2 {
            for h in 0..2 {
                for q in 0..seq.len() {
                    let s: f64 = att.row(l, h, q).iter().sum();
                    assert!((s - 1.0).abs() < 1e-6);
                    assert!(att.row(l, h, q).iter().all(|&w| w >= 0.0));
                    for k in q + 1..seq.len() {
                        assert_eq!(att.weight(l, h, q, k), 0.0);
                    }
                }
            }
        }
    }

    #[test]
    fn forward_is_deterministic_and_independent() {
        let cfg = small_config();
        let params = Params::init(&cfg, 1).unwrap();
        let seq = prompt_seq(&cfg);
        let (l1, a1) = forward(&seq, &params).unwrap();
        let p = build_grid("g", &sample("x", 1), &[&sample("y", 2)], 1, 0).unwrap();
        forward(&tokenize_prompt(&p, &cfg).unwrap(), &params).unwrap();
        let (l2, a2) = forward(&seq, &params).unwrap();
        assert_eq!(l1, l2);
        assert_eq!(a1, a2);
    }

    #[test]
    fn greedy_generation_matches_scoring() {
        let cfg = small_config();
        let params = Params::init(&cfg, 2).unwrap();
        let seq = prompt_seq(&cfg);
        let cands = generate(&seq, &params, 3, 0.0, 9).unwrap();
        assert_eq!(cands.len(), 3);
        assert!(cands.iter().all(|c| c == &cands[0]));
        let c = &cands[0];
        let s = score(&seq, &c.tokens, &params).unwrap();
        for (a, b) in s.per_token_logprob.iter().zip(&c.per_token_logprob) {
            assert!((a - b).abs() <= 1e-9);
        }
        assert!((s.total_logprob - c.total_logprob).abs() <= 1e-9);
    }

    #[test]
    fn sampling_is_seeded() {
        let cfg = small_config();
        let params = Params::init(&cfg, 2).unwrap();
        let seq = prompt_seq(&cfg);
        let a = generate(&seq, &params, 4, 1.0, 5).unwrap();
        let b = generate(&seq, &params, 4, 1.0, 5).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.len(), 4);
        for c in &a {
            assert!(c.tokens.len() <= MAX_ANSWER_TOKENS);
            assert!(c.tokens.last() == Some(&EOS) || c.tokens.len() == MAX_ANSWER_TOKENS);
            let sum: f64 = c.per_token_logprob.iter().sum();
            assert!((sum - c.total_logprob).abs() <= 1e-9);
            let s = score(&seq, &c.tokens, &params).unwrap();
            assert!((s.total_logprob - c.total_logprob).abs() <= 1e-9);
        }
        assert!(generate(&seq, &params, 0, 1.0, 5).is_err());
    }

    #[test]
    fn traced_generation_matches_forward() {
        let cfg = small_config();
        let params = Params::init(&cfg, 2).unwrap();
        let seq = prompt_seq(&cfg);
        let traced = generate_with_attention(&seq, &params, 2, 1.0, 5).unwrap();
        assert_eq!(
            traced.iter().map(|(c, _)| c.clone()).collect::<Vec<_>>(),
            generate(&seq, &params, 2, 1.0, 5).unwrap()
        );
        for (c, att) in &traced {
            let full = seq.with_answer(&c.tokens[..c.tokens.len() - 1]);
            assert_eq!(att, &forward(&full, &params).unwrap().1);
        }
    }

    #[test]
    fn constant_logits_give_uniform_logprob() {
        let cfg = small_config();
        let mut params = Params::init(&cfg, 2).unwrap();
        let lay = params.layout.clone();
        params.values[lay.head_w..lay.head_b + VOCAB].fill(0.0);
        let seq = prompt_seq(&cfg);
        let s = score(&seq, &[b'x' as u16], &params).unwrap();
        assert!((s.per_token_logprob[0] + (VOCAB as f64).ln()).abs() < 1e-12);
        assert!(matches!(score(&seq, &[], &params), Err(Error::EmptyAnswer)));
    }

    #[test]
    fn cloned_reference_scores_identically() {
        let cfg = small_config();
        let policy = Params::init(&cfg, 3).unwrap();
        let reference = policy.clone();
        let seq = prompt_seq(&cfg);
        let ans = answer_tokens("two birds");
        assert_eq!(
            score(&seq, &ans, &policy).unwrap(),
            score(&seq, &ans, &reference).unwrap()
        );
    }
}
