use rand::Rng;

use super::{ModelConfig, VOCAB};
use crate::error::Result;

/// Offsets of one transformer block's tensors in the flat parameter vector.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct LayerOffsets {
    pub ln1_g: usize,
    pub ln1_b: usize,
    pub wq: usize,
    pub bq: usize,
    /// Keys carry no bias: a per-row constant shift cancels in the softmax.
    pub wk: usize,
    pub wv: usize,
    pub bv: usize,
    pub wo: usize,
    pub bo: usize,
    pub ln2_g: usize,
    pub ln2_b: usize,
    pub w1: usize,
    pub b1: usize,
    pub w2: usize,
    pub b2: usize,
}

/// Where each tensor lives in the flat vector. Matrices are row-major `[in][out]`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ParamLayout {
    pub tok_emb: usize,
    pub patch_w: usize,
    pub patch_b: usize,
    pub pos_emb: usize,
    pub layers: Vec<LayerOffsets>,
    pub lnf_g: usize,
    pub lnf_b: usize,
    pub head_w: usize,
    pub head_b: usize,
    pub len: usize,
}

#[derive(Clone, Copy)]
enum Init {
    Uniform(f64),
    Zeros,
    Ones,
}

impl ParamLayout {
    fn build(cfg: &ModelConfig) -> (Self, Vec<(usize, usize, Init)>) {
        let d = cfg.d_model;
        let f = cfg.ffn_dim;
        let mut cursor = 0;
        let mut blocks = Vec::new();
        let mut alloc = |n: usize, init: Init| {
            let at = cursor;
            blocks.push((at, n, init));
            cursor += n;
            at
        };
        let scale = |fan_in: usize| Init::Uniform(1.0 / (fan_in as f64).sqrt());
        let tok_emb = alloc(VOCAB * d, scale(d));
        let patch_w = alloc(cfg.patch_dim() * d, scale(cfg.patch_dim()));
        let patch_b = alloc(d, Init::Zeros);
        let pos_emb = alloc(cfg.max_seq * d, scale(d));
        let layers = (0..cfg.n_layers)
            .map(|_| LayerOffsets {
                ln1_g: alloc(d, Init::Ones),
                ln1_b: alloc(d, Init::Zeros),
                wq: alloc(d * d, scale(d)),
                bq: alloc(d, Init::Zeros),
                wk: alloc(d * d, scale(d)),
                wv: alloc(d * d, scale(d)),
                bv: alloc(d, Init::Zeros),
                wo: alloc(d * d, scale(d)),
                bo: alloc(d, Init::Zeros),
                ln2_g: alloc(d, Init::Ones),
                ln2_b: alloc(d, Init::Zeros),
                w1: alloc(d * f, scale(d)),
                b1: alloc(f, Init::Zeros),
                w2: alloc(f * d, scale(f)),
                b2: alloc(d, Init::Zeros),
            })
            .collect();
        let lnf_g = alloc(d, Init::Ones);
        let lnf_b = alloc(d, Init::Zeros);
        let head_w = alloc(d * VOCAB, scale(d));
        let head_b = alloc(VOCAB, Init::Zeros);
        let layout = ParamLayout {
            tok_emb,
            patch_w,
            patch_b,
            pos_emb,
            layers,
            lnf_g,
            lnf_b,
            head_w,
            head_b,
            len: cursor,
        };
        (layout, blocks)
    }

    pub fn new(cfg: &ModelConfig) -> Self {
        Self::build(cfg).0
    }
}

/// Model weights: a config, its layout and the flat `f64` values.
#[derive(Debug, Clone, PartialEq)]
pub struct Params {
    pub config: ModelConfig,
    pub layout: ParamLayout,
    pub values: Vec<f64>,
}

impl Params {
    /// Scaled-uniform weights `U(-1/sqrt(fan_in), 1/sqrt(fan_in))`, zero biases,
    /// unit norm gains. Deterministic in `seed`.
    pub fn init(config: &ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let (layout, blocks) = ParamLayout::build(config);
        let mut values = vec![0.0; layout.len];
        let mut rng = crate::seeded_rng(seed, 0x5041_5241);
        for (at, n, init) in blocks {
            let dst = &mut values[at..at + n];
            match init {
                Init::Uniform(a) => dst.iter_mut().for_each(|v| *v = rng.gen_range(-a..a)),
                Init::Zeros => {}
                Init::Ones => dst.fill(1.0),
            }
        }
        Ok(Self {
            config: config.clone(),
            layout,
            values,
        })
    }

    pub fn from_values(config: &ModelConfig, values: Vec<f64>) -> Result<Self> {
        config.validate()?;
        let layout = ParamLayout::new(config);
        if values.len() != layout.len {
            return Err(crate::Error::Format {
                kind: "checkpoint",
                reason: format!(
                    "{} values for a model with {} parameters",
                    values.len(),
                    layout.len
                ),
            });
        }
        Ok(Self {
            config: config.clone(),
            layout,
            values,
        })
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub(crate) fn slice(&self, at: usize, n: usize) -> &[f64] {
        &self.values[at..at + n]
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn same_seed_same_params() {
        let cfg = ModelConfig::tiny();
        let a = Params::init(&cfg, 3).unwrap();
        let b = Params::init(&cfg, 3).unwrap();
        assert_eq!(a.values, b.values);
        let c = Params::init(&cfg, 4).unwrap();
        assert!(a.values.iter().zip(&c.values).any(|(x, y)| x != y));
    }

    #[test]
    fn layout_covers_every_value() {
        let cfg = ModelConfig::tiny();
        let (layout, blocks) = ParamLayout::build(&cfg);
        let total: usize = blocks.iter().map(|b| b.1).sum();
        assert_eq!(total, layout.len);
        assert_eq!(layout.head_b + VOCAB, layout.len);
    }

    #[test]
    fn init_respects_bounds() {
        let cfg = ModelConfig::tiny();
        let p = Params::init(&cfg, 1).unwrap();
        let l = &p.layout.layers[0];
        assert!(p.slice(l.ln1_g, cfg.d_model).iter().all(|&v| v == 1.0));
        assert!(p.slice(l.bq, cfg.d_model).iter().all(|&v| v == 0.0));
        let a = 1.0 / (cfg.d_model as f64).sqrt();
        assert!(p
            .slice(l.wq, cfg.d_model * cfg.d_model)
            .iter()
            .all(|v| v.abs() < a));
    }
}
