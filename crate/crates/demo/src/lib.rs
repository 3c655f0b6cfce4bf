//! Browser bindings: compose a multi-image prompt, mine a rejected answer
//! from an untrained toy model, and watch DPO training on synthetic pairs.

use attnpair::augment::{build_grid, build_pip, build_sequence, MultiImagePrompt, PromptFormat};
use attnpair::dpo::{train, HyperParams, TrainState};
use attnpair::raster::ImageRaster;
use attnpair::selector::{select_rejected, threshold_for, RatioReport};
use attnpair::synthetic::{color_corpus, synthetic_pairs};
use attnpair::toylvlm::{generate_with_attention, tokenize_prompt, ModelConfig, Params};
use wasm_bindgen::prelude::*;

const SIDE: usize = 32;

fn js(e: attnpair::Error) -> JsError {
    JsError::new(&e.to_string())
}

fn mining_model() -> ModelConfig {
    ModelConfig {
        d_model: 16,
        n_layers: 2,
        n_heads: 2,
        ffn_dim: 32,
        patch_size: 8,
        image_side: SIDE,
        max_seq: 512,
        seed: 0,
    }
}

/// A composed prompt plus a display raster. Sequences are shown side by side.
#[wasm_bindgen]
pub struct DemoPrompt {
    prompt: MultiImagePrompt,
    view: ImageRaster,
    rects: Vec<u32>,
}

#[wasm_bindgen]
impl DemoPrompt {
    /// `format` is `sequence`, `grid` or `pip`; `target` is 1-based.
    #[wasm_bindgen(constructor)]
    pub fn new(
        format: &str,
        n_images: usize,
        target: usize,
        seed: u64,
    ) -> Result<DemoPrompt, JsError> {
        let format: PromptFormat = format.parse().map_err(js)?;
        let corpus = color_corpus(n_images.max(2), SIDE, seed);
        let prompt = match format {
            PromptFormat::Sequence => {
                let others: Vec<_> = corpus[1..n_images.max(1)].iter().collect();
                build_sequence("demo", &corpus[0], &others, target, seed)
            }
            PromptFormat::GridCollage => {
                let others: Vec<_> = corpus[1..n_images.max(1)].iter().collect();
                build_grid("demo", &corpus[0], &others, target, seed)
            }
            PromptFormat::PicInPic => build_pip("demo", &corpus[1], &corpus[0], seed),
        }
        .map_err(js)?;
        let (view, rects) = if prompt.format == PromptFormat::Sequence {
            let mut strip = ImageRaster::filled(SIDE * prompt.images.len(), SIDE, [255, 255, 255]);
            let mut rects = Vec::new();
            for (i, img) in prompt.images.iter().enumerate() {
                strip.paste(img, i * SIDE, 0);
                rects.extend([(i * SIDE) as u32, 0, SIDE as u32, SIDE as u32]);
            }
            (strip, rects)
        } else {
            let rects = prompt
                .cell_rects
                .iter()
                .flat_map(|r| [r.x as u32, r.y as u32, r.w as u32, r.h as u32])
                .collect();
            (prompt.images[0].clone(), rects)
        };
        Ok(DemoPrompt {
            prompt,
            view,
            rects,
        })
    }

    pub fn width(&self) -> usize {
        self.view.width()
    }

    pub fn height(&self) -> usize {
        self.view.height()
    }

    pub fn rgba(&self) -> Vec<u8> {
        self.view.to_rgba()
    }

    /// Flat `[x, y, w, h]` per logical image.
    pub fn rects(&self) -> Vec<u32> {
        self.rects.clone()
    }

    pub fn question(&self) -> String {
        self.prompt.question.clone()
    }

    pub fn ground_truth(&self) -> String {
        self.prompt.ground_truth.clone()
    }

    pub fn target_index(&self) -> usize {
        self.prompt.target_index
    }

    pub fn tau(&self) -> Result<f64, JsError> {
        threshold_for(self.prompt.format, self.prompt.n_images).map_err(js)
    }

    /// Samples `k` answers from an untrained toy model and measures how much
    /// of their image attention lands on the target.
    pub fn mine(&self, k: usize, temperature: f64, seed: u64) -> Result<Mining, JsError> {
        let cfg = mining_model();
        let params = Params::init(&cfg, seed).map_err(js)?;
        let seq = tokenize_prompt(&self.prompt, &cfg).map_err(js)?;
        let start = seq.answer_start;
        let mut texts = Vec::new();
        let mut ratios = Vec::new();
        let mut masses = Vec::new();
        for (cand, att) in
            generate_with_attention(&seq, &params, k, temperature, seed).map_err(js)?
        {
            let positions = start - 1..start - 1 + cand.tokens.len();
            let report = RatioReport::new(
                &att,
                positions,
                &seq.image_spans,
                cfg.middle_layer(),
                self.prompt.target_index,
            )
            .map_err(js)?;
            ratios.push(report.r);
            masses.extend(&report.per_image_mass);
            texts.push(cand.text);
        }
        let tau = self.tau()?;
        let selected = select_rejected(&ratios, tau).map_or(-1, |i| i as i32);
        Ok(Mining {
            texts,
            ratios,
            masses,
            selected,
        })
    }
}

#[wasm_bindgen]
pub struct Mining {
    texts: Vec<String>,
    ratios: Vec<f64>,
    masses: Vec<f64>,
    selected: i32,
}

#[wasm_bindgen]
impl Mining {
    pub fn ratios(&self) -> Vec<f64> {
        self.ratios.clone()
    }

    /// Per-image attention share, `n_images` values per candidate.
    pub fn masses(&self) -> Vec<f64> {
        self.masses.clone()
    }

    pub fn text(&self, i: usize) -> String {
        self.texts.get(i).cloned().unwrap_or_default()
    }

    /// Index of the rejected answer, or -1 when no candidate is at or below τ.
    pub fn selected(&self) -> i32 {
        self.selected
    }
}

/// Trains the toy model on synthetic color pairs. Returns
/// `[l_dpo, margin_mean, pref_accuracy]` per step, flattened.
#[wasm_bindgen]
pub fn train_curve(
    n_pairs: usize,
    epochs: usize,
    beta: f64,
    gamma: f64,
    learning_rate: f64,
    seed: u64,
) -> Result<Vec<f64>, JsError> {
    let cfg = ModelConfig {
        d_model: 16,
        n_layers: 2,
        n_heads: 2,
        ffn_dim: 32,
        patch_size: 4,
        image_side: 8,
        max_seq: 64,
        seed,
    };
    let pairs = synthetic_pairs(&cfg, n_pairs, seed).map_err(js)?;
    let hyper = HyperParams {
        beta,
        gamma,
        learning_rate,
        epochs,
        seed,
        ..Default::default()
    };
    let state = TrainState::fresh(&cfg, seed).map_err(js)?;
    let (_, log) = train(&pairs, state, &hyper).map_err(js)?;
    Ok(log
        .iter()
        .flat_map(|r| [r.l_dpo, r.margin_mean, r.pref_accuracy])
        .collect())
}
