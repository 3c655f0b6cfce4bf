//! Seeded synthetic corpora and preference pairs for tests, fixtures and demos.

use rand::Rng;

use crate::augment::{build_sequence, Sample};
use crate::dpo::TrainPair;
use crate::error::Result;
use crate::ingest::VqaRecord;
use crate::raster::ImageRaster;
use crate::toylvlm::{answer_tokens, tokenize_prompt, ModelConfig, EOS};

pub const COLORS: [(&str, [u8; 3]); 8] = [
    ("red", [220, 30, 30]),
    ("green", [30, 180, 60]),
    ("blue", [40, 70, 220]),
    ("yellow", [240, 220, 40]),
    ("purple", [140, 50, 170]),
    ("orange", [250, 140, 20]),
    ("white", [245, 245, 245]),
    ("black", [15, 15, 15]),
];

/// A square with a background color and a centered block of a second color.
pub fn two_tone(side: usize, outer: [u8; 3], inner: [u8; 3]) -> ImageRaster {
    let mut img = ImageRaster::filled(side, side, outer);
    let (lo, hi) = (side / 4, side - side / 4);
    for y in lo..hi {
        for x in lo..hi {
            img.set_pixel(x, y, inner);
        }
    }
    img
}

/// `n` color-question records with images of the given side. Record `i`
/// is named `rec{i:03}`; its image path is `rec{i:03}.png`.
pub fn color_corpus(n: usize, side: usize, seed: u64) -> Vec<Sample> {
    let mut rng = crate::seeded_rng(seed, 0x434f_4c52);
    (0..n)
        .map(|i| {
            let outer = rng.gen_range(0..COLORS.len());
            let inner = (outer + rng.gen_range(1..COLORS.len())) % COLORS.len();
            let (outer_name, outer_rgb) = COLORS[outer];
            let (inner_name, inner_rgb) = COLORS[inner];
            let id = format!("rec{i:03}");
            Sample {
                record: VqaRecord {
                    id: id.clone(),
                    image_ref: format!("{id}.png").into(),
                    question: "What colors does the picture show?".into(),
                    answer: format!("A {inner_name} square on a {outer_name} background."),
                },
                image: two_tone(side, outer_rgb, inner_rgb),
            }
        })
        .collect()
}

/// Two-image sequence prompts. The chosen answer names the target image's
/// color; the rejected answer is a random byte string of the same token
/// length, standing in for a sample from an untrained model.
pub fn synthetic_pairs(config: &ModelConfig, n: usize, seed: u64) -> Result<Vec<TrainPair>> {
    let mut rng = crate::seeded_rng(seed, 0x5041_4952);
    let side = config.image_side;
    (0..n)
        .map(|i| {
            let a = rng.gen_range(0..COLORS.len());
            let b = (a + rng.gen_range(1..COLORS.len())) % COLORS.len();
            let mk = |id: &str, c: usize| Sample {
                record: VqaRecord {
                    id: id.into(),
                    image_ref: format!("{id}.png").into(),
                    question: "Color?".into(),
                    answer: COLORS[c].0.into(),
                },
                image: ImageRaster::filled(side, side, COLORS[c].1),
            };
            let target = mk("t", a);
            let other = mk("d", b);
            let position = rng.gen_range(1..=2);
            let prompt = build_sequence(format!("syn{i:04}"), &target, &[&other], position, seed)?;
            let chosen = answer_tokens(COLORS[a].0);
            let mut rejected: Vec<u16> = (1..chosen.len())
                .map(|_| rng.gen_range(0..256u16))
                .collect();
            rejected.push(EOS);
            Ok(TrainPair {
                id: prompt.id.clone(),
                prompt: tokenize_prompt(&prompt, config)?,
                chosen,
                rejected,
            })
        })
        .collect()
}
