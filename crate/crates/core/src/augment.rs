//! Multi-image prompt construction: sequence, grid collage and pic-in-pic.

use std::fmt;
use std::path::Path;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::ingest::VqaRecord;
use crate::raster::{self, ImageRaster};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum PromptFormat {
    #[serde(rename = "sequence")]
    Sequence,
    #[serde(rename = "grid")]
    GridCollage,
    #[serde(rename = "pip")]
    PicInPic,
}

impl PromptFormat {
    pub const ALL: [PromptFormat; 3] = [Self::Sequence, Self::GridCollage, Self::PicInPic];

    pub fn as_str(self) -> &'static str {
        match self {
            Self::Sequence => "sequence",
            Self::GridCollage => "grid",
            Self::PicInPic => "pip",
        }
    }

    /// Image counts a prompt of this format may carry.
    pub fn allowed_counts(self) -> &'static [usize] {
        match self {
            Self::Sequence => &SEQUENCE_COUNTS,
            Self::GridCollage => &GRID_COUNTS,
            Self::PicInPic => &[2],
        }
    }
}

impl fmt::Display for PromptFormat {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl std::str::FromStr for PromptFormat {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "sequence" => Ok(Self::Sequence),
            "grid" => Ok(Self::GridCollage),
            "pip" => Ok(Self::PicInPic),
            other => Err(Error::Config(format!("unknown prompt format {other:?}"))),
        }
    }
}

pub const SEQUENCE_COUNTS: [usize; 4] = [2, 3, 4, 5];
pub const GRID_COUNTS: [usize; 5] = [2, 3, 4, 6, 9];

/// Pixel rectangle, serialized as `[x, y, w, h]`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(from = "[usize; 4]", into = "[usize; 4]")]
pub struct CellRect {
    pub x: usize,
    pub y: usize,
    pub w: usize,
    pub h: usize,
}

impl From<[usize; 4]> for CellRect {
    fn from([x, y, w, h]: [usize; 4]) -> Self {
        Self { x, y, w, h }
    }
}

impl From<CellRect> for [usize; 4] {
    fn from(r: CellRect) -> Self {
        [r.x, r.y, r.w, r.h]
    }
}

impl CellRect {
    pub fn area(&self) -> usize {
        self.w * self.h
    }

    pub fn contains(&self, px: usize, py: usize) -> bool {
        px >= self.x && px < self.x + self.w && py >= self.y && py < self.y + self.h
    }

    pub fn intersects(&self, other: &CellRect) -> bool {
        self.x < other.x + other.w
            && other.x < self.x + self.w
            && self.y < other.y + other.h
            && other.y < self.y + self.h
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct MultiImagePrompt {
    pub id: String,
    pub format: PromptFormat,
    pub n_images: usize,
    /// One raster per image for sequences, a single composite otherwise.
    pub images: Vec<ImageRaster>,
    /// 1-based.
    pub target_index: usize,
    pub question: String,
    pub ground_truth: String,
    /// One rect per logical image for composites; empty for sequences.
    pub cell_rects: Vec<CellRect>,
    pub source_ids: Vec<String>,
    pub seed: u64,
}

/// A corpus record paired with its normalized image.
#[derive(Debug, Clone)]
pub struct Sample {
    pub record: VqaRecord,
    pub image: ImageRaster,
}

pub fn rewrite_question(question: &str, target_index: usize) -> Result<String> {
    if question.trim().is_empty() {
        return Err(Error::Precondition("question is empty".into()));
    }
    if target_index == 0 {
        return Err(Error::Precondition("target index is 1-based".into()));
    }
    Ok(format!("In Image{target_index}, {question}"))
}

fn check_distinct(target: &Sample, others: &[&Sample]) -> Result<()> {
    let mut ids = vec![target.record.id.as_str()];
    for s in others {
        if ids.contains(&s.record.id.as_str()) {
            return Err(Error::DuplicateSource(s.record.id.clone()));
        }
        ids.push(&s.record.id);
    }
    Ok(())
}

/// Places the target at 1-based `position` with the distractors, in order, around it.
fn interleave<'a>(
    target: &'a Sample,
    distractors: &[&'a Sample],
    position: usize,
) -> Vec<&'a Sample> {
    let mut all: Vec<&Sample> = distractors.to_vec();
    all.insert(position - 1, target);
    all
}

fn square_side(samples: &[&Sample]) -> Result<usize> {
    let side = samples[0].image.width();
    for s in samples {
        if s.image.width() != side || s.image.height() != side {
            return Err(Error::Precondition(format!(
                "image for {} is {}x{}, expected {side}x{side}",
                s.record.id,
                s.image.width(),
                s.image.height()
            )));
        }
    }
    Ok(side)
}

pub fn build_sequence(
    id: impl Into<String>,
    target: &Sample,
    distractors: &[&Sample],
    position: usize,
    seed: u64,
) -> Result<MultiImagePrompt> {
    let n = distractors.len() + 1;
    if n > 5 {
        return Err(Error::TooManyImages {
            format: "sequence",
            n,
        });
    }
    if n < 2 {
        return Err(Error::Precondition(
            "a sequence needs at least one distractor".into(),
        ));
    }
    if position == 0 || position > n {
        return Err(Error::IndexOutOfRange {
            index: position,
            len: n,
        });
    }
    check_distinct(target, distractors)?;
    let ordered = interleave(target, distractors, position);
    Ok(MultiImagePrompt {
        id: id.into(),
        format: PromptFormat::Sequence,
        n_images: n,
        images: ordered.iter().map(|s| s.image.clone()).collect(),
        target_index: position,
        question: rewrite_question(&target.record.question, position)?,
        ground_truth: target.record.answer.clone(),
        cell_rects: Vec::new(),
        source_ids: ordered.iter().map(|s| s.record.id.clone()).collect(),
        seed,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct LayoutSpec {
    pub rows: usize,
    pub cols: usize,
    pub cell_side: usize,
}

impl LayoutSpec {
    pub fn canvas(&self) -> (usize, usize) {
        (self.cols * self.cell_side, self.rows * self.cell_side)
    }

    /// Rect of 1-based cell `k` in reading order.
    pub fn cell_rect(&self, k: usize) -> CellRect {
        let s = self.cell_side;
        CellRect {
            x: ((k - 1) % self.cols) * s,
            y: ((k - 1) / self.cols) * s,
            w: s,
            h: s,
        }
    }
}

pub fn grid_layout(n: usize, cell_side: usize) -> Result<LayoutSpec> {
    let (rows, cols) = match n {
        2 => (1, 2),
        3 => (1, 3),
        4 => (2, 2),
        6 => (2, 3),
        9 => (3, 3),
        _ => return Err(Error::UnsupportedCount(n)),
    };
    Ok(LayoutSpec {
        rows,
        cols,
        cell_side,
    })
}

pub const TAG_SIDE: usize = 12;

/// 5x7 digit bitmaps, one byte per row, low 5 bits, MSB on the left.
const DIGITS: [[u8; 7]; 10] = [
    [0x0E, 0x11, 0x13, 0x15, 0x19, 0x11, 0x0E],
    [0x04, 0x0C, 0x04, 0x04, 0x04, 0x04, 0x0E],
    [0x0E, 0x11, 0x01, 0x02, 0x04, 0x08, 0x1F],
    [0x1F, 0x02, 0x04, 0x02, 0x01, 0x11, 0x0E],
    [0x02, 0x06, 0x0A, 0x12, 0x1F, 0x02, 0x02],
    [0x1F, 0x10, 0x1E, 0x01, 0x01, 0x11, 0x0E],
    [0x06, 0x08, 0x10, 0x1E, 0x11, 0x11, 0x0E],
    [0x1F, 0x01, 0x02, 0x04, 0x08, 0x08, 0x08],
    [0x0E, 0x11, 0x11, 0x0E, 0x11, 0x11, 0x0E],
    [0x0E, 0x11, 0x11, 0x0F, 0x01, 0x02, 0x0C],
];

/// Burns a white 12x12 box with a black digit into the top-left corner at (x, y).
pub fn draw_tag(canvas: &mut ImageRaster, x: usize, y: usize, digit: usize) {
    let side = TAG_SIDE.min(canvas.width() - x).min(canvas.height() - y);
    for dy in 0..side {
        for dx in 0..side {
            canvas.set_pixel(x + dx, y + dy, [255, 255, 255]);
        }
    }
    let glyph = DIGITS[digit % 10];
    let (gx, gy) = (x + 3, y + 2);
    for (row, bits) in glyph.iter().enumerate() {
        for col in 0..5 {
            if bits & (0x10 >> col) != 0 && gx + col < x + side && gy + row < y + side {
                canvas.set_pixel(gx + col, gy + row, [0, 0, 0]);
            }
        }
    }
}

pub fn build_grid(
    id: impl Into<String>,
    target: &Sample,
    distractors: &[&Sample],
    target_cell: usize,
    seed: u64,
) -> Result<MultiImagePrompt> {
    let n = distractors.len() + 1;
    let side = target.image.width();
    let layout = grid_layout(n, side)?;
    if target_cell == 0 || target_cell > n {
        return Err(Error::IndexOutOfRange {
            index: target_cell,
            len: n,
        });
    }
    check_distinct(target, distractors)?;
    let ordered = interleave(target, distractors, target_cell);
    square_side(&ordered)?;
    let (w, h) = layout.canvas();
    let mut canvas = ImageRaster::filled(w, h, [0, 0, 0]);
    let mut rects = Vec::with_capacity(n);
    for (i, s) in ordered.iter().enumerate() {
        let rect = layout.cell_rect(i + 1);
        canvas.paste(&s.image, rect.x, rect.y);
        draw_tag(&mut canvas, rect.x, rect.y, i + 1);
        rects.push(rect);
    }
    Ok(MultiImagePrompt {
        id: id.into(),
        format: PromptFormat::GridCollage,
        n_images: n,
        images: vec![canvas],
        target_index: target_cell,
        question: rewrite_question(&target.record.question, target_cell)?,
        ground_truth: target.record.answer.clone(),
        cell_rects: rects,
        source_ids: ordered.iter().map(|s| s.record.id.clone()).collect(),
        seed,
    })
}

/// Foreground rect for an `side` x `side` pic-in-pic canvas: half size, centered.
pub fn pip_rect(side: usize) -> CellRect {
    let fg = side / 2;
    let offset = (side - fg).div_ceil(2);
    CellRect {
        x: offset,
        y: offset,
        w: fg,
        h: fg,
    }
}

/// Pastes the half-size foreground onto the center of the background. The
/// question always refers to the foreground (image 2).
pub fn build_pip(
    id: impl Into<String>,
    background: &Sample,
    foreground: &Sample,
    seed: u64,
) -> Result<MultiImagePrompt> {
    if background.record.id == foreground.record.id {
        return Err(Error::DuplicateSource(foreground.record.id.clone()));
    }
    let side = square_side(&[background, foreground])?;
    let rect = pip_rect(side);
    let small = raster::resize_bilinear(&foreground.image, rect.w, rect.h);
    let mut canvas = background.image.clone();
    canvas.paste(&small, rect.x, rect.y);
    Ok(MultiImagePrompt {
        id: id.into(),
        format: PromptFormat::PicInPic,
        n_images: 2,
        images: vec![canvas],
        target_index: 2,
        question: rewrite_question(&foreground.record.question, 2)?,
        ground_truth: foreground.record.answer.clone(),
        cell_rects: vec![
            CellRect {
                x: 0,
                y: 0,
                w: side,
                h: side,
            },
            rect,
        ],
        source_ids: vec![background.record.id.clone(), foreground.record.id.clone()],
        seed,
    })
}

/// Format mix: 15.1k / 9.3k / 4.5k sequence / grid / pic-in-pic pairs.
pub const DEFAULT_PROPORTIONS: [f64; 3] = [15.1 / 28.9, 9.3 / 28.9, 4.5 / 28.9];

#[derive(Debug, Clone, PartialEq)]
pub struct MixConfig {
    /// Sequence, grid, pic-in-pic.
    pub proportions: [f64; 3],
    /// Weights over [`SEQUENCE_COUNTS`].
    pub sequence_weights: [f64; 4],
    /// Weights over [`GRID_COUNTS`].
    pub grid_weights: [f64; 5],
    pub seed: u64,
}

impl Default for MixConfig {
    fn default() -> Self {
        Self {
            proportions: DEFAULT_PROPORTIONS,
            sequence_weights: [1.0; 4],
            grid_weights: [1.0; 5],
            seed: 0,
        }
    }
}

impl MixConfig {
    pub fn validate(&self) -> Result<()> {
        let all = self
            .proportions
            .iter()
            .chain(&self.sequence_weights)
            .chain(&self.grid_weights);
        if all.clone().any(|p| !p.is_finite() || *p < 0.0) {
            return Err(Error::Config(
                "mix weights must be finite and nonnegative".into(),
            ));
        }
        let sum: f64 = self.proportions.iter().sum();
        if (sum - 1.0).abs() > 1e-9 {
            return Err(Error::Config(format!(
                "format proportions sum to {sum}, not 1"
            )));
        }
        if self.proportions[0] > 0.0 && self.sequence_weights.iter().sum::<f64>() <= 0.0 {
            return Err(Error::Config("sequence count weights are all zero".into()));
        }
        if self.proportions[1] > 0.0 && self.grid_weights.iter().sum::<f64>() <= 0.0 {
            return Err(Error::Config("grid count weights are all zero".into()));
        }
        Ok(())
    }
}

/// Largest-remainder apportionment of `total` over `weights` (which sum to 1).
/// Ties on the remainder go to the earlier entry.
pub fn largest_remainder(total: usize, weights: &[f64]) -> Vec<usize> {
    let quotas: Vec<f64> = weights.iter().map(|w| w * total as f64).collect();
    let mut counts: Vec<usize> = quotas.iter().map(|q| q.floor() as usize).collect();
    let assigned: usize = counts.iter().sum();
    let mut order: Vec<usize> = (0..weights.len()).collect();
    order.sort_by(|&a, &b| {
        let ra = quotas[a] - quotas[a].floor();
        let rb = quotas[b] - quotas[b].floor();
        rb.total_cmp(&ra).then(a.cmp(&b))
    });
    for &i in order.iter().take(total.saturating_sub(assigned)) {
        counts[i] += 1;
    }
    counts
}

fn weighted_pick<R: Rng>(rng: &mut R, weights: &[f64]) -> usize {
    let total: f64 = weights.iter().sum();
    let mut u = rng.gen::<f64>() * total;
    for (i, w) in weights.iter().enumerate() {
        if u < *w {
            return i;
        }
        u -= w;
    }
    weights.iter().rposition(|w| *w > 0.0).unwrap_or(0)
}

/// Draws `n_total` prompts split across formats by largest-remainder rounding.
/// Prompts come out grouped by format; each prompt's seed derives from the
/// config seed and its index, so output is a pure function of (corpus, config).
pub fn sample_mix(
    corpus: &[Sample],
    config: &MixConfig,
    n_total: usize,
) -> Result<Vec<MultiImagePrompt>> {
    config.validate()?;
    let per_format = largest_remainder(n_total, &config.proportions);
    let mut out = Vec::with_capacity(n_total);
    let mut index = 0u64;
    for (format, count) in PromptFormat::ALL.into_iter().zip(per_format) {
        for _ in 0..count {
            let mut rng = crate::seeded_rng(config.seed, index);
            let prompt_seed: u64 = rng.gen();
            let n = match format {
                PromptFormat::Sequence => {
                    SEQUENCE_COUNTS[weighted_pick(&mut rng, &config.sequence_weights)]
                }
                PromptFormat::GridCollage => {
                    GRID_COUNTS[weighted_pick(&mut rng, &config.grid_weights)]
                }
                PromptFormat::PicInPic => 2,
            };
            if corpus.len() < n {
                return Err(Error::CorpusTooSmall {
                    have: corpus.len(),
                    need: n,
                });
            }
            let picked = rand::seq::index::sample(&mut rng, corpus.len(), n).into_vec();
            let target = &corpus[picked[0]];
            let distractors: Vec<&Sample> = picked[1..].iter().map(|&i| &corpus[i]).collect();
            let id = format!("{}-{:05}", format.as_str(), index);
            let prompt = match format {
                PromptFormat::Sequence => {
                    let position = rng.gen_range(1..=n);
                    build_sequence(id, target, &distractors, position, prompt_seed)?
                }
                PromptFormat::GridCollage => {
                    let cell = rng.gen_range(1..=n);
                    build_grid(id, target, &distractors, cell, prompt_seed)?
                }
                PromptFormat::PicInPic => build_pip(id, distractors[0], target, prompt_seed)?,
            };
            out.push(prompt);
            index += 1;
        }
    }
    Ok(out)
}

/// One line of the prompt manifest.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub id: String,
    pub format: PromptFormat,
    pub n_images: usize,
    pub target_index: usize,
    pub question: String,
    pub ground_truth: String,
    pub images: Vec<String>,
    pub cell_rects: Vec<CellRect>,
    pub source_ids: Vec<String>,
    pub seed: u64,
}

/// Image file names (relative to the manifest directory) for a prompt.
pub fn image_file_names(prompt: &MultiImagePrompt) -> Vec<String> {
    if prompt.images.len() == 1 {
        vec![format!("images/{}.png", prompt.id)]
    } else {
        (1..=prompt.images.len())
            .map(|i| format!("images/{}_{}.png", prompt.id, i))
            .collect()
    }
}

impl ManifestEntry {
    pub fn from_prompt(prompt: &MultiImagePrompt) -> Self {
        Self {
            id: prompt.id.clone(),
            format: prompt.format,
            n_images: prompt.n_images,
            target_index: prompt.target_index,
            question: prompt.question.clone(),
            ground_truth: prompt.ground_truth.clone(),
            images: image_file_names(prompt),
            cell_rects: prompt.cell_rects.clone(),
            source_ids: prompt.source_ids.clone(),
            seed: prompt.seed,
        }
    }

    /// Reloads the prompt, reading image paths relative to `base`.
    pub fn load(&self, base: &Path) -> Result<MultiImagePrompt> {
        let images = self
            .images
            .iter()
            .map(|p| raster::load_png(&base.join(p)))
            .collect::<Result<Vec<_>>>()?;
        Ok(MultiImagePrompt {
            id: self.id.clone(),
            format: self.format,
            n_images: self.n_images,
            images,
            target_index: self.target_index,
            question: self.question.clone(),
            ground_truth: self.ground_truth.clone(),
            cell_rects: self.cell_rects.clone(),
            source_ids: self.source_ids.clone(),
            seed: self.seed,
        })
    }
}
