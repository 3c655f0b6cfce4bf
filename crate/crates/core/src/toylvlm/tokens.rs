use crate::augment::{MultiImagePrompt, PromptFormat};
use crate::error::{Error, Result};
use crate::raster::ImageRaster;

use super::{ModelConfig, BOS, EOS, IMG_END, IMG_START};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Token {
    /// Byte (0..256) or special id from the vocabulary.
    Vocab(u16),
    /// Index into [`TokenSequence::patches`].
    Patch(u32),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TokenKind {
    Text,
    Patch,
    Special,
}

impl Token {
    pub fn kind(self) -> TokenKind {
        match self {
            Token::Vocab(id) if (id as usize) < super::BYTE_TOKENS => TokenKind::Text,
            Token::Vocab(_) => TokenKind::Special,
            Token::Patch(_) => TokenKind::Patch,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TokenSequence {
    pub tokens: Vec<Token>,
    /// Flattened patches, `patch_size^2 * 3` values in [0, 1] each.
    pub patches: Vec<Vec<f64>>,
    /// Token positions per logical image.
    pub image_spans: Vec<Vec<usize>>,
    /// First position after the prompt.
    pub answer_start: usize,
}

impl TokenSequence {
    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    /// Prompt followed by `answer`; `answer_start` is unchanged.
    pub fn with_answer(&self, answer: &[u16]) -> TokenSequence {
        let mut out = self.clone();
        out.tokens.extend(answer.iter().map(|&t| Token::Vocab(t)));
        out
    }

    pub fn prompt_tokens(&self) -> &[Token] {
        &self.tokens[..self.answer_start]
    }
}

/// UTF-8 bytes followed by EOS.
pub fn answer_tokens(text: &str) -> Vec<u16> {
    text.bytes().map(u16::from).chain([EOS]).collect()
}

fn push_patches(
    image: &ImageRaster,
    patch: usize,
    seq: &mut TokenSequence,
) -> Result<Vec<(usize, usize, usize)>> {
    if !image.width().is_multiple_of(patch) || !image.height().is_multiple_of(patch) {
        return Err(Error::InvalidSide {
            side: image.width().max(image.height()),
            patch,
        });
    }
    let mut placed = Vec::new();
    for py in 0..image.height() / patch {
        for px in 0..image.width() / patch {
            let mut values = Vec::with_capacity(patch * patch * 3);
            for y in 0..patch {
                for x in 0..patch {
                    let rgb = image.pixel(px * patch + x, py * patch + y);
                    values.extend(rgb.iter().map(|&c| c as f64 / 255.0));
                }
            }
            let idx = seq.patches.len() as u32;
            seq.patches.push(values);
            placed.push((
                seq.tokens.len(),
                px * patch + patch / 2,
                py * patch + patch / 2,
            ));
            seq.tokens.push(Token::Patch(idx));
        }
    }
    Ok(placed)
}

/// `[BOS]`, then per physical image `[IMG_START] patches [IMG_END]`, then the
/// question bytes. Composite prompts assign each patch to the last cell rect
/// containing its center pixel, so a pic-in-pic foreground claims its patches.
pub fn tokenize_prompt(prompt: &MultiImagePrompt, config: &ModelConfig) -> Result<TokenSequence> {
    let mut seq = TokenSequence {
        tokens: vec![Token::Vocab(BOS)],
        patches: Vec::new(),
        image_spans: Vec::new(),
        answer_start: 0,
    };
    let p = config.patch_size;
    match prompt.format {
        PromptFormat::Sequence => {
            for image in &prompt.images {
                if image.width() != config.image_side || image.height() != config.image_side {
                    return Err(Error::InvalidSide {
                        side: image.width(),
                        patch: p,
                    });
                }
                seq.tokens.push(Token::Vocab(IMG_START));
                let placed = push_patches(image, p, &mut seq)?;
                seq.image_spans
                    .push(placed.into_iter().map(|(pos, _, _)| pos).collect());
                seq.tokens.push(Token::Vocab(IMG_END));
            }
        }
        PromptFormat::GridCollage | PromptFormat::PicInPic => {
            let [image] = prompt.images.as_slice() else {
                return Err(Error::Precondition(format!(
                    "{} prompt {} carries {} images, expected one composite",
                    prompt.format,
                    prompt.id,
                    prompt.images.len()
                )));
            };
            seq.tokens.push(Token::Vocab(IMG_START));
            let placed = push_patches(image, p, &mut seq)?;
            seq.tokens.push(Token::Vocab(IMG_END));
            seq.image_spans = vec![Vec::new(); prompt.cell_rects.len()];
            for (pos, cx, cy) in placed {
                if let Some(cell) = prompt.cell_rects.iter().rposition(|r| r.contains(cx, cy)) {
                    seq.image_spans[cell].push(pos);
                }
            }
        }
    }
    seq.tokens
        .extend(prompt.question.bytes().map(|b| Token::Vocab(b as u16)));
    seq.answer_start = seq.tokens.len();
    if seq.len() > config.max_seq {
        return Err(Error::SequenceTooLong {
            len: seq.len(),
            max: config.max_seq,
        });
    }
    Ok(seq)
}
