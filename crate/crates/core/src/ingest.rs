//! Single-image VQA corpus loading and image normalization.

use std::collections::HashSet;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::raster::{self, ImageRaster};

/// One single-image question/answer sample.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct VqaRecord {
    pub id: String,
    /// Image path as written in the corpus, relative to the image root.
    #[serde(rename = "image")]
    pub image_ref: PathBuf,
    pub question: String,
    pub answer: String,
}

impl VqaRecord {
    pub fn image_path(&self, image_root: &Path) -> PathBuf {
        image_root.join(&self.image_ref)
    }
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct RawRecord {
    id: Option<String>,
    image: Option<String>,
    question: Option<String>,
    answer: Option<String>,
}

#[derive(Debug, Clone, Default)]
pub struct Dataset {
    pub records: Vec<VqaRecord>,
    /// Lines rejected in lenient mode.
    pub skipped: usize,
}

fn parse_line(line: &str, seen: &HashSet<String>) -> std::result::Result<VqaRecord, String> {
    let raw: RawRecord = serde_json::from_str(line).map_err(|e| e.to_string())?;
    let field = |v: Option<String>, name: &str| -> std::result::Result<String, String> {
        match v {
            None => Err(format!("missing \"{name}\" field")),
            Some(s) if s.trim().is_empty() => Err(format!("\"{name}\" is empty")),
            Some(s) => Ok(s),
        }
    };
    let id = field(raw.id, "id")?;
    let image = field(raw.image, "image")?;
    let question = field(raw.question, "question")?;
    let answer = field(raw.answer, "answer")?;
    if seen.contains(&id) {
        return Err(format!("duplicate id {id:?}"));
    }
    Ok(VqaRecord {
        id,
        image_ref: PathBuf::from(image),
        question,
        answer,
    })
}

/// Parses a JSONL corpus. Strict mode fails on the first bad line; lenient
/// mode skips it and counts the skip. Blank lines are ignored.
pub fn load_dataset(path: &Path, strict: bool) -> Result<Dataset> {
    let text = fs::read_to_string(path).map_err(|source| Error::FileUnreadable {
        path: path.to_path_buf(),
        source,
    })?;
    let mut seen = HashSet::new();
    let mut out = Dataset::default();
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        match parse_line(line, &seen) {
            Ok(rec) => {
                seen.insert(rec.id.clone());
                out.records.push(rec);
            }
            Err(reason) if strict => {
                return Err(Error::MalformedRecord {
                    line: i + 1,
                    reason,
                });
            }
            Err(_) => out.skipped += 1,
        }
    }
    Ok(out)
}

pub fn load_image(path: &Path) -> Result<ImageRaster> {
    raster::load_png(path)
}

/// Resamples to `side` x `side`. `side` must be a positive multiple of `patch_size`.
pub fn normalize_image(
    raster: &ImageRaster,
    side: usize,
    patch_size: usize,
) -> Result<ImageRaster> {
    if side == 0 || patch_size == 0 || !side.is_multiple_of(patch_size) {
        return Err(Error::InvalidSide {
            side,
            patch: patch_size,
        });
    }
    Ok(raster::resize_bilinear(raster, side, side))
}
