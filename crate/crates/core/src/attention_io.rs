//! MIAT1 attention dumps: magic `MIAT`, version byte 1, u32 LE n_layers,
//! n_heads, seq_len, then f32 LE weights in `[layer][head][query][key]` order.

use std::path::Path;

use crate::error::{Error, Result};
use crate::fsutil::write_atomic;
use crate::toylvlm::AttentionTensor;

const MAGIC: &[u8; 4] = b"MIAT";
const VERSION: u8 = 1;
const HEADER_LEN: usize = 4 + 1 + 12;

fn format_err(reason: impl Into<String>) -> Error {
    Error::Format {
        kind: "MIAT1",
        reason: reason.into(),
    }
}

pub fn encode_attention(att: &AttentionTensor) -> Vec<u8> {
    let (l, h, s) = (att.n_layers(), att.n_heads(), att.seq_len());
    let mut out = Vec::with_capacity(HEADER_LEN + l * h * s * s * 4);
    out.extend_from_slice(MAGIC);
    out.push(VERSION);
    for dim in [l, h, s] {
        out.extend_from_slice(&(dim as u32).to_le_bytes());
    }
    for layer in 0..l {
        for head in 0..h {
            for q in 0..s {
                let row = att.row(layer, head, q);
                for w in row
                    .iter()
                    .map(|&w| w as f32)
                    .chain(std::iter::repeat_n(0.0, s - q - 1))
                {
                    out.extend_from_slice(&w.to_le_bytes());
                }
            }
        }
    }
    out
}

/// Parses a dump. Weights above the diagonal must be exactly zero.
pub fn decode_attention(bytes: &[u8]) -> Result<AttentionTensor> {
    if bytes.len() < HEADER_LEN || &bytes[..4] != MAGIC {
        return Err(format_err("bad magic"));
    }
    if bytes[4] != VERSION {
        return Err(format_err(format!("unsupported version {}", bytes[4])));
    }
    let dim =
        |i: usize| u32::from_le_bytes(bytes[5 + 4 * i..9 + 4 * i].try_into().unwrap()) as usize;
    let (l, h, s) = (dim(0), dim(1), dim(2));
    let expected = l
        .checked_mul(h)
        .and_then(|v| v.checked_mul(s))
        .and_then(|v| v.checked_mul(s))
        .and_then(|v| v.checked_mul(4))
        .ok_or_else(|| format_err("dimensions overflow"))?;
    let body = &bytes[HEADER_LEN..];
    if body.len() != expected {
        return Err(format_err(format!(
            "expected {expected} weight bytes, found {}",
            body.len()
        )));
    }
    let at = |layer: usize, head: usize, q: usize, k: usize| {
        let i = (((layer * h + head) * s + q) * s + k) * 4;
        f32::from_le_bytes(body[i..i + 4].try_into().unwrap())
    };
    for layer in 0..l {
        for head in 0..h {
            for q in 0..s {
                for k in q + 1..s {
                    if at(layer, head, q, k) != 0.0 {
                        return Err(format_err(format!(
                            "nonzero weight above diagonal at ({layer}, {head}, {q}, {k})"
                        )));
                    }
                }
            }
        }
    }
    Ok(AttentionTensor::from_fn(l, h, s, |layer, head, q, k| {
        f64::from(at(layer, head, q, k))
    }))
}

pub fn write_attention(path: &Path, att: &AttentionTensor) -> Result<()> {
    write_atomic(path, &encode_attention(att))
}

pub fn read_attention(path: &Path) -> Result<AttentionTensor> {
    let bytes = std::fs::read(path).map_err(|source| Error::FileUnreadable {
        path: path.to_path_buf(),
        source,
    })?;
    decode_attention(&bytes)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample() -> AttentionTensor {
        AttentionTensor::from_fn(2, 3, 5, |l, h, q, k| {
            (1 + l + h + k) as f64 / (q + 1) as f64 / 8.0
        })
    }

    #[test]
    fn header_layout() {
        let bytes = encode_attention(&sample());
        assert_eq!(&bytes[..5], b"MIAT\x01");
        assert_eq!(&bytes[5..17], &[2, 0, 0, 0, 3, 0, 0, 0, 5, 0, 0, 0]);
        assert_eq!(bytes.len(), 17 + 2 * 3 * 5 * 5 * 4);
        // Weight (0, 0, 0, 1) is above the diagonal.
        assert_eq!(&bytes[21..25], &[0; 4]);
    }

    #[test]
    fn round_trip_within_f32() {
        let att = sample();
        let back = decode_attention(&encode_attention(&att)).unwrap();
        assert_eq!((back.n_layers(), back.n_heads(), back.seq_len()), (2, 3, 5));
        for q in 0..5 {
            for k in 0..=q {
                assert!((back.weight(1, 2, q, k) - att.weight(1, 2, q, k)).abs() < 1e-7);
            }
        }
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("a.miat");
        write_attention(&path, &att).unwrap();
        assert_eq!(read_attention(&path).unwrap(), back);
    }

    #[test]
    fn rejects_bad_input() {
        let mut bytes = encode_attention(&sample());
        assert!(decode_attention(&bytes[..bytes.len() - 1]).is_err());
        bytes[21] = 1;
        assert!(decode_attention(&bytes).is_err());
        bytes[4] = 2;
        assert!(decode_attention(&bytes).is_err());
        assert!(decode_attention(b"NOPE").is_err());
    }
}
